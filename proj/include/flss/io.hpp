#ifndef FLSS_IO_HPP
#define FLSS_IO_HPP

// On-disk formats: model checkpoints (JSON), flat key = value training
// configs, and dataset specifications.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>

#include <json.hpp>

#include "flss/datakit.hpp"
#include "flss/smoothing.hpp"
#include "flss/stochclf.hpp"
#include "flss/trainer.hpp"

namespace flss {

using Json = nlohmann::ordered_json;

inline constexpr int kCheckpointFormatVersion = 1;

struct ModelCheckpoint {
  TrainMethod model_kind = TrainMethod::flss;
  ModelParams params;
  NoiseBank bank;
  SmoothingConfig smoothing;
  Json train_config = Json::object();
  Json metrics_at_save = Json::object();
};

Json checkpoint_to_json(const ModelCheckpoint& ckpt);

/// Throws FormatError naming the first missing or malformed field.
ModelCheckpoint checkpoint_from_json(const Json& doc);

void save_checkpoint(const std::string& path, const ModelCheckpoint& ckpt);
ModelCheckpoint load_checkpoint(const std::string& path);

/// Where the data comes from. Text form, as accepted on the command line:
///   two_moons:n=2000,noise=0.1,seed=0
///   blobs:k=3,n=200,sigma=0.2,spread=1.5,seed=0
///   csv:path/to/data.csv
///   idx:images_path,labels_path[,limit]
struct DatasetSpec {
  std::string kind = "two_moons";
  std::size_t n = 2000;
  double noise = 0.1;
  std::size_t k = 3;
  double sigma = 0.2;
  double spread = 1.5;
  std::uint64_t seed = 0;
  std::string path;
  std::string labels_path;
  std::size_t limit = 0;
};

DatasetSpec parse_dataset_spec(std::string_view text);
std::string to_string(const DatasetSpec& spec);
Dataset make_dataset(const DatasetSpec& spec);

/// Everything a training run needs, as read from a config file.
struct TrainJob {
  TrainConfig train;
  DatasetSpec dataset;
  int bank_n = 100;
  std::uint64_t bank_seed = 0;
  double sd_scale = 2.0;
};

/// Parses `key = value` lines; `#` starts a comment. Unknown keys and
/// malformed values throw ConfigError naming the key. FLSS_SEED, when set in
/// the environment, overrides `seed`.
TrainJob parse_train_config(std::istream& in);
TrainJob load_train_config(const std::string& path);

Json train_config_to_json(const TrainJob& job);

}  // namespace flss

#endif  // FLSS_IO_HPP
