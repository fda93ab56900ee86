#include "flss/io.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <type_traits>

#include "flss/errors.hpp"

namespace flss {

namespace {

Json matrix_to_json(const Matrix& m) {
  Json rows = Json::array();
  for (Index r = 0; r < m.rows(); ++r) {
    Json row = Json::array();
    for (Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Json vector_to_json(const Vector& v) {
  Json out = Json::array();
  for (Index i = 0; i < v.size(); ++i) out.push_back(v[i]);
  return out;
}

const Json& field(const Json& obj, const char* key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key)) throw FormatError("checkpoint: missing field " + where + key);
  return obj.at(key);
}

template <typename T>
T get_as(const Json& obj, const char* key, const std::string& where) {
  try {
    return field(obj, key, where).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw FormatError("checkpoint: malformed field " + where + key);
  }
}

Vector vector_from_json(const Json& j, const std::string& what) {
  if (!j.is_array()) throw FormatError("checkpoint: " + what + " must be an array");
  Vector v(static_cast<Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw FormatError("checkpoint: non-numeric entry in " + what);
    v[static_cast<Index>(i)] = j[i].get<double>();
  }
  return v;
}

Matrix matrix_from_json(const Json& j, const std::string& what) {
  if (!j.is_array()) throw FormatError("checkpoint: " + what + " must be an array of rows");
  const Index rows = static_cast<Index>(j.size());
  const Index cols = rows > 0 ? static_cast<Index>(j[0].size()) : 0;
  Matrix m(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    const Vector row = vector_from_json(j[static_cast<std::size_t>(r)], what);
    if (row.size() != cols) throw FormatError("checkpoint: ragged rows in " + what);
    m.row(r) = row.transpose();
  }
  return m;
}

std::vector<Index> widths_from_json(const Json& j, const std::string& what) {
  if (!j.is_array()) throw FormatError("checkpoint: " + what + " must be an array");
  std::vector<Index> out;
  for (const auto& w : j) {
    if (!w.is_number_integer() || w.get<long long>() < 1) throw FormatError("checkpoint: bad width in " + what);
    out.push_back(w.get<Index>());
  }
  return out;
}

}  // namespace

Json checkpoint_to_json(const ModelCheckpoint& ckpt) {
  ckpt.params.validate();
  const Architecture& a = ckpt.params.arch;
  Json doc;
  doc["format_version"] = kCheckpointFormatVersion;
  doc["model_kind"] = to_string(ckpt.model_kind);
  doc["arch"] = {{"input_dim", a.input_dim},
                 {"trunk", a.trunk},
                 {"latent_dim", a.latent_dim},
                 {"head", a.head},
                 {"num_classes", a.num_classes}};
  Json weights = Json::array();
  for (const auto& layer : ckpt.params.layers) {
    weights.push_back({{"weight", matrix_to_json(layer.weight)}, {"bias", vector_to_json(layer.bias)}});
  }
  doc["weights"] = std::move(weights);
  Json vectors = Json::array();
  for (const auto& v : ckpt.bank.vectors) vectors.push_back(vector_to_json(v));
  doc["noise_bank"] = {{"seed", ckpt.bank.seed}, {"N", ckpt.bank.size()}, {"vectors", std::move(vectors)}};
  doc["smoothing"] = {{"threshold_f", ckpt.smoothing.threshold_f},
                      {"N", ckpt.smoothing.n},
                      {"sd_scale", ckpt.smoothing.sd_scale},
                      {"mode", to_string(ckpt.smoothing.mode)},
                      {"confidence_threshold", ckpt.smoothing.confidence_threshold}};
  doc["train_config"] = ckpt.train_config;
  doc["metrics_at_save"] = ckpt.metrics_at_save;
  return doc;
}

ModelCheckpoint checkpoint_from_json(const Json& doc) {
  const int version = get_as<int>(doc, "format_version", "");
  if (version != kCheckpointFormatVersion) {
    throw FormatError("checkpoint: unsupported format_version " + std::to_string(version));
  }
  ModelCheckpoint ckpt;
  if (doc.contains("model_kind")) {
    try {
      ckpt.model_kind = parse_train_method(get_as<std::string>(doc, "model_kind", ""));
    } catch (const ConfigError& e) {
      throw FormatError(std::string("checkpoint: ") + e.what());
    }
  }

  const Json& arch = field(doc, "arch", "");
  Architecture a;
  a.input_dim = get_as<Index>(arch, "input_dim", "arch.");
  a.trunk = widths_from_json(field(arch, "trunk", "arch."), "arch.trunk");
  a.latent_dim = get_as<Index>(arch, "latent_dim", "arch.");
  a.head = widths_from_json(field(arch, "head", "arch."), "arch.head");
  a.num_classes = get_as<Index>(arch, "num_classes", "arch.");
  ckpt.params.arch = a;

  const Json& weights = field(doc, "weights", "");
  if (!weights.is_array()) throw FormatError("checkpoint: weights must be an array");
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const std::string where = "weights[" + std::to_string(i) + "].";
    Matrix w = matrix_from_json(field(weights[i], "weight", where), where + "weight");
    Vector b = vector_from_json(field(weights[i], "bias", where), where + "bias");
    try {
      ckpt.params.layers.emplace_back(std::move(w), std::move(b));
    } catch (const ShapeError& e) {
      throw FormatError("checkpoint: " + where + " " + e.what());
    }
  }
  try {
    ckpt.params.validate();
  } catch (const ShapeError& e) {
    throw FormatError(std::string("checkpoint: weights do not match arch: ") + e.what());
  }

  const Json& bank = field(doc, "noise_bank", "");
  ckpt.bank.seed = get_as<std::uint64_t>(bank, "seed", "noise_bank.");
  const int bank_n = get_as<int>(bank, "N", "noise_bank.");
  const Json& vectors = field(bank, "vectors", "noise_bank.");
  if (!vectors.is_array() || static_cast<int>(vectors.size()) != bank_n) {
    throw FormatError("checkpoint: noise_bank.vectors does not hold N vectors");
  }
  for (const auto& v : vectors) {
    Vector eps = vector_from_json(v, "noise_bank.vectors");
    if (eps.size() != a.latent_dim) throw FormatError("checkpoint: noise vector length differs from latent_dim");
    ckpt.bank.vectors.push_back(std::move(eps));
  }

  const Json& sm = field(doc, "smoothing", "");
  ckpt.smoothing.threshold_f = get_as<int>(sm, "threshold_f", "smoothing.");
  ckpt.smoothing.n = get_as<int>(sm, "N", "smoothing.");
  ckpt.smoothing.sd_scale = get_as<double>(sm, "sd_scale", "smoothing.");
  try {
    ckpt.smoothing.mode = parse_smoothing_mode(get_as<std::string>(sm, "mode", "smoothing."));
    if (sm.contains("confidence_threshold")) {
      ckpt.smoothing.confidence_threshold = get_as<double>(sm, "confidence_threshold", "smoothing.");
    }
    ckpt.smoothing.validate();
  } catch (const ValueError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  if (ckpt.smoothing.n != bank_n) throw FormatError("checkpoint: smoothing.N differs from noise_bank.N");

  ckpt.train_config = doc.value("train_config", Json::object());
  ckpt.metrics_at_save = doc.value("metrics_at_save", Json::object());
  return ckpt;
}

void save_checkpoint(const std::string& path, const ModelCheckpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write checkpoint: " + path);
  out << checkpoint_to_json(ckpt).dump(1) << '\n';
  if (!out) throw FormatError("write failed: " + path);
}

ModelCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint: " + path);
  Json doc;
  try {
    doc = Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("checkpoint " + path + ": " + e.what());
  }
  return checkpoint_from_json(doc);
}

// --- dataset specs -------------------------------------------------------------

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <typename T>
T parse_number(const std::string& text, const std::string& key) {
  try {
    std::size_t used = 0;
    T value{};
    if constexpr (std::is_same_v<T, double>) {
      value = std::stod(text, &used);
    } else if constexpr (std::is_unsigned_v<T>) {
      if (!text.empty() && text[0] == '-') throw std::invalid_argument("negative");
      value = static_cast<T>(std::stoull(text, &used));
    } else {
      value = static_cast<T>(std::stoll(text, &used));
    }
    if (used != text.size()) throw std::invalid_argument("trailing characters");
    return value;
  } catch (const std::exception&) {
    throw ConfigError("bad value for '" + key + "': '" + text + "'");
  }
}

}  // namespace

DatasetSpec parse_dataset_spec(std::string_view text) {
  DatasetSpec spec;
  const auto colon = text.find(':');
  spec.kind = trim(text.substr(0, colon));
  const std::string rest = colon == std::string_view::npos ? std::string() : std::string(text.substr(colon + 1));
  if (spec.kind == "csv") {
    if (rest.empty()) throw ConfigError("dataset csv: missing path");
    spec.path = rest;
    return spec;
  }
  if (spec.kind == "idx") {
    const auto parts = split(rest, ',');
    if (parts.size() < 2 || parts.size() > 3) throw ConfigError("dataset idx: expected images,labels[,limit]");
    spec.path = parts[0];
    spec.labels_path = parts[1];
    if (parts.size() == 3) spec.limit = parse_number<std::size_t>(parts[2], "limit");
    return spec;
  }
  if (spec.kind != "two_moons" && spec.kind != "blobs") throw ConfigError("unknown dataset kind: " + spec.kind);
  if (rest.empty()) return spec;
  for (const auto& item : split(rest, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("dataset option without '=': " + item);
    const std::string key = trim(std::string_view(item).substr(0, eq));
    const std::string value = trim(std::string_view(item).substr(eq + 1));
    if (key == "n") spec.n = parse_number<std::size_t>(value, key);
    else if (key == "noise") spec.noise = parse_number<double>(value, key);
    else if (key == "seed") spec.seed = parse_number<std::uint64_t>(value, key);
    else if (key == "k" && spec.kind == "blobs") spec.k = parse_number<std::size_t>(value, key);
    else if (key == "sigma" && spec.kind == "blobs") spec.sigma = parse_number<double>(value, key);
    else if (key == "spread" && spec.kind == "blobs") spec.spread = parse_number<double>(value, key);
    else throw ConfigError("unknown dataset option '" + key + "' for " + spec.kind);
  }
  return spec;
}

std::string to_string(const DatasetSpec& spec) {
  std::ostringstream out;
  out << spec.kind << ':';
  if (spec.kind == "csv") {
    out << spec.path;
  } else if (spec.kind == "idx") {
    out << spec.path << ',' << spec.labels_path << ',' << spec.limit;
  } else if (spec.kind == "blobs") {
    out << "k=" << spec.k << ",n=" << spec.n << ",sigma=" << spec.sigma << ",spread=" << spec.spread
        << ",seed=" << spec.seed;
  } else {
    out << "n=" << spec.n << ",noise=" << spec.noise << ",seed=" << spec.seed;
  }
  return out.str();
}

Dataset make_dataset(const DatasetSpec& spec) {
  if (spec.kind == "two_moons") return two_moons(spec.n, spec.noise, spec.seed);
  if (spec.kind == "blobs") {
    std::vector<Vector> centers;
    for (std::size_t c = 0; c < spec.k; ++c) {
      const double angle = 2.0 * 3.14159265358979323846 * static_cast<double>(c) / static_cast<double>(spec.k);
      Vector center(2);
      center << spec.spread * std::cos(angle), spec.spread * std::sin(angle);
      centers.push_back(center);
    }
    return gaussian_blobs(spec.k, spec.n, centers, spec.sigma, spec.seed);
  }
  if (spec.kind == "csv") {
    std::ifstream in(spec.path);
    if (!in) throw ConfigError("cannot open dataset: " + spec.path);
    return read_dataset_csv(in);
  }
  if (spec.kind == "idx") {
    Dataset d = load_idx_images(spec.path, spec.labels_path, spec.limit);
    d.splits = assign_splits(d.size(), spec.seed);
    return d;
  }
  throw ConfigError("unknown dataset kind: " + spec.kind);
}

// --- training configs ------------------------------------------------------------

namespace {

std::vector<Index> parse_widths(const std::string& text, const std::string& key) {
  std::vector<Index> out;
  if (text.empty() || text == "none") return out;
  for (const auto& part : split(text, ',')) {
    const long long w = parse_number<long long>(part, key);
    if (w < 1) throw ConfigError("widths in '" + key + "' must be positive");
    out.push_back(static_cast<Index>(w));
  }
  return out;
}

}  // namespace

TrainJob parse_train_config(std::istream& in) {
  TrainJob job;
  TrainConfig& c = job.train;
  using Setter = std::function<void(const std::string&, const std::string&)>;
  const std::map<std::string, Setter, std::less<>> setters = {
      {"method", [&](auto& k, auto& v) {
         try {
           c.method = parse_train_method(v);
         } catch (const ConfigError&) {
           throw ConfigError("bad value for '" + k + "': '" + v + "'");
         }
       }},
      {"epochs", [&](auto& k, auto& v) { c.epochs = parse_number<int>(v, k); }},
      {"batch_size", [&](auto& k, auto& v) { c.batch_size = parse_number<int>(v, k); }},
      {"lr_max", [&](auto& k, auto& v) { c.lr_max = parse_number<double>(v, k); }},
      {"weight_decay", [&](auto& k, auto& v) { c.weight_decay = parse_number<double>(v, k); }},
      {"kl1_coeff", [&](auto& k, auto& v) { c.coeffs.kl1 = parse_number<double>(v, k); }},
      {"kl2_coeff", [&](auto& k, auto& v) { c.coeffs.kl2 = parse_number<double>(v, k); }},
      {"kl3_coeff", [&](auto& k, auto& v) { c.coeffs.kl3 = parse_number<double>(v, k); }},
      {"kl4_coeff", [&](auto& k, auto& v) { c.coeffs.kl4 = parse_number<double>(v, k); }},
      {"delta", [&](auto& k, auto& v) { c.attack.delta = parse_number<double>(v, k); }},
      {"attack_steps", [&](auto& k, auto& v) { c.attack.steps = parse_number<int>(v, k); }},
      {"attack_step_size", [&](auto& k, auto& v) { c.attack.step_size = parse_number<double>(v, k); }},
      {"attack_restarts", [&](auto& k, auto& v) { c.attack.restarts = parse_number<int>(v, k); }},
      {"awp_gamma", [&](auto& k, auto& v) { c.awp_gamma = parse_number<double>(v, k); }},
      {"eval_steps", [&](auto& k, auto& v) { c.eval_steps = parse_number<int>(v, k); }},
      {"seed", [&](auto& k, auto& v) { c.seed = parse_number<std::uint64_t>(v, k); }},
      {"trunk", [&](auto& k, auto& v) { c.arch.trunk = parse_widths(v, k); }},
      {"latent_dim", [&](auto& k, auto& v) { c.arch.latent_dim = parse_number<Index>(v, k); }},
      {"head", [&](auto& k, auto& v) { c.arch.head = parse_widths(v, k); }},
      {"dataset", [&](auto&, auto& v) { job.dataset = parse_dataset_spec(v); }},
      {"bank_n", [&](auto& k, auto& v) { job.bank_n = parse_number<int>(v, k); }},
      {"bank_seed", [&](auto& k, auto& v) { job.bank_seed = parse_number<std::uint64_t>(v, k); }},
      {"sd_scale", [&](auto& k, auto& v) { job.sd_scale = parse_number<double>(v, k); }},
  };

  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(std::string_view(body).substr(0, eq));
    const std::string value = trim(std::string_view(body).substr(eq + 1));
    auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("unknown config key '" + key + "' on line " + std::to_string(lineno));
    it->second(key, value);
  }
  if (const char* env = std::getenv("FLSS_SEED"); env != nullptr && *env != '\0') {
    c.seed = parse_number<std::uint64_t>(env, "FLSS_SEED");
  }
  if (job.bank_n < 1) throw ConfigError("bank_n must be at least 1");
  if (!(job.sd_scale > 0)) throw ConfigError("sd_scale must be positive");
  if (c.arch.latent_dim < 1) throw ConfigError("latent_dim must be positive");
  c.validate();
  return job;
}

TrainJob load_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path);
  return parse_train_config(in);
}

Json train_config_to_json(const TrainJob& job) {
  const TrainConfig& c = job.train;
  return Json{{"method", to_string(c.method)},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"lr_max", c.lr_max},
              {"weight_decay", c.weight_decay},
              {"kl1_coeff", c.coeffs.kl1},
              {"kl2_coeff", c.coeffs.kl2},
              {"kl3_coeff", c.coeffs.kl3},
              {"kl4_coeff", c.coeffs.kl4},
              {"delta", c.attack.delta},
              {"attack_steps", c.attack.steps},
              {"attack_step_size", c.attack.step_size},
              {"attack_restarts", c.attack.restarts},
              {"awp_gamma", c.awp_gamma},
              {"eval_steps", c.eval_steps},
              {"seed", c.seed},
              {"trunk", c.arch.trunk},
              {"latent_dim", c.arch.latent_dim},
              {"head", c.arch.head},
              {"dataset", to_string(job.dataset)},
              {"bank_n", job.bank_n},
              {"bank_seed", job.bank_seed},
              {"sd_scale", job.sd_scale}};
}

}  // namespace flss
