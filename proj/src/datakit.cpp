#include "flss/datakit.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numbers>
#include <sstream>

#include "flss/errors.hpp"
#include "flss/random.hpp"

namespace flss {

Split parse_split(std::string_view name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw ValueError("unknown split: " + std::string(name));
}

std::string to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "unknown";
}

Dataset Dataset::subset(Split split) const {
  Dataset out;
  out.num_classes = num_classes;
  out.input_dim = input_dim;
  for (std::size_t i = 0; i < size(); ++i) {
    if (splits[i] != split) continue;
    out.inputs.push_back(inputs[i]);
    out.labels.push_back(labels[i]);
    out.splits.push_back(splits[i]);
    out.ids.push_back(ids[i]);
  }
  return out;
}

Dataset Dataset::head(std::size_t n) const {
  Dataset out = *this;
  const std::size_t keep = std::min(n, size());
  out.inputs.resize(keep);
  out.labels.resize(keep);
  out.splits.resize(keep);
  out.ids.resize(keep);
  return out;
}

void Dataset::validate() const {
  const std::size_t n = inputs.size();
  if (labels.size() != n || splits.size() != n || ids.size() != n) throw ShapeError("Dataset: field lengths differ");
  for (std::size_t i = 0; i < n; ++i) {
    if (inputs[i].size() != input_dim) throw ShapeError("Dataset: input " + std::to_string(i) + " has wrong dimension");
    if (labels[i] < 0 || labels[i] >= num_classes) throw ValueError("Dataset: label out of range");
  }
  std::vector<std::int64_t> sorted = ids;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) throw ValueError("Dataset: duplicate ids");
}

std::vector<Split> assign_splits(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(seed, {0x5b1}));
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t n_train = n * 8 / 10;
  const std::size_t n_val = n / 10;
  std::vector<Split> splits(n, Split::test);
  for (std::size_t k = 0; k < n; ++k) {
    splits[order[k]] = k < n_train ? Split::train : (k < n_train + n_val ? Split::val : Split::test);
  }
  return splits;
}

Dataset two_moons(std::size_t n, double noise_sigma, std::uint64_t seed) {
  if (n < 2) throw ValueError("two_moons: n must be at least 2");
  if (noise_sigma < 0) throw ValueError("two_moons: noise_sigma must be non-negative");
  Dataset d;
  d.num_classes = 2;
  d.input_dim = 2;
  Rng rng(derive_seed(seed, {0x3007}));
  std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
  std::normal_distribution<double> jitter(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    const double t = angle(rng);
    Vector p(2);
    if (label == 0) {
      p << std::cos(t), std::sin(t);
    } else {
      p << 1.0 - std::cos(t), 0.5 - std::sin(t);
    }
    if (noise_sigma > 0) {
      p[0] += noise_sigma * jitter(rng);
      p[1] += noise_sigma * jitter(rng);
    }
    d.inputs.push_back(std::move(p));
    d.labels.push_back(label);
    d.ids.push_back(static_cast<std::int64_t>(i));
  }
  d.splits = assign_splits(n, seed);
  return d;
}

Dataset gaussian_blobs(std::size_t k_classes, std::size_t n_per_class, const std::vector<Vector>& centers,
                       double sigma, std::uint64_t seed) {
  if (k_classes < 1) throw ValueError("gaussian_blobs: need at least one class");
  if (centers.size() != k_classes) throw ShapeError("gaussian_blobs: one center per class required");
  if (sigma < 0) throw ValueError("gaussian_blobs: sigma must be non-negative");
  const Index dim = centers.front().size();
  for (const auto& c : centers)
    if (c.size() != dim) throw ShapeError("gaussian_blobs: centers differ in dimension");
  for (std::size_t a = 0; a < k_classes; ++a)
    for (std::size_t b = a + 1; b < k_classes; ++b)
      if (centers[a] == centers[b]) {
        std::cerr << "warning: gaussian_blobs classes " << a << " and " << b << " share a center\n";
      }

  Dataset d;
  d.num_classes = static_cast<Index>(k_classes);
  d.input_dim = dim;
  Rng rng(derive_seed(seed, {0xb10b}));
  std::int64_t id = 0;
  for (std::size_t i = 0; i < n_per_class; ++i) {
    for (std::size_t c = 0; c < k_classes; ++c) {
      d.inputs.push_back(centers[c] + sigma * standard_normal<double>(dim, rng));
      d.labels.push_back(static_cast<int>(c));
      d.ids.push_back(id++);
    }
  }
  d.splits = assign_splits(d.inputs.size(), seed);
  return d;
}

namespace {

std::uint32_t read_be32(std::istream& in, const char* what) {
  std::array<unsigned char, 4> b{};
  if (!in.read(reinterpret_cast<char*>(b.data()), 4)) throw FormatError(std::string("IDX: truncated ") + what);
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | std::uint32_t{b[3]};
}

}  // namespace

Dataset read_idx(std::istream& images, std::istream& labels, std::size_t limit) {
  const std::uint32_t img_magic = read_be32(images, "image header");
  if (img_magic != 0x00000803) throw FormatError("IDX: bad image magic");
  const std::uint32_t lbl_magic = read_be32(labels, "label header");
  if (lbl_magic != 0x00000801) throw FormatError("IDX: bad label magic");
  const std::uint32_t n_img = read_be32(images, "image header");
  const std::uint32_t rows = read_be32(images, "image header");
  const std::uint32_t cols = read_be32(images, "image header");
  const std::uint32_t n_lbl = read_be32(labels, "label header");
  if (n_img != n_lbl) throw FormatError("IDX: image and label counts differ");

  const std::size_t n = limit == 0 ? n_img : std::min<std::size_t>(limit, n_img);
  const std::size_t pixels = static_cast<std::size_t>(rows) * cols;
  Dataset d;
  d.input_dim = static_cast<Index>(pixels);
  std::vector<unsigned char> buf(pixels);
  int max_label = -1;
  for (std::size_t i = 0; i < n; ++i) {
    if (!images.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(pixels))) {
      throw FormatError("IDX: truncated image data");
    }
    char lbl = 0;
    if (!labels.get(lbl)) throw FormatError("IDX: truncated label data");
    Vector x(static_cast<Index>(pixels));
    for (std::size_t p = 0; p < pixels; ++p) x[static_cast<Index>(p)] = buf[p] / 255.0;
    d.inputs.push_back(std::move(x));
    const int label = static_cast<unsigned char>(lbl);
    max_label = std::max(max_label, label);
    d.labels.push_back(label);
    d.splits.push_back(Split::test);
    d.ids.push_back(static_cast<std::int64_t>(i));
  }
  d.num_classes = std::max<Index>(10, max_label + 1);
  return d;
}

Dataset load_idx_images(const std::string& images_path, const std::string& labels_path, std::size_t limit) {
  std::ifstream images(images_path, std::ios::binary);
  if (!images) throw FormatError("cannot open " + images_path);
  std::ifstream labels(labels_path, std::ios::binary);
  if (!labels) throw FormatError("cannot open " + labels_path);
  return read_idx(images, labels, limit);
}

void write_dataset_csv(std::ostream& out, const Dataset& data) {
  out << "id,label";
  for (Index k = 0; k < data.input_dim; ++k) out << ",x" << k;
  out << '\n';
  char buf[32];
  for (std::size_t i = 0; i < data.size(); ++i) {
    out << data.ids[i] << ',' << data.labels[i];
    for (Index k = 0; k < data.input_dim; ++k) {
      auto res = std::to_chars(buf, buf + sizeof buf, data.inputs[i][k]);
      out << ',' << std::string_view(buf, static_cast<std::size_t>(res.ptr - buf));
    }
    out << '\n';
  }
}

Dataset read_dataset_csv(std::istream& in, Index num_classes) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("dataset CSV: missing header");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  if (header.size() < 3 || header[0] != "id" || header[1] != "label") {
    throw FormatError("dataset CSV: header must start with id,label,x0");
  }
  for (std::size_t k = 2; k < header.size(); ++k) {
    if (header[k] != "x" + std::to_string(k - 2)) throw FormatError("dataset CSV: bad column name " + header[k]);
  }
  Dataset d;
  d.input_dim = static_cast<Index>(header.size() - 2);
  std::size_t lineno = 1;
  int max_label = -1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != header.size()) throw FormatError("dataset CSV line " + std::to_string(lineno) + ": wrong field count");
    try {
      std::size_t used = 0;
      d.ids.push_back(std::stoll(cells[0], &used));
      const int label = std::stoi(cells[1]);
      if (label < 0) throw FormatError("negative label");
      d.labels.push_back(label);
      max_label = std::max(max_label, label);
      Vector x(d.input_dim);
      for (Index k = 0; k < d.input_dim; ++k) x[k] = std::stod(cells[static_cast<std::size_t>(k) + 2]);
      d.inputs.push_back(std::move(x));
    } catch (const std::exception& e) {
      throw FormatError("dataset CSV line " + std::to_string(lineno) + ": " + e.what());
    }
    d.splits.push_back(Split::test);
  }
  d.num_classes = num_classes > 0 ? num_classes : max_label + 1;
  d.validate();
  return d;
}

}  // namespace flss
