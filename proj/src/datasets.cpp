#include "flowscan/datasets.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <utility>

#include <json.hpp>

#include "flowscan/binary_io.hpp"
#include "flowscan/errors.hpp"

namespace flowscan {

namespace {

using nlohmann::json;
using io::put_f64;
using io::put_u32;
using io::read_exact;
using io::take_f64;
using io::take_u32;

constexpr char kMagic[4] = {'F', 'S', 'E', 'T'};
constexpr char kTrailerMagic[4] = {'M', 'E', 'T', 'A'};
constexpr std::uint32_t kVersion = 1;

json dataset_trailer(const SetDataset& dataset) {
  json trailer;
  trailer["metadata"] = json::parse(dataset.metadata_json.empty() ? "{}" : dataset.metadata_json);
  if (!dataset.splits.empty()) {
    json labels = json::array();
    for (Split s : dataset.splits) labels.push_back(static_cast<int>(s));
    trailer["splits"] = labels;
  }
  return trailer;
}

}  // namespace

std::size_t SetDataset::dim() const { return sets.empty() ? 0 : sets.front().extent(1); }

void SetDataset::validate() const {
  const std::size_t d = dim();
  for (const Tensor& s : sets) {
    if (s.rank() != 2) throw ShapeError("dataset entries must be n x d matrices");
    if (s.extent(1) != d) throw ShapeError("dataset entries disagree on point dimension");
    if (s.extent(0) < 1) throw ShapeError("dataset entries need at least one point");
    if (!s.all_finite()) throw NumericError("dataset contains non-finite values");
  }
  if (!splits.empty() && splits.size() != sets.size()) {
    throw ShapeError("split labels must cover every set");
  }
}

std::vector<std::size_t> SetDataset::indices_of(Split label) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < splits.size(); ++i) {
    if (splits[i] == label) out.push_back(i);
  }
  return out;
}

SetDataset SetDataset::subset(const std::vector<std::size_t>& indices) const {
  SetDataset out;
  out.metadata_json = metadata_json;
  for (std::size_t i : indices) {
    if (i >= sets.size()) throw ShapeError("dataset subset index out of range");
    out.sets.push_back(sets[i]);
    if (!splits.empty()) out.splits.push_back(splits[i]);
  }
  return out;
}

SetDataset gen_sinusoid(std::size_t N, std::size_t n, std::uint64_t seed, double noise_scale) {
  if (N < 1 || n < 2) throw ConfigError("sinusoid generator needs N >= 1 and n >= 2");
  if (noise_scale < 0.0) throw ConfigError("noise_scale must be nonnegative");
  const double pi = std::acos(-1.0);
  const double sd = noise_scale / static_cast<double>(n);
  const double phase_sd = sd * std::sqrt(1.0 + (pi / 3.0) * (pi / 3.0));
  Rng rng(seed);
  SetDataset dataset;
  dataset.sets.reserve(N);
  std::vector<double> rows(n * 2);
  for (std::size_t s = 0; s < N; ++s) {
    const double amp = 2.0 + rng.normal() * sd;
    const double phase = rng.normal() * phase_sd;
    rows[0] = amp;
    rows[1] = phase;
    for (std::size_t k = 2; k <= n; ++k) {
      const double angle = pi * static_cast<double>(k) / static_cast<double>(n);
      rows[(k - 1) * 2] = amp * std::cos(angle) + rng.normal() * sd;
      rows[(k - 1) * 2 + 1] = std::cos(angle + phase) + rng.normal() * sd;
    }
    const std::vector<std::size_t> perm = rng.permutation(n);
    Tensor set({n, 2});
    for (std::size_t j = 0; j < n; ++j) {
      set[j * 2] = rows[perm[j] * 2];
      set[j * 2 + 1] = rows[perm[j] * 2 + 1];
    }
    dataset.sets.push_back(std::move(set));
  }
  json meta = {{"generator", "sinusoid"}, {"N", N},
               {"n", n},                 {"seed", seed},
               {"noise_scale", noise_scale}};
  dataset.metadata_json = meta.dump();
  return dataset;
}

SetDataset gen_shape_clouds(std::size_t N, std::size_t n, CloudShape shape, double radius_min,
                            double radius_max, double noise_sd, std::uint64_t seed,
                            double center_box) {
  if (N < 1 || n < 1) throw ConfigError("shape generator needs N >= 1 and n >= 1");
  if (!(radius_min > 0.0) || radius_max < radius_min) {
    throw ConfigError("shape generator needs 0 < radius_min <= radius_max");
  }
  if (noise_sd < 0.0 || center_box < 0.0) {
    throw ConfigError("noise_sd and center_box must be nonnegative");
  }
  const double pi = std::acos(-1.0);
  Rng rng(seed);
  SetDataset dataset;
  dataset.sets.reserve(N);
  for (std::size_t s = 0; s < N; ++s) {
    const double radius = radius_min + rng.uniform() * (radius_max - radius_min);
    const double cx = (2.0 * rng.uniform() - 1.0) * center_box;
    const double cy = (2.0 * rng.uniform() - 1.0) * center_box;
    Tensor set({n, 2});
    for (std::size_t i = 0; i < n; ++i) {
      double px = 0.0;
      double py = 0.0;
      if (shape == CloudShape::Circle) {
        const double theta = rng.uniform() * 2.0 * pi;
        px = radius * std::cos(theta);
        py = radius * std::sin(theta);
      } else {
        const double u = rng.uniform() * 4.0;
        const int side = std::min(3, static_cast<int>(u));
        const double t = u - side;
        switch (side) {
          case 0: px = -radius + 2.0 * radius * t; py = -radius; break;
          case 1: px = radius; py = -radius + 2.0 * radius * t; break;
          case 2: px = radius - 2.0 * radius * t; py = radius; break;
          default: px = -radius; py = radius - 2.0 * radius * t; break;
        }
      }
      set[i * 2] = cx + px + rng.normal() * noise_sd;
      set[i * 2 + 1] = cy + py + rng.normal() * noise_sd;
    }
    dataset.sets.push_back(std::move(set));
  }
  json meta = {{"generator", shape == CloudShape::Circle ? "circle" : "square"},
               {"N", N},
               {"n", n},
               {"seed", seed},
               {"radius_min", radius_min},
               {"radius_max", radius_max},
               {"noise_sd", noise_sd},
               {"center_box", center_box}};
  dataset.metadata_json = meta.dump();
  return dataset;
}

void write_fset(const SetDataset& dataset, const std::string& path) {
  dataset.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out.write(kMagic, 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(dataset.sets.size()));
  for (const Tensor& set : dataset.sets) {
    put_u32(out, static_cast<std::uint32_t>(set.extent(0)));
    put_u32(out, static_cast<std::uint32_t>(set.extent(1)));
    for (std::size_t i = 0; i < set.numel(); ++i) put_f64(out, set[i]);
  }
  const std::string trailer = dataset_trailer(dataset).dump();
  out.write(kTrailerMagic, 4);
  put_u32(out, static_cast<std::uint32_t>(trailer.size()));
  out.write(trailer.data(), static_cast<std::streamsize>(trailer.size()));
  if (!out) throw DataError("failed writing '" + path + "'");
}

SetDataset read_fset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "' for reading");
  char magic[4];
  read_exact(in, magic, 4, "header");
  if (std::string(magic, 4) != std::string(kMagic, 4)) {
    throw FormatError(FormatError::Kind::BadMagic, "'" + path + "' is not a set dataset file");
  }
  const std::uint32_t version = take_u32(in, "version");
  if (version != kVersion) {
    throw FormatError(FormatError::Kind::BadVersion,
                      "unsupported set dataset version " + std::to_string(version));
  }
  const std::uint32_t count = take_u32(in, "set count");
  SetDataset dataset;
  dataset.sets.reserve(count);
  std::size_t d_seen = 0;
  for (std::uint32_t s = 0; s < count; ++s) {
    const std::uint32_t n = take_u32(in, "set cardinality");
    const std::uint32_t d = take_u32(in, "set dimension");
    if (n == 0 || d == 0) {
      throw FormatError(FormatError::Kind::SchemaMismatch, "set with zero cardinality or dimension");
    }
    if (s == 0) {
      d_seen = d;
    } else if (d != d_seen) {
      throw FormatError(FormatError::Kind::SchemaMismatch,
                        "sets disagree on point dimension (" + std::to_string(d_seen) + " vs " +
                            std::to_string(d) + ")");
    }
    Tensor set({n, d});
    for (std::size_t i = 0; i < set.numel(); ++i) set[i] = take_f64(in, "set values");
    dataset.sets.push_back(std::move(set));
  }
  // Optional trailer with split labels and generator metadata.
  char trailer_magic[4];
  in.read(trailer_magic, 4);
  if (in.gcount() == 0) return dataset;
  if (in.gcount() != 4 || std::string(trailer_magic, 4) != std::string(kTrailerMagic, 4)) {
    throw FormatError(FormatError::Kind::SchemaMismatch, "unrecognized bytes after the last set");
  }
  const std::uint32_t len = take_u32(in, "trailer length");
  std::string payload(len, '\0');
  read_exact(in, payload.data(), len, "trailer");
  json trailer;
  try {
    trailer = json::parse(payload);
  } catch (const json::exception& e) {
    throw FormatError(FormatError::Kind::SchemaMismatch,
                      std::string("trailer is not valid JSON: ") + e.what());
  }
  if (trailer.contains("metadata")) dataset.metadata_json = trailer["metadata"].dump();
  if (trailer.contains("splits")) {
    const auto& labels = trailer["splits"];
    if (!labels.is_array() || labels.size() != dataset.sets.size()) {
      throw FormatError(FormatError::Kind::SchemaMismatch, "split labels do not match set count");
    }
    for (const auto& v : labels) {
      const int label = v.get<int>();
      if (label < 0 || label > 2) {
        throw FormatError(FormatError::Kind::SchemaMismatch, "unknown split label");
      }
      dataset.splits.push_back(static_cast<Split>(label));
    }
  }
  char extra;
  if (in.read(&extra, 1).gcount() != 0) {
    throw FormatError(FormatError::Kind::SchemaMismatch, "unrecognized bytes after the trailer");
  }
  return dataset;
}

SetDataset split(const SetDataset& dataset, double train_frac, double val_frac, double test_frac,
                 std::uint64_t seed) {
  if (train_frac < 0.0 || val_frac < 0.0 || test_frac < 0.0 ||
      std::fabs(train_frac + val_frac + test_frac - 1.0) > 1e-9) {
    throw ConfigError("split fractions must be nonnegative and sum to 1");
  }
  const std::size_t N = dataset.sets.size();
  const auto train_end = static_cast<std::size_t>(std::llround(train_frac * N));
  auto val_end = static_cast<std::size_t>(std::llround((train_frac + val_frac) * N));
  val_end = std::min(std::max(val_end, train_end), N);
  Rng rng(seed);
  const std::vector<std::size_t> order = rng.permutation(N);
  SetDataset out = dataset;
  out.splits.assign(N, Split::Test);
  for (std::size_t rank = 0; rank < N; ++rank) {
    out.splits[order[rank]] =
        rank < train_end ? Split::Train : (rank < val_end ? Split::Val : Split::Test);
  }
  return out;
}

SetDataset jitter(const SetDataset& dataset, double sd, std::uint64_t seed) {
  if (sd < 0.0) throw ConfigError("jitter standard deviation must be nonnegative");
  if (sd == 0.0) return dataset;
  Rng rng(seed);
  SetDataset out = dataset;
  for (Tensor& set : out.sets) {
    for (std::size_t i = 0; i < set.numel(); ++i) set[i] += rng.normal() * sd;
  }
  return out;
}

void write_csv(const SetDataset& dataset, const std::string& path) {
  dataset.validate();
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  const std::size_t d = dataset.dim();
  out << "set_id";
  for (std::size_t j = 1; j <= d; ++j) out << ",v" << j;
  out << "\n";
  char buffer[64];
  for (std::size_t s = 0; s < dataset.sets.size(); ++s) {
    const Tensor& set = dataset.sets[s];
    for (std::size_t i = 0; i < set.extent(0); ++i) {
      out << s;
      for (std::size_t j = 0; j < d; ++j) {
        std::snprintf(buffer, sizeof(buffer), "%.17g", set[i * d + j]);
        out << ',' << buffer;
      }
      out << "\n";
    }
  }
  if (!out) throw DataError("failed writing '" + path + "'");
}

SetDataset read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "' for reading");
  std::string line;
  if (!std::getline(in, line)) throw DataError("'" + path + "' is empty");
  std::size_t d = 0;
  {
    std::stringstream header(line);
    std::string column;
    bool first = true;
    while (std::getline(header, column, ',')) {
      if (first) {
        if (column != "set_id") throw DataError("csv header must start with set_id");
        first = false;
      } else {
        ++d;
      }
    }
    if (d == 0) throw DataError("csv header names no value columns");
  }
  std::map<std::string, std::size_t> id_order;
  std::vector<std::vector<double>> rows_by_set;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream row(line);
    std::string cell;
    if (!std::getline(row, cell, ',')) {
      throw DataError("csv line " + std::to_string(line_no) + " is malformed");
    }
    auto [it, inserted] = id_order.try_emplace(cell, rows_by_set.size());
    if (inserted) rows_by_set.emplace_back();
    std::vector<double>& bucket = rows_by_set[it->second];
    std::size_t got = 0;
    while (std::getline(row, cell, ',')) {
      try {
        std::size_t used = 0;
        const double v = std::stod(cell, &used);
        if (used != cell.size()) throw std::invalid_argument(cell);
        bucket.push_back(v);
      } catch (const std::exception&) {
        throw DataError("csv line " + std::to_string(line_no) + " has a non-numeric value '" +
                        cell + "'");
      }
      ++got;
    }
    if (got != d) {
      throw DataError("csv line " + std::to_string(line_no) + " has " + std::to_string(got) +
                      " values, expected " + std::to_string(d));
    }
  }
  SetDataset dataset;
  for (std::vector<double>& flat : rows_by_set) {
    const std::size_t n = flat.size() / d;
    dataset.sets.emplace_back(std::vector<std::size_t>{n, d}, std::move(flat));
  }
  dataset.validate();
  return dataset;
}

SetBatch stack_sets(const std::vector<Tensor>& sets) {
  if (sets.empty()) throw ShapeError("cannot stack zero sets");
  const std::size_t n = sets.front().extent(0);
  const std::size_t d = sets.front().extent(1);
  Tensor values({sets.size(), n, d});
  for (std::size_t s = 0; s < sets.size(); ++s) {
    if (sets[s].rank() != 2 || sets[s].extent(0) != n || sets[s].extent(1) != d) {
      throw ShapeError("stacked sets must share cardinality and dimension");
    }
    for (std::size_t i = 0; i < n * d; ++i) values[s * n * d + i] = sets[s][i];
  }
  return SetBatch(std::move(values));
}

SetBatch stack_sets(const SetDataset& dataset, const std::vector<std::size_t>& indices) {
  std::vector<Tensor> picked;
  picked.reserve(indices.size());
  for (std::size_t i : indices) {
    if (i >= dataset.sets.size()) throw ShapeError("stack index out of range");
    picked.push_back(dataset.sets[i]);
  }
  return stack_sets(picked);
}

}  // namespace flowscan
