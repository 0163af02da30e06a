#include "flowscan/model.hpp"

#include <cstring>
#include <fstream>
#include <set>
#include <utility>

#include <json.hpp>

#include "flowscan/binary_io.hpp"
#include "flowscan/errors.hpp"

namespace flowscan {

namespace ad = autodiff;
using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'F', 'S', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

struct Descriptor {
  std::string kind;
  double slope = 0.0;
  std::size_t parity = 0;
};

Descriptor parse_descriptor(const std::string& token) {
  const auto colon = token.find(':');
  Descriptor desc;
  desc.kind = colon == std::string::npos ? token : token.substr(0, colon);
  const std::string arg = colon == std::string::npos ? "" : token.substr(colon + 1);

  auto no_arg = [&]() {
    if (!arg.empty()) {
      throw ConfigError("transform '" + desc.kind + "' takes no argument, got '" + token + "'");
    }
  };
  auto parity_arg = [&]() {
    if (arg != "0" && arg != "1") {
      throw ConfigError("transform '" + desc.kind + "' needs parity 0 or 1, got '" + token + "'");
    }
    desc.parity = arg == "1" ? 1 : 0;
  };

  if (desc.kind == "eq_linear" || desc.kind == "eq_softmax") {
    no_arg();
  } else if (desc.kind == "leaky_relu") {
    try {
      std::size_t used = 0;
      desc.slope = std::stod(arg, &used);
      if (used != arg.size()) throw std::invalid_argument("trailing text");
    } catch (const std::exception&) {
      throw ConfigError("transform 'leaky_relu' needs a numeric slope, got '" + token + "'");
    }
    if (!(desc.slope > 0.0)) {
      throw ConfigError("leaky_relu slope must be positive, got '" + token + "'");
    }
  } else if (desc.kind == "coupling" || desc.kind == "set_coupling") {
    parity_arg();
  } else {
    throw ConfigError("unknown transform descriptor '" + token + "'");
  }
  return desc;
}

const char* base_name(BaseKind base) {
  switch (base) {
    case BaseKind::Scan:
      return "scan";
    case BaseKind::Iid:
      return "iid";
    case BaseKind::Flat:
      return "flat";
  }
  return "scan";
}

BaseKind base_from_name(const std::string& name) {
  if (name == "scan") return BaseKind::Scan;
  if (name == "iid") return BaseKind::Iid;
  if (name == "flat") return BaseKind::Flat;
  throw ConfigError("unknown base density '" + name + "' (expected scan, iid or flat)");
}

std::size_t take_count(const json& j, const char* key) {
  const json& v = j.at(key);
  if (!v.is_number_integer() && !v.is_number_unsigned()) {
    throw ConfigError(std::string("model option '") + key + "' must be an integer");
  }
  if (v.is_number_integer() && v.get<long long>() < 0) {
    throw ConfigError(std::string("model option '") + key + "' must be non-negative");
  }
  return v.get<std::size_t>();
}

}  // namespace

FlowScanConfig FlowScanConfig::defaults(std::size_t dim) {
  FlowScanConfig config;
  config.dim = dim;
  if (dim >= 2) {
    config.equivariant = {"eq_linear", "set_coupling:0", "set_coupling:1", "eq_softmax"};
  } else {
    config.equivariant = {"eq_linear", "eq_softmax"};
  }
  return config;
}

void FlowScanConfig::validate() const {
  if (dim == 0) throw ConfigError("model needs d >= 1");
  if (sort_key < 1 || sort_key > dim) {
    throw ConfigError("sort key dimension " + std::to_string(sort_key) +
                      " is out of range for d=" + std::to_string(dim));
  }
  if (hidden == 0 || mixture == 0 || layers == 0 || coupling_hidden == 0 || embed_dim == 0) {
    throw ConfigError("model sizes must all be positive");
  }
  for (const std::string& token : equivariant) {
    Descriptor desc = parse_descriptor(token);
    if ((desc.kind == "coupling" || desc.kind == "set_coupling") && dim < 2) {
      throw ConfigError("transform '" + token + "' needs d >= 2 to have conditioning coordinates");
    }
  }
  if (base == BaseKind::Flat && cardinality == 0) {
    throw ConfigError("the flat base needs a fixed cardinality");
  }
  if (base == BaseKind::Iid &&
      (!equivariant.empty() || correspondence_depth != 0 || recurrent_coupling)) {
    throw ConfigError("the i.i.d. base is a pure per-point baseline; it takes no transforms");
  }
}

std::string FlowScanConfig::to_json() const {
  json j;
  j["dim"] = dim;
  j["cardinality"] = cardinality;
  j["equivariant"] = equivariant;
  j["correspondence_depth"] = correspondence_depth;
  j["recurrent_coupling"] = recurrent_coupling;
  j["sort_key"] = sort_key;
  j["hidden"] = hidden;
  j["mixture"] = mixture;
  j["layers"] = layers;
  j["coupling_hidden"] = coupling_hidden;
  j["embed_dim"] = embed_dim;
  j["base"] = base_name(base);
  j["init_seed"] = init_seed;
  return j.dump();
}

FlowScanConfig FlowScanConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");

  static const std::set<std::string> known = {
      "dim",    "cardinality", "equivariant", "correspondence_depth", "recurrent_coupling",
      "sort_key", "hidden",    "mixture",     "layers",               "coupling_hidden",
      "embed_dim", "base",     "init_seed"};
  for (const auto& item : j.items()) {
    if (!known.count(item.key())) {
      throw ConfigError("unknown model option '" + item.key() + "'");
    }
  }

  FlowScanConfig config;
  try {
    if (j.contains("dim")) config.dim = take_count(j, "dim");
    if (j.contains("cardinality")) config.cardinality = take_count(j, "cardinality");
    if (j.contains("equivariant")) {
      config.equivariant.clear();
      for (const json& t : j.at("equivariant")) config.equivariant.push_back(t.get<std::string>());
    }
    if (j.contains("correspondence_depth")) {
      config.correspondence_depth = take_count(j, "correspondence_depth");
    }
    if (j.contains("recurrent_coupling")) {
      config.recurrent_coupling = j.at("recurrent_coupling").get<bool>();
    }
    if (j.contains("sort_key")) config.sort_key = take_count(j, "sort_key");
    if (j.contains("hidden")) config.hidden = take_count(j, "hidden");
    if (j.contains("mixture")) config.mixture = take_count(j, "mixture");
    if (j.contains("layers")) config.layers = take_count(j, "layers");
    if (j.contains("coupling_hidden")) config.coupling_hidden = take_count(j, "coupling_hidden");
    if (j.contains("embed_dim")) config.embed_dim = take_count(j, "embed_dim");
    if (j.contains("base")) config.base = base_from_name(j.at("base").get<std::string>());
    if (j.contains("init_seed")) config.init_seed = j.at("init_seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config has a malformed field: ") + e.what());
  }
  config.validate();
  return config;
}

FlowScanModel::FlowScanModel(FlowScanConfig config) : config_(std::move(config)) {
  config_.validate();
  Rng rng(config_.init_seed);
  const std::size_t d = config_.dim;

  for (std::size_t i = 0; i < config_.equivariant.size(); ++i) {
    const Descriptor desc = parse_descriptor(config_.equivariant[i]);
    const std::string prefix = "eq" + std::to_string(i);
    if (desc.kind == "eq_linear") {
      equivariant_.push_back(std::make_shared<EquivariantLinear>(store_, prefix, d));
    } else if (desc.kind == "eq_softmax") {
      equivariant_.push_back(std::make_shared<EquivariantSoftmaxMean>(store_, prefix, d));
    } else if (desc.kind == "leaky_relu") {
      equivariant_.push_back(std::make_shared<LeakyReluFlow>(desc.slope));
    } else if (desc.kind == "coupling") {
      equivariant_.push_back(std::make_shared<PointwiseCoupling>(
          store_, rng, prefix, d, DimensionMask::alternating(d, desc.parity),
          config_.coupling_hidden));
    } else {
      equivariant_.push_back(std::make_shared<SetCoupling>(
          store_, rng, prefix, d, DimensionMask::alternating(d, desc.parity),
          config_.coupling_hidden, config_.embed_dim));
    }
  }

  for (std::size_t i = 0; i < config_.correspondence_depth; ++i) {
    correspondence_.push_back(std::make_shared<CorrespondenceCoupling>(
        store_, rng, "corr" + std::to_string(i), d,
        i % 2 == 0 ? PairParity::EvenFromOdd : PairParity::OddFromEven,
        config_.coupling_hidden));
  }
  if (config_.recurrent_coupling) {
    correspondence_.push_back(
        std::make_shared<RecurrentCoupling>(store_, rng, "recc", d, config_.coupling_hidden, 1));
  }

  if (config_.base == BaseKind::Flat) {
    flat_ = std::make_unique<FlatBase>(store_, rng, "base", d, config_.cardinality,
                                       config_.mixture);
  } else {
    base_ = std::make_unique<BaseDensity>(store_, rng, "base", d, config_.hidden, config_.mixture,
                                          config_.layers);
  }
}

void FlowScanModel::check_schema(const ad::Var& x) const {
  if (x->value.rank() != 3) {
    throw ShapeError("model input must be batch x n x d, got " +
                     shape_to_string(x->value.shape()));
  }
  if (x->value.extent(2) != config_.dim) {
    throw ShapeError("model was built for d=" + std::to_string(config_.dim) + ", got " +
                     shape_to_string(x->value.shape()));
  }
  if (config_.cardinality != 0 && x->value.extent(1) != config_.cardinality) {
    throw ShapeError("model expects sets of " + std::to_string(config_.cardinality) +
                     " points, got " + shape_to_string(x->value.shape()));
  }
}

ad::Var FlowScanModel::log_prob(const ad::Var& x) const {
  check_schema(x);
  const std::size_t n = x->value.extent(1);

  if (config_.base == BaseKind::Iid) {
    return base_->iid_log_prob(x);
  }

  FlowResult eq = equivariant_.forward(x);
  ScanResult scan = sort_scan(eq.output, config_.sort_key);
  ad::Var z = scan.sorted;
  ad::Var total = eq.logdet;
  if (n >= 2 && !correspondence_.empty()) {
    FlowResult corr = correspondence_.forward(z);
    z = corr.output;
    total = ad::add(total, corr.logdet);
  }
  ad::Var seq = flat_ ? flat_->log_prob(z) : base_->sequence_log_prob(z);
  return ad::add(ad::add(total, seq), scan.correction);
}

Tensor FlowScanModel::log_prob(const SetBatch& x) const {
  ad::NoGradGuard guard;
  return log_prob(ad::constant(x.values))->value;
}

ad::Var FlowScanModel::ppll(const ad::Var& x) const {
  check_schema(x);
  const double n = static_cast<double>(x->value.extent(1));
  return ad::div(log_prob(x), n);
}

Tensor FlowScanModel::ppll(const SetBatch& x) const {
  ad::NoGradGuard guard;
  return ppll(ad::constant(x.values))->value;
}

SetBatch FlowScanModel::sample(std::size_t n, Rng& rng) const {
  if (n == 0) throw ConfigError("cannot sample an empty set");
  if (config_.cardinality != 0 && n != config_.cardinality) {
    throw ConfigError("model samples sets of exactly " + std::to_string(config_.cardinality) +
                      " points");
  }
  ad::NoGradGuard guard;

  Tensor draw;
  if (config_.base == BaseKind::Iid) {
    draw = base_->iid_sample(n, rng);
  } else if (flat_) {
    draw = flat_->sample(rng);
  } else {
    draw = base_->sequence_sample(n, rng);
  }

  ad::Var z = ad::constant(draw.reshaped({1, n, config_.dim}));
  if (n >= 2 && !correspondence_.empty()) {
    z = correspondence_.inverse(z).output;
  }
  z = equivariant_.inverse(z).output;

  // The rows already form the sampled set; the shuffle only hides the
  // scanned-space ordering from anyone eyeballing the output.
  const std::vector<std::size_t> perm = rng.permutation(n);
  const Tensor& rows = z->value;
  Tensor out({std::size_t{1}, n, config_.dim});
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t k = 0; k < config_.dim; ++k) {
      out[j * config_.dim + k] = rows[perm[j] * config_.dim + k];
    }
  }
  return SetBatch(out);
}

void FlowScanModel::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");

  out.write(kMagic, 4);
  io::put_u32(out, kVersion);

  json meta;
  meta["config"] = json::parse(config_.to_json());
  meta["step"] = step_;
  meta["schema"] = {{"n", config_.cardinality}, {"d", config_.dim}};
  const std::string text = meta.dump();
  io::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));

  io::put_u32(out, static_cast<std::uint32_t>(store_.size()));
  for (const auto& [name, var] : store_.params()) {
    io::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    const Tensor& value = var->value;
    io::put_u32(out, static_cast<std::uint32_t>(value.rank()));
    for (std::size_t a = 0; a < value.rank(); ++a) {
      io::put_u32(out, static_cast<std::uint32_t>(value.extent(a)));
    }
    for (std::size_t i = 0; i < value.numel(); ++i) io::put_f64(out, value[i]);
  }
  out.flush();
  if (!out) throw DataError("failed while writing '" + path + "'");
}

FlowScanModel FlowScanModel::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "' for reading");

  char magic[4];
  io::read_exact(in, magic, 4, "the checkpoint magic");
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError(FormatError::Kind::BadMagic, "'" + path + "' is not a model checkpoint");
  }
  const std::uint32_t version = io::take_u32(in, "the checkpoint version");
  if (version != kVersion) {
    throw FormatError(FormatError::Kind::BadVersion,
                      "unsupported checkpoint version " + std::to_string(version));
  }

  const std::uint32_t text_len = io::take_u32(in, "the config block length");
  std::string text(text_len, '\0');
  io::read_exact(in, text.data(), text_len, "the config block");

  FlowScanConfig config;
  std::size_t step = 0;
  try {
    json meta = json::parse(text);
    config = FlowScanConfig::from_json(meta.at("config").dump());
    step = meta.at("step").get<std::size_t>();
    const json& schema = meta.at("schema");
    if (schema.at("d").get<std::size_t>() != config.dim ||
        schema.at("n").get<std::size_t>() != config.cardinality) {
      throw FormatError(FormatError::Kind::SchemaMismatch,
                        "checkpoint schema disagrees with its own config");
    }
  } catch (const json::exception& e) {
    throw FormatError(FormatError::Kind::SchemaMismatch,
                      std::string("checkpoint header is malformed: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(FormatError::Kind::SchemaMismatch,
                      std::string("checkpoint config is invalid: ") + e.what());
  }

  FlowScanModel model(std::move(config));
  ParamStore& store = model.params();

  const std::uint32_t count = io::take_u32(in, "the parameter count");
  if (count != store.size()) {
    throw FormatError(FormatError::Kind::SchemaMismatch,
                      "checkpoint stores " + std::to_string(count) + " parameters, the model has " +
                          std::to_string(store.size()));
  }
  std::set<std::string> filled;
  for (std::uint32_t p = 0; p < count; ++p) {
    const std::uint32_t name_len = io::take_u32(in, "a parameter name length");
    std::string name(name_len, '\0');
    io::read_exact(in, name.data(), name_len, "a parameter name");
    if (!store.has(name)) {
      throw FormatError(FormatError::Kind::SchemaMismatch,
                        "checkpoint parameter '" + name + "' does not exist in the model");
    }
    if (!filled.insert(name).second) {
      throw FormatError(FormatError::Kind::SchemaMismatch,
                        "checkpoint repeats parameter '" + name + "'");
    }
    const std::uint32_t rank = io::take_u32(in, "a parameter rank");
    if (rank > 8) {
      throw FormatError(FormatError::Kind::SchemaMismatch,
                        "parameter '" + name + "' has an implausible rank");
    }
    std::vector<std::size_t> shape(rank);
    for (std::uint32_t a = 0; a < rank; ++a) shape[a] = io::take_u32(in, "a parameter extent");
    Tensor& value = store.get(name)->value;
    if (shape != value.shape()) {
      throw FormatError(FormatError::Kind::SchemaMismatch,
                        "checkpoint parameter '" + name + "' has shape " + shape_to_string(shape) +
                            ", the model expects " + shape_to_string(value.shape()));
    }
    for (std::size_t i = 0; i < value.numel(); ++i) {
      value[i] = io::take_f64(in, "parameter data");
    }
  }

  char probe;
  in.read(&probe, 1);
  if (in.gcount() == 1) {
    throw FormatError(FormatError::Kind::SchemaMismatch,
                      "unrecognized bytes after the last parameter");
  }

  model.set_step(step);
  return model;
}

}  // namespace flowscan
