#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>
#include <string>
#include <vector>

#include "flowscan/datasets.hpp"
#include "flowscan/errors.hpp"
#include "flowscan/model.hpp"
#include "flowscan/oracle.hpp"
#include "flowscan/train.hpp"
#include "flowscan/verify.hpp"

namespace py = pybind11;
using namespace flowscan;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor tensor_from(const DoubleArray& array) {
  std::vector<std::size_t> shape(array.shape(), array.shape() + array.ndim());
  std::vector<double> data(array.data(), array.data() + array.size());
  return Tensor(std::move(shape), std::move(data));
}

py::array_t<double> numpy_from(const Tensor& tensor) {
  std::vector<py::ssize_t> shape(tensor.shape().begin(), tensor.shape().end());
  py::array_t<double> array(shape);
  std::memcpy(array.mutable_data(), tensor.data(), tensor.numel() * sizeof(double));
  return array;
}

// Accepts one set (n, d) or a batch (B, n, d); remembers which so results
// can be returned with matching rank.
SetBatch batch_from(const DoubleArray& array, bool& squeezed) {
  squeezed = array.ndim() == 2;
  Tensor tensor = tensor_from(array);
  if (squeezed) {
    tensor = tensor.reshaped({1, tensor.extent(0), tensor.extent(1)});
  } else if (array.ndim() != 3) {
    throw ShapeError("expected an (n, d) set or a (B, n, d) batch");
  }
  return SetBatch(std::move(tensor));
}

py::object scores_out(const Tensor& values, bool squeezed) {
  if (squeezed) return py::float_(values[0]);
  return numpy_from(values);
}

std::string split_name(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    default: return "test";
  }
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  if (name == "test") return Split::Test;
  throw ConfigError("unknown split '" + name + "' (use train|val|test)");
}

std::string base_name(BaseKind base) {
  switch (base) {
    case BaseKind::Scan: return "scan";
    case BaseKind::Iid: return "iid";
    default: return "flat";
  }
}

BaseKind base_from_name(const std::string& name) {
  if (name == "scan") return BaseKind::Scan;
  if (name == "iid") return BaseKind::Iid;
  if (name == "flat") return BaseKind::Flat;
  throw ConfigError("unknown base '" + name + "' (use scan|iid|flat)");
}

}  // namespace

PYBIND11_MODULE(flowscan, m) {
  m.doc() = "Exchangeable density estimation over point sets";

  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<DataError>(m, "DataError", PyExc_RuntimeError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

  py::class_<FlowScanConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_static("defaults", &FlowScanConfig::defaults, py::arg("dim"))
      .def_readwrite("dim", &FlowScanConfig::dim)
      .def_readwrite("cardinality", &FlowScanConfig::cardinality)
      .def_readwrite("equivariant", &FlowScanConfig::equivariant)
      .def_readwrite("correspondence_depth", &FlowScanConfig::correspondence_depth)
      .def_readwrite("recurrent_coupling", &FlowScanConfig::recurrent_coupling)
      .def_readwrite("sort_key", &FlowScanConfig::sort_key)
      .def_readwrite("hidden", &FlowScanConfig::hidden)
      .def_readwrite("mixture", &FlowScanConfig::mixture)
      .def_readwrite("layers", &FlowScanConfig::layers)
      .def_readwrite("coupling_hidden", &FlowScanConfig::coupling_hidden)
      .def_readwrite("embed_dim", &FlowScanConfig::embed_dim)
      .def_readwrite("init_seed", &FlowScanConfig::init_seed)
      .def_property(
          "base", [](const FlowScanConfig& c) { return base_name(c.base); },
          [](FlowScanConfig& c, const std::string& name) { c.base = base_from_name(name); })
      .def("validate", &FlowScanConfig::validate)
      .def("to_json", &FlowScanConfig::to_json)
      .def_static("from_json", &FlowScanConfig::from_json, py::arg("text"));

  py::class_<FlowScanModel>(m, "Model")
      .def(py::init<FlowScanConfig>(), py::arg("config"))
      .def_property_readonly("config",
                             [](const FlowScanModel& model) { return model.config(); })
      .def_property_readonly("step", &FlowScanModel::step)
      .def_property_readonly(
          "parameter_count",
          [](const FlowScanModel& model) { return model.params().count_scalars(); })
      .def("log_prob",
           [](const FlowScanModel& model, const DoubleArray& x) {
             bool squeezed = false;
             SetBatch batch = batch_from(x, squeezed);
             return scores_out(model.log_prob(batch), squeezed);
           },
           py::arg("x"))
      .def("ppll",
           [](const FlowScanModel& model, const DoubleArray& x) {
             bool squeezed = false;
             SetBatch batch = batch_from(x, squeezed);
             return scores_out(model.ppll(batch), squeezed);
           },
           py::arg("x"))
      .def("sample",
           [](const FlowScanModel& model, std::size_t n, std::uint64_t seed) {
             Rng rng(seed);
             SetBatch one = model.sample(n, rng);
             return numpy_from(one.values.reshaped({n, model.config().dim}));
           },
           py::arg("n"), py::arg("seed"))
      .def("save", &FlowScanModel::save, py::arg("path"))
      .def_static("load",
                  [](const std::string& path) {
                    return new FlowScanModel(FlowScanModel::load(path));
                  },
                  py::arg("path"));

  py::class_<SetDataset>(m, "Dataset")
      .def(py::init<>())
      .def("__len__", &SetDataset::size)
      .def_property_readonly("dim", &SetDataset::dim)
      .def_property(
          "metadata", [](const SetDataset& d) { return d.metadata_json; },
          [](SetDataset& d, const std::string& text) { d.metadata_json = text; })
      .def_property_readonly("sets",
                             [](const SetDataset& d) {
                               py::list out;
                               for (const Tensor& set : d.sets) out.append(numpy_from(set));
                               return out;
                             })
      .def_property_readonly("splits",
                             [](const SetDataset& d) {
                               std::vector<std::string> names;
                               names.reserve(d.splits.size());
                               for (Split s : d.splits) names.push_back(split_name(s));
                               return names;
                             })
      .def("add",
           [](SetDataset& d, const DoubleArray& set) {
             if (set.ndim() != 2) throw ShapeError("a set is an (n, d) array");
             d.sets.push_back(tensor_from(set));
           },
           py::arg("set"))
      .def("indices",
           [](const SetDataset& d, const std::string& name) {
             return d.indices_of(split_from_name(name));
           },
           py::arg("split"))
      .def("subset", &SetDataset::subset, py::arg("indices"))
      .def("save", [](const SetDataset& d, const std::string& path) { write_fset(d, path); },
           py::arg("path"))
      .def_static("load", &read_fset, py::arg("path"));

  m.def("gen_sinusoid", &gen_sinusoid, py::arg("count"), py::arg("points"), py::arg("seed"),
        py::arg("noise_scale") = 1.0);
  m.def("gen_shape_clouds",
        [](std::size_t count, std::size_t points, const std::string& shape, double radius_min,
           double radius_max, double noise_sd, std::uint64_t seed, double center_box) {
          CloudShape kind;
          if (shape == "circle") {
            kind = CloudShape::Circle;
          } else if (shape == "square") {
            kind = CloudShape::Square;
          } else {
            throw ConfigError("unknown shape '" + shape + "' (use circle|square)");
          }
          return gen_shape_clouds(count, points, kind, radius_min, radius_max, noise_sd, seed,
                                  center_box);
        },
        py::arg("count"), py::arg("points"), py::arg("shape"), py::arg("radius_min"),
        py::arg("radius_max"), py::arg("noise_sd"), py::arg("seed"),
        py::arg("center_box") = 0.0);
  m.def("split", &split, py::arg("dataset"), py::arg("train_frac"), py::arg("val_frac"),
        py::arg("test_frac"), py::arg("seed"));

  m.def("mean_ppll",
        [](const FlowScanModel& model, const SetDataset& data, std::size_t cap) {
          py::gil_scoped_release release;
          return mean_ppll(model, data, cap);
        },
        py::arg("model"), py::arg("data"), py::arg("cap") = 0);

  m.def("fit",
        [](FlowScanModel& model, const SetDataset& train_split, const SetDataset& val_split,
           std::size_t iterations, std::size_t batch, double lr, std::uint64_t seed,
           std::size_t eval_interval, std::size_t patience, double clip_norm,
           std::size_t eval_cap) {
          TrainConfig config;
          config.iterations = iterations;
          config.batch_size = batch;
          config.learning_rate = lr;
          config.seed = seed;
          config.eval_interval = eval_interval;
          config.patience = patience;
          config.clip_norm = clip_norm;
          config.eval_cap = eval_cap;
          TrainResult result;
          {
            py::gil_scoped_release release;
            result = fit(model, train_split, val_split, config);
          }
          py::list metrics;
          for (const MetricsRow& row : result.metrics) {
            py::dict entry;
            entry["step"] = row.step;
            entry["train_ppll"] = row.train_ppll;
            entry["val_ppll"] = row.val_ppll;
            entry["wall_ms"] = row.wall_ms;
            metrics.append(entry);
          }
          py::dict out;
          out["metrics"] = metrics;
          out["best_val_ppll"] = result.best_val_ppll;
          out["best_step"] = result.best_step;
          out["steps_run"] = result.steps_run;
          out["nan_abort"] = result.nan_abort;
          out["early_stopped"] = result.early_stopped;
          return out;
        },
        py::arg("model"), py::arg("train_split"), py::arg("val_split"),
        py::arg("iterations") = 5000, py::arg("batch") = 32, py::arg("lr") = 1e-3,
        py::arg("seed") = 1, py::arg("eval_interval") = 100, py::arg("patience") = 0,
        py::arg("clip_norm") = 10.0, py::arg("eval_cap") = 0);

  m.def("run_checks",
        [](const std::string& scope) {
          std::vector<verify::CheckResult> results;
          {
            py::gil_scoped_release release;
            results = verify::run_checks(scope);
          }
          py::list out;
          for (const auto& result : results) {
            py::dict entry;
            entry["name"] = result.name;
            entry["passed"] = result.passed;
            entry["detail"] = result.detail;
            entry["ms"] = result.ms;
            out.append(entry);
          }
          return out;
        },
        py::arg("scope") = "all");

  m.def("ground_truth_sinusoid_ppll", &oracle::ground_truth_sinusoid_ppll, py::arg("dataset"),
        py::arg("noise_scale") = 1.0);
}
