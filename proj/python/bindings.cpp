#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <algorithm>
#include <map>
#include <string>

#include <json.hpp>

#include "aptab/config.hpp"
#include "aptab/inference.hpp"
#include "aptab/metrics.hpp"
#include "aptab/model.hpp"
#include "aptab/prior.hpp"
#include "aptab/random.hpp"
#include "aptab/training.hpp"

namespace py = pybind11;

namespace aptab {
namespace {

using RealArray = py::array_t<Real, py::array::c_style | py::array::forcecast>;

nlohmann::json to_cpp_json(const py::object& obj) {
  const auto text = py::module_::import("json").attr("dumps")(obj).cast<std::string>();
  return nlohmann::json::parse(text);
}

py::object to_py_json(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

Tensor matrix_from(const RealArray& a, const char* what) {
  if (a.ndim() != 2) throw std::invalid_argument(std::string(what) + " must be two-dimensional");
  const auto rows = static_cast<std::size_t>(a.shape(0));
  const auto cols = static_cast<std::size_t>(a.shape(1));
  return Tensor({rows, cols}, std::vector<Real>(a.data(), a.data() + rows * cols));
}

RealArray to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  RealArray out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

// Classification targets are integer labels; regression targets are reals.
Dataset dataset_from(const RealArray& x, const py::object& y, TaskKind task) {
  Dataset d;
  d.task = task;
  d.x = matrix_from(x, "x");
  const auto n = d.x.dim(0);
  d.categorical.assign(d.x.dim(1), 0);
  if (y.is_none()) {
    d.y = Tensor::zeros({n});
    if (task == TaskKind::kClassification) d.labels.assign(n, -1);
    d.num_classes = 0;
    return d;
  }
  const auto values = RealArray::ensure(y);
  if (!values || values.ndim() != 1 || static_cast<std::size_t>(values.shape(0)) != n) {
    throw std::invalid_argument("y must be one-dimensional with one entry per row of x");
  }
  std::vector<Real> v(values.data(), values.data() + n);
  if (task == TaskKind::kClassification) {
    int top = -1;
    for (Real value : v) {
      const int label = static_cast<int>(value);
      if (static_cast<Real>(label) != value || label < 0) {
        throw std::invalid_argument("classification labels must be non-negative integers");
      }
      d.labels.push_back(label);
      top = std::max(top, label);
    }
    d.num_classes = static_cast<std::size_t>(top + 1);
  }
  d.y = Tensor::vector(std::move(v));
  return d;
}

py::dict prediction_dict(const Prediction& p) {
  py::dict out;
  out["task"] = std::string(to_string(p.task));
  if (p.task == TaskKind::kClassification) {
    out["classes"] = p.classes;
    out["probs"] = to_array(p.probs);
  } else {
    out["mean"] = to_array(p.mean);
    out["stddev"] = to_array(p.stddev);
  }
  out["fallback_rows"] = p.fallback_rows;
  return out;
}

py::dict log_dict(const TrainLog& log) {
  py::list steps;
  for (const auto& r : log.steps) steps.append(to_py_json(to_json(r)));
  py::list evals;
  for (const auto& r : log.evals) evals.append(to_py_json(to_json(r)));
  py::list resets;
  for (const auto& r : log.resets) resets.append(to_py_json(to_json(r)));
  py::dict out;
  out["steps"] = steps;
  out["evals"] = evals;
  out["resets"] = resets;
  out["nans"] = log.nans.size();
  return out;
}

}  // namespace
}  // namespace aptab

PYBIND11_MODULE(_core, m) {
  using namespace aptab;
  m.doc() = "Tabular prior-fitted network with adversarial data agents";

  py::class_<Model>(m, "Model")
      .def(py::init([](const py::object& config, std::uint64_t seed) {
             auto c = config.is_none() ? ModelConfig{} : ModelConfig::from_json(to_cpp_json(config));
             c.validate();
             return Model(c, seed);
           }),
           py::arg("config") = py::none(), py::arg("seed") = 0)
      .def_static("load", &Model::load, py::arg("path"))
      .def("save", &Model::save, py::arg("path"))
      .def("checksum", &Model::checksum)
      .def("parameter_count", &Model::parameter_count)
      .def_property_readonly("seed", &Model::seed)
      .def_property_readonly("config", [](const Model& model) {
        return to_py_json(model.config().to_json());
      });

  m.def(
      "predict",
      [](const Model& model, const RealArray& x_train, const py::object& y_train,
         const RealArray& x_test, const std::string& task, std::size_t ensemble,
         std::uint64_t seed, std::size_t batch_cap, std::size_t feature_budget) {
        const auto kind = parse_task_kind(task);
        const auto train = dataset_from(x_train, y_train, kind);
        const auto test = dataset_from(x_test, py::none(), kind);
        InferenceOptions options;
        options.seed = seed;
        options.batch_cap = batch_cap;
        options.feature_budget = feature_budget;
        const Prediction p = [&] {
          py::gil_scoped_release release;
          return ensemble <= 1
                     ? predict(model, train, test, options)
                     : permutation_ensemble(model, train, test, ensemble, options).prediction;
        }();
        return prediction_dict(p);
      },
      py::arg("model"), py::arg("x_train"), py::arg("y_train"), py::arg("x_test"),
      py::arg("task") = "classification", py::arg("ensemble") = 1, py::arg("seed") = 0,
      py::arg("batch_cap") = kDefaultBatchCap, py::arg("feature_budget") = kDefaultFeatureBudget);

  m.def(
      "roc_auc_ovo",
      [](const RealArray& probs, const std::vector<int>& classes, const std::vector<int>& labels) {
        if (probs.ndim() != 2) throw std::invalid_argument("probs must be two-dimensional");
        return roc_auc_ovo(std::span<const Real>(probs.data(), static_cast<std::size_t>(probs.size())),
                           classes, labels);
      },
      py::arg("probs"), py::arg("classes"), py::arg("labels"));

  m.def(
      "sample_dataset",
      [](std::uint64_t seed, std::size_t rows, std::size_t features, std::size_t classes) {
        GeneratorHyperSpace space;
        space.features = {features, features};
        space.classes = {classes, classes};
        space.categorical_fraction = {0, 0};
        space.regression_probability = 0;
        const auto g = sample_generator(space, derive_seed(seed, {key(Stream::kGenerator)}));
        const auto d = generate_dataset(g, rows, derive_seed(seed, {key(Stream::kData)}));
        return py::make_tuple(to_array(d.x), d.labels);
      },
      py::arg("seed"), py::arg("rows") = 100, py::arg("features") = 2, py::arg("classes") = 2);

  m.def(
      "load_train_config",
      [](const std::filesystem::path& path) { return to_py_json(to_json(load_train_config(path))); },
      py::arg("path"));

  m.def(
      "pretrain",
      [](const std::filesystem::path& config_path, const py::object& output_dir) {
        auto config = load_train_config(config_path);
        if (!output_dir.is_none()) config.output_dir = output_dir.cast<std::filesystem::path>();
        auto result = [&] {
          py::gil_scoped_release release;
          return pretrain(config);
        }();
        auto log = log_dict(result.log);
        return py::make_tuple(std::move(result.model), log);
      },
      py::arg("config"), py::arg("output_dir") = py::none());
}
