// Python bindings: ICC and distillation losses on NumPy arrays, the synthetic
// generators, the oracle suite, and config-driven training runs.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>
#include <string>
#include <vector>

#include "ickd/checkpoint.hpp"
#include "ickd/config.hpp"
#include "ickd/data.hpp"
#include "ickd/distill.hpp"
#include "ickd/errors.hpp"
#include "ickd/trainer.hpp"
#include "ickd/verify.hpp"

namespace py = pybind11;
using namespace ickd;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor<double> to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  std::vector<double> v(a.data(), a.data() + a.size());
  return Tensor<double>::from_data(shape, std::move(v));
}

Array to_array(const Tensor<double>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

KernelCfg kernel_cfg(const std::string& kind, double sigma, double offset, int degree) {
  KernelCfg cfg{parse_kernel_kind(kind), sigma, offset, degree};
  cfg.validate();
  return cfg;
}

py::tuple dataset_arrays(const Dataset& ds) {
  py::array_t<float> images({ds.count, ds.channels, ds.height, ds.width});
  std::copy(ds.images.begin(), ds.images.end(), images.mutable_data());
  py::array_t<std::int32_t> labels =
      ds.task == Task::classification ? py::array_t<std::int32_t>({ds.count})
                                      : py::array_t<std::int32_t>({ds.count, ds.height, ds.width});
  std::copy(ds.labels.begin(), ds.labels.end(), labels.mutable_data());
  return py::make_tuple(images, labels);
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  throw ConfigError("split must be train or test");
}

py::dict run_result(const TrainResult& r) {
  py::dict d;
  d["final_eval"] = r.final_eval;
  d["best_eval"] = r.best_eval;
  d["metrics_csv"] = r.log.to_csv();
  return d;
}

}  // namespace

PYBIND11_MODULE(_ickd, m) {
  m.doc() = "Inter-channel correlation knowledge distillation";

  // Translators run newest first, so the base class goes in first.
  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<GridIndivisibleError>(m, "GridIndivisibleError", PyExc_ValueError);
  py::register_exception<NonFiniteError>(m, "NonFiniteError", PyExc_ArithmeticError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<IOError>(m, "IOError", PyExc_OSError);

  m.def(
      "icc_matrix",
      [](const Array& features, const std::string& kernel, double sigma, double offset, int degree) {
        return to_array(icc_matrix(to_tensor(features), kernel_cfg(kernel, sigma, offset, degree)).values);
      },
      py::arg("features"), py::arg("kernel") = "inner-product", py::arg("sigma") = 1.0, py::arg("offset") = 1.0,
      py::arg("degree") = 2, "c x c ICC matrix of a [c, h, w] feature map.");

  m.def(
      "loss_cc",
      [](const Array& g_student, const Array& g_teacher, const std::string& kind) {
        return loss_cc(IccMatrix<double>{to_tensor(g_student)}, IccMatrix<double>{to_tensor(g_teacher)},
                       parse_cc_loss_kind(kind))
            .item();
      },
      py::arg("g_student"), py::arg("g_teacher"), py::arg("kind") = "l2");

  m.def(
      "loss_cc_grid",
      [](const Array& f_student, const Array& f_teacher, int rows, int cols, const std::string& kernel,
         const std::string& kind) {
        return loss_cc_grid(to_tensor(f_student), to_tensor(f_teacher), GridSpec{rows, cols},
                            kernel_cfg(kernel, 1.0, 1.0, 2), parse_cc_loss_kind(kind))
            .item();
      },
      py::arg("f_student"), py::arg("f_teacher"), py::arg("rows") = 1, py::arg("cols") = 1,
      py::arg("kernel") = "inner-product", py::arg("kind") = "l2");

  m.def(
      "loss_kd",
      [](const Array& logits_teacher, const Array& logits_student, double temperature, bool tau_squared) {
        return loss_kd(to_tensor(logits_teacher), to_tensor(logits_student), temperature, tau_squared).item();
      },
      py::arg("logits_teacher"), py::arg("logits_student"), py::arg("temperature") = 4.0,
      py::arg("tau_squared") = false, "Batch-mean KL(teacher || student) of softened logits.");

  m.def(
      "grid_partition",
      [](const Array& features, int rows, int cols) {
        py::list out;
        for (const auto& row : grid_partition(to_tensor(features), GridSpec{rows, cols})) {
          py::list r;
          for (const auto& patch : row) r.append(to_array(patch));
          out.append(r);
        }
        return out;
      },
      py::arg("features"), py::arg("rows"), py::arg("cols"));

  m.def(
      "synth_cls",
      [](std::uint64_t seed, int classes, int per_class, double noise, double contrast, const std::string& split) {
        return dataset_arrays(synth_cls({seed, classes, per_class, noise, contrast}, parse_split(split)));
      },
      py::arg("seed"), py::arg("classes") = 10, py::arg("per_class") = 500, py::arg("noise") = 0.35,
      py::arg("contrast") = 0.12, py::arg("split") = "train", "(images [N,3,32,32], labels [N]) in [0, 1].");

  m.def(
      "synth_seg",
      [](std::uint64_t seed, int classes, int count, double noise, const std::string& split) {
        SynthSegParams p;
        p.seed = seed;
        p.classes = classes;
        p.count = count;
        p.noise = noise;
        return dataset_arrays(synth_seg(p, parse_split(split)));
      },
      py::arg("seed"), py::arg("classes") = 4, py::arg("count") = 2000, py::arg("noise") = 0.35,
      py::arg("split") = "train", "(images [N,3,32,32], labels [N,32,32]) in [0, 1].");

  m.def(
      "verify",
      [](std::uint64_t seed) {
        py::list out;
        for (const auto& c : verify_all(seed)) {
          py::dict d;
          d["group"] = c.group;
          d["name"] = c.name;
          d["passed"] = c.passed;
          d["detail"] = c.detail;
          out.append(d);
        }
        return out;
      },
      py::arg("seed") = 0, "Runs the oracle suite; one dict per check.");

  m.def(
      "train_teacher",
      [](const std::string& config_json, const std::optional<std::string>& out) {
        auto cfg = parse_config(config_json);
        if (cfg.teacher_model) cfg.train.model = *cfg.teacher_model;
        const auto [train, test] = load_datasets(cfg.data, cfg.seed, cfg.train.model.task);
        TrainResult r;
        {
          py::gil_scoped_release release;
          r = train_teacher(cfg.train, train, test);
        }
        if (out) r.final_checkpoint.save(*out);
        return run_result(r);
      },
      py::arg("config_json"), py::arg("out") = py::none(),
      "Trains teacher_model (or model) from a JSON config; returns final/best eval and the metrics CSV.");

  m.def(
      "distill",
      [](const std::string& config_json, const std::string& teacher, const std::optional<std::string>& out) {
        auto cfg = parse_config(config_json);
        cfg.train.distill = cfg.distill;
        const auto t = Checkpoint::load(teacher);
        if (cfg.teacher_model && !(*cfg.teacher_model == t.spec)) {
          throw ConfigError("teacher_model does not match the teacher checkpoint's model spec");
        }
        const auto [train, test] = load_datasets(cfg.data, cfg.seed, cfg.model.task);
        TrainResult r;
        {
          py::gil_scoped_release release;
          r = distill(cfg.train, t, train, test);
        }
        if (out) r.final_checkpoint.save(*out);
        return run_result(r);
      },
      py::arg("config_json"), py::arg("teacher"), py::arg("out") = py::none());

  m.def("config_help", &config_help);
}
