#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <algorithm>

#include "dnas/errors.hpp"
#include "dnas/experiment.hpp"

namespace py = pybind11;
using namespace dnas;

namespace {

py::dict metrics_row(const MetricsRow& r) {
  py::dict d;
  d["epoch"] = r.epoch;
  d["phase"] = to_string(r.phase);
  d["loss_a"] = r.loss_a;
  d["loss_b"] = r.loss_b ? py::cast(*r.loss_b) : py::none();
  d["entropy_term"] = r.entropy_term;
  d["edge_entropy_mean"] = r.edge_entropy_mean;
  d["op_entropy_mean"] = r.op_entropy_mean;
  d["val_miou"] = r.val_miou ? py::cast(*r.val_miou) : py::none();
  d["lambda_max"] = r.lambda_max ? py::cast(*r.lambda_max) : py::none();
  d["wall_seconds"] = r.wall_seconds;
  return d;
}

py::dict cost_dict(const ModelCost& c) {
  py::dict d;
  d["flops"] = c.flops;
  d["params"] = c.params;
  d["arch_params"] = c.arch_params;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Desk-scale differentiable architecture search engine";
  m.attr("__version__") = kVersion;

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
  py::register_exception<MetricError>(m, "MetricError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<DivergenceError>(m, "DivergenceError", PyExc_ArithmeticError);

  m.def("entropy_of", [](const std::vector<double>& p) { return entropy_of(p); }, py::arg("probs"));
  m.def("magnitude_preset", [](const std::string& name) { return magnitude_preset(name); }, py::arg("name"));
  m.def(
      "scaling_value",
      [](const std::string& scaling, double t, double activation, double search_end) {
        EntropySchedule s;
        s.c_alpha = s.c_beta = 1.0;
        s.scaling = parse_scaling(scaling);
        s.activation_fraction = activation;
        s.search_end = search_end;
        s.validate();
        return scaling_value(s, t);
      },
      py::arg("scaling"), py::arg("t"), py::arg("activation") = 0.15, py::arg("search_end") = 0.40);

  m.def("preset_names", &SupernetConfig::preset_names);
  m.def(
      "count_flops_params",
      [](const std::string& preset, std::int64_t height, std::int64_t width) {
        return cost_dict(count_flops_params(SupernetConfig::preset(preset), height, width));
      },
      py::arg("preset"), py::arg("height"), py::arg("width"));

  m.def(
      "generate_sample",
      [](int height, int width, int classes, std::uint64_t seed) {
        DataConfig cfg;
        cfg.height = height;
        cfg.width = width;
        cfg.classes = classes;
        cfg.validate();
        const SegSample s = generate_sample(cfg, seed, 0);
        py::array_t<double> image({std::int64_t{3}, s.height, s.width});
        std::copy(s.image.data().begin(), s.image.data().end(), image.mutable_data());
        py::array_t<std::uint8_t> label({s.height, s.width});
        std::copy(s.label.begin(), s.label.end(), label.mutable_data());
        return py::make_tuple(image, label);
      },
      py::arg("height") = 64, py::arg("width") = 64, py::arg("classes") = 4, py::arg("seed") = 0);

  m.def(
      "miou",
      [](const std::vector<std::uint8_t>& predictions, const std::vector<std::uint8_t>& labels, int classes) {
        ConfusionMatrix cm(classes);
        cm.add(predictions, labels);
        return cm.miou();
      },
      py::arg("predictions"), py::arg("labels"), py::arg("classes"));

  m.def(
      "dominant_eigenvalue",
      [](const std::function<std::vector<double>(std::vector<double>)>& grad, const std::vector<double>& theta,
         std::uint64_t seed, int max_iters, double tol, double eps, int block) {
        PowerIterationConfig cfg{max_iters, tol, eps, block};
        GradientFn fn = [&grad](std::span<const double> x) { return grad({x.begin(), x.end()}); };
        const EigenResult r = dominant_eigenvalue(fn, theta, seed, cfg);
        py::dict d;
        d["lambda"] = r.lambda;
        d["iterations"] = r.iterations;
        d["zero_curvature"] = r.zero_curvature;
        return d;
      },
      py::arg("grad"), py::arg("theta"), py::arg("seed") = 0, py::arg("max_iters") = 100, py::arg("tol") = 1e-6,
      py::arg("eps") = 1e-3, py::arg("block") = 3);

  m.def(
      "config_from_json", [](const std::string& text) { return ExperimentConfig::from_json(text).to_json(); },
      py::arg("text"), "Validates a config and returns its canonical JSON.");
  m.def(
      "load_config", [](const std::string& path) { return ExperimentConfig::load(path).to_json(); }, py::arg("path"));

  m.def(
      "run_search",
      [](const std::string& config_json, bool write_outputs) {
        const ExperimentConfig cfg = ExperimentConfig::from_json(config_json);
        RunOutcome out;
        {
          py::gil_scoped_release release;
          out = run_experiment(cfg);
          if (write_outputs) write_run_outputs(cfg, out);
        }
        py::list rows;
        for (const auto& r : out.result.metrics) rows.append(metrics_row(r));
        py::dict d;
        d["metrics"] = rows;
        d["final_miou"] = out.result.final_val_miou;
        d["wall_seconds"] = out.wall_seconds;
        d["weight_updates"] = out.result.counters.weight_updates;
        d["arch_updates"] = out.result.counters.arch_updates;
        return d;
      },
      py::arg("config_json"), py::arg("write_outputs") = false);

  m.def(
      "prune_sweep",
      [](const std::string& checkpoint, const std::vector<double>& fractions, int finetune_epochs) {
        std::vector<PruneReport> reports;
        {
          py::gil_scoped_release release;
          LoadedModel model = load_model(checkpoint);
          const DataPools data = generate(model.config.data, model.config.resolved_data_seed());
          reports = run_prune_sweep(model, data, fractions, finetune_epochs);
        }
        py::list out;
        for (const auto& r : reports) {
          py::dict d;
          d["fraction"] = r.fraction;
          d["miou_immediate"] = r.miou_immediate;
          d["miou_after_finetune"] = r.miou_after_finetune ? py::cast(*r.miou_after_finetune) : py::none();
          d["entropy_at_prune"] = r.entropy_at_prune;
          d["edges_dropped"] = r.edges_dropped;
          out.append(d);
        }
        return out;
      },
      py::arg("checkpoint"), py::arg("fractions"), py::arg("finetune_epochs") = 0);
}
