#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <optional>

#include "immunity/attacks.hpp"
#include "immunity/config.hpp"
#include "immunity/data_io.hpp"
#include "immunity/error.hpp"
#include "immunity/gradcam.hpp"
#include "immunity/mi_oracle.hpp"
#include "immunity/moe.hpp"
#include "immunity/objectives.hpp"
#include "immunity/train_eval.hpp"

namespace py = pybind11;
using namespace immunity;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

std::optional<AttackSpec> attack_spec(const std::string& kind, double epsilon, double step_size,
                                      std::size_t iterations, const std::string& rsg_handling, bool random_start) {
  if (kind == "none") return std::nullopt;
  AttackSpec s;
  s.kind = parse_attack_kind(kind);
  s.epsilon = epsilon;
  s.step_size = step_size;
  s.iterations = iterations;
  s.rsg_handling = parse_rsg_handling(rsg_handling);
  s.random_start = random_start;
  s.validate();
  return s;
}

py::dict breakdown_dict(const LossBreakdown& b) {
  py::dict d;
  d["ce"] = b.ce;
  d["mi"] = b.mi;
  d["ps"] = b.ps;
  d["total"] = b.total;
  d["mb"] = b.mb;
  return d;
}

py::bytes to_bytes(const std::vector<std::uint8_t>& v) {
  return py::bytes(reinterpret_cast<const char*>(v.data()), v.size());
}

std::vector<std::uint8_t> from_bytes(const py::bytes& b) {
  const std::string s = b;
  return {s.begin(), s.end()};
}

}  // namespace

PYBIND11_MODULE(_immunity, m) {
  m.doc() = "Mixture-of-experts robustness toolkit";

  auto base = py::register_exception<Error>(m, "Error");
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());

  m.attr("HEATMAP_FLOOR") = kHeatmapFloor;

  py::class_<Dataset>(m, "Dataset")
      .def("__len__", &Dataset::size)
      .def_property_readonly("shape", [](const Dataset& d) {
        return py::make_tuple(d.channels(), d.height(), d.width());
      })
      .def_property_readonly("n_classes", [](const Dataset& d) { return d.meta().n_classes; })
      .def_property_readonly("mean", [](const Dataset& d) { return d.meta().mean; })
      .def_property_readonly("stddev", [](const Dataset& d) { return d.meta().stddev; })
      .def_property_readonly("labels", &Dataset::labels)
      .def("images", [](const Dataset& d) {
        std::vector<std::size_t> all(d.size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        return to_array(d.batch(all));
      }, "All images as a (N, C, H, W) array in [0, 1].")
      .def("subset", [](const Dataset& d, const std::vector<std::size_t>& idx) { return d.subset(idx); })
      .def("save", [](const Dataset& d, const std::filesystem::path& p) { save_dataset(d, p); })
      .def("to_bytes", [](const Dataset& d) { return to_bytes(serialize_dataset(d)); });

  m.def("synth_shapes", &synth_shapes, py::arg("n"), py::arg("classes") = 4, py::arg("size") = 16,
        py::arg("seed") = 0);
  m.def("load_dataset", &load_dataset, py::arg("path"));
  m.def("dataset_from_bytes", [](const py::bytes& b) { return deserialize_dataset(from_bytes(b)); });
  m.def("load_cifar", [](const std::filesystem::path& p, bool cifar100) {
    return load_cifar_binary(p, cifar100 ? CifarVariant::cifar100 : CifarVariant::cifar10);
  }, py::arg("path"), py::arg("cifar100") = false);

  py::class_<MoEModel>(m, "MoEModel")
      .def_static("create", [](std::size_t n_experts, std::size_t n_classes, std::size_t channels, std::size_t height,
                               std::size_t width, std::vector<std::size_t> widths, std::uint64_t seed,
                               std::vector<double> mean, std::vector<double> stddev) {
        ModelConfig c;
        c.n_experts = n_experts;
        c.n_classes = n_classes;
        c.channels = channels;
        c.height = height;
        c.width = width;
        c.widths = std::move(widths);
        c.seed = seed;
        c.normalization = {std::move(mean), std::move(stddev)};
        return MoEModel::create(c);
      }, py::arg("n_experts") = 5, py::arg("n_classes") = 4, py::arg("channels") = 3, py::arg("height") = 16,
         py::arg("width") = 16, py::arg("widths") = std::vector<std::size_t>{8, 16, 16}, py::arg("seed") = 0,
         py::arg("mean") = std::vector<double>{}, py::arg("stddev") = std::vector<double>{})
      .def_property_readonly("n_experts", &MoEModel::n_experts)
      .def_property_readonly("n_classes", &MoEModel::n_classes)
      .def("probabilities", [](const MoEModel& model, const Array& x, const std::string& rsg, std::uint64_t seed) {
        Rng rng(seed);
        NoGradGuard ng;
        return to_array(model.probabilities(to_tensor(x), parse_rsg_mode(rsg), rng));
      }, py::arg("x"), py::arg("rsg") = "identity", py::arg("seed") = 0)
      .def("heatmaps", [](const MoEModel& model, const Array& x, const std::vector<std::size_t>& labels) {
        Rng rng(0);
        Tensor input = to_tensor(x);
        auto record = model.forward(input, RsgMode::identity(), rng);
        auto maps = expert_heatmaps(record, labels, input.size(2), input.size(3), false);
        py::list out;
        for (const Tensor& h : maps) out.append(to_array(h));
        return out;
      }, py::arg("x"), py::arg("labels"), "Normalized per-expert Grad-CAM heatmaps, one (B, H, W) array each.")
      .def("parameter_hash", [](const MoEModel& model) {
        auto p = model.parameters();
        return parameter_hash(p);
      })
      .def("save", [](const MoEModel& model, const std::filesystem::path& p) { save_model(model, p); })
      .def("to_bytes", [](const MoEModel& model) { return to_bytes(serialize_model(model)); });

  m.def("load_model", &load_model, py::arg("path"));
  m.def("model_from_bytes", [](const py::bytes& b) { return deserialize_model(from_bytes(b)); });

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init([](double alpha, double beta, double gamma, std::size_t epochs, std::size_t batch_size,
                       double learning_rate, std::uint64_t seed, bool augment) {
        TrainConfig t;
        t.coefficients = {alpha, beta, gamma};
        t.epochs = epochs;
        t.batch_size = batch_size;
        t.learning_rate = learning_rate;
        t.seed = seed;
        t.augment = augment;
        t.validate();
        return t;
      }), py::arg("alpha") = 1.0, py::arg("beta") = 1.0, py::arg("gamma") = 0.1, py::arg("epochs") = 20,
         py::arg("batch_size") = 32, py::arg("learning_rate") = 0.01, py::arg("seed") = 0, py::arg("augment") = false)
      .def_readwrite("epochs", &TrainConfig::epochs)
      .def_readwrite("batch_size", &TrainConfig::batch_size)
      .def_readwrite("learning_rate", &TrainConfig::learning_rate)
      .def_readwrite("grad_clip", &TrainConfig::grad_clip)
      .def_readwrite("seed", &TrainConfig::seed);

  m.def("train", [](MoEModel& model, const Dataset& data, const TrainConfig& config) {
    config.validate();
    TrainState state(config.seed);
    py::list epochs;
    for (std::size_t e = 0; e < config.epochs; ++e) {
      py::list steps;
      for (const auto& b : train_epoch(model, data, config, state)) steps.append(breakdown_dict(b));
      epochs.append(steps);
    }
    return epochs;
  }, py::arg("model"), py::arg("data"), py::arg("config"),
     "Trains in place; returns per-epoch lists of per-step loss breakdowns.");

  m.def("attack", [](const MoEModel& model, const Array& x, const std::vector<std::size_t>& labels,
                     const std::string& kind, double epsilon, double step_size, std::size_t iterations,
                     const std::string& rsg_handling, std::uint64_t seed) {
    auto spec = attack_spec(kind, epsilon, step_size, iterations, rsg_handling, true);
    if (!spec) throw ConfigError("attack: kind must name an attack");
    Rng rng(seed);
    return to_array(run_attack(model, to_tensor(x), labels, *spec, rng).x_adv);
  }, py::arg("model"), py::arg("x"), py::arg("labels"), py::arg("kind") = "pgd", py::arg("epsilon") = 8.0 / 255.0,
     py::arg("step_size") = 2.0 / 255.0, py::arg("iterations") = 20, py::arg("rsg_handling") = "fresh_per_step",
     py::arg("seed") = 0);

  m.def("evaluate", [](const MoEModel& model, const Dataset& data, const std::string& attack, double epsilon,
                       double step_size, std::size_t iterations, const std::string& rsg, std::uint64_t seed) {
    Rng rng(seed);
    return evaluate(model, data, attack_spec(attack, epsilon, step_size, iterations, "fresh_per_step", true),
                    parse_rsg_mode(rsg), rng)
        .accuracy;
  }, py::arg("model"), py::arg("data"), py::arg("attack") = "none", py::arg("epsilon") = 8.0 / 255.0,
     py::arg("step_size") = 2.0 / 255.0, py::arg("iterations") = 20, py::arg("rsg") = "fresh", py::arg("seed") = 0);

  m.def("report", [](const MoEModel& model, const Dataset& data, const std::string& attack, double epsilon,
                     double step_size, std::size_t iterations, std::uint64_t seed, std::size_t n_seeds) {
    return make_report(model, data, attack_spec(attack, epsilon, step_size, iterations, "fresh_per_step", true),
                       RsgMode::fresh(), seed, n_seeds, 256, 100, "{}")
        .to_json();
  }, py::arg("model"), py::arg("data"), py::arg("attack") = "pgd", py::arg("epsilon") = 8.0 / 255.0,
     py::arg("step_size") = 2.0 / 255.0, py::arg("iterations") = 20, py::arg("seed") = 0, py::arg("n_seeds") = 3,
     "Evaluation report as a JSON string.");

  m.def("iscore", [](const MoEModel& model, const Dataset& data, std::size_t max_samples) {
    return iscore(model, data, max_samples);
  }, py::arg("model"), py::arg("data"), py::arg("max_samples") = 256);
  m.def("cscore", [](const MoEModel& model, const Dataset& data) { return cscore(model, data); });

  m.def("loss_mi", [](const std::vector<Array>& maps) {
    std::vector<Tensor> t;
    for (const auto& a : maps) t.push_back(to_tensor(a));
    return to_array(loss_mi(t));
  }, py::arg("heatmaps"), "Per-sample MI loss over N (B, H, W) or (H, W) heatmaps.");
  m.def("center_of_mass", [](const Array& maps) { return to_array(center_of_mass(to_tensor(maps))); });
  m.def("loss_ps", [](const std::vector<Array>& maps) {
    std::vector<Tensor> centers;
    for (const auto& a : maps) centers.push_back(center_of_mass(to_tensor(a)));
    return loss_ps(centers).item();
  }, py::arg("heatmaps"), "Position-stability loss over N (B, H, W) heatmaps.");

  m.def("mutual_information", [](const std::vector<std::vector<double>>& rows, const std::vector<double>& prior) {
    return oracle::mutual_information_exact({rows, prior});
  }, py::arg("rows"), py::arg("prior") = std::vector<double>{});
  m.def("verify_mi", [](double resolution, std::size_t trials, std::uint64_t seed) {
    py::list out;
    for (const auto& r : oracle::run_verification(resolution, trials, seed)) {
      py::dict d;
      d["name"] = r.name;
      d["passed"] = r.passed;
      d["worst"] = r.worst;
      d["tolerance"] = r.tolerance;
      d["cases"] = r.cases;
      out.append(d);
    }
    return out;
  }, py::arg("resolution") = 0.01, py::arg("trials") = 100, py::arg("seed") = 0);
}
