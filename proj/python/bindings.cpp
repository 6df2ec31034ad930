#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "rticket/attack.hpp"
#include "rticket/checkpoint.hpp"
#include "rticket/data.hpp"
#include "rticket/errors.hpp"
#include "rticket/hardconcrete.hpp"
#include "rticket/model.hpp"
#include "rticket/ticket.hpp"
#include "runner/config.hpp"
#include "runner/runner.hpp"

namespace py = pybind11;
using namespace rticket;

namespace {

py::array_t<double> to_array(std::span<const double> v) {
  py::array_t<double> out(std::vector<py::ssize_t>{static_cast<py::ssize_t>(v.size())});
  auto view = out.mutable_unchecked<1>();
  for (std::size_t i = 0; i < v.size(); ++i) view(static_cast<py::ssize_t>(i)) = v[i];
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Hard-concrete gates, the masked transformer, tickets and the experiment runner.";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
  py::register_exception<StateError>(m, "StateError", PyExc_RuntimeError);
  py::register_exception<ContractViolation>(m, "ContractViolation", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);
  py::register_exception<DivergenceError>(m, "DivergenceError", PyExc_ArithmeticError);

  m.attr("GAMMA") = kDefaultGamma;
  m.attr("ZETA") = kDefaultZeta;
  m.attr("BETA") = kDefaultBeta;

  py::class_<GateParams>(m, "GateParams")
      .def(py::init([](std::vector<double> log_alpha, double beta) { return GateParams(std::move(log_alpha), beta); }),
           py::arg("log_alpha"), py::arg("beta") = kDefaultBeta)
      .def_static("initialized", &GateParams::initialized, py::arg("count"), py::arg("seed"),
                  py::arg("beta") = kDefaultBeta, py::arg("mean") = 2.0, py::arg("stddev") = 0.01)
      .def("__len__", &GateParams::size)
      .def_property_readonly("log_alpha", [](const GateParams& g) { return to_array(g.log_alpha()); })
      .def_property_readonly("beta", [](const GateParams& g) { return to_array(g.beta()); });

  m.def("expected_l0", &expected_l0);
  m.def("inference_gate", [](const GateParams& g) { return to_array(inference_gate(g)); });
  m.def("polarization_fraction", &polarization_fraction, py::arg("gates"), py::arg("tolerance") = 0.05);
  m.def("sample_gates", [](const GateParams& g, std::uint64_t seed) { return to_array(sample_gates(g, seed).m); });

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("vocab_size", &ModelConfig::vocab_size)
      .def_readwrite("embed_dim", &ModelConfig::embed_dim)
      .def_readwrite("num_layers", &ModelConfig::num_layers)
      .def_readwrite("num_heads", &ModelConfig::num_heads)
      .def_readwrite("mlp_dim", &ModelConfig::mlp_dim)
      .def_readwrite("max_seq_len", &ModelConfig::max_seq_len)
      .def_readwrite("num_classes", &ModelConfig::num_classes);

  py::class_<MaskedModel>(m, "MaskedModel")
      .def(py::init<ModelConfig, std::uint64_t>(), py::arg("config"), py::arg("seed"))
      .def_property_readonly("config", &MaskedModel::config)
      .def_property_readonly("maskable_count", &MaskedModel::maskable_count)
      .def_property_readonly("has_pretrained", &MaskedModel::has_pretrained)
      .def_property_readonly("theta", [](const MaskedModel& model) { return to_array(model.theta()); })
      .def("predict_proba",
           [](const MaskedModel& model, const std::vector<std::vector<std::int32_t>>& sequences) {
             ModelClassifier clf(model);
             const auto p = clf.probabilities(sequences);
             py::array_t<double> out({p.rows(), p.cols()});
             auto view = out.mutable_unchecked<2>();
             for (Eigen::Index i = 0; i < p.rows(); ++i) {
               for (Eigen::Index j = 0; j < p.cols(); ++j) view(i, j) = p(i, j);
             }
             return out;
           },
           py::arg("sequences"), "Class probabilities for content token sequences ([CLS] is prepended).");

  m.def("load_checkpoint", &load_checkpoint);
  m.def("save_checkpoint", &save_checkpoint);

  py::class_<Ticket>(m, "Ticket")
      .def_property_readonly("keep_mask", [](const Ticket& t) { return t.keep_mask; })
      .def_readonly("target_sparsity", &Ticket::target_sparsity)
      .def_readonly("provenance", &Ticket::provenance)
      .def("sparsity", &Ticket::sparsity)
      .def("pruned_count", &Ticket::pruned_count);

  m.def("draw_ticket",
        [](const GateParams& g, const ModelConfig& cfg, double p) { return draw_ticket(g, ParamLayout(cfg), p); },
        py::arg("gates"), py::arg("config"), py::arg("sparsity"));
  m.def("load_ticket", [](const std::filesystem::path& path, const ModelConfig& cfg) {
    return load_ticket(path, ParamLayout(cfg));
  });

  py::class_<runner::RunConfig>(m, "RunConfig")
      .def_property_readonly("hash", &runner::RunConfig::hash)
      .def_property_readonly("seeds", [](const runner::RunConfig& c) { return c.seeds; })
      .def("canonical", &runner::RunConfig::canonical);
  m.def("load_config", &runner::load_config);
  m.def("parse_config", &runner::parse_config, py::arg("text"), py::arg("base_dir") = std::filesystem::path{});

  m.def(
      "run_stage",
      [](const runner::RunConfig& cfg, const std::string& stage, std::optional<std::uint64_t> seed,
         std::optional<std::filesystem::path> out, bool force) {
        runner::RunOptions opts;
        opts.seed = seed;
        opts.out = std::move(out);
        opts.force = force;
        runner::Runner r(cfg, opts);
        if (stage == "all") {
          r.run_all();
        } else {
          r.run(runner::parse_stage(stage));
        }
      },
      py::arg("config"), py::arg("stage"), py::arg("seed") = py::none(), py::arg("out") = py::none(),
      py::arg("force") = false, py::call_guard<py::gil_scoped_release>());
}
