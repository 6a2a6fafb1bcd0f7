#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "jreg/cli.hpp"
#include "jreg/errors.hpp"
#include "jreg/logging.hpp"

namespace py = pybind11;
using namespace jreg;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor::from(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

std::vector<double> to_vector(const Array& a) { return {a.data(), a.data() + a.size()}; }

DisplacementProfile as_profile(const std::vector<double>& v) {
  DisplacementProfile p;
  p.values = v;
  p.n_positions = 1;
  return p;
}

HiddenTrace as_trace(const std::vector<Array>& states) {
  HiddenTrace t;
  for (const auto& s : states) {
    if (s.ndim() != 2) throw DimensionError("trace states must be 2-D [positions x D]");
    t.states.push_back(to_tensor(s));
  }
  return t;
}

TokenBatch as_batch(const py::array_t<std::int32_t, py::array::c_style | py::array::forcecast>& tokens) {
  if (tokens.ndim() != 2) throw DimensionError("tokens must be 2-D [batch x seq_len]");
  TokenBatch b;
  b.batch = static_cast<std::size_t>(tokens.shape(0));
  b.seq_len = static_cast<std::size_t>(tokens.shape(1));
  b.tokens.assign(tokens.data(), tokens.data() + tokens.size());
  return b;
}

}  // namespace

PYBIND11_MODULE(_jreg, m) {
  m.doc() = "Layer displacement metrics, the jump-suppressing objective and a small Llama trainer.";
  init_logging();

  auto base = py::register_exception<Error>(m, "Error");
  py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
  py::register_exception<DegenerateInputError>(m, "DegenerateInputError", base.ptr());
  py::register_exception<ContractError>(m, "ContractError", base.ptr());
  py::register_exception<RangeError>(m, "RangeError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());
  py::register_exception<VocabularyError>(m, "VocabularyError", base.ptr());
  py::register_exception<LengthError>(m, "LengthError", base.ptr());
  py::register_exception<IoError>(m, "IoError", base.ptr());
  py::register_exception<FormatError>(m, "FormatError", base.ptr());

  m.def(
      "displacement", [](const Array& a, const Array& b) { return displacement(to_vector(a), to_vector(b)); },
      py::arg("prev"), py::arg("curr"));
  m.def(
      "profile",
      [](const std::vector<Array>& states) { return profile(as_trace(states)).values; },
      py::arg("states"), "Mean displacement per layer for states h_0 … h_L, each [positions x D].");
  m.def(
      "jump_rate", [](const std::vector<double>& psi, std::size_t ell) { return jump_rate(as_profile(psi), ell); },
      py::arg("profile"), py::arg("ell"));
  m.def(
      "redundancy_delta",
      [](const std::vector<double>& a, const std::vector<double>& b) {
        return redundancy_delta(as_profile(a), as_profile(b));
      },
      py::arg("profile_a"), py::arg("profile_b"));
  m.def(
      "layer_weights", [](double alpha, std::size_t n_layers) { return layer_weights(alpha, n_layers).w; },
      py::arg("alpha"), py::arg("n_layers"));
  m.def(
      "disp_loss",
      [](const std::vector<Array>& states, double alpha, const std::string& variant) {
        const auto t = as_trace(states);
        return disp_loss(t, layer_weights(alpha, t.n_layers()), parse_variant(variant)).item();
      },
      py::arg("states"), py::arg("alpha") = 1.0, py::arg("variant") = "weighted");
  m.def(
      "synth_corpus",
      [](const std::string& kind, std::size_t size, std::uint64_t seed) {
        const auto c = synth_corpus(parse_synth_kind(kind), size, seed);
        py::array_t<std::int32_t> out(static_cast<py::ssize_t>(c.tokens.size()));
        std::copy(c.tokens.begin(), c.tokens.end(), out.mutable_data());
        return out;
      },
      py::arg("kind") = "markov_bytes", py::arg("size") = 1'200'000, py::arg("seed") = 0);

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("n_layers", &ModelConfig::n_layers)
      .def_readwrite("d_model", &ModelConfig::d_model)
      .def_readwrite("n_heads", &ModelConfig::n_heads)
      .def_readwrite("d_ffn", &ModelConfig::d_ffn)
      .def_readwrite("vocab_size", &ModelConfig::vocab_size)
      .def_readwrite("max_seq_len", &ModelConfig::max_seq_len)
      .def_readwrite("rope_base", &ModelConfig::rope_base)
      .def_readwrite("tie_embeddings", &ModelConfig::tie_embeddings);

  py::class_<Model>(m, "Model")
      .def_static("init", &Model::init, py::arg("config"), py::arg("seed") = 0)
      .def_static(
          "load", [](const std::filesystem::path& p) { return load_checkpoint(p).model; }, py::arg("path"))
      .def_property_readonly("config", &Model::config)
      .def_property_readonly("parameter_count", &Model::parameter_count)
      .def(
          "save", [](const Model& self, const std::filesystem::path& p) { save_checkpoint(p, self, nullptr, {}); },
          py::arg("path"))
      .def(
          "forward",
          [](const Model& self, const py::array_t<std::int32_t, py::array::c_style | py::array::forcecast>& tokens) {
            NoGradGuard guard;
            const auto r = self.forward(as_batch(tokens));
            std::vector<Array> states;
            for (const auto& s : r.trace.states) states.push_back(to_array(s));
            return py::make_tuple(to_array(r.logits), states);
          },
          py::arg("tokens"), "Returns (logits [B x T x V], [h_0 … h_L] each [B·T x D]).")
      .def(
          "forward_exit_at",
          [](const Model& self, const py::array_t<std::int32_t, py::array::c_style | py::array::forcecast>& tokens,
             std::size_t layer) {
            NoGradGuard guard;
            return to_array(self.forward_exit_at(as_batch(tokens), layer));
          },
          py::arg("tokens"), py::arg("layer"));

  m.def(
      "run",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = cli::run(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs a jreg command in-process; returns (exit_code, stdout, stderr).");
  m.def("set_log_level", [](const std::string& level) { set_log_level(level); }, py::arg("level"));
}
