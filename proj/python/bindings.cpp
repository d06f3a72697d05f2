#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "mixdiv/cli.hpp"
#include "mixdiv/errors.hpp"
#include "mixdiv/gradcheck.hpp"
#include "mixdiv/metrics.hpp"
#include "mixdiv/mixup_decode.hpp"
#include "mixdiv/pipeline.hpp"

namespace py = pybind11;
using namespace mixdiv;

namespace {

BleuLevel parse_level(const std::string& level) {
  if (level == "corpus") return BleuLevel::corpus;
  if (level == "sentence") return BleuLevel::sentence;
  throw py::value_error("level must be 'corpus' or 'sentence'");
}

py::dict report_dict(const MetricsReport& r) {
  py::dict d;
  d["rfb"] = r.rfb;
  d["pwb"] = r.pwb;
  d["eda"] = r.eda;
  d["baseline"] = r.baseline;
  d["ceiling"] = r.ceiling;
  d["omega"] = r.omega;
  d["rfb_exceeds_baseline"] = r.rfb_exceeds_baseline;
  d["inputs"] = r.inputs;
  d["systems"] = r.systems;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Diverse translation by mixing source and target embeddings";

  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<AlignmentError>(m, "AlignmentError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);

  m.def("corpus_bleu", &corpus_bleu, py::arg("hypotheses"), py::arg("references"),
        "Corpus BLEU-4 of tokenized hypotheses against one reference each");
  m.def(
      "rfb",
      [](const DiverseSet& outputs, const std::vector<Tokens>& refs, const std::string& level) {
        return rfb(outputs, refs, parse_level(level));
      },
      py::arg("outputs"), py::arg("references"), py::arg("level") = "corpus");
  m.def(
      "pwb", [](const DiverseSet& outputs, const std::string& level) { return pwb(outputs, parse_level(level)); },
      py::arg("outputs"), py::arg("level") = "corpus");
  m.def("eda", &eda, py::arg("rfb"), py::arg("pwb"), py::arg("baseline"), py::arg("ceiling") = kPairwiseCeiling);
  m.def(
      "evaluate",
      [](const DiverseSet& outputs, const std::vector<Tokens>& refs, double baseline, const std::string& level) {
        return report_dict(evaluate(outputs, refs, baseline, parse_level(level)));
      },
      py::arg("outputs"), py::arg("references"), py::arg("baseline"), py::arg("level") = "corpus");

  m.def(
      "sample_step_lambdas",
      [](double alpha, std::size_t count, std::uint64_t seed) {
        RngStream rng(seed);
        std::vector<double> out(count);
        for (auto& v : out) v = sample_step_lambda(alpha, rng);
        return out;
      },
      py::arg("alpha"), py::arg("count"), py::arg("seed") = 1,
      "Folded Beta(alpha, alpha) weights used at each decoding step");

  m.def(
      "write_synthetic_corpus",
      [](const std::string& dir, std::size_t vocab_size, std::size_t num_pairs, std::size_t min_len,
         std::size_t max_len, std::size_t synonyms, std::uint64_t seed) {
        SynthSpec spec{vocab_size, num_pairs, min_len, max_len, synonyms, seed};
        write_synthetic_corpus(dir, spec, generate_synthetic_corpus(spec));
      },
      py::arg("dir"), py::arg("vocab_size") = 50, py::arg("num_pairs") = 2000, py::arg("min_len") = 3,
      py::arg("max_len") = 12, py::arg("synonyms") = 1, py::arg("seed") = 7);

  m.def(
      "gradcheck",
      [](bool mixup, std::uint64_t seed, double tolerance) {
        GradcheckConfig config;
        config.mixup = mixup;
        config.seed = seed;
        config.tolerance = tolerance;
        const auto report = run_gradcheck(config);
        py::dict d;
        d["passed"] = report.passed;
        d["worst_error"] = report.worst_error;
        d["elements"] = report.elements;
        return d;
      },
      py::arg("mixup") = true, py::arg("seed") = 1, py::arg("tolerance") = 1e-5);

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::vector<const char*> argv{"mixdiv"};
        for (const auto& a : args) argv.push_back(a.c_str());
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs a command-line invocation in process; returns (exit code, stdout, stderr)");
}
