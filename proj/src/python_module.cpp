#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "plmix/gradsuite.hpp"
#include "plmix/harness.hpp"
#include "plmix/metrics.hpp"
#include "plmix/pseudolabel.hpp"
#include "plmix/strategy.hpp"

namespace py = pybind11;
using namespace plmix;
using nlohmann::json;

namespace {

ExperimentConfig config_from(const std::string& text) {
  return text.empty() ? ExperimentConfig{} : parse_experiment_config(json::parse(text));
}

std::vector<std::string> choices(const SelectionPlan& p) {
  std::vector<std::string> out;
  for (auto c : p.choice) out.push_back(c == Source::FromPhn ? "phn" : "repr");
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Bindings for the plmix C++ core";

  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<InputError>(m, "InputError", PyExc_FileNotFoundError);

  m.attr("CONFIG_FORMAT_VERSION") = kConfigFormatVersion;

  m.def("default_config_json", [] { return to_json(ExperimentConfig{}).dump(); });
  m.def("normalize_config_json", [](const std::string& text) { return to_json(config_from(text)).dump(); },
        py::arg("config_json"));
  m.def("config_issues", [](const std::string& text) -> std::vector<std::string> {
    try {
      config_from(text);
    } catch (const ConfigIssues& e) {
      return e.issues();
    }
    return {};
  }, py::arg("config_json"));

  m.def("edit_distance", [](const std::vector<int>& h, const std::vector<int>& r) { return edit_distance(h, r); });
  m.def("per", [](const std::vector<int>& h, const std::vector<int>& r) { return per(h, r); },
        py::arg("hypothesis"), py::arg("reference"));

  m.def("calibrate_threshold", [](const std::vector<double>& c, double r) { return calibrate_threshold(c, r); },
        py::arg("confidences"), py::arg("ratio"));
  m.def("merge_consecutive", [](const std::vector<int>& ids, const std::vector<double>& conf) {
    std::vector<py::tuple> out;
    for (const auto& r : merge_consecutive(ids, conf)) out.push_back(py::make_tuple(r.phoneme, r.start, r.end, r.confidence));
    return out;
  }, py::arg("ids"), py::arg("confidences"));
  m.def("plan", [](const std::string& kind, const std::vector<double>& s, double lambda, double alpha,
                   const std::vector<int>& durations, std::uint64_t seed) {
    MixStrategy st;
    st.kind = strategy_kind_from_string(kind);
    st.threshold = lambda;
    st.alpha = alpha;
    Rng rng(seed);
    const auto p = make_plan(st, s, durations, rng);
    py::dict d;
    d["choice"] = choices(p);
    d["keep_sentence"] = p.keep_sentence;
    d["frame_mask"] = p.frame_mask;
    d["duration_mask"] = p.duration_mask;
    return d;
  }, py::arg("kind"), py::arg("confidences"), py::arg("threshold") = 0.0, py::arg("alpha") = 0.9,
     py::arg("durations"), py::arg("seed") = 0);

  m.def("grad_check", [](std::uint64_t seed, int composed_seeds) {
    std::vector<py::dict> out;
    for (const auto& c : run_grad_suite(seed, composed_seeds)) {
      py::dict d;
      d["name"] = c.name;
      d["max_rel_error"] = c.result.max_rel_error;
      d["tolerance"] = c.tolerance;
      d["passed"] = c.pass();
      out.push_back(d);
    }
    return out;
  }, py::arg("seed") = 1, py::arg("composed_seeds") = 10);

  m.def("split_summary", [](const std::string& text, std::uint64_t run_seed) {
    const auto cfg = config_from(text);
    const auto s = make_split(cfg.world_seed, run_seed, cfg.split, cfg.language);
    py::dict d;
    d["source"] = s.source.size();
    d["target"] = s.target.size();
    d["unpaired"] = s.unpaired.size();
    d["unpaired_frames"] = s.unpaired_frames();
    d["eval"] = s.eval.size();
    d["inventory"] = s.target_language.inventory_size();
    return d;
  }, py::arg("config_json"), py::arg("run_seed") = 1);

  m.def("run_suite", [](const std::string& name, const std::string& text, int workers) {
    const auto suite = suite_from_string(name);
    const auto cfg = config_from(text);
    SuiteResult r;
    {
      py::gil_scoped_release release;
      Lab lab(cfg);
      r = run_suite(suite, lab, workers);
    }
    std::vector<py::dict> checks;
    for (const auto& t : trend_checks(r)) {
      py::dict d;
      d["name"] = t.name;
      d["passed"] = t.pass;
      d["detail"] = t.detail;
      checks.push_back(d);
    }
    return py::make_tuple(results_csv(r), results_json(r).dump(), checks);
  }, py::arg("suite"), py::arg("config_json") = "", py::arg("workers") = 1);
}
