#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <filesystem>

#include <nlohmann/json.hpp>

#include "groklab/datagen.hpp"
#include "groklab/kinetics.hpp"
#include "groklab/mechanistic.hpp"
#include "groklab/metrics.hpp"
#include "groklab/pipeline.hpp"
#include "groklab/rng.hpp"
#include "groklab/trainer.hpp"

namespace py = pybind11;
namespace fs = std::filesystem;
using namespace groklab;

namespace {

py::object to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

nlohmann::json from_py(const py::handle& o) {
  if (o.is_none()) return nlohmann::json::object();
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

DatasetSpec spec_from(const py::dict& d) {
  auto j = from_py(d);
  const auto task = parse_task(j.value("task", std::string("comparison")));
  nlohmann::json base = DatasetSpec::defaults(task, j.value("n_entities", 1000));
  base.update(j);
  return base.get<DatasetSpec>();
}

nlohmann::json bundle_summary(const Bundle& b) {
  return {{"spec", b.spec},
          {"vocab_size", b.vocab.size()},
          {"eos", b.vocab.eos()},
          {"train", b.data.train.size()},
          {"validation", b.data.validation.size()},
          {"test", b.data.test.size()},
          {"mix", b.data.mix.size()},
          {"atomics", b.data.n_atomics},
          {"composed_train", b.data.n_composed_train},
          {"capped", b.data.capped},
          {"warnings", b.warnings}};
}

py::object generate(const py::dict& spec, const std::string& out) {
  const auto b = generate_bundle(spec_from(spec));
  if (!out.empty()) write_bundle(b, out);
  return to_py(bundle_summary(b));
}

py::object load_split(const std::string& data_dir, const std::string& split) {
  const auto b = read_bundle(data_dir);
  return to_py(nlohmann::json(dataset_split(b.data, split)));
}

py::object run_training(const std::string& data_dir, const std::string& run_dir, const std::string& model,
                        const std::string& train_preset, const py::object& model_overrides,
                        const py::object& train_overrides, std::uint64_t seed, bool resume) {
  const auto b = read_bundle(data_dir);
  const auto mc = resolve_model_config(model, from_py(model_overrides), b);
  const auto tc = resolve_train_config(train_preset, from_py(train_overrides), seed);
  TrainOptions o;
  o.run_dir = run_dir;
  o.resume = resume;
  o.manifest_extra = {{"data_dir", fs::absolute(data_dir).string()}, {"spec", b.spec}};
  TrainResult res;
  {
    py::gil_scoped_release release;
    res = train(b.data, b.vocab.eos(), mc, tc, o);
  }
  nlohmann::json evals = nlohmann::json::array();
  for (const auto& e : res.log.evals) {
    nlohmann::json row = e.acc;
    row["step"] = e.step;
    row["loss"] = e.loss;
    row["rel_flops"] = e.rel_flops;
    evals.push_back(row);
  }
  return to_py({{"manifest", res.log.manifest}, {"evals", evals}, {"resumed_from", res.resumed_from}});
}

py::object evaluate_checkpoint(const std::string& data_dir, const std::string& ckpt, const std::string& split,
                               int limit) {
  const auto b = read_bundle(data_dir);
  const auto params = Checkpoint::load(ckpt).to_params();
  std::vector<Example> xs = dataset_split(b.data, split);
  if (limit > 0 && static_cast<int>(xs.size()) > limit) xs.resize(static_cast<std::size_t>(limit));
  const auto out = evaluate(params, xs, b.spec.mode, b.vocab.eos(), split);
  nlohmann::json j = out.record;
  j["loss"] = out.loss;
  return to_py(j);
}

py::object fit(const std::vector<double>& steps, const std::vector<double>& accs) {
  if (steps.size() != accs.size()) throw std::invalid_argument("steps and accuracies differ in length");
  std::vector<CurvePoint> pts;
  for (std::size_t i = 0; i < steps.size(); ++i) pts.push_back({steps[i], accs[i]});
  return to_py(fit_logistic(pts));
}

py::object score(const std::vector<int>& generated, const py::dict& gold, const std::string& mode, int eos) {
  const auto ex = from_py(gold).get<Example>();
  const auto f = score_example(generated, ex, parse_mode(mode), eos);
  nlohmann::json j{{"answer_ok", f.answer_ok}, {"answer_partial", f.answer_partial}, {"terminated", f.terminated}};
  j["trace_ok"] = f.trace_ok ? nlohmann::json(*f.trace_ok) : nlohmann::json();
  j["full_ok"] = f.full_ok ? nlohmann::json(*f.full_ok) : nlohmann::json();
  return to_py(j);
}

py::object probe(const std::string& data_dir, const std::string& ckpt, int layer, const std::string& role, int slot,
                 const std::string& target, const std::string& split, bool shuffle, std::uint64_t seed) {
  const auto b = read_bundle(data_dir);
  const auto params = Checkpoint::load(ckpt).to_params();
  const ProbeSpec spec{layer, parse_position_role(role), slot, parse_probe_target(target)};
  ProbeConfig cfg;
  cfg.shuffle_labels = shuffle;
  cfg.seed = seed;
  const auto r = train_probe(build_probe_data(params, dataset_split(b.data, split), spec, b.vocab), cfg, spec);
  return to_py({{"layer", layer},
                {"train_acc", r.train_acc},
                {"test_acc", r.test_acc},
                {"n_train", r.n_train},
                {"n_test", r.n_test},
                {"n_classes", r.n_classes},
                {"chance", r.chance},
                {"chance_sigma", r.chance_sigma}});
}

py::object patch(const std::string& data_dir, const std::string& ckpt, const std::string& split, int pairs, std::uint64_t seed) {
  const auto b = read_bundle(data_dir);
  const auto params = Checkpoint::load(ckpt).to_params();
  auto rng = make_rng(seed, "patch-" + split);
  const auto ps = collect_patch_pairs(dataset_split(b.data, split), b, pairs, rng);
  if (ps.empty()) throw std::runtime_error("no valid corruption pairs in split " + split);
  const auto g = patch_grid(params, ps, b.spec.mode, b.vocab.eos());
  std::vector<std::vector<double>> effects(static_cast<std::size_t>(g.effects.rows()));
  for (Eigen::Index i = 0; i < g.effects.rows(); ++i) {
    for (Eigen::Index j = 0; j < g.effects.cols(); ++j) effects[static_cast<std::size_t>(i)].push_back(g.effects(i, j));
  }
  return to_py({{"effects", effects},
                {"layers", g.layers},
                {"positions", g.positions},
                {"labels", g.position_labels},
                {"clean_logprob", g.clean_logprob},
                {"corrupt_logprob", g.corrupt_logprob},
                {"pairs", ps.size()}});
}

py::object sweep(const std::string& config_path, int jobs, const std::string& out) {
  auto c = ExperimentConfig::from_ini(read_ini(config_path));
  if (!out.empty()) c.out = out;
  PipelineResult r;
  {
    py::gil_scoped_release release;
    r = run_pipeline(c, jobs, StageLogger{false});
  }
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& cell : r.cells) {
    cells.push_back({{"dir", cell.dir}, {"ran", cell.ran}, {"skipped", cell.skipped}, {"ok", cell.ok}, {"error", cell.error}});
  }
  return to_py({{"cells", cells}, {"report_dir", r.report_dir}, {"failures", r.failures}});
}

}  // namespace

PYBIND11_MODULE(_groklab, m) {
  m.doc() = "groklab native core";
  m.attr("__version__") = GROKLAB_VERSION_STRING;

  m.def("generate", &generate, py::arg("spec"), py::arg("out") = "");
  m.def("load_split", &load_split, py::arg("data_dir"), py::arg("split"));
  m.def("train", &run_training, py::arg("data_dir"), py::arg("run_dir"), py::arg("model") = "desk",
        py::arg("train") = "desk", py::arg("model_overrides") = py::none(),
        py::arg("train_overrides") = py::none(), py::arg("seed") = 7, py::arg("resume") = true);
  m.def("evaluate", &evaluate_checkpoint, py::arg("data_dir"), py::arg("ckpt"), py::arg("split") = "test",
        py::arg("limit") = 0);
  m.def("fit_logistic", &fit, py::arg("steps"), py::arg("accuracies"));
  m.def("logistic", &logistic_log_step, py::arg("L"), py::arg("k_fit"), py::arg("t0"), py::arg("step"));
  m.def("normalized_rate", py::overload_cast<double, double, double>(&normalized_rate), py::arg("L"),
        py::arg("k_fit"), py::arg("t0"));
  m.def("score", &score, py::arg("generated"), py::arg("gold"), py::arg("mode"), py::arg("eos"));
  m.def("probe", &probe, py::arg("data_dir"), py::arg("ckpt"), py::arg("layer"), py::arg("role") = "final", py::arg("slot") = 0,
        py::arg("target") = "answer", py::arg("split") = "test", py::arg("shuffle") = false, py::arg("seed") = 7);
  m.def("patch", &patch, py::arg("data_dir"), py::arg("ckpt"), py::arg("split") = "test", py::arg("pairs") = 16, py::arg("seed") = 7);
  m.def("sweep", &sweep, py::arg("config"), py::arg("jobs") = 1, py::arg("out") = "");
  m.def("report", &build_report, py::arg("root"), py::arg("out"));
  m.def("parameter_count", [](const py::dict& cfg) { return parameter_count(from_py(cfg).get<ModelConfig>()); },
        py::arg("config"));
}
