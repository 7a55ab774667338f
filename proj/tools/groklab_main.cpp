#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "groklab/datagen.hpp"
#include "groklab/kinetics.hpp"
#include "groklab/mechanistic.hpp"
#include "groklab/pipeline.hpp"
#include "groklab/rng.hpp"
#include "groklab/svg.hpp"
#include "groklab/trainer.hpp"

namespace fs = std::filesystem;
using namespace groklab;

namespace {

void write_or_print(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << text;
}

// Resolves --run into data/ckpt paths when those were not given explicitly.
struct RunPaths {
  std::string run, data, ckpt;
  void resolve() {
    if (!run.empty()) {
      if (data.empty()) data = (fs::path(run) / "data").string();
      if (!fs::exists(data) && fs::exists(fs::path(run) / "train_manifest.json")) {
        std::ifstream is(fs::path(run) / "train_manifest.json");
        data = nlohmann::json::parse(is).value("data_dir", data);
      }
      if (ckpt.empty()) ckpt = (fs::path(run) / "ckpt" / "last.ckpt").string();
    }
    if (data.empty() || ckpt.empty()) throw std::invalid_argument("need --run or both --data and --ckpt");
  }
};

void add_run_paths(CLI::App* cmd, RunPaths& p) {
  cmd->add_option("--run", p.run, "Run directory (uses <run>/ckpt/last.ckpt and the run's dataset)");
  cmd->add_option("--data", p.data, "Dataset directory");
  cmd->add_option("--ckpt", p.ckpt, "Checkpoint file");
}

struct GenArgs {
  std::string task = "comparison", mode = "direct", tmpl, out;
  int k = 2;
  double phi = 3.6;
  std::uint64_t seed = 7;
  int entities = 1000;
  std::optional<int> attributes, relations, test_cap;
  bool mix = false;
};

int cmd_gen(const GenArgs& a) {
  auto spec = DatasetSpec::defaults(parse_task(a.task), a.entities);
  spec.k = a.k;
  spec.phi = a.phi;
  spec.mode = parse_mode(a.mode);
  spec.seed = a.seed;
  spec.include_mix = a.mix;
  if (a.attributes) spec.n_attributes = *a.attributes;
  if (a.relations) spec.n_relations = *a.relations;
  if (a.test_cap) spec.test_cap = *a.test_cap;
  if (!a.tmpl.empty()) spec.cot_template = parse_template(a.tmpl);
  else if (spec.task == Task::intersection) spec.cot_template = CotTemplate::retrieve_answer;
  const auto b = generate_bundle(spec);
  write_bundle(b, a.out);
  for (const auto& w : b.warnings) std::cerr << "warning: " << w << '\n';
  std::cout << "wrote " << a.out << ": train " << b.data.train.size() << " (" << b.data.n_composed_train
            << " composed, " << b.data.n_atomics << " atomic), validation " << b.data.validation.size()
            << ", test " << b.data.test.size() << ", vocab " << b.vocab.size() << '\n';
  return 0;
}

struct TrainArgs {
  std::string data, out, model = "desk", train = "desk";
  std::optional<std::int64_t> steps, eval_every, checkpoint_every;
  std::optional<int> batch;
  std::optional<double> lr;
  std::uint64_t seed = 7;
  bool fresh = false, quiet = false;
};

int cmd_train(const TrainArgs& a) {
  const auto bundle = read_bundle(a.data);
  const auto mc = resolve_model_config(a.model, nlohmann::json::object(), bundle);
  nlohmann::json over = nlohmann::json::object();
  if (a.steps) over["max_steps"] = *a.steps;
  if (a.eval_every) over["eval_every"] = *a.eval_every;
  if (a.checkpoint_every) over["checkpoint_every"] = *a.checkpoint_every;
  if (a.batch) over["batch_size"] = *a.batch;
  if (a.lr) over["learning_rate"] = *a.lr;
  const auto tc = resolve_train_config(a.train, over, a.seed);
  const std::string out = a.out.empty() ? (fs::path(a.data).parent_path() / "run").string() : a.out;
  TrainOptions opts;
  opts.run_dir = out;
  opts.resume = !a.fresh;
  opts.manifest_extra = {{"data_dir", fs::absolute(a.data).string()}, {"spec", bundle.spec}};
  if (!a.quiet) {
    opts.on_eval = [](const EvalPoint& e, std::span<const ScoreFlags>) {
      std::cout << "step " << e.step << ' ' << e.split << " answer " << e.acc.answer_acc;
      if (e.acc.full_acc) std::cout << " full " << *e.acc.full_acc;
      std::cout << " loss " << e.loss << std::endl;
    };
  }
  const auto res = train(bundle.data, bundle.vocab.eos(), mc, tc, opts);
  std::cout << "trained " << parameter_count(mc) << " parameters to step " << tc.max_steps;
  if (res.resumed_from) std::cout << " (resumed from " << res.resumed_from << ")";
  std::cout << "; run dir " << out << '\n';
  return 0;
}

int cmd_eval(RunPaths p, const std::string& split, int limit, const std::string& out) {
  p.resolve();
  const auto bundle = read_bundle(p.data);
  const auto params = Checkpoint::load(p.ckpt).to_params();
  std::vector<Example> examples = dataset_split(bundle.data, split);
  if (limit > 0 && static_cast<int>(examples.size()) > limit) examples.resize(static_cast<std::size_t>(limit));
  const auto res = evaluate(params, examples, bundle.spec.mode, bundle.vocab.eos(), split);
  nlohmann::json j = res.record;
  j["loss"] = res.loss;
  j["checkpoint"] = p.ckpt;
  write_or_print(out, j.dump(2) + "\n");
  return 0;
}

int cmd_fit(const std::string& runs, const std::string& out, const std::string& trend_out) {
  nlohmann::json all = nlohmann::json::object();
  std::vector<fs::path> dirs;
  if (fs::exists(fs::path(runs) / "runlog.csv")) {
    dirs.push_back(runs);
  } else {
    for (const auto& e : fs::recursive_directory_iterator(runs)) {
      if (e.is_regular_file() && e.path().filename() == "runlog.csv") dirs.push_back(e.path().parent_path());
    }
  }
  std::sort(dirs.begin(), dirs.end());
  for (const auto& d : dirs) {
    const auto rel = fs::relative(d, runs).generic_string();
    all[rel.empty() ? "." : rel] = fit_runlog(RunLog::read(d.string()));
  }
  write_or_print(out, all.dump(2) + "\n");
  if (!trend_out.empty()) {
    const auto tmp = fs::temp_directory_path() / ("groklab-fit-" + std::to_string(::getpid()));
    build_report(runs, tmp.string());
    if (fs::exists(tmp / "trend.csv")) {
      fs::copy_file(tmp / "trend.csv", trend_out, fs::copy_options::overwrite_existing);
    } else {
      std::cerr << "fewer than two (task, mode, phi, k) groups; no trend table written\n";
    }
    fs::remove_all(tmp);
  }
  std::cerr << "fitted " << dirs.size() << " run(s)\n";
  return 0;
}

struct ProbeArgs {
  RunPaths paths;
  std::vector<int> layers;
  std::string role = "final", target = "answer", split = "test", out;
  int slot = 0, examples = 1000;
  bool shuffle = false;
  std::uint64_t seed = 7;
};

int cmd_probe(ProbeArgs a) {
  a.paths.resolve();
  const auto bundle = read_bundle(a.paths.data);
  const auto ck = Checkpoint::load(a.paths.ckpt);
  const auto params = ck.to_params();
  std::vector<Example> pool = dataset_split(bundle.data, a.split);
  if (static_cast<int>(pool.size()) > a.examples) pool.resize(static_cast<std::size_t>(a.examples));
  if (a.layers.empty()) {
    for (int l = 0; l <= params.config.n_layers; ++l) a.layers.push_back(l);
  }
  ProbeConfig cfg;
  cfg.seed = a.seed;
  cfg.shuffle_labels = a.shuffle;
  std::ostringstream csv;
  csv << "step,layer,role,slot,target,train_acc,test_acc,n_train,n_test,chance,chance_sigma\n";
  for (int layer : a.layers) {
    ProbeSpec spec{layer, parse_position_role(a.role), a.slot, parse_probe_target(a.target)};
    const auto data = build_probe_data(params, pool, spec, bundle.vocab);
    const auto r = train_probe(data, cfg, spec);
    csv << ck.step << ',' << layer << ',' << to_string(spec.role) << ',' << a.slot << ','
        << to_string(spec.target) << ',' << r.train_acc << ',' << r.test_acc << ',' << r.n_train << ','
        << r.n_test << ',' << r.chance << ',' << r.chance_sigma << '\n';
  }
  write_or_print(a.out, csv.str());
  return 0;
}

struct PatchArgs {
  RunPaths paths;
  std::string split = "test", out, svg_out;
  int pairs = 16;
  std::uint64_t seed = 7;
};

int cmd_patch(PatchArgs a) {
  a.paths.resolve();
  const auto bundle = read_bundle(a.paths.data);
  const auto params = Checkpoint::load(a.paths.ckpt).to_params();
  const auto eos = bundle.vocab.eos();
  auto rng = make_rng(a.seed, "patch-" + a.split);
  const auto pairs = collect_patch_pairs(dataset_split(bundle.data, a.split), bundle, a.pairs, rng);
  if (pairs.empty()) throw std::runtime_error("no valid corruption pairs in split " + a.split);
  const auto grid = patch_grid(params, pairs, bundle.spec.mode, eos);
  write_or_print(a.out, grid_csv(grid));
  if (!a.svg_out.empty()) {
    std::vector<std::string> rows;
    for (int l : grid.layers) rows.push_back("h" + std::to_string(l));
    svg::write_file(a.svg_out, svg::heatmap(grid.effects, rows, grid.position_labels, "causal effect"));
  }
  std::cerr << pairs.size() << " pairs; clean log-prob " << grid.clean_logprob << ", corrupt "
            << grid.corrupt_logprob << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"groklab: synthetic reasoning tasks, small transformers and learning-curve analysis"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(GROKLAB_VERSION_STRING));

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Generate a dataset directory");
  g->add_option("--task", gen.task)->check(CLI::IsMember({"comparison", "sorting", "intersection", "composition"}));
  g->add_option("--k", gen.k);
  g->add_option("--phi", gen.phi);
  g->add_option("--mode", gen.mode)->check(CLI::IsMember({"direct", "cot"}));
  g->add_option("--template", gen.tmpl, "Intersection CoT template");
  g->add_option("--seed", gen.seed);
  g->add_option("--entities", gen.entities);
  g->add_option("--attributes", gen.attributes);
  g->add_option("--relations", gen.relations);
  g->add_option("--test-cap", gen.test_cap);
  g->add_flag("--mix", gen.mix, "Also generate MIX-entity queries");
  g->add_option("--out", gen.out)->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model on a dataset directory");
  t->add_option("--data", tr.data)->required();
  t->add_option("--out", tr.out, "Run directory (default <data>/../run)");
  t->add_option("--model", tr.model)->check(CLI::IsMember({"tiny", "desk", "small", "full"}));
  t->add_option("--train", tr.train)->check(CLI::IsMember({"desk", "small", "full"}));
  t->add_option("--steps", tr.steps);
  t->add_option("--batch", tr.batch);
  t->add_option("--lr", tr.lr);
  t->add_option("--eval-every", tr.eval_every);
  t->add_option("--checkpoint-every", tr.checkpoint_every);
  t->add_option("--seed", tr.seed);
  t->add_flag("--fresh", tr.fresh, "Ignore existing checkpoints");
  t->add_flag("--quiet", tr.quiet);

  RunPaths ev_paths;
  std::string ev_split = "test", ev_out;
  int ev_limit = 0;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on one split");
  add_run_paths(e, ev_paths);
  e->add_option("--split", ev_split);
  e->add_option("--limit", ev_limit);
  e->add_option("--out", ev_out);

  std::string fit_runs, fit_out, fit_trend;
  auto* f = app.add_subcommand("fit", "Fit logistic curves to run logs");
  f->add_option("--runs", fit_runs)->required();
  f->add_option("--out", fit_out);
  f->add_option("--trend", fit_trend, "Write the seed-averaged trend table here");

  ProbeArgs pr;
  auto* p = app.add_subcommand("probe", "Train linear probes on hidden states");
  add_run_paths(p, pr.paths);
  p->add_option("--layer", pr.layers, "Layers (default all)");
  p->add_option("--role", pr.role);
  p->add_option("--slot", pr.slot);
  p->add_option("--target", pr.target);
  p->add_option("--split", pr.split);
  p->add_option("--examples", pr.examples);
  p->add_option("--seed", pr.seed);
  p->add_flag("--shuffle", pr.shuffle, "Permute labels (null baseline)");
  p->add_option("--out", pr.out);

  PatchArgs pa;
  auto* pt = app.add_subcommand("patch", "Causal tracing grid over layers and positions");
  add_run_paths(pt, pa.paths);
  pt->add_option("--split", pa.split);
  pt->add_option("--pairs", pa.pairs);
  pt->add_option("--seed", pa.seed);
  pt->add_option("--out", pa.out);
  pt->add_option("--svg", pa.svg_out);

  std::string rep_root, rep_out;
  auto* r = app.add_subcommand("report", "Build the report bundle for an output root");
  r->add_option("--root", rep_root, "Output root (default $GROKLAB_OUT or out)");
  r->add_option("--out", rep_out, "Report directory (default <root>/report)");

  std::string sw_config, sw_out;
  int jobs = 1;
  bool verbose = false;
  auto* s = app.add_subcommand("sweep", "Run every cell of an experiment config");
  s->add_option("config", sw_config)->required()->check(CLI::ExistingFile);
  s->add_option("--jobs,-j", jobs)->check(CLI::PositiveNumber);
  s->add_option("--out", sw_out, "Output root (GROKLAB_OUT takes precedence)");
  s->add_flag("--verbose,-v", verbose);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*g) return cmd_gen(gen);
    if (*t) return cmd_train(tr);
    if (*e) return cmd_eval(ev_paths, ev_split, ev_limit, ev_out);
    if (*f) return cmd_fit(fit_runs, fit_out, fit_trend);
    if (*p) return cmd_probe(pr);
    if (*pt) return cmd_patch(pa);
    if (*r) {
      if (rep_root.empty()) {
        const char* env = std::getenv("GROKLAB_OUT");
        rep_root = env && *env ? env : "out";
      }
      build_report(rep_root, rep_out.empty() ? (fs::path(rep_root) / "report").string() : rep_out);
      return 0;
    }
    if (*s) {
      auto config = ExperimentConfig::from_ini(read_ini(sw_config));
      if (!sw_out.empty()) config.out = sw_out;
      const auto res = run_pipeline(config, jobs, StageLogger{verbose});
      for (const auto& c : res.cells) {
        std::cout << (c.ok ? "ok    " : "FAIL  ") << c.dir;
        if (!c.ran.empty()) {
          std::cout << "  ran:";
          for (const auto& x : c.ran) std::cout << ' ' << x;
        }
        if (!c.skipped.empty()) {
          std::cout << "  skipped:";
          for (const auto& x : c.skipped) std::cout << ' ' << x;
        }
        if (!c.ok) std::cout << "  error: " << c.error;
        std::cout << '\n';
      }
      std::cout << res.cells.size() << " cell(s), " << res.failures << " failure(s); report " << res.report_dir
                << '\n';
      return res.failures == 0 ? 0 : 1;
    }
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return 1;
  }
  return 0;
}
