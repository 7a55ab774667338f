#include "groklab/pipeline.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <regex>
#include <set>
#include <sstream>

#include "groklab/mechanistic.hpp"
#include "groklab/rng.hpp"
#include "groklab/svg.hpp"

#ifndef GROKLAB_VERSION
#define GROKLAB_VERSION "dev"
#endif

namespace fs = std::filesystem;

namespace groklab {

// ---------------------------------------------------------------------------
// INI

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',' || c == ' ' || c == '\t') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

bool parse_bool(const std::string& s) {
  if (s == "1" || s == "true" || s == "yes" || s == "on") return true;
  if (s == "0" || s == "false" || s == "no" || s == "off") return false;
  throw std::invalid_argument("not a boolean: " + s);
}

std::string read_text(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw std::runtime_error("cannot read " + p.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream os(p);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  os << s;
}

}  // namespace

IniFile parse_ini(const std::string& text) {
  IniFile ini;
  std::string section;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto cut = line.find_first_of("#;");
    if (cut != std::string::npos) line.erase(cut);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw std::invalid_argument("bad section header on line " + std::to_string(lineno));
      section = trim(line.substr(1, line.size() - 2));
      ini[section];
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("expected key = value on line " + std::to_string(lineno));
    }
    ini[section][trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return ini;
}

IniFile read_ini(const std::string& path) { return parse_ini(read_text(path)); }

// ---------------------------------------------------------------------------
// Experiment config

ExperimentConfig ExperimentConfig::from_ini(const IniFile& ini) {
  ExperimentConfig c;
  auto section = [&](const std::string& name) -> const std::map<std::string, std::string>& {
    static const std::map<std::string, std::string> empty;
    const auto it = ini.find(name);
    return it == ini.end() ? empty : it->second;
  };
  const auto& ex = section("experiment");
  auto get = [](const std::map<std::string, std::string>& s, const std::string& k) -> std::optional<std::string> {
    const auto it = s.find(k);
    if (it == s.end()) return std::nullopt;
    return it->second;
  };
  for (const auto& [key, value] : ex) {
    static const std::set<std::string> known{"task", "k", "phi", "mode", "template", "seeds",
                                             "seed", "model", "train", "out"};
    if (!known.count(key)) throw std::invalid_argument("unknown [experiment] key: " + key);
  }
  if (auto v = get(ex, "task")) c.task = parse_task(*v);
  if (auto v = get(ex, "k")) for (const auto& s : split_list(*v)) c.ks.push_back(std::stoi(s));
  if (auto v = get(ex, "phi")) for (const auto& s : split_list(*v)) c.phis.push_back(std::stod(s));
  if (auto v = get(ex, "mode")) for (const auto& s : split_list(*v)) c.modes.push_back(parse_mode(s));
  if (auto v = get(ex, "template")) {
    c.templates.clear();
    for (const auto& s : split_list(*v)) c.templates.push_back(parse_template(s));
  }
  auto seeds = get(ex, "seeds");
  if (!seeds) seeds = get(ex, "seed");
  if (seeds) {
    c.seeds.clear();
    for (const auto& s : split_list(*seeds)) c.seeds.push_back(std::stoull(s));
  }
  if (auto v = get(ex, "model")) c.model_preset = *v;
  if (auto v = get(ex, "train")) c.train_preset = *v;
  if (auto v = get(ex, "out")) c.out = *v;
  if (!get(ex, "mode")) c.modes = {Mode::direct};

  const auto& data = section("data");
  c.data = DatasetSpec::defaults(c.task, data.count("entities") ? std::stoi(data.at("entities")) : 1000);
  for (const auto& [key, value] : data) {
    if (key == "entities") continue;
    if (key == "attributes") c.data.n_attributes = std::stoi(value);
    else if (key == "relations") c.data.n_relations = std::stoi(value);
    else if (key == "values") {
      const auto parts = split_list(std::regex_replace(value, std::regex(":"), ","));
      if (parts.size() != 2) throw std::invalid_argument("values must be lo:hi");
      c.data.values = {std::stoi(parts[0]), std::stoi(parts[1])};
    } else if (key == "signed") c.data.sign_mode = parse_bool(value) ? SignMode::symmetric : SignMode::nonnegative;
    else if (key == "id_ratio") c.data.id_ratio = std::stod(value);
    else if (key == "validation_cap") c.data.validation_cap = std::stoi(value);
    else if (key == "test_cap") c.data.test_cap = std::stoi(value);
    else if (key == "edge_budget") c.data.edge_budget = std::stoi(value);
    else if (key == "mix") c.data.include_mix = parse_bool(value);
    else if (key == "phi_base") {
      if (value == "all") c.data.phi_base = PhiBase::all_atomics;
      else if (value == "id") c.data.phi_base = PhiBase::id_atomics;
      else throw std::invalid_argument("phi_base must be all or id");
    } else throw std::invalid_argument("unknown [data] key: " + key);
  }

  const std::map<std::string, std::string> model_keys{{"layers", "n_layers"}, {"hidden", "hidden_dim"},
                                                      {"heads", "n_heads"}, {"init_scale", "init_scale"},
                                                      {"tied", "tied_head"}};
  for (const auto& [key, value] : section("model")) {
    const auto it = model_keys.find(key);
    if (it == model_keys.end()) throw std::invalid_argument("unknown [model] key: " + key);
    if (key == "tied") c.model_overrides[it->second] = parse_bool(value);
    else if (key == "init_scale") c.model_overrides[it->second] = std::stod(value);
    else c.model_overrides[it->second] = std::stoi(value);
  }
  const std::map<std::string, std::string> train_keys{
      {"steps", "max_steps"},         {"batch", "batch_size"},       {"eval_every", "eval_every"},
      {"checkpoint_every", "checkpoint_every"}, {"lr", "learning_rate"}, {"warmup", "warmup_steps"},
      {"beta1", "beta1"},             {"beta2", "beta2"},            {"weight_decay", "weight_decay"},
      {"adam_eps", "adam_eps"},       {"eval_samples", "eval_samples"},
      {"full_sequence_loss", "full_sequence_loss"}};
  for (const auto& [key, value] : section("train")) {
    const auto it = train_keys.find(key);
    if (it == train_keys.end()) throw std::invalid_argument("unknown [train] key: " + key);
    if (key == "full_sequence_loss") c.train_overrides[it->second] = parse_bool(value);
    else if (key == "lr" || key.rfind("beta", 0) == 0 || key == "weight_decay" || key == "adam_eps") {
      c.train_overrides[it->second] = std::stod(value);
    } else {
      c.train_overrides[it->second] = std::stoll(value);
    }
  }
  for (const auto& [key, value] : section("mech")) {
    if (key == "enabled") c.mech.enabled = parse_bool(value);
    else if (key == "probe_examples") c.mech.probe_examples = std::stoi(value);
    else if (key == "patch_pairs") c.mech.patch_pairs = std::stoi(value);
    else throw std::invalid_argument("unknown [mech] key: " + key);
  }
  return c;
}

std::string ExperimentConfig::output_root() const {
  if (const char* env = std::getenv("GROKLAB_OUT"); env && *env) return env;
  return out;
}

std::vector<Cell> expand_cells(const ExperimentConfig& c) {
  std::vector<Cell> cells;
  for (int k : c.ks) {
    for (double phi : c.phis) {
      for (Mode mode : c.modes) {
        std::vector<CotTemplate> templates{CotTemplate::standard};
        if (c.task == Task::intersection && mode == Mode::cot) templates = c.templates;
        for (CotTemplate t : templates) {
          for (auto seed : c.seeds) cells.push_back({c.task, k, phi, mode, t, seed});
        }
      }
    }
  }
  return cells;
}

std::string format_phi(double phi) {
  std::ostringstream os;
  os << phi;
  return os.str();
}

std::string cell_dir(const std::string& root, const Cell& cell) {
  std::string mode(to_string(cell.mode));
  if (cell.task == Task::intersection && cell.mode == Mode::cot && cell.cot_template != CotTemplate::standard) {
    std::string t(to_string(cell.cot_template));
    std::replace(t.begin(), t.end(), '*', 'x');
    mode += "-" + t;
  }
  return (fs::path(root) / std::string(to_string(cell.task)) / mode /
          ("k" + std::to_string(cell.k) + "_phi" + format_phi(cell.phi) + "_s" + std::to_string(cell.seed)))
      .string();
}

DatasetSpec cell_dataset_spec(const ExperimentConfig& config, const Cell& cell) {
  DatasetSpec s = config.data;
  s.task = cell.task;
  s.k = cell.k;
  s.phi = cell.phi;
  s.mode = cell.mode;
  s.seed = cell.seed;
  s.cot_template = cell.task == Task::intersection
                       ? (cell.cot_template == CotTemplate::standard ? CotTemplate::retrieve_answer
                                                                      : cell.cot_template)
                       : CotTemplate::standard;
  return s;
}

int longest_sequence(const Dataset& data, int eos) {
  std::size_t n = 0;
  for (const auto* split : {&data.train, &data.validation, &data.test, &data.mix}) {
    for (const auto& ex : *split) n = std::max(n, ex.sequence(eos).size());
  }
  return static_cast<int>(n);
}

ModelConfig resolve_model_config(const std::string& preset, const nlohmann::json& overrides,
                                 const Bundle& bundle) {
  auto c = ModelConfig::preset(preset, bundle.vocab.size(), longest_sequence(bundle.data, bundle.vocab.eos()));
  nlohmann::json j = c;
  j.update(overrides);
  c = j.get<ModelConfig>();
  c.validate();
  return c;
}

TrainConfig resolve_train_config(const std::string& preset, const nlohmann::json& overrides,
                                 std::uint64_t seed) {
  nlohmann::json j = TrainConfig::preset(preset);
  j.update(overrides);
  auto c = j.get<TrainConfig>();
  c.seed = seed;
  c.validate();
  return c;
}

std::string hash_json(const nlohmann::json& j) {
  const auto h = fnv1a64(j.dump());
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

namespace {

fs::path stage_file(const std::string& dir, const std::string& name) {
  return fs::path(dir) / (".stage_" + name + ".json");
}

std::optional<nlohmann::json> read_stage(const std::string& dir, const std::string& name) {
  const auto p = stage_file(dir, name);
  if (!fs::exists(p)) return std::nullopt;
  try {
    return nlohmann::json::parse(read_text(p));
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

void begin_stage(const std::string& dir, const std::string& name, const std::string& hash) {
  write_text(stage_file(dir, name),
             nlohmann::json{{"hash", hash}, {"complete", false}, {"code_version", GROKLAB_VERSION}}.dump() + "\n");
}

}  // namespace

bool stage_done(const std::string& dir, const std::string& name, const std::string& hash) {
  const auto j = read_stage(dir, name);
  return j && j->value("hash", "") == hash && j->value("complete", false);
}

void mark_stage(const std::string& dir, const std::string& name, const std::string& hash) {
  write_text(stage_file(dir, name),
             nlohmann::json{{"hash", hash}, {"complete", true}, {"code_version", GROKLAB_VERSION}}.dump() + "\n");
}

void StageLogger::operator()(const std::string& msg) const {
  if (verbose) std::cerr << msg << std::endl;
}

// ---------------------------------------------------------------------------
// Stage bodies

nlohmann::json fit_runlog(const RunLog& log) {
  nlohmann::json out = nlohmann::json::object();
  for (const auto& split : log.splits()) {
    std::vector<CurvePoint> answer, full;
    for (const auto& e : log.evals) {
      if (e.split != split || e.step <= 0) continue;
      answer.push_back({static_cast<double>(e.step), e.acc.answer_acc});
      if (e.acc.full_acc) full.push_back({static_cast<double>(e.step), *e.acc.full_acc});
    }
    auto fit_or_note = [](const std::vector<CurvePoint>& pts) {
      if (pts.size() < 4) {
        LogisticFit f;
        f.n_points = pts.size();
        f.diagnostic = "fewer than 4 evaluation points";
        return nlohmann::json(f);
      }
      return nlohmann::json(fit_logistic(pts));
    };
    out[split]["answer"] = fit_or_note(answer);
    if (!full.empty()) out[split]["full"] = fit_or_note(full);
  }
  return out;
}

namespace {

std::vector<std::pair<std::int64_t, fs::path>> numbered_checkpoints(const fs::path& ckpt_dir) {
  std::vector<std::pair<std::int64_t, fs::path>> out;
  if (!fs::exists(ckpt_dir)) return out;
  static const std::regex re("step_([0-9]+)\\.ckpt");
  for (const auto& entry : fs::directory_iterator(ckpt_dir)) {
    std::smatch m;
    const auto name = entry.path().filename().string();
    if (std::regex_match(name, m, re)) out.emplace_back(std::stoll(m[1]), entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<Example> probe_pool(const Bundle& b, int limit, std::uint64_t seed) {
  std::vector<Example> pool = b.data.test.size() >= 10 ? b.data.test : b.data.validation;
  if (static_cast<int>(pool.size()) > limit) {
    auto rng = make_rng(seed, "probe-pool");
    rng.shuffle(std::span<Example>(pool));
    pool.resize(static_cast<std::size_t>(limit));
  }
  return pool;
}

}  // namespace

MechOutputs run_mechanistic(const std::string& run_dir, const Bundle& bundle, const MechConfig& config,
                            std::uint64_t seed) {
  MechOutputs out;
  const fs::path mech = fs::path(run_dir) / "mech";
  fs::create_directories(mech);
  const auto ckpts = numbered_checkpoints(fs::path(run_dir) / "ckpt");
  if (ckpts.empty()) throw std::runtime_error("no checkpoints in " + run_dir);

  std::vector<ProbeSpec> specs{{0, PositionRole::final_query_token, 0, ProbeTarget::answer_entity}};
  if (bundle.spec.task == Task::comparison || bundle.spec.task == Task::sorting) {
    specs.push_back({0, PositionRole::entity_token, 0, ProbeTarget::fact_value});
  }
  const auto pool = probe_pool(bundle, config.probe_examples, seed);
  ProbeConfig pcfg;
  pcfg.seed = seed;
  for (const auto& base : specs) {
    std::ostringstream csv;
    csv << "step,layer,train_acc,test_acc,n_train,n_test,chance\n";
    std::vector<std::int64_t> steps;
    std::map<std::pair<int, std::int64_t>, double> cells;
    int n_layers = 0;
    for (const auto& [step, path] : ckpts) {
      const auto params = Checkpoint::load(path.string()).to_params();
      n_layers = params.config.n_layers;
      steps.push_back(step);
      for (int layer = 0; layer <= n_layers; ++layer) {
        ProbeSpec spec = base;
        spec.layer = layer;
        const auto data = build_probe_data(params, pool, spec, bundle.vocab);
        try {
          const auto r = train_probe(data, pcfg, spec);
          csv << step << ',' << layer << ',' << r.train_acc << ',' << r.test_acc << ',' << r.n_train << ','
              << r.n_test << ',' << r.chance << '\n';
          cells[{layer, step}] = r.test_acc;
        } catch (const std::invalid_argument&) {
          // too few examples or a single class at this slot
        }
      }
    }
    const std::string stem = "probe_" + std::string(to_string(base.target));
    write_text(mech / (stem + ".csv"), csv.str());
    out.files.push_back((mech / (stem + ".csv")).string());
    Eigen::MatrixXd grid = Eigen::MatrixXd::Zero(n_layers + 1, static_cast<Eigen::Index>(steps.size()));
    std::vector<std::string> rows, cols;
    for (int l = 0; l <= n_layers; ++l) rows.push_back("h" + std::to_string(l));
    for (std::size_t s = 0; s < steps.size(); ++s) {
      cols.push_back(std::to_string(steps[s]));
      for (int l = 0; l <= n_layers; ++l) {
        const auto it = cells.find({l, steps[s]});
        if (it != cells.end()) grid(l, static_cast<Eigen::Index>(s)) = it->second;
      }
    }
    svg::write_file((mech / (stem + ".svg")).string(),
                    svg::heatmap(grid, rows, cols, stem + " test accuracy (layer x step)"));
    out.files.push_back((mech / (stem + ".svg")).string());
  }

  const auto last = fs::path(run_dir) / "ckpt" / "last.ckpt";
  const auto params = Checkpoint::load(fs::exists(last) ? last.string() : ckpts.back().second.string()).to_params();
  const std::pair<const char*, const std::vector<Example>*> splits[] = {{"id_val", &bundle.data.validation},
                                                                         {"ood_test", &bundle.data.test}};
  for (const auto& [name, examples] : splits) {
    auto rng = make_rng(seed, std::string("patch-") + name);
    const auto pairs = collect_patch_pairs(*examples, bundle, config.patch_pairs, rng);
    if (pairs.empty()) continue;
    const auto grid = patch_grid(params, pairs, bundle.spec.mode, bundle.vocab.eos());
    const std::string stem = std::string("patch_") + name;
    write_text(mech / (stem + ".csv"), grid_csv(grid));
    std::vector<std::string> rows;
    for (int l : grid.layers) rows.push_back("h" + std::to_string(l));
    svg::write_file((mech / (stem + ".svg")).string(),
                    svg::heatmap(grid.effects, rows, grid.position_labels,
                                 stem + " causal effect, " + std::to_string(pairs.size()) + " pairs"));
    out.files.push_back((mech / (stem + ".csv")).string());
    out.files.push_back((mech / (stem + ".svg")).string());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cells

CellOutcome run_cell(const ExperimentConfig& config, const Cell& cell, const StageLogger& log) {
  CellOutcome oc;
  oc.dir = cell_dir(config.output_root(), cell);
  const std::string& dir = oc.dir;
  try {
    fs::create_directories(dir);
    const auto spec = cell_dataset_spec(config, cell);
    const nlohmann::json cell_json{{"task", to_string(cell.task)}, {"k", cell.k},
                                   {"phi", cell.phi},              {"mode", to_string(cell.mode)},
                                   {"template", to_string(spec.cot_template)}, {"seed", cell.seed}};

    const std::string data_hash = hash_json({{"spec", spec}, {"code_version", GROKLAB_VERSION}});
    Bundle bundle;
    if (stage_done(dir, "gen", data_hash)) {
      oc.skipped.push_back("gen");
      bundle = read_bundle((fs::path(dir) / "data").string());
    } else {
      log("[gen] " + dir);
      begin_stage(dir, "gen", data_hash);
      bundle = generate_bundle(spec);
      write_bundle(bundle, (fs::path(dir) / "data").string());
      write_text(fs::path(dir) / "cell.json", cell_json.dump(2) + "\n");
      mark_stage(dir, "gen", data_hash);
      oc.ran.push_back("gen");
    }

    const auto mc = resolve_model_config(config.model_preset, config.model_overrides, bundle);
    const auto tc = resolve_train_config(config.train_preset, config.train_overrides, cell.seed);
    const std::string train_hash = hash_json({{"data", data_hash}, {"model", mc}, {"train", tc}});
    if (stage_done(dir, "train", train_hash)) {
      oc.skipped.push_back("train");
    } else {
      const auto prev = read_stage(dir, "train");
      if (prev && prev->value("hash", "") != train_hash) {
        fs::remove_all(fs::path(dir) / "ckpt");
        fs::remove(fs::path(dir) / "runlog.csv");
        fs::remove(fs::path(dir) / "trainloss.csv");
      }
      log("[train] " + dir);
      begin_stage(dir, "train", train_hash);
      TrainOptions opts;
      opts.run_dir = dir;
      opts.manifest_extra = {{"cell", cell_json}, {"data_hash", data_hash}, {"kb_hash", bundle.attr_kb ? kb_hash(*bundle.attr_kb) : kb_hash(*bundle.rel_kb)}};
      train(bundle.data, bundle.vocab.eos(), mc, tc, opts);
      mark_stage(dir, "train", train_hash);
      oc.ran.push_back("train");
    }

    const std::string fit_hash = hash_json({{"train", train_hash}, {"stage", "fit"}});
    if (stage_done(dir, "fit", fit_hash)) {
      oc.skipped.push_back("fit");
    } else {
      log("[fit] " + dir);
      begin_stage(dir, "fit", fit_hash);
      write_text(fs::path(dir) / "fits.json", fit_runlog(RunLog::read(dir)).dump(2) + "\n");
      mark_stage(dir, "fit", fit_hash);
      oc.ran.push_back("fit");
    }

    if (config.mech.enabled) {
      const std::string mech_hash =
          hash_json({{"train", train_hash},
                     {"probe_examples", config.mech.probe_examples},
                     {"patch_pairs", config.mech.patch_pairs}});
      if (stage_done(dir, "mech", mech_hash)) {
        oc.skipped.push_back("mech");
      } else {
        log("[mech] " + dir);
        begin_stage(dir, "mech", mech_hash);
        run_mechanistic(dir, bundle, config.mech, cell.seed);
        mark_stage(dir, "mech", mech_hash);
        oc.ran.push_back("mech");
      }
    }
  } catch (const std::exception& e) {
    oc.ok = false;
    oc.error = e.what();
    log("[error] " + dir + ": " + e.what());
    try {
      write_text(fs::path(dir) / "error.txt", oc.error + "\n");
    } catch (const std::exception&) {
    }
  }
  if (oc.ok && fs::exists(fs::path(dir) / "error.txt")) fs::remove(fs::path(dir) / "error.txt");
  return oc;
}

namespace {

nlohmann::json outcome_json(const CellOutcome& o) {
  return {{"dir", o.dir}, {"ran", o.ran}, {"skipped", o.skipped}, {"ok", o.ok}, {"error", o.error}};
}

CellOutcome outcome_from(const nlohmann::json& j) {
  CellOutcome o;
  o.dir = j.at("dir");
  o.ran = j.at("ran").get<std::vector<std::string>>();
  o.skipped = j.at("skipped").get<std::vector<std::string>>();
  o.ok = j.at("ok");
  o.error = j.at("error");
  return o;
}

}  // namespace

PipelineResult run_pipeline(const ExperimentConfig& config, int jobs, const StageLogger& log) {
  PipelineResult res;
  const auto cells = expand_cells(config);
  const std::string root = config.output_root();
  fs::create_directories(root);
  if (jobs <= 1 || cells.size() <= 1) {
    for (const auto& c : cells) res.cells.push_back(run_cell(config, c, log));
  } else {
    std::map<pid_t, std::size_t> running;
    res.cells.resize(cells.size());
    std::size_t next = 0;
    auto reap = [&]() {
      int status = 0;
      const pid_t pid = ::waitpid(-1, &status, 0);
      if (pid <= 0) return;
      const std::size_t idx = running.at(pid);
      running.erase(pid);
      const auto dir = cell_dir(root, cells[idx]);
      const auto path = fs::path(dir) / ".outcome.json";
      if (fs::exists(path)) {
        res.cells[idx] = outcome_from(nlohmann::json::parse(read_text(path)));
        fs::remove(path);
      } else {
        res.cells[idx].dir = dir;
        res.cells[idx].ok = false;
        res.cells[idx].error = "worker exited with status " + std::to_string(status);
      }
    };
    while (next < cells.size() || !running.empty()) {
      if (next < cells.size() && static_cast<int>(running.size()) < jobs) {
        std::cout.flush();
        std::cerr.flush();
        const pid_t pid = ::fork();
        if (pid < 0) throw std::runtime_error("fork failed");
        if (pid == 0) {
          int code = 1;
          try {
            const auto oc = run_cell(config, cells[next], log);
            write_text(fs::path(oc.dir) / ".outcome.json", outcome_json(oc).dump() + "\n");
            code = oc.ok ? 0 : 1;
          } catch (...) {
          }
          std::_Exit(code);
        }
        running[pid] = next++;
      } else {
        reap();
      }
    }
  }
  for (const auto& c : res.cells) res.failures += c.ok ? 0 : 1;
  res.report_dir = (fs::path(root) / "report").string();
  build_report(root, res.report_dir);
  return res;
}

// ---------------------------------------------------------------------------
// Report

namespace {

struct RunInfo {
  fs::path dir;
  std::string rel;
  std::string flat;
  Task task = Task::comparison;
  Mode mode = Mode::direct;
  std::string cot_template = "standard";
  int k = 0;
  double phi = 0.0;
  std::uint64_t seed = 0;
  RunLog log;
};

std::string opt(const std::optional<double>& v) {
  if (!v) return "";
  std::ostringstream os;
  os.precision(6);
  os << *v;
  return os.str();
}

std::vector<RunInfo> discover_runs(const fs::path& root, const fs::path& exclude) {
  std::vector<RunInfo> runs;
  if (!fs::exists(root)) return runs;
  std::vector<fs::path> dirs;
  for (auto it = fs::recursive_directory_iterator(root); it != fs::recursive_directory_iterator(); ++it) {
    if (it->is_directory() && fs::equivalent(it->path(), exclude)) {
      it.disable_recursion_pending();
      continue;
    }
    if (it->is_regular_file() && it->path().filename() == "runlog.csv") dirs.push_back(it->path().parent_path());
  }
  std::sort(dirs.begin(), dirs.end());
  for (const auto& d : dirs) {
    RunInfo r;
    r.dir = d;
    r.rel = fs::relative(d, root).generic_string();
    r.flat = r.rel;
    std::replace(r.flat.begin(), r.flat.end(), '/', '_');
    r.log = RunLog::read(d.string());
    const auto& m = r.log.manifest;
    const auto cell = m.contains("cell") ? m["cell"] : nlohmann::json::object();
    r.task = parse_task(cell.value("task", m.value("task", std::string("comparison"))));
    r.mode = parse_mode(cell.value("mode", m.value("mode", std::string("direct"))));
    r.cot_template = cell.value("template", std::string("standard"));
    r.k = cell.value("k", m.value("k", 0));
    r.phi = cell.value("phi", m.value("phi", 0.0));
    r.seed = cell.value("seed", m.contains("train") ? m["train"].value("seed", std::uint64_t{0}) : 0);
    runs.push_back(std::move(r));
  }
  return runs;
}

}  // namespace

void build_report(const std::string& root_str, const std::string& out_str) {
  const fs::path root = root_str, out = out_str;
  fs::create_directories(out);
  const auto runs = discover_runs(root, out);

  // Final-step accuracy table
  std::ostringstream acc;
  acc << "task,mode,template,k,phi,seed,split,step,answer_acc,strict_answer_acc,trace_acc,full_acc,n\n";
  for (const auto& r : runs) {
    std::map<std::string, const EvalPoint*> last;
    for (const auto& e : r.log.evals) last[e.split] = &e;
    for (const auto& [split, e] : last) {
      acc << to_string(r.task) << ',' << to_string(r.mode) << ',' << r.cot_template << ',' << r.k << ','
          << format_phi(r.phi) << ',' << r.seed << ',' << split << ',' << e->step << ',' << e->acc.answer_acc
          << ',' << e->acc.strict_answer_acc << ',' << opt(e->acc.trace_acc) << ',' << opt(e->acc.full_acc)
          << ',' << e->acc.n << '\n';
    }
  }
  write_text(out / "accuracy_table.csv", acc.str());

  // Per-run fits
  std::ostringstream fits;
  fits << "task,mode,template,k,phi,seed,split,metric,L,k_fit,t0,r_hat,r_squared,rmse,converged\n";
  for (const auto& r : runs) {
    const auto p = r.dir / "fits.json";
    const auto j = fs::exists(p) ? nlohmann::json::parse(read_text(p)) : fit_runlog(r.log);
    for (const auto& [split, metrics] : j.items()) {
      for (const auto& [metric, fj] : metrics.items()) {
        const auto f = fj.get<LogisticFit>();
        fits << to_string(r.task) << ',' << to_string(r.mode) << ',' << r.cot_template << ',' << r.k << ','
             << format_phi(r.phi) << ',' << r.seed << ',' << split << ',' << metric << ',' << f.L << ','
             << f.k_fit << ',' << f.t0 << ',' << f.r_hat << ',' << f.r_squared << ',' << f.rmse << ','
             << (f.converged ? 1 : 0) << '\n';
      }
    }
  }
  write_text(out / "fits_table.csv", fits.str());

  // Seed-averaged OOD curves feed the trend report.
  std::map<FitKey, std::map<std::int64_t, std::pair<double, int>>> mean_curves;
  for (const auto& r : runs) {
    for (const auto& e : r.log.evals) {
      if (e.split != "ood_test" || e.step <= 0) continue;
      auto add = [&](const std::string& metric, double v) {
        auto& cell = mean_curves[{r.task, r.mode, r.phi, r.k, metric}][e.step];
        cell.first += v;
        cell.second += 1;
      };
      add("answer", e.acc.answer_acc);
      if (e.acc.full_acc) add("full", *e.acc.full_acc);
    }
  }
  std::map<FitKey, LogisticFit> grouped;
  for (const auto& [key, pts] : mean_curves) {
    std::vector<CurvePoint> curve;
    for (const auto& [step, sum] : pts) curve.push_back({static_cast<double>(step), sum.first / sum.second});
    if (curve.size() >= 4) grouped[key] = fit_logistic(curve);
  }
  if (grouped.size() >= 2) {
    const auto rep = trend_report(grouped);
    write_text(out / "trend.json", nlohmann::json(rep).dump(2) + "\n");
    write_text(out / "trend.csv", trend_csv(rep));
  } else {
    fs::remove(out / "trend.json");
    fs::remove(out / "trend.csv");
  }

  // Learning and gap curves
  fs::create_directories(out / "curves");
  std::ostringstream gaps;
  gaps << "run,split,step,gap\n";
  for (const auto& r : runs) {
    std::vector<svg::Series> series;
    for (const auto& split : r.log.splits()) {
      svg::Series ans{split + " answer", {}, {}}, full{split + " full", {}, {}};
      for (const auto& e : r.log.evals) {
        if (e.split != split) continue;
        ans.xs.push_back(static_cast<double>(e.step));
        ans.ys.push_back(e.acc.answer_acc);
        if (e.acc.full_acc) {
          full.xs.push_back(static_cast<double>(e.step));
          full.ys.push_back(*e.acc.full_acc);
        }
      }
      series.push_back(std::move(ans));
      if (!full.xs.empty()) series.push_back(std::move(full));
    }
    svg::ChartOptions o;
    o.title = r.rel;
    o.x_label = "step";
    o.y_label = "accuracy";
    o.log_x = true;
    svg::write_file((out / "curves" / (r.flat + "_accuracy.svg")).string(), svg::line_chart(series, o));

    if (r.mode != Mode::cot) continue;
    std::vector<svg::Series> gap_series;
    for (const auto& split : r.log.splits()) {
      const auto curve = r.log.curve(split);
      if (curve.empty() || !curve.points.front().second.full_acc) continue;
      svg::Series s{split, {}, {}};
      for (const auto& [step, g] : unfaithfulness_gap(curve)) {
        gaps << r.rel << ',' << split << ',' << step << ',' << g << '\n';
        s.xs.push_back(static_cast<double>(step));
        s.ys.push_back(g);
      }
      gap_series.push_back(std::move(s));
    }
    o.y_label = "answer - full";
    o.title = r.rel + " unfaithfulness gap";
    svg::write_file((out / "curves" / (r.flat + "_gap.svg")).string(), svg::line_chart(gap_series, o));
  }
  write_text(out / "gap_curves.csv", gaps.str());

  // Probe surfaces and patch grids
  fs::create_directories(out / "mech");
  std::vector<std::string> mech_files;
  for (const auto& r : runs) {
    const auto m = r.dir / "mech";
    if (!fs::exists(m)) continue;
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(m)) files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      const auto dest = out / "mech" / (r.flat + "_" + f.filename().string());
      fs::copy_file(f, dest, fs::copy_options::overwrite_existing);
      mech_files.push_back("mech/" + dest.filename().string());
    }
  }

  std::ostringstream idx;
  idx << "# groklab report\n\n";
  idx << "Runs: " << runs.size() << "\n\n";
  idx << "- accuracy_table.csv: final-step accuracies per run and split\n";
  idx << "- fits_table.csv: logistic fits per run, split and metric\n";
  if (grouped.size() >= 2) idx << "- trend.csv / trend.json: seed-averaged OOD fits and monotonicity findings\n";
  idx << "- gap_curves.csv: answer minus full-sequence accuracy for CoT runs\n";
  idx << "- curves/: accuracy and gap charts\n";
  for (const auto& f : mech_files) idx << "- " << f << "\n";
  write_text(out / "index.md", idx.str());
}

}  // namespace groklab
