#include "groklab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "groklab/rng.hpp"

#ifndef GROKLAB_VERSION
#define GROKLAB_VERSION "dev"
#endif

namespace fs = std::filesystem;

namespace groklab {

void TrainConfig::validate() const {
  if (max_steps <= 0 || batch_size <= 0 || eval_every <= 0 || checkpoint_every <= 0) {
    throw std::invalid_argument("max_steps, batch_size, eval_every and checkpoint_every must be positive");
  }
  if (!(learning_rate >= 0.0) || warmup_steps < 0) throw std::invalid_argument("bad learning rate schedule");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw std::invalid_argument("Adam betas must lie in [0, 1)");
  }
  if (!(weight_decay >= 0.0) || !(adam_eps > 0.0)) throw std::invalid_argument("bad weight decay or eps");
  if (eval_samples <= 0) throw std::invalid_argument("eval_samples must be positive");
}

TrainConfig TrainConfig::preset(std::string_view name) {
  TrainConfig c;
  if (name == "desk") {
    c.max_steps = 5000, c.batch_size = 64, c.eval_every = 250, c.checkpoint_every = 1000;
  } else if (name == "small") {
    c.max_steps = 20000, c.batch_size = 128, c.eval_every = 500, c.checkpoint_every = 2000;
  } else if (name == "full") {
    c.max_steps = 200000, c.batch_size = 256, c.eval_every = 1000, c.checkpoint_every = 10000;
  } else {
    throw std::invalid_argument("unknown train preset: " + std::string(name));
  }
  return c;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"max_steps", c.max_steps},         {"batch_size", c.batch_size},
                     {"eval_every", c.eval_every},       {"checkpoint_every", c.checkpoint_every},
                     {"learning_rate", c.learning_rate}, {"warmup_steps", c.warmup_steps},
                     {"beta1", c.beta1},                 {"beta2", c.beta2},
                     {"weight_decay", c.weight_decay},   {"adam_eps", c.adam_eps},
                     {"seed", c.seed},                   {"eval_samples", c.eval_samples},
                     {"full_sequence_loss", c.full_sequence_loss}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.max_steps = j.value("max_steps", d.max_steps);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.eval_every = j.value("eval_every", d.eval_every);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.adam_eps = j.value("adam_eps", d.adam_eps);
  c.seed = j.value("seed", d.seed);
  c.eval_samples = j.value("eval_samples", d.eval_samples);
  c.full_sequence_loss = j.value("full_sequence_loss", d.full_sequence_loss);
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_layers", c.n_layers},       {"hidden_dim", c.hidden_dim},
                     {"n_heads", c.n_heads},         {"context_len", c.context_len},
                     {"vocab_size", c.vocab_size},   {"layernorm_eps", c.layernorm_eps},
                     {"init_scale", c.init_scale},   {"tied_head", c.tied_head}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.n_layers = j.at("n_layers").get<int>();
  c.hidden_dim = j.at("hidden_dim").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.context_len = j.at("context_len").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.layernorm_eps = j.value("layernorm_eps", 1e-5);
  c.init_scale = j.value("init_scale", 1.0);
  c.tied_head = j.value("tied_head", false);
}

TrainSequence encode(const Example& ex, int eos, bool full_sequence_loss) {
  TrainSequence s;
  s.tokens = ex.sequence(eos);
  s.loss_mask.assign(s.tokens.size(), 0);
  const std::size_t first = full_sequence_loss ? 1 : ex.query.size();
  for (std::size_t t = first; t < s.tokens.size(); ++t) s.loss_mask[t] = 1;
  return s;
}

double learning_rate_at(const TrainConfig& c, std::int64_t update) {
  if (c.warmup_steps > 0 && update < c.warmup_steps) {
    return c.learning_rate * static_cast<double>(update) / static_cast<double>(c.warmup_steps);
  }
  return c.learning_rate;
}

double estimate_flops(const ModelConfig& config, double tokens) {
  if (tokens < 0) throw std::invalid_argument("token count must be non-negative");
  return 6.0 * static_cast<double>(parameter_count(config)) * tokens;
}

AdamState AdamState::zeros(const ModelConfig& config) {
  return {Parameters::zeros(config), Parameters::zeros(config), 0};
}

void adamw_step(Parameters& params, const Parameters& grads, AdamState& state,
                const TrainConfig& c, double lr) {
  state.t += 1;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.t));
  auto p = params.tensors();
  auto g = grads.tensors();
  auto m = state.m.tensors();
  auto v = state.v.tensors();
  const float b1 = static_cast<float>(c.beta1);
  const float b2 = static_cast<float>(c.beta2);
  for (std::size_t i = 0; i < p.size(); ++i) {
    auto& P = *p[i].second;
    const auto& G = *g[i].second;
    auto& M = *m[i].second;
    auto& V = *v[i].second;
    M = b1 * M + (1.0f - b1) * G;
    V = b2 * V + (1.0f - b2) * G.cwiseProduct(G);
    const float step = static_cast<float>(lr / bc1);
    const float denom_scale = static_cast<float>(1.0 / std::sqrt(bc2));
    const float eps = static_cast<float>(c.adam_eps);
    if (P.rows() > 1 && c.weight_decay > 0.0) {
      P *= 1.0f - static_cast<float>(lr * c.weight_decay);
    }
    P.array() -= step * M.array() / (V.array().sqrt() * denom_scale + eps);
  }
}

EvalOutput evaluate(const Parameters& params, std::span<const Example> examples, Mode mode, int eos,
                    std::string split, int batch_size) {
  EvalOutput out;
  if (examples.empty()) {
    out.record = aggregate(out.flags, Task::comparison, std::move(split), mode);
    return out;
  }
  const Task task = examples.front().task;
  const int ctx = params.config.context_len;
  out.flags.reserve(examples.size());
  for (const auto& ex : examples) {
    if (ex.task != task) throw std::invalid_argument("evaluation examples must share one task");
    const int room = ctx - static_cast<int>(ex.query.size());
    const int budget = std::min(static_cast<int>(ex.trace.size() + ex.answer.size()) + 2, room);
    const auto gen = generate_greedy<float>(params, ex.query, budget, eos);
    out.flags.push_back(score_example(gen, ex, mode, eos));
  }
  out.record = aggregate(out.flags, task, std::move(split), mode);

  double total = 0.0;
  std::size_t n = 0;
  std::vector<TrainSequence> chunk;
  for (std::size_t i = 0; i < examples.size(); i += static_cast<std::size_t>(batch_size)) {
    chunk.clear();
    for (std::size_t j = i; j < std::min(examples.size(), i + batch_size); ++j) {
      chunk.push_back(encode(examples[j], eos));
    }
    std::size_t targets = 0;
    for (const auto& s : chunk) targets += std::count(s.loss_mask.begin() + 1, s.loss_mask.end(), 1);
    total += static_cast<double>(batch_loss<float>(params, chunk)) * static_cast<double>(targets);
    n += targets;
  }
  out.loss = n ? total / static_cast<double>(n) : 0.0;
  return out;
}

namespace {

std::vector<Example> subsample(std::vector<Example> pool, int samples, std::uint64_t seed,
                               std::string_view tag) {
  if (static_cast<int>(pool.size()) > samples) {
    auto rng = make_rng(seed, tag);
    rng.shuffle(std::span<Example>(pool));
    pool.resize(static_cast<std::size_t>(samples));
  }
  return pool;
}

}  // namespace

std::vector<EvalSet> make_eval_sets(const Dataset& data, int samples, std::uint64_t seed) {
  std::vector<Example> composed, atomic;
  for (const auto& ex : data.train) (is_atomic(ex.task) ? atomic : composed).push_back(ex);
  std::vector<EvalSet> sets;
  auto add = [&](std::string name, std::vector<Example> pool) {
    if (pool.empty()) return;
    sets.push_back({name, subsample(std::move(pool), samples, seed, "eval-" + name)});
  };
  add("train", std::move(composed));
  add("train_atomic", std::move(atomic));
  add("id_val", data.validation);
  add("ood_test", data.test);
  return sets;
}

// ---------------------------------------------------------------------------
// RunLog

LearningCurve RunLog::curve(std::string_view split) const {
  LearningCurve c;
  for (const auto& e : evals) {
    if (e.split == split) c.add(e.step, e.acc);
  }
  return c;
}

std::vector<std::string> RunLog::splits() const {
  std::vector<std::string> out;
  for (const auto& e : evals) {
    if (std::find(out.begin(), out.end(), e.split) == out.end()) out.push_back(e.split);
  }
  return out;
}

namespace {

std::string opt_cell(const std::optional<double>& v) {
  if (!v) return "";
  std::ostringstream os;
  os.precision(10);
  os << *v;
  return os.str();
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

void RunLog::write(const std::string& dir) const {
  fs::create_directories(dir);
  {
    std::ofstream os(fs::path(dir) / "runlog.csv");
    os.precision(10);
    os << "step,split,answer_acc,trace_acc,full_acc,loss,rel_flops,strict_answer_acc,n,task,mode\n";
    for (const auto& e : evals) {
      os << e.step << ',' << e.split << ',' << e.acc.answer_acc << ',' << opt_cell(e.acc.trace_acc)
         << ',' << opt_cell(e.acc.full_acc) << ',' << e.loss << ',' << e.rel_flops << ','
         << e.acc.strict_answer_acc << ',' << e.acc.n << ',' << to_string(e.acc.task) << ','
         << to_string(e.acc.mode) << '\n';
    }
  }
  {
    std::ofstream os(fs::path(dir) / "trainloss.csv");
    os.precision(10);
    os << "step,loss,rel_flops\n";
    for (const auto& p : train_loss) os << p.step << ',' << p.loss << ',' << p.rel_flops << '\n';
  }
  std::ofstream(fs::path(dir) / "train_manifest.json") << manifest.dump(2) << '\n';
}

RunLog RunLog::read(const std::string& dir) {
  RunLog log;
  std::ifstream is(fs::path(dir) / "runlog.csv");
  if (!is) throw std::runtime_error("missing runlog.csv in " + dir);
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto c = split_csv(line);
    if (c.size() < 11) throw std::runtime_error("malformed runlog row: " + line);
    EvalPoint e;
    e.step = std::stoll(c[0]);
    e.split = c[1];
    e.acc.split = c[1];
    e.acc.answer_acc = std::stod(c[2]);
    if (!c[3].empty()) e.acc.trace_acc = std::stod(c[3]);
    if (!c[4].empty()) e.acc.full_acc = std::stod(c[4]);
    e.loss = std::stod(c[5]);
    e.rel_flops = std::stod(c[6]);
    e.acc.strict_answer_acc = std::stod(c[7]);
    e.acc.n = std::stoull(c[8]);
    e.acc.task = parse_task(c[9]);
    e.acc.mode = parse_mode(c[10]);
    log.evals.push_back(std::move(e));
  }
  std::ifstream ls(fs::path(dir) / "trainloss.csv");
  if (ls) {
    std::getline(ls, line);
    while (std::getline(ls, line)) {
      if (line.empty()) continue;
      const auto c = split_csv(line);
      log.train_loss.push_back({std::stoll(c.at(0)), std::stod(c.at(1)), std::stod(c.at(2))});
    }
  }
  std::ifstream ms(fs::path(dir) / "train_manifest.json");
  if (ms) log.manifest = nlohmann::json::parse(ms);
  return log;
}

// ---------------------------------------------------------------------------
// Checkpoints with optimizer state

void save_training_checkpoint(const std::string& path, const Parameters& params,
                              const AdamState& state) {
  auto ck = Checkpoint::from_params(params, static_cast<std::uint64_t>(state.t));
  for (const char* which : {"m", "v"}) {
    const auto& src = which[0] == 'm' ? state.m : state.v;
    for (const auto& [name, m] : src.tensors()) {
      ck.tensors.push_back({std::string("adam.") + which + "/" + name,
                            static_cast<std::uint32_t>(m->rows()),
                            static_cast<std::uint32_t>(m->cols()),
                            std::vector<float>(m->data(), m->data() + m->size())});
    }
  }
  ck.save(path);
}

std::pair<Parameters, AdamState> load_training_checkpoint(const std::string& path) {
  const auto ck = Checkpoint::load(path);
  auto params = ck.to_params();
  auto state = AdamState::zeros(ck.config);
  state.t = static_cast<std::int64_t>(ck.step);
  for (const char* which : {"m", "v"}) {
    auto& dst = which[0] == 'm' ? state.m : state.v;
    for (auto& [name, m] : dst.tensors()) {
      const auto* t = ck.find(std::string("adam.") + which + "/" + name);
      if (!t) continue;  // parameters-only checkpoint: optimizer restarts from zero
      if (t->rows != m->rows() || t->cols != m->cols()) {
        throw std::runtime_error("optimizer tensor " + name + " has the wrong shape");
      }
      std::copy(t->data.begin(), t->data.end(), m->data());
    }
  }
  return {std::move(params), std::move(state)};
}

// ---------------------------------------------------------------------------
// Training loop

TrainResult train(const Dataset& data, int eos, const ModelConfig& model_config,
                  const TrainConfig& config, const TrainOptions& options) {
  config.validate();
  model_config.validate();
  if (data.train.empty()) throw std::invalid_argument("training set is empty");

  std::vector<TrainSequence> pool;
  pool.reserve(data.train.size());
  std::size_t longest = 0;
  for (const auto& ex : data.train) {
    pool.push_back(encode(ex, eos, config.full_sequence_loss));
    longest = std::max(longest, pool.back().tokens.size());
  }
  for (const auto* split : {&data.validation, &data.test}) {
    for (const auto& ex : *split) longest = std::max(longest, ex.query.size() + ex.trace.size() + ex.answer.size() + 1);
  }
  if (static_cast<int>(longest) > model_config.context_len) {
    throw std::invalid_argument("context length " + std::to_string(model_config.context_len) +
                                " is shorter than the longest example (" + std::to_string(longest) + ")");
  }

  const auto eval_sets = make_eval_sets(data, config.eval_samples, config.seed);
  const bool persist = !options.run_dir.empty();
  const fs::path run_dir = options.run_dir;
  const fs::path ckpt_dir = run_dir / "ckpt";
  const fs::path last_path = ckpt_dir / "last.ckpt";

  TrainResult result;
  RunLog& log = result.log;
  Parameters params;
  AdamState opt;
  if (persist && options.resume && fs::exists(last_path)) {
    std::tie(params, opt) = load_training_checkpoint(last_path.string());
    if (!(params.config == model_config)) {
      throw std::runtime_error("checkpoint in " + options.run_dir + " has a different model config");
    }
    result.resumed_from = opt.t;
    if (fs::exists(run_dir / "runlog.csv")) {
      auto prev = RunLog::read(options.run_dir);
      std::erase_if(prev.evals, [&](const EvalPoint& e) { return e.step > opt.t; });
      std::erase_if(prev.train_loss, [&](const LossPoint& p) { return p.step > opt.t; });
      log.evals = std::move(prev.evals);
      log.train_loss = std::move(prev.train_loss);
    }
  } else {
    params = init_params<float>(model_config, config.seed);
    opt = AdamState::zeros(model_config);
  }

  log.manifest = options.manifest_extra;
  log.manifest["model"] = model_config;
  log.manifest["train"] = config;
  log.manifest["parameter_count"] = parameter_count(model_config);
  log.manifest["flops_per_token"] = estimate_flops(model_config, 1.0);
  log.manifest["code_version"] = GROKLAB_VERSION;
  log.manifest["mode"] = to_string(data.mode);
  log.manifest["task"] = to_string(data.task);
  log.manifest["k"] = data.k;
  log.manifest["phi"] = data.phi;
  nlohmann::json sizes = nlohmann::json::object();
  for (const auto& s : eval_sets) sizes[s.name] = s.examples.size();
  log.manifest["eval_set_sizes"] = sizes;
  log.manifest["n_train"] = data.train.size();

  double tokens = 0.0;
  if (!log.train_loss.empty()) tokens = log.train_loss.back().rel_flops / estimate_flops(model_config, 1.0);

  auto run_eval = [&](std::int64_t step) {
    for (const auto& set : eval_sets) {
      auto out = evaluate(params, set.examples, data.mode, eos, set.name, config.batch_size);
      EvalPoint p{step, set.name, out.record, out.loss, estimate_flops(model_config, tokens)};
      if (options.on_eval) options.on_eval(p, out.flags);
      log.evals.push_back(std::move(p));
    }
  };
  auto save = [&](std::int64_t step, bool numbered) {
    if (!persist) return;
    fs::create_directories(ckpt_dir);
    save_training_checkpoint(last_path.string(), params, opt);
    if (numbered) {
      Checkpoint::from_params(params, static_cast<std::uint64_t>(step))
          .save((ckpt_dir / ("step_" + std::to_string(step) + ".ckpt")).string());
    }
    log.write(options.run_dir);
  };

  std::vector<TrainSequence> batch(static_cast<std::size_t>(config.batch_size));
  for (std::int64_t step = opt.t + 1; step <= config.max_steps; ++step) {
    auto rng = make_rng(config.seed, "batch", static_cast<std::uint64_t>(step));
    for (auto& s : batch) s = pool[rng.uniform(pool.size())];
    for (const auto& s : batch) tokens += static_cast<double>(s.tokens.size());

    auto lg = loss_and_grads<float>(params, batch);
    if (!std::isfinite(lg.loss) || !lg.grads.all_finite()) {
      throw TrainingDiverged(step, "training diverged at step " + std::to_string(step) +
                                       "; last good checkpoint kept");
    }
    adamw_step(params, lg.grads, opt, config, learning_rate_at(config, step));
    if (!params.all_finite()) {
      throw TrainingDiverged(step, "parameters became non-finite at step " + std::to_string(step));
    }
    log.train_loss.push_back({step, static_cast<double>(lg.loss), estimate_flops(model_config, tokens)});
    if (options.on_step) options.on_step(step, lg.loss);

    const bool last = step == config.max_steps;
    if (step % config.eval_every == 0 || last) run_eval(step);
    if (step % config.checkpoint_every == 0 || last) save(step, true);
  }
  if (persist) log.write(options.run_dir);
  result.params = std::move(params);
  return result;
}

}  // namespace groklab
