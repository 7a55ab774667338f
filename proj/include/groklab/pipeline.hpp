#pragma once

// Experiment configs, per-cell stage orchestration with manifest-hash
// skipping, and cross-run reports.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "groklab/datagen.hpp"
#include "groklab/kinetics.hpp"
#include "groklab/model.hpp"
#include "groklab/trainer.hpp"

namespace groklab {

/// key = value pairs grouped by [section]; '#' and ';' start comments.
using IniFile = std::map<std::string, std::map<std::string, std::string>>;
IniFile parse_ini(const std::string& text);
IniFile read_ini(const std::string& path);

struct MechConfig {
  bool enabled = true;
  int probe_examples = 1000;
  int patch_pairs = 16;
};

struct ExperimentConfig {
  Task task = Task::comparison;
  std::vector<int> ks;
  std::vector<double> phis;
  std::vector<Mode> modes;
  std::vector<CotTemplate> templates{CotTemplate::standard};
  std::vector<std::uint64_t> seeds{7};
  std::string model_preset = "desk";
  std::string train_preset = "desk";
  std::string out = "out";
  DatasetSpec data;                 // task/k/phi/mode/seed are overwritten per cell
  nlohmann::json model_overrides = nlohmann::json::object();
  nlohmann::json train_overrides = nlohmann::json::object();
  MechConfig mech;

  static ExperimentConfig from_ini(const IniFile& ini);
  /// Output root after applying GROKLAB_OUT.
  [[nodiscard]] std::string output_root() const;
};

struct Cell {
  Task task = Task::comparison;
  int k = 2;
  double phi = 3.6;
  Mode mode = Mode::direct;
  CotTemplate cot_template = CotTemplate::standard;
  std::uint64_t seed = 7;
};

std::vector<Cell> expand_cells(const ExperimentConfig& config);
std::string format_phi(double phi);
/// <root>/<task>/<mode>/k<k>_phi<phi>_s<seed>
std::string cell_dir(const std::string& root, const Cell& cell);

DatasetSpec cell_dataset_spec(const ExperimentConfig& config, const Cell& cell);
ModelConfig resolve_model_config(const std::string& preset, const nlohmann::json& overrides,
                                 const Bundle& bundle);
TrainConfig resolve_train_config(const std::string& preset, const nlohmann::json& overrides,
                                 std::uint64_t seed);

/// Longest query ++ trace ++ answer ++ eos across every split.
int longest_sequence(const Dataset& data, int eos);

std::string hash_json(const nlohmann::json& j);

/// A stage is complete when <dir>/.stage_<name>.json records the same input hash.
bool stage_done(const std::string& dir, const std::string& name, const std::string& hash);
void mark_stage(const std::string& dir, const std::string& name, const std::string& hash);

struct CellOutcome {
  std::string dir;
  std::vector<std::string> ran;
  std::vector<std::string> skipped;
  bool ok = true;
  std::string error;
};

struct StageLogger {
  bool verbose = true;
  void operator()(const std::string& msg) const;
};

CellOutcome run_cell(const ExperimentConfig& config, const Cell& cell, const StageLogger& log = {});

// Stage bodies, shared with the individual subcommands.

/// fits.json: {split: {"answer": fit, "full": fit}} for every split in the log.
nlohmann::json fit_runlog(const RunLog& log);

struct MechOutputs {
  std::vector<std::string> files;
};
MechOutputs run_mechanistic(const std::string& run_dir, const Bundle& bundle, const MechConfig& config,
                            std::uint64_t seed);

struct PipelineResult {
  std::vector<CellOutcome> cells;
  std::string report_dir;
  int failures = 0;
};

/// Runs every cell (up to `jobs` worker processes) and then builds the report.
PipelineResult run_pipeline(const ExperimentConfig& config, int jobs = 1, const StageLogger& log = {});

/// Collects every run directory below `root` into tables, fits, gap curves,
/// probe surfaces and patch grids under `out_dir`.
void build_report(const std::string& root, const std::string& out_dir);

}  // namespace groklab
