#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "groklab/pipeline.hpp"

using namespace groklab;
namespace fs = std::filesystem;

namespace {

std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream is(e.path(), std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    out[fs::relative(e.path(), root).generic_string()] = ss.str();
  }
  return out;
}

std::string tiny_ini(const fs::path& out, const std::string& ks = "2") {
  return "[experiment]\n"
         "task = comparison\n"
         "k = " + ks + "\n"
         "phi = 1.0\n"
         "mode = direct, cot\n"
         "seeds = 7\n"
         "model = tiny\n"
         "out = " + out.string() + "\n"
         "[data]\nentities = 20\nattributes = 3\nvalidation_cap = 40\ntest_cap = 30\n"
         "[train]\nsteps = 20\nbatch = 8\neval_every = 5\ncheckpoint_every = 10\neval_samples = 20\n"
         "[mech]\nenabled = true\nprobe_examples = 60\npatch_pairs = 2\n";
}

}  // namespace

TEST_SUITE("pipeline") {
  TEST_CASE("ini parsing") {
    const auto ini = parse_ini("# comment\n[a]\nx = 1 ; trailing\n y=two words \n[b]\n");
    CHECK(ini.at("a").at("x") == "1");
    CHECK(ini.at("a").at("y") == "two words");
    CHECK(ini.count("b") == 1);
    CHECK_THROWS_AS(parse_ini("[a\n"), std::invalid_argument);
    CHECK_THROWS_AS(parse_ini("[a]\nnovalue\n"), std::invalid_argument);
  }

  TEST_CASE("config expansion and directory naming") {
    const auto c = ExperimentConfig::from_ini(parse_ini(
        "[experiment]\ntask = intersection\nk = 2, 3\nphi = 3.6 7.2\nmode = direct, cot\n"
        "template = RA, RCA*\nseeds = 1, 2\n"));
    const auto cells = expand_cells(c);
    // direct: 2k x 2phi x 2 seeds; cot adds two templates
    CHECK(cells.size() == 2 * 2 * 2 + 2 * 2 * 2 * 2);
    std::set<std::string> dirs;
    for (const auto& cell : cells) dirs.insert(cell_dir("out", cell));
    CHECK(dirs.size() == cells.size());
    CHECK(cell_dir("out", Cell{Task::comparison, 3, 3.6, Mode::cot, CotTemplate::standard, 7}) ==
          "out/comparison/cot/k3_phi3.6_s7");
    CHECK_THROWS_AS(ExperimentConfig::from_ini(parse_ini("[experiment]\nbogus = 1\n")), std::invalid_argument);
    CHECK_THROWS_AS(ExperimentConfig::from_ini(parse_ini("[train]\nsteps_typo = 1\n")), std::invalid_argument);
  }

  TEST_CASE("environment overrides the output root") {
    ExperimentConfig c;
    c.out = "somewhere";
    ::setenv("GROKLAB_OUT", "/tmp/elsewhere", 1);
    CHECK(c.output_root() == "/tmp/elsewhere");
    ::unsetenv("GROKLAB_OUT");
    CHECK(c.output_root() == "somewhere");
  }

  TEST_CASE("empty grid yields an empty report") {
    const auto root = fs::temp_directory_path() / "groklab_empty_sweep";
    fs::remove_all(root);
    auto c = ExperimentConfig::from_ini(parse_ini("[experiment]\ntask = comparison\nout = " + root.string() + "\n"));
    const auto res = run_pipeline(c, 1, StageLogger{false});
    CHECK(res.cells.empty());
    CHECK(res.failures == 0);
    CHECK(fs::exists(fs::path(res.report_dir) / "index.md"));
    fs::remove_all(root);
  }

  TEST_CASE("sweep is idempotent and reruns only stale stages") {
    const auto root = fs::temp_directory_path() / "groklab_sweep_test";
    fs::remove_all(root);
    auto c = ExperimentConfig::from_ini(parse_ini(tiny_ini(root)));
    const auto first = run_pipeline(c, 2, StageLogger{false});
    REQUIRE(first.cells.size() == 2);
    for (const auto& cell : first.cells) {
      CHECK(cell.ok);
      CHECK(cell.ran.size() == 4);
    }
    const auto before = snapshot(root);
    CHECK(before.count("report/accuracy_table.csv") == 1);
    CHECK(before.count("report/gap_curves.csv") == 1);
    CHECK(before.count("comparison/cot/k2_phi1_s7/mech/patch_id_val.csv") == 1);

    const auto second = run_pipeline(c, 1, StageLogger{false});
    for (const auto& cell : second.cells) {
      CHECK(cell.ran.empty());
      CHECK(cell.skipped.size() == 4);
    }
    CHECK(snapshot(root) == before);

    c.train_overrides["max_steps"] = 25;
    const auto third = run_pipeline(c, 1, StageLogger{false});
    for (const auto& cell : third.cells) {
      CHECK(cell.skipped == std::vector<std::string>{"gen"});
      CHECK(cell.ran == std::vector<std::string>{"train", "fit", "mech"});
    }
    const auto log = RunLog::read((root / "comparison/direct/k2_phi1_s7").string());
    CHECK(log.train_loss.size() == 25);
    fs::remove_all(root);
  }

  TEST_CASE("a failing cell does not stop the others") {
    const auto root = fs::temp_directory_path() / "groklab_sweep_fail";
    fs::remove_all(root);
    // comparison rejects k = 1
    auto c = ExperimentConfig::from_ini(parse_ini(tiny_ini(root, "2, 1")));
    c.modes = {Mode::direct};
    c.mech.enabled = false;
    const auto res = run_pipeline(c, 1, StageLogger{false});
    CHECK(res.cells.size() == 2);
    CHECK(res.failures == 1);
    CHECK(res.cells[0].ok);
    CHECK_FALSE(res.cells[1].ok);
    CHECK(fs::exists(fs::path(res.cells[1].dir) / "error.txt"));
    fs::remove_all(root);
  }
}
