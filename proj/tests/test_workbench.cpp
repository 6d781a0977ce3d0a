#include <filesystem>

#include "doctest.h"
#include "json.hpp"
#include "rst/workbench.hpp"

using namespace rst;

namespace {

const bool have_mnist = std::filesystem::exists(RST_TEST_DATA_DIR "/mnist");

RunConfig tiny_config(const std::filesystem::path& out, const std::string& ratios) {
  return parse_config("[run]\noutput = " + out.string() + "\ndata = " RST_TEST_DATA_DIR +
                      "\ntrain_limit = 64\ntest_limit = 24\n"
                      "stages = search, eval, transfer, r2s, distance, plot\n"
                      "[network]\nwidth = 4\n"
                      "[search]\nratios = " +
                      ratios +
                      "\nsteps = 1\n"
                      "[schedule]\nepochs = 1\nbatch_size = 32\nmilestones =\n"
                      "[eval]\nsteps = 2\n"
                      "[distance]\nepsilons = 0.1\n"
                      "[plot]\nkinds = ratio_curve, transfer_heatmap, distance_bars\n");
}

}  // namespace

TEST_CASE("pipeline writes checkpoints, results, manifest and plots" * doctest::skip(!have_mnist)) {
  const auto out = std::filesystem::temp_directory_path() / "rst-workbench-test";
  std::filesystem::remove_all(out);
  const auto cfg = tiny_config(out, "0.3, 0.5");
  run_pipeline(cfg);
  const auto dir = cfg.run_dir();
  CHECK(std::filesystem::exists(dir / "checkpoints" / "rst-element-r0.3.ckpt"));
  CHECK(std::filesystem::exists(dir / "checkpoints" / "rst-element-r0.5.ckpt"));
  for (const char* plot : {"ratio_curve", "transfer_heatmap", "distance_bars"}) {
    CHECK(std::filesystem::exists(dir / "plots" / (std::string(plot) + ".svg")));
  }
  const auto manifest = nlohmann::json::parse(read_text(dir / "manifest.json"));
  CHECK(manifest["config_hash"] == cfg.hash());

  const auto rows = read_csv(dir / "results.csv");
  std::size_t transfer = 0;
  for (const auto& r : rows) transfer += r.stage == "transfer";
  CHECK(transfer == 4);

  // Rerunning a stage replaces its rows instead of appending.
  run_stage(cfg, "eval");
  CHECK(read_csv(dir / "results.csv").size() == rows.size());
  std::filesystem::remove_all(out);
}

TEST_CASE("stage failures name the stage" * doctest::skip(!have_mnist)) {
  const auto out = std::filesystem::temp_directory_path() / "rst-workbench-errors";
  std::filesystem::remove_all(out);
  const auto cfg = tiny_config(out, "0.5");
  try {
    run_stage(cfg, "transfer");
    FAIL("expected a stage error");
  } catch (const StageError& e) {
    CHECK(e.stage() == "transfer");
  }
  CHECK_THROWS_AS(run_stage(cfg, "bake"), StageError);
  std::filesystem::remove_all(out);
}

TEST_CASE("data root resolution") {
  RunConfig cfg;
  cfg.data_dir = "/some/where";
  CHECK(data_root(cfg) == "/some/where");
}
