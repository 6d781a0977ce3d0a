#pragma once

#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "rst/config.hpp"
#include "rst/dataset.hpp"
#include "rst/report.hpp"

namespace rst {

/// An error annotated with the pipeline stage that raised it.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& message)
      : std::runtime_error("[" + stage + "] " + message), stage_(std::move(stage)) {}
  [[nodiscard]] const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct StageOptions {
  /// Inputs for eval/transfer/r2s/distance/finetune; empty means every
  /// suitable checkpoint under the run directory.
  std::vector<std::filesystem::path> checkpoints;
  /// Worker threads for the ratio sweep of `search`.
  std::size_t jobs = 1;
  /// Progress lines; silent when empty.
  std::function<void(const std::string&)> log;
};

/// Dataset root: config `data`, else $RST_DATA_DIR, else ./data.
std::filesystem::path data_root(const RunConfig& config);
Dataset load_dataset(const RunConfig& config);
NetworkSpec network_spec(const RunConfig& config, const Dataset& data);

/// Runs one stage, writes its checkpoints, merges its rows into results.csv
/// and results.json, and updates manifest.json. Returns the stage's rows.
std::vector<ResultRow> run_stage(const RunConfig& config, const std::string& stage, const StageOptions& options = {});

/// Runs every stage listed in the config, in order.
void run_pipeline(const RunConfig& config, const StageOptions& options = {});

std::string manifest_json(const RunConfig& config, const std::vector<std::string>& stages);

}  // namespace rst
