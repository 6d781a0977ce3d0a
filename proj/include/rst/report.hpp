#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "rst/evaluate.hpp"

namespace rst {

/// One results.csv row. Column order is fixed:
///
///   config_hash, stage, model, provenance, init, seed, ratio, pattern, split,
///   samples, attack, norm, epsilon, alpha, steps, attack_source, natural_acc,
///   robust_acc, feature_distance
///
/// Cells that do not apply to a row are left empty.
struct ResultRow {
  std::string config_hash;
  std::string stage;
  std::string model;
  std::string provenance;
  std::string init;
  std::uint64_t seed = 0;
  double ratio = 1.0;
  std::string pattern;
  std::string split = "test";
  std::size_t samples = 0;
  std::string attack;
  std::string norm;
  std::optional<double> epsilon;
  std::optional<double> alpha;
  std::optional<int> steps;
  std::string attack_source;
  std::optional<double> natural_acc;
  std::optional<double> robust_acc;
  std::optional<double> feature_distance;

  friend bool operator==(const ResultRow&, const ResultRow&) = default;
};

const std::vector<std::string>& csv_columns();

/// Copies the attack fields of `attack` into `row`.
void set_attack(ResultRow& row, const AttackConfig& attack);

/// One row per robust entry of `report` (or a single natural-only row when it has none).
std::vector<ResultRow> rows_from_report(const EvalReport& report, const ResultRow& base);

std::string to_csv(const std::vector<ResultRow>& rows);
/// Parses CSV text with the fixed header. Missing columns are reported by name.
std::vector<ResultRow> parse_csv(const std::string& text);
std::vector<ResultRow> read_csv(const std::filesystem::path& path);
void write_csv(const std::filesystem::path& path, const std::vector<ResultRow>& rows);

/// Rows as a JSON array of objects keyed by column name.
std::string to_json(const std::vector<ResultRow>& rows);

/// Writes `text` to `path` (creating parent directories), replacing any previous file.
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace rst
