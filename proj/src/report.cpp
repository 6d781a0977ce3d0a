#include "rst/report.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"

#include "rst/config.hpp"

namespace rst {

const std::vector<std::string>& csv_columns() {
  static const std::vector<std::string> columns{
      "config_hash", "stage",   "model", "provenance", "init",  "seed",          "ratio",
      "pattern",     "split",   "samples", "attack",   "norm",  "epsilon",       "alpha",
      "steps",       "attack_source", "natural_acc",   "robust_acc", "feature_distance"};
  return columns;
}

void set_attack(ResultRow& row, const AttackConfig& attack) {
  row.attack = attack_kind(attack);
  row.norm = std::string(to_string(attack.norm));
  row.epsilon = attack.epsilon;
  row.alpha = attack.alpha;
  row.steps = attack.steps;
}

std::vector<ResultRow> rows_from_report(const EvalReport& report, const ResultRow& base) {
  std::vector<ResultRow> rows;
  ResultRow row = base;
  row.samples = report.samples;
  row.natural_acc = report.natural_acc;
  if (row.attack_source.empty()) row.attack_source = report.attack_source;
  if (report.robust.empty()) {
    rows.push_back(row);
    return rows;
  }
  for (const auto& r : report.robust) {
    ResultRow with = row;
    set_attack(with, r.attack);
    with.robust_acc = r.accuracy;
    rows.push_back(std::move(with));
  }
  return rows;
}

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string opt(const std::optional<double>& v) { return v ? num(*v) : ""; }

std::string quote(const std::string& cell) {
  if (cell.find_first_of(",\"\n") == std::string::npos) return cell;
  std::string out = "\"";
  for (char c : cell) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

std::vector<std::string> cells_of(const ResultRow& r) {
  return {r.config_hash, r.stage,      r.model,        r.provenance, r.init,          std::to_string(r.seed),
          num(r.ratio),  r.pattern,    r.split,        std::to_string(r.samples), r.attack, r.norm,
          opt(r.epsilon), opt(r.alpha), r.steps ? std::to_string(*r.steps) : "", r.attack_source,
          opt(r.natural_acc), opt(r.robust_acc), opt(r.feature_distance)};
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cell += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cell += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      cells.push_back(std::move(cell));
      cell.clear();
    } else {
      cell += c;
    }
  }
  cells.push_back(std::move(cell));
  return cells;
}

std::optional<double> opt_real(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return std::stod(s);
}

}  // namespace

std::string to_csv(const std::vector<ResultRow>& rows) {
  std::string out;
  const auto& cols = csv_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) out += (i ? "," : "") + cols[i];
  out += '\n';
  for (const auto& row : rows) {
    const auto cells = cells_of(row);
    for (std::size_t i = 0; i < cells.size(); ++i) out += (i ? "," : "") + quote(cells[i]);
    out += '\n';
  }
  return out;
}

std::vector<ResultRow> parse_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw std::invalid_argument("results CSV is empty (no header)");
  const auto header = split_line(line);
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < header.size(); ++i) index[header[i]] = i;
  std::string missing;
  for (const auto& col : csv_columns()) {
    if (!index.count(col)) missing += (missing.empty() ? "" : ", ") + col;
  }
  if (!missing.empty()) throw std::invalid_argument("results CSV is missing columns: " + missing);

  std::vector<ResultRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto cells = split_line(line);
    if (cells.size() != header.size()) {
      throw std::invalid_argument("results CSV line " + std::to_string(line_no) + " has " +
                                  std::to_string(cells.size()) + " cells, header has " +
                                  std::to_string(header.size()));
    }
    auto at = [&](const char* col) -> const std::string& { return cells[index.at(col)]; };
    try {
      ResultRow r;
      r.config_hash = at("config_hash");
      r.stage = at("stage");
      r.model = at("model");
      r.provenance = at("provenance");
      r.init = at("init");
      r.seed = at("seed").empty() ? 0 : std::stoull(at("seed"));
      r.ratio = at("ratio").empty() ? 1.0 : std::stod(at("ratio"));
      r.pattern = at("pattern");
      r.split = at("split");
      r.samples = at("samples").empty() ? 0 : std::stoull(at("samples"));
      r.attack = at("attack");
      r.norm = at("norm");
      r.epsilon = opt_real(at("epsilon"));
      r.alpha = opt_real(at("alpha"));
      if (!at("steps").empty()) r.steps = std::stoi(at("steps"));
      r.attack_source = at("attack_source");
      r.natural_acc = opt_real(at("natural_acc"));
      r.robust_acc = opt_real(at("robust_acc"));
      r.feature_distance = opt_real(at("feature_distance"));
      rows.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw std::invalid_argument("results CSV line " + std::to_string(line_no) + " has a malformed number");
    }
  }
  return rows;
}

std::vector<ResultRow> read_csv(const std::filesystem::path& path) { return parse_csv(read_text(path)); }

void write_csv(const std::filesystem::path& path, const std::vector<ResultRow>& rows) { write_text(path, to_csv(rows)); }

std::string to_json(const std::vector<ResultRow>& rows) {
  auto doc = nlohmann::ordered_json::array();
  for (const auto& row : rows) {
    const auto cells = cells_of(row);
    nlohmann::ordered_json obj;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      const auto& col = csv_columns()[i];
      const bool numeric = col == "seed" || col == "ratio" || col == "samples" || col == "epsilon" || col == "alpha" ||
                           col == "steps" || col == "natural_acc" || col == "robust_acc" || col == "feature_distance";
      if (cells[i].empty()) {
        obj[col] = nullptr;
      } else if (numeric) {
        obj[col] = nlohmann::ordered_json::parse(cells[i]);
      } else {
        obj[col] = cells[i];
      }
    }
    doc.push_back(std::move(obj));
  }
  return doc.dump(2) + "\n";
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::stringstream text;
  text << in.rdbuf();
  return text.str();
}

}  // namespace rst
