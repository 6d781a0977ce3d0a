#include <filesystem>

#include "doctest.h"
#include "json.hpp"
#include "rst/plot.hpp"
#include "rst/report.hpp"

using namespace rst;

namespace {

ResultRow row(std::string provenance, double ratio, double nat, double rob) {
  ResultRow r;
  r.config_hash = "abc";
  r.stage = "eval";
  r.model = provenance + "-" + std::to_string(ratio);
  r.provenance = std::move(provenance);
  r.ratio = ratio;
  r.samples = 100;
  set_attack(r, AttackConfig::pgd(0.1, 20));
  r.natural_acc = nat;
  r.robust_acc = rob;
  return r;
}

}  // namespace

TEST_CASE("CSV round-trips with empty optional cells") {
  std::vector<ResultRow> rows{row("RST", 0.1, 0.9, 0.6), row("DenseAdversarial", 1.0, 0.95, 0.7)};
  rows[1].model = "name, with \"quotes\"";
  rows[1].robust_acc.reset();
  rows[1].feature_distance = 0.25;
  const auto text = to_csv(rows);
  CHECK(text.substr(0, text.find('\n')).find("config_hash,stage,model") == 0);
  const auto back = parse_csv(text);
  CHECK(back == rows);
}

TEST_CASE("missing CSV columns are named") {
  try {
    parse_csv("config_hash,stage\nx,y\n");
    FAIL("expected an error");
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find("robust_acc") != std::string::npos);
  }
}

TEST_CASE("report rows carry one line per attack") {
  EvalReport report{"m", "m", 50, 0.8, {{AttackConfig::pgd(0.1, 20), 0.5}, {AttackConfig::fgsm(0.2), 0.4}}};
  ResultRow base;
  base.stage = "eval";
  const auto rows = rows_from_report(report, base);
  REQUIRE(rows.size() == 2);
  CHECK(rows[1].attack == "fgsm");
  CHECK(*rows[1].epsilon == doctest::Approx(0.2));
  CHECK(*rows[0].robust_acc == 0.5);
  CHECK(rows[0].attack_source == "m");
}

TEST_CASE("JSON mirrors the rows") {
  const auto json = nlohmann::json::parse(to_json({row("RST", 0.2, 0.9, 0.6)}));
  REQUIRE(json.is_array());
  CHECK(json[0]["provenance"] == "RST");
  CHECK(json[0]["feature_distance"].is_null());
  CHECK(json[0]["robust_acc"].get<double>() == doctest::Approx(0.6));
}

TEST_CASE("ratio curve averages seeds and draws dense baselines") {
  std::vector<ResultRow> rows{row("RST", 0.1, 0.9, 0.6), row("RST", 0.1, 0.8, 0.4), row("RST", 0.3, 0.85, 0.5),
                              row("DenseAdversarial", 1.0, 0.95, 0.7)};
  rows[1].seed = 1;
  const auto svg = ratio_curve_svg(rows);
  CHECK(svg.find("<svg") != std::string::npos);
  CHECK(svg.find("stroke-dasharray") != std::string::npos);
  CHECK(svg.find("RST") != std::string::npos);
}

TEST_CASE("plots reject empty or unsuitable input") {
  CHECK_THROWS(render_plot(PlotKind::RatioCurve, {}));
  CHECK_THROWS(render_plot(PlotKind::TransferHeatmap, {row("RST", 0.1, 0.9, 0.6)}));
  CHECK_THROWS(render_plot(PlotKind::DistanceBars, {row("RST", 0.1, 0.9, 0.6)}));
  CHECK_THROWS(parse_plot_kind("pie"));
}

TEST_CASE("transfer heatmap labels every cell") {
  std::vector<ResultRow> rows;
  for (const char* src : {"a", "b"}) {
    for (const char* dst : {"a", "b"}) {
      auto r = row("RST", 0.1, 0.9, 0.25);
      r.stage = "transfer";
      r.attack_source = src;
      r.model = dst;
      rows.push_back(r);
    }
  }
  const auto svg = render_plot(PlotKind::TransferHeatmap, rows);
  std::size_t count = 0;
  for (auto at = svg.find("0.25"); at != std::string::npos; at = svg.find("0.25", at + 1)) ++count;
  CHECK(count == 4);
}

TEST_CASE("plot file goes from CSV to SVG") {
  const auto dir = std::filesystem::temp_directory_path() / "rst-plot-test";
  write_csv(dir / "results.csv", {row("RST", 0.1, 0.9, 0.6)});
  plot_file(dir / "results.csv", PlotKind::RatioCurve, dir / "out" / "ratio.svg");
  CHECK(read_text(dir / "out" / "ratio.svg").find("</svg>") != std::string::npos);
  std::filesystem::remove_all(dir);
}
