#include "rst/plot.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <sstream>

namespace rst {

std::string_view to_string(PlotKind kind) {
  switch (kind) {
    case PlotKind::RatioCurve: return "ratio_curve";
    case PlotKind::TransferHeatmap: return "transfer_heatmap";
    case PlotKind::DistanceBars: return "distance_bars";
  }
  return "?";
}

PlotKind parse_plot_kind(std::string_view name) {
  for (auto k : {PlotKind::RatioCurve, PlotKind::TransferHeatmap, PlotKind::DistanceBars}) {
    if (name == to_string(k)) return k;
  }
  throw std::invalid_argument("unknown plot kind '" + std::string(name) +
                              "' (ratio_curve, transfer_heatmap, distance_bars)");
}

namespace {

constexpr double kWidth = 640, kHeight = 420;
constexpr double kLeft = 70, kRight = 170, kTop = 40, kBottom = 60;

const char* const kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

class Svg {
 public:
  Svg(double w, double h) {
    out_ << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
         << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" viewBox=\"0 0 "
         << w << ' ' << h << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
         << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  }
  void line(double x1, double y1, double x2, double y2, const std::string& stroke, bool dashed = false,
            double width = 1) {
    out_ << "<line x1=\"" << x1 << "\" y1=\"" << y1 << "\" x2=\"" << x2 << "\" y2=\"" << y2 << "\" stroke=\""
         << stroke << "\" stroke-width=\"" << width << '"' << (dashed ? " stroke-dasharray=\"6 4\"" : "") << "/>\n";
  }
  void text(double x, double y, const std::string& s, const std::string& anchor = "start", const std::string& extra = "") {
    out_ << "<text x=\"" << x << "\" y=\"" << y << "\" text-anchor=\"" << anchor << '"' << extra << '>' << escape(s)
         << "</text>\n";
  }
  void rect(double x, double y, double w, double h, const std::string& fill) {
    out_ << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << w << "\" height=\"" << h << "\" fill=\"" << fill
         << "\" stroke=\"#333\" stroke-width=\"0.5\"/>\n";
  }
  void circle(double x, double y, double r, const std::string& fill) {
    out_ << "<circle cx=\"" << x << "\" cy=\"" << y << "\" r=\"" << r << "\" fill=\"" << fill << "\"/>\n";
  }
  void polyline(const std::vector<std::pair<double, double>>& pts, const std::string& stroke) {
    out_ << "<polyline fill=\"none\" stroke=\"" << stroke << "\" stroke-width=\"2\" points=\"";
    for (const auto& [x, y] : pts) out_ << x << ',' << y << ' ';
    out_ << "\"/>\n";
  }
  std::string finish() {
    out_ << "</svg>\n";
    return out_.str();
  }

 private:
  std::ostringstream out_;
};

/// Plot frame with y in [0, y_max] and x in [x_min, x_max].
struct Frame {
  double x_min, x_max, y_max;
  [[nodiscard]] double px(double x) const {
    const double span = x_max > x_min ? x_max - x_min : 1.0;
    return kLeft + (x - x_min) / span * (kWidth - kLeft - kRight);
  }
  [[nodiscard]] double py(double y) const { return kHeight - kBottom - y / y_max * (kHeight - kTop - kBottom); }
};

void axes(Svg& svg, const Frame& f, const std::string& title, const std::string& xlabel, const std::string& ylabel) {
  svg.text(kWidth / 2, 22, title, "middle", " font-size=\"14\"");
  svg.line(kLeft, kHeight - kBottom, kWidth - kRight, kHeight - kBottom, "#000");
  svg.line(kLeft, kTop, kLeft, kHeight - kBottom, "#000");
  for (int i = 0; i <= 5; ++i) {
    const double v = f.y_max * i / 5.0;
    svg.line(kLeft - 4, f.py(v), kLeft, f.py(v), "#000");
    svg.text(kLeft - 8, f.py(v) + 4, fmt("%.2f", v), "end");
  }
  svg.text(kWidth / 2 - (kRight - kLeft) / 2, kHeight - 15, xlabel, "middle");
  svg.text(18, kHeight / 2, ylabel, "middle", " transform=\"rotate(-90 18 " + fmt("%.0f", kHeight / 2) + ")\"");
}

bool is_dense(const ResultRow& r) { return r.provenance.rfind("Dense", 0) == 0; }

}  // namespace

std::string ratio_curve_svg(const std::vector<ResultRow>& rows) {
  // series key -> ratio -> (sum, count)
  std::map<std::string, std::map<double, std::pair<double, int>>> series;
  std::map<std::string, std::pair<double, int>> baselines;
  std::vector<std::string> order;
  auto add = [&](const std::string& key, double ratio, double value) {
    if (!series.count(key)) order.push_back(key);
    auto& cell = series[key][ratio];
    cell.first += value;
    cell.second += 1;
  };
  for (const auto& r : rows) {
    if (!r.natural_acc && !r.robust_acc) continue;
    const std::string who = r.provenance.empty() ? r.model : r.provenance;
    if (is_dense(r)) {
      if (r.robust_acc) {
        auto& b = baselines[who + " robust"];
        b.first += *r.robust_acc;
        b.second += 1;
      }
      if (r.natural_acc) {
        auto& b = baselines[who + " natural"];
        b.first += *r.natural_acc;
        b.second += 1;
      }
      continue;
    }
    if (r.natural_acc) add(who + " natural", r.ratio, *r.natural_acc);
    if (r.robust_acc) add(who + " robust", r.ratio, *r.robust_acc);
  }
  if (series.empty() && baselines.empty()) throw std::invalid_argument("ratio_curve: no accuracy rows to plot");

  double x_min = 1.0, x_max = 0.0;
  for (const auto& [key, points] : series) {
    x_min = std::min(x_min, points.begin()->first);
    x_max = std::max(x_max, points.rbegin()->first);
  }
  if (series.empty()) x_min = 0.0, x_max = 1.0;
  if (x_max - x_min < 1e-9) x_min -= 0.05, x_max += 0.05;
  const Frame f{x_min, x_max, 1.0};
  Svg svg(kWidth, kHeight);
  axes(svg, f, "Accuracy vs. remaining ratio", "remaining ratio", "accuracy");
  for (int i = 0; i <= 4; ++i) {
    const double x = x_min + (x_max - x_min) * i / 4.0;
    svg.line(f.px(x), kHeight - kBottom, f.px(x), kHeight - kBottom + 4, "#000");
    svg.text(f.px(x), kHeight - kBottom + 18, fmt("%.2f", x), "middle");
  }
  std::size_t color = 0;
  double legend_y = kTop + 10;
  for (const auto& key : order) {
    const std::string stroke = kPalette[color++ % std::size(kPalette)];
    std::vector<std::pair<double, double>> pts;
    for (const auto& [ratio, acc] : series[key]) pts.emplace_back(f.px(ratio), f.py(acc.first / acc.second));
    if (pts.size() > 1) svg.polyline(pts, stroke);
    for (const auto& [x, y] : pts) svg.circle(x, y, 3.5, stroke);
    svg.line(kWidth - kRight + 10, legend_y - 4, kWidth - kRight + 30, legend_y - 4, stroke, false, 2);
    svg.text(kWidth - kRight + 35, legend_y, key);
    legend_y += 18;
  }
  for (const auto& [key, acc] : baselines) {
    const std::string stroke = kPalette[color++ % std::size(kPalette)];
    const double y = f.py(acc.first / acc.second);
    svg.line(kLeft, y, kWidth - kRight, y, stroke, true, 1.5);
    svg.line(kWidth - kRight + 10, legend_y - 4, kWidth - kRight + 30, legend_y - 4, stroke, true, 1.5);
    svg.text(kWidth - kRight + 35, legend_y, key);
    legend_y += 18;
  }
  return svg.finish();
}

std::string transfer_heatmap_svg(const std::vector<ResultRow>& rows) {
  std::vector<std::string> sources, targets;
  std::map<std::pair<std::string, std::string>, double> cells;
  for (const auto& r : rows) {
    if (r.stage != "transfer" || !r.robust_acc) continue;
    if (std::find(sources.begin(), sources.end(), r.attack_source) == sources.end()) sources.push_back(r.attack_source);
    if (std::find(targets.begin(), targets.end(), r.model) == targets.end()) targets.push_back(r.model);
    cells[{r.attack_source, r.model}] = *r.robust_acc;
  }
  if (cells.empty()) throw std::invalid_argument("transfer_heatmap: no transfer rows to plot");
  const double cell = 70, left = 150, top = 70;
  const double w = left + cell * static_cast<double>(targets.size()) + 30;
  const double h = top + cell * static_cast<double>(sources.size()) + 60;
  Svg svg(w, h);
  svg.text(w / 2, 22, "Robust accuracy under transferred attacks", "middle", " font-size=\"14\"");
  svg.text(left + cell * static_cast<double>(targets.size()) / 2, 46, "evaluated ticket", "middle");
  svg.text(12, top - 8, "attack source", "start");
  for (std::size_t j = 0; j < targets.size(); ++j) {
    svg.text(left + cell * (static_cast<double>(j) + 0.5), top - 8, targets[j], "middle");
  }
  for (std::size_t i = 0; i < sources.size(); ++i) {
    const double y = top + cell * static_cast<double>(i);
    svg.text(left - 8, y + cell / 2 + 4, sources[i], "end");
    for (std::size_t j = 0; j < targets.size(); ++j) {
      const double x = left + cell * static_cast<double>(j);
      const auto it = cells.find({sources[i], targets[j]});
      if (it == cells.end()) {
        svg.rect(x, y, cell, cell, "#eeeeee");
        continue;
      }
      const double v = std::clamp(it->second, 0.0, 1.0);
      const int shade = static_cast<int>(255 - 200 * v);
      char fill[16];
      std::snprintf(fill, sizeof fill, "#%02x%02xff", shade, shade);
      svg.rect(x, y, cell, cell, fill);
      svg.text(x + cell / 2, y + cell / 2 + 4, fmt("%.2f", it->second), "middle",
               v > 0.6 ? " fill=\"white\"" : "");
    }
  }
  return svg.finish();
}

std::string distance_bars_svg(const std::vector<ResultRow>& rows) {
  std::vector<double> eps;
  std::vector<std::string> models;
  std::map<std::pair<double, std::string>, std::pair<double, int>> bars;
  for (const auto& r : rows) {
    if (!r.feature_distance || !r.epsilon) continue;
    if (std::find(eps.begin(), eps.end(), *r.epsilon) == eps.end()) eps.push_back(*r.epsilon);
    const std::string who = r.provenance.empty() ? r.model : r.provenance;
    if (std::find(models.begin(), models.end(), who) == models.end()) models.push_back(who);
    auto& b = bars[{*r.epsilon, who}];
    b.first += *r.feature_distance;
    b.second += 1;
  }
  if (bars.empty()) throw std::invalid_argument("distance_bars: no feature-distance rows to plot");
  std::sort(eps.begin(), eps.end());
  double y_max = 0.0;
  for (const auto& [key, b] : bars) y_max = std::max(y_max, b.first / b.second);
  y_max = y_max > 0 ? y_max * 1.15 : 1.0;
  const Frame f{0.0, static_cast<double>(eps.size()), y_max};
  Svg svg(kWidth, kHeight);
  axes(svg, f, "Normalized feature distance", "noise epsilon", "distance");
  const double group = (kWidth - kLeft - kRight) / static_cast<double>(eps.size());
  const double bar = group * 0.8 / static_cast<double>(models.size());
  for (std::size_t g = 0; g < eps.size(); ++g) {
    const double x0 = kLeft + group * static_cast<double>(g) + group * 0.1;
    svg.text(x0 + group * 0.4, kHeight - kBottom + 18, fmt("%g", eps[g]), "middle");
    for (std::size_t m = 0; m < models.size(); ++m) {
      const auto it = bars.find({eps[g], models[m]});
      if (it == bars.end()) continue;
      const double v = it->second.first / it->second.second;
      svg.rect(x0 + bar * static_cast<double>(m), f.py(v), bar, f.py(0) - f.py(v), kPalette[m % std::size(kPalette)]);
    }
  }
  double legend_y = kTop + 10;
  for (std::size_t m = 0; m < models.size(); ++m) {
    svg.rect(kWidth - kRight + 10, legend_y - 10, 12, 12, kPalette[m % std::size(kPalette)]);
    svg.text(kWidth - kRight + 28, legend_y, models[m]);
    legend_y += 18;
  }
  return svg.finish();
}

std::string render_plot(PlotKind kind, const std::vector<ResultRow>& rows) {
  if (rows.empty()) throw std::invalid_argument(std::string(to_string(kind)) + ": result set is empty");
  switch (kind) {
    case PlotKind::RatioCurve: return ratio_curve_svg(rows);
    case PlotKind::TransferHeatmap: return transfer_heatmap_svg(rows);
    case PlotKind::DistanceBars: return distance_bars_svg(rows);
  }
  throw std::invalid_argument("unknown plot kind");
}

void plot_file(const std::filesystem::path& csv, PlotKind kind, const std::filesystem::path& svg) {
  write_text(svg, render_plot(kind, read_csv(csv)));
}

}  // namespace rst
