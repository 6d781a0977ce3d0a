#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "rst/report.hpp"

namespace rst {

enum class PlotKind { RatioCurve, TransferHeatmap, DistanceBars };

std::string_view to_string(PlotKind kind);
PlotKind parse_plot_kind(std::string_view name);

/// Accuracy against remaining ratio, one line per provenance and metric,
/// seeds averaged. Dense rows become dashed horizontal baselines.
std::string ratio_curve_svg(const std::vector<ResultRow>& rows);

/// Robust accuracy of `model` (columns) under attacks from `attack_source`
/// (rows) for every `transfer` stage row; cells are annotated to 2 decimals.
std::string transfer_heatmap_svg(const std::vector<ResultRow>& rows);

/// Feature distance grouped by epsilon, one bar per model.
std::string distance_bars_svg(const std::vector<ResultRow>& rows);

/// Renders `kind` from rows; throws when no row fits the plot.
std::string render_plot(PlotKind kind, const std::vector<ResultRow>& rows);

/// Reads a results CSV and writes the SVG.
void plot_file(const std::filesystem::path& csv, PlotKind kind, const std::filesystem::path& svg);

}  // namespace rst
