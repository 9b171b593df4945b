#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "lens/connectivity.hpp"

namespace lens {

// Static SVG emission for result displays. Deterministic output (fixed
// float formatting), no external dependencies.

struct PlotSeries {
  std::string label;
  std::vector<double> y;
  std::vector<double> sd;  // optional error bars (empty = none)
  std::string color = "#000000";
  bool dashed = false;
};

struct LinePlotOptions {
  std::string title;
  std::vector<std::string> x_labels;  // per index; empty = numeric
  std::optional<double> y_min, y_max;
  std::vector<double> h_lines;  // reference lines (e.g. 0.5 chance)
  std::string y_label;
};

void write_line_plot_svg(const std::vector<PlotSeries>& series,
                         const LinePlotOptions& opts,
                         const std::filesystem::path& p);

// One row per unit, singular/plural weights as tick marks (efferent layout).
void write_efferent_strip_svg(const std::vector<EfferentProfile>& profiles,
                              const std::string& title,
                              const std::filesystem::path& p);

// Distribution of effective afferent weights with outliers labeled.
void write_afferent_strip_svg(const std::vector<EffectiveAfferent>& reports,
                              const std::string& title,
                              const std::filesystem::path& p);

}  // namespace lens
