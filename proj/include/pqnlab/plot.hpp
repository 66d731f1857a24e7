#pragma once

#include <string>
#include <vector>

#include "pqnlab/metrics.hpp"

namespace pqnlab {

struct PlotSeries {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;  // same length as x; NaN breaks the line
  bool emphasis = false;  // thick black stroke instead of the palette
};

struct PlotSpec {
  std::string title;
  std::string x_label;
  std::string y_label;
  // Used by emit_plot when building series from a CSV table.
  std::string x_column;
  std::string y_column;
  std::string group_column;     // optional: one series per distinct value
  std::string aggregate_label;  // when set, adds a mean-over-series line
  int width = 800;
  int height = 500;
};

// Renders a deterministic standalone SVG document: white background, boxed
// plot area, nice-number ticks, legend, one polyline chain per series.
// Degenerate inputs stay valid: no points gives axes plus a "no data" note,
// a single point gets a padded axis range.
std::string render_line_plot(const PlotSpec& spec,
                             const std::vector<PlotSeries>& series);

// Emphasised mean-across-series line: at every x that appears in any series,
// the mean of the y values the series provide there (absent series simply do
// not contribute at that x).
PlotSeries aggregate_mean_series(const std::vector<PlotSeries>& series,
                                 const std::string& label);

// Builds series from the named CSV columns (throws when a named column is
// missing), optionally grouped and topped with an aggregate line, then
// renders. Returns the SVG text and, when out_path is non-empty, also
// writes it there.
std::string emit_plot(const CsvTable& table, const PlotSpec& spec,
                      const std::string& out_path = "");

}  // namespace pqnlab
