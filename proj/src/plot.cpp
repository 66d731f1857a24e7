#include "pqnlab/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>

namespace pqnlab {

namespace {

const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                          "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
                          "#bcbd22", "#17becf"};
constexpr int kPaletteSize = 10;

std::string escape_xml(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string px(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string tick_label(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.10g", v == 0.0 ? 0.0 : v);
  return buf;
}

double nice_num(double x, bool round_step) {
  const double expv = std::floor(std::log10(x));
  const double f = x / std::pow(10.0, expv);
  double nf;
  if (round_step)
    nf = f < 1.5 ? 1.0 : f < 3.0 ? 2.0 : f < 7.0 ? 5.0 : 10.0;
  else
    nf = f <= 1.0 ? 1.0 : f <= 2.0 ? 2.0 : f <= 5.0 ? 5.0 : 10.0;
  return nf * std::pow(10.0, expv);
}

std::vector<double> nice_ticks(double lo, double hi) {
  const double step = nice_num(nice_num(hi - lo, false) / 4.0, true);
  std::vector<double> ticks;
  for (long long i = (long long)std::ceil(lo / step - 1e-9);
       i * step <= hi + step * 1e-9; ++i) {
    double v = double(i) * step;
    if (v == 0.0) v = 0.0;  // normalise -0
    ticks.push_back(v);
  }
  return ticks;
}

struct Range {
  double lo = 0.0, hi = 1.0;
  bool seen = false;

  void add(double v) {
    if (!std::isfinite(v)) return;
    if (!seen) {
      lo = hi = v;
      seen = true;
    } else {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  // A usable span even when no or only one distinct value was added.
  void finish() {
    if (!seen) {
      lo = 0.0;
      hi = 1.0;
    } else if (lo == hi) {
      const double pad = std::max(0.5, std::abs(lo) * 0.1);
      lo -= pad;
      hi += pad;
    }
  }
};

double cell_to_double(const std::string& s) {
  if (s.empty()) return std::numeric_limits<double>::quiet_NaN();
  return std::strtod(s.c_str(), nullptr);
}

}  // namespace

std::string render_line_plot(const PlotSpec& spec,
                             const std::vector<PlotSeries>& series) {
  const double W = spec.width, H = spec.height;
  const double L = 70.0, R = W - 170.0, T = 45.0, B = H - 55.0;

  Range xr, yr;
  for (const auto& s : series) {
    const size_t n = std::min(s.x.size(), s.y.size());
    for (size_t i = 0; i < n; ++i) {
      if (std::isfinite(s.x[i]) && std::isfinite(s.y[i])) {
        xr.add(s.x[i]);
        yr.add(s.y[i]);
      }
    }
  }
  const bool any_points = xr.seen;
  xr.finish();
  yr.finish();

  const auto sx = [&](double v) {
    return L + (v - xr.lo) / (xr.hi - xr.lo) * (R - L);
  };
  const auto sy = [&](double v) {
    return B - (v - yr.lo) / (yr.hi - yr.lo) * (B - T);
  };

  std::ostringstream svg;
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << spec.width
      << "\" height=\"" << spec.height << "\" viewBox=\"0 0 " << spec.width
      << " " << spec.height << "\">\n"
      << "<rect x=\"0\" y=\"0\" width=\"" << spec.width << "\" height=\""
      << spec.height << "\" fill=\"#ffffff\"/>\n";

  svg << "<text x=\"" << px((L + R) / 2) << "\" y=\"24\" font-family=\"sans-serif\" "
         "font-size=\"16\" text-anchor=\"middle\">"
      << escape_xml(spec.title) << "</text>\n";

  for (double t : nice_ticks(xr.lo, xr.hi)) {
    const std::string x = px(sx(t));
    svg << "<line x1=\"" << x << "\" y1=\"" << px(T) << "\" x2=\"" << x
        << "\" y2=\"" << px(B) << "\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n"
        << "<text x=\"" << x << "\" y=\"" << px(B + 18)
        << "\" font-family=\"sans-serif\" font-size=\"11\" "
           "text-anchor=\"middle\">"
        << tick_label(t) << "</text>\n";
  }
  for (double t : nice_ticks(yr.lo, yr.hi)) {
    const std::string y = px(sy(t));
    svg << "<line x1=\"" << px(L) << "\" y1=\"" << y << "\" x2=\"" << px(R)
        << "\" y2=\"" << y << "\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n"
        << "<text x=\"" << px(L - 6) << "\" y=\"" << px(sy(t) + 4)
        << "\" font-family=\"sans-serif\" font-size=\"11\" "
           "text-anchor=\"end\">"
        << tick_label(t) << "</text>\n";
  }

  svg << "<rect x=\"" << px(L) << "\" y=\"" << px(T) << "\" width=\""
      << px(R - L) << "\" height=\"" << px(B - T)
      << "\" fill=\"none\" stroke=\"#333333\" stroke-width=\"1\"/>\n";

  svg << "<text x=\"" << px((L + R) / 2) << "\" y=\"" << px(H - 14)
      << "\" font-family=\"sans-serif\" font-size=\"13\" "
         "text-anchor=\"middle\">"
      << escape_xml(spec.x_label) << "</text>\n";
  svg << "<text x=\"20\" y=\"" << px((T + B) / 2)
      << "\" font-family=\"sans-serif\" font-size=\"13\" "
         "text-anchor=\"middle\" transform=\"rotate(-90 20 "
      << px((T + B) / 2) << ")\">" << escape_xml(spec.y_label)
      << "</text>\n";

  if (!any_points) {
    svg << "<text x=\"" << px((L + R) / 2) << "\" y=\"" << px((T + B) / 2)
        << "\" font-family=\"sans-serif\" font-size=\"14\" fill=\"#888888\" "
           "text-anchor=\"middle\">no data</text>\n";
  }

  int color_idx = 0;
  for (const auto& s : series) {
    std::string stroke, extra;
    if (s.emphasis) {
      stroke = "#000000";
      extra = " stroke-width=\"2.5\"";
    } else {
      stroke = kPalette[color_idx % kPaletteSize];
      ++color_idx;
      extra = " stroke-width=\"1.3\" stroke-opacity=\"0.6\"";
    }
    const size_t n = std::min(s.x.size(), s.y.size());
    std::vector<std::pair<double, double>> seg;
    const auto flush = [&]() {
      if (seg.size() == 1) {
        svg << "<circle cx=\"" << px(seg[0].first) << "\" cy=\""
            << px(seg[0].second) << "\" r=\"2.5\" fill=\"" << stroke
            << "\"/>\n";
      } else if (seg.size() > 1) {
        svg << "<polyline fill=\"none\" stroke=\"" << stroke << "\"" << extra
            << " points=\"";
        for (size_t i = 0; i < seg.size(); ++i)
          svg << (i ? " " : "") << px(seg[i].first) << ","
              << px(seg[i].second);
        svg << "\"/>\n";
      }
      seg.clear();
    };
    for (size_t i = 0; i < n; ++i) {
      if (std::isfinite(s.x[i]) && std::isfinite(s.y[i]))
        seg.emplace_back(sx(s.x[i]), sy(s.y[i]));
      else
        flush();
    }
    flush();
  }

  const size_t legend_max = 12;
  color_idx = 0;
  double ly = T + 6.0;
  for (size_t i = 0; i < series.size(); ++i) {
    std::string stroke =
        series[i].emphasis ? "#000000" : kPalette[color_idx % kPaletteSize];
    if (!series[i].emphasis) ++color_idx;
    if (i >= legend_max) {
      svg << "<text x=\"" << px(R + 12) << "\" y=\"" << px(ly + 4)
          << "\" font-family=\"sans-serif\" font-size=\"11\">+"
          << (series.size() - legend_max) << " more</text>\n";
      break;
    }
    svg << "<line x1=\"" << px(R + 12) << "\" y1=\"" << px(ly) << "\" x2=\""
        << px(R + 34) << "\" y2=\"" << px(ly) << "\" stroke=\"" << stroke
        << "\" stroke-width=\"" << (series[i].emphasis ? "2.5" : "1.5")
        << "\"/>\n"
        << "<text x=\"" << px(R + 40) << "\" y=\"" << px(ly + 4)
        << "\" font-family=\"sans-serif\" font-size=\"11\">"
        << escape_xml(series[i].label) << "</text>\n";
    ly += 18.0;
  }

  svg << "</svg>\n";
  return svg.str();
}

PlotSeries aggregate_mean_series(const std::vector<PlotSeries>& series,
                                 const std::string& label) {
  std::map<double, std::pair<double, int>> acc;
  for (const auto& s : series) {
    const size_t n = std::min(s.x.size(), s.y.size());
    for (size_t i = 0; i < n; ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      auto& slot = acc[s.x[i]];
      slot.first += s.y[i];
      slot.second += 1;
    }
  }
  PlotSeries agg;
  agg.label = label;
  agg.emphasis = true;
  for (const auto& kv : acc) {
    agg.x.push_back(kv.first);
    agg.y.push_back(kv.second.first / double(kv.second.second));
  }
  return agg;
}

std::string emit_plot(const CsvTable& table, const PlotSpec& spec,
                      const std::string& out_path) {
  const size_t xc = table.column(spec.x_column);
  const size_t yc = table.column(spec.y_column);

  std::vector<PlotSeries> series;
  if (spec.group_column.empty()) {
    PlotSeries s;
    s.label = spec.y_column;
    for (const auto& row : table.rows) {
      s.x.push_back(cell_to_double(row[xc]));
      s.y.push_back(cell_to_double(row[yc]));
    }
    series.push_back(std::move(s));
  } else {
    const size_t gc = table.column(spec.group_column);
    std::vector<std::string> order;
    std::map<std::string, size_t> index;
    for (const auto& row : table.rows) {
      const std::string& g = row[gc];
      if (!index.count(g)) {
        index[g] = series.size();
        order.push_back(g);
        PlotSeries s;
        s.label = spec.group_column + "=" + g;
        series.push_back(std::move(s));
      }
      PlotSeries& s = series[index[g]];
      s.x.push_back(cell_to_double(row[xc]));
      s.y.push_back(cell_to_double(row[yc]));
    }
  }

  if (!spec.aggregate_label.empty())
    series.push_back(aggregate_mean_series(series, spec.aggregate_label));

  std::string svg = render_line_plot(spec, series);
  if (!out_path.empty()) write_text_file(out_path, svg);
  return svg;
}

}  // namespace pqnlab
