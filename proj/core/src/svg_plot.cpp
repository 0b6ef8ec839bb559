#include "upstep/svg_plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "upstep/common.hpp"

namespace upstep {

namespace {

std::string escape_xml(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string fmt(double v, const char* spec = "%.6g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

struct Range {
  double lo, hi;
  double span() const { return hi - lo; }
};

Range data_range(const std::vector<Series>& series, bool use_x) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (const auto& s : series)
    for (double v : use_x ? s.x : s.y) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  if (lo == hi) {  // flat data still deserves a visible band
    const double pad = lo == 0.0 ? 0.5 : std::abs(lo) * 0.1;
    lo -= pad;
    hi += pad;
  }
  return {lo, hi};
}

// Largest {1,2,5}*10^k step giving at most `max_ticks` intervals.
double nice_step(double span, int max_ticks) {
  const double raw = span / max_ticks;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  for (double m : {1.0, 2.0, 5.0, 10.0})
    if (mag * m >= raw) return mag * m;
  return mag * 10.0;
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                          "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};

}  // namespace

std::string render_line_svg(const std::string& title, const std::string& x_label,
                            const std::string& y_label, const std::vector<Series>& series) {
  if (series.empty()) throw ContractError("svg: no series to plot");
  for (const auto& s : series) {
    if (s.x.empty()) throw ContractError("svg: series '" + s.label + "' is empty");
    if (s.x.size() != s.y.size())
      throw ContractError("svg: series '" + s.label + "' has " + std::to_string(s.x.size()) +
                          " x values but " + std::to_string(s.y.size()) + " y values");
    for (double v : s.x)
      if (!std::isfinite(v)) throw NumericError("svg: non-finite x in series '" + s.label + "'");
    for (double v : s.y)
      if (!std::isfinite(v)) throw NumericError("svg: non-finite y in series '" + s.label + "'");
  }

  const double width = 860, height = 520;
  const double ml = 78, mr = series.size() > 1 ? 170 : 30, mt = 48, mb = 64;
  const double pw = width - ml - mr, ph = height - mt - mb;

  const Range xr = data_range(series, true);
  const Range yr = data_range(series, false);
  auto px = [&](double v) { return ml + (v - xr.lo) / xr.span() * pw; };
  auto py = [&](double v) { return mt + ph - (v - yr.lo) / yr.span() * ph; };

  std::string svg;
  svg += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt(width) + "\" height=\"" +
         fmt(height) + "\" viewBox=\"0 0 " + fmt(width) + " " + fmt(height) + "\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg += "<text x=\"" + fmt(ml + pw / 2) + "\" y=\"26\" text-anchor=\"middle\" "
         "font-family=\"sans-serif\" font-size=\"17\" font-weight=\"bold\">" +
         escape_xml(title) + "</text>\n";

  // Grid and tick labels.
  const double xstep = nice_step(xr.span(), 6), ystep = nice_step(yr.span(), 6);
  svg += "<g font-family=\"sans-serif\" font-size=\"12\" fill=\"#333\">\n";
  for (double v = std::ceil(xr.lo / xstep) * xstep; v <= xr.hi + 1e-9 * xr.span(); v += xstep) {
    const double gx = px(v);
    svg += "<line x1=\"" + fmt(gx) + "\" y1=\"" + fmt(mt) + "\" x2=\"" + fmt(gx) + "\" y2=\"" +
           fmt(mt + ph) + "\" stroke=\"#e0e0e0\" stroke-width=\"1\"/>\n";
    svg += "<text x=\"" + fmt(gx) + "\" y=\"" + fmt(mt + ph + 18) +
           "\" text-anchor=\"middle\">" + fmt(v, "%.4g") + "</text>\n";
  }
  for (double v = std::ceil(yr.lo / ystep) * ystep; v <= yr.hi + 1e-9 * yr.span(); v += ystep) {
    const double gy = py(v);
    svg += "<line x1=\"" + fmt(ml) + "\" y1=\"" + fmt(gy) + "\" x2=\"" + fmt(ml + pw) +
           "\" y2=\"" + fmt(gy) + "\" stroke=\"#e0e0e0\" stroke-width=\"1\"/>\n";
    svg += "<text x=\"" + fmt(ml - 8) + "\" y=\"" + fmt(gy + 4) + "\" text-anchor=\"end\">" +
           fmt(v, "%.4g") + "</text>\n";
  }
  svg += "</g>\n";

  // Axes.
  svg += "<line x1=\"" + fmt(ml) + "\" y1=\"" + fmt(mt + ph) + "\" x2=\"" + fmt(ml + pw) +
         "\" y2=\"" + fmt(mt + ph) + "\" stroke=\"black\" stroke-width=\"1.5\"/>\n";
  svg += "<line x1=\"" + fmt(ml) + "\" y1=\"" + fmt(mt) + "\" x2=\"" + fmt(ml) + "\" y2=\"" +
         fmt(mt + ph) + "\" stroke=\"black\" stroke-width=\"1.5\"/>\n";
  svg += "<text x=\"" + fmt(ml + pw / 2) + "\" y=\"" + fmt(height - 16) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">" +
         escape_xml(x_label) + "</text>\n";
  svg += "<text x=\"20\" y=\"" + fmt(mt + ph / 2) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\" "
         "transform=\"rotate(-90 20 " +
         fmt(mt + ph / 2) + ")\">" + escape_xml(y_label) + "</text>\n";

  // Data.
  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    const char* color = kPalette[si % (sizeof kPalette / sizeof kPalette[0])];
    if (s.x.size() == 1) {
      svg += "<circle cx=\"" + fmt(px(s.x[0]), "%.2f") + "\" cy=\"" + fmt(py(s.y[0]), "%.2f") +
             "\" r=\"3.5\" fill=\"" + std::string(color) + "\"/>\n";
    } else {
      svg += "<polyline fill=\"none\" stroke=\"" + std::string(color) +
             "\" stroke-width=\"1.8\" points=\"";
      for (std::size_t i = 0; i < s.x.size(); ++i) {
        if (i) svg += ' ';
        svg += fmt(px(s.x[i]), "%.2f") + "," + fmt(py(s.y[i]), "%.2f");
      }
      svg += "\"/>\n";
    }
  }

  if (series.size() > 1) {
    const double lx = ml + pw + 14;
    for (std::size_t si = 0; si < series.size(); ++si) {
      const double ly = mt + 10 + 22 * static_cast<double>(si);
      const char* color = kPalette[si % (sizeof kPalette / sizeof kPalette[0])];
      svg += "<line x1=\"" + fmt(lx) + "\" y1=\"" + fmt(ly) + "\" x2=\"" + fmt(lx + 24) +
             "\" y2=\"" + fmt(ly) + "\" stroke=\"" + std::string(color) +
             "\" stroke-width=\"2.5\"/>\n";
      svg += "<text x=\"" + fmt(lx + 30) + "\" y=\"" + fmt(ly + 4) +
             "\" font-family=\"sans-serif\" font-size=\"12\">" + escape_xml(series[si].label) +
             "</text>\n";
    }
  }

  svg += "</svg>\n";
  return svg;
}

void write_svg(const std::filesystem::path& path, const std::string& svg) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw FormatError(path.string() + ": cannot open for writing");
  out << svg;
  if (!out) throw FormatError(path.string() + ": write failed");
}

}  // namespace upstep
