#pragma once

// Report artifacts: config fingerprints, stamped CSV tables and SVG charts.
// Every number is printed with fixed formatting so output bytes depend only on
// the input values.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "geostars/dataset.hpp"
#include "geostars/error.hpp"
#include "geostars/io/csv.hpp"

namespace geostars {

/// FNV-1a of the canonical (key-sorted, compact) JSON dump, as 16 hex digits.
inline std::string fingerprint(const nlohmann::json& config) {
  const std::uint64_t h = fnv1a(config.dump());
  static const char* hex = "0123456789abcdef";
  std::string s(16, '0');
  for (int k = 0; k < 16; ++k) s[static_cast<std::size_t>(15 - k)] = hex[(h >> (4 * k)) & 0xF];
  return s;
}

inline std::string stamp(const std::string& fp, std::uint64_t seed) {
  return "geostars fingerprint=" + fp + " seed=" + std::to_string(seed);
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("write failed for " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// CSV with a leading '#' stamp line. Missing values are written as empty fields.
inline std::string csv_text(const std::string& stamp_line, const std::vector<std::string>& header,
                            const std::vector<std::vector<std::string>>& rows) {
  std::string s = "# " + stamp_line + "\n" + csv::join(header) + "\n";
  for (const auto& r : rows) s += csv::join(r) + "\n";
  return s;
}

inline std::string fmt_value(std::optional<double> v, int digits = 6) {
  return v ? csv::format_fixed(*v, digits) : std::string{};
}

// ---------------------------------------------------------------------------
// SVG charts
// ---------------------------------------------------------------------------

struct LineSeries {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;  // NaN breaks the line
  bool markers = false;   // draw points instead of a polyline
};

struct BarGroup {
  std::string label;                        // series name (legend)
  std::vector<std::optional<double>> values;  // one per category
};

namespace svg_detail {

inline constexpr double kWidth = 720, kHeight = 360, kLeft = 60, kRight = 150, kTop = 30, kBottom = 40;
inline const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};

inline std::string esc(const std::string& s) {
  std::string o;
  for (char c : s) {
    switch (c) {
      case '&': o += "&amp;"; break;
      case '<': o += "&lt;"; break;
      case '>': o += "&gt;"; break;
      case '"': o += "&quot;"; break;
      default: o += c;
    }
  }
  return o;
}

inline std::string num(double v) { return csv::format_fixed(v, 2); }

struct Range {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  void add(double v) {
    if (!std::isfinite(v)) return;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  void finish() {
    if (!std::isfinite(lo)) lo = 0, hi = 1;
    if (hi - lo < 1e-9) lo -= 0.5, hi += 0.5;
  }
  double map(double v, double a, double b) const { return a + (v - lo) / (hi - lo) * (b - a); }
};

inline std::string header(const std::string& title, const std::string& stamp_line, const std::string& extra) {
  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(kWidth) + "\" height=\"" + num(kHeight) +
                  "\"" + extra + ">\n";
  s += "<!-- " + esc(stamp_line) + " -->\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "<text x=\"" + num(kWidth / 2) + "\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">" + esc(title) + "</text>\n";
  return s;
}

inline std::string axes(const Range& xr, const Range& yr, const std::string& xlabel, const std::string& ylabel,
                        bool x_numeric) {
  const double x0 = kLeft, x1 = kWidth - kRight, y0 = kHeight - kBottom, y1 = kTop;
  std::string s = "<line x1=\"" + num(x0) + "\" y1=\"" + num(y0) + "\" x2=\"" + num(x1) + "\" y2=\"" + num(y0) +
                  "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + num(x0) + "\" y1=\"" + num(y0) + "\" x2=\"" + num(x0) + "\" y2=\"" + num(y1) +
       "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double v = yr.lo + (yr.hi - yr.lo) * k / 4.0;
    const double y = yr.map(v, y0, y1);
    s += "<text x=\"" + num(x0 - 5) + "\" y=\"" + num(y + 4) + "\" text-anchor=\"end\" font-size=\"10\">" + num(v) +
         "</text>\n";
  }
  if (x_numeric) {
    for (int k = 0; k <= 4; ++k) {
      const double v = xr.lo + (xr.hi - xr.lo) * k / 4.0;
      s += "<text x=\"" + num(xr.map(v, x0, x1)) + "\" y=\"" + num(y0 + 14) +
           "\" text-anchor=\"middle\" font-size=\"10\">" + num(v) + "</text>\n";
    }
  }
  s += "<text x=\"" + num((x0 + x1) / 2) + "\" y=\"" + num(kHeight - 6) + "\" text-anchor=\"middle\" font-size=\"11\">" +
       esc(xlabel) + "</text>\n";
  s += "<text x=\"14\" y=\"" + num((y0 + y1) / 2) + "\" text-anchor=\"middle\" font-size=\"11\" transform=\"rotate(-90 14 " +
       num((y0 + y1) / 2) + ")\">" + esc(ylabel) + "</text>\n";
  return s;
}

inline std::string legend(std::size_t k, const std::string& label) {
  const double x = kWidth - kRight + 10, y = kTop + 16.0 * static_cast<double>(k);
  return "<rect x=\"" + num(x) + "\" y=\"" + num(y) + "\" width=\"10\" height=\"10\" fill=\"" + kPalette[k % 8] +
         "\"/>\n<text x=\"" + num(x + 14) + "\" y=\"" + num(y + 9) + "\" font-size=\"10\">" + esc(label) + "</text>\n";
}

}  // namespace svg_detail

/// Line chart; `x_ticks` (if nonzero) is recorded as metadata for the number
/// of x positions the chart spans.
inline std::string line_chart(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                              const std::vector<LineSeries>& series, const std::string& stamp_line,
                              std::size_t x_ticks = 0) {
  using namespace svg_detail;
  Range xr, yr;
  for (const auto& s : series) {
    require(s.x.size() == s.y.size(), "line_chart: x/y size mismatch in " + s.label);
    for (std::size_t k = 0; k < s.x.size(); ++k) {
      if (!std::isfinite(s.y[k])) continue;
      xr.add(s.x[k]);
      yr.add(s.y[k]);
    }
  }
  xr.finish();
  yr.finish();
  const std::string extra = x_ticks ? " data-x-ticks=\"" + std::to_string(x_ticks) + "\"" : std::string{};
  std::string out = header(title, stamp_line, extra) + axes(xr, yr, xlabel, ylabel, true);
  const double x0 = kLeft, x1 = kWidth - kRight, y0 = kHeight - kBottom, y1 = kTop;
  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    const char* color = kPalette[si % 8];
    if (s.markers) {
      for (std::size_t k = 0; k < s.x.size(); ++k) {
        if (!std::isfinite(s.y[k])) continue;
        out += "<circle cx=\"" + num(xr.map(s.x[k], x0, x1)) + "\" cy=\"" + num(yr.map(s.y[k], y0, y1)) +
               "\" r=\"2\" fill=\"" + color + "\"/>\n";
      }
    } else {
      std::string pts;
      auto flush = [&] {
        if (!pts.empty()) {
          out += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"1\" points=\"" + pts +
                 "\"/>\n";
        }
        pts.clear();
      };
      for (std::size_t k = 0; k < s.x.size(); ++k) {
        if (!std::isfinite(s.y[k])) {
          flush();
          continue;
        }
        if (!pts.empty()) pts += ' ';
        pts += num(xr.map(s.x[k], x0, x1)) + "," + num(yr.map(s.y[k], y0, y1));
      }
      flush();
    }
    out += legend(si, s.label);
  }
  return out + "</svg>\n";
}

/// Grouped bar chart: one cluster per category, one bar per group.
inline std::string bar_chart(const std::string& title, const std::string& ylabel,
                             const std::vector<std::string>& categories, const std::vector<BarGroup>& groups,
                             const std::string& stamp_line) {
  using namespace svg_detail;
  Range yr;
  yr.add(0.0);
  for (const auto& g : groups) {
    require(g.values.size() == categories.size(), "bar_chart: group size differs from category count");
    for (const auto& v : g.values)
      if (v) yr.add(*v);
  }
  yr.finish();
  std::string out = header(title, stamp_line, "") + axes({}, yr, "", ylabel, false);
  const double x0 = kLeft, x1 = kWidth - kRight, y0 = kHeight - kBottom, y1 = kTop;
  const double slot = (x1 - x0) / static_cast<double>(std::max<std::size_t>(categories.size(), 1));
  const double bar = slot * 0.8 / static_cast<double>(std::max<std::size_t>(groups.size(), 1));
  for (std::size_t c = 0; c < categories.size(); ++c) {
    const double cx = x0 + slot * static_cast<double>(c);
    for (std::size_t g = 0; g < groups.size(); ++g) {
      const auto& v = groups[g].values[c];
      if (!v) continue;
      const double top = yr.map(*v, y0, y1);
      out += "<rect x=\"" + num(cx + slot * 0.1 + bar * static_cast<double>(g)) + "\" y=\"" + num(top) +
             "\" width=\"" + num(bar) + "\" height=\"" + num(y0 - top) + "\" fill=\"" + kPalette[g % 8] + "\"/>\n";
    }
    out += "<text x=\"" + num(cx + slot / 2) + "\" y=\"" + num(y0 + 14) + "\" text-anchor=\"middle\" font-size=\"10\">" +
           esc(categories[c]) + "</text>\n";
  }
  for (std::size_t g = 0; g < groups.size(); ++g) out += legend(g, groups[g].label);
  return out + "</svg>\n";
}

}  // namespace geostars
