#pragma once

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

namespace nsr::svg {

struct Series {
  std::string name;
  std::vector<double> x, y;
};

struct ChartStyle {
  double width = 640, height = 400;
  double margin_left = 60, margin_right = 150, margin_top = 40, margin_bottom = 50;
  bool markers = true;
};

inline std::string escape(const std::string& s) {
  std::string out;
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

inline const char* palette(std::size_t i) {
  static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                 "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  return colors[i % 10];
}

inline std::string fmt(double v) {
  std::ostringstream o;
  o.precision(4);
  o << v;
  return o.str();
}

/// Chart body placed at (ox, oy); returns SVG elements without the <svg> wrapper.
inline std::string chart_body(const std::string& title, const std::string& xlabel,
                              const std::string& ylabel, const std::vector<Series>& series,
                              double y_lo, double y_hi, const ChartStyle& st, double ox = 0,
                              double oy = 0, bool legend = true) {
  double x_lo = 0, x_hi = 1;
  bool first = true;
  for (const auto& s : series)
    for (double v : s.x) {
      x_lo = first ? v : std::min(x_lo, v);
      x_hi = first ? v : std::max(x_hi, v);
      first = false;
    }
  if (x_hi <= x_lo) x_hi = x_lo + 1;
  if (y_hi <= y_lo) y_hi = y_lo + 1;
  const double pw = st.width - st.margin_left - st.margin_right;
  const double ph = st.height - st.margin_top - st.margin_bottom;
  auto px = [&](double v) { return ox + st.margin_left + (v - x_lo) / (x_hi - x_lo) * pw; };
  auto py = [&](double v) { return oy + st.margin_top + (1 - (v - y_lo) / (y_hi - y_lo)) * ph; };

  std::ostringstream o;
  o << "<text x=\"" << ox + st.width / 2 - st.margin_right / 2 << "\" y=\"" << oy + 22
    << "\" text-anchor=\"middle\" font-size=\"15\">" << escape(title) << "</text>\n";
  o << "<rect x=\"" << px(x_lo) << "\" y=\"" << py(y_hi) << "\" width=\"" << pw << "\" height=\"" << ph
    << "\" fill=\"none\" stroke=\"#333\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double yv = y_lo + (y_hi - y_lo) * i / 5.0;
    const double xv = x_lo + (x_hi - x_lo) * i / 5.0;
    o << "<line x1=\"" << px(x_lo) << "\" y1=\"" << py(yv) << "\" x2=\"" << px(x_hi) << "\" y2=\"" << py(yv)
      << "\" stroke=\"#ddd\"/>\n";
    o << "<text x=\"" << px(x_lo) - 6 << "\" y=\"" << py(yv) + 4
      << "\" text-anchor=\"end\" font-size=\"11\">" << fmt(yv) << "</text>\n";
    o << "<text x=\"" << px(xv) << "\" y=\"" << py(y_lo) + 16
      << "\" text-anchor=\"middle\" font-size=\"11\">" << fmt(xv) << "</text>\n";
  }
  o << "<text x=\"" << px((x_lo + x_hi) / 2) << "\" y=\"" << py(y_lo) + 36
    << "\" text-anchor=\"middle\" font-size=\"12\">" << escape(xlabel) << "</text>\n";
  o << "<text x=\"" << ox + 14 << "\" y=\"" << py((y_lo + y_hi) / 2) << "\" transform=\"rotate(-90 "
    << ox + 14 << ' ' << py((y_lo + y_hi) / 2) << ")\" text-anchor=\"middle\" font-size=\"12\">"
    << escape(ylabel) << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    o << "<polyline fill=\"none\" stroke=\"" << palette(k) << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i) o << (i ? " " : "") << px(s.x[i]) << ',' << py(s.y[i]);
    o << "\"/>\n";
    if (st.markers)
      for (std::size_t i = 0; i < s.x.size(); ++i)
        o << "<circle cx=\"" << px(s.x[i]) << "\" cy=\"" << py(s.y[i]) << "\" r=\"2.5\" fill=\"" << palette(k)
          << "\"/>\n";
    if (legend) {
      const double ly = oy + st.margin_top + 14 + 18.0 * k;
      const double lx = ox + st.width - st.margin_right + 12;
      o << "<line x1=\"" << lx << "\" y1=\"" << ly - 4 << "\" x2=\"" << lx + 18 << "\" y2=\"" << ly - 4
        << "\" stroke=\"" << palette(k) << "\" stroke-width=\"2\"/>\n";
      o << "<text x=\"" << lx + 24 << "\" y=\"" << ly << "\" font-size=\"12\">" << escape(s.name)
        << "</text>\n";
    }
  }
  return o.str();
}

inline std::string document(double width, double height, const std::string& body) {
  std::ostringstream o;
  o << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
    << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << width << "\" height=\""
    << height << "\" viewBox=\"0 0 " << width << ' ' << height << "\" font-family=\"sans-serif\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << body << "</svg>\n";
  return o.str();
}

inline std::string line_chart(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                              const std::vector<Series>& series, double y_lo, double y_hi,
                              const ChartStyle& st = {}) {
  return document(st.width, st.height, chart_body(title, xlabel, ylabel, series, y_lo, y_hi, st));
}

}  // namespace nsr::svg
