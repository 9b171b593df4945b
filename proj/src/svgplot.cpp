#include "lens/svgplot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "lens/util.hpp"

namespace lens {

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string esc(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

struct Canvas {
  std::ostringstream body;
  double width, height;

  Canvas(double w, double h) : width(w), height(h) {
    body << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w
         << "\" height=\"" << h << "\" viewBox=\"0 0 " << w << " " << h
         << "\">\n<rect width=\"" << w << "\" height=\"" << h
         << "\" fill=\"white\"/>\n";
  }
  void line(double x1, double y1, double x2, double y2, const std::string& color,
            double w = 1.0, bool dashed = false) {
    body << "<line x1=\"" << num(x1) << "\" y1=\"" << num(y1) << "\" x2=\""
         << num(x2) << "\" y2=\"" << num(y2) << "\" stroke=\"" << color
         << "\" stroke-width=\"" << num(w) << "\"";
    if (dashed) body << " stroke-dasharray=\"5,4\"";
    body << "/>\n";
  }
  void polyline(const std::vector<std::pair<double, double>>& pts,
                const std::string& color, double w, bool dashed) {
    body << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\""
         << num(w) << "\"";
    if (dashed) body << " stroke-dasharray=\"5,4\"";
    body << " points=\"";
    for (const auto& [x, y] : pts) body << num(x) << ',' << num(y) << ' ';
    body << "\"/>\n";
  }
  void circle(double x, double y, double r, const std::string& color) {
    body << "<circle cx=\"" << num(x) << "\" cy=\"" << num(y) << "\" r=\""
         << num(r) << "\" fill=\"" << color << "\"/>\n";
  }
  void text(double x, double y, const std::string& s, double size = 11,
            const std::string& anchor = "start", const std::string& color = "#333",
            double rotate = 0.0) {
    body << "<text x=\"" << num(x) << "\" y=\"" << num(y)
         << "\" font-family=\"sans-serif\" font-size=\"" << num(size)
         << "\" text-anchor=\"" << anchor << "\" fill=\"" << color << "\"";
    if (rotate != 0.0)
      body << " transform=\"rotate(" << num(rotate) << ' ' << num(x) << ' '
           << num(y) << ")\"";
    body << '>' << esc(s) << "</text>\n";
  }
  std::string finish() {
    body << "</svg>\n";
    return body.str();
  }
};

}  // namespace

void write_line_plot_svg(const std::vector<PlotSeries>& series,
                         const LinePlotOptions& opts,
                         const std::filesystem::path& p) {
  const double W = 720, H = 360;
  const double ml = 60, mr = 160, mt = 36, mb = 56;
  Canvas cv(W, H);
  cv.text(W / 2, 20, opts.title, 13, "middle", "#111");

  size_t n = 0;
  double lo = opts.y_min.value_or(HUGE_VAL), hi = opts.y_max.value_or(-HUGE_VAL);
  for (const auto& s : series) {
    n = std::max(n, s.y.size());
    if (!opts.y_min || !opts.y_max) {
      for (size_t i = 0; i < s.y.size(); ++i) {
        const double e = i < s.sd.size() ? s.sd[i] : 0.0;
        lo = std::min(lo, s.y[i] - e);
        hi = std::max(hi, s.y[i] + e);
      }
    }
  }
  if (n == 0) {
    write_file(p, cv.finish());
    return;
  }
  if (!(hi > lo)) {
    hi = lo + 1.0;
    lo -= 1.0;
  }
  const double pad = 0.05 * (hi - lo);
  if (!opts.y_min) lo -= pad;
  if (!opts.y_max) hi += pad;

  auto px = [&](double i) {
    return ml + (W - ml - mr) * (n > 1 ? i / (n - 1.0) : 0.5);
  };
  auto py = [&](double v) { return H - mb - (H - mt - mb) * (v - lo) / (hi - lo); };

  // axes
  cv.line(ml, mt, ml, H - mb, "#444");
  cv.line(ml, H - mb, W - mr, H - mb, "#444");
  for (int k = 0; k <= 4; ++k) {
    const double v = lo + (hi - lo) * k / 4.0;
    cv.line(ml - 4, py(v), ml, py(v), "#444");
    cv.text(ml - 8, py(v) + 4, num(v), 10, "end");
  }
  cv.text(16, (mt + H - mb) / 2, opts.y_label, 11, "middle", "#333", -90);
  for (size_t i = 0; i < n; ++i) {
    const std::string lbl = i < opts.x_labels.size() ? opts.x_labels[i]
                                                     : std::to_string(i);
    cv.text(px(static_cast<double>(i)), H - mb + 16, lbl, 10, "middle", "#333",
            opts.x_labels.empty() ? 0.0 : 35.0);
  }
  for (double hl : opts.h_lines)
    cv.line(ml, py(hl), W - mr, py(hl), "#999", 1.0, true);

  double legend_y = mt + 6;
  for (const auto& s : series) {
    std::vector<std::pair<double, double>> pts;
    for (size_t i = 0; i < s.y.size(); ++i)
      pts.emplace_back(px(static_cast<double>(i)), py(s.y[i]));
    cv.polyline(pts, s.color, 1.8, s.dashed);
    for (size_t i = 0; i < s.y.size(); ++i) {
      if (i < s.sd.size() && s.sd[i] > 0) {
        cv.line(pts[i].first, py(s.y[i] - s.sd[i]), pts[i].first,
                py(s.y[i] + s.sd[i]), s.color, 1.0);
      }
      cv.circle(pts[i].first, pts[i].second, 2.2, s.color);
    }
    cv.line(W - mr + 10, legend_y, W - mr + 34, legend_y, s.color, 2.0, s.dashed);
    cv.text(W - mr + 40, legend_y + 4, s.label, 10);
    legend_y += 16;
  }
  write_file(p, cv.finish());
}

void write_efferent_strip_svg(const std::vector<EfferentProfile>& profiles,
                              const std::string& title,
                              const std::filesystem::path& p) {
  const double W = 720;
  const double row_h = 54;
  const double H = 60 + row_h * profiles.size();
  const double ml = 110, mr = 30;
  Canvas cv(W, H);
  cv.text(W / 2, 20, title, 13, "middle", "#111");

  double lo = 0, hi = 0;
  for (const auto& prof : profiles) {
    for (double w : prof.singular_weights) { lo = std::min(lo, w); hi = std::max(hi, w); }
    for (double w : prof.plural_weights) { lo = std::min(lo, w); hi = std::max(hi, w); }
  }
  if (!(hi > lo)) { hi = lo + 1; lo -= 1; }
  const double pad = 0.06 * (hi - lo);
  lo -= pad;
  hi += pad;
  auto px = [&](double v) { return ml + (W - ml - mr) * (v - lo) / (hi - lo); };

  double y = 48;
  for (const auto& prof : profiles) {
    cv.text(8, y + 18,
            prof.unit.display() + "  (seg " + num(prof.segregation) + ")", 10);
    cv.line(ml, y + 12, W - mr, y + 12, "#ddd");
    cv.line(ml, y + 30, W - mr, y + 30, "#ddd");
    if (px(0) >= ml && px(0) <= W - mr)
      cv.line(px(0), y, px(0), y + 40, "#bbb", 1.0, true);
    for (double w : prof.singular_weights)
      cv.line(px(w), y + 4, px(w), y + 20, "#c62828", 1.6);
    for (double w : prof.plural_weights)
      cv.line(px(w), y + 22, px(w), y + 38, "#1565c0", 1.6);
    cv.text(ml - 6, y + 14, "sing", 9, "end", "#c62828");
    cv.text(ml - 6, y + 32, "plur", 9, "end", "#1565c0");
    y += row_h;
  }
  // x axis ticks
  for (int k = 0; k <= 4; ++k) {
    const double v = lo + (hi - lo) * k / 4.0;
    cv.text(px(v), H - 8, num(v), 10, "middle");
  }
  write_file(p, cv.finish());
}

void write_afferent_strip_svg(const std::vector<EffectiveAfferent>& reports,
                              const std::string& title,
                              const std::filesystem::path& p) {
  const double W = 720;
  const double row_h = 64;
  const double H = 60 + row_h * reports.size();
  const double ml = 150, mr = 30;
  Canvas cv(W, H);
  cv.text(W / 2, 20, title, 13, "middle", "#111");

  double lo = 0, hi = 0;
  for (const auto& rep : reports)
    for (const auto& s : rep.sources) {
      lo = std::min(lo, s.effective);
      hi = std::max(hi, s.effective);
    }
  if (!(hi > lo)) { hi = lo + 1; lo -= 1; }
  const double pad = 0.06 * (hi - lo);
  lo -= pad;
  hi += pad;
  auto px = [&](double v) { return ml + (W - ml - mr) * (v - lo) / (hi - lo); };

  const char* gate_label[4] = {"input", "forget", "candidate", "output"};
  double y = 48;
  for (const auto& rep : reports) {
    cv.text(8, y + 20, rep.target.display() + " / " + gate_label[rep.gate], 10);
    cv.line(ml, y + 16, W - mr, y + 16, "#ddd");
    if (px(0) >= ml && px(0) <= W - mr)
      cv.line(px(0), y, px(0), y + 34, "#bbb", 1.0, true);
    for (const auto& s : rep.sources) {
      if (s.outlier) continue;
      cv.line(px(s.effective), y + 8, px(s.effective), y + 24, "#78909c", 1.2);
    }
    for (const auto& s : rep.sources) {
      if (!s.outlier) continue;
      cv.line(px(s.effective), y + 4, px(s.effective), y + 28, "#c62828", 2.0);
      cv.text(px(s.effective), y + 40,
              s.source.display() + " z=" + num(s.z), 9, "middle", "#c62828");
    }
    y += row_h;
  }
  for (int k = 0; k <= 4; ++k) {
    const double v = lo + (hi - lo) * k / 4.0;
    cv.text(px(v), H - 8, num(v), 10, "middle");
  }
  write_file(p, cv.finish());
}

}  // namespace lens
