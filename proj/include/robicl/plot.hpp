#pragma once

// Minimal self-contained SVG scatter/line plots. Every marker carries its data
// values and the identifier of the result row it came from.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

namespace robicl {

struct PlotPoint {
    double x = 0.0;
    double y = 0.0;
    double y_se = 0.0;
    std::string cell;  // result-row identifier
};

struct PlotSeries {
    std::string label;
    std::string color = "#1f77b4";
    std::vector<PlotPoint> points;
    bool line = false;  // draw as a polyline instead of markers
};

struct PlotSpec {
    std::string title;
    std::string x_label;
    std::string y_label;
    std::vector<PlotSeries> series;
};

namespace detail {

inline std::string xml_escape(const std::string& s) {
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

inline std::string num(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

} // namespace detail

inline std::string render_svg(const PlotSpec& spec) {
    const double w = 640, h = 420, ml = 70, mr = 160, mt = 40, mb = 55;
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
    for (const auto& s : spec.series) {
        for (const auto& p : s.points) {
            x0 = std::min(x0, p.x);
            x1 = std::max(x1, p.x);
            y0 = std::min(y0, p.y - p.y_se);
            y1 = std::max(y1, p.y + p.y_se);
        }
    }
    if (!std::isfinite(x0)) {
        x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    }
    if (x1 - x0 < 1e-12) {
        x0 -= 0.5, x1 += 0.5;
    }
    if (y1 - y0 < 1e-12) {
        y0 -= 0.5, y1 += 0.5;
    }
    const double pad = 0.05 * (y1 - y0);
    y0 -= pad;
    y1 += pad;
    auto sx = [&](double x) { return ml + (x - x0) / (x1 - x0) * (w - ml - mr); };
    auto sy = [&](double y) { return h - mb - (y - y0) / (y1 - y0) * (h - mt - mb); };

    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" viewBox=\"0 0 "
       << w << " " << h << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << w / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">"
       << detail::xml_escape(spec.title) << "</text>\n";
    os << "<line x1=\"" << ml << "\" y1=\"" << h - mb << "\" x2=\"" << w - mr << "\" y2=\"" << h - mb
       << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << h - mb
       << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double xv = x0 + (x1 - x0) * i / 4.0;
        const double yv = y0 + (y1 - y0) * i / 4.0;
        os << "<text x=\"" << sx(xv) << "\" y=\"" << h - mb + 16 << "\" text-anchor=\"middle\">" << detail::num(xv)
           << "</text>\n";
        os << "<text x=\"" << ml - 6 << "\" y=\"" << sy(yv) + 4 << "\" text-anchor=\"end\">" << detail::num(yv)
           << "</text>\n";
    }
    os << "<text x=\"" << (ml + w - mr) / 2 << "\" y=\"" << h - 15 << "\" text-anchor=\"middle\">"
       << detail::xml_escape(spec.x_label) << "</text>\n";
    os << "<text transform=\"translate(18," << (mt + h - mb) / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
       << detail::xml_escape(spec.y_label) << "</text>\n";

    int legend = 0;
    for (const auto& s : spec.series) {
        os << "<g class=\"series\" data-label=\"" << detail::xml_escape(s.label) << "\">\n";
        if (s.line && !s.points.empty()) {
            os << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\" points=\"";
            for (const auto& p : s.points) {
                os << sx(p.x) << "," << sy(p.y) << " ";
            }
            os << "\"/>\n";
        } else {
            for (const auto& p : s.points) {
                if (p.y_se > 0.0) {
                    os << "<line x1=\"" << sx(p.x) << "\" y1=\"" << sy(p.y - p.y_se) << "\" x2=\"" << sx(p.x)
                       << "\" y2=\"" << sy(p.y + p.y_se) << "\" stroke=\"" << s.color << "\"/>\n";
                }
                os << "<circle cx=\"" << sx(p.x) << "\" cy=\"" << sy(p.y) << "\" r=\"4\" fill=\"" << s.color
                   << "\" data-x=\"" << detail::num(p.x) << "\" data-y=\"" << detail::num(p.y) << "\" data-se=\""
                   << detail::num(p.y_se) << "\" data-cell=\"" << detail::xml_escape(p.cell) << "\"><title>"
                   << detail::xml_escape(p.cell) << "</title></circle>\n";
            }
        }
        os << "</g>\n";
        const double ly = mt + 10 + 18 * legend++;
        os << "<rect x=\"" << w - mr + 12 << "\" y=\"" << ly - 8 << "\" width=\"10\" height=\"10\" fill=\"" << s.color
           << "\"/><text x=\"" << w - mr + 28 << "\" y=\"" << ly + 1 << "\">" << detail::xml_escape(s.label)
           << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

inline void write_svg(const std::string& path, const PlotSpec& spec) {
    std::ofstream f(path, std::ios::trunc);
    f << render_svg(spec);
}

} // namespace robicl
