#pragma once

// SVG overlays: scanpath drawn as a green-to-blue polyline with circles whose
// radius is proportional to fixation duration, optionally over a layout.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>

#include "scanflow/core.hpp"
#include "scanflow/layout.hpp"

namespace scanflow::svg {

struct Style {
    double radius_per_second = 0.0;  // 0: 6% of the shorter canvas side per second
    double stroke_width = 3.0;
    double font_size = 12.0;
};

// Colour at progress u in [0,1], green (start) to blue (end), as #rrggbb.
inline std::string gradient_color(double u) {
    u = std::clamp(u, 0.0, 1.0);
    const int r = 0;
    const int g = static_cast<int>(std::lround(200 * (1 - u)));
    const int b = static_cast<int>(std::lround(220 * u));
    char buf[8];
    std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
    return buf;
}

inline std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", v);
    return buf;
}

inline std::string hex(const std::array<std::uint8_t, 3>& c) {
    char buf[8];
    std::snprintf(buf, sizeof buf, "#%02x%02x%02x", c[0], c[1], c[2]);
    return buf;
}

inline std::string escape(const std::string& s) {
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

inline std::string render(const Scanpath& path, int width, int height, const layout::LayoutSpec* lay = nullptr,
                          const Style& style = {}) {
    if (width <= 0 || height <= 0) throw ValidationError("canvas dimensions must be positive", "canvas");
    const double k = style.radius_per_second > 0 ? style.radius_per_second : 0.06 * std::min(width, height);
    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" viewBox=\"0 0 " << width << ' ' << height << "\">\n";
    o << "  <rect x=\"0\" y=\"0\" width=\"" << width << "\" height=\"" << height << "\" fill=\"#c8c8c8\"/>\n";
    if (lay) {
        for (std::size_t i = 0; i < lay->elements.size(); ++i) {
            const auto& e = lay->elements[i];
            o << "  <rect class=\"element\" data-id=\"" << escape(e.id) << "\" x=\"" << num(e.rect.x * width)
              << "\" y=\"" << num(e.rect.y * height) << "\" width=\"" << num(e.rect.w * width) << "\" height=\""
              << num(e.rect.h * height) << "\" fill=\"" << hex(e.color.value_or(layout::palette(i)))
              << "\" fill-opacity=\"0.6\" stroke=\"#333333\"/>\n";
            o << "  <text x=\"" << num(e.rect.x * width + 4) << "\" y=\"" << num(e.rect.y * height + style.font_size + 2)
              << "\" font-size=\"" << num(style.font_size) << "\" font-family=\"sans-serif\">" << escape(e.id)
              << "</text>\n";
        }
    }
    const std::size_t n = path.size();
    auto progress = [&](std::size_t i) { return n > 1 ? static_cast<double>(i) / (n - 1) : 0.0; };
    for (std::size_t i = 1; i < n; ++i) {
        const auto &a = path[i - 1], &b = path[i];
        o << "  <line class=\"saccade\" x1=\"" << num(a.x * width) << "\" y1=\"" << num(a.y * height) << "\" x2=\""
          << num(b.x * width) << "\" y2=\"" << num(b.y * height) << "\" stroke=\""
          << gradient_color(0.5 * (progress(i - 1) + progress(i))) << "\" stroke-width=\"" << num(style.stroke_width)
          << "\"/>\n";
    }
    for (std::size_t i = 0; i < n; ++i) {
        const auto& f = path[i];
        o << "  <circle class=\"fixation\" data-index=\"" << i + 1 << "\" data-duration=\"" << num(f.t) << "\" cx=\""
          << num(f.x * width) << "\" cy=\"" << num(f.y * height) << "\" r=\"" << num(k * f.t) << "\" fill=\""
          << gradient_color(progress(i)) << "\" fill-opacity=\"0.7\"/>\n";
        o << "  <text x=\"" << num(f.x * width) << "\" y=\"" << num(f.y * height + style.font_size / 3)
          << "\" font-size=\"" << num(style.font_size) << "\" text-anchor=\"middle\" fill=\"#ffffff\">" << i + 1
          << "</text>\n";
    }
    o << "</svg>\n";
    return o.str();
}

} // namespace scanflow::svg
