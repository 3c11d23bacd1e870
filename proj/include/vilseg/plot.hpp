#pragma once

// Static PNG diagnostics: line charts (loss curves, sweeps) and bar charts
// (cluster usage). Axes and data only; the numbers live in sidecar CSVs.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <limits>
#include <vector>

#include "vilseg/image.hpp"

namespace vilseg::plot {

using Color = std::array<float, 3>;

inline const std::vector<Color>& palette() {
  static const std::vector<Color> colors{{0.12f, 0.47f, 0.71f}, {1.0f, 0.50f, 0.05f}, {0.17f, 0.63f, 0.17f},
                                         {0.84f, 0.15f, 0.16f}, {0.58f, 0.40f, 0.74f}, {0.55f, 0.34f, 0.29f}};
  return colors;
}

class Canvas {
 public:
  Canvas(int width, int height) : image_(height, width, 3, 1.0f) {}

  void set(int x, int y, const Color& c) {
    if (x < 0 || y < 0 || x >= image_.width || y >= image_.height) return;
    for (int k = 0; k < 3; ++k) image_.at(y, x, k) = c[k];
  }

  void line(double x0, double y0, double x1, double y1, const Color& c) {
    const int steps = static_cast<int>(std::ceil(std::max(std::abs(x1 - x0), std::abs(y1 - y0)))) + 1;
    for (int i = 0; i <= steps; ++i) {
      const double t = static_cast<double>(i) / steps;
      set(static_cast<int>(std::lround(x0 + (x1 - x0) * t)), static_cast<int>(std::lround(y0 + (y1 - y0) * t)), c);
    }
  }

  void fill_rect(int x0, int y0, int x1, int y1, const Color& c) {
    for (int y = std::min(y0, y1); y <= std::max(y0, y1); ++y) {
      for (int x = std::min(x0, x1); x <= std::max(x0, x1); ++x) set(x, y, c);
    }
  }

  const Image& image() const { return image_; }

 private:
  Image image_;
};

struct Frame {
  int left = 40, right = 16, top = 16, bottom = 32;
};

inline void draw_axes(Canvas& canvas, int width, int height, const Frame& f) {
  const Color axis{0.2f, 0.2f, 0.2f};
  const Color grid{0.88f, 0.88f, 0.88f};
  for (int i = 1; i < 5; ++i) {
    const double y = f.top + (height - f.top - f.bottom) * i / 5.0;
    canvas.line(f.left, y, width - f.right, y, grid);
  }
  canvas.line(f.left, f.top, f.left, height - f.bottom, axis);
  canvas.line(f.left, height - f.bottom, width - f.right, height - f.bottom, axis);
}

/// One polyline per series, sharing x = index (or the supplied xs) and a common y range.
inline Image line_chart(const std::vector<std::vector<double>>& series, const std::vector<double>& xs = {},
                        int width = 640, int height = 400) {
  Canvas canvas(width, height);
  const Frame f;
  draw_axes(canvas, width, height, f);
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  std::size_t n = 0;
  for (const auto& s : series) {
    for (double v : s) {
      if (!std::isfinite(v)) continue;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    n = std::max(n, s.size());
  }
  if (n == 0 || !std::isfinite(lo)) return canvas.image();
  if (hi - lo < 1e-12) {
    hi += 0.5;
    lo -= 0.5;
  }
  const double x_lo = xs.empty() ? 0.0 : *std::min_element(xs.begin(), xs.end());
  const double x_hi = xs.empty() ? static_cast<double>(std::max<std::size_t>(n - 1, 1)) : *std::max_element(xs.begin(), xs.end());
  const double x_span = x_hi - x_lo > 0 ? x_hi - x_lo : 1.0;
  auto px = [&](std::size_t i) {
    const double x = xs.empty() ? static_cast<double>(i) : xs[i];
    return f.left + (width - f.left - f.right) * (x - x_lo) / x_span;
  };
  auto py = [&](double v) { return height - f.bottom - (height - f.top - f.bottom) * (v - lo) / (hi - lo); };
  for (std::size_t s = 0; s < series.size(); ++s) {
    const Color& c = palette()[s % palette().size()];
    for (std::size_t i = 0; i < series[s].size(); ++i) {
      if (series[s].size() == 1) canvas.fill_rect(static_cast<int>(px(0)) - 2, static_cast<int>(py(series[s][0])) - 2,
                                                   static_cast<int>(px(0)) + 2, static_cast<int>(py(series[s][0])) + 2, c);
      if (i == 0) continue;
      canvas.line(px(i - 1), py(series[s][i - 1]), px(i), py(series[s][i]), c);
      if (!xs.empty()) canvas.fill_rect(static_cast<int>(px(i)) - 2, static_cast<int>(py(series[s][i])) - 2,
                                        static_cast<int>(px(i)) + 2, static_cast<int>(py(series[s][i])) + 2, c);
    }
  }
  return canvas.image();
}

inline Image bar_chart(const std::vector<double>& values, int width = 640, int height = 400) {
  Canvas canvas(width, height);
  const Frame f;
  draw_axes(canvas, width, height, f);
  if (values.empty()) return canvas.image();
  const double hi = std::max(1e-12, *std::max_element(values.begin(), values.end()));
  const double slot = static_cast<double>(width - f.left - f.right) / values.size();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const int x0 = static_cast<int>(f.left + slot * i + slot * 0.15);
    const int x1 = static_cast<int>(f.left + slot * (i + 1) - slot * 0.15);
    const int y1 = height - f.bottom - 1;
    const int y0 = static_cast<int>(y1 - (height - f.top - f.bottom - 1) * std::max(0.0, values[i]) / hi);
    canvas.fill_rect(x0, y0, x1, y1, palette()[0]);
  }
  return canvas.image();
}

}  // namespace vilseg::plot
