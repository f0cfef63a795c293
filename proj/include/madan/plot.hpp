#pragma once

// Static PNG charts: loss curves from a metric history and per-class bars
// from a MetricReport. Axes and data only; no text rendering.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "madan/eval.hpp"
#include "madan/io.hpp"

namespace madan {

using json = nlohmann::json;

struct Canvas {
  int width, height;
  Raster raster;

  Canvas(int w, int h) : width(w), height(h), raster{h, w, 3, std::vector<std::uint8_t>(static_cast<std::size_t>(w) * h * 3, 255)} {}

  void set(int x, int y, std::array<std::uint8_t, 3> c) {
    if (x < 0 || y < 0 || x >= width || y >= height) return;
    auto* p = &raster.data[(static_cast<std::size_t>(y) * width + x) * 3];
    p[0] = c[0];
    p[1] = c[1];
    p[2] = c[2];
  }

  void line(int x0, int y0, int x1, int y1, std::array<std::uint8_t, 3> c) {
    const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
      set(x0, y0, c);
      if (x0 == x1 && y0 == y1) break;
      const int e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  }

  void fill(int x0, int y0, int x1, int y1, std::array<std::uint8_t, 3> c) {
    for (int y = std::min(y0, y1); y <= std::max(y0, y1); ++y)
      for (int x = std::min(x0, x1); x <= std::max(x0, x1); ++x) set(x, y, c);
  }
};

inline std::array<std::uint8_t, 3> palette(std::size_t i) {
  static const std::array<std::array<std::uint8_t, 3>, 8> p{{{31, 119, 180}, {255, 127, 14}, {44, 160, 44},
                                                             {214, 39, 40}, {148, 103, 189}, {140, 86, 75},
                                                             {227, 119, 194}, {23, 190, 207}}};
  return p[i % p.size()];
}

/// One min-max normalized polyline per loss term across all epoch records.
inline void plot_loss_curves(const std::vector<json>& history, const fs::path& path, int w = 640, int h = 360) {
  std::map<std::string, std::vector<std::pair<int, double>>> series;
  int x = 0;
  for (const auto& r : history) {
    if (r.value("type", "") != "epoch") continue;
    for (const auto& [k, v] : r.at("losses").items())
      if (v.is_number() && std::isfinite(v.get<double>())) series[k].emplace_back(x, v.get<double>());
    ++x;
  }
  Canvas c(w, h);
  const int m = 20;
  c.line(m, h - m, w - m, h - m, {0, 0, 0});
  c.line(m, m, m, h - m, {0, 0, 0});
  const int span = std::max(1, x - 1);
  std::size_t idx = 0;
  for (const auto& [k, pts] : series) {
    double lo = pts.front().second, hi = lo;
    for (const auto& p : pts) {
      lo = std::min(lo, p.second);
      hi = std::max(hi, p.second);
    }
    const double range = hi > lo ? hi - lo : 1.0;
    auto px = [&](int i) { return m + (w - 2 * m) * i / span; };
    auto py = [&](double v) { return h - m - static_cast<int>(std::lround((h - 2 * m) * (v - lo) / range)); };
    const auto col = palette(idx++);
    for (std::size_t i = 1; i < pts.size(); ++i)
      c.line(px(pts[i - 1].first), py(pts[i - 1].second), px(pts[i].first), py(pts[i].second), col);
    if (pts.size() == 1) c.fill(px(pts[0].first) - 1, py(pts[0].second) - 1, px(pts[0].first) + 1, py(pts[0].second) + 1, col);
  }
  write_png(path, c.raster);
}

/// Per-class accuracy or cwIoU bars on a [0, 1] axis; classes without a value get a grey stub.
inline void plot_per_class(const MetricReport& r, const fs::path& path, int w = 480, int h = 320) {
  Canvas c(w, h);
  const int m = 20;
  c.line(m, h - m, w - m, h - m, {0, 0, 0});
  c.line(m, m, m, h - m, {0, 0, 0});
  const int n = std::max<int>(1, static_cast<int>(r.per_class.size()));
  const int slot = (w - 2 * m) / n;
  for (int l = 0; l < static_cast<int>(r.per_class.size()); ++l) {
    const int x0 = m + l * slot + slot / 6, x1 = m + (l + 1) * slot - slot / 6;
    if (!r.per_class[static_cast<std::size_t>(l)]) {
      c.fill(x0, h - m - 3, x1, h - m - 1, {180, 180, 180});
      continue;
    }
    const int top = h - m - static_cast<int>(std::lround((h - 2 * m) * *r.per_class[static_cast<std::size_t>(l)]));
    c.fill(x0, top, x1, h - m - 1, palette(static_cast<std::size_t>(l)));
  }
  write_png(path, c.raster);
}

}  // namespace madan
