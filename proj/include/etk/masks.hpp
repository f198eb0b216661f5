#pragma once

// Binary face / lip bounding-box masks rasterized from 2D landmarks.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "etk/tensor.hpp"

namespace etk {

struct Point2 {
  double x = 0.0;  // column direction, [0,1]
  double y = 0.0;  // row direction, [0,1]
};

struct Landmarks {
  std::vector<Point2> points;
  std::vector<std::size_t> lip_indices;  // subset of points outlining the mouth
};

/// Cell masks over an h x w grid, row-major, values in {0,1}.
struct RegionMasks {
  std::size_t h = 0, w = 0;
  std::vector<double> lip;
  std::vector<double> face;

  std::size_t cells() const { return h * w; }

  /// (1 - M_lip) * M_face per cell: where expression injection is allowed.
  std::vector<double> expression_gate() const {
    std::vector<double> g(cells());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = (1.0 - lip[i]) * face[i];
    return g;
  }

  /// Per-cell values repeated over `channels` trailing entries: [cells, channels].
  static Tensor expand(const std::vector<double>& cell_values, std::size_t channels) {
    std::vector<double> v(cell_values.size() * channels);
    for (std::size_t i = 0; i < cell_values.size(); ++i)
      for (std::size_t c = 0; c < channels; ++c) v[i * channels + c] = cell_values[i];
    return Tensor({cell_values.size(), channels}, std::move(v));
  }
};

namespace detail {

struct CellBox {
  std::size_t r0, r1, c0, c1;  // inclusive
};

inline CellBox box_of(const std::vector<Point2>& pts, std::size_t h, std::size_t w) {
  double xmin = pts[0].x, xmax = pts[0].x, ymin = pts[0].y, ymax = pts[0].y;
  for (const auto& p : pts) {
    if (!(p.x >= 0.0 && p.x <= 1.0 && p.y >= 0.0 && p.y <= 1.0))
      throw std::invalid_argument("landmark outside the unit square");
    xmin = std::min(xmin, p.x);
    xmax = std::max(xmax, p.x);
    ymin = std::min(ymin, p.y);
    ymax = std::max(ymax, p.y);
  }
  if (!(xmax > xmin) || !(ymax > ymin)) throw std::invalid_argument("degenerate landmark box (zero area)");
  auto cell = [](double v, std::size_t n) {
    return std::min(n - 1, static_cast<std::size_t>(std::floor(v * static_cast<double>(n))));
  };
  return {cell(ymin, h), cell(ymax, h), cell(xmin, w), cell(xmax, w)};
}

}  // namespace detail

/// Face box = bounding box of all points, lip box = bounding box of the lip
/// subset; a point at coordinate v falls in cell floor(v * n) (clamped).
inline RegionMasks build_masks(const Landmarks& lm, std::size_t h, std::size_t w) {
  if (lm.points.size() < 4) throw std::invalid_argument("build_masks needs at least 4 landmarks");
  if (lm.lip_indices.size() < 2) throw std::invalid_argument("build_masks needs at least 2 lip landmarks");
  std::vector<Point2> lip_pts;
  for (auto i : lm.lip_indices) lip_pts.push_back(lm.points.at(i));
  const auto fb = detail::box_of(lm.points, h, w);
  const auto lb = detail::box_of(lip_pts, h, w);
  RegionMasks m{h, w, std::vector<double>(h * w, 0.0), std::vector<double>(h * w, 0.0)};
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      if (r >= fb.r0 && r <= fb.r1 && c >= fb.c0 && c <= fb.c1) m.face[r * w + c] = 1.0;
      if (r >= lb.r0 && r <= lb.r1 && c >= lb.c0 && c <= lb.c1) m.lip[r * w + c] = 1.0;
    }
  return m;
}

/// Fixed synthetic face geometry: face box over the central 75% of the grid,
/// lip box a two-row band in the lower-central face.
inline Landmarks default_landmarks() {
  Landmarks lm;
  lm.points = {{0.15, 0.15}, {0.80, 0.15}, {0.15, 0.80}, {0.80, 0.80},  // face outline
               {0.30, 0.65}, {0.70, 0.65}, {0.30, 0.80}, {0.70, 0.80},  // mouth
               {0.50, 0.72}};
  lm.lip_indices = {4, 5, 6, 7, 8};
  return lm;
}

}  // namespace etk
