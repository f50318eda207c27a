#include "vstp/geometry.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace vstp {

namespace {

void check_config(const QuantizerConfig& cfg) {
  if (cfg.n_bins < 2) {
    throw std::invalid_argument("quantizer: n_bins must be >= 2, got " +
                                std::to_string(cfg.n_bins));
  }
}

}  // namespace

int quantize_coord(double x, const QuantizerConfig& cfg) {
  check_config(cfg);
  if (!(x >= 0.0 && x <= 1.0)) {
    throw std::domain_error("quantize_coord: coordinate " + std::to_string(x) +
                            " outside [0, 1]");
  }
  const int t = static_cast<int>(std::floor(x * cfg.n_bins));
  return std::clamp(t, 0, cfg.n_bins - 1);
}

double dequantize_coord(int token, const QuantizerConfig& cfg) {
  check_config(cfg);
  if (token < 0 || token >= cfg.n_bins) {
    throw std::domain_error("dequantize_coord: token " + std::to_string(token) +
                            " outside [0, " + std::to_string(cfg.n_bins - 1) +
                            "]");
  }
  return (token + 0.5) / cfg.n_bins;
}

QuantizedPoint quantize_point(const Point& p, const QuantizerConfig& cfg) {
  return {quantize_coord(p.x, cfg), quantize_coord(p.y, cfg)};
}

Point dequantize_point(const QuantizedPoint& q, const QuantizerConfig& cfg) {
  return {dequantize_coord(q.x, cfg), dequantize_coord(q.y, cfg)};
}

Point polygon_center(const Polygon16& poly) {
  double sx = 0.0, sy = 0.0;
  for (const Point& p : poly) {
    sx += p.x;
    sy += p.y;
  }
  return {sx / 16.0, sy / 16.0};
}

Polygon16 box_polygon(double x0, double y0, double x1, double y1) {
  if (!(x0 <= x1 && y0 <= y1)) {
    throw std::invalid_argument("box_polygon: corners not ordered");
  }
  Polygon16 poly{};
  const double w = x1 - x0;
  const double h = y1 - y0;
  for (int i = 0; i < 4; ++i) {
    const double t = i / 4.0;
    poly[i] = {x0 + t * w, y0};            // top edge, left -> right
    poly[4 + i] = {x1, y0 + t * h};        // right edge, top -> bottom
    poly[8 + i] = {x1 - t * w, y1};        // bottom edge, right -> left
    poly[12 + i] = {x0, y1 - t * h};       // left edge, bottom -> top
  }
  return poly;
}

std::vector<std::size_t> raster_order(std::span<const Point> centers,
                                      const QuantizerConfig& cfg) {
  struct Key {
    int y, x;
    std::size_t i;
  };
  std::vector<Key> keys;
  keys.reserve(centers.size());
  for (std::size_t i = 0; i < centers.size(); ++i) {
    const QuantizedPoint q = quantize_point(centers[i], cfg);
    keys.push_back({q.y, q.x, i});
  }
  std::sort(keys.begin(), keys.end(), [](const Key& a, const Key& b) {
    if (a.y != b.y) return a.y < b.y;
    if (a.x != b.x) return a.x < b.x;
    return a.i < b.i;
  });
  std::vector<std::size_t> order;
  order.reserve(keys.size());
  for (const Key& k : keys) order.push_back(k.i);
  return order;
}

namespace {

constexpr int kRaster = 1000;
constexpr int kWordsPerRow = (kRaster + 63) / 64;

// Even-odd fill: a pixel is inside if its center is crossed by an odd number
// of edges to its left.  Edges are treated as half-open in y so a vertex
// shared by two edges contributes exactly one crossing.
std::vector<std::uint64_t> rasterize(const Polygon16& poly) {
  std::vector<std::uint64_t> grid(
      static_cast<std::size_t>(kRaster) * kWordsPerRow, 0);
  std::vector<double> xs;
  xs.reserve(16);
  for (int row = 0; row < kRaster; ++row) {
    const double y = (row + 0.5) / kRaster;
    xs.clear();
    for (int i = 0; i < 16; ++i) {
      const Point& a = poly[i];
      const Point& b = poly[(i + 1) % 16];
      if (a.y == b.y) continue;
      const bool inside = (y >= a.y && y < b.y) || (y >= b.y && y < a.y);
      if (!inside) continue;
      xs.push_back(a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y));
    }
    std::sort(xs.begin(), xs.end());
    std::uint64_t* row_bits = grid.data() + static_cast<std::size_t>(row) * kWordsPerRow;
    for (std::size_t k = 0; k + 1 < xs.size(); k += 2) {
      // Pixels whose centers fall in [xs[k], xs[k+1]).
      int c0 = static_cast<int>(std::ceil(xs[k] * kRaster - 0.5));
      int c1 = static_cast<int>(std::ceil(xs[k + 1] * kRaster - 0.5)) - 1;
      c0 = std::max(c0, 0);
      c1 = std::min(c1, kRaster - 1);
      for (int c = c0; c <= c1; ++c) {
        row_bits[c >> 6] |= std::uint64_t{1} << (c & 63);
      }
    }
  }
  return grid;
}

}  // namespace

double polygon_iou(const Polygon16& a, const Polygon16& b) {
  const std::vector<std::uint64_t> ga = rasterize(a);
  const std::vector<std::uint64_t> gb = rasterize(b);
  std::int64_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < ga.size(); ++i) {
    inter += std::popcount(ga[i] & gb[i]);
    uni += std::popcount(ga[i] | gb[i]);
  }
  if (uni == 0) return 0.0;  // both polygons degenerate
  return static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace vstp
