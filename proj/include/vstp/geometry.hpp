#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

namespace vstp {

struct QuantizerConfig {
  int n_bins = 1000;
};

struct Point {
  double x = 0.0;
  double y = 0.0;
};

// Closed 16-gon; vertices in drawing order, not repeated at the end.
using Polygon16 = std::array<Point, 16>;

struct QuantizedPoint {
  int x = 0;
  int y = 0;
  bool operator==(const QuantizedPoint&) const = default;
  auto operator<=>(const QuantizedPoint&) const = default;
};

// Maps a normalized coordinate in [0, 1] onto one of n_bins integer tokens.
// Values outside [0, 1] are rejected; 1.0 lands in the last bin.
int quantize_coord(double x, const QuantizerConfig& cfg);

// Inverse map: token -> center of its bin.
double dequantize_coord(int token, const QuantizerConfig& cfg);

QuantizedPoint quantize_point(const Point& p, const QuantizerConfig& cfg);
Point dequantize_point(const QuantizedPoint& q, const QuantizerConfig& cfg);

// Arithmetic mean of the 16 vertices.
Point polygon_center(const Polygon16& poly);

// Axis-aligned box as a 16-gon: 4 evenly spaced vertices per side, clockwise
// from the top-left corner.  Corners sit at indices 0, 4, 8, 12.
Polygon16 box_polygon(double x0, double y0, double x1, double y1);

// Indices of `centers` in raster order: quantized y, then quantized x, then
// original index.  The original index makes the order total, so equal keys
// keep their input order.
std::vector<std::size_t> raster_order(std::span<const Point> centers,
                                      const QuantizerConfig& cfg);

// Area-of-overlap over area-of-union, computed by even-odd scanline
// rasterization on a fixed 1000x1000 grid over the unit square.  Exact for
// polygons whose edges land on pixel boundaries; approximate otherwise, which
// is fine for matching at IoU thresholds.
double polygon_iou(const Polygon16& a, const Polygon16& b);

}  // namespace vstp
