#include <doctest.h>

#include <cmath>
#include <vector>

#include "vstp/geometry.hpp"
#include "vstp/rng.hpp"

using namespace vstp;

TEST_CASE("quantize_coord pinned values") {
  QuantizerConfig q;  // 1000 bins
  CHECK(quantize_coord(0.0, q) == 0);
  CHECK(quantize_coord(1.0, q) == 999);
  CHECK(quantize_coord(0.9999, q) == 999);
  CHECK(quantize_coord(0.3335, q) == 333);
  CHECK(quantize_coord(0.001, q) == 1);
  CHECK(quantize_coord(0.0009999, q) == 0);
}

TEST_CASE("dequantize_coord returns bin centers") {
  QuantizerConfig q;
  CHECK(dequantize_coord(0, q) == doctest::Approx(0.0005).epsilon(1e-12));
  CHECK(dequantize_coord(999, q) == doctest::Approx(0.9995).epsilon(1e-12));
  CHECK(dequantize_coord(333, q) == doctest::Approx(0.3335).epsilon(1e-12));
}

TEST_CASE("quantizer rejects out-of-range input") {
  QuantizerConfig q;
  CHECK_THROWS_AS(quantize_coord(-0.001, q), std::domain_error);
  CHECK_THROWS_AS(quantize_coord(1.001, q), std::domain_error);
  CHECK_THROWS_AS(quantize_coord(std::nan(""), q), std::domain_error);
  CHECK_THROWS_AS(dequantize_coord(-1, q), std::domain_error);
  CHECK_THROWS_AS(dequantize_coord(1000, q), std::domain_error);
  CHECK_THROWS_AS(quantize_coord(0.5, QuantizerConfig{1}), std::invalid_argument);
}

TEST_CASE("quantizer roundtrip error bounded by half a bin") {
  QuantizerConfig q;
  Rng rng(7);
  for (int i = 0; i < 20000; ++i) {
    const double x = rng.uniform();
    const double back = dequantize_coord(quantize_coord(x, q), q);
    CHECK(std::abs(back - x) <= 0.5 / q.n_bins + 1e-12);
  }
  // Also in a non-default bin count.
  QuantizerConfig q64{64};
  for (int i = 0; i < 5000; ++i) {
    const double x = rng.uniform();
    const double back = dequantize_coord(quantize_coord(x, q64), q64);
    CHECK(std::abs(back - x) <= 0.5 / 64 + 1e-12);
  }
}

TEST_CASE("quantize_coord is monotone") {
  QuantizerConfig q;
  Rng rng(11);
  std::vector<double> xs;
  for (int i = 0; i < 5000; ++i) xs.push_back(rng.uniform());
  std::sort(xs.begin(), xs.end());
  int prev = 0;
  for (double x : xs) {
    const int t = quantize_coord(x, q);
    CHECK(t >= prev);
    prev = t;
  }
}

TEST_CASE("box_polygon layout and center") {
  const Polygon16 poly = box_polygon(0.2, 0.4, 0.6, 0.5);
  CHECK(poly[0].x == doctest::Approx(0.2));
  CHECK(poly[0].y == doctest::Approx(0.4));
  CHECK(poly[4].x == doctest::Approx(0.6));
  CHECK(poly[4].y == doctest::Approx(0.4));
  CHECK(poly[8].x == doctest::Approx(0.6));
  CHECK(poly[8].y == doctest::Approx(0.5));
  CHECK(poly[12].x == doctest::Approx(0.2));
  CHECK(poly[12].y == doctest::Approx(0.5));
  const Point c = polygon_center(poly);
  CHECK(c.x == doctest::Approx(0.4));
  CHECK(c.y == doctest::Approx(0.45));
  CHECK_THROWS_AS(box_polygon(0.5, 0.0, 0.4, 1.0), std::invalid_argument);
}

TEST_CASE("raster_order sorts by quantized y then x then index") {
  QuantizerConfig q;
  const std::vector<Point> centers = {
      {0.91, 0.10}, {0.12, 0.10}, {0.50, 0.30}};
  const auto order = raster_order(centers, q);
  CHECK(order == std::vector<std::size_t>{1, 0, 2});

  // Ties within a bin resolve by original index.
  const std::vector<Point> ties = {{0.5001, 0.5001}, {0.5002, 0.5003}};
  CHECK(raster_order(ties, q) == std::vector<std::size_t>{0, 1});

  // Sub-bin y differences do not reorder; x decides inside a row.
  const std::vector<Point> row = {{0.9, 0.2001}, {0.1, 0.2009}};
  CHECK(raster_order(row, q) == std::vector<std::size_t>{1, 0});
}

TEST_CASE("raster_order is permutation invariant") {
  QuantizerConfig q;
  Rng rng(23);
  std::vector<Point> centers;
  for (int i = 0; i < 40; ++i) centers.push_back({rng.uniform(), rng.uniform()});
  const auto base = raster_order(centers, q);
  std::vector<Point> sorted;
  for (auto i : base) sorted.push_back(centers[i]);
  // The raster-ordered list itself is a fixpoint.
  const auto again = raster_order(sorted, q);
  for (std::size_t i = 0; i < again.size(); ++i) CHECK(again[i] == i);
}

TEST_CASE("polygon_iou pinned overlap value") {
  const Polygon16 a = box_polygon(0.0, 0.0, 0.5, 1.0);
  const Polygon16 b = box_polygon(0.25, 0.0, 0.75, 1.0);
  // Overlap 0.25 over union 0.75; edges land on bin boundaries so the
  // scanline result is exact.
  CHECK(polygon_iou(a, b) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("polygon_iou basic properties") {
  const Polygon16 a = box_polygon(0.1, 0.2, 0.4, 0.6);
  CHECK(polygon_iou(a, a) == doctest::Approx(1.0));
  const Polygon16 far = box_polygon(0.6, 0.7, 0.9, 0.9);
  CHECK(polygon_iou(a, far) == 0.0);
  Polygon16 degenerate{};
  degenerate.fill({0.5, 0.5});
  CHECK(polygon_iou(degenerate, degenerate) == 0.0);
  CHECK(polygon_iou(a, degenerate) == 0.0);
  // Symmetry.
  const Polygon16 c = box_polygon(0.2, 0.3, 0.7, 0.8);
  CHECK(polygon_iou(a, c) == doctest::Approx(polygon_iou(c, a)));
}

TEST_CASE("polygon_iou handles self-intersecting outline") {
  // Bowtie path (0,0) -> (1,0) -> (0,1) -> (1,1), four vertices per leg.
  Polygon16 bow{};
  const Point corners[4] = {{0, 0}, {1, 0}, {0, 1}, {1, 1}};
  for (int side = 0; side < 4; ++side) {
    const Point& a = corners[side];
    const Point& b = corners[(side + 1) % 4];
    for (int i = 0; i < 4; ++i) {
      const double t = i / 4.0;
      bow[side * 4 + i] = {a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)};
    }
  }
  const Polygon16 full = box_polygon(0.0, 0.0, 1.0, 1.0);
  // Even-odd fill covers half the square (two opposing lobes).
  CHECK(polygon_iou(bow, full) == doctest::Approx(0.5).epsilon(0.01));
}
