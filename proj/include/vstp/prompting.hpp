#pragma once

#include <span>
#include <vector>

#include "vstp/geometry.hpp"
#include "vstp/instance.hpp"
#include "vstp/rng.hpp"

namespace vstp {

class Rng;

// Inclusive rectangle in quantized token space: an instance belongs to the
// window when its quantized center satisfies start <= c <= end on both axes.
struct SpatialWindow {
  int start_x = 0, start_y = 0, end_x = 0, end_y = 0;
  bool operator==(const SpatialWindow&) const = default;
  auto operator<=>(const SpatialWindow&) const = default;
};

bool window_valid(const SpatialWindow& w, const QuantizerConfig& cfg);

// The whole page: [0, 0, n_bins-1, n_bins-1].
SpatialWindow default_window(const QuantizerConfig& cfg);

// The fixed grid layouts.  Cell extent is min(n_bins/num, n_bins-1) per axis
// and the last cell is clamped to the page, so layouts with num=1 on an axis
// span [0, n_bins-1].  With the default layouts this yields 35 windows.
std::vector<SpatialWindow> enumerate_fixed_windows(const QuantizerConfig& cfg);

// Deterministic core of the random mode: given raw draws, clamp the ends to
// the page.  Exposed so tests can pin exact values.
SpatialWindow random_mode_window(int start_x, int start_y, int rect_w,
                                 int rect_h, const QuantizerConfig& cfg);

enum class SpatialMode { kDefault, kFixed, kRandom };

// Side channel describing how a window was drawn; rect_w/rect_h are the
// pre-clamp extents (random mode only).
struct SpatialDraw {
  SpatialMode mode = SpatialMode::kDefault;
  int rect_w = 0, rect_h = 0;
};

// Mixture sampler: default window w.p. 0.4, one of the fixed windows w.p.
// 0.3 (uniform over the enumeration), random rectangle otherwise.
SpatialWindow sample_spatial_window(Rng& rng, const QuantizerConfig& cfg,
                                    SpatialDraw* draw = nullptr);

// Inclusive character range in the 94-char alphabet ('!'..'~').  A text
// belongs to the window when its first character falls inside.
struct PrefixWindow {
  char first = '!';
  char last = '~';
  bool operator==(const PrefixWindow&) const = default;
};

PrefixWindow full_prefix_window();

// Full window w.p. 0.4, otherwise two uniform alphabet positions, low/high
// ordered.
PrefixWindow sample_prefix_window(Rng& rng);

std::vector<TextInstance> filter_by_spatial(std::span<const TextInstance> in,
                                            const SpatialWindow& w,
                                            const QuantizerConfig& cfg);

std::vector<TextInstance> filter_by_prefix(std::span<const TextInstance> in,
                                           const PrefixWindow& w);

}  // namespace vstp
