#include "vstp/prompting.hpp"

#include <algorithm>
#include <stdexcept>
#include <utility>

#include "vstp/rng.hpp"
#include "vstp/vocab.hpp"

namespace vstp {

bool window_valid(const SpatialWindow& w, const QuantizerConfig& cfg) {
  const int hi = cfg.n_bins - 1;
  return 0 <= w.start_x && w.start_x <= w.end_x && w.end_x <= hi &&
         0 <= w.start_y && w.start_y <= w.end_y && w.end_y <= hi;
}

SpatialWindow default_window(const QuantizerConfig& cfg) {
  return {0, 0, cfg.n_bins - 1, cfg.n_bins - 1};
}

std::vector<SpatialWindow> enumerate_fixed_windows(const QuantizerConfig& cfg) {
  static constexpr int kNumXs[] = {3, 3, 1, 3, 2, 2, 2, 1};
  static constexpr int kNumYs[] = {3, 1, 3, 2, 3, 2, 1, 2};
  const int n = cfg.n_bins;
  std::vector<SpatialWindow> out;
  for (int layout = 0; layout < 8; ++layout) {
    const int nx = kNumXs[layout];
    const int ny = kNumYs[layout];
    const int inter_x = std::min(n / nx, n - 1);
    const int inter_y = std::min(n / ny, n - 1);
    for (int i = 0; i < nx; ++i) {
      for (int j = 0; j < ny; ++j) {
        const int sx = i * inter_x;
        const int sy = j * inter_y;
        out.push_back({sx, sy, std::min(sx + inter_x, n - 1),
                       std::min(sy + inter_y, n - 1)});
      }
    }
  }
  return out;
}

SpatialWindow random_mode_window(int start_x, int start_y, int rect_w,
                                 int rect_h, const QuantizerConfig& cfg) {
  const int hi = cfg.n_bins - 1;
  return {start_x, start_y, std::min(start_x + rect_w, hi),
          std::min(start_y + rect_h, hi)};
}

SpatialWindow sample_spatial_window(Rng& rng, const QuantizerConfig& cfg,
                                    SpatialDraw* draw) {
  const double u = rng.uniform();
  if (u < 0.4) {
    if (draw) *draw = {SpatialMode::kDefault, 0, 0};
    return default_window(cfg);
  }
  if (u < 0.7) {
    const std::vector<SpatialWindow> windows = enumerate_fixed_windows(cfg);
    const auto pick = rng.uniform_int(0, static_cast<std::int64_t>(windows.size()) - 1);
    if (draw) *draw = {SpatialMode::kFixed, 0, 0};
    return windows[static_cast<std::size_t>(pick)];
  }
  const int inter = cfg.n_bins / 3;
  const int start_x = static_cast<int>(rng.uniform_int(0, 2 * inter));
  const int start_y = static_cast<int>(rng.uniform_int(0, 2 * inter));
  const int rect_w = static_cast<int>(rng.uniform_int(inter, cfg.n_bins - 1));
  const int rect_h = static_cast<int>(rng.uniform_int(inter, cfg.n_bins - 1));
  if (draw) *draw = {SpatialMode::kRandom, rect_w, rect_h};
  return random_mode_window(start_x, start_y, rect_w, rect_h, cfg);
}

PrefixWindow full_prefix_window() { return {'!', '~'}; }

PrefixWindow sample_prefix_window(Rng& rng) {
  const double u = rng.uniform();
  if (u < 0.4) return full_prefix_window();
  const int a = static_cast<int>(rng.uniform_int(0, Vocabulary::kNumChars - 1));
  const int b = static_cast<int>(rng.uniform_int(0, Vocabulary::kNumChars - 1));
  return {static_cast<char>('!' + std::min(a, b)),
          static_cast<char>('!' + std::max(a, b))};
}

std::vector<TextInstance> filter_by_spatial(std::span<const TextInstance> in,
                                            const SpatialWindow& w,
                                            const QuantizerConfig& cfg) {
  if (!window_valid(w, cfg)) {
    throw std::invalid_argument("filter_by_spatial: malformed window");
  }
  std::vector<TextInstance> out;
  for (const TextInstance& inst : in) {
    const QuantizedPoint q = quantize_point(instance_center(inst), cfg);
    if (q.x >= w.start_x && q.x <= w.end_x && q.y >= w.start_y &&
        q.y <= w.end_y) {
      out.push_back(inst);
    }
  }
  return out;
}

std::vector<TextInstance> filter_by_prefix(std::span<const TextInstance> in,
                                           const PrefixWindow& w) {
  if (w.first > w.last || w.first < '!' || w.last > '~') {
    throw std::invalid_argument("filter_by_prefix: malformed window");
  }
  std::vector<TextInstance> out;
  for (const TextInstance& inst : in) {
    const std::vector<char32_t> cps = utf8_codepoints(inst.text);
    if (cps.empty()) continue;
    const char32_t c = cps.front();
    if (c >= static_cast<char32_t>(w.first) &&
        c <= static_cast<char32_t>(w.last)) {
      out.push_back(inst);
    }
  }
  return out;
}

}  // namespace vstp
