#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "vstp/instance.hpp"
#include "vstp/rng.hpp"
#include "vstp/table.hpp"
#include "vstp/vocab.hpp"

namespace vstp {

// Deterministic synthetic corpora: word boxes snapped to an integer cell grid
// so every placement is disjoint and every center falls on a distinct
// quantized bin.  Stands in for real datasets.
struct SynthConfig {
  std::uint64_t seed = 1;
  int grid_size = 32;  // feature-grid cells per side
  int min_instances = 3, max_instances = 8;
  int min_word_len = 1, max_word_len = 6;
  int min_rows = 1, max_rows = 4;  // table shape
  int min_cols = 1, max_cols = 4;
  int max_gen_span = 3;         // largest generated row/colspan
  double span_prob = 0.25;      // chance a table cell tries to span
  double empty_cell_prob = 0.3; // chance a table cell stays empty
  EntitySchema schema = default_entity_schema();
  std::vector<Task> task_mix = {Task::spotting, Task::kie, Task::table,
                                Task::hiertext};

  static EntitySchema default_entity_schema();
};

void validate_config(const SynthConfig& cfg);  // throws std::invalid_argument

struct Sample {
  std::string id;
  Task task = Task::spotting;
  int width = 32, height = 32;  // grid cells (coordinates stay normalized)
  std::vector<TextInstance> instances;
  std::optional<TableGrid> table;  // table task only
};

Sample generate_sample(Rng& rng, const SynthConfig& cfg, Task task);

// n samples with ids "<task>-<i>"; deterministic in (cfg.seed, task, n).
std::vector<Sample> generate_corpus(const SynthConfig& cfg, Task task, int n);

// n samples cycling cfg.task_mix.
std::vector<Sample> generate_mixed_corpus(const SynthConfig& cfg, int n);

// --- feature grid -------------------------------------------------------------

// Channel layout: char-signature features, then the instance box extent, then
// two global positional channels (the only ones non-zero on empty input).
inline constexpr int kCharFeatureChannels = 24;
inline constexpr int kExtentChannels = 2;
inline constexpr int kPositionChannels = 2;
inline constexpr int kGridChannels =
    kCharFeatureChannels + kExtentChannels + kPositionChannels;

struct ImageGrid {
  int height = 0, width = 0, channels = 0;
  std::vector<float> values;  // row-major y, x, c

  static ImageGrid zeros(int h, int w, int c);
  float& at(int y, int x, int c) {
    return values[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  float at(int y, int x, int c) const {
    return values[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
};

// Fixed pseudo-random embedding per character (deterministic across runs).
std::array<float, kCharFeatureChannels> char_signature(char32_t cp);

// Stamps each instance's per-character signature and box extent onto every
// grid cell whose center its box covers; adds global positional channels.
ImageGrid render_feature_grid(const Sample& sample, const SynthConfig& cfg);

// --- JSONL I/O -----------------------------------------------------------------

// One JSON object per line: {"id","task","width","height","instances":[...],
// "table": {...}?}.  read(write(x)) == x; malformed lines raise with the line
// number, missing keys with the key name.
nlohmann::json instance_to_json(const TextInstance& t);
TextInstance instance_from_json(const nlohmann::json& j);

void write_jsonl(const std::string& path, std::span<const Sample> samples);
std::vector<Sample> read_jsonl(const std::string& path);

std::string sample_to_json_line(const Sample& s);
Sample sample_from_json_line(const std::string& line);

}  // namespace vstp
