#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "vstp/geometry.hpp"
#include "vstp/table.hpp"

namespace vstp {

// --- edit distances ---------------------------------------------------------

// Codepoint-level Levenshtein distance (UTF-8 inputs).
int levenshtein(std::string_view a, std::string_view b);

// levenshtein / max codepoint count; 0 when both empty.
double normalized_levenshtein(std::string_view a, std::string_view b);

// --- tree edit distance -----------------------------------------------------

// Ordered labeled tree; `content` is meaningful on "td" nodes only.
struct TedsTree {
  std::string tag;
  std::optional<std::string> content;
  std::vector<TedsTree> children;
};

int tree_size(const TedsTree& t);

// Minimal-cost ordered-tree edit distance (Zhang-Shasha).  Costs: insert and
// delete 1; substitution 0 for equal tags when non-td or contents equal, 1 for
// differing tags, and normalized Levenshtein of contents for td vs td.
double tree_edit_distance(const TedsTree& a, const TedsTree& b);

// 1 - distance / max(sizes), clamped into [0, 1].
double tree_similarity(const TedsTree& a, const TedsTree& b);

// Canonical tree of a table: table -> [thead] -> tbody -> tr* -> td*, with
// cell text as td content.  Throws HtmlParseError on unsupported input.
TedsTree teds_tree_from_html(const std::string& html);

TedsTree strip_content(TedsTree t);

// TEDS similarity of two HTML tables; S-TEDS when structure_only.  Either
// side failing to parse scores 0 with a diagnostic (model output may be
// arbitrary garbage).
double teds(const std::string& pred_html, const std::string& gt_html,
            bool structure_only = false,
            std::vector<std::string>* diagnostics = nullptr);

// --- key information extraction ---------------------------------------------

using Field = std::pair<std::string, std::string>;  // (class, value)

struct F1Scores {
  double precision = 1.0, recall = 1.0, fscore = 1.0;
};

// Multiset exact matching of (class, value) pairs.
F1Scores field_f1(std::span<const Field> pred, std::span<const Field> gt);

// root -> class nodes -> one td value leaf each, in the given field order.
TedsTree entity_tree(std::span<const Field> fields);

// max(0, 1 - TED(pred, gt) / TED(empty root, gt)); 1 when both are empty.
double nted_accuracy(const TedsTree& pred, const TedsTree& gt);

// --- end-to-end spotting ----------------------------------------------------

struct SpottingPrediction {
  Polygon16 polygon{};
  std::string text;
};

struct SpottingGroundTruth {
  Polygon16 polygon{};
  std::string text;
  bool ignore = false;
};

enum class LexiconMode { none, full, strong, weak, generic };

LexiconMode lexicon_mode_from_string(const std::string& s);  // throws
std::string to_string(LexiconMode mode);

struct SpottingConfig {
  LexiconMode mode = LexiconMode::none;
  std::vector<std::string> lexicon;     // word list for the active mode
  double iou_threshold = 0.5;
  std::optional<int> edit_cap;          // max correction distance; none = unbounded
};

struct SpottingCounts {
  int e2e_hits = 0;   // matched region and corrected text equal (case-insensitive)
  int det_hits = 0;   // matched region
  int n_pred = 0;     // predictions counted (ignored-GT matches excluded)
  int n_gt = 0;       // non-ignored ground truths
  SpottingCounts& operator+=(const SpottingCounts& o);
};

// One-to-one IoU matching at the configured threshold (ties: higher IoU, then
// lower GT index); ignored GTs and their matched predictions drop out.
SpottingCounts spotting_counts(std::span<const SpottingPrediction> preds,
                               std::span<const SpottingGroundTruth> gts,
                               const SpottingConfig& cfg);

// Nearest lexicon word by case-insensitive edit distance (ties: first listed);
// empty lexicon or over-cap distance keeps the original text.
std::string lexicon_correct(const std::string& text,
                            std::span<const std::string> lexicon,
                            std::optional<int> edit_cap = std::nullopt);

// --- reports -----------------------------------------------------------------

struct EvalReport {
  std::string task;
  std::string mode;  // lexicon mode or "teds"/"s-teds"
  double precision = 0.0, recall = 0.0, fscore = 0.0;
  int n = 0;  // sample count
  nlohmann::json to_json() const;
  std::string to_json_string() const;
};

EvalReport spotting_report(const SpottingCounts& counts, LexiconMode mode,
                           int n_samples);

// Single-sample convenience wrapper (n = 1).
EvalReport spotting_eval(std::span<const SpottingPrediction> preds,
                         std::span<const SpottingGroundTruth> gts,
                         const SpottingConfig& cfg);

}  // namespace vstp
