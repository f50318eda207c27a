#pragma once

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "vstp/geometry.hpp"
#include "vstp/instance.hpp"
#include "vstp/prompting.hpp"
#include "vstp/vocab.hpp"

namespace vstp {

// The prompt that heads every spotting/KIE stage-1 sequence: 4 coordinate
// tokens for the spatial window, then 2 char tokens for the prefix range.
struct PromptSpec {
  SpatialWindow window;
  PrefixWindow prefix;
  static constexpr int kTokens = 6;
};

PromptSpec default_prompt(const QuantizerConfig& cfg);

// The prompt as token ids: [start_x, start_y, end_x, end_y, first, last].
// Exactly the head every spotting/KIE stage-1 builder emits.
std::vector<int> prompt_token_ids(const PromptSpec& prompt,
                                  const Vocabulary& vocab,
                                  const QuantizerConfig& cfg);

// A token-id sequence plus the number of leading context tokens (`k`).
// Decoding starts after position k-1; training does not penalize prompt
// positions.  BOS-led sequences (table, hiertext) have k = 1.
struct StructuredSequence {
  std::vector<int> ids;
  int k = 0;
  Task task = Task::spotting;
};

struct SequenceLimits {
  int structured_max = 1500;
  int region_len = 35;    // 2 prompt + 32 coords + EOS, fixed
  int content_max = 200;
};

// Thrown when a ground-truth sequence cannot fit the length budget.  `fits`
// reports how many whole instances (or groups/words) would have fit.
class SequenceTooLong : public std::runtime_error {
 public:
  SequenceTooLong(const std::string& msg, int fits_)
      : std::runtime_error(msg), fits(fits_) {}
  int fits;
};

// --- stage-1 builders ------------------------------------------------------
// Builders raster-order their input themselves, so any permutation of the
// same instances produces the same sequence.  Inputs are expected to be
// already filtered against the prompt windows (see filter_by_*).

StructuredSequence build_spotting_stage1(std::span<const TextInstance> instances,
                                         const PromptSpec& prompt,
                                         const Vocabulary& vocab,
                                         const QuantizerConfig& cfg,
                                         const SequenceLimits& limits = {});

// Entity groups: instances sharing (entity, line_id) form one group, members
// raster-ordered, groups ordered by their first member's raster position.
StructuredSequence build_kie_stage1(std::span<const TextInstance> instances,
                                    const PromptSpec& prompt,
                                    const Vocabulary& vocab,
                                    const QuantizerConfig& cfg,
                                    const SequenceLimits& limits = {});

// BOS + <PARA> ( <LINE> points </LINE> )+ </PARA> ... + EOS, orders defined
// by first-member raster positions.
StructuredSequence build_hier_stage1(std::span<const TextInstance> instances,
                                     const Vocabulary& vocab,
                                     const QuantizerConfig& cfg,
                                     const SequenceLimits& limits = {});

// --- stage-2 builders ------------------------------------------------------

// [cx, cy] + 16 vertex coordinate pairs + EOS; always exactly 35 tokens.
StructuredSequence build_region_sequence(const TextInstance& inst,
                                         const Vocabulary& vocab,
                                         const QuantizerConfig& cfg);

// [cx, cy] + char tokens + EOS.
StructuredSequence build_content_sequence(const TextInstance& inst,
                                          const Vocabulary& vocab,
                                          const QuantizerConfig& cfg,
                                          const SequenceLimits& limits = {});
StructuredSequence build_content_sequence_at(const Point& center,
                                             const std::string& text,
                                             const Vocabulary& vocab,
                                             const QuantizerConfig& cfg,
                                             const SequenceLimits& limits = {});

// --- stage-1 parsing -------------------------------------------------------

struct EntityGroup {
  std::string cls;
  std::vector<QuantizedPoint> points;
};

// para -> line -> word center points
using HierParagraphs = std::vector<std::vector<std::vector<QuantizedPoint>>>;

// Parse result for the task the sequence belongs to; the other fields stay
// empty.  Diagnostics record every recovery action taken on malformed input;
// well-formed builder output parses with none.
struct Stage1Parse {
  std::vector<QuantizedPoint> points;  // spotting
  std::vector<EntityGroup> groups;     // kie
  HierParagraphs paragraphs;           // hiertext
  std::vector<std::string> diagnostics;
};

Stage1Parse parse_stage1(const StructuredSequence& seq, const Vocabulary& vocab);

// Decoded stage-2 outputs.
struct RegionParse {
  Polygon16 polygon{};
  bool complete = false;  // 16 full vertex pairs before EOS
  std::vector<std::string> diagnostics;
};
RegionParse parse_region_sequence(std::span<const int> ids, const Vocabulary& vocab,
                                  const QuantizerConfig& cfg);

struct ContentParse {
  std::string text;
  std::vector<std::string> diagnostics;
};
ContentParse parse_content_sequence(std::span<const int> ids,
                                    const Vocabulary& vocab);

// Ground-truth (class, value) fields for a KIE document: groups follow
// build_kie_stage1's order, member texts joined by single spaces.
std::vector<std::pair<std::string, std::string>> entity_fields(
    std::span<const TextInstance> instances, const QuantizerConfig& cfg);

// --- training target -------------------------------------------------------

// Teacher-forcing view of a sequence: inputs = ids[0..N), targets =
// ids[1..N+1), weights 4.0 on structural/entity tags and 1.0 elsewhere
// (0.0 on <PAD>).  `k` is the first target position that contributes to the
// loss; earlier positions predict prompt tokens.
struct TrainingTarget {
  std::vector<int> inputs;
  std::vector<int> targets;
  std::vector<double> weights;
  int k = 0;
};

TrainingTarget make_training_target(const StructuredSequence& seq,
                                    const Vocabulary& vocab);

}  // namespace vstp
