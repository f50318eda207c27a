#include "vstp/codec.hpp"

#include <algorithm>
#include <map>
#include <string>

namespace vstp {

Point instance_center(const TextInstance& inst) {
  return polygon_center(inst.polygon);
}

std::vector<std::size_t> raster_order(std::span<const TextInstance> instances,
                                      const QuantizerConfig& cfg) {
  std::vector<Point> centers;
  centers.reserve(instances.size());
  for (const TextInstance& inst : instances) centers.push_back(instance_center(inst));
  return raster_order(std::span<const Point>(centers), cfg);
}

PromptSpec default_prompt(const QuantizerConfig& cfg) {
  return {default_window(cfg), full_prefix_window()};
}

std::vector<int> prompt_token_ids(const PromptSpec& prompt,
                                  const Vocabulary& vocab,
                                  const QuantizerConfig& cfg) {
  if (!window_valid(prompt.window, cfg)) {
    throw std::invalid_argument("prompt: malformed spatial window");
  }
  if (prompt.prefix.first > prompt.prefix.last || prompt.prefix.first < '!' ||
      prompt.prefix.last > '~') {
    throw std::invalid_argument("prompt: malformed prefix window");
  }
  return {vocab.coord_id(prompt.window.start_x),
          vocab.coord_id(prompt.window.start_y),
          vocab.coord_id(prompt.window.end_x),
          vocab.coord_id(prompt.window.end_y),
          vocab.char_id(static_cast<char32_t>(prompt.prefix.first)),
          vocab.char_id(static_cast<char32_t>(prompt.prefix.last))};
}

namespace {

void append_prompt(std::vector<int>& ids, const PromptSpec& prompt,
                   const Vocabulary& vocab, const QuantizerConfig& cfg) {
  const std::vector<int> head = prompt_token_ids(prompt, vocab, cfg);
  ids.insert(ids.end(), head.begin(), head.end());
}

void append_point(std::vector<int>& ids, const QuantizedPoint& q,
                  const Vocabulary& vocab) {
  ids.push_back(vocab.coord_id(q.x));
  ids.push_back(vocab.coord_id(q.y));
}

QuantizedPoint center_token(const TextInstance& inst, const QuantizerConfig& cfg) {
  return quantize_point(instance_center(inst), cfg);
}

}  // namespace

StructuredSequence build_spotting_stage1(std::span<const TextInstance> instances,
                                         const PromptSpec& prompt,
                                         const Vocabulary& vocab,
                                         const QuantizerConfig& cfg,
                                         const SequenceLimits& limits) {
  if (vocab.task() != Task::spotting) {
    throw std::invalid_argument("build_spotting_stage1: vocabulary task is " +
                                to_string(vocab.task()));
  }
  const int need = PromptSpec::kTokens + 2 * static_cast<int>(instances.size()) + 1;
  if (need > limits.structured_max) {
    const int fits = (limits.structured_max - PromptSpec::kTokens - 1) / 2;
    throw SequenceTooLong(
        "spotting sequence of " + std::to_string(instances.size()) +
            " instances needs " + std::to_string(need) + " tokens (max " +
            std::to_string(limits.structured_max) + "); " +
            std::to_string(fits) + " instances fit",
        fits);
  }
  StructuredSequence seq;
  seq.task = Task::spotting;
  seq.k = PromptSpec::kTokens;
  append_prompt(seq.ids, prompt, vocab, cfg);
  for (std::size_t i : raster_order(instances, cfg)) {
    append_point(seq.ids, center_token(instances[i], cfg), vocab);
  }
  seq.ids.push_back(vocab.eos());
  return seq;
}

StructuredSequence build_kie_stage1(std::span<const TextInstance> instances,
                                    const PromptSpec& prompt,
                                    const Vocabulary& vocab,
                                    const QuantizerConfig& cfg,
                                    const SequenceLimits& limits) {
  if (vocab.task() != Task::kie) {
    throw std::invalid_argument("build_kie_stage1: vocabulary task is " +
                                to_string(vocab.task()));
  }
  // Group by (entity class, group id); members in raster order, groups by
  // first-member raster position.
  using Key = std::pair<std::string, int>;
  std::map<Key, std::vector<std::size_t>> members;
  std::vector<Key> group_order;
  for (std::size_t i : raster_order(instances, cfg)) {
    const TextInstance& inst = instances[i];
    if (!inst.entity) {
      throw std::invalid_argument("kie instance '" + inst.text +
                                  "' is missing its entity label");
    }
    if (!vocab.structural_id(tok::entity_open(*inst.entity))) {
      throw std::invalid_argument("entity class '" + *inst.entity +
                                  "' is not in the vocabulary schema");
    }
    const Key key{*inst.entity, inst.line_id.value_or(-1)};
    auto [it, inserted] = members.try_emplace(key);
    if (inserted) group_order.push_back(key);
    it->second.push_back(i);
  }

  StructuredSequence seq;
  seq.task = Task::kie;
  seq.k = PromptSpec::kTokens;
  append_prompt(seq.ids, prompt, vocab, cfg);
  int whole_groups_fit = 0;
  bool overflow = false;
  for (const Key& key : group_order) {
    const auto open = vocab.structural_id(tok::entity_open(key.first));
    const auto close = vocab.structural_id(tok::entity_close(key.first));
    const std::size_t need_after =
        seq.ids.size() + 2 + 2 * members[key].size() + 1;  // + group + EOS
    if (need_after > static_cast<std::size_t>(limits.structured_max)) {
      overflow = true;
      break;
    }
    seq.ids.push_back(*open);
    for (std::size_t i : members[key]) {
      append_point(seq.ids, center_token(instances[i], cfg), vocab);
    }
    seq.ids.push_back(*close);
    ++whole_groups_fit;
  }
  if (overflow) {
    throw SequenceTooLong(
        "kie sequence exceeds " + std::to_string(limits.structured_max) +
            " tokens; " + std::to_string(whole_groups_fit) + " whole groups fit",
        whole_groups_fit);
  }
  seq.ids.push_back(vocab.eos());
  return seq;
}

StructuredSequence build_hier_stage1(std::span<const TextInstance> instances,
                                     const Vocabulary& vocab,
                                     const QuantizerConfig& cfg,
                                     const SequenceLimits& limits) {
  if (vocab.task() != Task::hiertext) {
    throw std::invalid_argument("build_hier_stage1: vocabulary task is " +
                                to_string(vocab.task()));
  }
  std::map<int, std::vector<std::size_t>> lines;       // line_id -> word idxs
  std::map<int, int> line_para;                        // line_id -> para_id
  std::map<int, std::vector<int>> para_lines;          // para_id -> line ids
  std::vector<int> para_order, line_order;
  for (std::size_t i : raster_order(instances, cfg)) {
    const TextInstance& inst = instances[i];
    if (!inst.line_id || !inst.para_id) {
      throw std::invalid_argument("hier instance '" + inst.text +
                                  "' is missing line/para ids");
    }
    auto [it, inserted] = line_para.try_emplace(*inst.line_id, *inst.para_id);
    if (!inserted && it->second != *inst.para_id) {
      throw std::invalid_argument("line " + std::to_string(*inst.line_id) +
                                  " spans two paragraphs");
    }
    if (inserted) line_order.push_back(*inst.line_id);
    lines[*inst.line_id].push_back(i);
    if (std::find(para_order.begin(), para_order.end(), *inst.para_id) ==
        para_order.end()) {
      para_order.push_back(*inst.para_id);
    }
  }
  for (int line_id : line_order) para_lines[line_para[line_id]].push_back(line_id);

  StructuredSequence seq;
  seq.task = Task::hiertext;
  seq.k = 1;
  seq.ids.push_back(vocab.bos());
  const int t_po = *vocab.structural_id(tok::para_open);
  const int t_pc = *vocab.structural_id(tok::para_close);
  const int t_lo = *vocab.structural_id(tok::line_open);
  const int t_lc = *vocab.structural_id(tok::line_close);
  int words_fit = 0;
  for (int para_id : para_order) {
    seq.ids.push_back(t_po);
    for (int line_id : para_lines[para_id]) {
      seq.ids.push_back(t_lo);
      for (std::size_t i : lines[line_id]) {
        append_point(seq.ids, center_token(instances[i], cfg), vocab);
        ++words_fit;
      }
      seq.ids.push_back(t_lc);
    }
    seq.ids.push_back(t_pc);
    // + closing tokens yet to come is at most 1 (EOS); check as we go.
    if (seq.ids.size() + 1 > static_cast<std::size_t>(limits.structured_max)) {
      throw SequenceTooLong("hier sequence exceeds " +
                                std::to_string(limits.structured_max) +
                                " tokens",
                            words_fit);
    }
  }
  seq.ids.push_back(vocab.eos());
  return seq;
}

StructuredSequence build_region_sequence(const TextInstance& inst,
                                         const Vocabulary& vocab,
                                         const QuantizerConfig& cfg) {
  StructuredSequence seq;
  seq.task = vocab.task();
  seq.k = 2;
  append_point(seq.ids, center_token(inst, cfg), vocab);
  for (const Point& p : inst.polygon) {
    append_point(seq.ids, quantize_point(p, cfg), vocab);
  }
  seq.ids.push_back(vocab.eos());
  return seq;  // 2 + 32 + 1 = 35 tokens
}

StructuredSequence build_content_sequence_at(const Point& center,
                                             const std::string& text,
                                             const Vocabulary& vocab,
                                             const QuantizerConfig& cfg,
                                             const SequenceLimits& limits) {
  if (text.empty()) {
    throw std::invalid_argument("content sequence requires non-empty text");
  }
  const std::vector<char32_t> cps = utf8_codepoints(text);
  const int need = 2 + static_cast<int>(cps.size()) + 1;
  if (need > limits.content_max) {
    const int fits = limits.content_max - 3;
    throw SequenceTooLong("content of " + std::to_string(cps.size()) +
                              " chars needs " + std::to_string(need) +
                              " tokens (max " +
                              std::to_string(limits.content_max) + ")",
                          fits);
  }
  StructuredSequence seq;
  seq.task = vocab.task();
  seq.k = 2;
  append_point(seq.ids, quantize_point(center, cfg), vocab);
  for (char32_t cp : cps) seq.ids.push_back(vocab.char_id(cp));
  seq.ids.push_back(vocab.eos());
  return seq;
}

StructuredSequence build_content_sequence(const TextInstance& inst,
                                          const Vocabulary& vocab,
                                          const QuantizerConfig& cfg,
                                          const SequenceLimits& limits) {
  return build_content_sequence_at(instance_center(inst), inst.text, vocab, cfg,
                                   limits);
}

namespace {

class TokenReader {
 public:
  TokenReader(std::span<const int> ids, const Vocabulary& vocab,
              std::vector<std::string>& diags)
      : ids_(ids), vocab_(vocab), diags_(diags) {}

  bool done() const { return pos_ >= ids_.size() || hit_eos_; }
  std::size_t pos() const { return pos_; }
  bool hit_eos() const { return hit_eos_; }
  int peek() const { return ids_[pos_]; }
  int take() { return ids_[pos_++]; }
  void mark_eos() { hit_eos_ = true; }

  void finish() {
    if (!hit_eos_) diags_.push_back("sequence ended without </S>");
  }

  // Reads a coordinate pair starting at the current coord token; returns
  // false (and records a diagnostic) when the y coordinate is missing.
  bool read_point(QuantizedPoint* out) {
    const std::size_t at = pos_;
    const int x = take();
    if (pos_ >= ids_.size() || !vocab_.is_coord(ids_[pos_])) {
      diags_.push_back("dropped dangling coordinate at position " +
                       std::to_string(at));
      return false;
    }
    const int y = take();
    *out = {vocab_.coord_value(x), vocab_.coord_value(y)};
    return true;
  }

 private:
  std::span<const int> ids_;
  const Vocabulary& vocab_;
  std::vector<std::string>& diags_;
  std::size_t pos_ = 0;
  bool hit_eos_ = false;
};

void parse_spotting(TokenReader& r, const Vocabulary& vocab, Stage1Parse* out) {
  while (!r.done()) {
    if (vocab.is_coord(r.peek())) {
      QuantizedPoint q;
      if (r.read_point(&q)) out->points.push_back(q);
      continue;
    }
    const int id = r.take();
    if (id == vocab.eos()) {
      r.mark_eos();
    } else {
      out->diagnostics.push_back("ignored unexpected token '" +
                                 vocab.token_string(id) + "' at position " +
                                 std::to_string(r.pos() - 1));
    }
  }
}

void parse_kie(TokenReader& r, const Vocabulary& vocab, Stage1Parse* out) {
  auto& groups = out->groups;
  auto& diags = out->diagnostics;
  bool open = false;
  EntityGroup current;
  auto flush = [&] {
    if (!open) return;
    if (current.points.empty()) {
      diags.push_back("dropped empty entity group '" + current.cls + "'");
    } else {
      groups.push_back(std::move(current));
    }
    current = {};
    open = false;
  };
  while (!r.done()) {
    if (vocab.is_coord(r.peek())) {
      QuantizedPoint q;
      const bool ok = r.read_point(&q);
      if (!ok) continue;
      if (open) {
        current.points.push_back(q);
      } else {
        diags.push_back("dropped point outside any entity group");
      }
      continue;
    }
    const int id = r.take();
    if (id == vocab.eos()) {
      if (open) diags.push_back("auto-closed entity group '" + current.cls + "' at </S>");
      flush();
      r.mark_eos();
      continue;
    }
    if (auto cls = vocab.entity_open_class(id)) {
      if (open) {
        diags.push_back("implicitly closed entity group '" + current.cls +
                        "' before '<" + *cls + ">'");
        flush();
      }
      open = true;
      current.cls = *cls;
      continue;
    }
    if (auto cls = vocab.entity_close_class(id)) {
      if (!open) {
        diags.push_back("ignored stray '</" + *cls + ">'");
      } else {
        if (current.cls != *cls) {
          diags.push_back("mismatched close tag '</" + *cls + ">' for group '" +
                          current.cls + "'");
        }
        flush();
      }
      continue;
    }
    diags.push_back("ignored unexpected token '" + vocab.token_string(id) +
                    "' at position " + std::to_string(r.pos() - 1));
  }
  if (open) {
    diags.push_back("auto-closed entity group '" + current.cls +
                    "' at sequence end");
    flush();
  }
}

void parse_hier(TokenReader& r, const Vocabulary& vocab, Stage1Parse* out) {
  auto& diags = out->diagnostics;
  const int t_po = *vocab.structural_id(tok::para_open);
  const int t_pc = *vocab.structural_id(tok::para_close);
  const int t_lo = *vocab.structural_id(tok::line_open);
  const int t_lc = *vocab.structural_id(tok::line_close);

  std::vector<std::vector<QuantizedPoint>> para;
  std::vector<QuantizedPoint> line;
  bool para_open = false, line_open = false;

  auto close_line = [&](const char* why) {
    if (!line_open) return;
    if (line.empty()) {
      diags.push_back(std::string("dropped empty line (") + why + ")");
    } else {
      para.push_back(std::move(line));
    }
    line.clear();
    line_open = false;
  };
  auto close_para = [&](const char* why) {
    if (!para_open) return;
    if (para.empty()) {
      diags.push_back(std::string("dropped empty paragraph (") + why + ")");
    } else {
      out->paragraphs.push_back(std::move(para));
    }
    para.clear();
    para_open = false;
  };

  while (!r.done()) {
    if (vocab.is_coord(r.peek())) {
      QuantizedPoint q;
      const bool ok = r.read_point(&q);
      if (!ok) continue;
      if (line_open) {
        line.push_back(q);
      } else {
        diags.push_back("dropped point outside any line");
      }
      continue;
    }
    const int id = r.take();
    if (id == vocab.eos()) {
      if (line_open) diags.push_back("auto-closed line at </S>");
      close_line("at </S>");
      if (para_open) diags.push_back("auto-closed paragraph at </S>");
      close_para("at </S>");
      r.mark_eos();
      continue;
    }
    if (id == t_po) {
      if (para_open) {
        diags.push_back("implicitly closed paragraph before <PARA>");
        close_line("implicit");
        close_para("implicit");
      }
      para_open = true;
      continue;
    }
    if (id == t_pc) {
      if (!para_open) {
        diags.push_back("ignored stray </PARA>");
        continue;
      }
      if (line_open) {
        diags.push_back("auto-closed line at </PARA>");
        close_line("at </PARA>");
      }
      close_para("at </PARA>");
      continue;
    }
    if (id == t_lo) {
      if (!para_open) {
        diags.push_back("implicitly opened paragraph before <LINE>");
        para_open = true;
      }
      if (line_open) {
        diags.push_back("implicitly closed line before <LINE>");
        close_line("implicit");
      }
      line_open = true;
      continue;
    }
    if (id == t_lc) {
      if (!line_open) {
        diags.push_back("ignored stray </LINE>");
        continue;
      }
      close_line("at </LINE>");
      continue;
    }
    diags.push_back("ignored unexpected token '" + vocab.token_string(id) +
                    "' at position " + std::to_string(r.pos() - 1));
  }
  if (line_open) {
    diags.push_back("auto-closed line at sequence end");
    close_line("at end");
  }
  if (para_open) {
    diags.push_back("auto-closed paragraph at sequence end");
    close_para("at end");
  }
}

}  // namespace

Stage1Parse parse_stage1(const StructuredSequence& seq, const Vocabulary& vocab) {
  if (seq.task != vocab.task()) {
    throw std::invalid_argument("parse_stage1: sequence task " +
                                to_string(seq.task) +
                                " does not match vocabulary task " +
                                to_string(vocab.task()));
  }
  if (seq.task == Task::table) {
    throw std::invalid_argument(
        "parse_stage1: table sequences parse via structure_tokens_to_grid");
  }
  Stage1Parse out;
  const std::size_t skip = std::min<std::size_t>(
      static_cast<std::size_t>(std::max(seq.k, 0)), seq.ids.size());
  std::span<const int> body(seq.ids.data() + skip, seq.ids.size() - skip);
  TokenReader reader(body, vocab, out.diagnostics);
  switch (seq.task) {
    case Task::spotting: parse_spotting(reader, vocab, &out); break;
    case Task::kie: parse_kie(reader, vocab, &out); break;
    case Task::hiertext: parse_hier(reader, vocab, &out); break;
    case Task::table: break;  // unreachable
  }
  reader.finish();
  return out;
}

RegionParse parse_region_sequence(std::span<const int> ids,
                                  const Vocabulary& vocab,
                                  const QuantizerConfig& cfg) {
  RegionParse out;
  // ids include the 2-token center prompt.
  std::vector<QuantizedPoint> pts;
  std::size_t pos = 2;
  bool eos = false;
  if (ids.size() < 2 || !vocab.is_coord(ids[0]) || !vocab.is_coord(ids[1])) {
    out.diagnostics.push_back("region sequence lacks its center prompt");
    pos = 0;
  }
  while (pos < ids.size() && !eos) {
    const int id = ids[pos];
    if (id == vocab.eos()) {
      eos = true;
      ++pos;
      continue;
    }
    if (!vocab.is_coord(id)) {
      out.diagnostics.push_back("ignored unexpected token '" +
                                vocab.token_string(id) + "' at position " +
                                std::to_string(pos));
      ++pos;
      continue;
    }
    if (pos + 1 < ids.size() && vocab.is_coord(ids[pos + 1])) {
      pts.push_back({vocab.coord_value(ids[pos]), vocab.coord_value(ids[pos + 1])});
      pos += 2;
    } else {
      out.diagnostics.push_back("dropped dangling coordinate at position " +
                                std::to_string(pos));
      ++pos;
    }
    if (pts.size() == 16) break;
  }
  if (!eos && pts.size() < 16) {
    out.diagnostics.push_back("region sequence ended without </S>");
  }
  out.complete = pts.size() == 16;
  // Pad an incomplete polygon by repeating the last vertex (or the center).
  QuantizedPoint fill =
      pts.empty()
          ? (ids.size() >= 2 && vocab.is_coord(ids[0]) && vocab.is_coord(ids[1])
                 ? QuantizedPoint{vocab.coord_value(ids[0]), vocab.coord_value(ids[1])}
                 : QuantizedPoint{0, 0})
          : pts.back();
  while (pts.size() < 16) pts.push_back(fill);
  for (int i = 0; i < 16; ++i) out.polygon[i] = dequantize_point(pts[i], cfg);
  return out;
}

ContentParse parse_content_sequence(std::span<const int> ids,
                                    const Vocabulary& vocab) {
  ContentParse out;
  std::size_t pos = 2;
  if (ids.size() < 2 || !vocab.is_coord(ids[0]) || !vocab.is_coord(ids[1])) {
    out.diagnostics.push_back("content sequence lacks its center prompt");
    pos = 0;
  }
  bool eos = false;
  for (; pos < ids.size() && !eos; ++pos) {
    const int id = ids[pos];
    if (id == vocab.eos()) {
      eos = true;
    } else if (vocab.is_char(id)) {
      out.text.push_back(vocab.char_value(id));
    } else if (id == vocab.unk()) {
      out.text += "\xEF\xBF\xBD";  // U+FFFD
      out.diagnostics.push_back("unknown char token at position " +
                                std::to_string(pos));
    } else {
      out.diagnostics.push_back("ignored unexpected token '" +
                                vocab.token_string(id) + "' at position " +
                                std::to_string(pos));
    }
  }
  if (!eos) out.diagnostics.push_back("content sequence ended without </S>");
  return out;
}

std::vector<std::pair<std::string, std::string>> entity_fields(
    std::span<const TextInstance> instances, const QuantizerConfig& cfg) {
  using Key = std::pair<std::string, int>;
  std::map<Key, std::string> values;
  std::vector<Key> order;
  for (std::size_t i : raster_order(instances, cfg)) {
    const TextInstance& inst = instances[i];
    if (!inst.entity) {
      throw std::invalid_argument("kie instance '" + inst.text +
                                  "' is missing its entity label");
    }
    const Key key{*inst.entity, inst.line_id.value_or(-1)};
    auto [it, inserted] = values.try_emplace(key);
    if (inserted) order.push_back(key);
    if (!it->second.empty()) it->second += ' ';
    it->second += inst.text;
  }
  std::vector<std::pair<std::string, std::string>> fields;
  fields.reserve(order.size());
  for (const Key& key : order) fields.push_back({key.first, values[key]});
  return fields;
}

TrainingTarget make_training_target(const StructuredSequence& seq,
                                    const Vocabulary& vocab) {
  const std::size_t len = seq.ids.size();
  if (len < 2) {
    throw std::invalid_argument("make_training_target: sequence has " +
                                std::to_string(len) + " tokens, need >= 2");
  }
  TrainingTarget tt;
  tt.inputs.assign(seq.ids.begin(), seq.ids.end() - 1);
  tt.targets.assign(seq.ids.begin() + 1, seq.ids.end());
  tt.weights.reserve(tt.targets.size());
  for (int id : tt.targets) {
    if (id == vocab.pad()) {
      tt.weights.push_back(0.0);
    } else if (vocab.is_structural(id)) {
      tt.weights.push_back(4.0);
    } else {
      tt.weights.push_back(1.0);
    }
  }
  tt.k = std::max(seq.k - 1, 0);
  return tt;
}

}  // namespace vstp
