#include "vstp/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "vstp/vocab.hpp"

namespace vstp {

// --- edit distances ---------------------------------------------------------

int levenshtein(std::string_view a, std::string_view b) {
  const std::vector<char32_t> ca = utf8_codepoints(a);
  const std::vector<char32_t> cb = utf8_codepoints(b);
  const std::size_t n = cb.size();
  std::vector<int> prev(n + 1), cur(n + 1);
  for (std::size_t j = 0; j <= n; ++j) prev[j] = static_cast<int>(j);
  for (std::size_t i = 1; i <= ca.size(); ++i) {
    cur[0] = static_cast<int>(i);
    for (std::size_t j = 1; j <= n; ++j) {
      const int sub = prev[j - 1] + (ca[i - 1] == cb[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[n];
}

double normalized_levenshtein(std::string_view a, std::string_view b) {
  const std::size_t la = utf8_codepoints(a).size();
  const std::size_t lb = utf8_codepoints(b).size();
  const std::size_t denom = std::max(la, lb);
  if (denom == 0) return 0.0;
  return static_cast<double>(levenshtein(a, b)) / static_cast<double>(denom);
}

// --- tree edit distance (Zhang-Shasha) ---------------------------------------

int tree_size(const TedsTree& t) {
  int n = 1;
  for (const TedsTree& c : t.children) n += tree_size(c);
  return n;
}

namespace {

bool is_td_tag(const std::string& tag) {
  return tag == "td" || tag.rfind("td ", 0) == 0;
}

double subst_cost(const TedsTree& a, const TedsTree& b) {
  if (a.tag != b.tag) return 1.0;
  if (!is_td_tag(a.tag)) return 0.0;
  static const std::string empty;
  const std::string& ca = a.content ? *a.content : empty;
  const std::string& cb = b.content ? *b.content : empty;
  if (ca == cb) return 0.0;
  return normalized_levenshtein(ca, cb);
}

struct FlatTree {
  std::vector<const TedsTree*> post;  // postorder
  std::vector<int> lml;               // leftmost leaf per postorder index
  std::vector<int> keyroots;          // ascending
};

int flatten_rec(const TedsTree& t, FlatTree& f) {
  int lml_here = -1;
  for (const TedsTree& c : t.children) {
    const int ci = flatten_rec(c, f);
    if (lml_here == -1) lml_here = f.lml[ci];
  }
  f.post.push_back(&t);
  const int idx = static_cast<int>(f.post.size()) - 1;
  if (lml_here == -1) lml_here = idx;
  f.lml.push_back(lml_here);
  return idx;
}

FlatTree flatten(const TedsTree& t) {
  FlatTree f;
  flatten_rec(t, f);
  // A keyroot is the highest node sharing its leftmost leaf.
  std::map<int, int> highest;
  for (int i = 0; i < static_cast<int>(f.post.size()); ++i) {
    highest[f.lml[i]] = i;
  }
  for (const auto& [lml, idx] : highest) f.keyroots.push_back(idx);
  std::sort(f.keyroots.begin(), f.keyroots.end());
  return f;
}

}  // namespace

double tree_edit_distance(const TedsTree& a, const TedsTree& b) {
  const FlatTree fa = flatten(a);
  const FlatTree fb = flatten(b);
  const int n1 = static_cast<int>(fa.post.size());
  const int n2 = static_cast<int>(fb.post.size());
  std::vector<std::vector<double>> D(n1, std::vector<double>(n2, 0.0));

  std::vector<std::vector<double>> fd;  // forest distances, reused per pair
  for (const int ki : fa.keyroots) {
    for (const int kj : fb.keyroots) {
      const int li = fa.lml[ki], lj = fb.lml[kj];
      const int m = ki - li + 2, n = kj - lj + 2;
      fd.assign(m, std::vector<double>(n, 0.0));
      for (int di = 1; di < m; ++di) fd[di][0] = fd[di - 1][0] + 1.0;
      for (int dj = 1; dj < n; ++dj) fd[0][dj] = fd[0][dj - 1] + 1.0;
      for (int di = 1; di < m; ++di) {
        for (int dj = 1; dj < n; ++dj) {
          const int ni = li + di - 1, nj = lj + dj - 1;
          if (fa.lml[ni] == li && fb.lml[nj] == lj) {
            fd[di][dj] = std::min(
                {fd[di - 1][dj] + 1.0, fd[di][dj - 1] + 1.0,
                 fd[di - 1][dj - 1] + subst_cost(*fa.post[ni], *fb.post[nj])});
            D[ni][nj] = fd[di][dj];
          } else {
            const int pi = fa.lml[ni] - li;
            const int pj = fb.lml[nj] - lj;
            fd[di][dj] = std::min({fd[di - 1][dj] + 1.0, fd[di][dj - 1] + 1.0,
                                   fd[pi][pj] + D[ni][nj]});
          }
        }
      }
    }
  }
  return D[n1 - 1][n2 - 1];
}

double tree_similarity(const TedsTree& a, const TedsTree& b) {
  const int na = tree_size(a);
  const int nb = tree_size(b);
  const double d = tree_edit_distance(a, b);
  const double sim = 1.0 - d / static_cast<double>(std::max(na, nb));
  return std::clamp(sim, 0.0, 1.0);
}

TedsTree teds_tree_from_html(const std::string& html) {
  const TableGrid g = html_to_grid(html);

  std::vector<std::vector<const TableCell*>> rows(g.n_rows);
  for (std::size_t i : structure_order(g)) {
    rows[g.cells[i].row].push_back(&g.cells[i]);
  }
  auto make_rows = [&](int r0, int r1) {
    std::vector<TedsTree> out;
    for (int r = r0; r < r1; ++r) {
      TedsTree tr;
      tr.tag = "tr";
      for (const TableCell* c : rows[r]) {
        TedsTree td;
        // Span attributes are structural: they live in the tag so differing
        // spans substitute at full cost.
        td.tag = "td";
        if (c->rowspan > 1) {
          td.tag += " rowspan=\"" + std::to_string(c->rowspan) + "\"";
        }
        if (c->colspan > 1) {
          td.tag += " colspan=\"" + std::to_string(c->colspan) + "\"";
        }
        td.content = c->text;
        tr.children.push_back(std::move(td));
      }
      out.push_back(std::move(tr));
    }
    return out;
  };

  TedsTree root;
  root.tag = "table";
  if (g.header_rows > 0) {
    TedsTree thead;
    thead.tag = "thead";
    thead.children = make_rows(0, g.header_rows);
    root.children.push_back(std::move(thead));
  }
  TedsTree tbody;
  tbody.tag = "tbody";
  tbody.children = make_rows(g.header_rows, g.n_rows);
  root.children.push_back(std::move(tbody));
  return root;
}

TedsTree strip_content(TedsTree t) {
  t.content.reset();
  for (TedsTree& c : t.children) c = strip_content(std::move(c));
  return t;
}

double teds(const std::string& pred_html, const std::string& gt_html,
            bool structure_only, std::vector<std::string>* diagnostics) {
  TedsTree pred, gt;
  try {
    pred = teds_tree_from_html(pred_html);
  } catch (const HtmlParseError& e) {
    if (diagnostics) {
      diagnostics->push_back(std::string("prediction failed to parse: ") +
                             e.what());
    }
    return 0.0;
  }
  try {
    gt = teds_tree_from_html(gt_html);
  } catch (const HtmlParseError& e) {
    if (diagnostics) {
      diagnostics->push_back(std::string("ground truth failed to parse: ") +
                             e.what());
    }
    return 0.0;
  }
  if (structure_only) {
    pred = strip_content(std::move(pred));
    gt = strip_content(std::move(gt));
  }
  return tree_similarity(pred, gt);
}

// --- key information extraction ----------------------------------------------

F1Scores field_f1(std::span<const Field> pred, std::span<const Field> gt) {
  std::map<Field, int> gt_counts;
  for (const Field& f : gt) ++gt_counts[f];
  int matches = 0;
  for (const Field& f : pred) {
    auto it = gt_counts.find(f);
    if (it != gt_counts.end() && it->second > 0) {
      --it->second;
      ++matches;
    }
  }
  F1Scores s;
  s.precision = pred.empty() ? 1.0 : static_cast<double>(matches) / pred.size();
  s.recall = gt.empty() ? 1.0 : static_cast<double>(matches) / gt.size();
  s.fscore = (s.precision + s.recall > 0.0)
                 ? 2.0 * s.precision * s.recall / (s.precision + s.recall)
                 : 0.0;
  return s;
}

TedsTree entity_tree(std::span<const Field> fields) {
  TedsTree root;
  root.tag = "root";
  for (const Field& f : fields) {
    TedsTree cls;
    cls.tag = f.first;
    TedsTree value;
    value.tag = "td";  // leaf carries the value; substitutes like cell content
    value.content = f.second;
    cls.children.push_back(std::move(value));
    root.children.push_back(std::move(cls));
  }
  return root;
}

double nted_accuracy(const TedsTree& pred, const TedsTree& gt) {
  TedsTree empty_root;
  empty_root.tag = gt.tag;
  const double denom = tree_edit_distance(empty_root, gt);
  const double d = tree_edit_distance(pred, gt);
  if (denom == 0.0) return d == 0.0 ? 1.0 : 0.0;
  return std::max(0.0, 1.0 - d / denom);
}

// --- end-to-end spotting ------------------------------------------------------

LexiconMode lexicon_mode_from_string(const std::string& s) {
  if (s == "none") return LexiconMode::none;
  if (s == "full") return LexiconMode::full;
  if (s == "strong") return LexiconMode::strong;
  if (s == "weak") return LexiconMode::weak;
  if (s == "generic") return LexiconMode::generic;
  throw std::invalid_argument("unknown lexicon mode '" + s + "'");
}

std::string to_string(LexiconMode mode) {
  switch (mode) {
    case LexiconMode::none: return "none";
    case LexiconMode::full: return "full";
    case LexiconMode::strong: return "strong";
    case LexiconMode::weak: return "weak";
    case LexiconMode::generic: return "generic";
  }
  throw std::invalid_argument("unknown lexicon mode");
}

SpottingCounts& SpottingCounts::operator+=(const SpottingCounts& o) {
  e2e_hits += o.e2e_hits;
  det_hits += o.det_hits;
  n_pred += o.n_pred;
  n_gt += o.n_gt;
  return *this;
}

namespace {

std::string ascii_lower(const std::string& s) {
  std::string out = s;
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

}  // namespace

std::string lexicon_correct(const std::string& text,
                            std::span<const std::string> lexicon,
                            std::optional<int> edit_cap) {
  if (lexicon.empty()) return text;
  const std::string lowered = ascii_lower(text);
  int best = -1;
  const std::string* best_word = nullptr;
  for (const std::string& word : lexicon) {
    const int d = levenshtein(lowered, ascii_lower(word));
    if (best_word == nullptr || d < best) {
      best = d;
      best_word = &word;
    }
  }
  if (edit_cap && best > *edit_cap) return text;
  return *best_word;
}

SpottingCounts spotting_counts(std::span<const SpottingPrediction> preds,
                               std::span<const SpottingGroundTruth> gts,
                               const SpottingConfig& cfg) {
  SpottingCounts counts;
  for (const SpottingGroundTruth& g : gts) counts.n_gt += g.ignore ? 0 : 1;

  std::vector<char> gt_taken(gts.size(), 0);
  for (const SpottingPrediction& pred : preds) {
    int best = -1;
    double best_iou = 0.0;
    for (std::size_t j = 0; j < gts.size(); ++j) {
      if (gt_taken[j]) continue;
      const double iou = polygon_iou(pred.polygon, gts[j].polygon);
      if (iou < cfg.iou_threshold) continue;
      if (best < 0 || iou > best_iou) {  // ties keep the lower GT index
        best = static_cast<int>(j);
        best_iou = iou;
      }
    }
    if (best < 0) {
      ++counts.n_pred;  // false positive
      continue;
    }
    gt_taken[best] = 1;
    const SpottingGroundTruth& gt = gts[best];
    if (gt.ignore) continue;  // excluded from every count
    ++counts.n_pred;
    ++counts.det_hits;
    const std::string corrected =
        cfg.mode == LexiconMode::none
            ? pred.text
            : lexicon_correct(pred.text, cfg.lexicon, cfg.edit_cap);
    if (ascii_lower(corrected) == ascii_lower(gt.text)) ++counts.e2e_hits;
  }
  return counts;
}

// --- reports -------------------------------------------------------------------

nlohmann::json EvalReport::to_json() const {
  return nlohmann::json{{"task", task},         {"mode", mode},
                        {"precision", precision}, {"recall", recall},
                        {"fscore", fscore},       {"n", n}};
}

std::string EvalReport::to_json_string() const { return to_json().dump(); }

EvalReport spotting_report(const SpottingCounts& counts, LexiconMode mode,
                           int n_samples) {
  EvalReport r;
  r.task = "spotting";
  r.mode = to_string(mode);
  r.n = n_samples;
  r.precision = counts.n_pred == 0
                    ? 1.0
                    : static_cast<double>(counts.e2e_hits) / counts.n_pred;
  r.recall = counts.n_gt == 0
                 ? 1.0
                 : static_cast<double>(counts.e2e_hits) / counts.n_gt;
  r.fscore = (r.precision + r.recall > 0.0)
                 ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
                 : 0.0;
  return r;
}

EvalReport spotting_eval(std::span<const SpottingPrediction> preds,
                         std::span<const SpottingGroundTruth> gts,
                         const SpottingConfig& cfg) {
  return spotting_report(spotting_counts(preds, gts, cfg), cfg.mode, 1);
}

}  // namespace vstp
