#include "vstp/table.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <string>

namespace vstp {

bool cell_has_content(const TableCell& cell) { return cell.center.has_value(); }

void validate_grid(const TableGrid& g) {
  if (g.n_rows < 0 || g.n_cols < 0 || (g.n_rows == 0) != (g.n_cols == 0)) {
    throw std::invalid_argument("table grid: malformed dimensions");
  }
  if (g.header_rows < 0 || g.header_rows > g.n_rows) {
    throw std::invalid_argument("table grid: header_rows outside [0, n_rows]");
  }
  if (g.n_rows == 0 && !g.cells.empty()) {
    throw std::invalid_argument("table grid: cells in an empty grid");
  }
  std::vector<int> cover(static_cast<std::size_t>(g.n_rows) * g.n_cols, 0);
  for (const TableCell& c : g.cells) {
    if (c.rowspan < 1 || c.colspan < 1) {
      throw std::invalid_argument("table grid: span < 1");
    }
    if (c.row < 0 || c.col < 0 || c.row + c.rowspan > g.n_rows ||
        c.col + c.colspan > g.n_cols) {
      throw std::invalid_argument("table grid: cell rectangle out of bounds");
    }
    for (int r = c.row; r < c.row + c.rowspan; ++r) {
      for (int cc = c.col; cc < c.col + c.colspan; ++cc) {
        if (++cover[static_cast<std::size_t>(r) * g.n_cols + cc] > 1) {
          throw std::invalid_argument("table grid: overlapping cells at (" +
                                      std::to_string(r) + "," +
                                      std::to_string(cc) + ")");
        }
      }
    }
    if (c.center && !(c.center->x >= 0.0 && c.center->x <= 1.0 &&
                      c.center->y >= 0.0 && c.center->y <= 1.0)) {
      throw std::invalid_argument("table grid: center outside unit square");
    }
  }
  for (int r = 0; r < g.n_rows; ++r) {
    for (int c = 0; c < g.n_cols; ++c) {
      if (cover[static_cast<std::size_t>(r) * g.n_cols + c] == 0) {
        throw std::invalid_argument("table grid: uncovered slot (" +
                                    std::to_string(r) + "," +
                                    std::to_string(c) + ")");
      }
    }
  }
}

void check_content_consistency(const TableGrid& g) {
  for (const TableCell& c : g.cells) {
    if (c.center.has_value() != !c.text.empty()) {
      throw std::invalid_argument(
          "table grid: center must be present exactly for non-empty cells");
    }
  }
}

std::vector<std::size_t> structure_order(const TableGrid& g) {
  std::vector<std::size_t> order(g.cells.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const TableCell& ca = g.cells[a];
    const TableCell& cb = g.cells[b];
    if (ca.row != cb.row) return ca.row < cb.row;
    return ca.col < cb.col;
  });
  return order;
}

std::vector<std::string> content_cell_texts(const TableGrid& g) {
  std::vector<std::string> out;
  for (std::size_t i : structure_order(g)) {
    if (cell_has_content(g.cells[i])) out.push_back(g.cells[i].text);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shared row-flow placement (standard HTML table algorithm).

namespace {

class GridFlow {
 public:
  // strict: structural violations throw via `fail`; lenient: they are
  // clamped/filled and recorded in `diags`.
  GridFlow(bool strict, std::vector<std::string>* diags)
      : strict_(strict), diags_(diags) {}

  template <typename Fail>
  void begin_row(const Fail&) {
    ++row_;
    cursor_ = 0;
  }

  bool any_rows() const { return row_ >= 0; }

  // Places a cell in the current row; returns its index in cells().
  template <typename Fail>
  std::size_t place(int rowspan, int colspan, const Fail& fail) {
    while (cursor_ < fill_until_.size() &&
           fill_until_[cursor_] > row_) {
      ++cursor_;
    }
    const int col = static_cast<int>(cursor_);
    // Clamp colspan to the free run (strict mode errors instead).
    int free_run = 0;
    while (true) {
      const std::size_t c = cursor_ + free_run;
      if (c < fill_until_.size() && fill_until_[c] > row_) break;
      ++free_run;
      if (free_run >= colspan) break;
    }
    if (free_run < colspan) {
      if (strict_) fail("colspan overlaps an occupied slot");
      diags_->push_back("clamped colspan from " + std::to_string(colspan) +
                        " to " + std::to_string(free_run));
      colspan = free_run;
    }
    if (fill_until_.size() < cursor_ + colspan) {
      fill_until_.resize(cursor_ + colspan, 0);
    }
    for (int c = 0; c < colspan; ++c) fill_until_[cursor_ + c] = row_ + rowspan;
    cursor_ += colspan;
    TableCell cell;
    cell.row = row_;
    cell.col = col;
    cell.rowspan = rowspan;
    cell.colspan = colspan;
    cells_.push_back(cell);
    return cells_.size() - 1;
  }

  std::vector<TableCell>& cells() { return cells_; }

  template <typename Fail>
  TableGrid finish(int header_rows, const Fail& fail) {
    TableGrid g;
    g.n_rows = row_ + 1;
    g.n_cols = static_cast<int>(fill_until_.size());
    if (g.n_rows > 0 && g.n_cols == 0) {
      if (strict_) fail("table has rows but no cells");
      diags_->push_back("dropped rows with no cells");
      g.n_rows = 0;
    }
    if (g.n_rows <= 0) {
      g.n_rows = 0;
      g.n_cols = 0;
      g.header_rows = 0;
      return g;
    }
    for (TableCell& c : cells_) {
      if (c.row + c.rowspan > g.n_rows) {
        if (strict_) fail("rowspan extends past the last row");
        diags_->push_back("clamped rowspan of cell (" + std::to_string(c.row) +
                          "," + std::to_string(c.col) + ")");
        c.rowspan = g.n_rows - c.row;
      }
    }
    // Coverage check; lenient mode fills gaps with empty cells.
    std::vector<char> cover(static_cast<std::size_t>(g.n_rows) * g.n_cols, 0);
    for (const TableCell& c : cells_) {
      for (int r = c.row; r < c.row + c.rowspan; ++r) {
        for (int cc = c.col; cc < c.col + c.colspan; ++cc) {
          cover[static_cast<std::size_t>(r) * g.n_cols + cc] = 1;
        }
      }
    }
    for (int r = 0; r < g.n_rows; ++r) {
      for (int c = 0; c < g.n_cols; ++c) {
        if (!cover[static_cast<std::size_t>(r) * g.n_cols + c]) {
          if (strict_) {
            fail("grid has an uncovered slot (ragged rows?)");
          }
          diags_->push_back("filled uncovered slot (" + std::to_string(r) +
                            "," + std::to_string(c) + ") with an empty cell");
          TableCell empty;
          empty.row = r;
          empty.col = c;
          cells_.push_back(empty);
        }
      }
    }
    if (header_rows > g.n_rows) {
      if (strict_) fail("more header rows than rows");
      diags_->push_back("clamped header_rows to the row count");
    }
    g.header_rows = std::min(header_rows, g.n_rows);
    g.cells = std::move(cells_);
    // Keep cells in structure order for stable downstream traversal.
    std::sort(g.cells.begin(), g.cells.end(),
              [](const TableCell& a, const TableCell& b) {
                if (a.row != b.row) return a.row < b.row;
                return a.col < b.col;
              });
    return g;
  }

 private:
  bool strict_;
  std::vector<std::string>* diags_;
  std::vector<std::size_t> fill_until_{};  // per column: occupied until row (excl)
  std::vector<TableCell> cells_;
  int row_ = -1;
  std::size_t cursor_ = 0;
};

// ---------------------------------------------------------------------------
// HTML subset parsing.

struct HtmlTag {
  std::string name;
  bool closing = false;
  int rowspan = 1, colspan = 1;
  std::size_t pos = 0;
};

std::string unescape_entities(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    if (s[i] != '&') {
      out.push_back(s[i++]);
      continue;
    }
    const std::size_t semi = s.find(';', i);
    if (semi == std::string::npos || semi - i > 8) {
      out.push_back(s[i++]);
      continue;
    }
    const std::string ent = s.substr(i + 1, semi - i - 1);
    if (ent == "amp") out.push_back('&');
    else if (ent == "lt") out.push_back('<');
    else if (ent == "gt") out.push_back('>');
    else if (ent == "quot") out.push_back('"');
    else if (ent == "apos") out.push_back('\'');
    else if (!ent.empty() && ent[0] == '#') {
      long cp = -1;
      try {
        cp = std::stol(ent.substr(1));
      } catch (...) {
      }
      if (cp >= 0 && cp < 128) {
        out.push_back(static_cast<char>(cp));
      } else {
        out += s.substr(i, semi - i + 1);  // keep non-ASCII refs literal
      }
    } else {
      out.push_back(s[i++]);
      continue;
    }
    i = semi + 1;
  }
  return out;
}

class HtmlScanner {
 public:
  explicit HtmlScanner(const std::string& html) : s_(html) {}

  bool at_end() const { return pos_ >= s_.size(); }
  std::size_t pos() const { return pos_; }

  // True if the next non-space char opens a tag; skips leading whitespace.
  bool next_is_tag() {
    while (pos_ < s_.size() &&
           std::isspace(static_cast<unsigned char>(s_[pos_]))) {
      ++pos_;
    }
    return pos_ < s_.size() && s_[pos_] == '<';
  }

  // Raw text up to the next '<' (no whitespace skipping).
  std::string read_text() {
    const std::size_t start = pos_;
    while (pos_ < s_.size() && s_[pos_] != '<') ++pos_;
    return unescape_entities(s_.substr(start, pos_ - start));
  }

  HtmlTag read_tag() {
    HtmlTag tag;
    tag.pos = pos_;
    if (pos_ >= s_.size() || s_[pos_] != '<') {
      throw HtmlParseError("expected a tag", pos_);
    }
    const std::size_t close = s_.find('>', pos_);
    if (close == std::string::npos) {
      throw HtmlParseError("unterminated tag", pos_);
    }
    std::string body = s_.substr(pos_ + 1, close - pos_ - 1);
    pos_ = close + 1;
    std::size_t i = 0;
    if (i < body.size() && body[i] == '/') {
      tag.closing = true;
      ++i;
    }
    while (i < body.size() &&
           (std::isalnum(static_cast<unsigned char>(body[i])))) {
      tag.name.push_back(
          static_cast<char>(std::tolower(static_cast<unsigned char>(body[i]))));
      ++i;
    }
    if (tag.name.empty()) throw HtmlParseError("empty tag name", tag.pos);
    // Attributes (td only; rowspan/colspan).
    bool saw_rowspan = false, saw_colspan = false;
    while (i < body.size()) {
      while (i < body.size() &&
             std::isspace(static_cast<unsigned char>(body[i]))) {
        ++i;
      }
      if (i >= body.size()) break;
      std::size_t name_start = i;
      while (i < body.size() && body[i] != '=' &&
             !std::isspace(static_cast<unsigned char>(body[i]))) {
        ++i;
      }
      const std::string attr = body.substr(name_start, i - name_start);
      if (i >= body.size() || body[i] != '=') {
        throw HtmlParseError("malformed attribute '" + attr + "'", tag.pos);
      }
      ++i;  // '='
      std::string value;
      if (i < body.size() && (body[i] == '"' || body[i] == '\'')) {
        const char quote = body[i++];
        const std::size_t vstart = i;
        while (i < body.size() && body[i] != quote) ++i;
        if (i >= body.size()) {
          throw HtmlParseError("unterminated attribute value", tag.pos);
        }
        value = body.substr(vstart, i - vstart);
        ++i;
      } else {
        const std::size_t vstart = i;
        while (i < body.size() &&
               !std::isspace(static_cast<unsigned char>(body[i]))) {
          ++i;
        }
        value = body.substr(vstart, i - vstart);
      }
      int parsed = -1;
      if (!value.empty() &&
          std::all_of(value.begin(), value.end(), [](char c) {
            return c >= '0' && c <= '9';
          })) {
        parsed = std::stoi(value);
      }
      if (attr == "rowspan" && !tag.closing && tag.name == "td") {
        if (parsed < 1 || saw_rowspan) {
          throw HtmlParseError("bad rowspan value '" + value + "'", tag.pos);
        }
        tag.rowspan = parsed;
        saw_rowspan = true;
      } else if (attr == "colspan" && !tag.closing && tag.name == "td") {
        if (parsed < 1 || saw_colspan) {
          throw HtmlParseError("bad colspan value '" + value + "'", tag.pos);
        }
        tag.colspan = parsed;
        saw_colspan = true;
      } else {
        throw HtmlParseError("unsupported attribute '" + attr + "'", tag.pos);
      }
    }
    return tag;
  }

 private:
  const std::string& s_;
  std::size_t pos_ = 0;
};

Point cell_rect_center(const TableCell& c, int n_rows, int n_cols) {
  return {(c.col + c.colspan / 2.0) / n_cols, (c.row + c.rowspan / 2.0) / n_rows};
}

}  // namespace

TableGrid html_to_grid(const std::string& html) {
  HtmlScanner scan(html);
  std::vector<std::string> unused_diags;
  GridFlow flow(/*strict=*/true, &unused_diags);
  auto fail_at = [](const std::string& msg, std::size_t pos) -> void {
    throw HtmlParseError(msg, pos);
  };

  if (!scan.next_is_tag()) throw HtmlParseError("expected <table>", scan.pos());
  HtmlTag tag = scan.read_tag();
  if (tag.closing || tag.name != "table") {
    throw HtmlParseError("expected <table>", tag.pos);
  }

  enum class Section { none, thead, tbody, done_thead, done_tbody };
  Section section = Section::none;
  bool saw_thead = false, saw_tbody = false, saw_body_row = false;
  bool row_open = false, table_closed = false;
  int header_rows = 0;

  while (!table_closed) {
    if (!scan.next_is_tag()) {
      throw HtmlParseError(
          scan.at_end() ? "unterminated table" : "text outside a cell",
          scan.pos());
    }
    tag = scan.read_tag();
    auto fail = [&](const std::string& msg) { fail_at(msg, tag.pos); };

    if (tag.name == "table") {
      if (!tag.closing) fail("nested tables are not supported");
      if (row_open) fail("row left open at </table>");
      if (section == Section::thead || section == Section::tbody) {
        fail("section left open at </table>");
      }
      table_closed = true;
    } else if (tag.name == "thead") {
      if (tag.closing) {
        if (section != Section::thead) fail("</thead> without <thead>");
        if (row_open) fail("row left open at </thead>");
        section = Section::done_thead;
      } else {
        if (saw_thead) fail("multiple <thead> sections");
        if (saw_body_row || saw_tbody) fail("<thead> must precede body rows");
        saw_thead = true;
        section = Section::thead;
      }
    } else if (tag.name == "tbody") {
      if (tag.closing) {
        if (section != Section::tbody) fail("</tbody> without <tbody>");
        if (row_open) fail("row left open at </tbody>");
        section = Section::done_tbody;
      } else {
        if (saw_tbody) fail("multiple <tbody> sections");
        if (section == Section::thead) fail("<tbody> inside <thead>");
        saw_tbody = true;
        section = Section::tbody;
      }
    } else if (tag.name == "tr") {
      if (tag.closing) {
        if (!row_open) fail("</tr> without <tr>");
        row_open = false;
        if (section == Section::thead) {
          ++header_rows;
        } else {
          saw_body_row = true;
        }
      } else {
        if (row_open) fail("nested <tr>");
        if (section == Section::done_tbody) fail("row after </tbody>");
        flow.begin_row(fail);
        row_open = true;
      }
    } else if (tag.name == "td") {
      if (tag.closing) fail("</td> without <td>");
      if (!row_open) fail("<td> outside a row");
      const std::size_t cell_idx = flow.place(tag.rowspan, tag.colspan, fail);
      // Cell content runs to the matching </td>.
      std::string text = scan.read_text();
      if (!scan.next_is_tag()) fail("unterminated cell");
      const HtmlTag end = scan.read_tag();
      if (!end.closing || end.name != "td") {
        fail_at("expected </td>", end.pos);
      }
      flow.cells()[cell_idx].text = std::move(text);
    } else {
      fail("unsupported tag <" + tag.name + ">");
    }
  }
  if (scan.next_is_tag()) {
    throw HtmlParseError("content after </table>", scan.pos());
  }
  if (!scan.at_end()) {
    throw HtmlParseError("content after </table>", scan.pos());
  }

  TableGrid g = flow.finish(header_rows, [&](const std::string& msg) {
    fail_at(msg, html.size());
  });
  // HTML carries no point annotation; synthesize centers at cell-rectangle
  // centers so content cells satisfy the grid invariant.
  for (TableCell& c : g.cells) {
    if (!c.text.empty()) c.center = cell_rect_center(c, g.n_rows, g.n_cols);
  }
  try {
    validate_grid(g);
  } catch (const std::invalid_argument& e) {
    throw HtmlParseError(e.what(), html.size());
  }
  return g;
}

// ---------------------------------------------------------------------------

std::vector<std::string> grid_to_structure_tokens(const TableGrid& g,
                                                  const QuantizerConfig& cfg,
                                                  int max_span) {
  validate_grid(g);
  std::vector<std::string> out;
  out.push_back(tok::bos);

  // Row-major anchor lists.
  std::vector<std::vector<const TableCell*>> rows(g.n_rows);
  for (std::size_t i : structure_order(g)) {
    rows[g.cells[i].row].push_back(&g.cells[i]);
  }

  auto emit_cell = [&](const TableCell& c) {
    const bool spanning = c.rowspan > 1 || c.colspan > 1;
    if (spanning) {
      if (c.rowspan > max_span || c.colspan > max_span) {
        throw std::invalid_argument(
            "cell span " + std::to_string(std::max(c.rowspan, c.colspan)) +
            " exceeds the vocabulary max_span " + std::to_string(max_span));
      }
      out.push_back(tok::td_span_open);
      if (c.rowspan > 1) out.push_back(tok::rowspan(c.rowspan));
      if (c.colspan > 1) out.push_back(tok::colspan(c.colspan));
      out.push_back(tok::td_span_close);
      out.push_back(tok::td_close);
    } else {
      out.push_back(cell_has_content(c) ? tok::td_content : tok::td_empty);
    }
    if (cell_has_content(c)) {
      const QuantizedPoint q = quantize_point(*c.center, cfg);
      out.push_back(std::to_string(q.x));
      out.push_back(std::to_string(q.y));
    }
  };
  auto emit_rows = [&](int r0, int r1) {
    for (int r = r0; r < r1; ++r) {
      out.push_back(tok::tr_open);
      for (const TableCell* c : rows[r]) emit_cell(*c);
      out.push_back(tok::tr_close);
    }
  };

  if (g.header_rows > 0) {
    out.push_back(tok::thead_open);
    emit_rows(0, g.header_rows);
    out.push_back(tok::thead_close);
  }
  if (g.n_rows > g.header_rows) {
    out.push_back(tok::tbody_open);
    emit_rows(g.header_rows, g.n_rows);
    out.push_back(tok::tbody_close);
  }
  out.push_back(tok::eos);
  return out;
}

StructuredSequence table_structure_sequence(const TableGrid& g,
                                            const Vocabulary& vocab,
                                            const QuantizerConfig& cfg,
                                            const SequenceLimits& limits) {
  if (vocab.task() != Task::table) {
    throw std::invalid_argument("table_structure_sequence: vocabulary task is " +
                                to_string(vocab.task()));
  }
  const std::vector<std::string> tokens =
      grid_to_structure_tokens(g, cfg, vocab.schema().max_span);
  if (tokens.size() > static_cast<std::size_t>(limits.structured_max)) {
    int rows_fit = 0;
    std::size_t used = 0;
    for (const std::string& t : tokens) {
      if (++used + 1 > static_cast<std::size_t>(limits.structured_max)) break;
      if (t == tok::tr_close) ++rows_fit;
    }
    throw SequenceTooLong("table sequence of " + std::to_string(tokens.size()) +
                              " tokens exceeds " +
                              std::to_string(limits.structured_max) + "; " +
                              std::to_string(rows_fit) + " whole rows fit",
                          rows_fit);
  }
  StructuredSequence seq;
  seq.task = Task::table;
  seq.k = 1;
  seq.ids = vocab.tokenize(tokens);
  return seq;
}

// ---------------------------------------------------------------------------

namespace {

bool parse_coord_token(const std::string& t, const QuantizerConfig& cfg,
                       int* out) {
  if (t.empty() || t.size() > 9) return false;
  if (!std::all_of(t.begin(), t.end(),
                   [](char c) { return c >= '0' && c <= '9'; })) {
    return false;
  }
  if (t.size() > 1 && t[0] == '0') return false;
  const long v = std::stol(t);
  if (v >= cfg.n_bins) return false;
  *out = static_cast<int>(v);
  return true;
}

std::optional<int> parse_span_token(const std::string& t, const char* name) {
  const std::string prefix = std::string(name) + "=\"";
  if (t.size() <= prefix.size() + 1 || t.compare(0, prefix.size(), prefix) != 0 ||
      t.back() != '"') {
    return std::nullopt;
  }
  const std::string digits = t.substr(prefix.size(), t.size() - prefix.size() - 1);
  if (digits.empty() || digits.size() > 4 ||
      !std::all_of(digits.begin(), digits.end(),
                   [](char c) { return c >= '0' && c <= '9'; })) {
    return std::nullopt;
  }
  return std::stoi(digits);
}

}  // namespace

TokenGridParse structure_tokens_to_grid(std::span<const std::string> tokens,
                                        const QuantizerConfig& cfg) {
  TokenGridParse out;
  auto& diags = out.diagnostics;
  GridFlow flow(/*strict=*/false, &diags);
  auto no_fail = [](const std::string&) {};

  enum class Section { none, thead, tbody };
  Section section = Section::none;
  bool row_open = false, seen_row = false, eos = false;
  int header_rows = 0;
  std::size_t i = 0;

  if (i < tokens.size() && tokens[i] == tok::bos) {
    ++i;
  } else {
    diags.push_back("missing <S> at sequence start");
  }

  auto read_center = [&](bool required, std::size_t cell_idx) {
    int x = 0, y = 0;
    if (i < tokens.size() && parse_coord_token(tokens[i], cfg, &x)) {
      if (i + 1 < tokens.size() && parse_coord_token(tokens[i + 1], cfg, &y)) {
        i += 2;
        flow.cells()[cell_idx].center = dequantize_point({x, y}, cfg);
        return;
      }
      diags.push_back("dropped dangling coordinate at token " +
                      std::to_string(i));
      ++i;
    }
    if (required) {
      diags.push_back("non-empty cell at token " + std::to_string(i) +
                      " lacks its center; downgraded to empty");
    }
  };
  auto ensure_row = [&](const char* what) {
    if (!row_open) {
      diags.push_back(std::string(what) + " outside a row; opened one");
      flow.begin_row(no_fail);
      row_open = true;
      seen_row = true;
    }
  };
  auto close_row = [&](const char* why) {
    if (!row_open) return;
    row_open = false;
    if (section == Section::thead) ++header_rows;
    if (why[0] != '\0') {
      diags.push_back(std::string("implicitly closed row (") + why + ")");
    }
  };

  for (; i < tokens.size() && !eos;) {
    const std::string& t = tokens[i];
    int coord = 0;
    if (t == tok::eos) {
      ++i;
      eos = true;
      break;
    }
    if (t == tok::bos) {
      diags.push_back("ignored stray <S> at token " + std::to_string(i));
      ++i;
      continue;
    }
    if (t == tok::thead_open) {
      ++i;
      if (seen_row || section != Section::none) {
        diags.push_back("ignored misplaced <thead>");
      } else {
        section = Section::thead;
      }
      continue;
    }
    if (t == tok::thead_close) {
      ++i;
      if (section != Section::thead) {
        diags.push_back("ignored stray </thead>");
      } else {
        close_row("at </thead>");
        section = Section::none;
      }
      continue;
    }
    if (t == tok::tbody_open) {
      ++i;
      if (section == Section::thead) {
        diags.push_back("<tbody> before </thead>; closed the header");
        close_row("at <tbody>");
      }
      section = Section::tbody;
      continue;
    }
    if (t == tok::tbody_close) {
      ++i;
      if (section != Section::tbody) {
        diags.push_back("ignored stray </tbody>");
      } else {
        close_row("at </tbody>");
        section = Section::none;
      }
      continue;
    }
    if (t == tok::tr_open) {
      ++i;
      if (row_open) close_row("at <tr>");
      flow.begin_row(no_fail);
      row_open = true;
      seen_row = true;
      continue;
    }
    if (t == tok::tr_close) {
      ++i;
      if (!row_open) {
        diags.push_back("ignored stray </tr>");
      } else {
        row_open = false;
        if (section == Section::thead) ++header_rows;
      }
      continue;
    }
    if (t == tok::td_empty || t == tok::td_content) {
      ++i;
      ensure_row("cell");
      const std::size_t idx = flow.place(1, 1, no_fail);
      if (t == tok::td_content) {
        read_center(/*required=*/true, idx);
      } else {
        int x = 0;
        if (i < tokens.size() && parse_coord_token(tokens[i], cfg, &x)) {
          diags.push_back("dropped stray coordinates after an empty cell");
          ++i;
          int y = 0;
          if (i < tokens.size() && parse_coord_token(tokens[i], cfg, &y)) ++i;
        }
      }
      continue;
    }
    if (t == tok::td_span_open) {
      ++i;
      ensure_row("cell");
      int rowspan = 1, colspan = 1;
      bool closed = false;
      while (i < tokens.size()) {
        if (auto rs = parse_span_token(tokens[i], "rowspan")) {
          if (rowspan != 1) diags.push_back("duplicate rowspan attribute kept first");
          else rowspan = *rs;
          ++i;
          continue;
        }
        if (auto cs = parse_span_token(tokens[i], "colspan")) {
          if (colspan != 1) diags.push_back("duplicate colspan attribute kept first");
          else colspan = *cs;
          ++i;
          continue;
        }
        if (tokens[i] == tok::td_span_close) {
          ++i;
          closed = true;
        }
        break;
      }
      if (!closed) {
        diags.push_back("spanning cell group missing '>'; terminated early");
      }
      if (closed) {
        if (i < tokens.size() && tokens[i] == tok::td_close) {
          ++i;
        } else {
          diags.push_back("spanning cell group missing '</td>'");
        }
      }
      if (rowspan < 1 || rowspan > 1000) {
        diags.push_back("clamped rowspan value " + std::to_string(rowspan));
        rowspan = std::clamp(rowspan, 1, 1000);
      }
      if (colspan < 1 || colspan > 1000) {
        diags.push_back("clamped colspan value " + std::to_string(colspan));
        colspan = std::clamp(colspan, 1, 1000);
      }
      const std::size_t idx = flow.place(rowspan, colspan, no_fail);
      read_center(/*required=*/false, idx);
      continue;
    }
    if (t == tok::td_close) {
      ++i;
      diags.push_back("ignored stray '</td>'");
      continue;
    }
    if (parse_coord_token(t, cfg, &coord)) {
      diags.push_back("dropped stray coordinate '" + t + "' at token " +
                      std::to_string(i));
      ++i;
      continue;
    }
    diags.push_back("ignored unexpected token '" + t + "'");
    ++i;
  }
  if (!eos) {
    diags.push_back("sequence ended without </S>");
  } else if (i < tokens.size()) {
    diags.push_back("ignored " + std::to_string(tokens.size() - i) +
                    " tokens after </S>");
  }
  close_row(eos ? "at </S>" : "at sequence end");

  out.grid = flow.finish(header_rows, no_fail);
  return out;
}

// ---------------------------------------------------------------------------

namespace {

std::string escape_text(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

}  // namespace

std::string assemble_html(const TableGrid& g, std::span<const std::string> texts) {
  validate_grid(g);
  std::size_t n_content = 0;
  for (const TableCell& c : g.cells) n_content += cell_has_content(c) ? 1 : 0;
  if (texts.size() != n_content) {
    throw std::invalid_argument("assemble_html: " + std::to_string(texts.size()) +
                                " texts for " + std::to_string(n_content) +
                                " content cells");
  }

  std::vector<std::vector<const TableCell*>> rows(g.n_rows);
  for (std::size_t i : structure_order(g)) {
    rows[g.cells[i].row].push_back(&g.cells[i]);
  }

  std::string out = "<table>";
  std::size_t next_text = 0;
  auto emit_rows = [&](int r0, int r1) {
    for (int r = r0; r < r1; ++r) {
      out += "<tr>";
      for (const TableCell* c : rows[r]) {
        out += "<td";
        if (c->rowspan > 1) out += " rowspan=\"" + std::to_string(c->rowspan) + "\"";
        if (c->colspan > 1) out += " colspan=\"" + std::to_string(c->colspan) + "\"";
        out += ">";
        if (cell_has_content(*c)) out += escape_text(texts[next_text++]);
        out += "</td>";
      }
      out += "</tr>";
    }
  };
  if (g.header_rows > 0) {
    out += "<thead>";
    emit_rows(0, g.header_rows);
    out += "</thead>";
  }
  out += "<tbody>";  // canonical form always carries a body section
  emit_rows(g.header_rows, g.n_rows);
  out += "</tbody></table>";
  return out;
}

std::string canonicalize_html(const std::string& html) {
  const TableGrid g = html_to_grid(html);
  return assemble_html(g, content_cell_texts(g));
}

std::vector<StructuredSequence> build_table_content_targets(
    const TableGrid& g, const Vocabulary& vocab, const QuantizerConfig& cfg,
    const SequenceLimits& limits) {
  validate_grid(g);
  check_content_consistency(g);
  std::vector<StructuredSequence> out;
  for (std::size_t i : structure_order(g)) {
    const TableCell& c = g.cells[i];
    if (!cell_has_content(c)) continue;
    out.push_back(build_content_sequence_at(*c.center, c.text, vocab, cfg, limits));
  }
  return out;
}

bool same_structure(const TableGrid& a, const TableGrid& b,
                    const QuantizerConfig& cfg) {
  if (a.n_rows != b.n_rows || a.n_cols != b.n_cols ||
      a.header_rows != b.header_rows || a.cells.size() != b.cells.size()) {
    return false;
  }
  const auto oa = structure_order(a);
  const auto ob = structure_order(b);
  for (std::size_t i = 0; i < oa.size(); ++i) {
    const TableCell& ca = a.cells[oa[i]];
    const TableCell& cb = b.cells[ob[i]];
    if (ca.row != cb.row || ca.col != cb.col || ca.rowspan != cb.rowspan ||
        ca.colspan != cb.colspan ||
        cell_has_content(ca) != cell_has_content(cb)) {
      return false;
    }
    if (cell_has_content(ca) &&
        quantize_point(*ca.center, cfg) != quantize_point(*cb.center, cfg)) {
      return false;
    }
  }
  return true;
}

}  // namespace vstp
