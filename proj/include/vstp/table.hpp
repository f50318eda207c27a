#pragma once

#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "vstp/codec.hpp"
#include "vstp/geometry.hpp"
#include "vstp/vocab.hpp"

namespace vstp {

// One logical cell.  (row, col) anchor the top-left slot, spans extend right
// and down.  `center` is the cell text box center; present iff the cell has
// content.
struct TableCell {
  int row = 0, col = 0;
  int rowspan = 1, colspan = 1;
  std::string text;
  std::optional<Point> center;
};

struct TableGrid {
  int n_rows = 0, n_cols = 0;
  int header_rows = 0;  // rows rendered inside <thead>
  std::vector<TableCell> cells;
};

// Non-emptiness as the token stream sees it: a content point exists.
// For ground-truth grids this coincides with text being non-empty.
bool cell_has_content(const TableCell& cell);

// Structural validation: spans >= 1, rectangles in bounds, exact tiling of
// n_rows x n_cols, header_rows <= n_rows.  Throws std::invalid_argument.
void validate_grid(const TableGrid& g);

// Additionally require center present iff text non-empty (GT form).
void check_content_consistency(const TableGrid& g);

// Anchor-cell indices in row-major order; equals token emission order.
std::vector<std::size_t> structure_order(const TableGrid& g);

// Texts of content cells in structure order (assemble_html's `texts` shape).
std::vector<std::string> content_cell_texts(const TableGrid& g);

class HtmlParseError : public std::runtime_error {
 public:
  HtmlParseError(const std::string& msg, std::size_t position_)
      : std::runtime_error(msg + " at offset " + std::to_string(position_)),
        position(position_) {}
  std::size_t position;
};

// Parses the supported subset (table/thead/tbody/tr/td, rowspan/colspan,
// plain text).  Cell anchors follow standard HTML flow.  Centers for
// non-empty cells are synthesized at the cell rectangle center so the grid
// satisfies the content invariant (HTML carries no point annotation).
TableGrid html_to_grid(const std::string& html);

// GT token stream: BOS + sections/rows/cells with merged labels, span
// attribute tokens, and center points after each non-empty cell's closing
// token.  Coordinates quantize via cfg.  Throws when a span exceeds max_span.
std::vector<std::string> grid_to_structure_tokens(const TableGrid& g,
                                                  const QuantizerConfig& cfg,
                                                  int max_span = 10);

// Same stream as vocabulary ids (k = 1, BOS-led).
StructuredSequence table_structure_sequence(const TableGrid& g,
                                            const Vocabulary& vocab,
                                            const QuantizerConfig& cfg,
                                            const SequenceLimits& limits = {});

struct TokenGridParse {
  TableGrid grid;  // texts empty; centers mark non-empty cells
  std::vector<std::string> diagnostics;
};

// Total inverse of grid_to_structure_tokens; malformed streams recover with
// diagnostics (drop stray coords, terminate broken spanning groups, fill
// uncovered slots with empty cells, clamp runaway spans).
TokenGridParse structure_tokens_to_grid(std::span<const std::string> tokens,
                                        const QuantizerConfig& cfg);

// Canonical serialization: no inter-tag whitespace, double-quoted attributes,
// rowspan before colspan, cell text escaped (& < >).  `texts` pairs with
// content cells in structure order.
std::string assemble_html(const TableGrid& g, std::span<const std::string> texts);

// Convenience: html -> grid -> canonical html.
std::string canonicalize_html(const std::string& html);

// One content sequence per content cell, in structure order.
std::vector<StructuredSequence> build_table_content_targets(
    const TableGrid& g, const Vocabulary& vocab, const QuantizerConfig& cfg,
    const SequenceLimits& limits = {});

// Structure equality after quantization: same shape, header split, anchors,
// spans, content flags, and quantized centers.
bool same_structure(const TableGrid& a, const TableGrid& b,
                    const QuantizerConfig& cfg);

}  // namespace vstp
