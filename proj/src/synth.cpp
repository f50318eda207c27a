#include "vstp/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace vstp {

EntitySchema SynthConfig::default_entity_schema() {
  EntitySchema schema;
  schema.classes = {"company", "date", "total", "item"};
  return schema;
}

void validate_config(const SynthConfig& cfg) {
  if (cfg.grid_size < 8) {
    throw std::invalid_argument("synth config: grid_size must be >= 8");
  }
  if (cfg.min_instances < 1 || cfg.max_instances < cfg.min_instances) {
    throw std::invalid_argument("synth config: bad instance count range");
  }
  if (cfg.min_word_len < 1 || cfg.max_word_len < cfg.min_word_len) {
    throw std::invalid_argument("synth config: bad word length range");
  }
  if (cfg.min_rows < 1 || cfg.max_rows < cfg.min_rows || cfg.min_cols < 1 ||
      cfg.max_cols < cfg.min_cols) {
    throw std::invalid_argument("synth config: bad table shape range");
  }
  if (cfg.max_gen_span < 1) {
    throw std::invalid_argument("synth config: max_gen_span must be >= 1");
  }
  if (cfg.max_word_len > cfg.grid_size / 2) {
    throw std::invalid_argument("synth config: words would not fit the grid");
  }
  if (cfg.task_mix.empty()) {
    throw std::invalid_argument("synth config: empty task mix");
  }
  if (cfg.schema.classes.empty()) {
    throw std::invalid_argument("synth config: entity schema has no classes");
  }
}

namespace {

// Occupancy bookkeeping on the integer cell grid.  Words occupy one row of
// cells; a one-cell margin keeps neighbouring words apart.
class Layout {
 public:
  explicit Layout(int size) : size_(size), used_(static_cast<std::size_t>(size) * size, 0) {}

  bool fits(int row, int col, int len) const {
    if (row < 0 || row >= size_ || col < 0 || col + len > size_) return false;
    for (int c = std::max(0, col - 1); c < std::min(size_, col + len + 1); ++c) {
      if (used_[static_cast<std::size_t>(row) * size_ + c]) return false;
    }
    return true;
  }

  void take(int row, int col, int len) {
    for (int c = col; c < col + len; ++c) {
      used_[static_cast<std::size_t>(row) * size_ + c] = 1;
    }
  }

  // Random free slot for a word of `len` cells; bounded retries.
  std::pair<int, int> place(Rng& rng, int len) {
    for (int attempt = 0; attempt < 200; ++attempt) {
      const int row = static_cast<int>(rng.uniform_int(0, size_ - 1));
      const int col = static_cast<int>(rng.uniform_int(0, size_ - len));
      if (fits(row, col, len)) {
        take(row, col, len);
        return {row, col};
      }
    }
    throw std::runtime_error("sample generation: word placement failed");
  }

  int size() const { return size_; }

 private:
  int size_;
  std::vector<char> used_;
};

std::string random_word(Rng& rng, const SynthConfig& cfg, int max_len = -1) {
  int hi = cfg.max_word_len;
  if (max_len > 0) hi = std::min(hi, max_len);
  const int lo = std::min(cfg.min_word_len, hi);
  const int len = static_cast<int>(rng.uniform_int(lo, hi));
  std::string word;
  for (int i = 0; i < len; ++i) {
    word.push_back(static_cast<char>('a' + rng.uniform_int(0, 25)));
  }
  return word;
}

TextInstance word_instance(int row, int col, const std::string& text, int grid) {
  TextInstance inst;
  const double cell = 1.0 / grid;
  inst.polygon = box_polygon(col * cell, row * cell,
                             (col + static_cast<int>(text.size())) * cell,
                             (row + 1) * cell);
  inst.text = text;
  return inst;
}

void gen_spotting(Rng& rng, const SynthConfig& cfg, Sample& s) {
  Layout layout(cfg.grid_size);
  const int n =
      static_cast<int>(rng.uniform_int(cfg.min_instances, cfg.max_instances));
  for (int i = 0; i < n; ++i) {
    const std::string word = random_word(rng, cfg);
    const auto [row, col] = layout.place(rng, static_cast<int>(word.size()));
    s.instances.push_back(word_instance(row, col, word, cfg.grid_size));
  }
}

void gen_kie(Rng& rng, const SynthConfig& cfg, Sample& s) {
  Layout layout(cfg.grid_size);
  const int n_groups = static_cast<int>(
      rng.uniform_int(cfg.min_instances, cfg.max_instances));
  for (int g = 0; g < n_groups; ++g) {
    const std::string& cls = cfg.schema.classes[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<int>(cfg.schema.classes.size()) - 1))];
    const int words = static_cast<int>(rng.uniform_int(1, 2));
    // multi-word values sit on one row with a single-cell gap
    std::vector<std::string> texts;
    int total = 0;
    for (int w = 0; w < words; ++w) {
      texts.push_back(random_word(rng, cfg));
      total += static_cast<int>(texts.back().size()) + (w > 0 ? 1 : 0);
    }
    int row = -1, col = -1;
    for (int attempt = 0; attempt < 200 && row < 0; ++attempt) {
      const int r = static_cast<int>(rng.uniform_int(0, cfg.grid_size - 1));
      const int c = static_cast<int>(rng.uniform_int(0, cfg.grid_size - total));
      if (layout.fits(r, c, total)) {
        layout.take(r, c, total);
        row = r;
        col = c;
      }
    }
    if (row < 0) throw std::runtime_error("sample generation: word placement failed");
    for (const std::string& text : texts) {
      TextInstance inst = word_instance(row, col, text, cfg.grid_size);
      inst.entity = cls;
      inst.line_id = g;
      s.instances.push_back(inst);
      col += static_cast<int>(text.size()) + 1;
    }
  }
}

void gen_hiertext(Rng& rng, const SynthConfig& cfg, Sample& s) {
  Layout layout(cfg.grid_size);
  const int n_paras = static_cast<int>(rng.uniform_int(1, 3));
  int row = static_cast<int>(rng.uniform_int(0, 2));
  int line_id = 0;
  for (int p = 0; p < n_paras && row < cfg.grid_size; ++p) {
    const int n_lines = static_cast<int>(rng.uniform_int(1, 2));
    for (int l = 0; l < n_lines && row < cfg.grid_size; ++l) {
      const int words = static_cast<int>(rng.uniform_int(1, 3));
      int col = static_cast<int>(rng.uniform_int(0, 4));
      for (int w = 0; w < words; ++w) {
        const std::string text =
            random_word(rng, cfg, cfg.grid_size - col - 1);
        if (col + static_cast<int>(text.size()) > cfg.grid_size) break;
        layout.take(row, col, static_cast<int>(text.size()));
        TextInstance inst = word_instance(row, col, text, cfg.grid_size);
        inst.line_id = line_id;
        inst.para_id = p;
        s.instances.push_back(inst);
        col += static_cast<int>(text.size()) + 1;
      }
      ++line_id;
      row += 1;  // next line directly below
    }
    row += 2;  // paragraph gap
  }
}

void gen_table(Rng& rng, const SynthConfig& cfg, Sample& s) {
  TableGrid g;
  g.n_rows = static_cast<int>(rng.uniform_int(cfg.min_rows, cfg.max_rows));
  g.n_cols = static_cast<int>(rng.uniform_int(cfg.min_cols, cfg.max_cols));
  std::vector<char> used(static_cast<std::size_t>(g.n_rows) * g.n_cols, 0);
  auto slot = [&](int r, int c) -> char& {
    return used[static_cast<std::size_t>(r) * g.n_cols + c];
  };
  for (int r = 0; r < g.n_rows; ++r) {
    for (int c = 0; c < g.n_cols; ++c) {
      if (slot(r, c)) continue;
      int rs = 1, cs = 1;
      if (rng.uniform() < cfg.span_prob) {
        int max_cs = 0;
        while (c + max_cs < g.n_cols && !slot(r, c + max_cs)) ++max_cs;
        cs = static_cast<int>(
            rng.uniform_int(1, std::min(max_cs, cfg.max_gen_span)));
        int max_rs = 1;
        while (r + max_rs < g.n_rows) {
          bool free_row = true;
          for (int cc = c; cc < c + cs; ++cc) {
            if (slot(r + max_rs, cc)) free_row = false;
          }
          if (!free_row) break;
          ++max_rs;
        }
        rs = static_cast<int>(
            rng.uniform_int(1, std::min(max_rs, cfg.max_gen_span)));
      }
      TableCell cell;
      cell.row = r;
      cell.col = c;
      cell.rowspan = rs;
      cell.colspan = cs;
      if (rng.uniform() >= cfg.empty_cell_prob) {
        const int cell_cells = cs * cfg.grid_size / g.n_cols;
        cell.text = random_word(rng, cfg, std::max(1, cell_cells - 1));
        cell.center = Point{(c + cs / 2.0) / g.n_cols, (r + rs / 2.0) / g.n_rows};
      }
      for (int rr = r; rr < r + rs; ++rr) {
        for (int cc = c; cc < c + cs; ++cc) slot(rr, cc) = 1;
      }
      g.cells.push_back(cell);
    }
  }
  g.header_rows = static_cast<int>(rng.uniform_int(0, g.n_rows > 1 ? 1 : 0));
  validate_grid(g);
  check_content_consistency(g);

  // every non-empty cell doubles as a text instance over its rectangle
  for (std::size_t i : structure_order(g)) {
    const TableCell& c = g.cells[i];
    if (!cell_has_content(c)) continue;
    TextInstance inst;
    inst.polygon = box_polygon(
        static_cast<double>(c.col) / g.n_cols,
        static_cast<double>(c.row) / g.n_rows,
        static_cast<double>(c.col + c.colspan) / g.n_cols,
        static_cast<double>(c.row + c.rowspan) / g.n_rows);
    inst.text = c.text;
    s.instances.push_back(inst);
  }
  s.table = std::move(g);
}

}  // namespace

Sample generate_sample(Rng& rng, const SynthConfig& cfg, Task task) {
  validate_config(cfg);
  Sample s;
  s.task = task;
  s.width = cfg.grid_size;
  s.height = cfg.grid_size;
  switch (task) {
    case Task::spotting: gen_spotting(rng, cfg, s); break;
    case Task::kie: gen_kie(rng, cfg, s); break;
    case Task::table: gen_table(rng, cfg, s); break;
    case Task::hiertext: gen_hiertext(rng, cfg, s); break;
  }
  return s;
}

std::vector<Sample> generate_corpus(const SynthConfig& cfg, Task task, int n) {
  validate_config(cfg);
  Rng root(cfg.seed ^ (0x517CC1B727220A95ull *
                       (static_cast<std::uint64_t>(task) + 1)));
  std::vector<Sample> out;
  for (int i = 0; i < n; ++i) {
    Rng child = root.fork();
    Sample s = generate_sample(child, cfg, task);
    s.id = to_string(task) + "-" + std::to_string(i);
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<Sample> generate_mixed_corpus(const SynthConfig& cfg, int n) {
  validate_config(cfg);
  Rng root(cfg.seed);
  std::vector<Sample> out;
  for (int i = 0; i < n; ++i) {
    const Task task = cfg.task_mix[static_cast<std::size_t>(i) % cfg.task_mix.size()];
    Rng child = root.fork();
    Sample s = generate_sample(child, cfg, task);
    s.id = to_string(task) + "-" + std::to_string(i);
    out.push_back(std::move(s));
  }
  return out;
}

// --- feature grid ---------------------------------------------------------------

ImageGrid ImageGrid::zeros(int h, int w, int c) {
  ImageGrid g;
  g.height = h;
  g.width = w;
  g.channels = c;
  g.values.assign(static_cast<std::size_t>(h) * w * c, 0.0f);
  return g;
}

std::array<float, kCharFeatureChannels> char_signature(char32_t cp) {
  Rng rng(0x5161C0DEull ^
          (static_cast<std::uint64_t>(cp) * 0x9E3779B97F4A7C15ull));
  std::array<float, kCharFeatureChannels> v{};
  double norm = 0.0;
  for (float& x : v) {
    const double g = rng.normal();
    x = static_cast<float>(g);
    norm += g * g;
  }
  const float scale = norm > 0.0 ? static_cast<float>(1.0 / std::sqrt(norm)) : 1.0f;
  for (float& x : v) x *= scale;
  return v;
}

ImageGrid render_feature_grid(const Sample& sample, const SynthConfig& cfg) {
  const int size = cfg.grid_size;
  ImageGrid g = ImageGrid::zeros(size, size, kGridChannels);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      g.at(y, x, kCharFeatureChannels + kExtentChannels) =
          static_cast<float>((x + 0.5) / size);
      g.at(y, x, kCharFeatureChannels + kExtentChannels + 1) =
          static_cast<float>((y + 0.5) / size);
    }
  }

  for (const TextInstance& inst : sample.instances) {
    double x0 = 1.0, y0 = 1.0, x1 = 0.0, y1 = 0.0;
    for (const Point& p : inst.polygon) {
      x0 = std::min(x0, p.x);
      y0 = std::min(y0, p.y);
      x1 = std::max(x1, p.x);
      y1 = std::max(y1, p.y);
    }
    // cells whose centers the box covers (half-open on the far edge)
    std::vector<std::pair<int, int>> cells;
    for (int y = 0; y < size; ++y) {
      const double cy = (y + 0.5) / size;
      if (cy < y0 || cy >= y1) continue;
      for (int x = 0; x < size; ++x) {
        const double cx = (x + 0.5) / size;
        if (cx >= x0 && cx < x1) cells.emplace_back(y, x);
      }
    }
    if (cells.empty()) {
      const int y = std::clamp(static_cast<int>((y0 + y1) * 0.5 * size), 0, size - 1);
      const int x = std::clamp(static_cast<int>((x0 + x1) * 0.5 * size), 0, size - 1);
      cells.emplace_back(y, x);
    }
    const std::vector<char32_t> cps = utf8_codepoints(inst.text);
    for (const auto& [y, x] : cells) {
      for (std::size_t i = 0; i < cps.size(); ++i) {
        const auto sig = char_signature(cps[i]);
        const float w = 1.0f / static_cast<float>(1 + i);
        for (int c = 0; c < kCharFeatureChannels; ++c) {
          g.at(y, x, c) += w * sig[static_cast<std::size_t>(c)];
        }
      }
      g.at(y, x, kCharFeatureChannels) += static_cast<float>(x1 - x0);
      g.at(y, x, kCharFeatureChannels + 1) += static_cast<float>(y1 - y0);
    }
  }
  return g;
}

// --- JSONL I/O -------------------------------------------------------------------

nlohmann::json instance_to_json(const TextInstance& t) {
  nlohmann::json poly = nlohmann::json::array();
  for (const Point& p : t.polygon) poly.push_back({p.x, p.y});
  nlohmann::json j{{"polygon", std::move(poly)}, {"text", t.text}};
  if (t.entity) j["entity"] = *t.entity;
  if (t.line_id) j["line_id"] = *t.line_id;
  if (t.para_id) j["para_id"] = *t.para_id;
  return j;
}

TextInstance instance_from_json(const nlohmann::json& j) {
  TextInstance t;
  const auto& poly = j.at("polygon");
  if (!poly.is_array() || poly.size() != 16) {
    throw std::invalid_argument("polygon must hold 16 points");
  }
  for (std::size_t i = 0; i < 16; ++i) {
    const auto& p = poly[i];
    if (!p.is_array() || p.size() != 2) {
      throw std::invalid_argument("polygon points must be [x, y]");
    }
    t.polygon[i] = {p[0].get<double>(), p[1].get<double>()};
    if (!(t.polygon[i].x >= 0.0 && t.polygon[i].x <= 1.0 &&
          t.polygon[i].y >= 0.0 && t.polygon[i].y <= 1.0)) {
      throw std::invalid_argument("polygon coordinates outside [0, 1]");
    }
  }
  t.text = j.at("text").get<std::string>();
  if (j.contains("entity")) t.entity = j["entity"].get<std::string>();
  if (j.contains("line_id")) t.line_id = j["line_id"].get<int>();
  if (j.contains("para_id")) t.para_id = j["para_id"].get<int>();
  return t;
}

namespace {

nlohmann::json table_to_json(const TableGrid& g) {
  nlohmann::json cells = nlohmann::json::array();
  for (const TableCell& c : g.cells) {
    nlohmann::json jc{{"row", c.row},
                      {"col", c.col},
                      {"rowspan", c.rowspan},
                      {"colspan", c.colspan},
                      {"text", c.text}};
    if (c.center) jc["center"] = {c.center->x, c.center->y};
    cells.push_back(std::move(jc));
  }
  return nlohmann::json{{"n_rows", g.n_rows},
                        {"n_cols", g.n_cols},
                        {"header_rows", g.header_rows},
                        {"cells", std::move(cells)}};
}

TableGrid table_from_json(const nlohmann::json& j) {
  TableGrid g;
  g.n_rows = j.at("n_rows").get<int>();
  g.n_cols = j.at("n_cols").get<int>();
  g.header_rows = j.at("header_rows").get<int>();
  for (const auto& jc : j.at("cells")) {
    TableCell c;
    c.row = jc.at("row").get<int>();
    c.col = jc.at("col").get<int>();
    c.rowspan = jc.at("rowspan").get<int>();
    c.colspan = jc.at("colspan").get<int>();
    c.text = jc.at("text").get<std::string>();
    if (jc.contains("center")) {
      const auto& p = jc["center"];
      c.center = Point{p.at(0).get<double>(), p.at(1).get<double>()};
    }
    g.cells.push_back(std::move(c));
  }
  validate_grid(g);
  check_content_consistency(g);
  return g;
}

}  // namespace

std::string sample_to_json_line(const Sample& s) {
  nlohmann::json instances = nlohmann::json::array();
  for (const TextInstance& t : s.instances) instances.push_back(instance_to_json(t));
  nlohmann::json j{{"id", s.id},
                   {"task", to_string(s.task)},
                   {"width", s.width},
                   {"height", s.height},
                   {"instances", std::move(instances)}};
  if (s.table) j["table"] = table_to_json(*s.table);
  return j.dump();
}

Sample sample_from_json_line(const std::string& line) {
  const nlohmann::json j = nlohmann::json::parse(line);
  Sample s;
  s.id = j.at("id").get<std::string>();
  s.task = task_from_string(j.at("task").get<std::string>());
  s.width = j.at("width").get<int>();
  s.height = j.at("height").get<int>();
  for (const auto& ji : j.at("instances")) {
    s.instances.push_back(instance_from_json(ji));
  }
  if (j.contains("table")) s.table = table_from_json(j["table"]);
  return s;
}

void write_jsonl(const std::string& path, std::span<const Sample> samples) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  for (const Sample& s : samples) out << sample_to_json_line(s) << '\n';
  if (!out) throw std::runtime_error("write to '" + path + "' failed");
}

std::vector<Sample> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::vector<Sample> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;  // tolerate blank lines
    try {
      out.push_back(sample_from_json_line(line));
    } catch (const std::exception& e) {
      throw std::runtime_error(path + " line " + std::to_string(line_no) +
                               ": " + e.what());
    }
  }
  return out;
}

}  // namespace vstp
