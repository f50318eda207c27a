#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "vstp/codec.hpp"
#include "vstp/metrics.hpp"
#include "vstp/synth.hpp"
#include "vstp/table.hpp"

using namespace vstp;

namespace {

const QuantizerConfig qcfg{};

std::vector<std::string> corpus_lines(const std::vector<Sample>& samples) {
  std::vector<std::string> lines;
  for (const Sample& s : samples) lines.push_back(sample_to_json_line(s));
  return lines;
}

}  // namespace

TEST_CASE("config validation rejects bad ranges") {
  SynthConfig cfg;
  CHECK_NOTHROW(validate_config(cfg));

  SynthConfig bad = cfg;
  bad.min_instances = 0;
  CHECK_THROWS_AS(validate_config(bad), std::invalid_argument);

  bad = cfg;
  bad.max_instances = bad.min_instances - 1;
  CHECK_THROWS_AS(validate_config(bad), std::invalid_argument);

  bad = cfg;
  bad.min_word_len = 0;
  CHECK_THROWS_AS(validate_config(bad), std::invalid_argument);

  bad = cfg;
  bad.max_word_len = 20;  // > grid_size / 2
  CHECK_THROWS_AS(validate_config(bad), std::invalid_argument);

  bad = cfg;
  bad.max_rows = 0;
  CHECK_THROWS_AS(validate_config(bad), std::invalid_argument);

  bad = cfg;
  bad.max_gen_span = 0;
  CHECK_THROWS_AS(validate_config(bad), std::invalid_argument);

  bad = cfg;
  bad.task_mix.clear();
  CHECK_THROWS_AS(validate_config(bad), std::invalid_argument);

  bad = cfg;
  bad.schema.classes.clear();
  CHECK_THROWS_AS(validate_config(bad), std::invalid_argument);
}

TEST_CASE("corpora are deterministic in the seed") {
  SynthConfig cfg;
  cfg.seed = 7;
  for (Task task : {Task::spotting, Task::kie, Task::table, Task::hiertext}) {
    CAPTURE(to_string(task));
    const auto a = corpus_lines(generate_corpus(cfg, task, 10));
    const auto b = corpus_lines(generate_corpus(cfg, task, 10));
    REQUIRE(a == b);

    SynthConfig other = cfg;
    other.seed = 8;
    const auto c = corpus_lines(generate_corpus(other, task, 10));
    CHECK(a != c);
  }
  const auto m1 = corpus_lines(generate_mixed_corpus(cfg, 12));
  const auto m2 = corpus_lines(generate_mixed_corpus(cfg, 12));
  CHECK(m1 == m2);
}

TEST_CASE("spotting samples honor counts, bounds, and spacing") {
  SynthConfig cfg;
  cfg.seed = 21;
  const auto corpus = generate_corpus(cfg, Task::spotting, 40);
  REQUIRE(corpus.size() == 40);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const Sample& s = corpus[i];
    CHECK(s.id == "spotting-" + std::to_string(i));
    CHECK(s.task == Task::spotting);
    const int n = static_cast<int>(s.instances.size());
    CHECK(n >= cfg.min_instances);
    CHECK(n <= cfg.max_instances);

    std::set<std::pair<int, int>> bins;
    for (const TextInstance& inst : s.instances) {
      CHECK(!inst.entity);
      CHECK(!inst.line_id);
      const int len = static_cast<int>(inst.text.size());
      CHECK(len >= cfg.min_word_len);
      CHECK(len <= cfg.max_word_len);
      for (char c : inst.text) CHECK((c >= 'a' && c <= 'z'));
      for (const Point& p : inst.polygon) {
        CHECK(p.x >= 0.0);
        CHECK(p.x <= 1.0);
        CHECK(p.y >= 0.0);
        CHECK(p.y <= 1.0);
      }
      const QuantizedPoint q = quantize_point(instance_center(inst), qcfg);
      CHECK(bins.insert({q.x, q.y}).second);  // centers on distinct bins
    }
    // grid snapping leaves a gap between any two boxes
    for (std::size_t a = 0; a < s.instances.size(); ++a) {
      for (std::size_t b = a + 1; b < s.instances.size(); ++b) {
        CHECK(polygon_iou(s.instances[a].polygon, s.instances[b].polygon) ==
              0.0);
      }
    }
  }
}

TEST_CASE("generation fails loudly when words cannot be placed") {
  SynthConfig cfg;
  cfg.grid_size = 8;
  cfg.min_word_len = cfg.max_word_len = 4;
  cfg.min_instances = cfg.max_instances = 20;  // 8 rows can hold at most 8
  Rng rng(3);
  CHECK_THROWS_AS(generate_sample(rng, cfg, Task::spotting),
                  std::runtime_error);
}

TEST_CASE("every task's samples feed its stage-1 builder") {
  SynthConfig cfg;
  cfg.seed = 33;
  const auto vocab_for = [&](Task t) {
    return Vocabulary::build(qcfg.n_bins, t, {cfg.schema.classes, 10});
  };
  const PromptSpec prompt = default_prompt(qcfg);

  SUBCASE("spotting") {
    const auto vocab = vocab_for(Task::spotting);
    for (const Sample& s : generate_corpus(cfg, Task::spotting, 25)) {
      const auto seq = build_spotting_stage1(s.instances, prompt, vocab, qcfg);
      const auto parse = parse_stage1(seq, vocab);
      CHECK(parse.diagnostics.empty());
      REQUIRE(parse.points.size() == s.instances.size());
      const auto order = raster_order(s.instances, qcfg);
      for (std::size_t i = 0; i < order.size(); ++i) {
        const QuantizedPoint q =
            quantize_point(instance_center(s.instances[order[i]]), qcfg);
        CHECK(parse.points[i] == q);
      }
    }
  }

  SUBCASE("kie") {
    const auto vocab = vocab_for(Task::kie);
    for (const Sample& s : generate_corpus(cfg, Task::kie, 25)) {
      std::set<std::pair<std::string, int>> group_keys;
      for (const TextInstance& inst : s.instances) {
        REQUIRE(inst.entity.has_value());
        REQUIRE(inst.line_id.has_value());
        CHECK(std::count(cfg.schema.classes.begin(), cfg.schema.classes.end(),
                         *inst.entity) == 1);
        group_keys.insert({*inst.entity, *inst.line_id});
      }
      const auto seq = build_kie_stage1(s.instances, prompt, vocab, qcfg);
      const auto parse = parse_stage1(seq, vocab);
      CHECK(parse.diagnostics.empty());
      CHECK(parse.groups.size() == group_keys.size());
      std::size_t members = 0;
      for (const EntityGroup& g : parse.groups) {
        CHECK(std::count(cfg.schema.classes.begin(), cfg.schema.classes.end(),
                         g.cls) == 1);
        members += g.points.size();
      }
      CHECK(members == s.instances.size());
    }
  }

  SUBCASE("hiertext") {
    const auto vocab = vocab_for(Task::hiertext);
    for (const Sample& s : generate_corpus(cfg, Task::hiertext, 25)) {
      std::map<int, std::set<int>> lines_per_para;
      for (const TextInstance& inst : s.instances) {
        REQUIRE(inst.line_id.has_value());
        REQUIRE(inst.para_id.has_value());
        lines_per_para[*inst.para_id].insert(*inst.line_id);
      }
      const auto seq = build_hier_stage1(s.instances, vocab, qcfg);
      const auto parse = parse_stage1(seq, vocab);
      CHECK(parse.diagnostics.empty());
      REQUIRE(parse.paragraphs.size() == lines_per_para.size());
      std::size_t words = 0;
      for (const auto& para : parse.paragraphs) {
        CHECK(!para.empty());
        for (const auto& line : para) {
          CHECK(!line.empty());
          words += line.size();
        }
      }
      CHECK(words == s.instances.size());
    }
  }

  SUBCASE("table") {
    const auto vocab = vocab_for(Task::table);
    for (const Sample& s : generate_corpus(cfg, Task::table, 25)) {
      REQUIRE(s.table.has_value());
      CHECK_NOTHROW(validate_grid(*s.table));
      CHECK_NOTHROW(check_content_consistency(*s.table));
      CHECK(s.table->n_rows <= cfg.max_rows);
      CHECK(s.table->n_cols <= cfg.max_cols);

      // instances mirror the content cells, texts in structure order
      const auto texts = content_cell_texts(*s.table);
      REQUIRE(s.instances.size() == texts.size());
      for (std::size_t i = 0; i < texts.size(); ++i) {
        CHECK(s.instances[i].text == texts[i]);
      }

      const auto seq = table_structure_sequence(*s.table, vocab, qcfg);
      CHECK(seq.k == 1);
      const auto content = build_table_content_targets(*s.table, vocab, qcfg);
      CHECK(content.size() == texts.size());
    }
  }
}

TEST_CASE("table samples roundtrip tokens and html exactly") {
  SynthConfig cfg;
  cfg.seed = 5;
  for (const Sample& s : generate_corpus(cfg, Task::table, 30)) {
    const TableGrid& g = *s.table;
    const auto tokens = grid_to_structure_tokens(g, qcfg);
    const auto back = structure_tokens_to_grid(tokens, qcfg);
    CHECK(back.diagnostics.empty());
    CHECK(same_structure(back.grid, g, qcfg));

    const auto texts = content_cell_texts(g);
    const std::string html = assemble_html(g, texts);
    const std::string html2 = assemble_html(back.grid, texts);
    std::vector<std::string> diags;
    CHECK(teds(html2, html, /*structure_only=*/true, &diags) == 1.0);
    CHECK(teds(html2, html, /*structure_only=*/false, &diags) == 1.0);
    CHECK(diags.empty());
    CHECK(canonicalize_html(html) == html);
  }
}

TEST_CASE("char signatures are fixed unit vectors") {
  const auto a1 = char_signature(U'a');
  const auto a2 = char_signature(U'a');
  CHECK(a1 == a2);
  const auto b = char_signature(U'b');
  CHECK(a1 != b);
  double norm = 0.0;
  for (float v : a1) norm += static_cast<double>(v) * v;
  CHECK(norm == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("empty samples render only the positional channels") {
  SynthConfig cfg;
  Sample empty;
  empty.task = Task::spotting;
  const ImageGrid g = render_feature_grid(empty, cfg);
  REQUIRE(g.height == cfg.grid_size);
  REQUIRE(g.width == cfg.grid_size);
  REQUIRE(g.channels == kGridChannels);
  for (int y = 0; y < g.height; ++y) {
    for (int x = 0; x < g.width; ++x) {
      for (int c = 0; c < kCharFeatureChannels + kExtentChannels; ++c) {
        CHECK(g.at(y, x, c) == 0.0f);
      }
      CHECK(g.at(y, x, 26) ==
            doctest::Approx((x + 0.5) / cfg.grid_size).epsilon(1e-7));
      CHECK(g.at(y, x, 27) ==
            doctest::Approx((y + 0.5) / cfg.grid_size).epsilon(1e-7));
    }
  }
}

TEST_CASE("a single word stamps exactly its covered cells") {
  SynthConfig cfg;
  Sample s;
  s.task = Task::spotting;
  const int row = 5, col = 9;
  const std::string word = "abc";
  const double cell = 1.0 / cfg.grid_size;
  TextInstance inst;
  inst.polygon = box_polygon(col * cell, row * cell,
                             (col + 3) * cell, (row + 1) * cell);
  inst.text = word;
  s.instances.push_back(inst);

  const ImageGrid g = render_feature_grid(s, cfg);
  for (int y = 0; y < g.height; ++y) {
    for (int x = 0; x < g.width; ++x) {
      const bool covered = (y == row) && (x >= col && x < col + 3);
      if (covered) {
        CHECK(g.at(y, x, kCharFeatureChannels) ==
              doctest::Approx(3.0 * cell));  // width
        CHECK(g.at(y, x, kCharFeatureChannels + 1) ==
              doctest::Approx(1.0 * cell));  // height
        double mass = 0.0;
        for (int c = 0; c < kCharFeatureChannels; ++c) {
          mass += std::abs(g.at(y, x, c));
        }
        CHECK(mass > 0.0);
      } else {
        for (int c = 0; c < kCharFeatureChannels + kExtentChannels; ++c) {
          CHECK(g.at(y, x, c) == 0.0f);
        }
      }
    }
  }
}

TEST_CASE("feature rendering is invariant to instance order") {
  SynthConfig cfg;
  cfg.seed = 13;
  for (Task task : {Task::spotting, Task::kie, Task::table, Task::hiertext}) {
    CAPTURE(to_string(task));
    Rng rng(99);
    const Sample s = generate_sample(rng, cfg, task);
    Sample shuffled = s;
    std::reverse(shuffled.instances.begin(), shuffled.instances.end());
    const ImageGrid a = render_feature_grid(s, cfg);
    const ImageGrid b = render_feature_grid(shuffled, cfg);
    REQUIRE(a.values.size() == b.values.size());
    CHECK(a.values == b.values);
  }
}

TEST_CASE("jsonl roundtrip is the identity") {
  SynthConfig cfg;
  cfg.seed = 11;
  const auto corpus = generate_mixed_corpus(cfg, 16);
  const auto path =
      std::filesystem::temp_directory_path() / "vstp_synth_test.jsonl";
  write_jsonl(path.string(), corpus);
  const auto back = read_jsonl(path.string());
  std::filesystem::remove(path);

  REQUIRE(back.size() == corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    CHECK(sample_to_json_line(back[i]) == sample_to_json_line(corpus[i]));
    // coordinates survive exactly, so quantized tokens cannot drift
    REQUIRE(back[i].instances.size() == corpus[i].instances.size());
    for (std::size_t j = 0; j < corpus[i].instances.size(); ++j) {
      const auto& p = corpus[i].instances[j].polygon;
      const auto& q = back[i].instances[j].polygon;
      for (std::size_t v = 0; v < p.size(); ++v) {
        CHECK(p[v].x == q[v].x);
        CHECK(p[v].y == q[v].y);
      }
      CHECK(quantize_point(instance_center(back[i].instances[j]), qcfg) ==
            quantize_point(instance_center(corpus[i].instances[j]), qcfg));
    }
  }
}

TEST_CASE("jsonl errors carry line numbers and key names") {
  const auto path =
      std::filesystem::temp_directory_path() / "vstp_synth_bad.jsonl";

  SynthConfig cfg;
  const auto corpus = generate_corpus(cfg, Task::spotting, 1);
  {
    std::ofstream out(path);
    out << sample_to_json_line(corpus[0]) << '\n';
    out << R"({"id":"x","task":"spotting","width":32,"height":32})" << '\n';
  }
  try {
    read_jsonl(path.string());
    FAIL("expected a parse error");
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("line 2") != std::string::npos);
    CHECK(msg.find("instances") != std::string::npos);
  }

  {
    std::ofstream out(path);
    out << "{not json\n";
  }
  CHECK_THROWS_WITH_AS(read_jsonl(path.string()),
                       doctest::Contains("line 1"), std::runtime_error);

  {
    std::ofstream out(path);
    out << R"({"id":"x","task":"sketching","width":32,"height":32,"instances":[]})"
        << '\n';
  }
  CHECK_THROWS_AS(read_jsonl(path.string()), std::runtime_error);
  std::filesystem::remove(path);

  CHECK_THROWS_AS(read_jsonl("/nonexistent/vstp.jsonl"), std::runtime_error);
  CHECK_THROWS_WITH_AS(
      sample_from_json_line(
          R"({"id":"x","task":"spotting","width":32,"height":32,"instances":[{"polygon":[[0,0]],"text":"a"}]})"),
      doctest::Contains("16"), std::exception);
}

TEST_CASE("mixed corpora cycle the task mix") {
  SynthConfig cfg;
  cfg.task_mix = {Task::table, Task::spotting};
  const auto corpus = generate_mixed_corpus(cfg, 6);
  REQUIRE(corpus.size() == 6);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const Task expect = cfg.task_mix[i % cfg.task_mix.size()];
    CHECK(corpus[i].task == expect);
    CHECK(corpus[i].id == to_string(expect) + "-" + std::to_string(i));
    CHECK(corpus[i].table.has_value() == (expect == Task::table));
  }
}
