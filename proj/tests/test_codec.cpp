#include <doctest.h>

#include <algorithm>
#include <vector>

#include "vstp/codec.hpp"
#include "vstp/rng.hpp"

using namespace vstp;

namespace {

QuantizerConfig qcfg;

TextInstance word_at(double cx, double cy, const std::string& text) {
  TextInstance t;
  t.polygon = box_polygon(cx - 0.02, cy - 0.01, cx + 0.02, cy + 0.01);
  t.text = text;
  return t;
}

// Degenerate polygon whose center is exactly (cx, cy); box-polygon means can
// land a hair under a bin boundary, which is fine for roundtrips but not for
// tests that pin exact token values.
TextInstance point_inst(double cx, double cy, const std::string& text) {
  TextInstance t;
  t.polygon.fill({cx, cy});
  t.text = text;
  return t;
}

TextInstance entity_word(double cx, double cy, const std::string& text,
                         const std::string& cls, int group) {
  TextInstance t = point_inst(cx, cy, text);
  t.entity = cls;
  t.line_id = group;
  return t;
}

TextInstance hier_word(double cx, double cy, const std::string& text, int line,
                       int para) {
  TextInstance t = point_inst(cx, cy, text);
  t.line_id = line;
  t.para_id = para;
  return t;
}

}  // namespace

TEST_CASE("spotting stage-1 format") {
  const auto vocab = Vocabulary::build(1000, Task::spotting);
  const PromptSpec prompt = default_prompt(qcfg);

  SUBCASE("empty scene") {
    const auto seq = build_spotting_stage1({}, prompt, vocab, qcfg);
    CHECK(seq.k == 6);
    CHECK(seq.ids == std::vector<int>{0, 0, 999, 999, vocab.char_id(U'!'),
                                      vocab.char_id(U'~'), vocab.eos()});
  }

  SUBCASE("two instances, quantize trace") {
    const std::vector<TextInstance> insts = {point_inst(0.1, 0.1, "aa"),
                                             point_inst(0.9, 0.9, "bb")};
    const auto seq = build_spotting_stage1(insts, prompt, vocab, qcfg);
    CHECK(seq.ids.size() == 6 + 2 * 2 + 1);
    const std::vector<int> tail(seq.ids.begin() + 6, seq.ids.end());
    CHECK(tail == std::vector<int>{100, 100, 900, 900, vocab.eos()});
  }

  SUBCASE("builder raster-orders its input") {
    const std::vector<TextInstance> insts = {point_inst(0.9, 0.9, "bb"),
                                             point_inst(0.1, 0.1, "aa")};
    const auto seq = build_spotting_stage1(insts, prompt, vocab, qcfg);
    const std::vector<int> tail(seq.ids.begin() + 6, seq.ids.end());
    CHECK(tail == std::vector<int>{100, 100, 900, 900, vocab.eos()});
  }

  SUBCASE("window prompt is encoded in the head") {
    PromptSpec p{{100, 200, 300, 400}, {'a', 'f'}};
    const auto seq = build_spotting_stage1({}, p, vocab, qcfg);
    CHECK(seq.ids[0] == 100);
    CHECK(seq.ids[1] == 200);
    CHECK(seq.ids[2] == 300);
    CHECK(seq.ids[3] == 400);
    CHECK(seq.ids[4] == vocab.char_id(U'a'));
    CHECK(seq.ids[5] == vocab.char_id(U'f'));
  }

  SUBCASE("length overflow reports how many fit") {
    std::vector<TextInstance> many(800, word_at(0.5, 0.5, "x"));
    try {
      build_spotting_stage1(many, prompt, vocab, qcfg);
      FAIL("expected SequenceTooLong");
    } catch (const SequenceTooLong& e) {
      CHECK(e.fits == (1500 - 6 - 1) / 2);  // 746
    }
  }
}

TEST_CASE("region sequence is fixed format") {
  const auto vocab = Vocabulary::build(1000, Task::spotting);
  TextInstance t;
  t.polygon.fill({0.5, 0.5});
  t.text = "x";
  const auto seq = build_region_sequence(t, vocab, qcfg);
  CHECK(seq.k == 2);
  REQUIRE(seq.ids.size() == 35);
  for (int i = 0; i < 34; ++i) CHECK(seq.ids[i] == 500);
  CHECK(seq.ids.back() == vocab.eos());

  // Roundtrip through the parser recovers all 16 quantized vertices.
  TextInstance box = word_at(0.3, 0.6, "y");
  const auto seq2 = build_region_sequence(box, vocab, qcfg);
  const auto back = parse_region_sequence(seq2.ids, vocab, qcfg);
  CHECK(back.complete);
  CHECK(back.diagnostics.empty());
  for (int i = 0; i < 16; ++i) {
    CHECK(std::abs(back.polygon[i].x - box.polygon[i].x) <= 0.5 / 1000 + 1e-12);
    CHECK(std::abs(back.polygon[i].y - box.polygon[i].y) <= 0.5 / 1000 + 1e-12);
  }
}

TEST_CASE("content sequence format") {
  const auto vocab = Vocabulary::build(1000, Task::spotting);

  SUBCASE("single char at origin") {
    TextInstance t;
    t.polygon.fill({0.0, 0.0});
    t.text = "A";
    const auto seq = build_content_sequence(t, vocab, qcfg);
    CHECK(seq.ids == std::vector<int>{0, 0, vocab.char_id(U'A'), vocab.eos()});
    CHECK(seq.k == 2);
  }

  SUBCASE("seven-letter word takes 10 tokens") {
    const auto seq = build_content_sequence(word_at(0.4, 0.4, "Harwich"), vocab, qcfg);
    CHECK(seq.ids.size() == 10);
  }

  SUBCASE("out-of-alphabet chars become UNK") {
    const auto seq =
        build_content_sequence(word_at(0.4, 0.4, "a\xE2\x82\xACz"), vocab, qcfg);
    // a, €, z
    CHECK(seq.ids.size() == 2 + 3 + 1);
    CHECK(seq.ids[2] == vocab.char_id(U'a'));
    CHECK(seq.ids[3] == vocab.unk());
    CHECK(seq.ids[4] == vocab.char_id(U'z'));
  }

  SUBCASE("empty text is rejected") {
    CHECK_THROWS_AS(build_content_sequence(word_at(0.4, 0.4, ""), vocab, qcfg),
                    std::invalid_argument);
  }

  SUBCASE("overlong text reports the budget") {
    std::string big(300, 'a');
    CHECK_THROWS_AS(build_content_sequence(word_at(0.4, 0.4, big), vocab, qcfg),
                    SequenceTooLong);
  }

  SUBCASE("roundtrip") {
    const auto seq = build_content_sequence(word_at(0.2, 0.7, "Wens_07!"), vocab, qcfg);
    const auto back = parse_content_sequence(seq.ids, vocab);
    CHECK(back.text == "Wens_07!");
    CHECK(back.diagnostics.empty());
  }
}

TEST_CASE("kie stage-1 format and grouping") {
  EntitySchema schema{{"company", "date", "total"}, 10};
  const auto vocab = Vocabulary::build(1000, Task::kie, schema);
  const PromptSpec prompt = default_prompt(qcfg);

  SUBCASE("single entity format trace") {
    const std::vector<TextInstance> insts = {
        entity_word(0.5, 0.9, "12.00", "total", 0)};
    const auto seq = build_kie_stage1(insts, prompt, vocab, qcfg);
    std::vector<int> expect = {0, 0, 999, 999, vocab.char_id(U'!'),
                               vocab.char_id(U'~')};
    expect.push_back(*vocab.structural_id("<total>"));
    expect.push_back(500);
    expect.push_back(900);
    expect.push_back(*vocab.structural_id("</total>"));
    expect.push_back(vocab.eos());
    CHECK(seq.ids == expect);
  }

  SUBCASE("zero entities") {
    const auto seq = build_kie_stage1({}, prompt, vocab, qcfg);
    CHECK(seq.ids.size() == 7);
    CHECK(seq.ids.back() == vocab.eos());
  }

  SUBCASE("repeated classes stay distinct groups") {
    const std::vector<TextInstance> insts = {
        entity_word(0.1, 0.1, "Acme", "company", 0),
        entity_word(0.3, 0.1, "Corp", "company", 0),
        entity_word(0.1, 0.5, "Globex", "company", 1),
    };
    const auto seq = build_kie_stage1(insts, prompt, vocab, qcfg);
    const auto parsed = parse_stage1(seq, vocab);
    REQUIRE(parsed.groups.size() == 2);
    CHECK(parsed.groups[0].cls == "company");
    CHECK(parsed.groups[0].points.size() == 2);
    CHECK(parsed.groups[1].points.size() == 1);
    CHECK(parsed.diagnostics.empty());
  }

  SUBCASE("groups ordered by first member raster position") {
    const std::vector<TextInstance> insts = {
        entity_word(0.5, 0.9, "12.00", "total", 5),
        entity_word(0.2, 0.1, "Acme", "company", 3),
    };
    const auto seq = build_kie_stage1(insts, prompt, vocab, qcfg);
    const auto parsed = parse_stage1(seq, vocab);
    REQUIRE(parsed.groups.size() == 2);
    CHECK(parsed.groups[0].cls == "company");
    CHECK(parsed.groups[1].cls == "total");
  }

  SUBCASE("unknown entity label is a schema error") {
    const std::vector<TextInstance> insts = {
        entity_word(0.5, 0.9, "x", "menu", 0)};
    CHECK_THROWS_AS(build_kie_stage1(insts, prompt, vocab, qcfg),
                    std::invalid_argument);
    std::vector<TextInstance> missing = {word_at(0.5, 0.9, "x")};
    CHECK_THROWS_AS(build_kie_stage1(missing, prompt, vocab, qcfg),
                    std::invalid_argument);
  }
}

TEST_CASE("hier stage-1 format") {
  const auto vocab = Vocabulary::build(1000, Task::hiertext);

  SUBCASE("one para, one line, one word") {
    const std::vector<TextInstance> insts = {hier_word(0.25, 0.25, "hi", 0, 0)};
    const auto seq = build_hier_stage1(insts, vocab, qcfg);
    CHECK(seq.k == 1);
    CHECK(seq.ids == std::vector<int>{vocab.bos(),
                                      *vocab.structural_id("<PARA>"),
                                      *vocab.structural_id("<LINE>"), 250, 250,
                                      *vocab.structural_id("</LINE>"),
                                      *vocab.structural_id("</PARA>"),
                                      vocab.eos()});
  }

  SUBCASE("empty page") {
    const auto seq = build_hier_stage1({}, vocab, qcfg);
    CHECK(seq.ids == std::vector<int>{vocab.bos(), vocab.eos()});
  }

  SUBCASE("partition roundtrip with two paras") {
    const std::vector<TextInstance> insts = {
        hier_word(0.1, 0.1, "a", 0, 0), hier_word(0.3, 0.1, "b", 0, 0),
        hier_word(0.1, 0.2, "c", 1, 0), hier_word(0.1, 0.6, "d", 2, 1),
        hier_word(0.3, 0.6, "e", 2, 1)};
    const auto seq = build_hier_stage1(insts, vocab, qcfg);
    const auto parsed = parse_stage1(seq, vocab);
    CHECK(parsed.diagnostics.empty());
    REQUIRE(parsed.paragraphs.size() == 2);
    REQUIRE(parsed.paragraphs[0].size() == 2);
    CHECK(parsed.paragraphs[0][0].size() == 2);
    CHECK(parsed.paragraphs[0][1].size() == 1);
    REQUIRE(parsed.paragraphs[1].size() == 1);
    CHECK(parsed.paragraphs[1][0].size() == 2);
    CHECK(parsed.paragraphs[0][0][0] == QuantizedPoint{100, 100});
  }

  SUBCASE("line spanning two paragraphs is a label error") {
    const std::vector<TextInstance> insts = {hier_word(0.1, 0.1, "a", 0, 0),
                                             hier_word(0.3, 0.1, "b", 0, 1)};
    CHECK_THROWS_AS(build_hier_stage1(insts, vocab, qcfg), std::invalid_argument);
  }
}

TEST_CASE("parse_stage1 recovery rules") {
  const auto vocab = Vocabulary::build(1000, Task::spotting);

  SUBCASE("dangling coordinate dropped with diagnostic") {
    StructuredSequence seq;
    seq.task = Task::spotting;
    seq.k = 6;
    seq.ids = {0, 0, 999, 999, vocab.char_id(U'!'), vocab.char_id(U'~'),
               100, 100, 500, vocab.eos()};
    const auto parsed = parse_stage1(seq, vocab);
    REQUIRE(parsed.points.size() == 1);
    CHECK(parsed.points[0] == QuantizedPoint{100, 100});
    CHECK(parsed.diagnostics.size() == 1);
  }

  SUBCASE("missing EOS is diagnosed") {
    StructuredSequence seq;
    seq.task = Task::spotting;
    seq.k = 6;
    seq.ids = {0, 0, 999, 999, vocab.char_id(U'!'), vocab.char_id(U'~'), 10, 20};
    const auto parsed = parse_stage1(seq, vocab);
    CHECK(parsed.points.size() == 1);
    CHECK(!parsed.diagnostics.empty());
  }

  SUBCASE("unclosed entity group closes at EOS") {
    EntitySchema schema{{"total"}, 10};
    const auto kvocab = Vocabulary::build(1000, Task::kie, schema);
    StructuredSequence seq;
    seq.task = Task::kie;
    seq.k = 6;
    seq.ids = {0, 0, 999, 999, kvocab.char_id(U'!'), kvocab.char_id(U'~'),
               *kvocab.structural_id("<total>"), 500, 900, kvocab.eos()};
    const auto parsed = parse_stage1(seq, kvocab);
    REQUIRE(parsed.groups.size() == 1);
    CHECK(parsed.groups[0].points.size() == 1);
    CHECK(!parsed.diagnostics.empty());
  }

  SUBCASE("stray tokens for the task are ignored with diagnostics") {
    const auto hvocab = Vocabulary::build(1000, Task::hiertext);
    StructuredSequence seq;
    seq.task = Task::hiertext;
    seq.k = 1;
    seq.ids = {hvocab.bos(), *hvocab.structural_id("</LINE>"),
               *hvocab.structural_id("<PARA>"), *hvocab.structural_id("<LINE>"),
               100, 100, hvocab.eos()};
    const auto parsed = parse_stage1(seq, hvocab);
    REQUIRE(parsed.paragraphs.size() == 1);
    CHECK(parsed.paragraphs[0][0][0] == QuantizedPoint{100, 100});
    CHECK(!parsed.diagnostics.empty());
  }
}

TEST_CASE("random scene roundtrips for all point tasks") {
  Rng rng(2024);
  const auto svocab = Vocabulary::build(1000, Task::spotting);
  const PromptSpec prompt = default_prompt(qcfg);
  for (int iter = 0; iter < 50; ++iter) {
    std::vector<TextInstance> insts;
    const int n = static_cast<int>(rng.uniform_int(0, 12));
    for (int i = 0; i < n; ++i) {
      insts.push_back(word_at(0.05 + 0.9 * rng.uniform(),
                              0.05 + 0.9 * rng.uniform(), "w"));
    }
    const auto seq = build_spotting_stage1(insts, prompt, svocab, qcfg);
    // exactly one EOS, coords in pairs
    CHECK(std::count(seq.ids.begin(), seq.ids.end(), svocab.eos()) == 1);
    const auto parsed = parse_stage1(seq, svocab);
    CHECK(parsed.diagnostics.empty());
    REQUIRE(parsed.points.size() == insts.size());
    const auto order = raster_order(std::span<const TextInstance>(insts), qcfg);
    for (std::size_t i = 0; i < order.size(); ++i) {
      const auto expect =
          quantize_point(instance_center(insts[order[i]]), qcfg);
      CHECK(parsed.points[i] == expect);
    }
  }
}

TEST_CASE("make_training_target shifts, weights, and masks") {
  EntitySchema schema{{"total"}, 10};
  const auto vocab = Vocabulary::build(1000, Task::kie, schema);
  const std::vector<TextInstance> insts = {
      entity_word(0.5, 0.9, "12.00", "total", 0)};
  const auto seq = build_kie_stage1(insts, default_prompt(qcfg), vocab, qcfg);
  const auto tt = make_training_target(seq, vocab);
  const std::size_t n = seq.ids.size() - 1;
  REQUIRE(tt.inputs.size() == n);
  REQUIRE(tt.targets.size() == n);
  REQUIRE(tt.weights.size() == n);
  CHECK(tt.k == 5);  // first loss position predicts ids[6], the open tag
  for (std::size_t j = 0; j < n; ++j) {
    CHECK(tt.inputs[j] == seq.ids[j]);
    CHECK(tt.targets[j] == seq.ids[j + 1]);
  }
  // targets: [.., '~', <total>, 500, 900, </total>, EOS]
  CHECK(tt.weights[tt.k] == 4.0);          // open tag
  CHECK(tt.weights[tt.k + 1] == 1.0);      // coordinate
  CHECK(tt.weights[tt.k + 3] == 4.0);      // close tag
  CHECK(tt.weights.back() == 1.0);         // EOS

  // PAD targets are masked to weight zero.
  StructuredSequence padded = seq;
  padded.ids.push_back(vocab.pad());
  const auto tt2 = make_training_target(padded, vocab);
  CHECK(tt2.weights.back() == 0.0);

  StructuredSequence tiny;
  tiny.ids = {vocab.bos()};
  CHECK_THROWS_AS(make_training_target(tiny, vocab), std::invalid_argument);
}

TEST_CASE("builders are permutation invariant") {
  Rng rng(5);
  EntitySchema schema{{"company", "total"}, 10};
  const auto vocab = Vocabulary::build(1000, Task::kie, schema);
  std::vector<TextInstance> insts;
  for (int i = 0; i < 8; ++i) {
    insts.push_back(entity_word(rng.uniform() * 0.9 + 0.05,
                                rng.uniform() * 0.9 + 0.05, "w",
                                i % 2 ? "company" : "total", i / 3));
  }
  const auto base = build_kie_stage1(insts, default_prompt(qcfg), vocab, qcfg);
  std::reverse(insts.begin(), insts.end());
  const auto flipped = build_kie_stage1(insts, default_prompt(qcfg), vocab, qcfg);
  CHECK(base.ids == flipped.ids);
}
