#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "vstp/model.hpp"

using namespace vstp;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.d = 16;
  cfg.heads = 2;
  cfg.layers = 1;
  cfg.encoder_layers = 1;
  cfg.max_structured = 64;
  cfg.max_region = 35;
  cfg.max_content = 16;
  cfg.seed = 7;
  return cfg;
}

SynthConfig small_corpus_config() {
  SynthConfig cfg;
  cfg.seed = 40;
  cfg.min_instances = 2;
  cfg.max_instances = 3;
  cfg.min_word_len = 1;
  cfg.max_word_len = 3;
  return cfg;
}

TrainingTarget manual_target(std::vector<int> inputs, std::vector<int> targets,
                             std::vector<double> weights, int k) {
  TrainingTarget t;
  t.inputs = std::move(inputs);
  t.targets = std::move(targets);
  t.weights = std::move(weights);
  t.k = k;
  return t;
}

}  // namespace

TEST_CASE("config validation") {
  CHECK_NOTHROW(validate_model_config(ModelConfig{}));
  ModelConfig bad = tiny_config();
  bad.d = 15;  // not divisible by heads
  CHECK_THROWS_AS(validate_model_config(bad), std::invalid_argument);
  bad = tiny_config();
  bad.max_region = 2;
  CHECK_THROWS_AS(validate_model_config(bad), std::invalid_argument);
  bad = tiny_config();
  bad.grid_size = 30;  // not a multiple of patch
  CHECK_THROWS_AS(validate_model_config(bad), std::invalid_argument);
  bad = tiny_config();
  bad.beta1 = 1.0;
  CHECK_THROWS_AS(validate_model_config(bad), std::invalid_argument);
}

TEST_CASE("encoder shapes, finiteness, and sensitivity") {
  const ModelConfig cfg = tiny_config();
  Model model(cfg);

  // 32x32 grid, stride 4 -> 8x8 = 64 embeddings
  const ImageGrid zeros = ImageGrid::zeros(32, 32, kGridChannels);
  const VisualEmbeddings e0 = model.encode(zeros);
  CHECK(e0.v.rows() == 64);
  CHECK(e0.v.cols() == cfg.d);
  CHECK(e0.v.allFinite());

  SynthConfig sc = small_corpus_config();
  Rng rng(3);
  Sample a = generate_sample(rng, sc, Task::spotting);
  Sample b = a;
  b.instances[0].text = b.instances[0].text == "zzz" ? "qqq" : "zzz";
  const VisualEmbeddings ea = model.encode(render_feature_grid(a, sc));
  const VisualEmbeddings eb = model.encode(render_feature_grid(b, sc));
  CHECK((ea.v - eb.v).cwiseAbs().maxCoeff() > 0.0);

  // wrong grid shape is a config error
  CHECK_THROWS_AS(model.encode(ImageGrid::zeros(16, 16, kGridChannels)),
                  std::invalid_argument);
}

TEST_CASE("weighted nll loss contract") {
  const int v = 10;

  SUBCASE("saturated one-hot logits score exactly zero") {
    Eigen::MatrixXd logits = Eigen::MatrixXd::Zero(3, v);
    const std::vector<int> targets{2, 5, 9};
    for (int j = 0; j < 3; ++j) logits(j, targets[static_cast<std::size_t>(j)]) = 1000.0;
    const auto t = manual_target({0, 0, 0}, targets, {1.0, 4.0, 1.0}, 0);
    CHECK(weighted_nll_loss(logits, t) == 0.0);
  }

  SUBCASE("single structural token costs -4 ln p") {
    Eigen::MatrixXd logits(1, v);
    for (int i = 0; i < v; ++i) logits(0, i) = 0.1 * i;
    const int target = 3;
    double z = 0.0;
    for (int i = 0; i < v; ++i) z += std::exp(logits(0, i));
    const double p = std::exp(logits(0, target)) / z;
    const auto t = manual_target({0}, {target}, {4.0}, 0);
    CHECK(weighted_nll_loss(logits, t) ==
          doctest::Approx(-4.0 * std::log(p)).epsilon(1e-12));
  }

  SUBCASE("prompt and pad positions are inert") {
    Eigen::MatrixXd logits = Eigen::MatrixXd::Random(4, v);
    // position 0 is prompt (k=1), position 2 is PAD (weight 0)
    const auto t = manual_target({0, 0, 0, 0}, {1, 2, 3, 4},
                                 {1.0, 1.0, 0.0, 4.0}, 1);
    const double base = weighted_nll_loss(logits, t);
    Eigen::MatrixXd poked = logits;
    poked.row(0).setConstant(123.0);
    poked(2, 0) = std::numeric_limits<double>::quiet_NaN();  // PAD row, ignored
    CHECK(weighted_nll_loss(poked, t) == base);
  }

  SUBCASE("non-finite counted logits raise") {
    Eigen::MatrixXd logits = Eigen::MatrixXd::Zero(1, v);
    logits(0, 4) = std::numeric_limits<double>::infinity();
    const auto t = manual_target({0}, {1}, {1.0}, 0);
    CHECK_THROWS_AS(weighted_nll_loss(logits, t), std::runtime_error);
  }

  SUBCASE("ragged targets raise") {
    Eigen::MatrixXd logits = Eigen::MatrixXd::Zero(2, v);
    const auto t = manual_target({0}, {1, 2}, {1.0, 1.0}, 0);
    CHECK_THROWS_AS(weighted_nll_loss(logits, t), std::invalid_argument);
  }
}

TEST_CASE("analytic gradients match central finite differences") {
  ModelConfig cfg;
  cfg.d = 8;
  cfg.heads = 2;
  cfg.layers = 1;
  cfg.encoder_layers = 1;
  cfg.grid_size = 8;
  cfg.patch = 4;
  cfg.n_bins = 16;
  cfg.max_structured = 32;
  cfg.max_region = 35;
  cfg.max_content = 16;
  cfg.seed = 11;
  Model model(cfg);

  SynthConfig sc;
  sc.seed = 2;
  sc.grid_size = 8;
  sc.min_instances = 2;
  sc.max_instances = 2;
  sc.min_word_len = 1;
  sc.max_word_len = 3;
  Rng rng(17);
  const Sample sample = generate_sample(rng, sc, Task::spotting);
  const PromptSpec prompt = default_prompt(QuantizerConfig{cfg.n_bins});

  const double base = model.sample_loss_and_grad(sample, prompt);
  CHECK(std::isfinite(base));
  CHECK(base > 0.0);
  CHECK(model.sample_loss(sample, prompt) == doctest::Approx(base).epsilon(1e-12));

  int probes = 0;
  double worst = 0.0;
  model.for_each_parameter([&](const std::string& name, Eigen::MatrixXd& value,
                               Eigen::MatrixXd& grad) {
    const std::vector<std::pair<Eigen::Index, Eigen::Index>> spots = {
        {0, 0},
        {value.rows() / 2, value.cols() / 2},
        {value.rows() - 1, value.cols() - 1}};
    for (auto [r, c] : spots) {
      const double orig = value(r, c);
      const double h = 1e-5 * std::max(1.0, std::abs(orig));
      value(r, c) = orig + h;
      const double up = model.sample_loss(sample, prompt);
      value(r, c) = orig - h;
      const double down = model.sample_loss(sample, prompt);
      value(r, c) = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = grad(r, c);
      const double rel = std::abs(numeric - analytic) /
                         std::max({1e-3, std::abs(numeric), std::abs(analytic)});
      if (rel > worst) worst = rel;
      INFO(name, " (", r, ",", c, "): analytic=", analytic,
           " numeric=", numeric);
      CHECK(rel <= 1e-4);
      ++probes;
    }
  });
  CHECK(probes > 200);  // every tensor got probed
  MESSAGE("worst relative gradient error: ", worst);
}

TEST_CASE("decoder logits are causal") {
  Model model(tiny_config());
  SynthConfig sc = small_corpus_config();
  Rng rng(5);
  const Sample s = generate_sample(rng, sc, Task::spotting);
  const VisualEmbeddings v = model.encode(render_feature_grid(s, sc));

  const QuantizerConfig qc;
  const PromptSpec prompt = default_prompt(qc);
  const auto seq =
      build_spotting_stage1(s.instances, prompt, model.vocab(), qc);
  const TrainingTarget tt = make_training_target(seq, model.vocab());

  const Eigen::MatrixXd base =
      model.decoder_logits(DecoderId::structured, tt.inputs, v);
  std::vector<int> poked = tt.inputs;
  const std::size_t flip = poked.size() - 2;
  poked[flip] = poked[flip] == 0 ? 1 : 0;
  const Eigen::MatrixXd after =
      model.decoder_logits(DecoderId::structured, poked, v);
  const Eigen::Index rows = static_cast<Eigen::Index>(flip);
  CHECK((base.topRows(rows) - after.topRows(rows)).cwiseAbs().maxCoeff() <=
        1e-12);
  // and the flipped position itself must react
  CHECK((base.row(rows) - after.row(rows)).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("greedy decode is deterministic and flags truncation") {
  Model model(tiny_config());
  const ImageGrid img = ImageGrid::zeros(32, 32, kGridChannels);
  const VisualEmbeddings v = model.encode(img);
  const std::vector<int> prompt{model.vocab().bos()};

  const DecodeResult a = model.greedy_decode(DecoderId::structured, prompt, v, 8);
  const DecodeResult b = model.greedy_decode(DecoderId::structured, prompt, v, 8);
  CHECK(a.ids == b.ids);
  CHECK(a.truncated == b.truncated);
  CHECK(a.ids.size() <= 8);
  CHECK(a.truncated == (a.ids.back() != model.vocab().eos()));

  // a hard cap of 2 tokens can never reach </S> from a 1-token prompt unless
  // </S> is the very first prediction
  const DecodeResult c = model.greedy_decode(DecoderId::structured, prompt, v, 2);
  CHECK(c.ids.size() <= 2);
  if (c.ids.back() != model.vocab().eos()) CHECK(c.truncated);

  CHECK_THROWS_AS(model.greedy_decode(DecoderId::structured, {}, v, 8),
                  std::invalid_argument);
  const std::vector<int> long_prompt(8, model.vocab().bos());
  CHECK_THROWS_AS(model.greedy_decode(DecoderId::structured, long_prompt, v, 8),
                  std::invalid_argument);
}

TEST_CASE("training reduces the loss and is deterministic") {
  SynthConfig sc;
  sc.seed = 9;
  const auto corpus = generate_corpus(sc, Task::spotting, 16);

  ModelConfig cfg = tiny_config();
  cfg.d = 32;
  cfg.heads = 4;
  cfg.steps = 100;
  cfg.warmup = 10;
  cfg.lr = 3e-3;
  cfg.seed = 21;

  Model model(cfg);
  const TrainReport report = model.train(corpus);
  REQUIRE(report.loss_curve.size() == 100);
  for (double loss : report.loss_curve) CHECK(std::isfinite(loss));
  const double head = std::accumulate(report.loss_curve.begin(),
                                      report.loss_curve.begin() + 10, 0.0) / 10.0;
  const double tail = std::accumulate(report.loss_curve.end() - 10,
                                      report.loss_curve.end(), 0.0) / 10.0;
  CHECK(tail < head);

  ModelConfig cfg2 = cfg;
  cfg2.steps = 30;
  Model m1(cfg2), m2(cfg2);
  const TrainReport r1 = m1.train(corpus);
  const TrainReport r2 = m2.train(corpus);
  CHECK(r1.loss_curve == r2.loss_curve);

  CHECK_THROWS_AS(model.train({}), std::invalid_argument);
  auto wrong = generate_corpus(sc, Task::table, 1);
  CHECK_THROWS_AS(model.train(wrong), std::invalid_argument);
}

TEST_CASE("overfit: exact continuation and two-stage consistency") {
  SynthConfig sc = small_corpus_config();
  const auto corpus = generate_corpus(sc, Task::spotting, 2);

  ModelConfig cfg;
  cfg.d = 32;
  cfg.heads = 4;
  cfg.layers = 1;
  cfg.encoder_layers = 1;
  cfg.max_structured = 64;
  cfg.max_region = 35;
  cfg.max_content = 16;
  cfg.seed = 3;
  cfg.steps = 1200;
  cfg.warmup = 50;
  cfg.lr = 3e-3;
  Model model(cfg);
  const TrainReport report = model.train(corpus);
  CHECK(std::isfinite(report.final_loss));

  REQUIRE(model.token_accuracy(corpus) == doctest::Approx(1.0));
  REQUIRE(model.stage1_exact_match(corpus) == doctest::Approx(1.0));

  const QuantizerConfig qc;
  const PromptSpec prompt = default_prompt(qc);

  SUBCASE("greedy decode continues the training sequence exactly") {
    const Sample& s = corpus[0];
    const VisualEmbeddings v = model.encode(render_feature_grid(s, sc));
    const auto gt = build_spotting_stage1(s.instances, prompt, model.vocab(), qc);
    // prompt with the ground truth head: 6 prompt tokens plus one point
    const std::vector<int> head(gt.ids.begin(), gt.ids.begin() + 8);
    const DecodeResult dec =
        model.greedy_decode(DecoderId::structured, head, v, cfg.max_structured);
    CHECK(!dec.truncated);
    CHECK(dec.ids == gt.ids);
  }

  SUBCASE("infer_document reproduces the sample") {
    for (const Sample& s : corpus) {
      const ParsedDocument doc =
          model.infer_document(render_feature_grid(s, sc), prompt);
      CHECK(doc.task == Task::spotting);
      CHECK(!doc.truncated);
      REQUIRE(doc.instances.size() == s.instances.size());
      const auto order = raster_order(s.instances, qc);
      for (std::size_t i = 0; i < order.size(); ++i) {
        const TextInstance& gt = s.instances[order[i]];
        const TextInstance& pred = doc.instances[i];
        CHECK(pred.text == gt.text);
        for (std::size_t vtx = 0; vtx < 16; ++vtx) {
          const QuantizedPoint qg = quantize_point(gt.polygon[vtx], qc);
          const QuantizedPoint qp = quantize_point(pred.polygon[vtx], qc);
          CHECK(std::abs(qg.x - qp.x) <= 1);
          CHECK(std::abs(qg.y - qp.y) <= 1);
        }
      }
    }
  }

  SUBCASE("stage-2 decodes are order independent") {
    // decoding the same point twice, in any interleaving, yields the same
    // text: parameters are immutable during inference
    const Sample& s = corpus[0];
    const VisualEmbeddings v = model.encode(render_feature_grid(s, sc));
    const QuantizedPoint q = quantize_point(instance_center(s.instances[0]), qc);
    const std::vector<int> p{model.vocab().coord_id(q.x),
                             model.vocab().coord_id(q.y)};
    const auto r1 = model.greedy_decode(DecoderId::content, p, v, cfg.max_content);
    model.greedy_decode(DecoderId::region, p, v, cfg.max_region);
    const auto r2 = model.greedy_decode(DecoderId::content, p, v, cfg.max_content);
    CHECK(r1.ids == r2.ids);
  }

  SUBCASE("checkpoints roundtrip") {
    const auto path =
        std::filesystem::temp_directory_path() / "vstp_model_test.ckpt";
    model.save(path);
    Model back = Model::load(path);
    std::filesystem::remove(path);
    CHECK(back.config().d == cfg.d);
    CHECK(back.config().task == Task::spotting);
    CHECK(back.vocab() == model.vocab());
    CHECK(back.token_accuracy(corpus) == doctest::Approx(1.0));

    const Sample& s = corpus[0];
    const VisualEmbeddings v1 = model.encode(render_feature_grid(s, sc));
    const VisualEmbeddings v2 = back.encode(render_feature_grid(s, sc));
    CHECK((v1.v - v2.v).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("corrupt checkpoints are rejected") {
  const auto path =
      std::filesystem::temp_directory_path() / "vstp_model_garbage.ckpt";
  {
    std::ofstream out(path, std::ios::binary);
    out << "not a checkpoint at all";
  }
  CHECK_THROWS_AS(Model::load(path), std::runtime_error);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(Model::load("/nonexistent/model.ckpt"), std::runtime_error);
}
