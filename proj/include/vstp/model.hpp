#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "vstp/codec.hpp"
#include "vstp/synth.hpp"
#include "vstp/table.hpp"
#include "vstp/vocab.hpp"

namespace vstp {

// Desk-scale realization of the point-conditioned generation architecture:
// a patch-projection + self-attention grid encoder feeding three structurally
// identical transformer decoders (structured / region / content) that share
// nothing but the vocabulary — independent weights, independent positional
// tables.  Everything runs in double precision on the CPU.
struct ModelConfig {
  int d = 128;            // hidden dim (divisible by heads)
  int layers = 4;         // decoder depth
  int heads = 8;
  int mlp_factor = 4;
  int encoder_layers = 2;

  int grid_size = 32;     // encoder input: grid_size² cells
  int grid_channels = kGridChannels;
  int patch = 4;          // encoder stride; (grid_size/patch)² embeddings

  int max_structured = 1500;  // per-decoder sequence budgets
  int max_region = 35;
  int max_content = 200;

  int n_bins = 1000;
  Task task = Task::spotting;
  EntitySchema schema{};  // entity classes (kie) / max_span (table)
  std::uint64_t seed = 1;
  double init_scale = 0.02;

  // training schedule: Adam, linear warmup then linear decay
  int steps = 3000;
  int warmup = 100;
  int batch = 1;  // samples per optimizer step, round-robin
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;  // global-norm gradient clip; <= 0 disables
};

void validate_model_config(const ModelConfig& cfg);  // throws std::invalid_argument

// Config as a flat JSON object (also the checkpoint header form).
nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

enum class DecoderId { structured = 0, region = 1, content = 2 };

struct VisualEmbeddings {
  Eigen::MatrixXd v;  // n × d, one row per encoded grid patch
};

// Weighted autoregressive objective: sum over target positions j >= target.k of
// weights[j] * -log softmax(logits.row(j))[targets[j]].  Weights are 0 on
// <PAD>, so padded and prompt positions never touch the value.  Throws on
// non-finite logits or shape mismatch.
double weighted_nll_loss(const Eigen::MatrixXd& logits,
                         const TrainingTarget& target);

struct DecodeResult {
  std::vector<int> ids;    // prompt + continuation (+ EOS when emitted)
  bool truncated = false;  // hit max_len before EOS
};

// Output of the two-stage pipeline, shaped per task: word instances for
// spotting/hiertext, (class, value) fields plus instances for kie, a grid and
// canonical HTML for tables.
struct ParsedDocument {
  Task task = Task::spotting;
  std::vector<TextInstance> instances;
  std::vector<std::pair<std::string, std::string>> fields;  // kie
  std::optional<TableGrid> grid;                            // table
  std::string html;                                         // table
  bool truncated = false;
  std::vector<int> stage1_ids;
  std::vector<std::string> diagnostics;
};

struct TrainReport {
  std::vector<double> loss_curve;  // per-step weighted mean nll
  double final_loss = 0.0;
  int steps = 0;
};

struct ModelParams;  // weight tensors; layout private to model.cpp

class Model {
 public:
  explicit Model(const ModelConfig& cfg);  // random init from cfg.seed
  ~Model();
  Model(Model&&) noexcept;
  Model& operator=(Model&&) noexcept;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  const Vocabulary& vocab() const { return vocab_; }

  // --- forward passes -------------------------------------------------------
  VisualEmbeddings encode(const ImageGrid& img) const;

  // Teacher forcing: logits.row(j) scores the token following inputs[j].
  Eigen::MatrixXd decoder_logits(DecoderId dec, std::span<const int> inputs,
                                 const VisualEmbeddings& v) const;

  // Argmax continuation with a KV cache; stops at </S> or max_len.
  DecodeResult greedy_decode(DecoderId dec, std::span<const int> prompt,
                             const VisualEmbeddings& v, int max_len) const;

  // --- training -------------------------------------------------------------
  // Mini-batch = one sample: the structured sequence under a freshly sampled
  // window prompt (spotting/kie) plus every region/content sequence.
  // Deterministic given cfg.seed.  Throws std::runtime_error on divergence.
  TrainReport train(std::span<const Sample> corpus);

  // Teacher-forced argmax accuracy over loss-counted positions, default
  // prompts everywhere.
  double token_accuracy(std::span<const Sample> corpus) const;

  // Fraction of samples whose stage-1 greedy decode (default prompt) equals
  // the ground-truth sequence ids exactly.
  double stage1_exact_match(std::span<const Sample> corpus) const;

  // --- inference -------------------------------------------------------------
  // Stage 1 decodes the structured sequence for the prompt (ignored for
  // table/hiertext, which are BOS-led); stage 2 independently decodes a
  // region and/or content sequence per recovered point.
  ParsedDocument infer_document(const ImageGrid& img,
                                const PromptSpec& prompt) const;

  // --- persistence -----------------------------------------------------------
  void save(const std::filesystem::path& path) const;
  static Model load(const std::filesystem::path& path);

  // --- test hooks -------------------------------------------------------------
  // Loss of one sample under a fixed prompt (sum over all its sequences).
  double sample_loss(const Sample& sample, const PromptSpec& prompt) const;
  // Same value; overwrites the internal gradient buffers.
  double sample_loss_and_grad(const Sample& sample, const PromptSpec& prompt);
  // Visit (name, value, grad) for every parameter tensor.
  void for_each_parameter(
      const std::function<void(const std::string&, Eigen::MatrixXd&,
                               Eigen::MatrixXd&)>& fn);

 private:
  std::vector<std::pair<DecoderId, StructuredSequence>> sample_sequences(
      const Sample& sample, const PromptSpec& prompt) const;

  ModelConfig cfg_;
  Vocabulary vocab_;
  std::unique_ptr<ModelParams> params_;
  std::unique_ptr<ModelParams> grads_;
  std::unique_ptr<ModelParams> moment1_;
  std::unique_ptr<ModelParams> moment2_;
};

}  // namespace vstp
