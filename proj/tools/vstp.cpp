#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "vstp/codec.hpp"
#include "vstp/metrics.hpp"
#include "vstp/model.hpp"
#include "vstp/synth.hpp"
#include "vstp/table.hpp"

using nlohmann::json;
using namespace vstp;

namespace {

constexpr int kUsageError = 2;
constexpr int kCheckFailure = 1;

// VSTP_SEED wins over --seed when set.
std::uint64_t effective_seed(std::uint64_t flag_seed) {
  if (const char* env = std::getenv("VSTP_SEED")) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (end == env || *end != '\0') {
      throw std::invalid_argument("VSTP_SEED is not an integer: " +
                                  std::string(env));
    }
    return v;
  }
  return flag_seed;
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  json j;
  in >> j;
  return j;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void apply_synth_overrides(SynthConfig& cfg, const json& j) {
  static const std::set<std::string> known = {
      "grid_size",  "min_instances", "max_instances", "min_word_len",
      "max_word_len", "min_rows",    "max_rows",      "min_cols",
      "max_cols",   "max_gen_span",  "span_prob",     "empty_cell_prob",
      "classes",    "max_span"};
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) {
      throw std::invalid_argument("unknown synth config key '" + key + "'");
    }
  }
  if (j.contains("grid_size")) cfg.grid_size = j["grid_size"].get<int>();
  if (j.contains("min_instances")) cfg.min_instances = j["min_instances"].get<int>();
  if (j.contains("max_instances")) cfg.max_instances = j["max_instances"].get<int>();
  if (j.contains("min_word_len")) cfg.min_word_len = j["min_word_len"].get<int>();
  if (j.contains("max_word_len")) cfg.max_word_len = j["max_word_len"].get<int>();
  if (j.contains("min_rows")) cfg.min_rows = j["min_rows"].get<int>();
  if (j.contains("max_rows")) cfg.max_rows = j["max_rows"].get<int>();
  if (j.contains("min_cols")) cfg.min_cols = j["min_cols"].get<int>();
  if (j.contains("max_cols")) cfg.max_cols = j["max_cols"].get<int>();
  if (j.contains("max_gen_span")) cfg.max_gen_span = j["max_gen_span"].get<int>();
  if (j.contains("span_prob")) cfg.span_prob = j["span_prob"].get<double>();
  if (j.contains("empty_cell_prob")) cfg.empty_cell_prob = j["empty_cell_prob"].get<double>();
  if (j.contains("classes")) cfg.schema.classes = j["classes"].get<std::vector<std::string>>();
  if (j.contains("max_span")) cfg.schema.max_span = j["max_span"].get<int>();
}

std::vector<std::string> corpus_entity_classes(std::span<const Sample> corpus) {
  std::set<std::string> classes;
  for (const Sample& s : corpus) {
    for (const TextInstance& t : s.instances) {
      if (t.entity) classes.insert(*t.entity);
    }
  }
  return {classes.begin(), classes.end()};
}

// --- synth ------------------------------------------------------------------

int cmd_synth(const std::string& task_str, int n, std::uint64_t seed,
              const std::string& out, const std::string& config_path) {
  const Task task = task_from_string(task_str);
  SynthConfig cfg;
  cfg.seed = effective_seed(seed);
  if (!config_path.empty()) apply_synth_overrides(cfg, read_json_file(config_path));
  validate_config(cfg);
  const auto corpus = generate_corpus(cfg, task, n);
  write_jsonl(out, corpus);
  std::printf("wrote %zu %s samples to %s\n", corpus.size(), task_str.c_str(),
              out.c_str());
  return 0;
}

// --- codec-check -------------------------------------------------------------

bool quantized_equal(const Polygon16& a, const Polygon16& b,
                     const QuantizerConfig& qc) {
  for (std::size_t i = 0; i < 16; ++i) {
    if (!(quantize_point(a[i], qc) == quantize_point(b[i], qc))) return false;
  }
  return true;
}

// roundtrips one sample through its builders and parsers; returns a
// description of the first mismatch, empty when everything survives
std::string roundtrip_failure(const Sample& s, const QuantizerConfig& qc,
                              const Vocabulary& vocab) {
  const PromptSpec prompt = default_prompt(qc);
  const auto order = raster_order(s.instances, qc);

  if (s.task == Task::table) {
    if (!s.table) return "table sample without table grid";
    const auto tokens = grid_to_structure_tokens(*s.table, qc);
    const auto parsed = structure_tokens_to_grid(tokens, qc);
    if (!parsed.diagnostics.empty()) {
      return "structure parse diagnostics: " + parsed.diagnostics.front();
    }
    if (!same_structure(parsed.grid, *s.table, qc)) {
      return "reconstructed structure differs";
    }
    const auto texts = content_cell_texts(*s.table);
    const std::string gt_html = assemble_html(*s.table, texts);
    const std::string re_html = assemble_html(parsed.grid, texts);
    if (teds(re_html, gt_html, /*structure_only=*/true) != 1.0) {
      return "S-TEDS(gt, reconstructed) != 1.0";
    }
    return "";
  }

  StructuredSequence seq;
  switch (s.task) {
    case Task::spotting:
      seq = build_spotting_stage1(s.instances, prompt, vocab, qc);
      break;
    case Task::kie:
      seq = build_kie_stage1(s.instances, prompt, vocab, qc);
      break;
    case Task::hiertext:
      seq = build_hier_stage1(s.instances, vocab, qc);
      break;
    default:
      return "unknown task";
  }
  const Stage1Parse parse = parse_stage1(seq, vocab);
  if (!parse.diagnostics.empty()) {
    return "stage-1 diagnostics: " + parse.diagnostics.front();
  }

  // centers in raster order must reproduce the quantized instance centers
  std::vector<QuantizedPoint> expected;
  for (std::size_t idx : order) {
    expected.push_back(quantize_point(instance_center(s.instances[idx]), qc));
  }
  std::vector<QuantizedPoint> got;
  if (s.task == Task::spotting) {
    got = parse.points;
  } else if (s.task == Task::kie) {
    for (const EntityGroup& g : parse.groups) {
      got.insert(got.end(), g.points.begin(), g.points.end());
    }
  } else {
    for (const auto& para : parse.paragraphs) {
      for (const auto& line : para) {
        got.insert(got.end(), line.begin(), line.end());
      }
    }
  }
  if (s.task == Task::kie) {
    // groups reorder points by (entity, line); compare as multisets
    std::sort(expected.begin(), expected.end());
    std::sort(got.begin(), got.end());
    if (got != expected) return "kie group points differ from instances";
  } else if (got != expected) {
    return "stage-1 centers differ from raster-ordered instances";
  }

  // stage-2 roundtrips per instance
  for (std::size_t idx : order) {
    const TextInstance& inst = s.instances[idx];
    const auto region = build_region_sequence(inst, vocab, qc);
    const RegionParse rp = parse_region_sequence(region.ids, vocab, qc);
    if (!rp.complete || !rp.diagnostics.empty()) {
      return "region sequence does not parse cleanly for '" + inst.text + "'";
    }
    if (!quantized_equal(rp.polygon, inst.polygon, qc)) {
      return "region polygon differs for '" + inst.text + "'";
    }
    const auto content = build_content_sequence(inst, vocab, qc);
    const ContentParse cp = parse_content_sequence(content.ids, vocab);
    if (!cp.diagnostics.empty() || cp.text != inst.text) {
      return "content text differs for '" + inst.text + "'";
    }
  }
  return "";
}

int cmd_codec_check(const std::string& in) {
  std::vector<Sample> corpus;
  try {
    corpus = read_jsonl(in);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "codec-check: %s\n", e.what());
    return kCheckFailure;
  }
  const QuantizerConfig qc;
  std::map<Task, Vocabulary> vocabs;
  std::map<std::string, int> counts;
  const auto classes = corpus_entity_classes(corpus);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const Sample& s = corpus[i];
    auto it = vocabs.find(s.task);
    if (it == vocabs.end()) {
      EntitySchema schema;
      if (s.task == Task::kie) schema.classes = classes;
      it = vocabs.emplace(s.task, Vocabulary::build(qc.n_bins, s.task, schema))
               .first;
    }
    const std::string failure = roundtrip_failure(s, qc, it->second);
    if (!failure.empty()) {
      std::fprintf(stderr, "codec-check: %s line %zu (id %s): %s\n",
                   in.c_str(), i + 1, s.id.c_str(), failure.c_str());
      return kCheckFailure;
    }
    ++counts[to_string(s.task)];
  }
  for (const auto& [task, n] : counts) {
    std::printf("%s: %d ok\n", task.c_str(), n);
  }
  std::printf("codec-check: %zu samples pass\n", corpus.size());
  return 0;
}

// --- train -------------------------------------------------------------------

int cmd_train(const std::string& task_str, const std::string& in,
              const std::string& out, std::uint64_t seed,
              const std::string& config_path) {
  const Task task = task_from_string(task_str);
  const auto all = read_jsonl(in);
  std::vector<Sample> corpus;
  for (const Sample& s : all) {
    if (s.task == task) corpus.push_back(s);
  }
  if (corpus.empty()) {
    throw std::runtime_error("no " + task_str + " samples in " + in);
  }

  ModelConfig cfg;
  if (!config_path.empty()) {
    json merged = model_config_to_json(cfg);
    const json overrides = read_json_file(config_path);
    for (const auto& [key, value] : overrides.items()) {
      if (!merged.contains(key)) {
        throw std::invalid_argument("unknown model config key '" + key + "'");
      }
    }
    merged.update(overrides);
    cfg = model_config_from_json(merged);
  }
  cfg.task = task;
  cfg.seed = effective_seed(seed);
  if (task == Task::kie && cfg.schema.classes.empty()) {
    cfg.schema.classes = corpus_entity_classes(corpus);
  }

  Model model(cfg);
  const TrainReport report = model.train(corpus);
  model.save(out);

  const std::string csv = out + ".loss.csv";
  std::ofstream loss(csv);
  loss << "step,loss\n";
  for (std::size_t i = 0; i < report.loss_curve.size(); ++i) {
    loss << i << ',' << report.loss_curve[i] << '\n';
  }
  std::printf("trained %d steps on %zu samples, final loss %.6f\n",
              report.steps, corpus.size(), report.final_loss);
  std::printf("checkpoint: %s\nloss curve: %s\n", out.c_str(), csv.c_str());
  return 0;
}

// --- infer -------------------------------------------------------------------

json document_to_json(const std::string& id, const ParsedDocument& doc) {
  json inst = json::array();
  for (const TextInstance& t : doc.instances) inst.push_back(instance_to_json(t));
  json j{{"id", id}, {"task", to_string(doc.task)}, {"instances", std::move(inst)}};
  if (doc.task == Task::kie) {
    json fields = json::array();
    for (const auto& [cls, value] : doc.fields) fields.push_back({cls, value});
    j["fields"] = std::move(fields);
  }
  if (doc.task == Task::table) j["html"] = doc.html;
  if (doc.truncated) j["truncated"] = true;
  if (!doc.diagnostics.empty()) j["diagnostics"] = doc.diagnostics;
  return j;
}

int cmd_infer(const std::string& model_path, const std::string& in,
              const std::string& out) {
  const Model model = Model::load(model_path);
  const auto all = read_jsonl(in);
  SynthConfig rc;
  rc.grid_size = model.config().grid_size;
  const QuantizerConfig qc{model.config().n_bins};
  const PromptSpec prompt = default_prompt(qc);

  std::ofstream os(out);
  if (!os) throw std::runtime_error("cannot open " + out);
  int n = 0;
  for (const Sample& s : all) {
    if (s.task != model.config().task) continue;
    const ParsedDocument doc =
        model.infer_document(render_feature_grid(s, rc), prompt);
    os << document_to_json(s.id, doc).dump() << '\n';
    ++n;
  }
  if (n == 0) {
    throw std::runtime_error("no " + to_string(model.config().task) +
                             " samples in " + in);
  }
  std::printf("inferred %d samples to %s\n", n, out.c_str());
  return 0;
}

// --- eval --------------------------------------------------------------------

struct Prediction {
  std::string id;
  std::vector<TextInstance> instances;
  std::vector<Field> fields;
  std::string html;
};

std::vector<Prediction> read_predictions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<Prediction> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      Prediction p;
      p.id = j.at("id").get<std::string>();
      for (const auto& ji : j.value("instances", json::array())) {
        p.instances.push_back(instance_from_json(ji));
      }
      for (const auto& jf : j.value("fields", json::array())) {
        p.fields.emplace_back(jf.at(0).get<std::string>(),
                              jf.at(1).get<std::string>());
      }
      p.html = j.value("html", "");
      out.push_back(std::move(p));
    } catch (const std::exception& e) {
      throw std::runtime_error(path + " line " + std::to_string(line_no) +
                               ": " + e.what());
    }
  }
  return out;
}

TedsTree hierarchy_tree(std::span<const TextInstance> instances,
                        const QuantizerConfig& qc) {
  // root -> paragraphs -> lines -> word leaves, all in raster order
  std::map<int, std::map<int, std::vector<std::size_t>>> paras;
  const auto order = raster_order(instances, qc);
  for (std::size_t idx : order) {
    const TextInstance& t = instances[idx];
    paras[t.para_id.value_or(0)][t.line_id.value_or(0)].push_back(idx);
  }
  TedsTree root{"doc", std::nullopt, {}};
  for (const auto& [pid, lines] : paras) {
    TedsTree para{"para", std::nullopt, {}};
    for (const auto& [lid, members] : lines) {
      TedsTree line{"line", std::nullopt, {}};
      for (std::size_t idx : members) {
        line.children.push_back(TedsTree{"td", instances[idx].text, {}});
      }
      para.children.push_back(std::move(line));
    }
    root.children.push_back(std::move(para));
  }
  return root;
}

int cmd_eval(const std::string& task_str, const std::string& mode,
             const std::string& gt_path, const std::string& pred_path,
             const std::string& out, double iou) {
  const Task task = task_from_string(task_str);
  std::vector<Sample> gts_all = read_jsonl(gt_path);
  std::vector<Sample> gts;
  for (Sample& s : gts_all) {
    if (s.task == task) gts.push_back(std::move(s));
  }
  if (gts.empty()) {
    throw std::runtime_error("no " + task_str + " samples in " + gt_path);
  }
  const auto preds = read_predictions(pred_path);
  std::unordered_map<std::string, const Prediction*> by_id;
  for (const Prediction& p : preds) by_id[p.id] = &p;

  std::vector<std::string> missing;
  for (const Sample& s : gts) {
    if (!by_id.count(s.id)) missing.push_back(s.id);
  }
  if (!missing.empty()) {
    std::string list;
    for (const std::string& id : missing) list += " " + id;
    std::fprintf(stderr, "eval: predictions missing for:%s\n", list.c_str());
    return kCheckFailure;
  }

  const QuantizerConfig qc;
  EvalReport report;
  report.task = task_str;
  report.mode = mode;
  report.n = static_cast<int>(gts.size());

  if (task == Task::spotting) {
    const LexiconMode lex = lexicon_mode_from_string(mode);
    // desk-scale lexicon sourcing: per-image ground-truth words under
    // strong, the whole corpus vocabulary under full/weak/generic
    std::vector<std::string> corpus_words;
    for (const Sample& s : gts) {
      for (const TextInstance& t : s.instances) corpus_words.push_back(t.text);
    }
    SpottingCounts counts;
    for (const Sample& s : gts) {
      const Prediction& p = *by_id[s.id];
      std::vector<SpottingPrediction> sp;
      for (const TextInstance& t : p.instances) sp.push_back({t.polygon, t.text});
      std::vector<SpottingGroundTruth> sg;
      for (const TextInstance& t : s.instances) sg.push_back({t.polygon, t.text, false});
      SpottingConfig cfg;
      cfg.mode = lex;
      cfg.iou_threshold = iou;
      if (lex == LexiconMode::strong) {
        for (const TextInstance& t : s.instances) cfg.lexicon.push_back(t.text);
      } else if (lex != LexiconMode::none) {
        cfg.lexicon = corpus_words;
      }
      counts += spotting_counts(sp, sg, cfg);
    }
    report = spotting_report(counts, lex, report.n);
  } else if (task == Task::kie && mode == "f1") {
    int tp = 0, n_pred = 0, n_gt = 0;
    for (const Sample& s : gts) {
      const Prediction& p = *by_id[s.id];
      const auto gt_fields = entity_fields(s.instances, qc);
      std::map<Field, int> bag;
      for (const Field& f : gt_fields) ++bag[f];
      for (const Field& f : p.fields) {
        auto it = bag.find(f);
        if (it != bag.end() && it->second > 0) {
          --it->second;
          ++tp;
        }
      }
      n_pred += static_cast<int>(p.fields.size());
      n_gt += static_cast<int>(gt_fields.size());
    }
    report.precision = n_pred ? static_cast<double>(tp) / n_pred : 0.0;
    report.recall = n_gt ? static_cast<double>(tp) / n_gt : 0.0;
    report.fscore = report.precision + report.recall > 0.0
                        ? 2.0 * report.precision * report.recall /
                              (report.precision + report.recall)
                        : 0.0;
  } else if (task == Task::hiertext && mode == "nted") {
    double sum = 0.0;
    for (const Sample& s : gts) {
      const Prediction& p = *by_id[s.id];
      sum += nted_accuracy(hierarchy_tree(p.instances, qc),
                           hierarchy_tree(s.instances, qc));
    }
    report.fscore = sum / report.n;
    report.precision = report.recall = report.fscore;
  } else if (task == Task::table && (mode == "teds" || mode == "steds")) {
    double sum = 0.0;
    for (const Sample& s : gts) {
      if (!s.table) throw std::runtime_error("sample " + s.id + " has no table");
      const Prediction& p = *by_id[s.id];
      const auto texts = content_cell_texts(*s.table);
      const std::string gt_html = assemble_html(*s.table, texts);
      sum += teds(p.html, gt_html, /*structure_only=*/mode == "steds");
    }
    report.mode = mode == "steds" ? "s-teds" : "teds";
    report.fscore = sum / report.n;
    report.precision = report.recall = report.fscore;
  } else {
    throw CLI::ValidationError("--mode", "mode '" + mode +
                                             "' does not apply to task '" +
                                             task_str + "'");
  }

  if (!out.empty()) {
    std::ofstream os(out);
    if (!os) throw std::runtime_error("cannot open " + out);
    os << report.to_json_string() << '\n';
  }
  std::printf("task=%s mode=%s precision=%.4f recall=%.4f fscore=%.4f n=%d\n",
              report.task.c_str(), report.mode.c_str(), report.precision,
              report.recall, report.fscore, report.n);
  return 0;
}

// --- teds --------------------------------------------------------------------

int cmd_teds(const std::string& pred_path, const std::string& gt_path,
             bool structure_only) {
  const std::string pred = read_text_file(pred_path);
  const std::string gt = read_text_file(gt_path);
  std::vector<std::string> diagnostics;
  const double score = teds(pred, gt, structure_only, &diagnostics);
  for (const std::string& d : diagnostics) {
    std::fprintf(stderr, "warning: %s\n", d.c_str());
  }
  std::printf("%.4f\n", score);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"visually-situated text parsing toolkit"};
  app.require_subcommand(1);

  std::string task = "spotting", mode = "none", in, out, config, model_path;
  std::string pred_path, gt_path;
  std::uint64_t seed = 1;
  int n = 64;
  double iou = 0.5;
  bool structure_only = false;

  auto* synth = app.add_subcommand("synth", "generate a synthetic corpus");
  synth->add_option("--task", task, "spotting|kie|table|hiertext");
  synth->add_option("--n", n, "sample count");
  synth->add_option("--seed", seed, "corpus seed");
  synth->add_option("-o,--out", out, "output JSONL")->required();
  synth->add_option("--config", config, "SynthConfig overrides (JSON file)");

  auto* check = app.add_subcommand("codec-check", "roundtrip every sample");
  check->add_option("-i,--in", in, "corpus JSONL")->required();

  auto* train = app.add_subcommand("train", "train a model on a corpus");
  train->add_option("--task", task, "spotting|kie|table|hiertext");
  train->add_option("-i,--in", in, "corpus JSONL")->required();
  train->add_option("-o,--out", out, "checkpoint path")->required();
  train->add_option("--seed", seed, "model seed");
  train->add_option("--config", config, "ModelConfig overrides (JSON file)");

  auto* infer = app.add_subcommand("infer", "parse a corpus with a model");
  infer->add_option("model", model_path, "checkpoint path")->required();
  infer->add_option("-i,--in", in, "corpus JSONL")->required();
  infer->add_option("-o,--out", out, "predictions JSONL")->required();

  auto* eval = app.add_subcommand("eval", "score predictions against a corpus");
  eval->add_option("predictions", pred_path, "predictions JSONL")->required();
  eval->add_option("--task", task, "spotting|kie|table|hiertext");
  eval->add_option("--mode", mode,
                   "none|full|strong|weak|generic|f1|nted|teds|steds");
  eval->add_option("-i,--in", in, "ground-truth JSONL")->required();
  eval->add_option("-o,--out", out, "report JSON");
  eval->add_option("--iou", iou, "spotting IoU threshold");

  auto* teds_cmd = app.add_subcommand("teds", "score two HTML tables");
  teds_cmd->add_option("pred", pred_path, "predicted HTML")->required();
  teds_cmd->add_option("gt", gt_path, "ground-truth HTML")->required();
  teds_cmd->add_flag("--structure-only", structure_only, "S-TEDS");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageError;
  }

  try {
    if (synth->parsed()) return cmd_synth(task, n, seed, out, config);
    if (check->parsed()) return cmd_codec_check(in);
    if (train->parsed()) return cmd_train(task, in, out, seed, config);
    if (infer->parsed()) return cmd_infer(model_path, in, out);
    if (eval->parsed()) return cmd_eval(task, mode, in, pred_path, out, iou);
    if (teds_cmd->parsed()) return cmd_teds(pred_path, gt_path, structure_only);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "vstp: %s\n", e.what());
    return kUsageError;
  }
  return kUsageError;
}
