#include "vstp/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace vstp {

Task task_from_string(std::string_view s) {
  if (s == "spotting") return Task::spotting;
  if (s == "kie") return Task::kie;
  if (s == "table") return Task::table;
  if (s == "hiertext") return Task::hiertext;
  throw std::invalid_argument("unknown task '" + std::string(s) +
                              "' (expected spotting|kie|table|hiertext)");
}

std::string to_string(Task task) {
  switch (task) {
    case Task::spotting: return "spotting";
    case Task::kie: return "kie";
    case Task::table: return "table";
    case Task::hiertext: return "hiertext";
  }
  throw std::invalid_argument("bad task enum value");
}

namespace tok {

std::string entity_open(std::string_view cls) { return "<" + std::string(cls) + ">"; }
std::string entity_close(std::string_view cls) { return "</" + std::string(cls) + ">"; }
std::string rowspan(int n) { return "rowspan=\"" + std::to_string(n) + "\""; }
std::string colspan(int n) { return "colspan=\"" + std::to_string(n) + "\""; }

}  // namespace tok

namespace {

void check_entity_class(const std::string& cls) {
  if (cls.empty()) throw std::invalid_argument("entity class name is empty");
  for (char c : cls) {
    if (std::isspace(static_cast<unsigned char>(c)) || c == '<' || c == '>' ||
        c == '/') {
      throw std::invalid_argument("entity class '" + cls +
                                  "' contains a reserved character");
    }
  }
}

std::vector<std::string> structural_for(Task task, const EntitySchema& schema) {
  std::vector<std::string> out;
  switch (task) {
    case Task::spotting:
      break;
    case Task::kie: {
      if (schema.classes.empty()) {
        throw std::invalid_argument("kie vocabulary requires entity classes");
      }
      std::set<std::string> seen;
      for (const std::string& cls : schema.classes) {
        check_entity_class(cls);
        if (!seen.insert(cls).second) {
          throw std::invalid_argument("duplicate entity class '" + cls + "'");
        }
        out.push_back(tok::entity_open(cls));
        out.push_back(tok::entity_close(cls));
      }
      break;
    }
    case Task::hiertext:
      out = {tok::line_open, tok::line_close, tok::para_open, tok::para_close};
      break;
    case Task::table: {
      if (schema.max_span < 1) {
        throw std::invalid_argument("table vocabulary requires max_span >= 1");
      }
      out = {tok::thead_open, tok::thead_close, tok::tbody_open,
             tok::tbody_close, tok::tr_open,    tok::tr_close,
             tok::td_empty,   tok::td_content,  tok::td_span_open,
             tok::td_span_close, tok::td_close};
      for (int n = 2; n <= schema.max_span; ++n) out.push_back(tok::rowspan(n));
      for (int n = 2; n <= schema.max_span; ++n) out.push_back(tok::colspan(n));
      break;
    }
  }
  return out;
}

}  // namespace

Vocabulary Vocabulary::build(int n_bins, Task task, const EntitySchema& schema) {
  if (n_bins < 2) {
    throw std::invalid_argument("vocabulary: n_bins must be >= 2");
  }
  Vocabulary v;
  v.n_bins_ = n_bins;
  v.task_ = task;
  v.schema_ = schema;
  v.structural_ = structural_for(task, schema);

  v.strings_.reserve(v.size());
  for (int b = 0; b < n_bins; ++b) v.strings_.push_back(std::to_string(b));
  for (int c = 33; c <= 126; ++c) v.strings_.push_back(std::string(1, static_cast<char>(c)));
  for (const std::string& s : v.structural_) v.strings_.push_back(s);
  v.strings_.push_back(tok::bos);
  v.strings_.push_back(tok::eos);
  v.strings_.push_back(tok::pad);
  v.strings_.push_back(tok::unk);

  // Reverse lookup for everything that is not a coordinate.  Single-char
  // strings may be claimed by both the char partition and a structural token
  // (table's ">"); the structural id wins, mirroring how digit strings
  // resolve to coordinate bins.  A collision between two structural/special
  // tokens means the schema is malformed (e.g. an entity class named "S").
  for (int id = n_bins; id < v.size(); ++id) {
    auto [it, inserted] = v.lookup_.emplace(v.strings_[id], id);
    if (!inserted) {
      if (v.is_char(it->second)) {
        it->second = id;
      } else {
        throw std::invalid_argument("vocabulary token collision on '" +
                                    v.strings_[id] + "'");
      }
    }
  }
  return v;
}

int Vocabulary::coord_id(int bin) const {
  if (bin < 0 || bin >= n_bins_) {
    throw std::out_of_range("coord_id: bin " + std::to_string(bin) +
                            " outside [0, " + std::to_string(n_bins_ - 1) + "]");
  }
  return bin;
}

int Vocabulary::coord_value(int id) const {
  if (!is_coord(id)) {
    throw std::out_of_range("coord_value: id " + std::to_string(id) +
                            " is not a coordinate token");
  }
  return id;
}

int Vocabulary::char_id(char32_t cp) const {
  if (cp < 33 || cp > 126) return unk();
  return n_bins_ + static_cast<int>(cp) - 33;
}

char Vocabulary::char_value(int id) const {
  if (!is_char(id)) {
    throw std::out_of_range("char_value: id " + std::to_string(id) +
                            " is not a char token");
  }
  return static_cast<char>(id - n_bins_ + 33);
}

std::optional<int> Vocabulary::structural_id(std::string_view token) const {
  auto it = lookup_.find(std::string(token));
  if (it == lookup_.end() || !is_structural(it->second)) return std::nullopt;
  return it->second;
}

std::optional<std::string> Vocabulary::entity_open_class(int id) const {
  if (task_ != Task::kie || !is_structural(id)) return std::nullopt;
  const std::string& s = strings_[id];
  if (s.size() > 2 && s[1] != '/') return s.substr(1, s.size() - 2);
  return std::nullopt;
}

std::optional<std::string> Vocabulary::entity_close_class(int id) const {
  if (task_ != Task::kie || !is_structural(id)) return std::nullopt;
  const std::string& s = strings_[id];
  if (s.size() > 3 && s[1] == '/') return s.substr(2, s.size() - 3);
  return std::nullopt;
}

const std::string& Vocabulary::token_string(int id) const {
  if (id < 0 || id >= size()) {
    throw std::out_of_range("token_string: id " + std::to_string(id) +
                            " outside vocabulary of size " +
                            std::to_string(size()));
  }
  return strings_[id];
}

std::vector<std::string> Vocabulary::detokenize(std::span<const int> ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int id : ids) out.push_back(token_string(id));
  return out;
}

std::optional<int> Vocabulary::id_of(std::string_view token) const {
  if (!token.empty() && token.size() <= 10 &&
      std::all_of(token.begin(), token.end(),
                  [](char c) { return c >= '0' && c <= '9'; })) {
    // Leading zeros only occur for the token "0" itself; reject "007" so the
    // mapping stays one-to-one with detokenize output.
    if (token.size() > 1 && token[0] == '0') return std::nullopt;
    long bin = std::stol(std::string(token));
    if (bin < n_bins_) return static_cast<int>(bin);
    return std::nullopt;
  }
  auto it = lookup_.find(std::string(token));
  if (it == lookup_.end()) return std::nullopt;
  return it->second;
}

std::vector<int> Vocabulary::tokenize(std::span<const std::string> tokens) const {
  std::vector<int> out;
  out.reserve(tokens.size());
  for (const std::string& t : tokens) {
    auto id = id_of(t);
    if (!id) throw std::invalid_argument("tokenize: unknown token '" + t + "'");
    out.push_back(*id);
  }
  return out;
}

nlohmann::json Vocabulary::to_json() const {
  nlohmann::json j;
  j["n_bins"] = n_bins_;
  j["task"] = to_string(task_);
  j["classes"] = schema_.classes;
  j["max_span"] = schema_.max_span;
  j["structural"] = structural_;
  return j;
}

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
  EntitySchema schema;
  schema.classes = j.at("classes").get<std::vector<std::string>>();
  schema.max_span = j.at("max_span").get<int>();
  Vocabulary v = build(j.at("n_bins").get<int>(),
                       task_from_string(j.at("task").get<std::string>()), schema);
  const auto structural = j.at("structural").get<std::vector<std::string>>();
  if (structural != v.structural_) {
    throw std::invalid_argument(
        "vocabulary file structural tokens do not match the declared task");
  }
  return v;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << to_json().dump(2) << "\n";
  if (!out) throw std::runtime_error("write failed on " + path.string());
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  nlohmann::json j;
  in >> j;
  return from_json(j);
}

std::vector<char32_t> utf8_codepoints(std::string_view text) {
  std::vector<char32_t> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const unsigned char b0 = static_cast<unsigned char>(text[i]);
    int len = 1;
    char32_t cp = 0xFFFD;
    if (b0 < 0x80) {
      cp = b0;
    } else if ((b0 >> 5) == 0x6) {
      len = 2;
      cp = b0 & 0x1F;
    } else if ((b0 >> 4) == 0xE) {
      len = 3;
      cp = b0 & 0x0F;
    } else if ((b0 >> 3) == 0x1E) {
      len = 4;
      cp = b0 & 0x07;
    } else {
      out.push_back(0xFFFD);
      ++i;
      continue;
    }
    if (i + len > text.size()) {
      out.push_back(0xFFFD);
      break;
    }
    bool ok = true;
    for (int k = 1; k < len; ++k) {
      const unsigned char b = static_cast<unsigned char>(text[i + k]);
      if ((b >> 6) != 0x2) {
        ok = false;
        break;
      }
      cp = (cp << 6) | (b & 0x3F);
    }
    out.push_back(ok ? cp : 0xFFFD);
    i += ok ? len : 1;
  }
  return out;
}

}  // namespace vstp
