#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace vstp {

enum class Task { spotting, kie, table, hiertext };

Task task_from_string(std::string_view s);       // throws std::invalid_argument
std::string to_string(Task task);

// Token-string constants for the structural partitions.
namespace tok {
inline constexpr const char* bos = "<S>";
inline constexpr const char* eos = "</S>";
inline constexpr const char* pad = "<PAD>";
inline constexpr const char* unk = "<UNK>";
inline constexpr const char* line_open = "<LINE>";
inline constexpr const char* line_close = "</LINE>";
inline constexpr const char* para_open = "<PARA>";
inline constexpr const char* para_close = "</PARA>";
inline constexpr const char* thead_open = "<thead>";
inline constexpr const char* thead_close = "</thead>";
inline constexpr const char* tbody_open = "<tbody>";
inline constexpr const char* tbody_close = "</tbody>";
inline constexpr const char* tr_open = "<tr>";
inline constexpr const char* tr_close = "</tr>";
inline constexpr const char* td_empty = "<td></td>";      // plain cell, no content
inline constexpr const char* td_content = "<td>[]</td>";  // plain cell with content
inline constexpr const char* td_span_open = "<td";        // spanning cell opener
inline constexpr const char* td_span_close = ">";         // closes the attribute list
inline constexpr const char* td_close = "</td>";

std::string entity_open(std::string_view cls);   // "<cls>"
std::string entity_close(std::string_view cls);  // "</cls>"
std::string rowspan(int n);                      // rowspan="n"
std::string colspan(int n);                      // colspan="n"
}  // namespace tok

// Task-dependent pieces of the vocabulary.
struct EntitySchema {
  std::vector<std::string> classes;  // KIE entity classes, tag order
  int max_span = 10;                 // largest rowspan/colspan with a token
};

// Unified token space shared by all decoders:
//   [0, n_bins)                coordinate bins
//   [n_bins, n_bins+94)        printable ASCII '!'..'~'
//   [.., .. + n_structural)    task structural / entity tags
//   last four                  <S> </S> <PAD> <UNK>
class Vocabulary {
 public:
  static Vocabulary build(int n_bins, Task task, const EntitySchema& schema = {});

  int n_bins() const { return n_bins_; }
  Task task() const { return task_; }
  const EntitySchema& schema() const { return schema_; }
  int size() const { return n_bins_ + kNumChars + static_cast<int>(structural_.size()) + 4; }

  static constexpr int kNumChars = 94;  // '!' (33) .. '~' (126)

  bool is_coord(int id) const { return id >= 0 && id < n_bins_; }
  bool is_char(int id) const { return id >= n_bins_ && id < n_bins_ + kNumChars; }
  bool is_structural(int id) const {
    return id >= n_bins_ + kNumChars && id < size() - 4;
  }
  bool is_special(int id) const { return id >= size() - 4 && id < size(); }

  int coord_id(int bin) const;        // bin value -> id (identity, validated)
  int coord_value(int id) const;      // id -> bin value
  int char_id(char32_t cp) const;     // maps outside '!'..'~' to <UNK>
  char char_value(int id) const;      // id -> ASCII char

  int bos() const { return size() - 4; }
  int eos() const { return size() - 3; }
  int pad() const { return size() - 2; }
  int unk() const { return size() - 1; }

  std::optional<int> structural_id(std::string_view token) const;
  const std::vector<std::string>& structural_tokens() const { return structural_; }

  // Entity-tag introspection (KIE): returns the class name when `id` is the
  // matching kind of tag.
  std::optional<std::string> entity_open_class(int id) const;
  std::optional<std::string> entity_close_class(int id) const;

  // id -> token string.  Coordinates render as decimal numbers, chars as
  // single-character strings.  Throws std::out_of_range on a bad id.
  const std::string& token_string(int id) const;
  std::vector<std::string> detokenize(std::span<const int> ids) const;

  // token string -> id.  All-digit strings resolve to coordinate bins (the
  // char tokens '0'..'9' are reachable via char_id, not via strings).
  std::optional<int> id_of(std::string_view token) const;
  std::vector<int> tokenize(std::span<const std::string> tokens) const;  // throws on unknown

  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const {
    return n_bins_ == other.n_bins_ && task_ == other.task_ &&
           structural_ == other.structural_;
  }

 private:
  Vocabulary() = default;

  int n_bins_ = 0;
  Task task_ = Task::spotting;
  EntitySchema schema_;
  std::vector<std::string> structural_;                 // in id order
  std::vector<std::string> strings_;                    // id -> token string
  std::unordered_map<std::string, int> lookup_;         // non-coord strings -> id
};

// Lenient UTF-8 decode; malformed bytes become U+FFFD (which maps to <UNK>).
std::vector<char32_t> utf8_codepoints(std::string_view text);

}  // namespace vstp
