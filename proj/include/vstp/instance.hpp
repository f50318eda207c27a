#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vstp/geometry.hpp"

namespace vstp {

// One annotated text instance.  `entity` is set for KIE documents, `line_id`
// and `para_id` for hierarchical ones.  For KIE, `line_id` doubles as the
// entity-group id so that repeated instances of one class stay separate.
struct TextInstance {
  Polygon16 polygon{};
  std::string text;
  std::optional<std::string> entity;
  std::optional<int> line_id;
  std::optional<int> para_id;
};

Point instance_center(const TextInstance& inst);

// Raster order over instance centers (quantized y, then x, then index).
std::vector<std::size_t> raster_order(std::span<const TextInstance> instances,
                                      const QuantizerConfig& cfg);

}  // namespace vstp
