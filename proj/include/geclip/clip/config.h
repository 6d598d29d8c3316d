#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "geclip/tensor/tensor.h"
#include "json.hpp"

namespace geclip::clip {

// Attention grouping used by a forward pass. Explanations run with a single
// head whose softmax spans every channel; metrics use the trained grouping.
enum class HeadMode { kMulti, kSingle };

const char* head_mode_name(HeadMode mode);
HeadMode parse_head_mode(const std::string& name);

struct ModelConfig {
  std::size_t image_size = 224;
  std::size_t patch_size = 16;
  std::size_t vision_layers = 12;
  std::size_t vision_width = 768;
  std::size_t vision_heads = 12;
  std::size_t text_layers = 12;
  std::size_t text_width = 512;
  std::size_t text_heads = 8;
  std::size_t embed_dim = 512;
  std::size_t vocab_size = 49408;
  std::size_t context_length = 77;

  // Throws ContractError when extents are inconsistent.
  void validate() const;
  std::size_t grid_side() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid_side() * grid_side(); }

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);

  bool operator==(const ModelConfig&) const = default;
};

// Name and exact shape of every tensor a model with this config needs.
std::vector<std::pair<std::string, Shape>> expected_weights(
    const ModelConfig& config);

}  // namespace geclip::clip
