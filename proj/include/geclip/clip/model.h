#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>

#include "geclip/clip/config.h"
#include "geclip/clip/container.h"
#include "geclip/clip/image.h"
#include "geclip/clip/tokenizer.h"

namespace geclip::clip {

struct ClipModel {
  ModelConfig config;
  WeightMap weights;

  const Tensor& weight(const std::string& name) const;
  // Deep copy whose tensors are independent of this model.
  ClipModel clone() const;
  // Throws LoadError naming the first missing tensor or shape mismatch.
  void validate() const;
};

// Small-normal initialization in the style of released CLIP checkpoints;
// deterministic for a seed.
ClipModel init_random_model(const ModelConfig& config, std::uint64_t seed);

struct ModelBundle {
  ClipModel model;
  BpeTokenizer tokenizer;
  Preprocess preprocess;
  std::string model_id;
  std::string content_hash;  // FNV-1a 64 over the container bytes, hex

  const ModelConfig& config() const { return model.config; }
};

// Header keys: "config", "preprocess", "model_id", "tokenizer" {"vocab",
// "merges"} with file names relative to the container's directory.
std::shared_ptr<const ModelBundle> load_model_bundle(const std::filesystem::path& path);
// Writes the container plus tokenizer files next to it.
void save_model_bundle(const std::filesystem::path& path, const ModelBundle& bundle);

std::string fnv1a64_hex(std::span<const std::uint8_t> bytes);

}  // namespace geclip::clip
