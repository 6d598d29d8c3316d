#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "geclip/clip/container.h"
#include "geclip/clip/model.h"

namespace geclip::service {

// Tensors of a safetensors file (F64, F32, F16 or BF16), converted to Real.
// Scalars become shape [1].
clip::WeightMap read_safetensors(const std::filesystem::path& path);

// Extents read off the tensor shapes of an OpenAI-layout CLIP state dict.
// Head counts default to width / 64.
clip::ModelConfig infer_config(const clip::WeightMap& weights, std::optional<std::size_t> vision_heads = {},
                               std::optional<std::size_t> text_heads = {});

// BPE merges file ("a b" per line, optional "#version" first line); keeps
// the first vocab_size - 514 merges as the CLIP tokenizer does.
clip::BpeTokenizer tokenizer_from_merges_file(const std::filesystem::path& path, std::size_t vocab_size);

struct ConvertOptions {
  std::filesystem::path input;   // .safetensors
  std::filesystem::path merges;  // BPE merges text file
  std::filesystem::path output;  // bundle container path
  std::string model_id;          // default: input file stem
  std::optional<std::size_t> vision_heads;
  std::optional<std::size_t> text_heads;
};

struct ConvertReport {
  clip::ModelConfig config;
  std::vector<std::string> ignored;  // tensors not used by the model
};

ConvertReport convert_weights(const ConvertOptions& options);

}  // namespace geclip::service
