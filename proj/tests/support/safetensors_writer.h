#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "geclip/clip/model.h"
#include "geclip/clip/tokenizer.h"

namespace geclip::testing {

using SafetensorsEntry = std::tuple<std::string, std::string, Shape, std::vector<std::uint8_t>>;

// Minimal safetensors writer used as the conversion oracle.
void write_safetensors(const std::filesystem::path& path, const std::vector<SafetensorsEntry>& tensors);

std::vector<std::uint8_t> f32_bytes(std::span<const Real> v);

// Merges file in the upstream layout: a #version line, then one merge per line.
void write_merges(const std::filesystem::path& path, const clip::BpeTokenizer& tok);

// State dict of `model` as F32 tensors, logit_scale as a scalar.
std::vector<SafetensorsEntry> state_dict_entries(const clip::ClipModel& model);

}  // namespace geclip::testing
