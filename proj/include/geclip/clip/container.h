#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "geclip/tensor/tensor.h"
#include "json.hpp"

// Weight container layout:
//
//   bytes [0, 8)    magic "GECW0001"
//   bytes [8, 16)   little-endian u64 header length N
//   bytes [16, 16+N) UTF-8 JSON header, space padded so the payload starts on
//                   a 64-byte boundary
//   payload         raw little-endian f32 tensors
//
// The header carries arbitrary metadata plus "tensors": an ordered manifest
// of {name, dtype, shape, offset, length}; offsets are relative to the
// payload start and 64-byte aligned.
namespace geclip::clip {

inline constexpr char kContainerMagic[] = "GECW0001";
inline constexpr std::size_t kContainerAlign = 64;

using WeightMap = std::map<std::string, Tensor>;

struct Container {
  nlohmann::json header;  // metadata without the "tensors" manifest
  WeightMap tensors;
};

// Tensors are written in map order as f32.
void write_container(const std::filesystem::path& path,
                     const nlohmann::json& metadata, const WeightMap& tensors);
Container read_container(const std::filesystem::path& path);

}  // namespace geclip::clip
