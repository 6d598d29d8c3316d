#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "geclip/clip/model.h"
#include "geclip/explain/explain.h"

namespace geclip::service {

std::string base64_encode(std::span<const std::uint8_t> bytes);

// {width, height, dtype: "f32le", data: base64 of row-major little-endian
// float32 values, normalized, layers, prompt}.
nlohmann::json heatmap_record(const explain::HeatMap& map);
// {words, importance, raw, tokens: [{position, word, importance}], layers}.
nlohmann::json saliency_record(const explain::TextSaliency& saliency);

// Sidecar written next to every output: tool, command, options, seed and
// the model identity. Holds no timestamps so reruns compare byte-equal.
nlohmann::json run_manifest(const std::string& command, const nlohmann::json& options, std::uint64_t seed,
                            const clip::ModelBundle* bundle);

// Pretty-printed with a trailing newline.
void write_json(const std::filesystem::path& path, const nlohmann::json& doc);

// Files created by a command; unless committed, every tracked path is
// removed on destruction (directories only when empty).
class OutputTracker {
 public:
  OutputTracker() = default;
  OutputTracker(const OutputTracker&) = delete;
  OutputTracker& operator=(const OutputTracker&) = delete;
  ~OutputTracker();

  // Creates `dir` (and parents) and records each directory that did not exist.
  void make_dir(const std::filesystem::path& dir);
  // Records a path about to be written.
  std::filesystem::path track(const std::filesystem::path& path);
  void commit() { committed_ = true; }

 private:
  std::vector<std::filesystem::path> files_;
  std::vector<std::filesystem::path> dirs_;
  bool committed_ = false;
};

}  // namespace geclip::service
