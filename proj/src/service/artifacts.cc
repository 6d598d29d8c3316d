#include "geclip/service/artifacts.h"

#include <bit>
#include <cstring>
#include <fstream>

#include "geclip/common/error.h"
#include "httplib.h"

namespace geclip::service {

using nlohmann::json;

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  return httplib::detail::base64_encode(std::string(bytes.begin(), bytes.end()));
}

json heatmap_record(const explain::HeatMap& map) {
  static_assert(std::endian::native == std::endian::little, "f32le records assume a little-endian host");
  std::vector<std::uint8_t> raw(map.values.size() * 4);
  for (std::size_t i = 0; i < map.values.size(); ++i) {
    const float f = static_cast<float>(map.values[i]);
    std::memcpy(&raw[i * 4], &f, 4);
  }
  return {{"width", map.width},   {"height", map.height},         {"dtype", "f32le"},
          {"data", base64_encode(raw)}, {"normalized", map.normalized}, {"layers", map.layers},
          {"prompt", map.prompt}};
}

json saliency_record(const explain::TextSaliency& s) {
  json tokens = json::array();
  for (std::size_t t = 0; t < s.token_importance.size(); ++t) {
    if (t < s.token_word.size() && s.token_word[t] < 0) continue;
    tokens.push_back({{"position", t},
                      {"word", t < s.token_word.size() ? s.token_word[t] : -1},
                      {"importance", s.token_importance[t]}});
  }
  return {{"words", s.words}, {"importance", s.importance}, {"raw", s.raw}, {"tokens", tokens}, {"layers", s.layers}};
}

json run_manifest(const std::string& command, const json& options, std::uint64_t seed, const clip::ModelBundle* b) {
  json doc = {{"tool", "geclip"}, {"command", command}, {"options", options}, {"seed", seed}};
  if (b != nullptr) {
    doc["model"] = {{"id", b->model_id}, {"hash", b->content_hash}, {"config", b->config().to_json()}};
  } else {
    doc["model"] = nullptr;
  }
  return doc;
}

void write_json(const std::filesystem::path& path, const json& doc) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << doc.dump(2) << "\n";
  if (!out) throw DataError("failed writing " + path.string());
}

OutputTracker::~OutputTracker() {
  if (committed_) return;
  std::error_code ec;
  for (auto it = files_.rbegin(); it != files_.rend(); ++it) std::filesystem::remove(*it, ec);
  for (auto it = dirs_.rbegin(); it != dirs_.rend(); ++it) {
    if (std::filesystem::is_directory(*it, ec) && std::filesystem::is_empty(*it, ec)) {
      std::filesystem::remove(*it, ec);
    }
  }
}

void OutputTracker::make_dir(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> missing;
  for (auto p = dir; !p.empty() && !std::filesystem::exists(p); p = p.parent_path()) {
    missing.push_back(p);
    if (p == p.parent_path()) break;
  }
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory " + dir.string() + ": " + ec.message());
  dirs_.insert(dirs_.end(), missing.rbegin(), missing.rend());
}

std::filesystem::path OutputTracker::track(const std::filesystem::path& path) {
  files_.push_back(path);
  return path;
}

}  // namespace geclip::service
