#include "geclip/clip/container.h"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <vector>

namespace geclip::clip {

namespace {

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

void put_f32(std::string& out, float f) {
  std::uint32_t bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

float get_f32(const unsigned char* p) {
  std::uint32_t bits = static_cast<std::uint32_t>(p[0]) |
                       (static_cast<std::uint32_t>(p[1]) << 8) |
                       (static_cast<std::uint32_t>(p[2]) << 16) |
                       (static_cast<std::uint32_t>(p[3]) << 24);
  return std::bit_cast<float>(bits);
}

std::size_t align_up(std::size_t v) {
  return (v + kContainerAlign - 1) / kContainerAlign * kContainerAlign;
}

}  // namespace

void write_container(const std::filesystem::path& path,
                     const nlohmann::json& metadata, const WeightMap& tensors) {
  nlohmann::json header = metadata;
  nlohmann::json manifest = nlohmann::json::array();
  std::string payload;
  for (const auto& [name, t] : tensors) {
    payload.resize(align_up(payload.size()), '\0');
    const std::size_t offset = payload.size();
    for (Real v : t.data()) put_f32(payload, static_cast<float>(v));
    manifest.push_back({{"name", name},
                        {"dtype", "f32"},
                        {"shape", t.shape()},
                        {"offset", offset},
                        {"length", payload.size() - offset}});
  }
  header["tensors"] = manifest;
  std::string text = header.dump();
  const std::size_t fixed = 16;
  text.resize(align_up(fixed + text.size()) - fixed, ' ');

  std::string blob(kContainerMagic, 8);
  put_u64(blob, text.size());
  blob += text;
  blob += payload;

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw DataError("short write to " + path.string());
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open weight container " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 16) {
    throw LoadError(path.string() + ": file too short for a container header");
  }
  if (std::memcmp(bytes.data(), "GECW", 4) != 0) {
    throw LoadError(path.string() + ": bad magic (not a GECW container)");
  }
  if (std::memcmp(bytes.data(), kContainerMagic, 8) != 0) {
    throw LoadError(path.string() + ": unsupported container version '" +
                    std::string(bytes.begin() + 4, bytes.begin() + 8) + "'");
  }
  const std::uint64_t header_len = get_u64(bytes.data() + 8);
  if (header_len > bytes.size() - 16) {
    throw LoadError(path.string() + ": header length exceeds file size");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16,
                                   bytes.begin() + 16 + header_len);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(path.string() + ": malformed header: " + e.what());
  }
  const std::size_t payload_start = 16 + header_len;
  const std::size_t payload_size = bytes.size() - payload_start;

  Container c;
  if (!header.contains("tensors") || !header["tensors"].is_array()) {
    throw LoadError(path.string() + ": header has no tensor manifest");
  }
  for (const auto& entry : header["tensors"]) {
    std::string name = entry.value("name", std::string("<unnamed>"));
    try {
      const std::string dtype = entry.at("dtype").get<std::string>();
      if (dtype != "f32") {
        throw LoadError("tensor '" + name + "': unsupported dtype " + dtype);
      }
      Shape shape = entry.at("shape").get<Shape>();
      const std::size_t offset = entry.at("offset").get<std::size_t>();
      const std::size_t length = entry.at("length").get<std::size_t>();
      if (offset % kContainerAlign != 0) {
        throw LoadError("tensor '" + name + "': offset not 64-byte aligned");
      }
      if (length != shape_numel(shape) * 4) {
        throw LoadError("tensor '" + name + "': length " +
                        std::to_string(length) + " does not match shape " +
                        shape_string(shape));
      }
      if (offset > payload_size || length > payload_size - offset) {
        throw LoadError("tensor '" + name + "' is truncated");
      }
      std::vector<Real> values(shape_numel(shape));
      const unsigned char* p = bytes.data() + payload_start + offset;
      for (std::size_t i = 0; i < values.size(); ++i) values[i] = get_f32(p + 4 * i);
      c.tensors.emplace(name, Tensor(std::move(shape), std::move(values)));
    } catch (const LoadError& e) {
      throw LoadError(path.string() + ": " + e.what());
    } catch (const Error& e) {
      throw LoadError(path.string() + ": tensor '" + name + "': " + e.what());
    } catch (const nlohmann::json::exception& e) {
      throw LoadError(path.string() + ": tensor '" + name +
                      "': malformed manifest entry: " + e.what());
    }
  }
  header.erase("tensors");
  c.header = std::move(header);
  return c;
}

}  // namespace geclip::clip
