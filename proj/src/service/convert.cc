#include "geclip/service/convert.h"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <regex>
#include <set>
#include <sstream>

#include "geclip/common/error.h"
#include "json.hpp"

namespace geclip::service {

namespace {

float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = (h >> 15) & 1u, exp = (h >> 10) & 0x1fu, mant = h & 0x3ffu;
  float v;
  if (exp == 0) {
    v = std::ldexp(static_cast<float>(mant), -24);
  } else if (exp == 31) {
    v = mant == 0 ? INFINITY : NAN;
  } else {
    v = std::ldexp(static_cast<float>(mant | 0x400u), static_cast<int>(exp) - 25);
  }
  return sign ? -v : v;
}

std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "F64") return 8;
  if (dtype == "F32") return 4;
  if (dtype == "F16" || dtype == "BF16") return 2;
  throw LoadError("unsupported safetensors dtype " + dtype);
}

Real decode_value(const std::string& dtype, const std::uint8_t* p) {
  if (dtype == "F64") {
    double d;
    std::memcpy(&d, p, 8);
    return d;
  }
  if (dtype == "F32") {
    float f;
    std::memcpy(&f, p, 4);
    return f;
  }
  std::uint16_t h;
  std::memcpy(&h, p, 2);
  if (dtype == "F16") return half_to_float(h);
  return std::bit_cast<float>(static_cast<std::uint32_t>(h) << 16);
}

std::size_t count_blocks(const clip::WeightMap& w, const std::string& prefix) {
  const std::regex re("^" + std::regex_replace(prefix, std::regex(R"(\.)"), R"(\.)") + R"((\d+)\.)");
  std::set<std::size_t> ids;
  std::smatch m;
  for (const auto& [name, t] : w) {
    if (std::regex_search(name, m, re)) ids.insert(std::stoul(m[1].str()));
  }
  return ids.size();
}

const Tensor& need(const clip::WeightMap& w, const std::string& name) {
  const auto it = w.find(name);
  if (it == w.end()) throw LoadError("state dict has no tensor '" + name + "'");
  return it->second;
}

std::size_t heads_for(std::size_t width, std::optional<std::size_t> given, const char* what) {
  if (given) return *given;
  if (width % 64 != 0) throw LoadError(std::string("cannot infer ") + what + " heads from width " + std::to_string(width));
  return width / 64;
}

}  // namespace

clip::WeightMap read_safetensors(const std::filesystem::path& path) {
  static_assert(std::endian::native == std::endian::little, "safetensors payloads are little-endian");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path.string());
  std::uint64_t n = 0;
  in.read(reinterpret_cast<char*>(&n), 8);
  if (!in || n > (1ull << 30)) throw LoadError(path.string() + ": bad safetensors header length");
  std::string header(n, '\0');
  in.read(header.data(), static_cast<std::streamsize>(n));
  if (!in) throw LoadError(path.string() + ": truncated safetensors header");
  const nlohmann::json doc = nlohmann::json::parse(header, nullptr, false);
  if (doc.is_discarded() || !doc.is_object()) throw LoadError(path.string() + ": malformed safetensors header");
  std::vector<std::uint8_t> payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  clip::WeightMap out;
  for (const auto& [name, info] : doc.items()) {
    if (name == "__metadata__") continue;
    const std::string dtype = info.at("dtype").get<std::string>();
    Shape shape;
    std::size_t count = 1;
    for (const auto& d : info.at("shape")) {
      shape.push_back(d.get<std::size_t>());
      count *= shape.back();
    }
    if (shape.empty()) shape = {1};
    const auto offsets = info.at("data_offsets").get<std::vector<std::size_t>>();
    const std::size_t width = dtype_size(dtype);
    if (offsets.size() != 2 || offsets[1] < offsets[0] || offsets[1] > payload.size() ||
        offsets[1] - offsets[0] != count * width) {
      throw LoadError(path.string() + ": bad data offsets for '" + name + "'");
    }
    std::vector<Real> values(count);
    for (std::size_t i = 0; i < count; ++i) values[i] = decode_value(dtype, &payload[offsets[0] + i * width]);
    out.emplace(name, Tensor(shape, std::move(values)));
  }
  return out;
}

clip::ModelConfig infer_config(const clip::WeightMap& w, std::optional<std::size_t> vision_heads,
                               std::optional<std::size_t> text_heads) {
  clip::ModelConfig c;
  const Tensor& conv = need(w, "visual.conv1.weight");
  if (conv.rank() != 4) throw LoadError("visual.conv1.weight must be rank 4");
  c.vision_width = conv.dim(0);
  c.patch_size = conv.dim(2);
  const std::size_t tokens = need(w, "visual.positional_embedding").dim(0);
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(tokens - 1))));
  if (side * side + 1 != tokens) throw LoadError("visual positional embedding is not a square grid plus [cls]");
  c.image_size = side * c.patch_size;
  c.vision_layers = count_blocks(w, "visual.transformer.resblocks.");
  c.text_width = need(w, "ln_final.weight").dim(0);
  c.text_layers = count_blocks(w, "transformer.resblocks.");
  c.embed_dim = need(w, "text_projection").dim(1);
  c.vocab_size = need(w, "token_embedding.weight").dim(0);
  c.context_length = need(w, "positional_embedding").dim(0);
  c.vision_heads = heads_for(c.vision_width, vision_heads, "vision");
  c.text_heads = heads_for(c.text_width, text_heads, "text");
  c.validate();
  return c;
}

clip::BpeTokenizer tokenizer_from_merges_file(const std::filesystem::path& path, std::size_t vocab_size) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open merges file " + path.string());
  if (vocab_size < 514) throw DataError("vocabulary of " + std::to_string(vocab_size) + " is too small for BPE");
  const std::size_t want = vocab_size - 514;
  std::vector<clip::Merge> merges;
  std::string line;
  std::size_t lineno = 0;
  while (merges.size() < want && std::getline(in, line)) {
    ++lineno;
    if (lineno == 1 && line.starts_with("#version")) continue;
    std::istringstream ss(line);
    std::string a, b, extra;
    if (!(ss >> a >> b) || (ss >> extra)) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected two symbols");
    }
    merges.emplace_back(a, b);
  }
  if (merges.size() < want) {
    throw DataError(path.string() + " has " + std::to_string(merges.size()) + " merges; the model needs " +
                    std::to_string(want));
  }
  return clip::BpeTokenizer::from_merges(std::move(merges));
}

ConvertReport convert_weights(const ConvertOptions& opt) {
  const clip::WeightMap all = read_safetensors(opt.input);
  ConvertReport report;
  report.config = infer_config(all, opt.vision_heads, opt.text_heads);
  clip::ModelBundle bundle;
  bundle.model.config = report.config;
  std::set<std::string> used;
  for (const auto& [name, shape] : clip::expected_weights(report.config)) {
    const Tensor& t = need(all, name);
    if (t.shape() != shape) {
      throw LoadError("tensor '" + name + "' has shape " + shape_string(t.shape()) + ", expected " +
                      shape_string(shape));
    }
    bundle.model.weights.emplace(name, t);
    used.insert(name);
  }
  for (const auto& [name, t] : all) {
    if (!used.contains(name)) report.ignored.push_back(name);
  }
  bundle.tokenizer = tokenizer_from_merges_file(opt.merges, report.config.vocab_size);
  bundle.model_id = opt.model_id.empty() ? opt.input.stem().string() : opt.model_id;
  clip::save_model_bundle(opt.output, bundle);
  return report;
}

}  // namespace geclip::service
