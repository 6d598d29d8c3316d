#include "geclip/clip/model.h"

#include <cmath>
#include <cstdio>
#include <random>

#include "geclip/common/error.h"

namespace geclip::clip {

const Tensor& ClipModel::weight(const std::string& name) const {
  auto it = weights.find(name);
  if (it == weights.end()) throw ContractError("model has no tensor '" + name + "'");
  return it->second;
}

ClipModel ClipModel::clone() const {
  ClipModel out{config, {}};
  for (const auto& [name, t] : weights) out.weights.emplace(name, t.clone());
  return out;
}

void ClipModel::validate() const {
  config.validate();
  for (const auto& [name, shape] : expected_weights(config)) {
    auto it = weights.find(name);
    if (it == weights.end()) throw LoadError("missing tensor '" + name + "'");
    if (it->second.shape() != shape) {
      throw LoadError("tensor '" + name + "' has shape " +
                      shape_string(it->second.shape()) + ", expected " +
                      shape_string(shape));
    }
  }
}

ClipModel init_random_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  ClipModel m{config, {}};
  for (const auto& [name, shape] : expected_weights(config)) {
    const std::size_t n = shape_numel(shape);
    std::vector<Real> v(n, 0.0);
    auto ends_with = [&](const char* suffix) {
      const std::string s = suffix;
      return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
    };
    if (name == "logit_scale") {
      v[0] = std::log(1.0 / 0.07);
    } else if (ends_with("ln_1.weight") || ends_with("ln_2.weight") ||
               ends_with("ln_pre.weight") || ends_with("ln_post.weight") ||
               ends_with("ln_final.weight")) {
      v.assign(n, 1.0);
    } else if (ends_with("bias")) {
      // zeros
    } else {
      // Fan-in scaled normal keeps activations O(1) at any width.
      const std::size_t fan_in = shape.size() >= 2 ? shape_numel(shape) / shape[0] : shape[0];
      Real sd = 1.0 / std::sqrt(static_cast<Real>(fan_in));
      if (name == "visual.proj" || name == "text_projection") sd = 1.0 / std::sqrt(static_cast<Real>(shape[0]));
      if (ends_with("embedding") || ends_with("embedding.weight")) sd = 0.5;
      std::normal_distribution<Real> dist(0.0, sd);
      for (Real& x : v) x = dist(rng);
    }
    m.weights.emplace(name, Tensor(shape, std::move(v)));
  }
  return m;
}

std::string fnv1a64_hex(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::shared_ptr<const ModelBundle> load_model_bundle(const std::filesystem::path& path) {
  Container c = read_container(path);
  auto bundle = std::make_shared<ModelBundle>();
  const nlohmann::json& h = c.header;
  try {
    if (!h.contains("config")) throw LoadError("header has no 'config'");
    bundle->model.config = ModelConfig::from_json(h.at("config"));
    if (h.contains("preprocess")) {
      bundle->preprocess.mean = h["preprocess"].at("mean").get<std::array<Real, 3>>();
      bundle->preprocess.std = h["preprocess"].at("std").get<std::array<Real, 3>>();
    }
    bundle->model_id = h.value("model_id", path.stem().string());
    if (!h.contains("tokenizer")) throw LoadError("header has no 'tokenizer'");
    const auto dir = path.parent_path();
    bundle->tokenizer = BpeTokenizer::from_files(
        dir / h["tokenizer"].at("vocab").get<std::string>(),
        dir / h["tokenizer"].at("merges").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(path.string() + ": malformed header: " + e.what());
  } catch (const LoadError& e) {
    throw LoadError(path.string() + ": " + e.what());
  } catch (const Error& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
  bundle->model.weights = std::move(c.tensors);
  try {
    bundle->model.validate();
    if (bundle->tokenizer.vocab_size() != bundle->model.config.vocab_size) {
      throw LoadError("tokenizer vocabulary has " +
                      std::to_string(bundle->tokenizer.vocab_size()) +
                      " entries, config expects " +
                      std::to_string(bundle->model.config.vocab_size));
    }
  } catch (const Error& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
  bundle->content_hash = fnv1a64_hex(read_file_bytes(path));
  return bundle;
}

void save_model_bundle(const std::filesystem::path& path, const ModelBundle& bundle) {
  bundle.model.validate();
  const std::string stem = path.stem().string();
  const std::string vocab = stem + ".vocab.txt";
  const std::string merges = stem + ".merges.txt";
  bundle.tokenizer.save(path.parent_path() / vocab, path.parent_path() / merges);
  nlohmann::json header = {
      {"config", bundle.model.config.to_json()},
      {"preprocess", {{"mean", bundle.preprocess.mean}, {"std", bundle.preprocess.std}}},
      {"model_id", bundle.model_id},
      {"tokenizer", {{"vocab", vocab}, {"merges", merges}}}};
  write_container(path, header, bundle.model.weights);
}

}  // namespace geclip::clip
