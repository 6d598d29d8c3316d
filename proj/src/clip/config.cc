#include "geclip/clip/config.h"

namespace geclip::clip {

const char* head_mode_name(HeadMode mode) {
  return mode == HeadMode::kSingle ? "single" : "multi";
}

HeadMode parse_head_mode(const std::string& name) {
  if (name == "single") return HeadMode::kSingle;
  if (name == "multi") return HeadMode::kMulti;
  throw ContractError("unknown head mode '" + name + "' (single|multi)");
}

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* what) {
    if (v == 0) throw ContractError(std::string("config: ") + what + " must be positive");
  };
  positive(image_size, "image_size");
  positive(patch_size, "patch_size");
  positive(vision_layers, "vision_layers");
  positive(vision_width, "vision_width");
  positive(vision_heads, "vision_heads");
  positive(text_layers, "text_layers");
  positive(text_width, "text_width");
  positive(text_heads, "text_heads");
  positive(embed_dim, "embed_dim");
  positive(vocab_size, "vocab_size");
  positive(context_length, "context_length");
  if (image_size % patch_size != 0) {
    throw ContractError("config: image_size " + std::to_string(image_size) +
                        " not divisible by patch_size " +
                        std::to_string(patch_size));
  }
  if (vision_width % vision_heads != 0) {
    throw ContractError("config: vision_width not divisible by vision_heads");
  }
  if (text_width % text_heads != 0) {
    throw ContractError("config: text_width not divisible by text_heads");
  }
  if (context_length < 2) {
    throw ContractError("config: context_length must hold [sot] and [eot]");
  }
}

nlohmann::json ModelConfig::to_json() const {
  return {{"image_size", image_size},       {"patch_size", patch_size},
          {"vision_layers", vision_layers}, {"vision_width", vision_width},
          {"vision_heads", vision_heads},   {"text_layers", text_layers},
          {"text_width", text_width},       {"text_heads", text_heads},
          {"embed_dim", embed_dim},         {"vocab_size", vocab_size},
          {"context_length", context_length}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.image_size = j.at("image_size").get<std::size_t>();
    c.patch_size = j.at("patch_size").get<std::size_t>();
    c.vision_layers = j.at("vision_layers").get<std::size_t>();
    c.vision_width = j.at("vision_width").get<std::size_t>();
    c.vision_heads = j.at("vision_heads").get<std::size_t>();
    c.text_layers = j.at("text_layers").get<std::size_t>();
    c.text_width = j.at("text_width").get<std::size_t>();
    c.text_heads = j.at("text_heads").get<std::size_t>();
    c.embed_dim = j.at("embed_dim").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.context_length = j.at("context_length").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

void add_block(std::vector<std::pair<std::string, Shape>>& out,
               const std::string& prefix, std::size_t width) {
  out.push_back({prefix + "attn.in_proj_weight", {3 * width, width}});
  out.push_back({prefix + "attn.in_proj_bias", {3 * width}});
  out.push_back({prefix + "attn.out_proj.weight", {width, width}});
  out.push_back({prefix + "attn.out_proj.bias", {width}});
  out.push_back({prefix + "ln_1.weight", {width}});
  out.push_back({prefix + "ln_1.bias", {width}});
  out.push_back({prefix + "mlp.c_fc.weight", {4 * width, width}});
  out.push_back({prefix + "mlp.c_fc.bias", {4 * width}});
  out.push_back({prefix + "mlp.c_proj.weight", {width, 4 * width}});
  out.push_back({prefix + "mlp.c_proj.bias", {width}});
  out.push_back({prefix + "ln_2.weight", {width}});
  out.push_back({prefix + "ln_2.bias", {width}});
}

}  // namespace

std::vector<std::pair<std::string, Shape>> expected_weights(
    const ModelConfig& c) {
  std::vector<std::pair<std::string, Shape>> out;
  const std::size_t vw = c.vision_width, tw = c.text_width;
  out.push_back({"visual.class_embedding", {vw}});
  out.push_back({"visual.positional_embedding", {c.num_patches() + 1, vw}});
  out.push_back({"visual.conv1.weight", {vw, 3, c.patch_size, c.patch_size}});
  out.push_back({"visual.ln_pre.weight", {vw}});
  out.push_back({"visual.ln_pre.bias", {vw}});
  for (std::size_t i = 0; i < c.vision_layers; ++i) {
    add_block(out, "visual.transformer.resblocks." + std::to_string(i) + ".",
              vw);
  }
  out.push_back({"visual.ln_post.weight", {vw}});
  out.push_back({"visual.ln_post.bias", {vw}});
  out.push_back({"visual.proj", {vw, c.embed_dim}});
  out.push_back({"token_embedding.weight", {c.vocab_size, tw}});
  out.push_back({"positional_embedding", {c.context_length, tw}});
  for (std::size_t i = 0; i < c.text_layers; ++i) {
    add_block(out, "transformer.resblocks." + std::to_string(i) + ".", tw);
  }
  out.push_back({"ln_final.weight", {tw}});
  out.push_back({"ln_final.bias", {tw}});
  out.push_back({"text_projection", {tw, c.embed_dim}});
  out.push_back({"logit_scale", {1}});
  return out;
}

}  // namespace geclip::clip
