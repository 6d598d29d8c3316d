#include "geclip/clip/encoder.h"

#include <cmath>
#include <limits>

#include "geclip/common/error.h"
#include "geclip/tensor/ops.h"

namespace geclip::clip {

namespace {

struct Block {
  const Tensor& in_w;
  const Tensor& in_b;
  const Tensor& out_w;
  const Tensor& out_b;
  const Tensor& ln1_g;
  const Tensor& ln1_b;
  const Tensor& fc_w;
  const Tensor& fc_b;
  const Tensor& proj_w;
  const Tensor& proj_b;
  const Tensor& ln2_g;
  const Tensor& ln2_b;
};

Block block(const ClipModel& m, const std::string& prefix) {
  return Block{m.weight(prefix + "attn.in_proj_weight"), m.weight(prefix + "attn.in_proj_bias"),
               m.weight(prefix + "attn.out_proj.weight"), m.weight(prefix + "attn.out_proj.bias"),
               m.weight(prefix + "ln_1.weight"),         m.weight(prefix + "ln_1.bias"),
               m.weight(prefix + "mlp.c_fc.weight"),     m.weight(prefix + "mlp.c_fc.bias"),
               m.weight(prefix + "mlp.c_proj.weight"),   m.weight(prefix + "mlp.c_proj.bias"),
               m.weight(prefix + "ln_2.weight"),         m.weight(prefix + "ln_2.bias")};
}

Tensor mlp(const Block& b, const Tensor& x) {
  Tensor h = ops::layer_norm(x, b.ln2_g, b.ln2_b);
  h = ops::quick_gelu(ops::linear(h, b.fc_w, b.fc_b));
  return ops::linear(h, b.proj_w, b.proj_b);
}

Tensor causal_mask(std::size_t t) {
  std::vector<Real> m(t * t, 0.0);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = i + 1; j < t; ++j) m[i * t + j] = -std::numeric_limits<Real>::infinity();
  return Tensor({t, t}, std::move(m));
}

// One residual block. `dense_out`, when non-null, receives the block output
// computed with o = out_proj(v) in place of attention mixing.
Tensor run_block(const Block& b, Tensor x, std::size_t layer, std::size_t heads,
                 const Tensor* mask, const EncodeOptions& opt, LayerTrace* trace,
                 Tensor* dense_out) {
  if (opt.hook) opt.hook(layer, "x", x);
  const std::size_t width = x.dim(1);
  const std::size_t tokens = x.dim(0);
  const Tensor h = ops::layer_norm(x, b.ln1_g, b.ln1_b);
  const Tensor qkv = ops::linear(h, b.in_w, b.in_b);
  const Tensor q = ops::slice_cols(qkv, 0, width);
  const Tensor k = ops::slice_cols(qkv, width, 2 * width);
  const Tensor v = ops::slice_cols(qkv, 2 * width, 3 * width);
  const std::size_t d = width / heads;
  const Real scale = 1.0 / std::sqrt(static_cast<Real>(d));
  std::vector<Tensor> mixed;
  std::vector<Real> attn_values;
  for (std::size_t hd = 0; hd < heads; ++hd) {
    const Tensor qh = heads == 1 ? q : ops::slice_cols(q, hd * d, (hd + 1) * d);
    const Tensor kh = heads == 1 ? k : ops::slice_cols(k, hd * d, (hd + 1) * d);
    const Tensor vh = heads == 1 ? v : ops::slice_cols(v, hd * d, (hd + 1) * d);
    Tensor scores = ops::scale(ops::matmul_nt(qh, kh), scale);
    if (mask != nullptr) scores = ops::add(scores, *mask);
    const Tensor a = ops::softmax(scores, 1);
    if (trace != nullptr) attn_values.insert(attn_values.end(), a.data().begin(), a.data().end());
    mixed.push_back(ops::matmul(a, vh));
  }
  const Tensor mix = heads == 1 ? mixed[0] : ops::concat_cols(mixed);
  Tensor o = ops::linear(mix, b.out_w, b.out_b);
  if (opt.hook) opt.hook(layer, "o", o);
  if (trace != nullptr) {
    trace->x = x;
    trace->q = q.detach();
    trace->k = k.detach();
    {
      NoTapeScope no_tape;
      trace->v = ops::linear(v.detach(), b.out_w.detach(), b.out_b.detach());
    }
    trace->o = o;
    trace->attn = Tensor({heads, tokens, tokens}, std::move(attn_values));
  }
  if (dense_out != nullptr) {
    Tensor xd = ops::add(x, ops::linear(v, b.out_w, b.out_b));
    *dense_out = ops::add(xd, mlp(b, xd));
  }
  Tensor y = ops::add(x, o);
  return ops::add(y, mlp(b, y));
}

void check_grad_layer(int layer, std::size_t depth) {
  if (layer < 0) return;
  if (static_cast<std::size_t>(layer) >= depth) {
    throw ContractError("grad_from_layer " + std::to_string(layer) +
                        " outside [0, " + std::to_string(depth) + ")");
  }
  if (active_tape() == nullptr) {
    throw ContractError("grad_from_layer requires an active tape");
  }
}

Tensor run_stack(const ClipModel& m, const std::string& prefix, std::size_t depth,
                 std::size_t heads, Tensor x, const Tensor* mask,
                 const EncodeOptions& opt, ActivationTrace* trace, Tensor* dense_out) {
  for (std::size_t i = 0; i < depth; ++i) {
    if (opt.grad_from_layer >= 0 && static_cast<std::size_t>(opt.grad_from_layer) == i) {
      x = x.detach();
      x.set_requires_grad(true);
    }
    LayerTrace* lt = nullptr;
    if (trace != nullptr) lt = &trace->layers.emplace_back();
    const Block b = block(m, prefix + std::to_string(i) + ".");
    x = run_block(b, x, i, heads, mask, opt, lt, i + 1 == depth ? dense_out : nullptr);
  }
  return x;
}

}  // namespace

Tensor patchify(const Tensor& image, std::size_t p) {
  if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) % p != 0 || image.dim(2) % p != 0) {
    throw ShapeError("patchify: expected [3 x H x W] divisible by patch " +
                     std::to_string(p) + ", got " + shape_string(image.shape()));
  }
  const std::size_t h = image.dim(1), w = image.dim(2);
  const std::size_t gh = h / p, gw = w / p;
  const std::size_t cols = 3 * p * p;
  std::vector<Real> out(gh * gw * cols);
  auto px = image.data();
  for (std::size_t gy = 0; gy < gh; ++gy)
    for (std::size_t gx = 0; gx < gw; ++gx) {
      Real* row = &out[(gy * gw + gx) * cols];
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < p; ++y)
          for (std::size_t x = 0; x < p; ++x)
            *row++ = px[(c * h + gy * p + y) * w + gx * p + x];
    }
  return Tensor({gh * gw, cols}, std::move(out));
}

EncodeResult encode_image(const ClipModel& m, const Tensor& image, const EncodeOptions& opt) {
  const ModelConfig& c = m.config;
  if (image.shape() != Shape{3, c.image_size, c.image_size}) {
    throw ShapeError("encode_image: expected [3 x " + std::to_string(c.image_size) + " x " +
                     std::to_string(c.image_size) + "], got " + shape_string(image.shape()));
  }
  check_grad_layer(opt.grad_from_layer, c.vision_layers);
  const std::size_t width = c.vision_width;
  const Tensor conv = ops::reshape(m.weight("visual.conv1.weight"),
                                   {width, 3 * c.patch_size * c.patch_size});
  const Tensor patches = ops::matmul_nt(patchify(image, c.patch_size), conv);
  const Tensor cls = ops::reshape(m.weight("visual.class_embedding"), {1, width});
  Tensor x = ops::add(ops::concat_rows({cls, patches}), m.weight("visual.positional_embedding"));
  x = ops::layer_norm(x, m.weight("visual.ln_pre.weight"), m.weight("visual.ln_pre.bias"));

  EncodeResult result;
  ActivationTrace trace;
  trace.head_mode = opt.head_mode;
  trace.heads = opt.head_mode == HeadMode::kSingle ? 1 : c.vision_heads;
  trace.query_token = 0;
  Tensor dense_x;
  x = run_stack(m, "visual.transformer.resblocks.", c.vision_layers, trace.heads, x, nullptr,
                opt, opt.capture ? &trace : nullptr, opt.dense ? &dense_x : nullptr);

  const Tensor& ln_g = m.weight("visual.ln_post.weight");
  const Tensor& ln_b = m.weight("visual.ln_post.bias");
  const Tensor& proj = m.weight("visual.proj");
  const Tensor pooled = ops::layer_norm(ops::slice_rows(x, 0, 1), ln_g, ln_b);
  result.embedding = ops::reshape(ops::matmul(pooled, proj), {c.embed_dim});
  if (opt.dense) {
    const Tensor grid = ops::slice_rows(dense_x, 1, dense_x.dim(0));
    result.dense = ops::matmul(ops::layer_norm(grid, ln_g, ln_b), proj);
  }
  if (opt.capture) result.trace = std::move(trace);
  return result;
}

EncodeResult encode_text(const ClipModel& m, const Tokenized& tokens, const EncodeOptions& opt) {
  const ModelConfig& c = m.config;
  if (tokens.ids.size() != c.context_length) {
    throw ShapeError("encode_text: expected " + std::to_string(c.context_length) +
                     " token ids, got " + std::to_string(tokens.ids.size()));
  }
  if (opt.dense) throw ContractError("encode_text: dense features are image-only");
  check_grad_layer(opt.grad_from_layer, c.text_layers);
  for (std::size_t id : tokens.ids) {
    if (id >= c.vocab_size) {
      throw ContractError("encode_text: token id " + std::to_string(id) +
                          " outside vocabulary of " + std::to_string(c.vocab_size));
    }
  }
  Tensor x = ops::add(ops::gather_rows(m.weight("token_embedding.weight"), tokens.ids),
                      m.weight("positional_embedding"));
  const Tensor mask = causal_mask(c.context_length);

  EncodeResult result;
  ActivationTrace trace;
  trace.head_mode = opt.head_mode;
  trace.heads = opt.head_mode == HeadMode::kSingle ? 1 : c.text_heads;
  trace.query_token = tokens.eos_index;
  trace.truncated = tokens.truncated;
  x = run_stack(m, "transformer.resblocks.", c.text_layers, trace.heads, x, &mask, opt,
                opt.capture ? &trace : nullptr, nullptr);
  const Tensor eos = ops::layer_norm(ops::slice_rows(x, tokens.eos_index, tokens.eos_index + 1),
                                     m.weight("ln_final.weight"), m.weight("ln_final.bias"));
  result.embedding = ops::reshape(ops::matmul(eos, m.weight("text_projection")), {c.embed_dim});
  if (opt.capture) result.trace = std::move(trace);
  return result;
}

Tensor matching_score(const Tensor& image_embedding, const Tensor& text_embedding) {
  return ops::cosine(image_embedding, text_embedding);
}

Tensor embed_image(const ModelBundle& bundle, const Image& image, HeadMode mode) {
  NoTapeScope no_tape;
  const Tensor px = preprocess_image(image, bundle.config().image_size, bundle.preprocess);
  EncodeOptions opt;
  opt.head_mode = mode;
  return encode_image(bundle.model, px, opt).embedding;
}

Tensor embed_text(const ModelBundle& bundle, const std::string& text, HeadMode mode) {
  NoTapeScope no_tape;
  const Tokenized tok = bundle.tokenizer.encode(text, bundle.config().context_length);
  EncodeOptions opt;
  opt.head_mode = mode;
  return encode_text(bundle.model, tok, opt).embedding;
}

}  // namespace geclip::clip
