#include "reference_clip.h"

#include <cmath>
#include <limits>
#include <string>

namespace geclip::testing::reference {

namespace {

const std::span<const Real> w(const clip::ClipModel& m, const std::string& name) {
  return m.weight(name).data();
}

Rows layer_norm(const Rows& x, std::span<const Real> g, std::span<const Real> b) {
  Rows y = x;
  for (auto& row : y) {
    Real mean = 0, var = 0;
    for (Real v : row) mean += v;
    mean /= row.size();
    for (Real v : row) var += (v - mean) * (v - mean);
    var /= row.size();
    const Real inv = 1.0 / std::sqrt(var + 1e-5);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] = (row[c] - mean) * inv * g[c] + b[c];
  }
  return y;
}

// y = x W^T + b, W [out x in] row-major.
Rows linear(const Rows& x, std::span<const Real> W, std::span<const Real> b, std::size_t out) {
  const std::size_t in = x[0].size();
  Rows y(x.size(), std::vector<Real>(out));
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t o = 0; o < out; ++o) {
      Real s = b.empty() ? 0 : b[o];
      for (std::size_t k = 0; k < in; ++k) s += x[i][k] * W[o * in + k];
      y[i][o] = s;
    }
  return y;
}

Rows add(Rows a, const Rows& b) {
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) a[i][j] += b[i][j];
  return a;
}

Rows block(const clip::ClipModel& m, const std::string& p, const Rows& x, std::size_t heads,
           bool causal, Forward& f, Rows* dense) {
  const std::size_t T = x.size(), W = x[0].size(), d = W / heads;
  f.layer_inputs.push_back(x);
  const Rows h = layer_norm(x, w(m, p + "ln_1.weight"), w(m, p + "ln_1.bias"));
  const Rows qkv = linear(h, w(m, p + "attn.in_proj_weight"), w(m, p + "attn.in_proj_bias"), 3 * W);
  Rows mix(T, std::vector<Real>(W, 0.0));
  std::vector<Rows> layer_attn;
  for (std::size_t hd = 0; hd < heads; ++hd) {
    Rows a(T, std::vector<Real>(T, 0.0));
    for (std::size_t i = 0; i < T; ++i) {
      std::vector<Real> s(T);
      Real mx = -std::numeric_limits<Real>::infinity();
      const std::size_t visible = causal ? i + 1 : T;
      for (std::size_t j = 0; j < visible; ++j) {
        Real dotp = 0;
        for (std::size_t c = 0; c < d; ++c) dotp += qkv[i][hd * d + c] * qkv[j][W + hd * d + c];
        s[j] = dotp / std::sqrt(static_cast<Real>(d));
        mx = std::max(mx, s[j]);
      }
      Real total = 0;
      for (std::size_t j = 0; j < visible; ++j) total += (a[i][j] = std::exp(s[j] - mx));
      for (std::size_t j = 0; j < visible; ++j) a[i][j] /= total;
      for (std::size_t j = 0; j < visible; ++j)
        for (std::size_t c = 0; c < d; ++c) mix[i][hd * d + c] += a[i][j] * qkv[j][2 * W + hd * d + c];
    }
    layer_attn.push_back(a);
  }
  f.attn.push_back(layer_attn);
  const auto ow = w(m, p + "attn.out_proj.weight");
  const auto ob = w(m, p + "attn.out_proj.bias");
  const Rows o = linear(mix, ow, ob, W);
  f.attn_outputs.push_back(o);
  Rows v(T, std::vector<Real>(W));
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t c = 0; c < W; ++c) v[i][c] = qkv[i][2 * W + c];
  f.values.push_back(linear(v, ow, ob, W));
  auto mlp = [&](const Rows& y) {
    Rows hh = layer_norm(y, w(m, p + "ln_2.weight"), w(m, p + "ln_2.bias"));
    hh = linear(hh, w(m, p + "mlp.c_fc.weight"), w(m, p + "mlp.c_fc.bias"), 4 * W);
    for (auto& row : hh)
      for (Real& t : row) t = t / (1.0 + std::exp(-1.702 * t));
    return linear(hh, w(m, p + "mlp.c_proj.weight"), w(m, p + "mlp.c_proj.bias"), W);
  };
  if (dense != nullptr) {
    const Rows xd = add(x, f.values.back());
    *dense = add(xd, mlp(xd));
  }
  const Rows y = add(x, o);
  return add(y, mlp(y));
}

std::vector<Real> project(const std::vector<Real>& row, std::span<const Real> P, std::size_t D) {
  std::vector<Real> out(D, 0.0);
  for (std::size_t c = 0; c < row.size(); ++c)
    for (std::size_t e = 0; e < D; ++e) out[e] += row[c] * P[c * D + e];
  return out;
}

}  // namespace

Forward image(const clip::ClipModel& m, const Tensor& pixels, std::size_t heads) {
  const auto& c = m.config;
  const std::size_t S = c.image_size, P = c.patch_size, G = S / P, W = c.vision_width;
  const auto px = pixels.data();
  const auto conv = w(m, "visual.conv1.weight");
  const auto pos = w(m, "visual.positional_embedding");
  const auto cls = w(m, "visual.class_embedding");
  Rows x(G * G + 1, std::vector<Real>(W));
  for (std::size_t k = 0; k < W; ++k) x[0][k] = cls[k] + pos[k];
  for (std::size_t gy = 0; gy < G; ++gy)
    for (std::size_t gx = 0; gx < G; ++gx)
      for (std::size_t k = 0; k < W; ++k) {
        Real s = 0;
        for (std::size_t ch = 0; ch < 3; ++ch)
          for (std::size_t y = 0; y < P; ++y)
            for (std::size_t xx = 0; xx < P; ++xx)
              s += px[(ch * S + gy * P + y) * S + gx * P + xx] *
                   conv[((k * 3 + ch) * P + y) * P + xx];
        const std::size_t t = 1 + gy * G + gx;
        x[t][k] = s + pos[t * W + k];
      }
  x = layer_norm(x, w(m, "visual.ln_pre.weight"), w(m, "visual.ln_pre.bias"));
  Forward f;
  Rows dense;
  for (std::size_t l = 0; l < c.vision_layers; ++l) {
    x = block(m, "visual.transformer.resblocks." + std::to_string(l) + ".", x, heads, false, f,
              l + 1 == c.vision_layers ? &dense : nullptr);
  }
  const auto g = w(m, "visual.ln_post.weight");
  const auto b = w(m, "visual.ln_post.bias");
  const auto proj = w(m, "visual.proj");
  f.embedding = project(layer_norm({x[0]}, g, b)[0], proj, c.embed_dim);
  for (std::size_t t = 1; t < dense.size(); ++t) {
    f.dense.push_back(project(layer_norm({dense[t]}, g, b)[0], proj, c.embed_dim));
  }
  return f;
}

Forward text(const clip::ClipModel& m, const clip::Tokenized& tokens, std::size_t heads) {
  const auto& c = m.config;
  const std::size_t W = c.text_width;
  const auto emb = w(m, "token_embedding.weight");
  const auto pos = w(m, "positional_embedding");
  Rows x(c.context_length, std::vector<Real>(W));
  for (std::size_t t = 0; t < c.context_length; ++t)
    for (std::size_t k = 0; k < W; ++k) x[t][k] = emb[tokens.ids[t] * W + k] + pos[t * W + k];
  Forward f;
  for (std::size_t l = 0; l < c.text_layers; ++l) {
    x = block(m, "transformer.resblocks." + std::to_string(l) + ".", x, heads, true, f, nullptr);
  }
  const Rows eos = layer_norm({x[tokens.eos_index]}, w(m, "ln_final.weight"), w(m, "ln_final.bias"));
  f.embedding = project(eos[0], w(m, "text_projection"), c.embed_dim);
  return f;
}

Real cosine(const std::vector<Real>& a, const std::vector<Real>& b) {
  Real ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

}  // namespace geclip::testing::reference
