#include "geclip/explain/explain.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "geclip/common/error.h"
#include "geclip/tensor/ops.h"

namespace geclip::explain {

using clip::ActivationTrace;
using clip::EncodeOptions;
using clip::HeadMode;
using clip::LayerTrace;

const char* lambda_mode_name(LambdaMode mode) {
  switch (mode) {
    case LambdaMode::kLoosened: return "loosened";
    case LambdaMode::kSoftmax: return "softmax";
    case LambdaMode::kOnes: return "ones";
  }
  return "?";
}

LambdaMode parse_lambda_mode(const std::string& name) {
  if (name == "loosened") return LambdaMode::kLoosened;
  if (name == "softmax") return LambdaMode::kSoftmax;
  if (name == "ones") return LambdaMode::kOnes;
  throw ContractError("unknown lambda mode '" + name + "' (loosened|softmax|ones)");
}

Resample parse_resample(const std::string& name) {
  if (name == "bilinear") return Resample::kBilinear;
  if (name == "nearest") return Resample::kNearest;
  throw ContractError("unknown resampling '" + name + "' (bilinear|nearest)");
}

const char* method_name(Method m) {
  switch (m) {
    case Method::kGradEclip: return "grad-eclip";
    case Method::kRawAttention: return "raw-attention";
    case Method::kRollout: return "rollout";
    case Method::kGradCam: return "grad-cam";
  }
  return "?";
}

Method parse_method(const std::string& name) {
  if (name == "grad-eclip") return Method::kGradEclip;
  if (name == "raw-attention") return Method::kRawAttention;
  if (name == "rollout") return Method::kRollout;
  if (name == "grad-cam") return Method::kGradCam;
  throw ContractError("unknown method '" + name +
                      "' (grad-eclip|raw-attention|rollout|grad-cam)");
}

Real HeatMap::max() const {
  return values.empty() ? 0 : *std::max_element(values.begin(), values.end());
}

std::vector<Real> spatial_weights(std::span<const Real> q, const Tensor& keys, LambdaMode mode) {
  if (keys.rank() != 2 || keys.dim(1) != q.size()) {
    throw ShapeError("spatial_weights: keys " + shape_string(keys.shape()) +
                     " do not match query of length " + std::to_string(q.size()));
  }
  const std::size_t n = keys.dim(0), c = keys.dim(1);
  if (n == 0) throw ContractError("spatial_weights: no tokens");
  if (mode == LambdaMode::kOnes) return std::vector<Real>(n, 1.0);
  std::vector<Real> s(n, 0.0);
  auto k = keys.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) s[i] += q[j] * k[i * c + j];
  if (mode == LambdaMode::kSoftmax) {
    const Real scale = 1.0 / std::sqrt(static_cast<Real>(c));
    const Real mx = *std::max_element(s.begin(), s.end());
    Real total = 0;
    for (Real& v : s) total += (v = std::exp((v - mx) * scale));
    for (Real& v : s) v /= total;
    return s;
  }
  const auto [lo, hi] = std::minmax_element(s.begin(), s.end());
  const Real mn = *lo, range = *hi - *lo;
  if (!(range > 0)) return std::vector<Real>(n, 1.0);
  for (Real& v : s) v = (v - mn) / range;
  return s;
}

std::vector<Real> channel_weights(const ActivationTrace& trace, std::size_t layer) {
  if (layer >= trace.layers.size()) {
    throw ContractError("channel_weights: layer " + std::to_string(layer) + " not in trace of " +
                        std::to_string(trace.layers.size()));
  }
  const Tensor& o = trace.layers[layer].o;
  if (!o.defined() || !o.has_grad()) {
    throw ContractError("channel_weights: attention output of layer " + std::to_string(layer) +
                        " has no gradient (capture or gradient range does not cover it)");
  }
  const std::size_t w = o.dim(1);
  auto g = o.grad();
  return std::vector<Real>(g.begin() + trace.query_token * w, g.begin() + (trace.query_token + 1) * w);
}

std::vector<Real> layer_contributions(const LayerTrace& layer, std::span<const Real> w,
                                      std::span<const Real> lambda,
                                      std::span<const std::size_t> positions) {
  const std::size_t c = layer.v.dim(1);
  if (w.size() != c || lambda.size() != positions.size()) {
    throw ContractError("layer_heatmap: " + std::to_string(w.size()) + " channel weights for " +
                        std::to_string(c) + " channels, " + std::to_string(lambda.size()) +
                        " spatial weights for " + std::to_string(positions.size()) + " positions");
  }
  auto v = layer.v.data();
  std::vector<Real> out(positions.size());
  for (std::size_t p = 0; p < positions.size(); ++p) {
    if (positions[p] >= layer.v.dim(0)) throw ContractError("layer_heatmap: position out of range");
    const Real* row = &v[positions[p] * c];
    Real s = 0;
    for (std::size_t j = 0; j < c; ++j) s += w[j] * row[j];
    out[p] = lambda[p] * s;
  }
  return out;
}

std::vector<Real> layer_heatmap(const LayerTrace& layer, std::span<const Real> w,
                                std::span<const Real> lambda,
                                std::span<const std::size_t> positions) {
  std::vector<Real> h = layer_contributions(layer, w, lambda, positions);
  for (Real& v : h) v = std::max<Real>(v, 0);
  return h;
}

std::vector<Real> trace_spatial_weights(const LayerTrace& layer, std::size_t query,
                                        std::span<const std::size_t> positions,
                                        std::size_t visible, LambdaMode mode) {
  const std::size_t c = layer.q.dim(1);
  auto qd = layer.q.data();
  std::span<const Real> q(&qd[query * c], c);
  if (mode == LambdaMode::kSoftmax) {
    const std::vector<Real> all = spatial_weights(q, ops::slice_rows(layer.k, 0, visible), mode);
    std::vector<Real> out;
    for (std::size_t p : positions) out.push_back(p < visible ? all[p] : 0.0);
    return out;
  }
  std::vector<Real> keys;
  auto kd = layer.k.data();
  for (std::size_t p : positions) keys.insert(keys.end(), &kd[p * c], &kd[(p + 1) * c]);
  return spatial_weights(q, Tensor({positions.size(), c}, std::move(keys)), mode);
}

std::vector<std::size_t> resolve_layers(const std::vector<int>& layers, std::size_t depth) {
  if (layers.empty()) throw ContractError("layer list is empty");
  std::vector<std::size_t> out;
  for (int l : layers) {
    const long idx = l < 0 ? static_cast<long>(depth) + l : l;
    if (idx < 0 || idx >= static_cast<long>(depth)) {
      throw ContractError("layer " + std::to_string(l) + " outside a depth of " + std::to_string(depth));
    }
    out.push_back(static_cast<std::size_t>(idx));
  }
  std::sort(out.begin(), out.end());
  if (std::adjacent_find(out.begin(), out.end()) != out.end()) {
    throw ContractError("layer list names a layer twice");
  }
  return out;
}

std::vector<int> last_layers(std::size_t count, std::size_t depth) {
  count = std::min(count, depth);
  std::vector<int> out;
  for (std::size_t i = count; i > 0; --i) out.push_back(-static_cast<int>(i));
  return out;
}

HeatMap resample(const HeatMap& map, std::size_t width, std::size_t height, Resample mode) {
  if (map.width == 0 || map.height == 0 || width == 0 || height == 0) {
    throw ContractError("resample: empty map or target");
  }
  HeatMap out = map;
  out.width = width;
  out.height = height;
  out.values.assign(width * height, 0.0);
  const Real rx = static_cast<Real>(map.width) / width;
  const Real ry = static_cast<Real>(map.height) / height;
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      Real v;
      if (mode == Resample::kNearest) {
        const std::size_t sx = std::min(map.width - 1, static_cast<std::size_t>(x * rx));
        const std::size_t sy = std::min(map.height - 1, static_cast<std::size_t>(y * ry));
        v = map.at(sx, sy);
      } else {
        const Real fx = std::clamp<Real>((x + 0.5) * rx - 0.5, 0, map.width - 1.0);
        const Real fy = std::clamp<Real>((y + 0.5) * ry - 0.5, 0, map.height - 1.0);
        const std::size_t x0 = static_cast<std::size_t>(fx), y0 = static_cast<std::size_t>(fy);
        const std::size_t x1 = std::min(x0 + 1, map.width - 1), y1 = std::min(y0 + 1, map.height - 1);
        const Real ax = fx - x0, ay = fy - y0;
        v = (map.at(x0, y0) * (1 - ax) + map.at(x1, y0) * ax) * (1 - ay) +
            (map.at(x0, y1) * (1 - ax) + map.at(x1, y1) * ax) * ay;
      }
      out.values[y * width + x] = v;
    }
  return out;
}

void normalize_unit(HeatMap& map) {
  map.normalized = true;
  if (map.values.empty()) return;
  const auto [lo, hi] = std::minmax_element(map.values.begin(), map.values.end());
  const Real mn = *lo, mx = *hi;
  if (!(mx > 0)) {
    std::fill(map.values.begin(), map.values.end(), 0.0);
    return;
  }
  if (!(mx > mn)) {
    std::fill(map.values.begin(), map.values.end(), 1.0);
    return;
  }
  for (Real& v : map.values) v = (v - mn) / (mx - mn);
}

namespace {

std::vector<std::size_t> patch_positions(std::size_t tokens) {
  std::vector<std::size_t> p(tokens - 1);
  std::iota(p.begin(), p.end(), 1);
  return p;
}

HeatMap finish(HeatMap grid, const clip::ModelConfig& config, const ImageExplainOptions& opt) {
  const std::size_t w = opt.out_width ? opt.out_width : config.image_size;
  const std::size_t h = opt.out_height ? opt.out_height : config.image_size;
  HeatMap map = resample(grid, w, h, opt.resample);
  normalize_unit(map);
  return map;
}

HeatMap grid_from(std::vector<Real> values, std::size_t side) {
  HeatMap g;
  g.width = g.height = side;
  g.values = std::move(values);
  return g;
}

}  // namespace

std::vector<ImageExplanation> grad_eclip_image(const clip::ClipModel& model, const Tensor& pixels,
                                               const std::vector<Tensor>& text_embeddings,
                                               const ImageExplainOptions& opt) {
  const auto& cfg = model.config;
  const std::vector<std::size_t> layers = resolve_layers(opt.layers, cfg.vision_layers);
  Tape tape;
  TapeScope scope(tape);
  EncodeOptions eo;
  eo.head_mode = opt.head_mode;
  eo.capture = true;
  eo.grad_from_layer = static_cast<int>(layers.front());
  const clip::EncodeResult r = clip::encode_image(model, pixels, eo);
  const ActivationTrace& trace = *r.trace;
  const std::size_t tokens = cfg.num_patches() + 1;
  const std::vector<std::size_t> positions = patch_positions(tokens);

  // Spatial weights do not depend on the prompt.
  std::vector<std::vector<Real>> lambdas;
  for (std::size_t l : layers) {
    lambdas.push_back(trace_spatial_weights(trace.layers[l], 0, positions, tokens, opt.lambda));
  }
  std::vector<ImageExplanation> out;
  for (const Tensor& text : text_embeddings) {
    const Tensor score = clip::matching_score(r.embedding, text.detach());
    tape.backward(score);
    std::vector<Real> sum(positions.size(), 0.0);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::vector<Real> w = channel_weights(trace, layers[i]);
      const std::vector<Real> h = layer_heatmap(trace.layers[layers[i]], w, lambdas[i], positions);
      for (std::size_t p = 0; p < h.size(); ++p) sum[p] += h[p];
    }
    ImageExplanation e;
    e.score = score.item();
    e.grid = grid_from(std::move(sum), cfg.grid_side());
    e.grid.layers = layers;
    e.map = finish(e.grid, cfg, opt);
    out.push_back(std::move(e));
  }
  return out;
}

ImageExplanation grad_eclip_image(const clip::ModelBundle& bundle, const Tensor& pixels,
                                  const std::string& text, const ImageExplainOptions& opt) {
  Tensor t;
  {
    NoTapeScope no_tape;
    EncodeOptions eo;
    eo.head_mode = opt.head_mode;
    t = clip::encode_text(bundle.model,
                          bundle.tokenizer.encode(text, bundle.config().context_length), eo)
            .embedding;
  }
  ImageExplanation e = std::move(grad_eclip_image(bundle.model, pixels, {t}, opt).front());
  e.grid.prompt = e.map.prompt = text;
  return e;
}

TextSaliency remap_to_words(std::span<const Real> token_importance, const clip::Tokenized& tokens) {
  TextSaliency s;
  s.words = tokens.words;
  s.token_word = tokens.token_word;
  s.token_importance.assign(token_importance.begin(), token_importance.end());
  s.raw.assign(tokens.words.size(), 0.0);
  for (std::size_t i = 0; i < token_importance.size() && i < tokens.token_word.size(); ++i) {
    if (tokens.token_word[i] >= 0) s.raw[static_cast<std::size_t>(tokens.token_word[i])] += token_importance[i];
  }
  s.importance = s.raw;
  if (s.words.size() == 1) {
    s.importance = {1.0};
    return s;
  }
  const Real mx = s.raw.empty() ? 0 : *std::max_element(s.raw.begin(), s.raw.end());
  if (mx > 0) {
    for (Real& v : s.importance) v /= mx;
  }
  return s;
}

TextExplanation grad_eclip_text(const clip::ClipModel& model, const clip::Tokenized& tokens,
                                const Tensor& image_embedding, const TextExplainOptions& opt) {
  const auto& cfg = model.config;
  const std::vector<int> spec = opt.layers.empty() ? last_layers(8, cfg.text_layers) : opt.layers;
  const std::vector<std::size_t> layers = resolve_layers(spec, cfg.text_layers);
  Tape tape;
  TapeScope scope(tape);
  EncodeOptions eo;
  eo.head_mode = opt.head_mode;
  eo.capture = true;
  eo.grad_from_layer = static_cast<int>(layers.front());
  const clip::EncodeResult r = clip::encode_text(model, tokens, eo);
  const ActivationTrace& trace = *r.trace;
  const Tensor score = clip::matching_score(image_embedding.detach(), r.embedding);
  tape.backward(score);

  const std::size_t eos = tokens.eos_index;
  std::vector<std::size_t> positions;
  for (std::size_t p = 1; p < eos; ++p) positions.push_back(p);
  std::vector<Real> token_importance(tokens.ids.size(), 0.0);
  if (!positions.empty()) {
    for (std::size_t l : layers) {
      const std::vector<Real> w = channel_weights(trace, l);
      const std::vector<Real> lambda =
          trace_spatial_weights(trace.layers[l], eos, positions, eos + 1, opt.lambda);
      const std::vector<Real> h = layer_heatmap(trace.layers[l], w, lambda, positions);
      for (std::size_t i = 0; i < positions.size(); ++i) token_importance[positions[i]] += h[i];
    }
  }
  TextExplanation e;
  e.score = score.item();
  e.saliency = remap_to_words(token_importance, tokens);
  e.saliency.layers = layers;
  return e;
}

TextExplanation grad_eclip_text(const clip::ModelBundle& bundle, const Tensor& pixels,
                                const std::string& text, const TextExplainOptions& opt) {
  Tensor image;
  {
    NoTapeScope no_tape;
    EncodeOptions eo;
    eo.head_mode = opt.head_mode;
    image = clip::encode_image(bundle.model, pixels, eo).embedding;
  }
  return grad_eclip_text(bundle.model, bundle.tokenizer.encode(text, bundle.config().context_length),
                         image, opt);
}

namespace {

// Head-averaged attention of one traced layer: [T x T].
std::vector<Real> mean_attention(const LayerTrace& layer) {
  const std::size_t heads = layer.attn.dim(0), t = layer.attn.dim(1);
  std::vector<Real> a(t * t, 0.0);
  auto d = layer.attn.data();
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < t * t; ++i) a[i] += d[h * t * t + i];
  for (Real& v : a) v /= static_cast<Real>(heads);
  return a;
}

}  // namespace

HeatMap raw_attention_grid(const ActivationTrace& trace, std::size_t side) {
  if (trace.layers.empty()) throw ContractError("raw_attention: empty trace");
  const std::vector<Real> a = mean_attention(trace.layers.back());
  const std::size_t t = trace.layers.back().attn.dim(1);
  if (t != side * side + 1) throw ContractError("raw_attention: grid does not match token count");
  HeatMap g = grid_from(std::vector<Real>(a.begin() + 1, a.begin() + t), side);
  g.layers = {trace.layers.size() - 1};
  return g;
}

Tensor rollout_matrix(const ActivationTrace& trace) {
  if (trace.layers.empty()) throw ContractError("rollout: empty trace");
  const std::size_t t = trace.layers.front().attn.dim(1);
  std::vector<Real> r(t * t, 0.0);
  for (std::size_t i = 0; i < t; ++i) r[i * t + i] = 1;
  for (const LayerTrace& layer : trace.layers) {
    std::vector<Real> a = mean_attention(layer);
    for (std::size_t i = 0; i < t; ++i) {
      Real row = 0;
      for (std::size_t j = 0; j < t; ++j) {
        Real& v = a[i * t + j];
        v = 0.5 * v + (i == j ? 0.5 : 0.0);
        row += v;
      }
      for (std::size_t j = 0; j < t; ++j) a[i * t + j] /= row;
    }
    std::vector<Real> next(t * t, 0.0);
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t k = 0; k < t; ++k) {
        const Real aik = a[i * t + k];
        for (std::size_t j = 0; j < t; ++j) next[i * t + j] += aik * r[k * t + j];
      }
    r = std::move(next);
  }
  return Tensor({t, t}, std::move(r));
}

HeatMap rollout_grid(const ActivationTrace& trace, std::size_t side) {
  const Tensor r = rollout_matrix(trace);
  const std::size_t t = r.dim(0);
  if (t != side * side + 1) throw ContractError("rollout: grid does not match token count");
  HeatMap g = grid_from(std::vector<Real>(r.data().begin() + 1, r.data().begin() + t), side);
  for (std::size_t l = 0; l < trace.layers.size(); ++l) g.layers.push_back(l);
  return g;
}

HeatMap grad_cam_grid(const clip::ClipModel& model, const Tensor& pixels, const Tensor& text_embedding) {
  const auto& cfg = model.config;
  if (cfg.vision_layers < 2) {
    throw ContractError("grad-cam needs a penultimate layer (model has " +
                        std::to_string(cfg.vision_layers) + ")");
  }
  Tape tape;
  TapeScope scope(tape);
  EncodeOptions eo;
  eo.capture = true;
  eo.grad_from_layer = static_cast<int>(cfg.vision_layers - 1);
  const clip::EncodeResult r = clip::encode_image(model, pixels, eo);
  tape.backward(clip::matching_score(r.embedding, text_embedding.detach()));
  const Tensor& x = r.trace->layers.back().x;
  const std::size_t t = x.dim(0), c = x.dim(1);
  auto g = x.grad();
  auto f = x.data();
  std::vector<Real> w(c, 0.0);
  for (std::size_t i = 1; i < t; ++i)
    for (std::size_t j = 0; j < c; ++j) w[j] += g[i * c + j];
  for (Real& v : w) v /= static_cast<Real>(t - 1);
  std::vector<Real> map(t - 1, 0.0);
  for (std::size_t i = 1; i < t; ++i) {
    Real s = 0;
    for (std::size_t j = 0; j < c; ++j) s += w[j] * f[i * c + j];
    map[i - 1] = std::max<Real>(s, 0);
  }
  HeatMap grid = grid_from(std::move(map), cfg.grid_side());
  grid.layers = {cfg.vision_layers - 1};
  return grid;
}

std::vector<ImageExplanation> explain_image(const clip::ModelBundle& bundle, const Tensor& pixels,
                                            const std::vector<std::string>& prompts, Method method,
                                            const ImageExplainOptions& opt) {
  if (prompts.empty()) throw ContractError("explain_image: no prompts");
  const auto& cfg = bundle.config();
  const HeadMode text_mode = method == Method::kGradEclip ? opt.head_mode : HeadMode::kMulti;
  std::vector<Tensor> texts;
  {
    NoTapeScope no_tape;
    EncodeOptions eo;
    eo.head_mode = text_mode;
    for (const std::string& p : prompts) {
      texts.push_back(
          clip::encode_text(bundle.model, bundle.tokenizer.encode(p, cfg.context_length), eo).embedding);
    }
  }
  std::vector<ImageExplanation> out;
  if (method == Method::kGradEclip) {
    out = grad_eclip_image(bundle.model, pixels, texts, opt);
  } else if (method == Method::kGradCam) {
    Tensor image;
    {
      NoTapeScope no_tape;
      image = clip::encode_image(bundle.model, pixels).embedding;
    }
    for (const Tensor& t : texts) {
      ImageExplanation e;
      e.score = clip::matching_score(image, t).item();
      e.grid = grad_cam_grid(bundle.model, pixels, t);
      e.map = finish(e.grid, cfg, opt);
      out.push_back(std::move(e));
    }
  } else {
    NoTapeScope no_tape;
    EncodeOptions eo;
    eo.capture = true;
    const clip::EncodeResult r = clip::encode_image(bundle.model, pixels, eo);
    HeatMap grid = method == Method::kRawAttention ? raw_attention_grid(*r.trace, cfg.grid_side())
                                                   : rollout_grid(*r.trace, cfg.grid_side());
    const HeatMap map = finish(grid, cfg, opt);
    for (const Tensor& t : texts) {
      ImageExplanation e;
      e.score = clip::matching_score(r.embedding, t).item();
      e.grid = grid;
      e.map = map;
      out.push_back(std::move(e));
    }
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i].grid.prompt = out[i].map.prompt = prompts[i];
  return out;
}

}  // namespace geclip::explain
