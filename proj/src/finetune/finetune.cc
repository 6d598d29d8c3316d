#include "geclip/finetune/finetune.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "geclip/clip/encoder.h"
#include "geclip/common/error.h"
#include "geclip/eval/metrics.h"
#include "geclip/tensor/ops.h"

namespace geclip::finetune {

using clip::HeadMode;

DenseFeatureMap dense_feature_map(const clip::ClipModel& model, const Tensor& pixels) {
  clip::EncodeOptions eo;
  eo.dense = true;
  DenseFeatureMap out;
  out.grid_h = out.grid_w = model.config.grid_side();
  out.features = clip::encode_image(model, pixels, eo).dense;
  return out;
}

Tensor region_embedding(std::span<const Real> heat, const Tensor& dense) {
  if (dense.rank() != 2 || dense.dim(0) != heat.size()) {
    throw ShapeError("region_embedding: " + std::to_string(heat.size()) + " heat cells for dense map " +
                     shape_string(dense.shape()));
  }
  const Tensor h = Tensor::matrix(1, heat.size(), std::vector<Real>(heat.begin(), heat.end()));
  return ops::reshape(ops::matmul(h, dense), {dense.dim(1)});
}

namespace {

std::vector<Tensor> phrase_embeddings(const clip::ClipModel& model, const clip::BpeTokenizer& tok,
                                      const std::vector<std::string>& phrases, HeadMode mode) {
  NoTapeScope no_tape;
  clip::EncodeOptions eo;
  eo.head_mode = mode;
  std::vector<Tensor> out;
  for (const auto& p : phrases) {
    out.push_back(clip::encode_text(model, tok.encode(p, model.config.context_length), eo).embedding);
  }
  return out;
}

// Patch-resolution heat maps for each phrase from a frozen copy of the model.
std::vector<explain::HeatMap> phrase_heatmaps(const clip::ClipModel& frozen, const clip::BpeTokenizer& tok,
                                              const Tensor& pixels, const std::vector<std::string>& phrases,
                                              const RegionOptions& opt) {
  const auto texts = phrase_embeddings(frozen, tok, phrases, opt.explain.head_mode);
  auto ex = explain::grad_eclip_image(frozen, pixels, texts, opt.explain);
  std::vector<explain::HeatMap> out;
  for (auto& e : ex) {
    if (opt.normalize) explain::normalize_unit(e.grid);
    out.push_back(std::move(e.grid));
  }
  return out;
}

bool all_zero(const std::vector<Real>& v) {
  return std::all_of(v.begin(), v.end(), [](Real x) { return x == 0; });
}

Tensor identity(std::size_t n) {
  Tensor eye = Tensor::zeros({n, n});
  auto d = eye.mutable_data();
  for (std::size_t i = 0; i < n; ++i) d[i * n + i] = 1;
  return eye;
}

}  // namespace

std::vector<RegionEmbedding> region_embeddings(const clip::ClipModel& model, const clip::BpeTokenizer& tokenizer,
                                               const Tensor& pixels, const std::vector<std::string>& phrases,
                                               const RegionOptions& opt) {
  if (phrases.empty()) throw ContractError("region_embeddings: no phrases");
  const auto heats = phrase_heatmaps(model, tokenizer, pixels, phrases, opt);
  const DenseFeatureMap dense = dense_feature_map(model, pixels);
  std::vector<RegionEmbedding> out;
  for (std::size_t i = 0; i < phrases.size(); ++i) {
    RegionEmbedding r;
    r.phrase = phrases[i];
    r.heat = heats[i];
    r.zero_heat = all_zero(r.heat.values);
    r.embedding = region_embedding(r.heat.values, dense.features);
    out.push_back(std::move(r));
  }
  return out;
}

// --- losses ------------------------------------------------------------------

Tensor global_contrastive_loss(const Tensor& images, const Tensor& texts, const Tensor& log_tau) {
  if (images.rank() != 2 || images.shape() != texts.shape() || images.dim(0) == 0) {
    throw ShapeError("global_contrastive_loss: need equal [B x D] batches, got " +
                     shape_string(images.shape()) + " and " + shape_string(texts.shape()));
  }
  if (log_tau.numel() != 1 || !std::isfinite(log_tau.item())) {
    throw ContractError("global_contrastive_loss: log temperature must be one finite value");
  }
  const std::size_t b = images.dim(0);
  const Tensor sim = ops::matmul_nt(ops::l2_normalize(images), ops::l2_normalize(texts));
  const Tensor logits = ops::div_scalar(sim, ops::exp(log_tau));
  const Tensor eye = identity(b);
  const Tensor rows = ops::sum(ops::mul(ops::log_softmax(logits, 1), eye));
  const Tensor cols = ops::sum(ops::mul(ops::log_softmax(logits, 0), eye));
  return ops::scale(ops::add(rows, cols), -1.0 / (2.0 * static_cast<Real>(b)));
}

Tensor global_contrastive_loss(const Tensor& images, const Tensor& texts, Real tau) {
  if (!(tau > 0) || !std::isfinite(tau)) throw ContractError("temperature must be positive, got " + std::to_string(tau));
  return global_contrastive_loss(images, texts, Tensor::scalar(std::log(tau)));
}

Tensor local_focal_loss(const Tensor& regions, const Tensor& phrases, Real eps, const std::vector<bool>* negatives) {
  if (regions.rank() != 2 || regions.shape() != phrases.shape() || regions.dim(0) == 0) {
    throw ShapeError("local_focal_loss: need equal [P x D] inputs, got " + shape_string(regions.shape()) +
                     " and " + shape_string(phrases.shape()));
  }
  if (!(eps > 0 && eps < 0.5)) throw ContractError("local_focal_loss: eps must lie in (0, 0.5)");
  const std::size_t p = regions.dim(0);
  if (negatives != nullptr && negatives->size() != p * p) {
    throw ContractError("local_focal_loss: negative mask must have P*P entries");
  }
  const Tensor s = ops::clamp(ops::matmul_nt(ops::l2_normalize(regions), ops::l2_normalize(phrases)), eps, 1 - eps);
  const Tensor one_minus = ops::add_scalar(ops::scale(s, -1.0), 1.0);
  const Tensor eye = identity(p);
  std::vector<Real> neg(p * p);
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < p; ++j) neg[i * p + j] = i != j && (negatives == nullptr || (*negatives)[i * p + j]);
  const Tensor pos_terms = ops::mul(ops::square(one_minus), ops::log(s));
  const Tensor neg_terms = ops::mul(ops::square(s), ops::log(one_minus));
  const Tensor total = ops::add(ops::sum(ops::mul(pos_terms, eye)),
                                ops::sum(ops::mul(neg_terms, Tensor({p, p}, std::move(neg)))));
  return ops::scale(total, -1.0);
}

// --- optimisation --------------------------------------------------------------

void adamw_update(std::span<Real> values, std::span<const Real> grad, std::vector<Real>& m, std::vector<Real>& v,
                  std::size_t step, bool decay, const AdamWOptions& o) {
  if (grad.size() != values.size()) throw ShapeError("adamw_update: gradient size mismatch");
  if (step == 0) throw ContractError("adamw_update: steps count from 1");
  m.resize(values.size(), 0.0);
  v.resize(values.size(), 0.0);
  const Real t = static_cast<Real>(step);
  const Real c1 = 1 - std::pow(o.beta1, t);
  const Real c2 = 1 - std::pow(o.beta2, t);
  for (std::size_t i = 0; i < values.size(); ++i) {
    m[i] = o.beta1 * m[i] + (1 - o.beta1) * grad[i];
    v[i] = o.beta2 * v[i] + (1 - o.beta2) * grad[i] * grad[i];
    const Real update = (m[i] / c1) / (std::sqrt(v[i] / c2) + o.eps);
    if (decay) values[i] -= o.lr * o.weight_decay * values[i];
    values[i] -= o.lr * update;
  }
}

Real TrainState::tau() const { return std::exp(log_tau.item()); }

TrainState init_train_state(const clip::ClipModel& model, Real tau, std::uint64_t seed) {
  if (!(tau > 0)) throw ContractError("initial temperature must be positive");
  TrainState s{model.clone(), Tensor::scalar(std::log(tau)), {}, {}, 0, seed};
  for (auto& [name, w] : s.model.weights) w.set_requires_grad(true);
  s.log_tau.set_requires_grad(true);
  return s;
}

namespace {

struct Param {
  std::string name;
  Tensor* tensor;
  bool decay;
};

std::vector<Param> parameters(TrainState& s, bool train_tau) {
  std::vector<Param> out;
  for (auto& [name, w] : s.model.weights) out.push_back({name, &w, w.rank() >= 2});
  if (train_tau) out.push_back({"log_tau", &s.log_tau, false});
  return out;
}

void adamw(TrainState& s, const std::vector<Param>& params, const AdamWOptions& o) {
  ++s.step;
  for (const Param& p : params) {
    const std::vector<Real> zeros = p.tensor->has_grad() ? std::vector<Real>() : std::vector<Real>(p.tensor->numel());
    adamw_update(p.tensor->mutable_data(), p.tensor->has_grad() ? p.tensor->grad() : std::span<const Real>(zeros),
                 s.m[p.name], s.v[p.name], s.step, p.decay, o);
  }
}

struct PreparedPair {
  clip::Tokenized caption;
  std::vector<std::string> phrases;
  std::vector<clip::Tokenized> phrase_tokens;
  std::vector<explain::HeatMap> heats;
};

StepResult step_impl(TrainState& state, const clip::BpeTokenizer& tok, const std::vector<TrainPair>& batch,
                     const FinetuneOptions& opt, std::size_t batch_id, const Lexicon& lexicon) {
  if (batch.empty()) throw ContractError("finetune_step: empty batch");
  const clip::ModelConfig& cfg = state.model.config;
  StepResult res;
  std::vector<PreparedPair> prep(batch.size());
  {
    // Heat maps come from a frozen copy so explanation passes leave the
    // trainable weights' gradients alone.
    const clip::ClipModel frozen = state.model.clone();
    for (std::size_t b = 0; b < batch.size(); ++b) {
      PreparedPair& pp = prep[b];
      pp.caption = tok.encode(batch[b].caption, cfg.context_length);
      if (!opt.local_loss) continue;
      const PhraseSet ps = extract_phrases(batch[b].caption, opt.max_phrases, lexicon);
      if (ps.no_noun) {
        ++res.skipped_captions;
        continue;
      }
      for (const auto& p : ps.phrases) pp.phrases.push_back(p.text);
      pp.heats = phrase_heatmaps(frozen, tok, batch[b].pixels, pp.phrases, opt.region);
      for (const auto& p : pp.phrases) pp.phrase_tokens.push_back(tok.encode(p, cfg.context_length));
    }
  }

  const std::vector<Param> params = parameters(state, opt.train_tau);
  for (auto& [name, w] : state.model.weights) w.zero_grad();
  state.log_tau.zero_grad();
  Tape tape;
  TapeScope scope(tape);
  std::vector<Tensor> images, texts, regions, phrase_embs;
  std::vector<std::string> pool;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    clip::EncodeOptions eo;
    eo.dense = opt.local_loss && !prep[b].phrases.empty();
    const clip::EncodeResult img = clip::encode_image(state.model, batch[b].pixels, eo);
    images.push_back(ops::reshape(img.embedding, {1, cfg.embed_dim}));
    texts.push_back(ops::reshape(clip::encode_text(state.model, prep[b].caption).embedding, {1, cfg.embed_dim}));
    for (std::size_t t = 0; t < prep[b].phrases.size(); ++t) {
      if (all_zero(prep[b].heats[t].values)) {
        ++res.dropped_phrases;
        continue;
      }
      regions.push_back(ops::reshape(region_embedding(prep[b].heats[t].values, img.dense), {1, cfg.embed_dim}));
      phrase_embs.push_back(
          ops::reshape(clip::encode_text(state.model, prep[b].phrase_tokens[t]).embedding, {1, cfg.embed_dim}));
      pool.push_back(prep[b].phrases[t]);
    }
  }
  const Tensor log_tau = opt.train_tau ? state.log_tau : state.log_tau.detach();
  const Tensor global = global_contrastive_loss(ops::concat_rows(images), ops::concat_rows(texts), log_tau);
  Tensor total = global;
  if (!regions.empty()) {
    std::vector<bool> negatives(pool.size() * pool.size(), true);
    if (opt.exclude_same_phrase_negatives) {
      for (std::size_t i = 0; i < pool.size(); ++i)
        for (std::size_t j = 0; j < pool.size(); ++j) negatives[i * pool.size() + j] = pool[i] != pool[j];
    }
    const Tensor local =
        local_focal_loss(ops::concat_rows(regions), ops::concat_rows(phrase_embs), opt.focal_eps, &negatives);
    res.local = local.item();
    total = ops::add(total, ops::scale(local, opt.local_weight));
  }
  res.global = global.item();
  res.total = total.item();
  res.phrases = pool.size();
  if (!std::isfinite(res.total)) {
    throw NumericError("batch " + std::to_string(batch_id) + ": non-finite loss (global " +
                       std::to_string(res.global) + ", local " + std::to_string(res.local) + ")");
  }
  tape.backward(total);
  for (const Param& p : params) {
    if (!p.tensor->has_grad()) continue;
    for (Real g : p.tensor->grad()) {
      if (!std::isfinite(g)) {
        throw NumericError("batch " + std::to_string(batch_id) + ": non-finite gradient in " + p.name);
      }
    }
  }
  adamw(state, params, opt.optim);
  res.step = state.step;
  res.tau = state.tau();
  return res;
}

}  // namespace

StepResult finetune_step(TrainState& state, const clip::BpeTokenizer& tok, const std::vector<TrainPair>& batch,
                         const FinetuneOptions& opt, std::size_t batch_id, const Lexicon& lexicon) {
  try {
    return step_impl(state, tok, batch, opt, batch_id, lexicon);
  } catch (const NumericError& e) {
    // Failures inside the forward (e.g. a NaN collapsing a norm) get the batch id too.
    const std::string tag = "batch " + std::to_string(batch_id) + ":";
    if (std::string_view(e.what()).starts_with(tag)) throw;
    throw NumericError(tag + " " + e.what());
  }
}

std::vector<StepResult> train(TrainState& state, const clip::BpeTokenizer& tok, const std::vector<TrainPair>& data,
                              const FinetuneOptions& opt, const TrainRunOptions& run,
                              const std::function<void(const StepResult&)>& on_step, const Lexicon& lexicon) {
  if (data.empty()) throw ContractError("train: no training pairs");
  if (run.batch_size == 0) throw ContractError("train: batch size must be positive");
  const std::size_t batch_size = std::min(run.batch_size, data.size());
  std::vector<std::size_t> order(data.size());
  std::mt19937_64 rng(state.seed);
  std::size_t cursor = data.size();
  std::vector<StepResult> log;
  for (std::size_t s = 0; s < run.steps; ++s) {
    std::vector<TrainPair> batch;
    while (batch.size() < batch_size) {
      if (cursor == data.size()) {
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(data[order[cursor++]]);
    }
    log.push_back(finetune_step(state, tok, batch, opt, s, lexicon));
    if (on_step) on_step(log.back());
  }
  return log;
}

std::string loss_log_csv(const std::vector<StepResult>& log) {
  std::ostringstream out;
  out << "step,global,local,total,tau,phrases,dropped_phrases,skipped_captions\n";
  char buf[160];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%zu,%zu,%zu\n", r.step, r.global, r.local, r.total,
                  r.tau, r.phrases, r.dropped_phrases, r.skipped_captions);
    out << buf;
  }
  return out.str();
}

// --- region classification -------------------------------------------------------

std::vector<std::size_t> region_cells(const Region& region, std::size_t size, std::size_t patch, bool* expanded) {
  const std::size_t side = size / patch;
  std::vector<std::size_t> cells;
  Real cx = 0, cy = 0;  // region center, used when nothing is covered
  if (region.kind == Region::Kind::kBox) {
    const eval::Box& b = region.box;
    if (b.x1 <= b.x0 || b.y1 <= b.y0 || b.x1 > size || b.y1 > size) {
      throw ContractError("region box outside the " + std::to_string(size) + "px model frame");
    }
    for (std::size_t gy = 0; gy < side; ++gy)
      for (std::size_t gx = 0; gx < side; ++gx) {
        const Real px = (gx + 0.5) * patch, py = (gy + 0.5) * patch;
        if (px >= b.x0 && px < b.x1 && py >= b.y0 && py < b.y1) cells.push_back(gy * side + gx);
      }
    cx = (b.x0 + b.x1) / 2.0;
    cy = (b.y0 + b.y1) / 2.0;
  } else {
    const clip::Mask& m = region.mask;
    if (m.width != size || m.height != size) throw ContractError("region mask must match the model frame");
    if (m.count() == 0) throw ContractError("region mask is empty");
    std::size_t n = 0;
    for (std::size_t gy = 0; gy < side; ++gy)
      for (std::size_t gx = 0; gx < side; ++gx) {
        std::size_t on = 0;
        for (std::size_t y = gy * patch; y < (gy + 1) * patch; ++y)
          for (std::size_t x = gx * patch; x < (gx + 1) * patch; ++x) {
            if (m.at(x, y)) {
              ++on;
              cx += x + 0.5;
              cy += y + 0.5;
              ++n;
            }
          }
        if (2 * on >= patch * patch) cells.push_back(gy * side + gx);
      }
    cx /= static_cast<Real>(n);
    cy /= static_cast<Real>(n);
  }
  if (expanded) *expanded = cells.empty();
  if (cells.empty()) {
    std::size_t best = 0;
    Real best_d = 1e300;
    for (std::size_t c = 0; c < side * side; ++c) {
      const Real dx = (c % side + 0.5) * patch - cx, dy = (c / side + 0.5) * patch - cy;
      if (dx * dx + dy * dy < best_d) {
        best_d = dx * dx + dy * dy;
        best = c;
      }
    }
    cells.push_back(best);
  }
  return cells;
}

std::vector<RegionPrediction> region_classify(const clip::ClipModel& model, const Tensor& pixels,
                                              const std::vector<Region>& regions,
                                              const std::vector<Tensor>& class_embeddings) {
  if (class_embeddings.empty()) throw ContractError("region_classify: no classes");
  NoTapeScope no_tape;
  const DenseFeatureMap dense = dense_feature_map(model, pixels);
  const std::size_t d = dense.features.dim(1);
  std::vector<RegionPrediction> out;
  for (const Region& r : regions) {
    RegionPrediction pred;
    const auto cells = region_cells(r, model.config.image_size, model.config.patch_size, &pred.expanded);
    std::vector<Real> pooled(d, 0.0);
    for (std::size_t c : cells)
      for (std::size_t k = 0; k < d; ++k) pooled[k] += dense.features.at(c, k);
    for (Real& v : pooled) v /= static_cast<Real>(cells.size());
    const Tensor emb = Tensor::vector(pooled);
    for (const Tensor& c : class_embeddings) pred.scores.push_back(ops::cosine(emb, c).item());
    pred.order = eval::rank_scores(pred.scores);
    out.push_back(std::move(pred));
  }
  return out;
}

eval::Box box_to_model_frame(const eval::Box& box, std::size_t width, std::size_t height, std::size_t size) {
  const clip::CropWindow win = clip::crop_window(width, height, size);
  const Real sx = static_cast<Real>(win.resized_width) / width;
  const Real sy = static_cast<Real>(win.resized_height) / height;
  auto map = [&](std::size_t v, Real scale, std::size_t offset) {
    const Real m = std::round(v * scale) - static_cast<Real>(offset);
    return static_cast<std::size_t>(std::clamp<Real>(m, 0, static_cast<Real>(size)));
  };
  eval::Box out = box;
  out.x0 = map(box.x0, sx, win.left);
  out.x1 = map(box.x1, sx, win.left);
  out.y0 = map(box.y0, sy, win.top);
  out.y1 = map(box.y1, sy, win.top);
  return out;
}

RegionAccuracy region_accuracy(const clip::ModelBundle& bundle, const eval::DatasetManifest& manifest,
                               const std::string& prompt_template) {
  if (manifest.classes.empty()) throw DataError("region accuracy needs a class table");
  std::vector<Tensor> classes;
  for (const auto& c : manifest.classes) {
    classes.push_back(clip::embed_text(bundle, eval::apply_template(prompt_template, c)));
  }
  const std::size_t size = bundle.config().image_size;
  RegionAccuracy acc;
  std::size_t top1 = 0, top5 = 0;
  for (const auto& rec : manifest.records) {
    std::vector<Region> regions;
    std::vector<std::size_t> labels;
    for (const auto& b : rec.boxes) {
      if (b.label.empty()) continue;
      auto it = std::find(manifest.classes.begin(), manifest.classes.end(), b.label);
      if (it == manifest.classes.end()) throw DataError("box label '" + b.label + "' is not a class");
      labels.push_back(static_cast<std::size_t>(it - manifest.classes.begin()));
      regions.push_back({});
      regions.back().box = b;
    }
    if (regions.empty()) continue;
    const clip::Image img = clip::read_image(rec.image);
    for (auto& r : regions) {
      const eval::Box mapped = box_to_model_frame(r.box, img.width, img.height, size);
      r.box.x0 = mapped.x0;
      r.box.y0 = mapped.y0;
      r.box.x1 = std::max(mapped.x1, mapped.x0 + 1);
      r.box.y1 = std::max(mapped.y1, mapped.y0 + 1);
      r.box.x1 = std::min(r.box.x1, size);
      r.box.y1 = std::min(r.box.y1, size);
      r.box.x0 = std::min(r.box.x0, r.box.x1 - 1);
      r.box.y0 = std::min(r.box.y0, r.box.y1 - 1);
    }
    const Tensor px = clip::preprocess_image(img, size, bundle.preprocess);
    const auto preds = region_classify(bundle.model, px, regions, classes);
    for (std::size_t i = 0; i < preds.size(); ++i) {
      const auto& o = preds[i].order;
      top1 += o.front() == labels[i];
      top5 += std::find(o.begin(), o.begin() + std::min<std::size_t>(5, o.size()), labels[i]) !=
              o.begin() + std::min<std::size_t>(5, o.size());
      acc.expanded += preds[i].expanded;
      ++acc.regions;
    }
  }
  if (acc.regions == 0) throw DataError("no labelled boxes in the dataset");
  acc.top1 = static_cast<Real>(top1) / static_cast<Real>(acc.regions);
  acc.top5 = static_cast<Real>(top5) / static_cast<Real>(acc.regions);
  return acc;
}

}  // namespace geclip::finetune
