#include "geclip/eval/metrics.h"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <random>

#include "geclip/clip/encoder.h"
#include "geclip/common/error.h"

namespace geclip::eval {

const char* direction_name(Direction d) {
  return d == Direction::kDeletion ? "deletion" : "insertion";
}

Real trapezoid_auc(std::span<const Real> x, std::span<const Real> y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw ContractError("auc: need >= 2 samples with matching x and y");
  }
  const Real range = x.back() - x.front();
  if (!(range > 0)) throw ContractError("auc: x does not span a positive range");
  Real area = 0;
  for (std::size_t i = 1; i < x.size(); ++i) {
    if (x[i] < x[i - 1]) throw ContractError("auc: x must be non-decreasing");
    area += (x[i] - x[i - 1]) * (y[i] + y[i - 1]) / 2;
  }
  return area / range;
}

Real PerturbationCurve::auc() const { return trapezoid_auc(fractions, values); }

std::vector<std::size_t> rank_pixels(const explain::HeatMap& heat) {
  std::vector<std::size_t> order(heat.values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return heat.values[a] > heat.values[b]; });
  return order;
}

std::size_t pixels_per_step(std::size_t pixels, Real step_fraction) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(step_fraction * pixels)));
}

Tensor deletion_noise(std::size_t size, const clip::Preprocess& pre, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<Real> u(0.0, 1.0);
  const std::size_t hw = size * size;
  std::vector<Real> v(3 * hw);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < hw; ++i) v[c * hw + i] = (u(rng) - pre.mean[c]) / pre.std[c];
  return Tensor({3, size, size}, std::move(v));
}

std::vector<PerturbationCurve> perturbation_curves(const Tensor& pixels, const explain::HeatMap& heat,
                                                   Direction direction, const PerturbOptions& opt,
                                                   const clip::Preprocess& pre,
                                                   const MultiPixelScorer& scorer) {
  if (pixels.rank() != 3 || pixels.dim(0) != 3 || pixels.dim(1) != pixels.dim(2)) {
    throw ShapeError("perturbation: expected [3 x S x S] pixels, got " + shape_string(pixels.shape()));
  }
  const std::size_t size = pixels.dim(1), hw = size * size;
  if (heat.width != size || heat.height != size) {
    throw ContractError("perturbation: heat map is " + std::to_string(heat.width) + "x" +
                        std::to_string(heat.height) + ", image is " + std::to_string(size) + "x" +
                        std::to_string(size));
  }
  if (opt.steps == 0 || !(opt.step_fraction > 0) ||
      opt.step_fraction * static_cast<Real>(opt.steps) > 1.0 + 1e-12) {
    throw ContractError("perturbation: steps x step_fraction must lie in (0, 1]");
  }
  const std::vector<std::size_t> order = rank_pixels(heat);
  const std::size_t per_step = pixels_per_step(hw, opt.step_fraction);
  const bool deletion = direction == Direction::kDeletion;
  const Tensor noise = deletion ? deletion_noise(size, pre, opt.seed) : Tensor();
  Tensor canvas = deletion ? pixels.clone() : Tensor::zeros({3, size, size});
  const Tensor& fill = deletion ? noise : pixels;

  std::vector<PerturbationCurve> curves;
  auto record = [&](Real fraction, const Tensor& image) {
    const std::vector<Real> v = scorer(image);
    if (curves.empty()) curves.resize(v.size());
    if (v.size() != curves.size()) throw ContractError("perturbation: scorer changed its output count");
    for (std::size_t i = 0; i < v.size(); ++i) {
      curves[i].direction = direction;
      curves[i].fractions.push_back(fraction);
      curves[i].values.push_back(v[i]);
    }
  };
  // Step 0 scores the untouched input for deletion so it equals the unperturbed metric.
  record(0, deletion ? pixels : canvas);
  std::size_t done = 0;
  for (std::size_t s = 1; s <= opt.steps; ++s) {
    const std::size_t target = std::min(hw, s * per_step);
    auto dst = canvas.mutable_data();
    auto src = fill.data();
    for (; done < target; ++done) {
      const std::size_t p = order[done];
      for (std::size_t c = 0; c < 3; ++c) dst[c * hw + p] = src[c * hw + p];
    }
    record(static_cast<Real>(s) * opt.step_fraction, canvas);
  }
  return curves;
}

PerturbationCurve perturbation_curve(const Tensor& pixels, const explain::HeatMap& heat,
                                     Direction direction, const PerturbOptions& opt,
                                     const clip::Preprocess& pre, const PixelScorer& scorer) {
  return perturbation_curves(pixels, heat, direction, opt, pre, [&](const Tensor& px) {
           return std::vector<Real>{scorer(px)};
         }).front();
}

std::vector<PerturbationCurve> text_perturbation_curves(const std::vector<std::string>& words,
                                                        std::span<const Real> importance,
                                                        Direction direction, std::size_t steps,
                                                        const MultiTextScorer& scorer) {
  if (words.empty()) throw ContractError("text perturbation: caption has no words");
  if (importance.size() != words.size()) {
    throw ContractError("text perturbation: " + std::to_string(importance.size()) +
                        " importances for " + std::to_string(words.size()) + " words");
  }
  const bool clamped = steps > words.size();
  steps = std::min(steps, words.size());
  std::vector<std::size_t> order(words.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return importance[a] > importance[b]; });
  std::vector<bool> present(words.size(), direction == Direction::kDeletion);
  auto caption = [&] {
    std::string s;
    for (std::size_t i = 0; i < words.size(); ++i) {
      if (!present[i]) continue;
      if (!s.empty()) s += ' ';
      s += words[i];
    }
    return s;
  };
  std::vector<PerturbationCurve> curves;
  for (std::size_t k = 0; k <= steps; ++k) {
    if (k > 0) present[order[k - 1]] = direction == Direction::kInsertion;
    const std::vector<Real> v = scorer(caption());
    if (curves.empty()) curves.resize(v.size());
    if (v.size() != curves.size()) throw ContractError("text perturbation: scorer changed its output count");
    for (std::size_t i = 0; i < v.size(); ++i) {
      curves[i].direction = direction;
      curves[i].clamped = clamped;
      curves[i].fractions.push_back(static_cast<Real>(k) / static_cast<Real>(words.size()));
      curves[i].values.push_back(v[i]);
    }
  }
  return curves;
}

PerturbationCurve text_perturbation_curve(const std::vector<std::string>& words,
                                          std::span<const Real> importance, Direction direction,
                                          std::size_t steps, const TextScorer& scorer) {
  return text_perturbation_curves(words, importance, direction, steps, [&](const std::string& t) {
           return std::vector<Real>{scorer(t)};
         }).front();
}

PerturbationCurve mean_curve(const std::vector<PerturbationCurve>& curves) {
  if (curves.empty()) throw ContractError("mean_curve: no curves");
  PerturbationCurve out = curves.front();
  for (std::size_t c = 1; c < curves.size(); ++c) {
    if (curves[c].fractions != out.fractions) throw ContractError("mean_curve: sample fractions differ");
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += curves[c].values[i];
    out.clamped = out.clamped || curves[c].clamped;
  }
  for (Real& v : out.values) v /= static_cast<Real>(curves.size());
  return out;
}

namespace {

void check_same_size(const explain::HeatMap& heat, const clip::Mask& mask) {
  if (heat.width != mask.width || heat.height != mask.height ||
      heat.values.size() != mask.values.size()) {
    throw ContractError("heat map " + std::to_string(heat.width) + "x" + std::to_string(heat.height) +
                        " does not match mask " + std::to_string(mask.width) + "x" +
                        std::to_string(mask.height));
  }
}

}  // namespace

LocalizationResult point_game(const explain::HeatMap& heat, const clip::Mask& mask) {
  check_same_size(heat, mask);
  if (mask.count() == 0) throw ContractError("point game: mask is empty");
  LocalizationResult r;
  std::size_t best = 0;
  for (std::size_t i = 0; i < heat.values.size(); ++i) {
    if (heat.values[i] > heat.values[best]) best = i;
  }
  // Dividing by the peak first makes a uniform map sum exact integers.
  const Real peak = heat.values[best];
  Real inside = 0, total = 0;
  if (peak > 0) {
    for (std::size_t i = 0; i < heat.values.size(); ++i) {
      const Real v = heat.values[i] / peak;
      total += v;
      if (mask.values[i]) inside += v;
    }
  }
  r.pg_hit = mask.values[best] != 0;
  r.energy_pg = total > 0 ? inside / total : 0;
  return r;
}

ThresholdRule parse_threshold_rule(const std::string& text) {
  ThresholdRule r;
  if (text == "mean") return r;
  try {
    std::size_t used = 0;
    r.value = std::stod(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
  } catch (const std::exception&) {
    throw ContractError("threshold must be 'mean' or a number, got '" + text + "'");
  }
  r.kind = ThresholdRule::Kind::kFixed;
  return r;
}

Real average_precision(std::span<const Real> scores, std::span<const bool> labels) {
  const std::size_t positives = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), true));
  if (positives == 0) return 0;
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  Real ap = 0, prev_recall = 0;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < order.size();) {
    // All pixels sharing a score enter together: one threshold per value.
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      tp += labels[order[j]];
      ++j;
    }
    const Real recall = static_cast<Real>(tp) / positives;
    const Real precision = static_cast<Real>(tp) / static_cast<Real>(j);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return ap;
}

LocalizationResult segmentation_metrics(const explain::HeatMap& heat, const clip::Mask& mask,
                                        const ThresholdRule& rule) {
  check_same_size(heat, mask);
  LocalizationResult r = mask.count() > 0 ? point_game(heat, mask) : LocalizationResult{};
  const std::size_t n = heat.values.size();
  Real threshold = rule.value;
  if (rule.kind == ThresholdRule::Kind::kMean) {
    threshold = std::accumulate(heat.values.begin(), heat.values.end(), 0.0) / static_cast<Real>(n);
  }
  std::size_t correct = 0, inter = 0, uni = 0;
  std::unique_ptr<bool[]> labels(new bool[n]);
  for (std::size_t i = 0; i < n; ++i) {
    const bool pred = heat.values[i] >= threshold;
    const bool gt = mask.values[i] != 0;
    labels[i] = gt;
    correct += pred == gt;
    inter += pred && gt;
    uni += pred || gt;
  }
  r.pixel_acc = static_cast<Real>(correct) / static_cast<Real>(n);
  r.mask_iou = uni > 0 ? static_cast<Real>(inter) / static_cast<Real>(uni) : 0;
  r.ap = average_precision(heat.values, std::span<const bool>(labels.get(), n));
  return r;
}

clip::Mask crop_mask(const clip::Mask& mask, std::size_t size) {
  const clip::CropWindow win = clip::crop_window(mask.width, mask.height, size);
  clip::Mask out{size, size, std::vector<std::uint8_t>(size * size)};
  const Real rx = static_cast<Real>(mask.width) / win.resized_width;
  const Real ry = static_cast<Real>(mask.height) / win.resized_height;
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const std::size_t sx = std::min(mask.width - 1, static_cast<std::size_t>((x + win.left + 0.5) * rx));
      const std::size_t sy = std::min(mask.height - 1, static_cast<std::size_t>((y + win.top + 0.5) * ry));
      out.values[y * size + x] = mask.at(sx, sy) ? 1 : 0;
    }
  return out;
}

std::vector<std::size_t> rank_scores(std::span<const Real> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

RankedClasses zero_shot_classify(const Tensor& image_embedding, const std::vector<Tensor>& classes) {
  if (classes.empty()) throw ContractError("zero-shot classification needs at least one class");
  RankedClasses r;
  NoTapeScope no_tape;
  for (const Tensor& c : classes) r.scores.push_back(clip::matching_score(image_embedding, c).item());
  r.order = rank_scores(r.scores);
  return r;
}

std::string apply_template(const std::string& tmpl, const std::string& name) {
  const std::size_t at = tmpl.find("{}");
  if (at == std::string::npos) return tmpl + " " + name;
  return tmpl.substr(0, at) + name + tmpl.substr(at + 2);
}

RecallTable retrieval_recall(const std::vector<Tensor>& images, const std::vector<Tensor>& texts,
                             const std::vector<std::size_t>& ks) {
  if (images.size() != texts.size()) {
    throw ContractError("retrieval: " + std::to_string(images.size()) + " images but " +
                        std::to_string(texts.size()) + " captions");
  }
  if (images.empty()) throw ContractError("retrieval: no pairs");
  const std::size_t n = images.size();
  NoTapeScope no_tape;
  std::vector<Real> sim(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) sim[i * n + j] = clip::matching_score(images[i], texts[j]).item();
  RecallTable table;
  for (std::size_t k : ks) {
    std::size_t i2t = 0, t2i = 0;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<Real> row(sim.begin() + i * n, sim.begin() + (i + 1) * n);
      const auto order = rank_scores(row);
      i2t += std::find(order.begin(), order.begin() + std::min(k, n), i) != order.begin() + std::min(k, n);
      std::vector<Real> col(n);
      for (std::size_t j = 0; j < n; ++j) col[j] = sim[j * n + i];
      const auto corder = rank_scores(col);
      t2i += std::find(corder.begin(), corder.begin() + std::min(k, n), i) != corder.begin() + std::min(k, n);
    }
    table.image_to_text[k] = static_cast<Real>(i2t) / n;
    table.text_to_image[k] = static_cast<Real>(t2i) / n;
  }
  return table;
}

Regression linear_regression(std::span<const Real> x, std::span<const Real> y) {
  if (x.size() != y.size() || x.size() < 2) throw ContractError("regression: need >= 2 paired samples");
  Regression r;
  r.n = x.size();
  const Real n = static_cast<Real>(x.size());
  const Real mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const Real my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  Real sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (!(sxx > 0)) throw ContractError("regression: x has zero variance");
  r.slope = sxy / sxx;
  r.intercept = my - r.slope * mx;
  r.r2 = syy > 0 ? (sxy * sxy) / (sxx * syy) : 1.0;
  return r;
}

WordStats word_importance_stats(const std::vector<explain::TextSaliency>& saliencies,
                                const std::map<std::string, Real>* concreteness,
                                const std::map<std::string, Real>* frequency) {
  if (saliencies.empty()) throw ContractError("word statistics need at least one saliency");
  WordStats stats;
  std::map<std::string, Real> sums;
  for (const auto& s : saliencies) {
    for (std::size_t i = 0; i < s.words.size(); ++i) {
      sums[s.words[i]] += s.importance[i];
      ++stats.count[s.words[i]];
    }
  }
  for (const auto& [w, total] : sums) stats.mean_importance[w] = total / static_cast<Real>(stats.count[w]);
  auto fit = [&](const std::map<std::string, Real>& table, bool log_x) -> std::optional<Regression> {
    std::vector<Real> x, y;
    for (const auto& [w, m] : stats.mean_importance) {
      auto it = table.find(w);
      if (it == table.end() || (log_x && !(it->second > 0))) continue;
      x.push_back(log_x ? std::log10(it->second) : it->second);
      y.push_back(m);
    }
    if (x.size() < 2) return std::nullopt;
    return linear_regression(x, y);
  };
  if (concreteness != nullptr) stats.concreteness_fit = fit(*concreteness, false);
  if (frequency != nullptr) stats.frequency_fit = fit(*frequency, true);
  return stats;
}

}  // namespace geclip::eval
