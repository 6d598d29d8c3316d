#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "geclip/clip/image.h"
#include "geclip/explain/explain.h"

namespace geclip::eval {

enum class Direction { kDeletion, kInsertion };
const char* direction_name(Direction d);

struct PerturbationCurve {
  Direction direction = Direction::kDeletion;
  std::vector<Real> fractions;  // strictly increasing, starts at 0
  std::vector<Real> values;
  bool clamped = false;  // text curves: fewer words than requested steps

  Real auc() const;
};

// Trapezoidal area with x rescaled to [0, 1], so a constant curve c has
// area c. Requires >= 2 samples with non-decreasing x spanning a positive
// range.
Real trapezoid_auc(std::span<const Real> x, std::span<const Real> y);

// --- image deletion / insertion -------------------------------------------

struct PerturbOptions {
  std::size_t steps = 100;
  Real step_fraction = 0.005;
  std::uint64_t seed = 0;
};

// Pixel indices (row-major) sorted by heat, highest first; ties keep raster
// order.
std::vector<std::size_t> rank_pixels(const explain::HeatMap& heat);

// Number of pixels changed per step: round(step_fraction * pixels), >= 1.
std::size_t pixels_per_step(std::size_t pixels, Real step_fraction);

// Uniform [0, 1) noise per channel, normalized like an image, fixed by seed.
Tensor deletion_noise(std::size_t size, const clip::Preprocess& pre, std::uint64_t seed);

using PixelScorer = std::function<Real(const Tensor& pixels)>;
// Several performance measures read off the same perturbed image.
using MultiPixelScorer = std::function<std::vector<Real>(const Tensor& pixels)>;

// Deletion overwrites ranked pixels with `deletion_noise`; insertion reveals
// ranked pixels on a zero (post-normalization) canvas. `pixels` is
// [3 x S x S] and the heat map must be S x S.
PerturbationCurve perturbation_curve(const Tensor& pixels, const explain::HeatMap& heat,
                                     Direction direction, const PerturbOptions& options,
                                     const clip::Preprocess& pre, const PixelScorer& scorer);
// One curve per scorer output, all sharing one perturbation sequence.
std::vector<PerturbationCurve> perturbation_curves(const Tensor& pixels, const explain::HeatMap& heat,
                                                   Direction direction, const PerturbOptions& options,
                                                   const clip::Preprocess& pre,
                                                   const MultiPixelScorer& scorer);

// --- text deletion / insertion --------------------------------------------

using TextScorer = std::function<Real(const std::string& text)>;
using MultiTextScorer = std::function<std::vector<Real>(const std::string& text)>;

// Words are removed (deletion) or revealed in sentence order (insertion) one
// at a time by importance rank, ties by position. Curves have
// min(steps, words) + 1 samples; `clamped` is set when steps exceeded the
// word count.
PerturbationCurve text_perturbation_curve(const std::vector<std::string>& words,
                                          std::span<const Real> importance, Direction direction,
                                          std::size_t steps, const TextScorer& scorer);
std::vector<PerturbationCurve> text_perturbation_curves(const std::vector<std::string>& words,
                                                        std::span<const Real> importance,
                                                        Direction direction, std::size_t steps,
                                                        const MultiTextScorer& scorer);

// Pointwise mean of curves sampled at the same fractions.
PerturbationCurve mean_curve(const std::vector<PerturbationCurve>& curves);

// --- localization ----------------------------------------------------------

struct LocalizationResult {
  bool pg_hit = false;
  Real energy_pg = 0;
  Real pixel_acc = 0;
  Real ap = 0;
  Real mask_iou = 0;
};

// Mask nonzero = foreground; sizes must match.
LocalizationResult point_game(const explain::HeatMap& heat, const clip::Mask& mask);

struct ThresholdRule {
  enum class Kind { kMean, kFixed } kind = Kind::kMean;
  Real value = 0.5;  // used by kFixed
};
ThresholdRule parse_threshold_rule(const std::string& text);  // "mean" or a number

// Pixels with heat >= threshold are foreground for pixel accuracy and IoU;
// AP sweeps every distinct heat value.
LocalizationResult segmentation_metrics(const explain::HeatMap& heat, const clip::Mask& mask,
                                        const ThresholdRule& rule = {});
Real average_precision(std::span<const Real> scores, std::span<const bool> labels);

// Nearest-neighbour resize + center crop matching clip::resize_and_crop.
clip::Mask crop_mask(const clip::Mask& mask, std::size_t size);

// --- classification and retrieval -----------------------------------------

// Indices sorted by score descending, ties by index.
std::vector<std::size_t> rank_scores(std::span<const Real> scores);

struct RankedClasses {
  std::vector<std::size_t> order;
  std::vector<Real> scores;
};
RankedClasses zero_shot_classify(const Tensor& image_embedding,
                                 const std::vector<Tensor>& class_embeddings);
std::string apply_template(const std::string& tmpl, const std::string& name);

struct RecallTable {
  std::map<std::size_t, Real> image_to_text;
  std::map<std::size_t, Real> text_to_image;
};
// Pair i is (images[i], texts[i]).
RecallTable retrieval_recall(const std::vector<Tensor>& images, const std::vector<Tensor>& texts,
                             const std::vector<std::size_t>& ks);

// --- word statistics -------------------------------------------------------

struct Regression {
  Real slope = 0;
  Real intercept = 0;
  Real r2 = 0;
  std::size_t n = 0;
};
Regression linear_regression(std::span<const Real> x, std::span<const Real> y);

struct WordStats {
  std::map<std::string, Real> mean_importance;
  std::map<std::string, std::size_t> count;
  std::optional<Regression> concreteness_fit;  // importance on concreteness
  std::optional<Regression> frequency_fit;     // importance on log frequency
};
WordStats word_importance_stats(const std::vector<explain::TextSaliency>& saliencies,
                                const std::map<std::string, Real>* concreteness = nullptr,
                                const std::map<std::string, Real>* frequency = nullptr);

}  // namespace geclip::eval
