#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "geclip/clip/model.h"
#include "geclip/eval/dataset.h"
#include "geclip/explain/explain.h"
#include "geclip/finetune/phrases.h"

namespace geclip::finetune {

// --- dense features and region embeddings ---------------------------------

struct DenseFeatureMap {
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  Tensor features;  // [h*w x D], row-major over the patch grid, no class token
};

// Last layer run with attention mixing bypassed. Records on the active tape.
DenseFeatureMap dense_feature_map(const clip::ClipModel& model, const Tensor& pixels);

// sum_hw heat[hw] * dense[hw, :]. The heat map is a constant weighting.
Tensor region_embedding(std::span<const Real> heat, const Tensor& dense);

struct RegionOptions {
  explain::ImageExplainOptions explain;  // head mode, layers and lambda of the heat maps
  bool normalize = false;                // unit-normalize each heat map before pooling
};

struct RegionEmbedding {
  std::string phrase;
  Tensor embedding;       // [D]
  explain::HeatMap heat;  // patch resolution, as used for pooling
  bool zero_heat = false; // heat map vanished; embedding is zero and unusable
};

// Grad-ECLIP heat map per phrase (phrase vs. image embedding), then pooling
// of the dense features. Leaf gradients of `model` may be touched by the
// explanation passes.
std::vector<RegionEmbedding> region_embeddings(const clip::ClipModel& model,
                                               const clip::BpeTokenizer& tokenizer,
                                               const Tensor& pixels,
                                               const std::vector<std::string>& phrases,
                                               const RegionOptions& options = {});

// --- losses ----------------------------------------------------------------

// Symmetric InfoNCE over cosine similarities of rows of `images` and `texts`
// ([B x D]), averaged over the 2B terms, temperature exp(log_tau).
Tensor global_contrastive_loss(const Tensor& images, const Tensor& texts, const Tensor& log_tau);
// Fixed temperature; tau <= 0 is a ContractError.
Tensor global_contrastive_loss(const Tensor& images, const Tensor& texts, Real tau);

// Focal alignment of regions[t] with phrases[t] ([P x D]) against every
// other phrase t' != t. Cosines are clamped to [eps, 1 - eps]. When given,
// `negatives[t * P + t']` selects which cross pairs contribute.
Tensor local_focal_loss(const Tensor& regions, const Tensor& phrases, Real eps = 1e-6,
                        const std::vector<bool>* negatives = nullptr);

// --- optimisation ------------------------------------------------------------

struct AdamWOptions {
  Real lr = 1e-5;
  Real beta1 = 0.9;
  Real beta2 = 0.999;
  Real eps = 1e-8;
  Real weight_decay = 0.1;  // decoupled; applied to matrices only
};

// One AdamW update of `values` in place. `step` is the 1-based step count
// used for bias correction; decay is skipped when `decay` is false.
void adamw_update(std::span<Real> values, std::span<const Real> grad, std::vector<Real>& m,
                  std::vector<Real>& v, std::size_t step, bool decay, const AdamWOptions& options);

struct TrainState {
  clip::ClipModel model;  // weights require gradients
  Tensor log_tau;         // scalar parameter, tau = exp(log_tau)
  std::map<std::string, std::vector<Real>> m;
  std::map<std::string, std::vector<Real>> v;
  std::size_t step = 0;
  std::uint64_t seed = 0;

  Real tau() const;
};

// Deep copy of `model` with every weight trainable.
TrainState init_train_state(const clip::ClipModel& model, Real tau = 0.07, std::uint64_t seed = 0);

struct FinetuneOptions {
  AdamWOptions optim;
  bool local_loss = true;
  Real local_weight = 1.0;
  std::size_t max_phrases = 4;
  Real focal_eps = 1e-6;
  RegionOptions region;
  // Phrases with identical text are not used as each other's negatives.
  bool exclude_same_phrase_negatives = true;
  bool train_tau = true;
};

struct TrainPair {
  Tensor pixels;  // preprocessed [3 x S x S]
  std::string caption;
};

struct StepResult {
  std::size_t step = 0;  // state.step after the update
  Real global = 0;
  Real local = 0;
  Real total = 0;
  Real tau = 0;
  std::size_t phrases = 0;           // region-phrase pairs in the local loss
  std::size_t dropped_phrases = 0;   // zero heat maps
  std::size_t skipped_captions = 0;  // captions without a noun phrase
};

// One AdamW step on L_global + local_weight * L_local. A non-finite loss or
// gradient raises NumericError naming `batch_id` and leaves the state as it
// was.
StepResult finetune_step(TrainState& state, const clip::BpeTokenizer& tokenizer,
                         const std::vector<TrainPair>& batch, const FinetuneOptions& options,
                         std::size_t batch_id = 0, const Lexicon& lexicon = Lexicon::builtin());

struct TrainRunOptions {
  std::size_t steps = 200;
  std::size_t batch_size = 8;
};

// Steps over `data` in seeded shuffled epochs (seed from the state).
std::vector<StepResult> train(TrainState& state, const clip::BpeTokenizer& tokenizer,
                              const std::vector<TrainPair>& data,
                              const FinetuneOptions& options, const TrainRunOptions& run,
                              const std::function<void(const StepResult&)>& on_step = {},
                              const Lexicon& lexicon = Lexicon::builtin());

// Columns: step,global,local,total,tau,phrases,dropped_phrases,skipped_captions.
std::string loss_log_csv(const std::vector<StepResult>& log);

// --- region classification --------------------------------------------------

struct Region {
  enum class Kind { kBox, kMask } kind = Kind::kBox;
  eval::Box box;   // model-input pixel coordinates
  clip::Mask mask; // model-input resolution
};

struct RegionPrediction {
  std::vector<std::size_t> order;  // class indices by score, ties by index
  std::vector<Real> scores;
  bool expanded = false;  // region covered no cell; the nearest cell was used
};

// Patch cells pooled by a region: box cells are those whose center lies in
// the box, mask cells those at least half covered.
std::vector<std::size_t> region_cells(const Region& region, std::size_t image_size,
                                      std::size_t patch_size, bool* expanded = nullptr);

std::vector<RegionPrediction> region_classify(const clip::ClipModel& model, const Tensor& pixels,
                                              const std::vector<Region>& regions,
                                              const std::vector<Tensor>& class_embeddings);

// Box in original image coordinates mapped into the center-crop frame.
eval::Box box_to_model_frame(const eval::Box& box, std::size_t width, std::size_t height,
                             std::size_t size);

struct RegionAccuracy {
  Real top1 = 0;
  Real top5 = 0;
  std::size_t regions = 0;
  std::size_t expanded = 0;
};

// Labelled boxes of every record, classified against `template`-filled class
// names. Box labels must name manifest classes.
RegionAccuracy region_accuracy(const clip::ModelBundle& bundle, const eval::DatasetManifest& manifest,
                               const std::string& prompt_template = "a {}");

}  // namespace geclip::finetune
