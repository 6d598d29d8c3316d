#pragma once

#include <span>
#include <string>
#include <vector>

#include "geclip/clip/encoder.h"

namespace geclip::explain {

// How token similarities to the query become spatial weights.
//   loosened: 0-1 normalization of q . k over the explained positions
//   softmax:  the single-head attention row, softmax(q . k / sqrt(C))
//   ones:     every weight 1
enum class LambdaMode { kLoosened, kSoftmax, kOnes };
enum class Resample { kBilinear, kNearest };

const char* lambda_mode_name(LambdaMode mode);
LambdaMode parse_lambda_mode(const std::string& name);
Resample parse_resample(const std::string& name);

// Row-major grid of non-negative importances.
struct HeatMap {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<Real> values;
  bool normalized = false;
  std::vector<std::size_t> layers;
  std::string prompt;

  Real max() const;
  Real at(std::size_t x, std::size_t y) const { return values[y * width + x]; }
};

struct TextSaliency {
  std::vector<std::string> words;
  std::vector<Real> importance;        // per word, max-normalized
  std::vector<Real> raw;               // per word, before normalization
  std::vector<Real> token_importance;  // per token position
  std::vector<int> token_word;
  std::vector<std::size_t> layers;
};

// --- building blocks ---------------------------------------------------

// Weights for the rows of `keys` ([n x C]) given the query `q` ([C]).
// Loosened weights with all similarities equal are defined as all ones.
std::vector<Real> spatial_weights(std::span<const Real> q, const Tensor& keys,
                                  LambdaMode mode);

// Gradient of the last back-propagated score w.r.t. the attention output of
// the trace's query token at `layer`. ContractError when that output did not
// receive gradients.
std::vector<Real> channel_weights(const clip::ActivationTrace& trace, std::size_t layer);

// Signed per-position contributions lambda_i * sum_c w_c v_ic, for the given
// token positions (lambda is parallel to positions).
std::vector<Real> layer_contributions(const clip::LayerTrace& layer, std::span<const Real> w,
                                      std::span<const Real> lambda,
                                      std::span<const std::size_t> positions);
// ReLU of layer_contributions.
std::vector<Real> layer_heatmap(const clip::LayerTrace& layer, std::span<const Real> w,
                                std::span<const Real> lambda,
                                std::span<const std::size_t> positions);

// Spatial weights for `positions` of a traced layer. Loosened and ones use
// only those positions; softmax normalizes over every token the query can
// attend to (`visible`), then selects the positions.
std::vector<Real> trace_spatial_weights(const clip::LayerTrace& layer, std::size_t query,
                                        std::span<const std::size_t> positions,
                                        std::size_t visible, LambdaMode mode);

// Negative entries count from the end (-1 is the last layer). Duplicates and
// out-of-range entries are rejected; the result is sorted.
std::vector<std::size_t> resolve_layers(const std::vector<int>& layers, std::size_t depth);
std::vector<int> last_layers(std::size_t count, std::size_t depth);

HeatMap resample(const HeatMap& map, std::size_t width, std::size_t height, Resample mode);
// In place 0-1 (min-max) normalization; a constant positive map becomes all
// ones and an all-zero map stays zero.
void normalize_unit(HeatMap& map);

// --- Grad-ECLIP --------------------------------------------------------

struct ImageExplainOptions {
  std::vector<int> layers{-1};
  LambdaMode lambda = LambdaMode::kLoosened;
  clip::HeadMode head_mode = clip::HeadMode::kSingle;
  Resample resample = Resample::kBilinear;
  std::size_t out_width = 0;  // 0: model input resolution
  std::size_t out_height = 0;
};

struct ImageExplanation {
  Real score = 0;  // matching score of the explained forward
  HeatMap grid;    // summed per-layer maps at patch resolution, unnormalized
  HeatMap map;     // resampled and unit-normalized
};

// One forward, one backward per text embedding.
std::vector<ImageExplanation> grad_eclip_image(const clip::ClipModel& model,
                                               const Tensor& pixels,
                                               const std::vector<Tensor>& text_embeddings,
                                               const ImageExplainOptions& options = {});
ImageExplanation grad_eclip_image(const clip::ModelBundle& bundle, const Tensor& pixels,
                                  const std::string& text,
                                  const ImageExplainOptions& options = {});

struct TextExplainOptions {
  std::vector<int> layers;  // empty: the last min(8, depth) layers
  LambdaMode lambda = LambdaMode::kLoosened;
  clip::HeadMode head_mode = clip::HeadMode::kSingle;
};

struct TextExplanation {
  Real score = 0;
  TextSaliency saliency;
};

TextExplanation grad_eclip_text(const clip::ClipModel& model, const clip::Tokenized& tokens,
                                const Tensor& image_embedding,
                                const TextExplainOptions& options = {});
TextExplanation grad_eclip_text(const clip::ModelBundle& bundle, const Tensor& pixels,
                                const std::string& text, const TextExplainOptions& options = {});

// Token importances summed per word, then max-normalized. A single-word
// sentence always gets importance 1.
TextSaliency remap_to_words(std::span<const Real> token_importance,
                            const clip::Tokenized& tokens);

// --- baselines ---------------------------------------------------------

// Head-averaged [cls] attention row of the last layer over patch tokens.
HeatMap raw_attention_grid(const clip::ActivationTrace& trace, std::size_t grid_side);
// Product of residual-mixed attention maps, first layer rightmost: [T x T].
Tensor rollout_matrix(const clip::ActivationTrace& trace);
HeatMap rollout_grid(const clip::ActivationTrace& trace, std::size_t grid_side);
// Grad-CAM on the residual input of the last block (output of the
// penultimate layer), multi-head forward.
HeatMap grad_cam_grid(const clip::ClipModel& model, const Tensor& pixels,
                      const Tensor& text_embedding);

enum class Method { kGradEclip, kRawAttention, kRollout, kGradCam };
const char* method_name(Method m);
Method parse_method(const std::string& name);

// Runs any method for one image and several prompts and returns unit
// normalized maps at (out_width, out_height).
std::vector<ImageExplanation> explain_image(const clip::ModelBundle& bundle,
                                            const Tensor& pixels,
                                            const std::vector<std::string>& prompts,
                                            Method method, const ImageExplainOptions& options);

}  // namespace geclip::explain
