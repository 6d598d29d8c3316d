#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "geclip/clip/model.h"

namespace geclip::clip {

struct EncodeOptions {
  HeadMode head_mode = HeadMode::kMulti;
  bool capture = false;
  // When >= 0 the residual input of this layer becomes a fresh gradient leaf,
  // so backward() stops there instead of reaching the weights or the input.
  // Requires an active tape.
  int grad_from_layer = -1;
  // Image only: also run the last layer with attention mixing bypassed and
  // return per-patch embeddings.
  bool dense = false;
  // Intervention point called with (layer, site, tensor) where site is "x"
  // (residual input) or "o" (attention output); the hook may replace the
  // tensor. Used to inject perturbations in tests.
  std::function<void(std::size_t, const char*, Tensor&)> hook;
};

// Activations of one residual block. Rows are token positions.
struct LayerTrace {
  Tensor x;     // residual input [T x W] (live; a gradient leaf at grad_from_layer)
  Tensor q;     // [T x W], detached
  Tensor k;     // [T x W], detached
  Tensor v;     // values passed through the output projection [T x W], detached
  Tensor o;     // attention output after the output projection [T x W] (live)
  Tensor attn;  // softmax weights [heads x T x T], detached
};

struct ActivationTrace {
  HeadMode head_mode = HeadMode::kMulti;
  std::size_t heads = 1;       // softmax groups used in this forward
  std::size_t query_token = 0;  // [cls] for images, [eos] for text
  bool truncated = false;
  std::vector<LayerTrace> layers;
};

struct EncodeResult {
  Tensor embedding;  // [D], not normalized
  std::optional<ActivationTrace> trace;
  Tensor dense;  // [hw x D] when requested
};

// Splits a preprocessed [3 x S x S] image into [hw x 3p^2] patch rows
// ordered (channel, row, column) to match the patch-embedding weight layout.
Tensor patchify(const Tensor& image, std::size_t patch_size);

EncodeResult encode_image(const ClipModel& model, const Tensor& image,
                          const EncodeOptions& options = {});
EncodeResult encode_text(const ClipModel& model, const Tokenized& tokens,
                         const EncodeOptions& options = {});

// Cosine similarity of two embeddings (differentiable).
Tensor matching_score(const Tensor& image_embedding, const Tensor& text_embedding);

// Convenience wrappers without traces or gradients.
Tensor embed_image(const ModelBundle& bundle, const Image& image,
                   HeadMode mode = HeadMode::kMulti);
Tensor embed_text(const ModelBundle& bundle, const std::string& text,
                  HeadMode mode = HeadMode::kMulti);

}  // namespace geclip::clip
