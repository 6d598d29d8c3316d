#pragma once

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "geclip/clip/model.h"
#include "geclip/common/error.h"
#include "geclip/explain/explain.h"
#include "geclip/service/overlay.h"

namespace geclip::service {

// Invalid request option; `field` names the offending input (e.g.
// "prompts[1]", "lambda").
class RequestError : public ContractError {
 public:
  RequestError(std::string field, const std::string& message)
      : ContractError(field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

struct ExplainRequest {
  clip::Image image;
  std::vector<std::string> prompts;
  explain::Method method = explain::Method::kGradEclip;
  explain::ImageExplainOptions image_options;
  explain::TextExplainOptions text_options;
  bool text_saliency = true;  // word importances are always Grad-ECLIP
  Real alpha = 0.5;
  Colormap colormap = Colormap::kJet;
};

// Options document fields: prompts (required), method, layers, text_layers,
// lambda, head_mode, text_saliency, alpha, colormap. Unknown fields and
// options that do not apply to the chosen method are rejected.
ExplainRequest parse_explain_options(const nlohmann::json& doc);
// Checks the request against a model (layer ranges, prompt text). Runs before
// any compute.
void validate_request(const ExplainRequest& request, const clip::ModelBundle& bundle);

struct PromptResult {
  std::string prompt;
  Real score = 0;        // cosine of the multi-head embeddings
  explain::HeatMap map;  // model input resolution, unit-normalized
  std::vector<std::uint8_t> overlay_png;
  std::optional<explain::TextSaliency> saliency;
};

struct ExplainResult {
  clip::Image input;  // resized and center-cropped to the model resolution
  std::vector<PromptResult> results;  // parallel to the request prompts
};

ExplainResult run_explain(const clip::ModelBundle& bundle, const ExplainRequest& request);

// {model_id, method, results: [{prompt, score, heatmap, overlay_png (base64),
// saliency}]}.
nlohmann::json explain_response(const clip::ModelBundle& bundle, const ExplainRequest& request,
                                const ExplainResult& result);

// Multi-head cosine score of the image with each text.
std::vector<Real> score_texts(const clip::ModelBundle& bundle, const clip::Image& image,
                              const std::vector<std::string>& texts);

}  // namespace geclip::service
