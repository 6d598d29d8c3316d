#include "geclip/service/explain_service.h"

#include <set>

#include "geclip/clip/encoder.h"
#include "geclip/service/artifacts.h"

namespace geclip::service {

using nlohmann::json;

namespace {

const json& field(const json& doc, const char* name) { return doc.at(name); }

std::string get_string(const json& doc, const char* name) {
  const json& v = field(doc, name);
  if (!v.is_string()) throw RequestError(name, "expected a string");
  return v.get<std::string>();
}

std::vector<int> get_layers(const json& doc, const char* name) {
  const json& v = field(doc, name);
  if (!v.is_array()) throw RequestError(name, "expected an array of integers");
  std::vector<int> out;
  for (const json& e : v) {
    if (!e.is_number_integer()) throw RequestError(name, "expected an array of integers");
    out.push_back(e.get<int>());
  }
  return out;
}

template <typename Fn>
auto parse_enum(const json& doc, const char* name, Fn parse) {
  const std::string s = get_string(doc, name);
  try {
    return parse(s);
  } catch (const ContractError& e) {
    throw RequestError(name, e.what());
  }
}

void check_layers(const std::vector<int>& layers, std::size_t depth, const char* name) {
  try {
    explain::resolve_layers(layers, depth);
  } catch (const ContractError& e) {
    throw RequestError(name, e.what());
  }
}

}  // namespace

ExplainRequest parse_explain_options(const json& doc) {
  if (!doc.is_object()) throw RequestError("options", "expected a JSON object");
  static const std::set<std::string> known{"prompts", "method", "layers",       "text_layers",
                                           "lambda",  "head_mode", "text_saliency", "alpha", "colormap"};
  for (const auto& [key, value] : doc.items()) {
    if (!known.contains(key)) throw RequestError(key, "unknown field");
  }
  ExplainRequest r;
  if (!doc.contains("prompts")) throw RequestError("prompts", "required");
  const json& prompts = doc["prompts"];
  if (!prompts.is_array() || prompts.empty()) throw RequestError("prompts", "expected a non-empty array of strings");
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    if (!prompts[i].is_string()) throw RequestError("prompts[" + std::to_string(i) + "]", "expected a string");
    r.prompts.push_back(prompts[i].get<std::string>());
  }
  if (doc.contains("method")) r.method = parse_enum(doc, "method", explain::parse_method);
  const bool grad_eclip = r.method == explain::Method::kGradEclip;
  for (const char* name : {"layers", "lambda", "head_mode"}) {
    if (doc.contains(name) && !grad_eclip) {
      throw RequestError(name, std::string("only valid with method grad-eclip, not ") + explain::method_name(r.method));
    }
  }
  if (doc.contains("layers")) r.image_options.layers = get_layers(doc, "layers");
  if (doc.contains("lambda")) {
    r.image_options.lambda = r.text_options.lambda = parse_enum(doc, "lambda", explain::parse_lambda_mode);
  }
  if (doc.contains("head_mode")) {
    r.image_options.head_mode = r.text_options.head_mode = parse_enum(doc, "head_mode", clip::parse_head_mode);
  }
  if (doc.contains("text_saliency")) {
    if (!doc["text_saliency"].is_boolean()) throw RequestError("text_saliency", "expected a boolean");
    r.text_saliency = doc["text_saliency"].get<bool>();
  }
  if (doc.contains("text_layers")) {
    if (!r.text_saliency) throw RequestError("text_layers", "only valid with text_saliency enabled");
    r.text_options.layers = get_layers(doc, "text_layers");
  }
  if (doc.contains("alpha")) {
    const json& a = doc["alpha"];
    if (!a.is_number() || a.get<Real>() < 0 || a.get<Real>() > 1) {
      throw RequestError("alpha", "expected a number in [0, 1]");
    }
    r.alpha = a.get<Real>();
  }
  if (doc.contains("colormap")) r.colormap = parse_enum(doc, "colormap", parse_colormap);
  return r;
}

void validate_request(const ExplainRequest& r, const clip::ModelBundle& bundle) {
  if (r.image.width == 0 || r.image.height == 0) throw RequestError("image", "empty image");
  if (r.prompts.empty()) throw RequestError("prompts", "at least one prompt is required");
  for (std::size_t i = 0; i < r.prompts.size(); ++i) {
    if (clip::clean_text(r.prompts[i]).empty()) {
      throw RequestError("prompts[" + std::to_string(i) + "]", "prompt is empty");
    }
  }
  const auto& cfg = bundle.config();
  check_layers(r.image_options.layers, cfg.vision_layers, "layers");
  if (r.text_saliency && !r.text_options.layers.empty()) {
    check_layers(r.text_options.layers, cfg.text_layers, "text_layers");
  }
  if (!(r.alpha >= 0 && r.alpha <= 1)) throw RequestError("alpha", "expected a number in [0, 1]");
}

ExplainResult run_explain(const clip::ModelBundle& bundle, const ExplainRequest& r) {
  validate_request(r, bundle);
  const std::size_t size = bundle.config().image_size;
  ExplainResult out;
  out.input = clip::resize_and_crop(r.image, size);
  const Tensor pixels = clip::normalize_image(out.input, bundle.preprocess);
  explain::ImageExplainOptions io = r.image_options;
  io.out_width = io.out_height = size;
  const auto maps = explain::explain_image(bundle, pixels, r.prompts, r.method, io);
  const std::vector<Real> scores = score_texts(bundle, out.input, r.prompts);
  for (std::size_t i = 0; i < r.prompts.size(); ++i) {
    PromptResult pr;
    pr.prompt = r.prompts[i];
    pr.score = scores[i];
    pr.map = maps[i].map;
    pr.overlay_png = render_overlay_png(out.input, pr.map, r.alpha, r.colormap);
    if (r.text_saliency) pr.saliency = explain::grad_eclip_text(bundle, pixels, r.prompts[i], r.text_options).saliency;
    out.results.push_back(std::move(pr));
  }
  return out;
}

json explain_response(const clip::ModelBundle& bundle, const ExplainRequest& r, const ExplainResult& res) {
  json results = json::array();
  for (const auto& pr : res.results) {
    results.push_back({{"prompt", pr.prompt},
                       {"score", pr.score},
                       {"heatmap", heatmap_record(pr.map)},
                       {"overlay_png", base64_encode(pr.overlay_png)},
                       {"saliency", pr.saliency ? saliency_record(*pr.saliency) : json(nullptr)}});
  }
  return {{"model_id", bundle.model_id},
          {"method", explain::method_name(r.method)},
          {"lambda", explain::lambda_mode_name(r.image_options.lambda)},
          {"head_mode", clip::head_mode_name(r.image_options.head_mode)},
          {"results", results}};
}

std::vector<Real> score_texts(const clip::ModelBundle& bundle, const clip::Image& image,
                              const std::vector<std::string>& texts) {
  NoTapeScope no_tape;
  const Tensor img = clip::embed_image(bundle, image);
  std::vector<Real> out;
  for (const auto& t : texts) out.push_back(clip::matching_score(img, clip::embed_text(bundle, t)).item());
  return out;
}

}  // namespace geclip::service
