#include "geclip/eval/runner.h"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "geclip/clip/encoder.h"
#include "geclip/common/error.h"

namespace geclip::eval {

using nlohmann::json;
using clip::HeadMode;

const char* eval_task_name(EvalTask t) {
  switch (t) {
    case EvalTask::kZeroShot: return "zero-shot";
    case EvalTask::kRetrieval: return "retrieval";
    case EvalTask::kImageFaithfulness: return "image-faithfulness";
    case EvalTask::kTextFaithfulness: return "text-faithfulness";
    case EvalTask::kLocalization: return "localization";
    case EvalTask::kWordStats: return "word-stats";
  }
  return "?";
}

EvalTask parse_eval_task(const std::string& name) {
  for (EvalTask t : {EvalTask::kZeroShot, EvalTask::kRetrieval, EvalTask::kImageFaithfulness,
                     EvalTask::kTextFaithfulness, EvalTask::kLocalization, EvalTask::kWordStats}) {
    if (name == eval_task_name(t)) return t;
  }
  throw ContractError("unknown eval task '" + name +
                      "' (zero-shot, retrieval, image-faithfulness, text-faithfulness, "
                      "localization, word-stats)");
}

const char* target_name(Target t) { return t == Target::kGroundTruth ? "ground-truth" : "prediction"; }

Target parse_target(const std::string& name) {
  if (name == "ground-truth") return Target::kGroundTruth;
  if (name == "prediction") return Target::kPrediction;
  throw ContractError("unknown target '" + name + "' (ground-truth, prediction)");
}

void parallel_for(std::size_t n, unsigned workers, const std::function<void(std::size_t)>& fn) {
  workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::size_t failed_at = n;
  std::exception_ptr failure;
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (i < failed_at) {
            failed_at = i;
            failure = std::current_exception();
          }
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

namespace {

using Vec = std::vector<Real>;

Vec unit(const Tensor& t) {
  Vec v(t.data().begin(), t.data().end());
  Real n = 0;
  for (Real x : v) n += x * x;
  n = std::sqrt(n);
  if (n > 0)
    for (Real& x : v) x /= n;
  return v;
}

Real dot(const Vec& a, const Vec& b) {
  Real s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Position of `target` when `scores` is sorted descending with ties by index.
std::size_t rank_of(const Vec& scores, std::size_t target) {
  std::size_t r = 0;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (scores[j] > scores[target] || (scores[j] == scores[target] && j < target)) ++r;
  }
  return r;
}

Vec hits(std::size_t rank, const std::vector<std::size_t>& ks) {
  Vec out;
  for (std::size_t k : ks) out.push_back(rank < k ? 1.0 : 0.0);
  return out;
}

struct Context {
  const clip::ModelBundle& bundle;
  const DatasetManifest& manifest;
  const EvalOptions& opt;
  std::vector<std::size_t> items;  // record indices taking part
};

Tensor pixels_of(const Context& ctx, std::size_t record) {
  const clip::Image img = clip::read_image(ctx.manifest.records[record].image);
  return clip::preprocess_image(img, ctx.bundle.config().image_size, ctx.bundle.preprocess);
}

Vec image_embedding(const clip::ModelBundle& b, const Tensor& pixels) {
  NoTapeScope no_tape;
  return unit(clip::encode_image(b.model, pixels).embedding);
}

Vec text_embedding(const clip::ModelBundle& b, const std::string& text) {
  NoTapeScope no_tape;
  const clip::Tokenized tok = b.tokenizer.encode(text, b.config().context_length, true);
  return unit(clip::encode_text(b.model, tok).embedding);
}

std::vector<std::size_t> select(const DatasetManifest& m, const EvalOptions& opt,
                                bool need_label, bool need_caption, bool need_mask) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    const Record& r = m.records[i];
    if (need_label && !r.label) continue;
    if (need_caption && r.captions.empty()) continue;
    if (need_mask && !r.mask) continue;
    out.push_back(i);
    if (opt.limit > 0 && out.size() == opt.limit) break;
  }
  if (out.empty()) {
    std::string need = need_label ? "labels" : need_caption ? "captions" : need_mask ? "masks" : "records";
    if (need_mask && need_label) need = "masks";
    throw DataError("dataset has no records with " + need + " for this task");
  }
  return out;
}

std::vector<Vec> class_embeddings(const Context& ctx) {
  if (ctx.manifest.classes.empty()) throw DataError("dataset has no class table");
  std::vector<Vec> out(ctx.manifest.classes.size());
  parallel_for(out.size(), ctx.opt.workers, [&](std::size_t c) {
    out[c] = text_embedding(ctx.bundle, apply_template(ctx.opt.prompt_template, ctx.manifest.classes[c]));
  });
  return out;
}

Vec scores_against(const Vec& query, const std::vector<Vec>& keys) {
  Vec s(keys.size());
  for (std::size_t i = 0; i < keys.size(); ++i) s[i] = dot(query, keys[i]);
  return s;
}

json curve_json(const PerturbationCurve& c) {
  return json{{"direction", direction_name(c.direction)},
              {"fractions", c.fractions},
              {"values", c.values},
              {"auc", c.auc()},
              {"clamped", c.clamped}};
}

std::string k_suffix(std::size_t k) { return "@" + std::to_string(k); }

// --- tasks ------------------------------------------------------------------

void zero_shot(Context& ctx, EvalReport& rep) {
  ctx.items = select(ctx.manifest, ctx.opt, true, false, false);
  const auto classes = class_embeddings(ctx);
  std::vector<std::size_t> ranks(ctx.items.size());
  std::vector<std::size_t> top(ctx.items.size());
  parallel_for(ctx.items.size(), ctx.opt.workers, [&](std::size_t i) {
    const std::size_t r = ctx.items[i];
    const Vec s = scores_against(image_embedding(ctx.bundle, pixels_of(ctx, r)), classes);
    ranks[i] = rank_of(s, *ctx.manifest.records[r].label);
    top[i] = rank_scores(s).front();
  });
  json acc;
  for (std::size_t k : ctx.opt.ks) {
    std::size_t h = 0;
    for (std::size_t rk : ranks) h += rk < k;
    acc["top" + std::to_string(k)] = static_cast<Real>(h) / static_cast<Real>(ranks.size());
  }
  rep.summary["metrics"] = {{"accuracy", acc}, {"count", ranks.size()}};
  if (ctx.opt.per_item) {
    json items = json::array();
    for (std::size_t i = 0; i < ctx.items.size(); ++i) {
      items.push_back({{"record", ctx.items[i]},
                       {"label", *ctx.manifest.records[ctx.items[i]].label},
                       {"predicted", top[i]},
                       {"rank", ranks[i]}});
    }
    rep.summary["items"] = items;
  }
}

void retrieval(Context& ctx, EvalReport& rep) {
  ctx.items = select(ctx.manifest, ctx.opt, false, true, false);
  std::vector<Tensor> images(ctx.items.size()), texts(ctx.items.size());
  parallel_for(ctx.items.size(), ctx.opt.workers, [&](std::size_t i) {
    NoTapeScope no_tape;
    const Record& r = ctx.manifest.records[ctx.items[i]];
    images[i] = clip::encode_image(ctx.bundle.model, pixels_of(ctx, ctx.items[i])).embedding;
    texts[i] = clip::encode_text(ctx.bundle.model, ctx.bundle.tokenizer.encode(
                                                       r.captions.front(), ctx.bundle.config().context_length))
                   .embedding;
  });
  const RecallTable t = retrieval_recall(images, texts, ctx.opt.ks);
  json i2t, t2i;
  for (const auto& [k, v] : t.image_to_text) i2t["R" + k_suffix(k)] = v;
  for (const auto& [k, v] : t.text_to_image) t2i["R" + k_suffix(k)] = v;
  rep.summary["metrics"] = {{"image_to_text", i2t}, {"text_to_image", t2i}, {"count", images.size()}};
}

explain::ImageExplainOptions model_frame(const Context& ctx) {
  explain::ImageExplainOptions o = ctx.opt.image;
  o.out_width = o.out_height = ctx.bundle.config().image_size;
  return o;
}

// Accumulates per-item curves into dataset means, keyed by curve name.
struct CurveSet {
  std::vector<std::string> names;
  std::vector<std::vector<PerturbationCurve>> per_item;  // [item][curve]

  void finish(EvalReport& rep, bool per_item_json, const std::vector<std::size_t>& items) {
    json aucs;
    for (std::size_t c = 0; c < names.size(); ++c) {
      std::vector<PerturbationCurve> column;
      for (const auto& item : per_item) column.push_back(item[c]);
      const PerturbationCurve mean = mean_curve(column);
      aucs[names[c]] = mean.auc();
      rep.curves.push_back({names[c], mean});
    }
    rep.summary["metrics"]["auc"] = aucs;
    rep.summary["metrics"]["count"] = per_item.size();
    if (per_item_json) {
      json arr = json::array();
      for (std::size_t i = 0; i < per_item.size(); ++i) {
        json curves;
        for (std::size_t c = 0; c < names.size(); ++c) curves[names[c]] = curve_json(per_item[i][c]);
        arr.push_back({{"record", items[i]}, {"curves", curves}});
      }
      rep.summary["items"] = arr;
    }
  }
};

void image_faithfulness(Context& ctx, EvalReport& rep) {
  const DatasetManifest& m = ctx.manifest;
  const bool classification =
      !m.classes.empty() && std::all_of(m.records.begin(), m.records.end(), [](const Record& r) { return r.label.has_value(); });
  ctx.items = select(m, ctx.opt, classification, !classification, false);
  const std::size_t n = ctx.items.size();
  const clip::Preprocess& pre = ctx.bundle.preprocess;
  const auto eo = model_frame(ctx);
  CurveSet set;
  for (Direction d : ctx.opt.directions) {
    for (const char* task : classification ? std::vector<const char*>{""} : std::vector<const char*>{"-IR", "-TR"}) {
      for (std::size_t k : ctx.opt.ks) set.names.push_back(std::string(direction_name(d)) + task + k_suffix(k));
    }
  }
  set.per_item.resize(n);
  rep.summary["mode"] = classification ? "classification" : "retrieval";

  if (classification) {
    rep.summary["target"] = target_name(ctx.opt.target);
    const auto classes = class_embeddings(ctx);
    parallel_for(n, ctx.opt.workers, [&](std::size_t i) {
      const std::size_t rec = ctx.items[i];
      const std::size_t label = *m.records[rec].label;
      const Tensor px = pixels_of(ctx, rec);
      std::size_t target = label;
      if (ctx.opt.target == Target::kPrediction) {
        target = rank_scores(scores_against(image_embedding(ctx.bundle, px), classes)).front();
      }
      const std::string prompt = apply_template(ctx.opt.prompt_template, m.classes[target]);
      const auto heat = explain::explain_image(ctx.bundle, px, {prompt}, ctx.opt.method, eo).front().map;
      PerturbOptions po = ctx.opt.perturb;
      po.seed = ctx.opt.seed ^ rec;
      for (Direction d : ctx.opt.directions) {
        auto curves = perturbation_curves(px, heat, d, po, pre, [&](const Tensor& p) {
          return hits(rank_of(scores_against(image_embedding(ctx.bundle, p), classes), label), ctx.opt.ks);
        });
        for (auto& c : curves) set.per_item[i].push_back(std::move(c));
      }
    });
  } else {
    std::vector<Vec> images(n), texts(n);
    std::vector<Tensor> pixels(n);
    parallel_for(n, ctx.opt.workers, [&](std::size_t i) {
      pixels[i] = pixels_of(ctx, ctx.items[i]);
      images[i] = image_embedding(ctx.bundle, pixels[i]);
      texts[i] = text_embedding(ctx.bundle, m.records[ctx.items[i]].captions.front());
    });
    parallel_for(n, ctx.opt.workers, [&](std::size_t i) {
      const std::size_t rec = ctx.items[i];
      const auto heat =
          explain::explain_image(ctx.bundle, pixels[i], {m.records[rec].captions.front()}, ctx.opt.method, eo)
              .front()
              .map;
      PerturbOptions po = ctx.opt.perturb;
      po.seed = ctx.opt.seed ^ rec;
      for (Direction d : ctx.opt.directions) {
        auto curves = perturbation_curves(pixels[i], heat, d, po, pre, [&](const Tensor& p) {
          const Vec img = image_embedding(ctx.bundle, p);
          // Image retrieval: caption i queries the gallery holding the perturbed image.
          Vec ir(n);
          for (std::size_t j = 0; j < n; ++j) ir[j] = dot(texts[i], j == i ? img : images[j]);
          Vec out = hits(rank_of(ir, i), ctx.opt.ks);
          const Vec tr = hits(rank_of(scores_against(img, texts), i), ctx.opt.ks);
          out.insert(out.end(), tr.begin(), tr.end());
          return out;
        });
        for (auto& c : curves) set.per_item[i].push_back(std::move(c));
      }
    });
  }
  set.finish(rep, ctx.opt.per_item, ctx.items);
}

// Text curves end early for short captions; hold the last value so every
// caption contributes `steps` + 1 samples at fractions k / steps.
PerturbationCurve pad_text_curve(const PerturbationCurve& c, std::size_t steps) {
  PerturbationCurve out;
  out.direction = c.direction;
  out.clamped = c.clamped;
  for (std::size_t k = 0; k <= steps; ++k) {
    out.fractions.push_back(static_cast<Real>(k) / static_cast<Real>(steps));
    out.values.push_back(c.values[std::min(k, c.values.size() - 1)]);
  }
  return out;
}

std::vector<explain::TextSaliency> text_saliencies(Context& ctx, std::vector<Tensor>* pixels_out) {
  if (ctx.opt.method != explain::Method::kGradEclip) {
    throw ContractError(std::string("text explanations support only grad-eclip, not ") +
                        explain::method_name(ctx.opt.method));
  }
  const std::size_t n = ctx.items.size();
  std::vector<explain::TextSaliency> out(n);
  if (pixels_out) pixels_out->resize(n);
  parallel_for(n, ctx.opt.workers, [&](std::size_t i) {
    const Tensor px = pixels_of(ctx, ctx.items[i]);
    out[i] = explain::grad_eclip_text(ctx.bundle, px, ctx.manifest.records[ctx.items[i]].captions.front(),
                                      ctx.opt.text)
                 .saliency;
    if (pixels_out) (*pixels_out)[i] = px;
  });
  return out;
}

void text_faithfulness(Context& ctx, EvalReport& rep) {
  if (ctx.opt.text_steps == 0) throw ContractError("text faithfulness needs at least one step");
  ctx.items = select(ctx.manifest, ctx.opt, false, true, false);
  const std::size_t n = ctx.items.size();
  std::vector<Tensor> pixels;
  const auto saliencies = text_saliencies(ctx, &pixels);
  std::vector<Vec> images(n), texts(n);
  parallel_for(n, ctx.opt.workers, [&](std::size_t i) {
    images[i] = image_embedding(ctx.bundle, pixels[i]);
    texts[i] = text_embedding(ctx.bundle, ctx.manifest.records[ctx.items[i]].captions.front());
  });
  CurveSet set;
  for (Direction d : ctx.opt.directions) {
    set.names.push_back(std::string(direction_name(d)) + "-IR@1");
    set.names.push_back(std::string(direction_name(d)) + "-TR@1");
  }
  set.per_item.resize(n);
  std::vector<int> clamped(n, 0);
  parallel_for(n, ctx.opt.workers, [&](std::size_t i) {
    const auto& s = saliencies[i];
    for (Direction d : ctx.opt.directions) {
      auto curves = text_perturbation_curves(s.words, s.importance, d, ctx.opt.text_steps, [&](const std::string& t) {
        const Vec txt = text_embedding(ctx.bundle, t);
        Vec tr(n);
        for (std::size_t j = 0; j < n; ++j) tr[j] = dot(images[i], j == i ? txt : texts[j]);
        return Vec{rank_of(scores_against(txt, images), i) < 1 ? 1.0 : 0.0, rank_of(tr, i) < 1 ? 1.0 : 0.0};
      });
      for (auto& c : curves) {
        clamped[i] = clamped[i] || c.clamped;
        set.per_item[i].push_back(pad_text_curve(c, ctx.opt.text_steps));
      }
    }
  });
  set.finish(rep, ctx.opt.per_item, ctx.items);
  rep.summary["metrics"]["clamped_captions"] = std::count(clamped.begin(), clamped.end(), 1);
}

void localization(Context& ctx, EvalReport& rep) {
  ctx.items = select(ctx.manifest, ctx.opt, false, false, true);
  const std::size_t n = ctx.items.size();
  const std::size_t size = ctx.bundle.config().image_size;
  const auto eo = model_frame(ctx);
  std::vector<std::optional<LocalizationResult>> results(n);
  parallel_for(n, ctx.opt.workers, [&](std::size_t i) {
    const Record& r = ctx.manifest.records[ctx.items[i]];
    std::string prompt;
    if (r.label && !ctx.manifest.classes.empty()) {
      prompt = apply_template(ctx.opt.prompt_template, ctx.manifest.classes[*r.label]);
    } else if (!r.captions.empty()) {
      prompt = r.captions.front();
    } else {
      throw DataError("record " + std::to_string(ctx.items[i]) + " has a mask but no label or caption");
    }
    const clip::Mask mask = crop_mask(clip::read_mask(*r.mask), size);
    if (mask.count() == 0) return;  // object lies outside the center crop
    const auto heat = explain::explain_image(ctx.bundle, pixels_of(ctx, ctx.items[i]), {prompt},
                                             ctx.opt.method, eo)
                          .front()
                          .map;
    results[i] = segmentation_metrics(heat, mask, ctx.opt.threshold);
  });
  Real pg = 0, epg = 0, acc = 0, ap = 0, iou = 0;
  std::size_t used = 0;
  json items = json::array();
  for (std::size_t i = 0; i < n; ++i) {
    if (!results[i]) continue;
    const auto& r = *results[i];
    ++used;
    pg += r.pg_hit;
    epg += r.energy_pg;
    acc += r.pixel_acc;
    ap += r.ap;
    iou += r.mask_iou;
    items.push_back({{"record", ctx.items[i]}, {"pg_hit", r.pg_hit}, {"energy_pg", r.energy_pg},
                     {"pixel_acc", r.pixel_acc}, {"ap", r.ap}, {"mask_iou", r.mask_iou}});
  }
  if (used == 0) throw DataError("no mask overlaps the center crop");
  const Real u = static_cast<Real>(used);
  rep.summary["metrics"] = {{"pg", pg / u},        {"energy_pg", epg / u}, {"pixel_acc", acc / u},
                            {"ap", ap / u},        {"mask_iou", iou / u},  {"count", used},
                            {"skipped_empty_masks", n - used}};
  if (ctx.opt.per_item) rep.summary["items"] = items;
}

json regression_json(const std::optional<Regression>& r) {
  if (!r) return nullptr;
  return {{"slope", r->slope}, {"intercept", r->intercept}, {"r2", r->r2}, {"n", r->n}};
}

void word_stats(Context& ctx, EvalReport& rep) {
  ctx.items = select(ctx.manifest, ctx.opt, false, true, false);
  const auto saliencies = text_saliencies(ctx, nullptr);
  const WordStats st = word_importance_stats(saliencies, ctx.opt.concreteness ? &*ctx.opt.concreteness : nullptr,
                                             ctx.opt.frequency ? &*ctx.opt.frequency : nullptr);
  json words = json::array();
  for (const auto& [w, v] : st.mean_importance) {
    words.push_back({{"word", w}, {"mean_importance", v}, {"count", st.count.at(w)}});
  }
  rep.summary["metrics"] = {{"words", words},
                            {"count", saliencies.size()},
                            {"concreteness_fit", regression_json(st.concreteness_fit)},
                            {"frequency_fit", regression_json(st.frequency_fit)}};
  if (ctx.opt.per_item) {
    json items = json::array();
    for (std::size_t i = 0; i < saliencies.size(); ++i) {
      items.push_back({{"record", ctx.items[i]},
                       {"words", saliencies[i].words},
                       {"importance", saliencies[i].importance}});
    }
    rep.summary["items"] = items;
  }
}

json options_json(const EvalOptions& o) {
  json dirs = json::array();
  for (Direction d : o.directions) dirs.push_back(direction_name(d));
  return {{"method", explain::method_name(o.method)},
          {"image_layers", o.image.layers},
          {"text_layers", o.text.layers},
          {"lambda", explain::lambda_mode_name(o.image.lambda)},
          {"head_mode", clip::head_mode_name(o.image.head_mode)},
          {"steps", o.perturb.steps},
          {"step_fraction", o.perturb.step_fraction},
          {"directions", dirs},
          {"template", o.prompt_template},
          {"ks", o.ks},
          {"text_steps", o.text_steps},
          {"threshold", o.threshold.kind == ThresholdRule::Kind::kMean ? json("mean") : json(o.threshold.value)},
          {"limit", o.limit}};
}

}  // namespace

EvalReport run_eval(const clip::ModelBundle& bundle, const DatasetManifest& manifest, EvalTask task,
                    const EvalOptions& opt) {
  if (opt.ks.empty()) throw ContractError("eval: need at least one k");
  for (std::size_t k : opt.ks)
    if (k == 0) throw ContractError("eval: k must be positive");
  if (opt.directions.empty()) throw ContractError("eval: need at least one direction");
  EvalReport rep;
  rep.summary = {{"task", eval_task_name(task)},
                 {"dataset", {{"split", manifest.split}, {"records", manifest.records.size()}}},
                 {"model", {{"id", bundle.model_id}, {"hash", bundle.content_hash}}},
                 {"seed", opt.seed},
                 {"options", options_json(opt)}};
  Context ctx{bundle, manifest, opt, {}};
  switch (task) {
    case EvalTask::kZeroShot: zero_shot(ctx, rep); break;
    case EvalTask::kRetrieval: retrieval(ctx, rep); break;
    case EvalTask::kImageFaithfulness: image_faithfulness(ctx, rep); break;
    case EvalTask::kTextFaithfulness: text_faithfulness(ctx, rep); break;
    case EvalTask::kLocalization: localization(ctx, rep); break;
    case EvalTask::kWordStats: word_stats(ctx, rep); break;
  }
  // Records lacking what the task needs (label, caption, mask) are skipped.
  const bool capped = opt.limit > 0 && ctx.items.size() == opt.limit;
  const std::size_t scanned = capped ? ctx.items.back() + 1 : manifest.records.size();
  rep.summary["skipped_records"] = scanned - ctx.items.size();
  return rep;
}

void write_curves_csv(const std::filesystem::path& path, const std::vector<NamedCurve>& curves) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "curve,step_fraction,value\n";
  char buf[64];
  for (const auto& nc : curves) {
    for (std::size_t i = 0; i < nc.curve.values.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g,%.17g", nc.curve.fractions[i], nc.curve.values[i]);
      out << nc.name << "," << buf << "\n";
    }
  }
  if (!out) throw DataError("failed writing " + path.string());
}

std::map<std::string, Real> load_word_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open word table " + path.string());
  std::map<std::string, Real> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const std::size_t sep = line.find_first_of("\t,");
    const std::string where = path.filename().string() + ":" + std::to_string(lineno);
    if (sep == std::string::npos) throw DataError(where + ": expected 'word<TAB>value'");
    try {
      std::size_t used = 0;
      const std::string num = line.substr(sep + 1);
      const Real v = std::stod(num, &used);
      if (used != num.size() || !std::isfinite(v)) throw std::invalid_argument(num);
      out[line.substr(0, sep)] = v;
    } catch (const std::exception&) {
      throw DataError(where + ": bad value '" + line.substr(sep + 1) + "'");
    }
  }
  return out;
}

}  // namespace geclip::eval
