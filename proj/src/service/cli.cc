#include "geclip/service/cli.h"

#include <pthread.h>

#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"

#include "geclip/common/error.h"
#include "geclip/eval/runner.h"
#include "geclip/finetune/finetune.h"
#include "geclip/finetune/toy_data.h"
#include "geclip/service/artifacts.h"
#include "geclip/service/convert.h"
#include "geclip/service/explain_service.h"
#include "geclip/service/server.h"

namespace geclip::service {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

class UsageError : public Error {
 public:
  using Error::Error;
};

template <typename Fn>
auto usage_guard(const std::string& flag, Fn fn) {
  try {
    return fn();
  } catch (const ContractError& e) {
    throw UsageError(flag + ": " + e.what());
  }
}

std::string fmt(Real v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::shared_ptr<const clip::ModelBundle> load_bundle(const std::string& path) {
  if (path.empty()) throw UsageError("--model is required (or set GECLIP_MODEL)");
  return clip::load_model_bundle(path);
}

void add_model_option(CLI::App* cmd, std::string& path) {
  cmd->add_option("-m,--model", path, "Model bundle container")->envname("GECLIP_MODEL");
}

const std::vector<std::string> kMethods{"grad-eclip", "raw-attention", "rollout", "grad-cam"};
const std::vector<std::string> kLambdas{"loosened", "softmax", "ones"};
const std::vector<std::string> kHeadModes{"single", "multi"};

// --- explain -------------------------------------------------------------------

struct ExplainArgs {
  std::string model, image, out, method, lambda, head_mode, colormap;
  std::vector<std::string> texts;
  std::vector<int> layers, text_layers;
  Real alpha = 0.5;
  bool no_text = false;
};

int cmd_explain(const ExplainArgs& a, CLI::App* cmd, std::ostream& out) {
  json doc = {{"prompts", a.texts}};
  if (cmd->count("--method")) doc["method"] = a.method;
  if (cmd->count("--layers")) doc["layers"] = a.layers;
  if (cmd->count("--text-layers")) doc["text_layers"] = a.text_layers;
  if (cmd->count("--lambda")) doc["lambda"] = a.lambda;
  if (cmd->count("--head-mode")) doc["head_mode"] = a.head_mode;
  if (cmd->count("--alpha")) doc["alpha"] = a.alpha;
  if (cmd->count("--colormap")) doc["colormap"] = a.colormap;
  if (a.no_text) doc["text_saliency"] = false;
  ExplainRequest req = parse_explain_options(doc);
  const auto bundle = load_bundle(a.model);
  req.image = clip::read_image(a.image);
  validate_request(req, *bundle);

  OutputTracker outputs;
  outputs.make_dir(a.out);
  const ExplainResult res = run_explain(*bundle, req);
  json entries = json::array();
  for (std::size_t i = 0; i < res.results.size(); ++i) {
    const PromptResult& pr = res.results[i];
    const std::string idx = std::to_string(i);
    json files = json::array();
    const fs::path overlay = outputs.track(fs::path(a.out) / ("overlay_" + idx + ".png"));
    clip::write_file_bytes(overlay, pr.overlay_png);
    files.push_back(overlay.filename().string());
    const fs::path heat = outputs.track(fs::path(a.out) / ("heatmap_" + idx + ".json"));
    write_json(heat, heatmap_record(pr.map));
    files.push_back(heat.filename().string());
    if (pr.saliency) {
      const fs::path sal = outputs.track(fs::path(a.out) / ("saliency_" + idx + ".json"));
      write_json(sal, json{{"prompt", pr.prompt}, {"score", pr.score}, {"saliency", saliency_record(*pr.saliency)}});
      files.push_back(sal.filename().string());
    }
    entries.push_back({{"prompt", pr.prompt}, {"score", pr.score}, {"files", files}});
  }
  json options = doc;
  options["image"] = fs::path(a.image).filename().string();
  json manifest = run_manifest("explain", options, 0, bundle.get());
  manifest["outputs"] = entries;
  write_json(outputs.track(fs::path(a.out) / "run.json"), manifest);
  outputs.commit();
  for (const auto& pr : res.results) out << fmt(pr.score) << "\t" << pr.prompt << "\n";
  return kExitOk;
}

// --- eval ------------------------------------------------------------------------

struct EvalArgs {
  std::string model, manifest, out, task, method = "grad-eclip", lambda = "loosened", head_mode = "single";
  std::string template_ = "a photo of a {}.", threshold = "mean", target = "ground-truth";
  std::string concreteness, frequency;
  std::vector<std::string> directions{"deletion", "insertion"};
  std::vector<int> layers, text_layers;
  std::vector<std::size_t> ks{1, 5};
  std::size_t steps = 100, text_steps = 5, limit = 0;
  Real step_frac = 0.005;
  unsigned workers = 1;
  std::uint64_t seed = 0;
};

void flatten(const json& j, const std::string& prefix, std::vector<std::pair<std::string, std::string>>& out) {
  for (const auto& [k, v] : j.items()) {
    const std::string key = prefix.empty() ? k : prefix + "." + k;
    if (v.is_object()) {
      flatten(v, key, out);
    } else if (v.is_number_float()) {
      out.emplace_back(key, fmt(v.get<Real>()));
    } else if (v.is_number() || v.is_boolean()) {
      out.emplace_back(key, v.dump());
    } else if (v.is_string()) {
      out.emplace_back(key, v.get<std::string>());
    } else if (v.is_null()) {
      out.emplace_back(key, "");
    }
  }
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

void write_items_csv(const fs::path& path, const json& items) {
  std::vector<std::string> columns;
  std::vector<std::map<std::string, std::string>> rows;
  for (const json& item : items) {
    std::vector<std::pair<std::string, std::string>> cells;
    flatten(item, "", cells);
    auto& row = rows.emplace_back();
    for (auto& [k, v] : cells) {
      if (std::find(columns.begin(), columns.end(), k) == columns.end()) columns.push_back(k);
      row[k] = v;
    }
  }
  const auto rec = std::find(columns.begin(), columns.end(), "record");
  if (rec != columns.end()) std::rotate(columns.begin(), rec, rec + 1);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path.string());
  for (std::size_t c = 0; c < columns.size(); ++c) f << (c ? "," : "") << csv_field(columns[c]);
  f << "\n";
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < columns.size(); ++c) {
      const auto it = row.find(columns[c]);
      f << (c ? "," : "") << (it == row.end() ? "" : csv_field(it->second));
    }
    f << "\n";
  }
  if (!f) throw DataError("failed writing " + path.string());
}

int cmd_eval(const EvalArgs& a, CLI::App* cmd, std::ostream& out) {
  eval::EvalOptions o;
  const eval::EvalTask task = usage_guard("--task", [&] { return eval::parse_eval_task(a.task); });
  o.method = explain::parse_method(a.method);
  o.image.lambda = o.text.lambda = explain::parse_lambda_mode(a.lambda);
  o.image.head_mode = o.text.head_mode = clip::parse_head_mode(a.head_mode);
  if (cmd->count("--layers")) o.image.layers = a.layers;
  o.text.layers = a.text_layers;
  o.perturb.steps = a.steps;
  o.perturb.step_fraction = a.step_frac;
  o.perturb.seed = a.seed;
  o.directions.clear();
  for (const auto& d : a.directions) o.directions.push_back(d == "deletion" ? eval::Direction::kDeletion
                                                                             : eval::Direction::kInsertion);
  o.prompt_template = a.template_;
  o.ks = a.ks;
  o.text_steps = a.text_steps;
  o.threshold = usage_guard("--threshold", [&] { return eval::parse_threshold_rule(a.threshold); });
  o.target = eval::parse_target(a.target);
  o.limit = a.limit;
  o.workers = std::max(1u, a.workers);
  o.seed = a.seed;
  o.per_item = true;
  if (!a.concreteness.empty()) o.concreteness = eval::load_word_table(a.concreteness);
  if (!a.frequency.empty()) o.frequency = eval::load_word_table(a.frequency);
  if (o.perturb.steps * o.perturb.step_fraction > 1 + 1e-12) {
    throw UsageError("--steps x --step-frac exceeds the whole image");
  }
  if (o.method != explain::Method::kGradEclip &&
      (cmd->count("--lambda") || cmd->count("--layers") || cmd->count("--head-mode"))) {
    throw UsageError("--lambda, --layers and --head-mode only apply to --method grad-eclip");
  }

  const auto bundle = load_bundle(a.model);
  usage_guard("--layers", [&] { return explain::resolve_layers(o.image.layers, bundle->config().vision_layers); });
  if (!o.text.layers.empty()) {
    usage_guard("--text-layers", [&] { return explain::resolve_layers(o.text.layers, bundle->config().text_layers); });
  }
  const eval::DatasetManifest manifest = eval::load_manifest(a.manifest);

  OutputTracker outputs;
  outputs.make_dir(a.out);
  eval::EvalReport rep = eval::run_eval(*bundle, manifest, task, o);
  json items = rep.summary.contains("items") ? rep.summary["items"] : json::array();
  rep.summary.erase("items");
  write_json(outputs.track(fs::path(a.out) / "summary.json"), rep.summary);
  write_items_csv(outputs.track(fs::path(a.out) / "items.csv"), items);
  if (!rep.curves.empty()) eval::write_curves_csv(outputs.track(fs::path(a.out) / "curves.csv"), rep.curves);
  json options = rep.summary["options"];
  options["manifest"] = fs::path(a.manifest).filename().string();
  write_json(outputs.track(fs::path(a.out) / "run.json"), run_manifest("eval", options, a.seed, bundle.get()));
  outputs.commit();
  out << rep.summary["metrics"].dump() << "\n";
  return kExitOk;
}

// --- finetune ------------------------------------------------------------------------

struct FinetuneArgs {
  std::string model, manifest, val, out, template_ = "a {}";
  std::size_t steps = 200, batch = 8, max_phrases = 4, snapshot_every = 0;
  Real lr = 1e-5, weight_decay = 0.1, local_weight = 1, tau = 0.07;
  bool global_only = false, train_tau = false;
  std::uint64_t seed = 0;
};

std::vector<finetune::TrainPair> training_pairs(const clip::ModelBundle& b, const eval::DatasetManifest& m) {
  std::vector<finetune::TrainPair> out;
  for (const auto& r : m.records) {
    if (r.captions.empty()) continue;
    const Tensor px = clip::preprocess_image(clip::read_image(r.image), b.config().image_size, b.preprocess);
    for (const auto& c : r.captions) out.push_back({px, c});
  }
  if (out.empty()) throw DataError(m.root.string() + ": no captioned records to train on");
  return out;
}

json accuracy_json(const finetune::RegionAccuracy& acc) {
  return {{"top1", acc.top1}, {"top5", acc.top5}, {"regions", acc.regions}, {"expanded", acc.expanded}};
}

int cmd_finetune(const FinetuneArgs& a, std::ostream& out) {
  if (a.steps == 0 || a.batch == 0) throw UsageError("--steps and --batch must be positive");
  if (!(a.lr >= 0) || !(a.tau > 0)) throw UsageError("--lr must be >= 0 and --tau > 0");
  const auto bundle = load_bundle(a.model);
  const eval::DatasetManifest train_set = eval::load_manifest(a.manifest);
  std::optional<eval::DatasetManifest> val;
  if (!a.val.empty()) val = eval::load_manifest(a.val);
  const auto pairs = training_pairs(*bundle, train_set);

  finetune::FinetuneOptions fo;
  fo.optim.lr = a.lr;
  fo.optim.weight_decay = a.weight_decay;
  fo.local_loss = !a.global_only;
  fo.local_weight = a.local_weight;
  fo.max_phrases = a.max_phrases;
  fo.train_tau = a.train_tau;
  finetune::TrainRunOptions run;
  run.steps = a.steps;
  run.batch_size = a.batch;

  OutputTracker outputs;
  outputs.make_dir(a.out);
  json report = {{"train_pairs", pairs.size()}};
  if (val) report["region_accuracy_before"] = accuracy_json(finetune::region_accuracy(*bundle, *val, a.template_));

  finetune::TrainState state = finetune::init_train_state(bundle->model, a.tau, a.seed);
  clip::ModelBundle trained{clip::ClipModel{}, bundle->tokenizer, bundle->preprocess, bundle->model_id + "-ft", ""};
  auto save = [&](const fs::path& path) {
    trained.model = state.model.clone();
    outputs.track(path);
    outputs.track(path.parent_path() / (path.stem().string() + ".vocab.txt"));
    outputs.track(path.parent_path() / (path.stem().string() + ".merges.txt"));
    clip::save_model_bundle(path, trained);
  };
  const auto log = finetune::train(state, bundle->tokenizer, pairs, fo, run, [&](const finetune::StepResult& r) {
    if (a.snapshot_every > 0 && r.step % a.snapshot_every == 0 && r.step < a.steps) {
      char name[32];
      std::snprintf(name, sizeof name, "snapshot_%06zu.gecw", r.step);
      save(fs::path(a.out) / name);
    }
  });
  {
    const fs::path p = outputs.track(fs::path(a.out) / "loss.csv");
    std::ofstream f(p, std::ios::binary);
    f << finetune::loss_log_csv(log);
    if (!f) throw DataError("failed writing " + p.string());
  }
  save(fs::path(a.out) / "model.gecw");
  const Real first = log.front().total, last = log.back().total;
  report["first_loss"] = first;
  report["last_loss"] = last;
  report["loss_drop"] = first > 0 ? (first - last) / first : 0.0;
  report["tau"] = state.tau();
  if (val) report["region_accuracy_after"] = accuracy_json(finetune::region_accuracy(trained, *val, a.template_));
  write_json(outputs.track(fs::path(a.out) / "report.json"), report);
  const json options = {{"manifest", fs::path(a.manifest).filename().string()},
                        {"val", a.val.empty() ? json(nullptr) : json(fs::path(a.val).filename().string())},
                        {"steps", a.steps},
                        {"batch", a.batch},
                        {"lr", a.lr},
                        {"weight_decay", a.weight_decay},
                        {"local_weight", a.local_weight},
                        {"global_only", a.global_only},
                        {"max_phrases", a.max_phrases},
                        {"tau", a.tau},
                        {"train_tau", a.train_tau},
                        {"template", a.template_},
                        {"snapshot_every", a.snapshot_every}};
  write_json(outputs.track(fs::path(a.out) / "run.json"), run_manifest("finetune", options, a.seed, bundle.get()));
  outputs.commit();
  out << "loss " << fmt(first) << " -> " << fmt(last) << "\n";
  return kExitOk;
}

// --- gen-toy-data -----------------------------------------------------------------------

struct ToyArgs {
  std::string out;
  std::size_t count = 240, size = 32;
  std::uint64_t seed = 0;
  std::optional<std::uint64_t> model_seed;
  bool no_model = false;
};

int cmd_gen_toy(const ToyArgs& a, std::ostream& out) {
  if (a.count == 0) throw UsageError("--count must be positive");
  if (a.size < 16 || a.size % 4 != 0) throw UsageError("--size must be a multiple of 4, at least 16");
  OutputTracker outputs;
  outputs.make_dir(a.out);
  finetune::ToyOptions o;
  o.count = a.count;
  o.image_size = a.size;
  o.seed = a.seed;
  // The dataset writer owns these paths; track them so a failure cleans up.
  outputs.make_dir(fs::path(a.out) / "images");
  outputs.track(fs::path(a.out) / "manifest.tsv");
  outputs.track(fs::path(a.out) / "classes.txt");
  for (std::size_t i = 0; i < a.count; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "%04zu.ppm", i);
    outputs.track(fs::path(a.out) / "images" / name);
  }
  const fs::path manifest = finetune::write_toy_dataset(a.out, o);
  json options = {{"count", a.count}, {"size", a.size}};
  if (!a.no_model) {
    const std::uint64_t ms = a.model_seed.value_or(a.seed);
    const auto bundle = finetune::toy_bundle(ms, a.size);
    for (const char* f : {"toy_model.gecw", "toy_model.vocab.txt", "toy_model.merges.txt"}) {
      outputs.track(fs::path(a.out) / f);
    }
    clip::save_model_bundle(fs::path(a.out) / "toy_model.gecw", *bundle);
    options["model_seed"] = ms;
  }
  write_json(outputs.track(fs::path(a.out) / "run.json"), run_manifest("gen-toy-data", options, a.seed, nullptr));
  outputs.commit();
  out << manifest.string() << "\n";
  return kExitOk;
}

// --- serve ------------------------------------------------------------------------------

struct ServeArgs {
  std::string model, host = "127.0.0.1";
  int port = 8080;
  std::size_t max_upload_mb = 16;
};

int cmd_serve(const ServeArgs& a, std::ostream& out, std::ostream& err) {
  const auto bundle = load_bundle(a.model);
  ServerOptions so;
  so.max_upload_bytes = a.max_upload_mb << 20;
  ExplainServer server(bundle, so);

  // Signals go to a dedicated waiter so shutdown runs outside a handler.
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
  const int port = server.bind(a.host, a.port);
  if (port < 0) {
    pthread_sigmask(SIG_UNBLOCK, &set, nullptr);
    err << "error: cannot bind " << a.host << ":" << a.port << "\n";
    return kExitData;
  }
  std::thread waiter([&] {
    int sig = 0;
    sigwait(&set, &sig);
    server.stop();
  });
  out << "listening on " << a.host << ":" << port << " model " << bundle->model_id << std::endl;
  const bool ok = server.run();
  // run() can also end without a signal; wake the waiter so it can exit.
  pthread_kill(waiter.native_handle(), SIGTERM);
  waiter.join();
  pthread_sigmask(SIG_UNBLOCK, &set, nullptr);
  return ok ? kExitOk : kExitData;
}

// --- convert-weights ----------------------------------------------------------------------

int cmd_convert(const ConvertOptions& o, std::ostream& out) {
  OutputTracker outputs;
  const fs::path dir = o.output.parent_path();
  if (!dir.empty()) outputs.make_dir(dir);
  const std::string stem = o.output.stem().string();
  outputs.track(o.output);
  outputs.track(dir / (stem + ".vocab.txt"));
  outputs.track(dir / (stem + ".merges.txt"));
  const ConvertReport rep = convert_weights(o);
  const auto bundle = clip::load_model_bundle(o.output);
  json options = {{"input", o.input.filename().string()}, {"merges", o.merges.filename().string()},
                  {"ignored", rep.ignored}};
  write_json(outputs.track(dir / (stem + ".run.json")), run_manifest("convert-weights", options, 0, bundle.get()));
  outputs.commit();
  out << rep.config.to_json().dump() << "\n";
  for (const auto& name : rep.ignored) out << "ignored " << name << "\n";
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Gradient-based explanations, evaluation and fine-tuning for CLIP models", "geclip"};
  app.require_subcommand(1);

  ExplainArgs ex;
  auto* explain_cmd = app.add_subcommand("explain", "Explain image-text matching and write overlays");
  add_model_option(explain_cmd, ex.model);
  explain_cmd->add_option("-i,--image", ex.image, "Input image (PNG, JPEG or PPM)")->required();
  explain_cmd->add_option("-t,--text", ex.texts, "Prompt; repeat for several")->required();
  explain_cmd->add_option("-o,--out", ex.out, "Output directory")->required();
  explain_cmd->add_option("--method", ex.method, "Explanation method")->check(CLI::IsMember(kMethods));
  explain_cmd->add_option("--layers", ex.layers, "Image layers, negative from the end")->delimiter(',');
  explain_cmd->add_option("--text-layers", ex.text_layers, "Text layers for word importance")->delimiter(',');
  explain_cmd->add_option("--lambda", ex.lambda, "Spatial weights")->check(CLI::IsMember(kLambdas));
  explain_cmd->add_option("--head-mode", ex.head_mode, "Attention grouping")->check(CLI::IsMember(kHeadModes));
  explain_cmd->add_option("--alpha", ex.alpha, "Overlay opacity")->check(CLI::Range(0.0, 1.0));
  explain_cmd->add_option("--colormap", ex.colormap)->check(CLI::IsMember({"jet", "gray"}));
  explain_cmd->add_flag("--no-text-saliency", ex.no_text, "Skip word importances");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Run an evaluation protocol over a dataset manifest");
  add_model_option(eval_cmd, ev.model);
  eval_cmd->add_option("-d,--manifest", ev.manifest, "Dataset manifest")->required();
  eval_cmd->add_option("--task", ev.task)
      ->required()
      ->check(CLI::IsMember({"zero-shot", "retrieval", "image-faithfulness", "text-faithfulness", "localization",
                             "word-stats"}));
  eval_cmd->add_option("-o,--out", ev.out, "Output directory")->required();
  eval_cmd->add_option("--method", ev.method)->check(CLI::IsMember(kMethods));
  eval_cmd->add_option("--layers", ev.layers)->delimiter(',');
  eval_cmd->add_option("--text-layers", ev.text_layers)->delimiter(',');
  eval_cmd->add_option("--lambda", ev.lambda)->check(CLI::IsMember(kLambdas));
  eval_cmd->add_option("--head-mode", ev.head_mode)->check(CLI::IsMember(kHeadModes));
  eval_cmd->add_option("--directions", ev.directions)->delimiter(',')->check(CLI::IsMember({"deletion", "insertion"}));
  eval_cmd->add_option("--steps", ev.steps, "Perturbation steps")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--step-frac", ev.step_frac, "Fraction of pixels per step")->check(CLI::Range(1e-9, 1.0));
  eval_cmd->add_option("--template", ev.template_, "Class prompt template with {}");
  eval_cmd->add_option("--ks", ev.ks, "Top-k / recall@k values")->delimiter(',');
  eval_cmd->add_option("--text-steps", ev.text_steps)->check(CLI::PositiveNumber);
  eval_cmd->add_option("--threshold", ev.threshold, "Segmentation threshold: mean or a number");
  eval_cmd->add_option("--target", ev.target)->check(CLI::IsMember({"ground-truth", "prediction"}));
  eval_cmd->add_option("--limit", ev.limit, "Evaluate only the first N usable records");
  eval_cmd->add_option("--workers", ev.workers)->check(CLI::Range(1u, 256u));
  eval_cmd->add_option("--seed", ev.seed);
  eval_cmd->add_option("--concreteness", ev.concreteness, "Word table for word-stats");
  eval_cmd->add_option("--frequency", ev.frequency, "Word table for word-stats");

  FinetuneArgs ft;
  auto* ft_cmd = app.add_subcommand("finetune", "Fine-tune with global and phrase-region losses");
  add_model_option(ft_cmd, ft.model);
  ft_cmd->add_option("-d,--manifest", ft.manifest, "Captioned training manifest")->required();
  ft_cmd->add_option("--val", ft.val, "Manifest with labelled boxes for region accuracy");
  ft_cmd->add_option("-o,--out", ft.out, "Output directory")->required();
  ft_cmd->add_option("--steps", ft.steps);
  ft_cmd->add_option("--batch", ft.batch);
  ft_cmd->add_option("--lr", ft.lr);
  ft_cmd->add_option("--weight-decay", ft.weight_decay);
  ft_cmd->add_option("--local-weight", ft.local_weight);
  ft_cmd->add_flag("--global-only", ft.global_only, "Disable the phrase-region loss");
  ft_cmd->add_option("--max-phrases", ft.max_phrases)->check(CLI::PositiveNumber);
  ft_cmd->add_option("--tau", ft.tau, "Initial temperature");
  ft_cmd->add_flag("--train-tau", ft.train_tau);
  ft_cmd->add_option("--template", ft.template_, "Class prompt template for region accuracy");
  ft_cmd->add_option("--snapshot-every", ft.snapshot_every, "Save a bundle every N steps (0: never)");
  ft_cmd->add_option("--seed", ft.seed);

  ToyArgs toy;
  std::uint64_t model_seed = 0;
  auto* toy_cmd = app.add_subcommand("gen-toy-data", "Write the colored-shapes dataset and a random toy model");
  toy_cmd->add_option("-o,--out", toy.out, "Output directory")->required();
  toy_cmd->add_option("--count", toy.count);
  toy_cmd->add_option("--size", toy.size, "Image side in pixels");
  toy_cmd->add_option("--seed", toy.seed);
  auto* model_seed_opt = toy_cmd->add_option("--model-seed", model_seed, "Model init seed (default: --seed)");
  toy_cmd->add_flag("--no-model", toy.no_model);

  ServeArgs sv;
  auto* serve_cmd = app.add_subcommand("serve", "Serve explanations over HTTP");
  add_model_option(serve_cmd, sv.model);
  serve_cmd->add_option("--host", sv.host);
  serve_cmd->add_option("--port", sv.port)->check(CLI::Range(0, 65535));
  serve_cmd->add_option("--max-upload-mb", sv.max_upload_mb)->check(CLI::PositiveNumber);

  ConvertOptions cv;
  std::size_t vision_heads = 0, text_heads = 0;
  auto* cv_cmd = app.add_subcommand("convert-weights", "Convert a safetensors CLIP state dict into a bundle");
  cv_cmd->add_option("-i,--input", cv.input, "OpenAI-layout .safetensors file")->required();
  cv_cmd->add_option("--merges", cv.merges, "BPE merges text file")->required();
  cv_cmd->add_option("-o,--output", cv.output, "Bundle container path")->required();
  cv_cmd->add_option("--model-id", cv.model_id);
  auto* vh_opt = cv_cmd->add_option("--vision-heads", vision_heads)->check(CLI::PositiveNumber);
  auto* th_opt = cv_cmd->add_option("--text-heads", text_heads)->check(CLI::PositiveNumber);

  std::vector<std::string> argv_store{"geclip"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& s : argv_store) argv.push_back(s.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (explain_cmd->parsed()) return cmd_explain(ex, explain_cmd, out);
    if (eval_cmd->parsed()) return cmd_eval(ev, eval_cmd, out);
    if (ft_cmd->parsed()) return cmd_finetune(ft, out);
    if (toy_cmd->parsed()) {
      if (model_seed_opt->count()) toy.model_seed = model_seed;
      return cmd_gen_toy(toy, out);
    }
    if (serve_cmd->parsed()) return cmd_serve(sv, out, err);
    if (cv_cmd->parsed()) {
      if (vh_opt->count()) cv.vision_heads = vision_heads;
      if (th_opt->count()) cv.text_heads = text_heads;
      return cmd_convert(cv, out);
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const RequestError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    err << "compute error: " << e.what() << "\n";
    return kExitCompute;
  }
  return kExitUsage;
}

}  // namespace geclip::service
