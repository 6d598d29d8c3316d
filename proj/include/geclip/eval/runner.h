#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "geclip/clip/model.h"
#include "geclip/eval/dataset.h"
#include "geclip/eval/metrics.h"
#include "geclip/explain/explain.h"

namespace geclip::eval {

enum class EvalTask {
  kZeroShot,           // top-k accuracy over labelled records
  kRetrieval,          // recall@k over (image, first caption) pairs
  kImageFaithfulness,  // deletion / insertion on explanation heat maps
  kTextFaithfulness,   // word deletion / insertion on text saliencies
  kLocalization,       // point game and segmentation against masks
  kWordStats,          // per-word importance statistics over captions
};
const char* eval_task_name(EvalTask t);
EvalTask parse_eval_task(const std::string& name);

// Which class prompt an image explanation targets in classification mode.
enum class Target { kGroundTruth, kPrediction };
Target parse_target(const std::string& name);
const char* target_name(Target t);

struct EvalOptions {
  explain::Method method = explain::Method::kGradEclip;
  explain::ImageExplainOptions image;
  explain::TextExplainOptions text;
  PerturbOptions perturb;
  std::vector<Direction> directions{Direction::kDeletion, Direction::kInsertion};
  std::string prompt_template = "a photo of a {}.";
  std::vector<std::size_t> ks{1, 5};
  std::size_t text_steps = 5;
  ThresholdRule threshold;
  Target target = Target::kGroundTruth;
  bool per_item = false;   // include per-record results in the report
  std::size_t limit = 0;   // evaluate only the first `limit` records; 0 = all
  unsigned workers = 1;
  std::uint64_t seed = 0;  // record i uses seed ^ i
  std::optional<std::map<std::string, Real>> concreteness;
  std::optional<std::map<std::string, Real>> frequency;
};

struct NamedCurve {
  std::string name;  // e.g. "deletion@1", "insertion-IR@1"
  PerturbationCurve curve;
};

struct EvalReport {
  nlohmann::json summary;
  std::vector<NamedCurve> curves;  // dataset-mean curves
};

// Image faithfulness uses classification mode when the manifest has a class
// table and every record a label, retrieval mode otherwise. Metric scoring
// always uses the multi-head forward.
EvalReport run_eval(const clip::ModelBundle& bundle, const DatasetManifest& manifest,
                    EvalTask task, const EvalOptions& options);

// Columns: curve,step_fraction,value.
void write_curves_csv(const std::filesystem::path& path, const std::vector<NamedCurve>& curves);

// Two tab- or comma-separated columns: word, value. Lines starting with '#'
// are skipped.
std::map<std::string, Real> load_word_table(const std::filesystem::path& path);

// Runs fn(i) for i in [0, n) on `workers` threads. The first exception (by
// index) is rethrown after all workers finish.
void parallel_for(std::size_t n, unsigned workers, const std::function<void(std::size_t)>& fn);

}  // namespace geclip::eval
