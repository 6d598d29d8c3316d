#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "geclip/clip/encoder.h"
#include "geclip/common/error.h"
#include "geclip/eval/dataset.h"
#include "geclip/eval/metrics.h"
#include "geclip/eval/runner.h"
#include "region_scorer.h"
#include "test_util.h"
#include "tiny_model.h"

namespace geclip {
namespace {

namespace fs = std::filesystem;
using eval::Direction;
using explain::HeatMap;

HeatMap map_of(std::size_t w, std::size_t h, std::vector<Real> v) {
  HeatMap m;
  m.width = w;
  m.height = h;
  m.values = std::move(v);
  return m;
}

clip::Mask mask_of(std::size_t w, std::size_t h, std::vector<std::uint8_t> v) {
  return clip::Mask{w, h, std::move(v)};
}

// --- curves -----------------------------------------------------------------

TEST(CurveTest, ConstantCurveHasUnitArea) {
  std::vector<Real> x, y;
  for (int i = 0; i <= 100; ++i) {
    x.push_back(i * 0.005);
    y.push_back(1.0);
  }
  EXPECT_DOUBLE_EQ(eval::trapezoid_auc(x, y), 1.0);
}

TEST(CurveTest, LinearDecayHasHalfArea) {
  for (std::size_t steps : {1u, 5u, 100u}) {
    std::vector<Real> x, y;
    for (std::size_t i = 0; i <= steps; ++i) {
      x.push_back(static_cast<Real>(i) / steps);
      y.push_back(1.0 - static_cast<Real>(i) / steps);
    }
    EXPECT_NEAR(eval::trapezoid_auc(x, y), 0.5, 1.0 / (2.0 * steps)) << steps;
  }
}

TEST(CurveTest, DuplicatingASampleKeepsArea) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<Real> u(0, 1);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Real> x{0}, y{u(rng)};
    for (int i = 1; i <= 10; ++i) {
      x.push_back(x.back() + 0.1);
      y.push_back(u(rng));
    }
    const Real base = eval::trapezoid_auc(x, y);
    const std::size_t at = trial % x.size();
    x.insert(x.begin() + at, x[at]);
    y.insert(y.begin() + at, y[at]);
    EXPECT_NEAR(eval::trapezoid_auc(x, y), base, 1e-15);
  }
}

TEST(CurveTest, AucInUnitIntervalForUnitValues) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<Real> u(0, 1);
  std::vector<Real> x, y;
  for (int i = 0; i <= 50; ++i) {
    x.push_back(i);
    y.push_back(u(rng));
  }
  const Real a = eval::trapezoid_auc(x, y);
  EXPECT_GE(a, 0.0);
  EXPECT_LE(a, 1.0);
}

TEST(CurveTest, RejectsDegenerateInput) {
  std::vector<Real> one{0};
  EXPECT_THROW(eval::trapezoid_auc(one, one), ContractError);
  std::vector<Real> flat{0, 0}, y{1, 1};
  EXPECT_THROW(eval::trapezoid_auc(flat, y), ContractError);
}

// --- image perturbation -----------------------------------------------------

TEST(PerturbTest, RankingBreaksTiesByRasterOrder) {
  const auto order = eval::rank_pixels(map_of(3, 1, {0.5, 1.0, 0.5}));
  EXPECT_EQ(order, (std::vector<std::size_t>{1, 0, 2}));
}

TEST(PerturbTest, TooManyStepsIsContractError) {
  testing::RegionTask task;
  eval::PerturbOptions opt;
  opt.steps = 201;
  opt.step_fraction = 0.005;
  EXPECT_THROW(eval::perturbation_curve(task.pixels, task.true_map(), Direction::kDeletion, opt, {},
                                        [&](const Tensor& p) { return task.score(p); }),
               ContractError);
}

TEST(PerturbTest, HeatMapSizeMustMatch) {
  testing::RegionTask task;
  EXPECT_THROW(eval::perturbation_curve(task.pixels, map_of(2, 2, {0, 0, 0, 0}), Direction::kDeletion, {},
                                        {}, [&](const Tensor& p) { return task.score(p); }),
               ContractError);
}

TEST(PerturbTest, StepZeroIsUnperturbedScore) {
  testing::RegionTask task;
  for (Direction d : {Direction::kDeletion, Direction::kInsertion}) {
    int calls = 0;
    const auto c = eval::perturbation_curve(task.pixels, task.true_map(), d, {}, {}, [&](const Tensor& p) {
      if (calls++ == 0 && d == Direction::kDeletion) EXPECT_TRUE(p.data()[0] == 5.0);
      return task.score(p);
    });
    EXPECT_EQ(c.values.size(), 101u);
    EXPECT_EQ(c.fractions.front(), 0.0);
    EXPECT_EQ(c.values.front(), d == Direction::kDeletion ? 1.0 : 0.0);
    for (std::size_t i = 1; i < c.fractions.size(); ++i) EXPECT_GT(c.fractions[i], c.fractions[i - 1]);
  }
}

TEST(PerturbTest, FullDeletionOfRegionReachesChance) {
  testing::RegionTask task;
  eval::PerturbOptions opt;
  opt.steps = 10;
  opt.step_fraction = 0.1;
  const auto c = eval::perturbation_curve(task.pixels, task.true_map(), Direction::kDeletion, opt, {},
                                          [&](const Tensor& p) { return task.score(p); });
  EXPECT_EQ(c.values.back(), 0.0);
}

TEST(PerturbTest, DeletionOrderingBeatsShuffledMaps) {
  testing::RegionTask task;
  auto scorer = [&](const Tensor& p) { return task.score(p); };
  const HeatMap truth = task.true_map();
  const Real del = eval::perturbation_curve(task.pixels, truth, Direction::kDeletion, {}, {}, scorer).auc();
  const Real ins = eval::perturbation_curve(task.pixels, truth, Direction::kInsertion, {}, {}, scorer).auc();
  for (std::uint64_t s = 0; s < 20; ++s) {
    const HeatMap shuffled = task.shuffled(truth, 100 + s);
    EXPECT_LE(del, eval::perturbation_curve(task.pixels, shuffled, Direction::kDeletion, {}, {}, scorer).auc());
    EXPECT_GE(ins, eval::perturbation_curve(task.pixels, shuffled, Direction::kInsertion, {}, {}, scorer).auc());
  }
}

TEST(PerturbTest, DeterministicGivenSeed) {
  testing::RegionTask task;
  const HeatMap m = task.shuffled(task.true_map(), 9);
  auto sum = [](const Tensor& p) {
    Real s = 0;
    for (Real v : p.data()) s += v;
    return s;
  };
  eval::PerturbOptions a, b;
  a.seed = b.seed = 17;
  const auto ca = eval::perturbation_curve(task.pixels, m, Direction::kDeletion, a, {}, sum);
  const auto cb = eval::perturbation_curve(task.pixels, m, Direction::kDeletion, b, {}, sum);
  EXPECT_EQ(ca.values, cb.values);
  b.seed = 18;
  EXPECT_NE(ca.values, eval::perturbation_curve(task.pixels, m, Direction::kDeletion, b, {}, sum).values);
}

TEST(PerturbTest, NoiseIsNormalizedUniform) {
  clip::Preprocess pre;
  const Tensor n = eval::deletion_noise(16, pre, 5);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 256; ++i) {
      const Real raw = n.data()[c * 256 + i] * pre.std[c] + pre.mean[c];
      EXPECT_GE(raw, -1e-12);
      EXPECT_LT(raw, 1.0 + 1e-12);
    }
}

TEST(PerturbTest, MultiScorerSharesSequence) {
  testing::RegionTask task;
  const HeatMap m = task.shuffled(task.true_map(), 2);
  const auto curves = eval::perturbation_curves(task.pixels, m, Direction::kDeletion, {}, {}, [&](const Tensor& p) {
    return std::vector<Real>{task.score(p), 1.0 - task.score(p)};
  });
  ASSERT_EQ(curves.size(), 2u);
  for (std::size_t i = 0; i < curves[0].values.size(); ++i) {
    EXPECT_DOUBLE_EQ(curves[0].values[i] + curves[1].values[i], 1.0);
  }
}

// --- text perturbation ------------------------------------------------------

TEST(TextPerturbTest, SingleWordGivesTwoPoints) {
  std::vector<Real> imp{1.0};
  const auto c = eval::text_perturbation_curve({"dog"}, imp, Direction::kDeletion, 5,
                                               [](const std::string& t) { return t.empty() ? 0.0 : 1.0; });
  EXPECT_EQ(c.values, (std::vector<Real>{1.0, 0.0}));
  EXPECT_TRUE(c.clamped);
}

TEST(TextPerturbTest, WordsLeaveInImportanceOrder) {
  const std::vector<std::string> words{"a", "red", "car"};
  std::vector<Real> imp{0.1, 0.5, 1.0};
  std::vector<std::string> seen;
  eval::text_perturbation_curve(words, imp, Direction::kDeletion, 3, [&](const std::string& t) {
    seen.push_back(t);
    return 0.0;
  });
  EXPECT_EQ(seen, (std::vector<std::string>{"a red car", "a red", "a", ""}));
  seen.clear();
  const auto c = eval::text_perturbation_curve(words, imp, Direction::kInsertion, 2, [&](const std::string& t) {
    seen.push_back(t);
    return 0.0;
  });
  EXPECT_EQ(seen, (std::vector<std::string>{"", "car", "red car"}));
  EXPECT_FALSE(c.clamped);
}

TEST(TextPerturbTest, ZeroDeletionIsUnperturbed) {
  std::vector<Real> imp{0.2, 1.0};
  const auto c = eval::text_perturbation_curve({"red", "car"}, imp, Direction::kDeletion, 2,
                                               [](const std::string& t) { return t == "red car" ? 0.75 : 0.0; });
  EXPECT_EQ(c.values.front(), 0.75);
}

// --- localization -----------------------------------------------------------

TEST(LocalizationTest, HeatEqualToMask) {
  const std::vector<std::uint8_t> mv{0, 1, 1, 0, 0, 1, 0, 0, 0};
  std::vector<Real> hv(mv.begin(), mv.end());
  const auto r = eval::segmentation_metrics(map_of(3, 3, hv), mask_of(3, 3, mv));
  EXPECT_TRUE(r.pg_hit);
  EXPECT_EQ(r.energy_pg, 1.0);
  EXPECT_EQ(r.pixel_acc, 1.0);
  EXPECT_EQ(r.mask_iou, 1.0);
  EXPECT_EQ(r.ap, 1.0);
}

TEST(LocalizationTest, InvertedMaskHasZeroIou) {
  const std::vector<std::uint8_t> mv{0, 1, 1, 0, 0, 1, 0, 0, 0};
  std::vector<Real> hv;
  for (auto m : mv) hv.push_back(m ? 0.0 : 1.0);
  const auto r = eval::segmentation_metrics(map_of(3, 3, hv), mask_of(3, 3, mv));
  EXPECT_FALSE(r.pg_hit);
  EXPECT_EQ(r.mask_iou, 0.0);
  EXPECT_EQ(r.pixel_acc, 0.0);
}

TEST(LocalizationTest, UniformMapEnergyIsMaskFraction) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<std::uint8_t> mv(64);
    for (auto& m : mv) m = rng() % 3 == 0;
    mv[trial] = 1;
    const auto mask = mask_of(8, 8, mv);
    const auto r = eval::point_game(map_of(8, 8, std::vector<Real>(64, 0.37)), mask);
    EXPECT_EQ(r.energy_pg, static_cast<Real>(mask.count()) / 64.0);
  }
}

TEST(LocalizationTest, EnergyIsScaleInvariant) {
  std::mt19937_64 rng(9);
  auto heat = map_of(8, 8, {});
  std::vector<std::uint8_t> mv(64);
  for (std::size_t i = 0; i < 64; ++i) {
    heat.values.push_back(static_cast<Real>(rng() % 16));
    mv[i] = i % 5 == 0;
  }
  const auto mask = mask_of(8, 8, mv);
  const Real base = eval::point_game(heat, mask).energy_pg;
  for (Real s : {0.25, 2.0, 1024.0}) {
    auto scaled = heat;
    for (Real& v : scaled.values) v *= s;
    EXPECT_EQ(eval::point_game(scaled, mask).energy_pg, base);
  }
}

TEST(LocalizationTest, PointGameTieTakesFirstRasterPixel) {
  const auto r = eval::point_game(map_of(3, 1, {1, 1, 1}), mask_of(3, 1, {0, 1, 1}));
  EXPECT_FALSE(r.pg_hit);
}

TEST(LocalizationTest, EmptyMaskIsContractError) {
  EXPECT_THROW(eval::point_game(map_of(2, 1, {1, 0}), mask_of(2, 1, {0, 0})), ContractError);
  EXPECT_THROW(eval::point_game(map_of(2, 1, {1, 0}), mask_of(1, 2, {1, 0})), ContractError);
}

TEST(LocalizationTest, AveragePrecisionStepSum) {
  // Ranked labels 1,0,1,0: precision at the positives is 1 and 2/3.
  std::vector<Real> s{0.9, 0.8, 0.7, 0.1};
  bool l[] = {true, false, true, false};
  EXPECT_DOUBLE_EQ(eval::average_precision(s, l), 0.5 * 1.0 + 0.5 * (2.0 / 3.0));
  // Tied scores enter together.
  std::vector<Real> t{0.5, 0.5};
  bool l2[] = {false, true};
  EXPECT_DOUBLE_EQ(eval::average_precision(t, l2), 0.5);
}

TEST(LocalizationTest, FixedThresholdRule) {
  const auto rule = eval::parse_threshold_rule("0.6");
  EXPECT_EQ(rule.kind, eval::ThresholdRule::Kind::kFixed);
  const auto r = eval::segmentation_metrics(map_of(2, 1, {0.5, 0.7}), mask_of(2, 1, {1, 1}), rule);
  EXPECT_DOUBLE_EQ(r.mask_iou, 0.5);
  EXPECT_THROW(eval::parse_threshold_rule("median"), ContractError);
}

TEST(LocalizationTest, CropMaskMatchesImageCrop) {
  // 8x4 mask with foreground in the right half maps to the right half of a
  // 4x4 center crop of the 8x4 -> 8x4 resized frame.
  std::vector<std::uint8_t> mv(32);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 4; x < 8; ++x) mv[y * 8 + x] = 255;
  const auto m = eval::crop_mask(mask_of(8, 4, mv), 4);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) EXPECT_EQ(m.at(x, y), x >= 2) << x << "," << y;
}

// --- classification and retrieval -------------------------------------------

Tensor vec(std::vector<Real> v) { return Tensor::vector(std::move(v)); }

TEST(ClassifyTest, SingleClassIsTopOne) {
  const auto r = eval::zero_shot_classify(vec({1, 0}), {vec({-1, 0.2})});
  EXPECT_EQ(r.order, (std::vector<std::size_t>{0}));
}

TEST(ClassifyTest, DuplicateClassesTieInIndexOrder) {
  const auto r = eval::zero_shot_classify(vec({1, 0}), {vec({0, 1}), vec({1, 1}), vec({1, 1})});
  EXPECT_EQ(r.scores[1], r.scores[2]);
  EXPECT_EQ(r.order, (std::vector<std::size_t>{1, 2, 0}));
}

TEST(ClassifyTest, EmptyClassListIsContractError) {
  EXPECT_THROW(eval::zero_shot_classify(vec({1, 0}), {}), ContractError);
}

TEST(ClassifyTest, TemplateSubstitution) {
  EXPECT_EQ(eval::apply_template("a photo of a {}.", "dog"), "a photo of a dog.");
  EXPECT_EQ(eval::apply_template("{}", "red square"), "red square");
}

TEST(RetrievalTest, OnePairIsPerfect) {
  const auto t = eval::retrieval_recall({vec({1, 2})}, {vec({-3, 1})}, {1});
  EXPECT_EQ(t.image_to_text.at(1), 1.0);
  EXPECT_EQ(t.text_to_image.at(1), 1.0);
}

TEST(RetrievalTest, DuplicatesGiveOneOverN) {
  for (std::size_t n : {2u, 4u, 7u}) {
    std::vector<Tensor> same(n, vec({0.3, 0.4}));
    const auto t = eval::retrieval_recall(same, same, {1, n});
    EXPECT_DOUBLE_EQ(t.image_to_text.at(1), 1.0 / n);
    EXPECT_DOUBLE_EQ(t.text_to_image.at(1), 1.0 / n);
    EXPECT_DOUBLE_EQ(t.image_to_text.at(n), 1.0);
  }
}

TEST(RetrievalTest, LengthMismatchIsContractError) {
  EXPECT_THROW(eval::retrieval_recall({vec({1})}, {}, {1}), ContractError);
}

// --- statistics -------------------------------------------------------------

TEST(RegressionTest, PerfectLine) {
  std::vector<Real> x{1, 2, 3, 4, 5};
  const auto r = eval::linear_regression(x, x);
  EXPECT_DOUBLE_EQ(r.slope, 1.0);
  EXPECT_NEAR(r.intercept, 0.0, 1e-15);
  EXPECT_DOUBLE_EQ(r.r2, 1.0);
}

TEST(RegressionTest, UncorrelatedDataHasSmallR2) {
  std::mt19937_64 rng(2024);
  std::normal_distribution<Real> g;
  std::vector<Real> x(1000), y(1000);
  for (auto& v : x) v = g(rng);
  for (auto& v : y) v = g(rng);
  EXPECT_LT(std::abs(eval::linear_regression(x, y).r2), 0.02);
}

TEST(RegressionTest, AgreesWithNormalEquations) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<Real> u(-2, 2);
  std::vector<Real> x(50), y(50);
  for (std::size_t i = 0; i < 50; ++i) {
    x[i] = u(rng);
    y[i] = 0.7 * x[i] - 0.3 + 0.1 * u(rng);
  }
  // Closed-form 2x2 solve of [n sx; sx sxx][b; a] = [sy; sxy].
  Real n = 50, sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < 50; ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    sxy += x[i] * y[i];
  }
  const Real det = n * sxx - sx * sx;
  const Real slope = (n * sxy - sx * sy) / det;
  const Real intercept = (sxx * sy - sx * sxy) / det;
  const auto r = eval::linear_regression(x, y);
  EXPECT_NEAR(r.slope, slope, 1e-12);
  EXPECT_NEAR(r.intercept, intercept, 1e-12);
}

TEST(WordStatsTest, SingleWordSentence) {
  explain::TextSaliency s;
  s.words = {"dog"};
  s.importance = {1.0};
  const auto st = eval::word_importance_stats({s});
  EXPECT_EQ(st.mean_importance.at("dog"), 1.0);
  EXPECT_FALSE(st.concreteness_fit.has_value());
}

TEST(WordStatsTest, AveragesAndFits) {
  explain::TextSaliency a, b;
  a.words = {"a", "dog"};
  a.importance = {0.2, 1.0};
  b.words = {"a", "cat"};
  b.importance = {0.4, 1.0};
  std::map<std::string, Real> conc{{"a", 1.0}, {"dog", 5.0}, {"cat", 5.0}};
  const auto st = eval::word_importance_stats({a, b}, &conc);
  EXPECT_DOUBLE_EQ(st.mean_importance.at("a"), 0.3);
  EXPECT_EQ(st.count.at("a"), 2u);
  ASSERT_TRUE(st.concreteness_fit.has_value());
  EXPECT_DOUBLE_EQ(st.concreteness_fit->slope, 0.7 / 4.0);
}

// --- dataset manifests and the runner ---------------------------------------

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() / ("geclip_eval_" + std::to_string(::getpid()) + "_" +
                                         std::to_string(counter_++));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  static inline int counter_ = 0;
  fs::path path_;
};

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

TEST(ManifestTest, LoadsAllFieldKinds) {
  TempDir dir;
  std::mt19937_64 rng(1);
  clip::write_png(dir.path() / "a.png", testing::random_image(8, 8, rng));
  clip::write_mask_png(dir.path() / "a_mask.png", mask_of(8, 8, std::vector<std::uint8_t>(64, 1)));
  write_text(dir.path() / "classes.txt", "red square\nblue circle\n");
  write_text(dir.path() / "m.tsv",
             "#split=val\n#classes=classes.txt\n# comment\n\n"
             "image=a.png\tlabel=1\tcaption=a blue circle\tcaption=a circle\tmask=a_mask.png\t"
             "boxes=0,0,4,4;2,2,8,8\tbox_labels=red square;blue circle\n");
  const auto m = eval::load_manifest(dir.path() / "m.tsv");
  EXPECT_EQ(m.split, "val");
  EXPECT_EQ(m.classes, (std::vector<std::string>{"red square", "blue circle"}));
  ASSERT_EQ(m.records.size(), 1u);
  const auto& r = m.records[0];
  EXPECT_EQ(*r.label, 1u);
  EXPECT_EQ(r.captions.size(), 2u);
  EXPECT_TRUE(r.mask.has_value());
  ASSERT_EQ(r.boxes.size(), 2u);
  EXPECT_EQ(r.boxes[1].x1, 8u);
  EXPECT_EQ(r.boxes[1].label, "blue circle");

  eval::save_manifest(dir.path() / "copy.tsv", m);
  const auto again = eval::load_manifest(dir.path() / "copy.tsv");
  EXPECT_EQ(again.records[0].image, r.image);
  EXPECT_EQ(again.records[0].boxes[0].label, "red square");
  EXPECT_EQ(again.classes, m.classes);
}

TEST(ManifestTest, RejectsBadRecords) {
  TempDir dir;
  std::mt19937_64 rng(1);
  clip::write_png(dir.path() / "a.png", testing::random_image(8, 8, rng));
  write_text(dir.path() / "classes.txt", "one\n");
  const std::vector<std::string> bad{
      "image=missing.png\n",
      "#classes=classes.txt\nimage=a.png\tlabel=1\n",
      "#classes=classes.txt\nimage=a.png\tlabel=-1\n",
      "image=a.png\tboxes=1,2,3\n",
      "image=a.png\tboxes=4,4,2,2\n",
      "caption=no image\n",
      "image=a.png\tcolour=red\n",
      "image=a.png\tboxes=0,0,1,1\tbox_labels=x;y\n",
  };
  for (const auto& text : bad) {
    write_text(dir.path() / "m.tsv", text);
    EXPECT_THROW(eval::load_manifest(dir.path() / "m.tsv"), DataError) << text;
  }
  EXPECT_THROW(eval::load_manifest(dir.path() / "nope.tsv"), DataError);
}

TEST(ManifestTest, ErrorNamesLine) {
  TempDir dir;
  write_text(dir.path() / "m.tsv", "#split=x\nimage=gone.png\n");
  try {
    eval::load_manifest(dir.path() / "m.tsv");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("m.tsv:2"), std::string::npos) << e.what();
  }
}

// Four labelled, captioned, masked images for the tiny model.
struct TinyDataset {
  TempDir dir;
  eval::DatasetManifest manifest;

  TinyDataset() {
    std::mt19937_64 rng(42);
    write_text(dir.path() / "classes.txt", "red square\nblue circle\nblack car\n");
    const char* captions[] = {"a red square", "a blue circle", "the black car", "a dog with a frisbee"};
    std::string lines = "#split=test\n#classes=classes.txt\n";
    for (int i = 0; i < 4; ++i) {
      const std::string name = "img" + std::to_string(i);
      clip::write_png(dir.path() / (name + ".png"), testing::random_image(20, 16, rng));
      std::vector<std::uint8_t> mv(20 * 16);
      for (std::size_t y = 4; y < 12; ++y)
        for (std::size_t x = 2 + i; x < 10 + i; ++x) mv[y * 20 + x] = 255;
      clip::write_mask_png(dir.path() / (name + "_m.png"), mask_of(20, 16, mv));
      lines += "image=" + name + ".png\tlabel=" + std::to_string(i % 3) + "\tcaption=" + captions[i] +
               "\tmask=" + name + "_m.png\n";
    }
    write_text(dir.path() / "m.tsv", lines);
    manifest = eval::load_manifest(dir.path() / "m.tsv");
  }
};

eval::EvalOptions fast_options() {
  eval::EvalOptions o;
  o.perturb.steps = 10;
  o.perturb.step_fraction = 0.1;
  o.seed = 7;
  o.per_item = true;
  o.ks = {1, 2};
  return o;
}

TEST(RunnerTest, EveryTaskProducesDeterministicReports) {
  TinyDataset data;
  const auto bundle = testing::tiny_bundle(3);
  for (auto task : {eval::EvalTask::kZeroShot, eval::EvalTask::kRetrieval, eval::EvalTask::kImageFaithfulness,
                    eval::EvalTask::kTextFaithfulness, eval::EvalTask::kLocalization, eval::EvalTask::kWordStats}) {
    auto opt = fast_options();
    const auto a = eval::run_eval(*bundle, data.manifest, task, opt);
    opt.workers = 3;
    const auto b = eval::run_eval(*bundle, data.manifest, task, opt);
    EXPECT_EQ(a.summary.dump(), b.summary.dump()) << eval::eval_task_name(task);
    EXPECT_EQ(a.summary["task"], eval::eval_task_name(task));
    EXPECT_TRUE(a.summary.contains("metrics")) << eval::eval_task_name(task);
  }
}

TEST(RunnerTest, ImageFaithfulnessCurvesMatchDirectComputation) {
  TinyDataset data;
  const auto bundle = testing::tiny_bundle(5);
  auto opt = fast_options();
  opt.limit = 1;
  const auto rep = eval::run_eval(*bundle, data.manifest, eval::EvalTask::kImageFaithfulness, opt);
  EXPECT_EQ(rep.summary["mode"], "classification");
  ASSERT_EQ(rep.curves.size(), 4u);
  EXPECT_EQ(rep.curves[0].name, "deletion@1");
  EXPECT_EQ(rep.curves[3].name, "insertion@2");

  // Recompute record 0's deletion@1 curve by hand.
  const auto& cfg = bundle->config();
  const Tensor px = clip::preprocess_image(clip::read_image(data.manifest.records[0].image), cfg.image_size,
                                           bundle->preprocess);
  auto eo = opt.image;
  eo.out_width = eo.out_height = cfg.image_size;
  const auto heat = explain::explain_image(*bundle, px, {"a photo of a red square."}, opt.method, eo).front().map;
  std::vector<Tensor> classes;
  for (const auto& c : data.manifest.classes)
    classes.push_back(clip::embed_text(*bundle, eval::apply_template(opt.prompt_template, c)));
  eval::PerturbOptions po = opt.perturb;
  po.seed = opt.seed ^ 0;
  const auto c = eval::perturbation_curve(px, heat, Direction::kDeletion, po, bundle->preprocess, [&](const Tensor& p) {
    NoTapeScope no_tape;
    const auto r = eval::zero_shot_classify(clip::encode_image(bundle->model, p).embedding, classes);
    return r.order.front() == 0 ? 1.0 : 0.0;
  });
  EXPECT_EQ(rep.curves[0].curve.values, c.values);
  EXPECT_DOUBLE_EQ(rep.summary["metrics"]["auc"]["deletion@1"].get<Real>(), c.auc());
}

TEST(RunnerTest, RetrievalModeWithoutLabels) {
  TinyDataset data;
  for (auto& r : data.manifest.records) r.label.reset();
  const auto bundle = testing::tiny_bundle(5);
  auto opt = fast_options();
  opt.directions = {Direction::kInsertion};
  opt.ks = {1};
  const auto rep = eval::run_eval(*bundle, data.manifest, eval::EvalTask::kImageFaithfulness, opt);
  EXPECT_EQ(rep.summary["mode"], "retrieval");
  ASSERT_EQ(rep.curves.size(), 2u);
  EXPECT_EQ(rep.curves[0].name, "insertion-IR@1");
  EXPECT_EQ(rep.curves[1].name, "insertion-TR@1");
}

TEST(RunnerTest, TextFaithfulnessStepZeroIsRetrievalHit) {
  TinyDataset data;
  const auto bundle = testing::tiny_bundle(6);
  auto opt = fast_options();
  opt.directions = {Direction::kDeletion};
  const auto rep = eval::run_eval(*bundle, data.manifest, eval::EvalTask::kTextFaithfulness, opt);
  ASSERT_EQ(rep.curves.size(), 2u);
  EXPECT_EQ(rep.curves[0].curve.values.size(), opt.text_steps + 1);

  std::vector<Tensor> images, texts;
  for (const auto& r : data.manifest.records) {
    images.push_back(clip::embed_image(*bundle, clip::read_image(r.image)));
    texts.push_back(clip::embed_text(*bundle, r.captions.front()));
  }
  const auto table = eval::retrieval_recall(images, texts, {1});
  EXPECT_NEAR(rep.curves[0].curve.values.front(), table.text_to_image.at(1), 1e-12);
  EXPECT_NEAR(rep.curves[1].curve.values.front(), table.image_to_text.at(1), 1e-12);
}

TEST(RunnerTest, TextTasksRequireGradEclip) {
  TinyDataset data;
  const auto bundle = testing::tiny_bundle(6);
  auto opt = fast_options();
  opt.method = explain::Method::kRollout;
  EXPECT_THROW(eval::run_eval(*bundle, data.manifest, eval::EvalTask::kTextFaithfulness, opt), ContractError);
}

TEST(RunnerTest, MissingLabelsIsDataError) {
  TinyDataset data;
  for (auto& r : data.manifest.records) r.label.reset();
  const auto bundle = testing::tiny_bundle(6);
  EXPECT_THROW(eval::run_eval(*bundle, data.manifest, eval::EvalTask::kZeroShot, fast_options()), DataError);
}

TEST(RunnerTest, CurvesCsvAndWordTable) {
  TempDir dir;
  eval::PerturbationCurve c;
  c.fractions = {0, 0.5};
  c.values = {1, 0.25};
  eval::write_curves_csv(dir.path() / "c.csv", {{"deletion@1", c}});
  std::ifstream in(dir.path() / "c.csv");
  std::string all((std::istreambuf_iterator<char>(in)), {});
  EXPECT_EQ(all, "curve,step_fraction,value\ndeletion@1,0,1\ndeletion@1,0.5,0.25\n");

  write_text(dir.path() / "w.tsv", "# word\tvalue\ndog\t4.9\ncar,4.8\n");
  const auto t = eval::load_word_table(dir.path() / "w.tsv");
  EXPECT_EQ(t.at("dog"), 4.9);
  EXPECT_EQ(t.at("car"), 4.8);
  write_text(dir.path() / "w.tsv", "dog\tmany\n");
  EXPECT_THROW(eval::load_word_table(dir.path() / "w.tsv"), DataError);
}

TEST(ParallelTest, FirstFailureByIndexWins) {
  try {
    eval::parallel_for(10, 4, [](std::size_t i) {
      if (i == 3 || i == 7) throw DataError("item " + std::to_string(i));
    });
    FAIL();
  } catch (const DataError& e) {
    EXPECT_STREQ(e.what(), "item 3");
  }
}

}  // namespace
}  // namespace geclip
