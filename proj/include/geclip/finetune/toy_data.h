#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "geclip/clip/model.h"
#include "geclip/eval/dataset.h"

namespace geclip::finetune {

struct ToyOptions {
  std::size_t count = 240;
  std::size_t image_size = 32;
  std::uint64_t seed = 0;
};

struct ToySample {
  clip::Image image;
  std::string caption;          // e.g. "a red square and a blue circle"
  std::vector<eval::Box> boxes; // one per shape, labelled "red square" etc.
};

// Class names "<color> <shape>" in a fixed order.
std::vector<std::string> toy_class_names();

// Two distinct colored shapes per image on a noisy gray background.
std::vector<ToySample> generate_toy_samples(const ToyOptions& options);

// Writes images/NNNN.ppm, classes.txt and manifest.tsv (caption, boxes and
// box labels per record) under `dir` and returns the manifest path.
std::filesystem::path write_toy_dataset(const std::filesystem::path& dir, const ToyOptions& options);

// Tokenizer whose merges cover every toy caption word.
clip::BpeTokenizer toy_tokenizer();
clip::ModelConfig toy_model_config(std::size_t image_size = 32);
// Randomly initialised model sized for the toy data.
std::shared_ptr<clip::ModelBundle> toy_bundle(std::uint64_t seed, std::size_t image_size = 32);

}  // namespace geclip::finetune
