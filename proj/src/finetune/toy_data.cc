#include "geclip/finetune/toy_data.h"

#include <cmath>
#include <fstream>
#include <random>

#include "geclip/common/error.h"

namespace geclip::finetune {

namespace fs = std::filesystem;

namespace {

struct Color {
  const char* name;
  std::uint8_t rgb[3];
};

constexpr Color kColors[] = {
    {"red", {220, 40, 40}}, {"green", {40, 190, 60}}, {"blue", {40, 70, 220}}, {"yellow", {230, 210, 40}}};
constexpr const char* kShapes[] = {"square", "circle", "triangle"};
constexpr const char* kTemplates[] = {"a {} and a {}", "a {} next to a {}", "a {} with a {}"};

bool inside_shape(std::size_t shape, Real u, Real v) {  // u, v in [0, 1) within the box
  switch (shape) {
    case 0: return true;
    case 1: return (u - 0.5) * (u - 0.5) + (v - 0.5) * (v - 0.5) <= 0.25;
    default: return v >= std::abs(u - 0.5) * 2.0;  // apex at the top
  }
}

std::string fill(const char* tmpl, const std::string& a, const std::string& b) {
  std::string s = tmpl;
  s.replace(s.find("{}"), 2, a);
  s.replace(s.find("{}"), 2, b);
  return s;
}

}  // namespace

std::vector<std::string> toy_class_names() {
  std::vector<std::string> out;
  for (const auto& c : kColors)
    for (const char* s : kShapes) out.push_back(std::string(c.name) + " " + s);
  return out;
}

std::vector<ToySample> generate_toy_samples(const ToyOptions& opt) {
  const std::size_t size = opt.image_size;
  if (size < 16) throw ContractError("toy images must be at least 16px");
  std::mt19937_64 rng(opt.seed);
  auto pick = [&](std::size_t n) { return static_cast<std::size_t>(rng() % n); };
  std::vector<ToySample> out;
  const std::size_t lo = size * 5 / 16, hi = size * 7 / 16;  // shape side range
  for (std::size_t i = 0; i < opt.count; ++i) {
    ToySample s;
    s.image = clip::Image{size, size, std::vector<std::uint8_t>(size * size * 3)};
    for (auto& v : s.image.rgb) v = static_cast<std::uint8_t>(110 + pick(31));
    const std::size_t c0 = pick(4), c1 = (c0 + 1 + pick(3)) % 4;
    const std::size_t s0 = pick(3), s1 = (s0 + 1 + pick(2)) % 3;
    std::vector<eval::Box> placed;
    for (int attempt = 0; placed.size() < 2; ++attempt) {
      if (attempt > 10000) throw ContractError("toy generator could not place two shapes");
      const std::size_t side = lo + pick(hi - lo + 1);
      eval::Box box;
      box.x0 = pick(size - side + 1);
      box.y0 = pick(size - side + 1);
      box.x1 = box.x0 + side;
      box.y1 = box.y0 + side;
      bool clear = true;
      for (const auto& p : placed) {
        clear = clear && (box.x1 + 1 <= p.x0 || p.x1 + 1 <= box.x0 || box.y1 + 1 <= p.y0 || p.y1 + 1 <= box.y0);
      }
      if (!clear) {
        if (attempt % 50 == 49) placed.clear();  // first shape left no room
        continue;
      }
      placed.push_back(box);
    }
    for (std::size_t k = 0; k < 2; ++k) {
      eval::Box& box = placed[k];
      const std::size_t side = box.x1 - box.x0;
      const Color& col = kColors[k == 0 ? c0 : c1];
      const std::size_t shape = k == 0 ? s0 : s1;
      for (std::size_t y = box.y0; y < box.y1; ++y)
        for (std::size_t x = box.x0; x < box.x1; ++x) {
          const Real u = (x - box.x0 + 0.5) / side, v = (y - box.y0 + 0.5) / side;
          if (!inside_shape(shape, u, v)) continue;
          for (int ch = 0; ch < 3; ++ch) s.image.rgb[(y * size + x) * 3 + ch] = col.rgb[ch];
        }
      box.label = std::string(col.name) + " " + kShapes[shape];
    }
    s.boxes = placed;
    const bool swap = pick(2) == 1;
    s.caption = fill(kTemplates[pick(3)], placed[swap ? 1 : 0].label, placed[swap ? 0 : 1].label);
    out.push_back(std::move(s));
  }
  return out;
}

fs::path write_toy_dataset(const fs::path& dir, const ToyOptions& opt) {
  fs::create_directories(dir / "images");
  const auto samples = generate_toy_samples(opt);
  eval::DatasetManifest m;
  m.split = "toy";
  m.classes = toy_class_names();
  m.classes_file = dir / "classes.txt";
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "images/%04zu.ppm", i);
    clip::write_ppm(dir / name, samples[i].image);
    eval::Record r;
    r.image = dir / name;
    r.captions = {samples[i].caption};
    r.boxes = samples[i].boxes;
    m.records.push_back(std::move(r));
  }
  const fs::path manifest = dir / "manifest.tsv";
  eval::save_manifest(manifest, m);
  return manifest;
}

clip::BpeTokenizer toy_tokenizer() {
  std::vector<std::string> words{"a", "and", "next", "to", "with", "photo", "of"};
  for (const auto& c : kColors) words.push_back(c.name);
  for (const char* s : kShapes) words.push_back(s);
  return clip::BpeTokenizer::from_merges(clip::train_bpe_merges(words));
}

clip::ModelConfig toy_model_config(std::size_t image_size) {
  clip::ModelConfig c;
  c.image_size = image_size;
  c.patch_size = 4;
  c.vision_layers = 2;
  c.vision_width = 32;
  c.vision_heads = 1;
  c.text_layers = 2;
  c.text_width = 32;
  c.text_heads = 2;
  c.embed_dim = 16;
  c.vocab_size = toy_tokenizer().vocab_size();
  c.context_length = 16;
  return c;
}

std::shared_ptr<clip::ModelBundle> toy_bundle(std::uint64_t seed, std::size_t image_size) {
  auto b = std::make_shared<clip::ModelBundle>();
  b->model = clip::init_random_model(toy_model_config(image_size), seed);
  b->tokenizer = toy_tokenizer();
  b->model_id = "toy-" + std::to_string(seed);
  return b;
}

}  // namespace geclip::finetune
