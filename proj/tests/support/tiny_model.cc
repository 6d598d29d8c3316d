#include "tiny_model.h"

namespace geclip::testing {

clip::BpeTokenizer tiny_tokenizer() {
  static const std::vector<std::string> words = {
      "a", "dog", "is", "playing", "with", "the", "red", "blue", "car",
      "cat", "photo", "of", "black", "traffic", "lights", "square", "circle"};
  return clip::BpeTokenizer::from_merges(clip::train_bpe_merges(words));
}

clip::ModelConfig tiny_config(std::size_t heads) {
  clip::ModelConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.vision_layers = 2;
  c.vision_width = 8;
  c.vision_heads = heads;
  c.text_layers = 2;
  c.text_width = 8;
  c.text_heads = heads;
  c.embed_dim = 6;
  c.vocab_size = tiny_tokenizer().vocab_size();
  c.context_length = 12;
  return c;
}

std::shared_ptr<clip::ModelBundle> tiny_bundle(std::uint64_t seed, std::size_t heads) {
  auto b = std::make_shared<clip::ModelBundle>();
  b->model = clip::init_random_model(tiny_config(heads), seed);
  b->tokenizer = tiny_tokenizer();
  b->model_id = "tiny-" + std::to_string(seed);
  return b;
}

clip::Image random_image(std::size_t width, std::size_t height, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> u(0, 255);
  clip::Image img{width, height, std::vector<std::uint8_t>(width * height * 3)};
  for (auto& v : img.rgb) v = static_cast<std::uint8_t>(u(rng));
  return img;
}

}  // namespace geclip::testing
