#include "loss_cases.h"

#include <random>

#include "geclip/finetune/finetune.h"
#include "geclip/tensor/ops.h"

namespace geclip::testing {

namespace {

Tensor rand_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::normal_distribution<Real> g;
  std::vector<Real> v(r * c);
  for (Real& x : v) x = g(rng);
  return Tensor({r, c}, std::move(v));
}

}  // namespace

std::vector<GradCase> loss_grad_cases() {
  return {
      {"global_contrastive_loss",
       [](unsigned seed) {
         std::mt19937_64 rng(seed);
         const std::size_t b = 1 + seed % 4, d = 3 + seed % 3;
         const Tensor images = rand_matrix(b, d, rng), texts = rand_matrix(b, d, rng);
         std::uniform_real_distribution<Real> u(-3.0, 0.0);
         const Tensor log_tau = Tensor::scalar(u(rng));
         return gradcheck(
             [](const std::vector<Tensor>& in) { return finetune::global_contrastive_loss(in[0], in[1], in[2]); },
             {images, texts, log_tau});
       }},
      {"local_focal_loss",
       [](unsigned seed) {
         std::mt19937_64 rng(seed);
         const std::size_t p = 1 + seed % 5, d = 3 + seed % 3;
         const Tensor regions = rand_matrix(p, d, rng);
         // Phrases near their regions keep most cosines away from the clamp.
         Tensor phrases = ops::add(regions, ops::scale(rand_matrix(p, d, rng), 0.6)).detach();
         return gradcheck(
             [](const std::vector<Tensor>& in) { return finetune::local_focal_loss(in[0], in[1], 1e-6); },
             {regions, phrases});
       }},
  };
}

}  // namespace geclip::testing
