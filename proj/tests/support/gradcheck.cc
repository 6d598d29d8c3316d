#include "gradcheck.h"

#include <algorithm>
#include <cmath>
#include <random>

#include "geclip/tensor/ops.h"

namespace geclip::testing {

namespace {

Real rel_err(std::span<const Real> a, std::span<const Real> b, Real floor) {
  Real worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const Real denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

Tensor rand_t(Shape s, std::mt19937_64& rng, Real lo = -1, Real hi = 1) {
  std::uniform_real_distribution<Real> u(lo, hi);
  std::vector<Real> v(shape_numel(s));
  for (Real& x : v) x = u(rng);
  return Tensor(std::move(s), std::move(v));
}

}  // namespace

Real gradcheck(const ScalarFn& fn, const std::vector<Tensor>& inputs, Real h,
               Real floor) {
  std::vector<Tensor> live;
  for (const Tensor& t : inputs) {
    live.push_back(t.detach().set_requires_grad(true));
  }
  std::vector<Tensor> analytic;
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = fn(live);
    tape.backward(loss);
    for (const Tensor& t : live) {
      analytic.push_back(t.has_grad() ? t.grad_tensor()
                                      : Tensor::zeros(t.shape()));
    }
  }
  Real worst = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto f = [&](const Tensor& x) {
      std::vector<Tensor> args;
      for (std::size_t j = 0; j < inputs.size(); ++j)
        args.push_back(j == i ? x : inputs[j].detach());
      return fn(args).item();
    };
    Tensor numeric = finite_diff_grad(f, inputs[i], h);
    worst = std::max(worst, rel_err(analytic[i].data(), numeric.data(), floor));
  }
  return worst;
}

std::vector<GradCase> op_grad_cases() {
  using namespace geclip::ops;
  std::vector<GradCase> cases;
  auto add_case = [&](std::string name, std::vector<Shape> shapes,
                      ScalarFn fn, Real lo = -1, Real hi = 1) {
    cases.push_back({name, [shapes, fn, lo, hi](unsigned seed) {
                       std::mt19937_64 rng(seed);
                       std::vector<Tensor> in;
                       for (const Shape& s : shapes)
                         in.push_back(rand_t(s, rng, lo, hi));
                       return gradcheck(fn, in);
                     }});
  };
  // Each case reduces through a fixed random projection so every output
  // element carries a distinct weight.
  auto proj = [](const Tensor& y, unsigned salt) {
    std::mt19937_64 rng(0xC0FFEE + salt);
    Tensor w = rand_t(y.shape(), rng);
    return sum(mul(y, w));
  };

  add_case("matmul", {{4, 4}, {4, 4}}, [proj](const std::vector<Tensor>& v) {
    return proj(matmul(v[0], v[1]), 1);
  });
  add_case("matmul_nt", {{3, 5}, {4, 5}}, [proj](const std::vector<Tensor>& v) {
    return proj(matmul_nt(v[0], v[1]), 2);
  });
  add_case("linear", {{3, 4}, {5, 4}, {5}},
           [proj](const std::vector<Tensor>& v) {
             return proj(linear(v[0], v[1], v[2]), 3);
           });
  add_case("transpose", {{2, 3}}, [proj](const std::vector<Tensor>& v) {
    return proj(transpose(v[0]), 4);
  });
  add_case("add_sub_mul", {{3, 3}, {3, 3}},
           [proj](const std::vector<Tensor>& v) {
             return proj(mul(add(v[0], v[1]), sub(v[0], v[1])), 5);
           });
  add_case("add_row", {{3, 4}, {4}}, [proj](const std::vector<Tensor>& v) {
    return proj(add_row(v[0], v[1]), 6);
  });
  add_case("mul_div_scalar", {{2, 3}, {1}},
           [proj](const std::vector<Tensor>& v) {
             return proj(add(mul_scalar(v[0], v[1]),
                             div_scalar(v[0], add_scalar(v[1], 3.0))),
                         7);
           });
  add_case("exp_log", {{6}}, [proj](const std::vector<Tensor>& v) {
    return proj(log(add_scalar(exp(v[0]), 0.5)), 8);
  });
  add_case("square", {{6}}, [proj](const std::vector<Tensor>& v) {
    return proj(square(v[0]), 9);
  });
  add_case("quick_gelu", {{8}}, [proj](const std::vector<Tensor>& v) {
    return proj(quick_gelu(scale(v[0], 3.0)), 10);
  });
  add_case("softmax_axis0", {{4, 3}}, [proj](const std::vector<Tensor>& v) {
    return proj(softmax(v[0], 0), 11);
  });
  add_case("softmax_axis1", {{3, 8}}, [proj](const std::vector<Tensor>& v) {
    return proj(softmax(scale(v[0], 2.0), 1), 12);
  });
  add_case("log_softmax", {{3, 5}}, [proj](const std::vector<Tensor>& v) {
    return proj(log_softmax(v[0], 1), 13);
  });
  add_case("layer_norm", {{3, 6}, {6}, {6}},
           [proj](const std::vector<Tensor>& v) {
             return proj(layer_norm(v[0], v[1], v[2]), 14);
           });
  add_case("l2_normalize", {{2, 5}}, [proj](const std::vector<Tensor>& v) {
    return proj(l2_normalize(v[0]), 15);
  });
  add_case("slice_concat", {{4, 3}, {2, 3}},
           [proj](const std::vector<Tensor>& v) {
             Tensor r = concat_rows({slice_rows(v[0], 1, 3), v[1]});
             Tensor c = concat_cols({slice_cols(r, 0, 1), slice_cols(r, 1, 3)});
             return proj(c, 16);
           });
  add_case("gather_sum_rows", {{5, 3}}, [proj](const std::vector<Tensor>& v) {
    return proj(sum_rows(gather_rows(v[0], {4, 0, 4, 2})), 17);
  });
  add_case("reshape_mean", {{2, 6}}, [proj](const std::vector<Tensor>& v) {
    return add(proj(reshape(v[0], {3, 4}), 18), mean(v[0]));
  });
  add_case("cosine", {{7}, {7}}, [](const std::vector<Tensor>& v) {
    return cosine(v[0], v[1]);
  });
  add_case("clamp", {{9}}, [proj](const std::vector<Tensor>& v) {
    return proj(clamp(v[0], -0.5, 0.5), 19);
  });
  add_case("attention_block", {{5, 4}, {12, 4}, {4, 4}},
           [proj](const std::vector<Tensor>& v) {
             Tensor qkv = linear(v[0], v[1], Tensor());
             Tensor q = slice_cols(qkv, 0, 4);
             Tensor k = slice_cols(qkv, 4, 8);
             Tensor val = slice_cols(qkv, 8, 12);
             Tensor a = softmax(scale(matmul_nt(q, k), 0.5), 1);
             return proj(linear(matmul(a, val), v[2], Tensor()), 20);
           });
  return cases;
}

}  // namespace geclip::testing
