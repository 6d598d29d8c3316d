#include "geclip/tensor/ops.h"

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <limits>
#include <string>
#include <utility>

namespace geclip::ops {

namespace {

using NodePtr = std::shared_ptr<detail::TensorNode>;
using Node = detail::TensorNode;

Tape* recording_tape(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = active_tape();
  if (tape == nullptr) return nullptr;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return tape;
  }
  return nullptr;
}

// Gradient buffer of an input, or nullptr when it does not take gradients.
Real* grad_of(Node* n) {
  if (n == nullptr || !n->requires_grad) return nullptr;
  if (n->grad.empty()) n->grad.assign(n->data.size(), 0.0);
  return n->grad.data();
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " +
                     std::to_string(rank) + ", got " +
                     shape_string(t.shape()));
  }
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

void require_scalar(const Tensor& s, const char* op) {
  if (s.numel() != 1) {
    throw ShapeError(std::string(op) + ": expected a one-element tensor, got " +
                     shape_string(s.shape()));
  }
}

// Creates the output and, if recording, registers the backward closure built
// by `make_backward(out, input nodes...)`.
template <typename MakeBackward>
Tensor emit(Shape shape, std::vector<Real> data,
            std::initializer_list<const Tensor*> inputs,
            MakeBackward&& make_backward) {
  Tensor out(std::move(shape), std::move(data));
  if (Tape* tape = recording_tape(inputs)) {
    NodePtr on = out.node_ptr();
    on->requires_grad = true;
    std::vector<NodePtr> in_nodes;
    std::vector<Node*> raw;
    for (const Tensor* t : inputs) {
      in_nodes.push_back(t->defined() ? t->node_ptr() : nullptr);
      raw.push_back(t->defined() ? t->node_ptr().get() : nullptr);
    }
    tape->record(std::move(in_nodes), on, make_backward(on.get(), raw));
  }
  return out;
}

struct AxisSplit {
  std::size_t outer, len, inner;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                     shape_string(s));
  }
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

template <typename F, typename D>
Tensor unary(const Tensor& a, F f, D df) {
  auto x = a.data();
  std::vector<Real> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return emit(a.shape(), std::move(y), {&a},
              [df](Node* out, const std::vector<Node*>& in) {
                return [out, in, df] {
                  Real* ga = grad_of(in[0]);
                  if (!ga) return;
                  const auto& x = in[0]->data;
                  for (std::size_t i = 0; i < x.size(); ++i) {
                    ga[i] += out->grad[i] * df(x[i], out->data[i]);
                  }
                };
              });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ, " +
                     shape_string(a.shape()) + " . " +
                     shape_string(b.shape()));
  }
  auto A = a.data();
  auto B = b.data();
  std::vector<Real> C(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    Real* c = &C[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = A[i * k + p];
      const Real* br = &B[p * n];
      for (std::size_t j = 0; j < n; ++j) c[j] += av * br[j];
    }
  }
  return emit({m, n}, std::move(C), {&a, &b},
              [m, k, n](Node* out, const std::vector<Node*>& in) {
                return [out, in, m, k, n] {
                  const Real* G = out->grad.data();
                  const Real* A = in[0]->data.data();
                  const Real* B = in[1]->data.data();
                  if (Real* ga = grad_of(in[0])) {
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t p = 0; p < k; ++p) {
                        Real s = 0;
                        for (std::size_t j = 0; j < n; ++j)
                          s += G[i * n + j] * B[p * n + j];
                        ga[i * k + p] += s;
                      }
                  }
                  if (Real* gb = grad_of(in[1])) {
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t p = 0; p < k; ++p) {
                        const Real av = A[i * k + p];
                        for (std::size_t j = 0; j < n; ++j)
                          gb[p * n + j] += av * G[i * n + j];
                      }
                  }
                };
              });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw ShapeError("matmul_nt: inner dimensions differ, " +
                     shape_string(a.shape()) + " . " +
                     shape_string(b.shape()) + "^T");
  }
  auto A = a.data();
  auto B = b.data();
  std::vector<Real> C(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      Real s = 0;
      for (std::size_t p = 0; p < k; ++p) s += A[i * k + p] * B[j * k + p];
      C[i * n + j] = s;
    }
  return emit({m, n}, std::move(C), {&a, &b},
              [m, k, n](Node* out, const std::vector<Node*>& in) {
                return [out, in, m, k, n] {
                  const Real* G = out->grad.data();
                  const Real* A = in[0]->data.data();
                  const Real* B = in[1]->data.data();
                  if (Real* ga = grad_of(in[0])) {
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < n; ++j) {
                        const Real g = G[i * n + j];
                        if (g == 0) continue;
                        for (std::size_t p = 0; p < k; ++p)
                          ga[i * k + p] += g * B[j * k + p];
                      }
                  }
                  if (Real* gb = grad_of(in[1])) {
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < n; ++j) {
                        const Real g = G[i * n + j];
                        if (g == 0) continue;
                        for (std::size_t p = 0; p < k; ++p)
                          gb[j * k + p] += g * A[i * k + p];
                      }
                  }
                };
              });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear");
  const std::size_t m = x.dim(0), in_dim = x.dim(1), out_dim = weight.dim(0);
  if (weight.dim(1) != in_dim) {
    throw ShapeError("linear: input " + shape_string(x.shape()) +
                     " incompatible with weight " +
                     shape_string(weight.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{out_dim}) {
    throw ShapeError("linear: bias " + shape_string(bias.shape()) +
                     " does not match weight " + shape_string(weight.shape()));
  }
  auto X = x.data();
  auto W = weight.data();
  std::vector<Real> Y(m * out_dim);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t o = 0; o < out_dim; ++o) {
      Real s = has_bias ? bias.data()[o] : 0.0;
      const Real* xr = &X[i * in_dim];
      const Real* wr = &W[o * in_dim];
      for (std::size_t p = 0; p < in_dim; ++p) s += xr[p] * wr[p];
      Y[i * out_dim + o] = s;
    }
  return emit(
      {m, out_dim}, std::move(Y), {&x, &weight, &bias},
      [m, in_dim, out_dim](Node* out, const std::vector<Node*>& in) {
        return [out, in, m, in_dim, out_dim] {
          const Real* G = out->grad.data();
          const Real* X = in[0]->data.data();
          const Real* W = in[1]->data.data();
          if (Real* gx = grad_of(in[0])) {
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t o = 0; o < out_dim; ++o) {
                const Real g = G[i * out_dim + o];
                if (g == 0) continue;
                for (std::size_t p = 0; p < in_dim; ++p)
                  gx[i * in_dim + p] += g * W[o * in_dim + p];
              }
          }
          if (Real* gw = grad_of(in[1])) {
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t o = 0; o < out_dim; ++o) {
                const Real g = G[i * out_dim + o];
                if (g == 0) continue;
                for (std::size_t p = 0; p < in_dim; ++p)
                  gw[o * in_dim + p] += g * X[i * in_dim + p];
              }
          }
          if (Real* gb = grad_of(in[2])) {
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t o = 0; o < out_dim; ++o)
                gb[o] += G[i * out_dim + o];
          }
        };
      });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  auto A = a.data();
  std::vector<Real> T(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) T[j * m + i] = A[i * n + j];
  return emit({n, m}, std::move(T), {&a},
              [m, n](Node* out, const std::vector<Node*>& in) {
                return [out, in, m, n] {
                  if (Real* ga = grad_of(in[0]))
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < n; ++j)
                        ga[i * n + j] += out->grad[j * m + i];
                };
              });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_string(a.shape()) +
                     " as " + shape_string(shape));
  }
  std::vector<Real> d(a.data().begin(), a.data().end());
  return emit(std::move(shape), std::move(d), {&a},
              [](Node* out, const std::vector<Node*>& in) {
                return [out, in] {
                  if (Real* ga = grad_of(in[0]))
                    for (std::size_t i = 0; i < out->grad.size(); ++i)
                      ga[i] += out->grad[i];
                };
              });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same(a, b, "add");
  auto A = a.data();
  auto B = b.data();
  std::vector<Real> y(A.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = A[i] + B[i];
  return emit(a.shape(), std::move(y), {&a, &b},
              [](Node* out, const std::vector<Node*>& in) {
                return [out, in] {
                  for (int s = 0; s < 2; ++s)
                    if (Real* g = grad_of(in[s]))
                      for (std::size_t i = 0; i < out->grad.size(); ++i)
                        g[i] += out->grad[i];
                };
              });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same(a, b, "sub");
  auto A = a.data();
  auto B = b.data();
  std::vector<Real> y(A.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = A[i] - B[i];
  return emit(a.shape(), std::move(y), {&a, &b},
              [](Node* out, const std::vector<Node*>& in) {
                return [out, in] {
                  if (Real* g = grad_of(in[0]))
                    for (std::size_t i = 0; i < out->grad.size(); ++i)
                      g[i] += out->grad[i];
                  if (Real* g = grad_of(in[1]))
                    for (std::size_t i = 0; i < out->grad.size(); ++i)
                      g[i] -= out->grad[i];
                };
              });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mul");
  auto A = a.data();
  auto B = b.data();
  std::vector<Real> y(A.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = A[i] * B[i];
  return emit(a.shape(), std::move(y), {&a, &b},
              [](Node* out, const std::vector<Node*>& in) {
                return [out, in] {
                  if (Real* g = grad_of(in[0]))
                    for (std::size_t i = 0; i < out->grad.size(); ++i)
                      g[i] += out->grad[i] * in[1]->data[i];
                  if (Real* g = grad_of(in[1]))
                    for (std::size_t i = 0; i < out->grad.size(); ++i)
                      g[i] += out->grad[i] * in[0]->data[i];
                };
              });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  require_rank(a, 2, "add_row");
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (row.shape() != Shape{n}) {
    throw ShapeError("add_row: row " + shape_string(row.shape()) +
                     " does not match " + shape_string(a.shape()));
  }
  auto A = a.data();
  auto R = row.data();
  std::vector<Real> y(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] = A[i * n + j] + R[j];
  return emit({m, n}, std::move(y), {&a, &row},
              [m, n](Node* out, const std::vector<Node*>& in) {
                return [out, in, m, n] {
                  if (Real* g = grad_of(in[0]))
                    for (std::size_t i = 0; i < m * n; ++i)
                      g[i] += out->grad[i];
                  if (Real* g = grad_of(in[1]))
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < n; ++j)
                        g[j] += out->grad[i * n + j];
                };
              });
}

Tensor scale(const Tensor& a, Real factor) {
  return unary(
      a, [factor](Real x) { return x * factor; },
      [factor](Real, Real) { return factor; });
}

Tensor add_scalar(const Tensor& a, Real value) {
  return unary(
      a, [value](Real x) { return x + value; }, [](Real, Real) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, const Tensor& s) {
  require_scalar(s, "mul_scalar");
  const Real sv = s.item();
  auto A = a.data();
  std::vector<Real> y(A.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = A[i] * sv;
  return emit(a.shape(), std::move(y), {&a, &s},
              [](Node* out, const std::vector<Node*>& in) {
                return [out, in] {
                  const Real sv = in[1]->data[0];
                  if (Real* g = grad_of(in[0]))
                    for (std::size_t i = 0; i < out->grad.size(); ++i)
                      g[i] += out->grad[i] * sv;
                  if (Real* g = grad_of(in[1])) {
                    Real acc = 0;
                    for (std::size_t i = 0; i < out->grad.size(); ++i)
                      acc += out->grad[i] * in[0]->data[i];
                    g[0] += acc;
                  }
                };
              });
}

Tensor div_scalar(const Tensor& a, const Tensor& s) {
  require_scalar(s, "div_scalar");
  const Real sv = s.item();
  if (sv == 0) throw NumericError("div_scalar: division by zero");
  auto A = a.data();
  std::vector<Real> y(A.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = A[i] / sv;
  return emit(a.shape(), std::move(y), {&a, &s},
              [](Node* out, const std::vector<Node*>& in) {
                return [out, in] {
                  const Real sv = in[1]->data[0];
                  if (Real* g = grad_of(in[0]))
                    for (std::size_t i = 0; i < out->grad.size(); ++i)
                      g[i] += out->grad[i] / sv;
                  if (Real* g = grad_of(in[1])) {
                    Real acc = 0;
                    for (std::size_t i = 0; i < out->grad.size(); ++i)
                      acc += out->grad[i] * in[0]->data[i];
                    g[0] -= acc / (sv * sv);
                  }
                };
              });
}

Tensor exp(const Tensor& a) {
  return unary(
      a, [](Real x) { return std::exp(x); }, [](Real, Real y) { return y; });
}

Tensor log(const Tensor& a) {
  for (Real v : a.data()) {
    if (!(v > 0)) throw NumericError("log: non-positive input");
  }
  return unary(
      a, [](Real x) { return std::log(x); },
      [](Real x, Real) { return 1.0 / x; });
}

Tensor square(const Tensor& a) {
  return unary(
      a, [](Real x) { return x * x; }, [](Real x, Real) { return 2 * x; });
}

Tensor clamp(const Tensor& a, Real lo, Real hi) {
  if (lo > hi) throw ContractError("clamp: lower bound exceeds upper bound");
  return unary(
      a, [lo, hi](Real x) { return std::clamp(x, lo, hi); },
      [lo, hi](Real x, Real) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor quick_gelu(const Tensor& a) {
  return unary(
      a,
      [](Real x) { return x / (1.0 + std::exp(-1.702 * x)); },
      [](Real x, Real) {
        const Real s = 1.0 / (1.0 + std::exp(-1.702 * x));
        return s + x * 1.702 * s * (1.0 - s);
      });
}

Tensor sum(const Tensor& a) {
  Real s = 0;
  for (Real v : a.data()) s += v;
  return emit({1}, {s}, {&a}, [](Node* out, const std::vector<Node*>& in) {
    return [out, in] {
      if (Real* g = grad_of(in[0]))
        for (std::size_t i = 0; i < in[0]->data.size(); ++i)
          g[i] += out->grad[0];
    };
  });
}

Tensor mean(const Tensor& a) {
  return scale(sum(a), 1.0 / static_cast<Real>(a.numel()));
}

Tensor sum_rows(const Tensor& a) {
  require_rank(a, 2, "sum_rows");
  const std::size_t m = a.dim(0), n = a.dim(1);
  auto A = a.data();
  std::vector<Real> y(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[j] += A[i * n + j];
  return emit({n}, std::move(y), {&a},
              [m, n](Node* out, const std::vector<Node*>& in) {
                return [out, in, m, n] {
                  if (Real* g = grad_of(in[0]))
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < n; ++j)
                        g[i * n + j] += out->grad[j];
                };
              });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const AxisSplit sp = split_axis(x.shape(), axis);
  auto X = x.data();
  std::vector<Real> y(X.size());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.len * sp.inner + in;
      Real mx = -std::numeric_limits<Real>::infinity();
      for (std::size_t i = 0; i < sp.len; ++i) {
        const Real v = X[base + i * sp.inner];
        if (std::isnan(v)) throw NumericError("softmax: NaN input");
        mx = std::max(mx, v);
      }
      if (!std::isfinite(mx)) {
        throw NumericError("softmax: slice has no finite maximum");
      }
      Real total = 0;
      for (std::size_t i = 0; i < sp.len; ++i) {
        const Real e = std::exp(X[base + i * sp.inner] - mx);
        y[base + i * sp.inner] = e;
        total += e;
      }
      for (std::size_t i = 0; i < sp.len; ++i) y[base + i * sp.inner] /= total;
    }
  return emit(x.shape(), std::move(y), {&x},
              [sp](Node* out, const std::vector<Node*>& in) {
                return [out, in, sp] {
                  Real* g = grad_of(in[0]);
                  if (!g) return;
                  const Real* Y = out->data.data();
                  const Real* G = out->grad.data();
                  for (std::size_t o = 0; o < sp.outer; ++o)
                    for (std::size_t k = 0; k < sp.inner; ++k) {
                      const std::size_t base = o * sp.len * sp.inner + k;
                      Real d = 0;
                      for (std::size_t i = 0; i < sp.len; ++i) {
                        const std::size_t idx = base + i * sp.inner;
                        d += G[idx] * Y[idx];
                      }
                      for (std::size_t i = 0; i < sp.len; ++i) {
                        const std::size_t idx = base + i * sp.inner;
                        g[idx] += Y[idx] * (G[idx] - d);
                      }
                    }
                };
              });
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  const AxisSplit sp = split_axis(x.shape(), axis);
  auto X = x.data();
  std::vector<Real> y(X.size());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.len * sp.inner + in;
      Real mx = -std::numeric_limits<Real>::infinity();
      for (std::size_t i = 0; i < sp.len; ++i) {
        const Real v = X[base + i * sp.inner];
        if (std::isnan(v)) throw NumericError("log_softmax: NaN input");
        mx = std::max(mx, v);
      }
      if (!std::isfinite(mx)) {
        throw NumericError("log_softmax: slice has no finite maximum");
      }
      Real total = 0;
      for (std::size_t i = 0; i < sp.len; ++i)
        total += std::exp(X[base + i * sp.inner] - mx);
      const Real lse = mx + std::log(total);
      for (std::size_t i = 0; i < sp.len; ++i)
        y[base + i * sp.inner] = X[base + i * sp.inner] - lse;
    }
  return emit(x.shape(), std::move(y), {&x},
              [sp](Node* out, const std::vector<Node*>& in) {
                return [out, in, sp] {
                  Real* g = grad_of(in[0]);
                  if (!g) return;
                  const Real* Y = out->data.data();
                  const Real* G = out->grad.data();
                  for (std::size_t o = 0; o < sp.outer; ++o)
                    for (std::size_t k = 0; k < sp.inner; ++k) {
                      const std::size_t base = o * sp.len * sp.inner + k;
                      Real gs = 0;
                      for (std::size_t i = 0; i < sp.len; ++i)
                        gs += G[base + i * sp.inner];
                      for (std::size_t i = 0; i < sp.len; ++i) {
                        const std::size_t idx = base + i * sp.inner;
                        g[idx] += G[idx] - std::exp(Y[idx]) * gs;
                      }
                    }
                };
              });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  Real eps) {
  if (x.rank() < 1) throw ShapeError("layer_norm: rank-0 input");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  if (gain.shape() != Shape{n} || bias.shape() != Shape{n}) {
    throw ShapeError("layer_norm: gain " + shape_string(gain.shape()) +
                     " / bias " + shape_string(bias.shape()) +
                     " do not match input " + shape_string(x.shape()));
  }
  auto X = x.data();
  auto Gn = gain.data();
  auto Bs = bias.data();
  std::vector<Real> y(X.size());
  std::vector<Real> xhat(X.size());
  std::vector<Real> inv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = &X[r * n];
    Real mu = 0;
    for (std::size_t j = 0; j < n; ++j) mu += xr[j];
    mu /= static_cast<Real>(n);
    Real var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<Real>(n);
    inv[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (xr[j] - mu) * inv[r];
      y[r * n + j] = xhat[r * n + j] * Gn[j] + Bs[j];
    }
  }
  return emit(
      x.shape(), std::move(y), {&x, &gain, &bias},
      [n, rows, xhat = std::move(xhat), inv = std::move(inv)](
          Node* out, const std::vector<Node*>& in) {
        return [out, in, n, rows, xhat, inv] {
          const Real* G = out->grad.data();
          const Real* Gn = in[1]->data.data();
          if (Real* gx = grad_of(in[0])) {
            for (std::size_t r = 0; r < rows; ++r) {
              Real m1 = 0, m2 = 0;
              for (std::size_t j = 0; j < n; ++j) {
                const Real gh = G[r * n + j] * Gn[j];
                m1 += gh;
                m2 += gh * xhat[r * n + j];
              }
              m1 /= static_cast<Real>(n);
              m2 /= static_cast<Real>(n);
              for (std::size_t j = 0; j < n; ++j) {
                const Real gh = G[r * n + j] * Gn[j];
                gx[r * n + j] += inv[r] * (gh - m1 - xhat[r * n + j] * m2);
              }
            }
          }
          if (Real* gg = grad_of(in[1]))
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t j = 0; j < n; ++j)
                gg[j] += G[r * n + j] * xhat[r * n + j];
          if (Real* gb = grad_of(in[2]))
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t j = 0; j < n; ++j) gb[j] += G[r * n + j];
        };
      });
}

Tensor l2_normalize(const Tensor& x, Real eps) {
  if (x.rank() < 1) throw ShapeError("l2_normalize: rank-0 input");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  auto X = x.data();
  std::vector<Real> y(X.size());
  std::vector<Real> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    Real s = 0;
    for (std::size_t j = 0; j < n; ++j) s += X[r * n + j] * X[r * n + j];
    norms[r] = std::sqrt(s);
    if (!(norms[r] > eps)) {
      throw NumericError("l2_normalize: zero-length vector");
    }
    for (std::size_t j = 0; j < n; ++j) y[r * n + j] = X[r * n + j] / norms[r];
  }
  return emit(x.shape(), std::move(y), {&x},
              [n, rows, norms = std::move(norms)](
                  Node* out, const std::vector<Node*>& in) {
                return [out, in, n, rows, norms] {
                  Real* g = grad_of(in[0]);
                  if (!g) return;
                  const Real* Y = out->data.data();
                  const Real* G = out->grad.data();
                  for (std::size_t r = 0; r < rows; ++r) {
                    Real d = 0;
                    for (std::size_t j = 0; j < n; ++j)
                      d += G[r * n + j] * Y[r * n + j];
                    for (std::size_t j = 0; j < n; ++j)
                      g[r * n + j] += (G[r * n + j] - Y[r * n + j] * d) / norms[r];
                  }
                };
              });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  require_rank(a, 2, "slice_rows");
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (begin >= end || end > m) {
    throw ShapeError("slice_rows: [" + std::to_string(begin) + "," +
                     std::to_string(end) + ") invalid for " +
                     shape_string(a.shape()));
  }
  auto A = a.data();
  std::vector<Real> y(A.begin() + begin * n, A.begin() + end * n);
  return emit({end - begin, n}, std::move(y), {&a},
              [begin, n](Node* out, const std::vector<Node*>& in) {
                return [out, in, begin, n] {
                  if (Real* g = grad_of(in[0]))
                    for (std::size_t i = 0; i < out->grad.size(); ++i)
                      g[begin * n + i] += out->grad[i];
                };
              });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  require_rank(a, 2, "slice_cols");
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (begin >= end || end > n) {
    throw ShapeError("slice_cols: [" + std::to_string(begin) + "," +
                     std::to_string(end) + ") invalid for " +
                     shape_string(a.shape()));
  }
  const std::size_t w = end - begin;
  auto A = a.data();
  std::vector<Real> y(m * w);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) y[i * w + j] = A[i * n + begin + j];
  return emit({m, w}, std::move(y), {&a},
              [m, n, w, begin](Node* out, const std::vector<Node*>& in) {
                return [out, in, m, n, w, begin] {
                  if (Real* g = grad_of(in[0]))
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < w; ++j)
                        g[i * n + begin + j] += out->grad[i * w + j];
                };
              });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t n = parts[0].dim(1);
  std::size_t m = 0;
  std::vector<Real> y;
  for (const Tensor& p : parts) {
    require_rank(p, 2, "concat_rows");
    if (p.dim(1) != n) {
      throw ShapeError("concat_rows: column mismatch " +
                       shape_string(parts[0].shape()) + " vs " +
                       shape_string(p.shape()));
    }
    m += p.dim(0);
    y.insert(y.end(), p.data().begin(), p.data().end());
  }
  Tensor out({m, n}, std::move(y));
  Tape* tape = active_tape();
  bool any = false;
  for (const Tensor& p : parts) any = any || p.requires_grad();
  if (tape && any) {
    auto on = out.node_ptr();
    on->requires_grad = true;
    std::vector<std::shared_ptr<detail::TensorNode>> ins;
    std::vector<Node*> raw;
    for (const Tensor& p : parts) {
      ins.push_back(p.node_ptr());
      raw.push_back(p.node_ptr().get());
    }
    Node* o = on.get();
    tape->record(std::move(ins), on, [o, raw] {
      std::size_t offset = 0;
      for (Node* p : raw) {
        const std::size_t cnt = p->data.size();
        if (Real* g = grad_of(p))
          for (std::size_t i = 0; i < cnt; ++i) g[i] += o->grad[offset + i];
        offset += cnt;
      }
    });
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t m = parts[0].dim(0);
  std::size_t n = 0;
  std::vector<std::size_t> widths;
  for (const Tensor& p : parts) {
    require_rank(p, 2, "concat_cols");
    if (p.dim(0) != m) {
      throw ShapeError("concat_cols: row mismatch " +
                       shape_string(parts[0].shape()) + " vs " +
                       shape_string(p.shape()));
    }
    widths.push_back(p.dim(1));
    n += p.dim(1);
  }
  std::vector<Real> y(m * n);
  std::size_t col = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto P = parts[k].data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j)
        y[i * n + col + j] = P[i * widths[k] + j];
    col += widths[k];
  }
  Tensor out({m, n}, std::move(y));
  Tape* tape = active_tape();
  bool any = false;
  for (const Tensor& p : parts) any = any || p.requires_grad();
  if (tape && any) {
    auto on = out.node_ptr();
    on->requires_grad = true;
    std::vector<std::shared_ptr<detail::TensorNode>> ins;
    std::vector<Node*> raw;
    for (const Tensor& p : parts) {
      ins.push_back(p.node_ptr());
      raw.push_back(p.node_ptr().get());
    }
    Node* o = on.get();
    tape->record(std::move(ins), on, [o, raw, widths, m, n] {
      std::size_t col = 0;
      for (std::size_t k = 0; k < raw.size(); ++k) {
        if (Real* g = grad_of(raw[k]))
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < widths[k]; ++j)
              g[i * widths[k] + j] += o->grad[i * n + col + j];
        col += widths[k];
      }
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& ids) {
  require_rank(table, 2, "gather_rows");
  if (ids.empty()) throw ContractError("gather_rows: empty index list");
  const std::size_t rows = table.dim(0), n = table.dim(1);
  auto T = table.data();
  std::vector<Real> y(ids.size() * n);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= rows) {
      throw ShapeError("gather_rows: index " + std::to_string(ids[i]) +
                       " out of range for " + shape_string(table.shape()));
    }
    std::copy_n(&T[ids[i] * n], n, &y[i * n]);
  }
  return emit({ids.size(), n}, std::move(y), {&table},
              [ids, n](Node* out, const std::vector<Node*>& in) {
                return [out, in, ids, n] {
                  if (Real* g = grad_of(in[0]))
                    for (std::size_t i = 0; i < ids.size(); ++i)
                      for (std::size_t j = 0; j < n; ++j)
                        g[ids[i] * n + j] += out->grad[i * n + j];
                };
              });
}

Tensor dot(const Tensor& a, const Tensor& b) {
  require_same(a, b, "dot");
  return sum(mul(a, b));
}

Tensor cosine(const Tensor& a, const Tensor& b) {
  require_same(a, b, "cosine");
  auto A = a.data();
  auto B = b.data();
  Real ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < A.size(); ++i) {
    ab += A[i] * B[i];
    aa += A[i] * A[i];
    bb += B[i] * B[i];
  }
  const Real na = std::sqrt(aa), nb = std::sqrt(bb);
  if (!(na > 0) || !(nb > 0)) {
    throw NumericError("cosine: zero-length vector");
  }
  const Real c = ab / (na * nb);
  return emit({1}, {c}, {&a, &b},
              [na, nb, c](Node* out, const std::vector<Node*>& in) {
                return [out, in, na, nb, c] {
                  const Real g = out->grad[0];
                  const auto& A = in[0]->data;
                  const auto& B = in[1]->data;
                  if (Real* ga = grad_of(in[0]))
                    for (std::size_t i = 0; i < A.size(); ++i)
                      ga[i] += g * (B[i] / (na * nb) - c * A[i] / (na * na));
                  if (Real* gb = grad_of(in[1]))
                    for (std::size_t i = 0; i < B.size(); ++i)
                      gb[i] += g * (A[i] / (na * nb) - c * B[i] / (nb * nb));
                };
              });
}

}  // namespace geclip::ops
