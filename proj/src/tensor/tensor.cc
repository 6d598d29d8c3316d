#include "geclip/tensor/tensor.h"

#include <sstream>
#include <utility>

namespace geclip {

namespace {
thread_local Tape* g_active_tape = nullptr;
}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<Real> data, bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) {
      throw ShapeError("tensor extents must be positive, got " +
                       shape_string(shape));
    }
  }
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("shape " + shape_string(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(data.size()));
  }
  node_ = std::make_shared<detail::TensorNode>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, Real value) {
  std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<Real>(n, value));
}

Tensor Tensor::scalar(Real value) { return Tensor({1}, {value}); }

Tensor Tensor::vector(std::vector<Real> values) {
  std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols,
                      std::vector<Real> values) {
  return Tensor({rows, cols}, std::move(values));
}

const Shape& Tensor::shape() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                     shape_string(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const Real> Tensor::data() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return node_->data;
}

std::span<Real> Tensor::mutable_data() {
  if (!node_) throw ContractError("use of an undefined tensor");
  return node_->data;
}

Real Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item() needs a one-element tensor, got " +
                     shape_string(shape()));
  }
  return node_->data[0];
}

Real Tensor::at(std::size_t row, std::size_t col) const {
  const Shape& s = shape();
  if (s.size() != 2 || row >= s[0] || col >= s[1]) {
    throw ShapeError("at(" + std::to_string(row) + "," + std::to_string(col) +
                     ") invalid for " + shape_string(s));
  }
  return node_->data[row * s[1] + col];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  if (!node_) throw ContractError("use of an undefined tensor");
  node_->requires_grad = flag;
  return *this;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const Real> Tensor::grad() const {
  if (!has_grad()) throw ContractError("tensor has no gradient");
  return node_->grad;
}

Tensor Tensor::grad_tensor() const {
  if (!has_grad()) throw ContractError("tensor has no gradient");
  return Tensor(node_->shape, node_->grad);
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

Tensor Tensor::detach() const {
  if (!node_) return Tensor();
  return Tensor(node_->shape, node_->data);
}

Tape::~Tape() { clear(); }

void Tape::record(std::vector<std::shared_ptr<detail::TensorNode>> inputs,
                  std::shared_ptr<detail::TensorNode> output, BackwardFn fn) {
  output->producer = this;
  entries_.push_back({std::move(inputs), std::move(output), std::move(fn)});
}

void Tape::clear() {
  for (auto& e : entries_) {
    if (e.output->producer == this) e.output->producer = nullptr;
  }
  entries_.clear();
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got " +
                        (loss.defined() ? shape_string(loss.shape())
                                        : std::string("undefined")));
  }
  detail::TensorNode* root = loss.node_ptr().get();
  if (!root->requires_grad) {
    throw ContractError(
        "backward(): loss does not depend on any tensor requiring gradients");
  }
  if (root->producer != this) {
    if (root->producer == nullptr) {
      // The loss is itself a leaf.
      if (root->grad.empty()) root->grad.assign(1, 0.0);
      root->grad[0] += 1.0;
      return;
    }
    throw ContractError("backward(): loss was recorded on a different tape");
  }
  for (auto& e : entries_) e.output->grad.assign(e.output->data.size(), 0.0);
  root->grad[0] = 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    it->backward();
  }
}

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) {
  g_active_tape = &tape;
}

TapeScope::~TapeScope() { g_active_tape = previous_; }

NoTapeScope::NoTapeScope() : previous_(g_active_tape) {
  g_active_tape = nullptr;
}

NoTapeScope::~NoTapeScope() { g_active_tape = previous_; }

void backward(const Tensor& loss) {
  Tape* tape = active_tape();
  if (tape == nullptr) {
    throw ContractError("backward() called with no active tape");
  }
  tape->backward(loss);
}

Tensor finite_diff_grad(const std::function<Real(const Tensor&)>& f,
                        const Tensor& x, Real h) {
  if (!(h > 0)) throw ContractError("finite_diff_grad: step must be positive");
  NoTapeScope no_tape;
  std::vector<Real> base(x.data().begin(), x.data().end());
  std::vector<Real> out(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    std::vector<Real> plus = base;
    std::vector<Real> minus = base;
    plus[i] += h;
    minus[i] -= h;
    Real fp = f(Tensor(x.shape(), std::move(plus)));
    Real fm = f(Tensor(x.shape(), std::move(minus)));
    out[i] = (fp - fm) / (2 * h);
  }
  return Tensor(x.shape(), std::move(out));
}

}  // namespace geclip
