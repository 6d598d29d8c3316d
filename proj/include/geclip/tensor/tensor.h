#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "geclip/common/error.h"

namespace geclip {

// All engine arithmetic runs in 64-bit so that finite-difference checks stay
// meaningful; weight containers store 32-bit values and widen on load.
using Real = double;
using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

class Tape;

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  const Tape* producer = nullptr;  // tape that recorded this value, if any
};

}  // namespace detail

// Dense row-major array. Copies share storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<Real> data, bool requires_grad = false);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, Real value);
  static Tensor scalar(Real value);
  static Tensor vector(std::vector<Real> values);
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<Real> values);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const Real> data() const;
  // Mutable access to values. Only safe on tensors that are not part of a
  // recorded computation (parameters between optimizer steps, inputs).
  std::span<Real> mutable_data();
  Real item() const;
  Real operator[](std::size_t i) const { return data()[i]; }
  Real at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);

  bool has_grad() const;
  std::span<const Real> grad() const;
  Tensor grad_tensor() const;
  void zero_grad();

  // Same values, fresh storage, no gradient participation.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  const detail::TensorNode* node() const { return node_.get(); }
  const std::shared_ptr<detail::TensorNode>& node_ptr() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::TensorNode> node)
      : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::TensorNode> node_;
};

// Ordered record of operations executed while the tape is active on the
// current thread. One forward+backward episode owns one tape.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape();

  // Propagates d(loss)/d(node) to every recorded value and accumulates into
  // leaf tensors that require gradients. Intermediate gradients are reset at
  // the start of each call; leaf gradients accumulate across calls.
  void backward(const Tensor& loss);

  // Releases every recorded intermediate.
  void clear();
  std::size_t size() const { return entries_.size(); }

  void record(std::vector<std::shared_ptr<detail::TensorNode>> inputs,
              std::shared_ptr<detail::TensorNode> output, BackwardFn fn);

 private:
  struct Entry {
    std::vector<std::shared_ptr<detail::TensorNode>> inputs;
    std::shared_ptr<detail::TensorNode> output;
    BackwardFn backward;
  };
  std::vector<Entry> entries_;
};

// Tape currently recording on this thread, or nullptr.
Tape* active_tape();

// Activates a tape for the lifetime of the scope.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Suspends recording for the lifetime of the scope.
class NoTapeScope {
 public:
  NoTapeScope();
  ~NoTapeScope();
  NoTapeScope(const NoTapeScope&) = delete;
  NoTapeScope& operator=(const NoTapeScope&) = delete;

 private:
  Tape* previous_;
};

// Convenience: backward() on the active tape.
void backward(const Tensor& loss);

// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every element.
Tensor finite_diff_grad(const std::function<Real(const Tensor&)>& f,
                        const Tensor& x, Real h);

}  // namespace geclip
