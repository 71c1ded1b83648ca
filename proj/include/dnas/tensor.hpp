#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dnas/errors.hpp"

namespace dnas {

using Shape = std::vector<std::int64_t>;

std::int64_t numel_of(const Shape& shape);
std::string to_string(const Shape& shape);

/// Dense row-major array of doubles. Plain value type, never attached to a tape.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }
  static Tensor vector(std::vector<double> v) {
    const auto n = static_cast<std::int64_t>(v.size());
    return Tensor(Shape{n}, std::move(v));
  }

  const Shape& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  std::int64_t dim(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  std::int64_t numel() const noexcept { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const noexcept { return shape_.empty(); }

  double* ptr() noexcept { return data_.data(); }
  const double* ptr() const noexcept { return data_.data(); }
  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  double item() const;
  void fill(double v);
  void add_(const Tensor& other);
  Tensor reshaped(Shape shape) const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// A trainable array and its accumulated gradient.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;

  void zero_grad() {
    if (grad.shape() != value.shape()) grad = Tensor(value.shape());
    else grad.fill(0.0);
  }
};

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  bool valid() const noexcept { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Append-only record of primitive operations for reverse-mode differentiation.
/// A tape is built per step and discarded; it is not thread-safe.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Detached input; never receives a gradient.
  Var constant(Tensor value);
  /// Free leaf that receives a gradient (read back with grad()).
  Var leaf(Tensor value);
  /// Leaf bound to a Param; backward() accumulates into param.grad when tracked.
  Var param(Param& p, bool track = true);

  /// Records the result of a primitive. `backward` receives this node's id and
  /// must accumulate into the gradients of inputs that require them.
  Var record(std::string_view op, std::span<const Var> inputs, Tensor value, BackwardFn backward);

  /// Reverse sweep from a scalar. Every leaf that requires a gradient ends up
  /// with one (zeros if unused); bound params have it added to Param::grad.
  void backward(Var loss);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  /// Gradient buffer of a node, allocated as zeros on first access.
  Tensor& grad(std::size_t id);
  /// Gradient of a recorded value after backward(); zeros when it got none.
  Tensor grad(const Var& v) const;

  std::size_t size() const noexcept { return nodes_.size(); }
  std::string_view op_name(std::size_t id) const { return nodes_[id].op; }
  const std::vector<std::size_t>& inputs_of(std::size_t id) const { return nodes_[id].inputs; }

 private:
  struct Node {
    std::string_view op;
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    bool is_leaf = false;
    Param* param = nullptr;
  };

  Var push(Node node);

  std::deque<Node> nodes_;  // stable references across push_back
};

}  // namespace dnas
