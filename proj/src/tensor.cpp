#include "dnas/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "dnas/rng.hpp"

namespace dnas {

std::int64_t numel_of(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw ShapeError("negative extent in shape " + to_string(shape));
    n *= d;
  }
  return n;
}

std::string to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(numel_of(shape_)), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (numel_of(shape_) != static_cast<std::int64_t>(data_.size())) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                     to_string(shape_));
  }
}

double Tensor::item() const {
  if (data_.size() != 1) throw RankError("item() on tensor of shape " + to_string(shape_));
  return data_[0];
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

void Tensor::add_(const Tensor& other) {
  if (other.shape_ != shape_) {
    throw ShapeError("add_: " + to_string(shape_) + " vs " + to_string(other.shape_));
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (numel_of(shape) != numel()) {
    throw ShapeError("reshape " + to_string(shape_) + " -> " + to_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  Node n;
  n.op = "constant";
  n.value = std::move(value);
  n.is_leaf = true;
  return push(std::move(n));
}

Var Tape::leaf(Tensor value) {
  Node n;
  n.op = "leaf";
  n.value = std::move(value);
  n.requires_grad = true;
  n.is_leaf = true;
  return push(std::move(n));
}

Var Tape::param(Param& p, bool track) {
  Node n;
  n.op = "param";
  n.value = p.value;
  n.requires_grad = track;
  n.is_leaf = true;
  n.param = track ? &p : nullptr;
  return push(std::move(n));
}

Var Tape::record(std::string_view op, std::span<const Var> inputs, Tensor value, BackwardFn backward) {
  Node n;
  n.op = op;
  n.value = std::move(value);
  n.inputs.reserve(inputs.size());
  for (const auto& in : inputs) {
    if (in.tape_ != this) throw std::logic_error(std::string(op) + ": input recorded on another tape");
    n.inputs.push_back(in.id_);
    n.requires_grad = n.requires_grad || nodes_[in.id_].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

Tensor& Tape::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.shape() != n.value.shape()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

Tensor Tape::grad(const Var& v) const {
  const Node& n = nodes_[v.id_];
  if (n.grad.shape() == n.value.shape()) return n.grad;
  return Tensor(n.value.shape());
}

void Tape::backward(Var loss) {
  if (loss.tape_ != this) throw std::logic_error("backward: loss recorded on another tape");
  if (loss.value().numel() != 1) {
    throw RankError("backward needs a scalar loss, got shape " + to_string(loss.shape()));
  }
  grad(loss.id_).fill(1.0);
  for (std::size_t i = loss.id_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad) continue;
    if (n.is_leaf) {
      Tensor& g = grad(i);
      if (n.param) {
        if (n.param->grad.shape() != g.shape()) n.param->grad = Tensor(g.shape());
        n.param->grad.add_(g);
      }
      continue;
    }
    if (n.grad.shape() != n.value.shape()) continue;  // no gradient reached this node
    n.backward(*this, i);
  }
}

std::string Rng::state() const {
  std::ostringstream os;
  os << engine_;
  return os.str();
}

void Rng::set_state(const std::string& s) {
  std::istringstream is(s);
  is >> engine_;
  if (!is) throw IoError("corrupt RNG state");
}

}  // namespace dnas
