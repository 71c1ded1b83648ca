#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "dnas/rng.hpp"
#include "dnas/tensor.hpp"

namespace dnas::testing {

using GraphFn = std::function<Var(Tape&, std::vector<Var>&)>;

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

/// |a - n| / max(|a|, |n|, floor)
inline double rel_error(double a, double n, double floor = 1e-6) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

inline double eval_graph(const std::vector<Tensor>& inputs, const GraphFn& fn) {
  Tape tape;
  std::vector<Var> leaves;
  for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
  return fn(tape, leaves).value().item();
}

/// Central differences against the tape's gradients. At most `per_input` coordinates of
/// each input are probed, chosen at random.
inline GradCheck gradcheck(std::vector<Tensor> inputs, const GraphFn& fn, double h = 1e-5,
                           std::size_t per_input = 64, std::uint64_t seed = 0) {
  Tape tape;
  std::vector<Var> leaves;
  for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
  Var loss = fn(tape, leaves);
  tape.backward(loss);
  std::vector<Tensor> analytic;
  for (const auto& l : leaves) analytic.push_back(tape.grad(l));

  GradCheck out;
  Rng rng(seed);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto n = static_cast<std::uint64_t>(inputs[i].numel());
    std::vector<std::int64_t> coords;
    if (n <= per_input) {
      for (std::uint64_t k = 0; k < n; ++k) coords.push_back(static_cast<std::int64_t>(k));
    } else {
      for (std::size_t k = 0; k < per_input; ++k) coords.push_back(static_cast<std::int64_t>(rng.below(n)));
    }
    for (auto k : coords) {
      const double orig = inputs[i][k];
      inputs[i][k] = orig + h;
      const double fp = eval_graph(inputs, fn);
      inputs[i][k] = orig - h;
      const double fm = eval_graph(inputs, fn);
      inputs[i][k] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      out.max_rel_error = std::max(out.max_rel_error, rel_error(analytic[i][k], numeric));
      ++out.checked;
    }
  }
  return out;
}

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

}  // namespace dnas::testing
