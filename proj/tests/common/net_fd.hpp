#pragma once

#include <functional>
#include <vector>

#include "dnas/supernet.hpp"
#include "gradcheck.hpp"

namespace dnas::testing {

using NetLoss = std::function<Var(Tape&, Var logits)>;

struct NetGradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t arch_checked = 0;
};

inline double net_loss(Supernet& net, const Tensor& images, const NetLoss& loss, const ForwardOptions& opt) {
  Tape tape;
  return loss(tape, net.forward(tape, images, opt)).value().item();
}

/// Central difference of `f` at 0 with step h, retried with smaller steps while the h and 2h
/// estimates disagree (a ReLU kink lies inside the stencil).
inline double kink_aware_derivative(const std::function<double(double)>& f, double h) {
  double d1 = 0.0;
  for (double step = h; step >= h * 1e-3; step /= 10.0) {
    d1 = (f(step) - f(-step)) / (2.0 * step);
    const double d2 = (f(2.0 * step) - f(-2.0 * step)) / (4.0 * step);
    const double rounding = 1e-14 / step;
    if (std::abs(d1 - d2) <= 1e-6 * std::max(std::abs(d1), std::abs(d2)) + rounding) return d1;
  }
  return d1;
}

/// Central differences on `count` coordinates drawn uniformly from all weights and
/// architecture logits, against one backward pass.
inline NetGradCheck net_gradcheck(Supernet& net, const Tensor& images, const NetLoss& loss, std::size_t count,
                                  std::uint64_t seed, double h = 1e-5, ForwardOptions opt = {}) {
  StateRegistry reg = net.registry();
  std::vector<Param*> params = reg.weights;
  params.insert(params.end(), reg.arch.begin(), reg.arch.end());
  for (Param* p : params) p->zero_grad();
  {
    Tape tape;
    tape.backward(loss(tape, net.forward(tape, images, opt)));
  }
  std::vector<std::pair<Param*, std::int64_t>> coords;
  for (Param* p : params)
    for (std::int64_t k = 0; k < p->value.numel(); ++k) coords.emplace_back(p, k);
  Rng rng(seed);
  NetGradCheck out;
  for (std::size_t i = 0; i < count; ++i) {
    auto [p, k] = coords[rng.below(coords.size())];
    const double orig = p->value[k];
    const double numeric = kink_aware_derivative(
        [&](double d) {
          p->value[k] = orig + d;
          const double v = net_loss(net, images, loss, opt);
          p->value[k] = orig;
          return v;
        },
        h);
    const double analytic = p->grad.numel() ? p->grad[k] : 0.0;
    out.max_rel_error = std::max(out.max_rel_error, rel_error(analytic, numeric));
    ++out.checked;
    if (p->name.rfind("arch.", 0) == 0) ++out.arch_checked;
  }
  return out;
}

}  // namespace dnas::testing
