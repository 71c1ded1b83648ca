#include "dnas/regularizer.hpp"

#include <algorithm>
#include <cmath>

#include "dnas/errors.hpp"
#include "dnas/ops.hpp"

namespace dnas {
namespace {

Var cell_entropy(Tape& tape, Param& logits, const std::vector<std::int64_t>& keep, bool track) {
  Var z = tape.param(logits, track);
  if (static_cast<std::int64_t>(keep.size()) != logits.value.numel()) z = ops::select(z, keep);
  Var p = ops::softmax(z, 0);
  Var lp = ops::log_softmax(z, 0);
  return ops::scale(ops::sum(ops::mul(p, lp)), -1.0);
}

template <class KeepFn, class LogitsFn>
Var mean_entropy(Tape& tape, ArchParams& arch, bool track, KeepFn keep_of, LogitsFn logits_of) {
  if (arch.cells.empty()) return tape.constant(Tensor::scalar(0.0));
  Var total;
  for (std::size_t c = 0; c < arch.cells.size(); ++c) {
    Var h = cell_entropy(tape, logits_of(arch.cells[c]), keep_of(arch.cells[c], c), track);
    total = total.valid() ? ops::add(total, h) : h;
  }
  return ops::scale(total, 1.0 / static_cast<double>(arch.cells.size()));
}

}  // namespace

Scaling parse_scaling(std::string_view name) {
  if (name == "constant") return Scaling::Constant;
  if (name == "linear") return Scaling::Linear;
  throw ConfigError("entropy.scaling: expected 'constant' or 'linear', got '" + std::string(name) + "'");
}

std::string to_string(Scaling s) { return s == Scaling::Constant ? "constant" : "linear"; }

void EntropySchedule::validate() const {
  if (!(c_alpha >= 0.0) || !(c_beta >= 0.0)) throw ConfigError("entropy: magnitudes must be nonnegative");
  if (!(activation_fraction >= 0.0 && activation_fraction <= 1.0))
    throw ConfigError("entropy.activation: must lie in [0, 1]");
  if (!(search_end >= 0.0 && search_end <= 1.0)) throw ConfigError("entropy.search_end: must lie in [0, 1]");
}

double magnitude_preset(std::string_view name) {
  if (name == "none" || name == "-" || name == "0") return 0.0;
  if (name == "L") return 0.1;
  if (name == "M") return 0.5;
  if (name == "H") return 2.0;
  throw ConfigError("entropy magnitude: unknown preset '" + std::string(name) + "'");
}

double entropy_of(std::span<const double> probs) {
  if (probs.empty()) throw DomainError("entropy_of: empty distribution");
  double total = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0)) throw DomainError("entropy_of: negative or NaN probability");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw DomainError("entropy_of: probabilities sum to " + std::to_string(total));
  double h = 0.0;
  for (double p : probs)
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

double scaling_value(const EntropySchedule& s, double t) {
  if (t < s.activation_fraction) return 0.0;
  if (s.scaling == Scaling::Constant) return 1.0;
  if (s.search_end <= s.activation_fraction || t >= s.search_end) return 1.0;
  return (t - s.activation_fraction) / (s.search_end - s.activation_fraction);
}

Var mean_edge_entropy(Tape& tape, ArchParams& arch, bool track, const PruneMask* mask) {
  return mean_entropy(
      tape, arch, track, [mask](const CellArch& c, std::size_t i) { return surviving_edges(c, i, mask); },
      [](CellArch& c) -> Param& { return c.beta; });
}

Var mean_op_entropy(Tape& tape, ArchParams& arch, bool track, const PruneMask* mask) {
  return mean_entropy(
      tape, arch, track, [mask](const CellArch& c, std::size_t i) { return surviving_ops(c, i, mask); },
      [](CellArch& c) -> Param& { return c.alpha; });
}

Var entropy_loss(Tape& tape, ArchParams& arch, const EntropySchedule& schedule, double t, bool track) {
  const double f = scaling_value(schedule, t);
  if (f == 0.0 || !schedule.active()) return tape.constant(Tensor::scalar(0.0));
  Var loss;
  if (schedule.c_beta > 0.0) loss = ops::scale(mean_edge_entropy(tape, arch, track), f * schedule.c_beta);
  if (schedule.c_alpha > 0.0) {
    Var a = ops::scale(mean_op_entropy(tape, arch, track), f * schedule.c_alpha);
    loss = loss.valid() ? ops::add(loss, a) : a;
  }
  return loss;
}

}  // namespace dnas
