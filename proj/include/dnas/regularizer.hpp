#pragma once

#include <span>
#include <string>
#include <string_view>

#include "dnas/supernet.hpp"
#include "dnas/tensor.hpp"

namespace dnas {

enum class Scaling { Constant, Linear };

Scaling parse_scaling(std::string_view name);
std::string to_string(Scaling s);

struct EntropySchedule {
  double c_alpha = 0.0;
  double c_beta = 0.0;
  Scaling scaling = Scaling::Constant;
  double activation_fraction = 0.15;
  /// Training progress at which the searching phase ends; the linear ramp reaches 1 here.
  double search_end = 0.40;

  bool active() const { return c_alpha > 0.0 || c_beta > 0.0; }
  void validate() const;
};

/// Named magnitudes used by the ablations: "none" (0), "L", "M", "H".
double magnitude_preset(std::string_view name);

/// H = -sum p ln p. Throws DomainError unless probs is a simplex (sum 1 +- 1e-9, entries >= 0).
double entropy_of(std::span<const double> probs);

/// f(t) of the schedule, t in [0, 1].
double scaling_value(const EntropySchedule& schedule, double t);

/// Differentiable mean per-cell entropy of softmax(logits) over cells; masked entries excluded.
Var mean_edge_entropy(Tape& tape, ArchParams& arch, bool track, const PruneMask* mask = nullptr);
Var mean_op_entropy(Tape& tape, ArchParams& arch, bool track, const PruneMask* mask = nullptr);

/// f(t) * (c_beta * mean H(beta^) + c_alpha * mean H(alpha^)). A constant zero when f(t) = 0.
Var entropy_loss(Tape& tape, ArchParams& arch, const EntropySchedule& schedule, double t, bool track = true);

}  // namespace dnas
