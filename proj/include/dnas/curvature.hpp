#pragma once

#include <cstdint>
#include <functional>
#include <ostream>
#include <span>
#include <vector>

#include "dnas/protocol.hpp"
#include "dnas/supernet.hpp"

namespace dnas {

/// Gradient of a scalar loss at a flat parameter point.
using GradientFn = std::function<std::vector<double>(std::span<const double> theta)>;

/// [g(theta + eps u) - g(theta - eps u)] / (2 eps) * |v| with u = v / |v|.
std::vector<double> hvp(const GradientFn& grad, std::span<const double> theta, std::span<const double> v,
                        double eps = 1e-3);

struct PowerIterationConfig {
  int max_iters = 100;
  double tol = 1e-6;
  double eps = 1e-3;
  /// Directions iterated together; 1 is plain power iteration.
  int block = 3;
};

struct EigenResult {
  double lambda = 0.0;
  int iterations = 0;
  bool zero_curvature = false;
};

/// Signed eigenvalue of largest magnitude, by block power iteration with a Rayleigh-Ritz readout.
EigenResult dominant_eigenvalue(const GradientFn& grad, std::span<const double> theta, std::uint64_t seed,
                                const PowerIterationConfig& config = {});

enum class ArchGroup { AlphaBeta, AlphaOnly };

/// Validation cross-entropy gradient w.r.t. the architecture logits, in eval mode, on fixed batches.
/// Every call leaves the supernet's logits bit-identical to how it found them.
class ValidationLandscape {
 public:
  ValidationLandscape(Supernet& net, std::vector<Batch> batches, ArchGroup group = ArchGroup::AlphaBeta);

  std::vector<double> point() const;
  std::vector<double> gradient(std::span<const double> theta);
  double loss(std::span<const double> theta);
  GradientFn as_function();

 private:
  bool alpha() const { return true; }
  bool beta() const { return group_ == ArchGroup::AlphaBeta; }

  Supernet& net_;
  std::vector<Batch> batches_;
  ArchGroup group_;
};

struct EigenTrace {
  std::vector<int> epochs;
  std::vector<double> lambda_max;
  std::vector<int> iterations;
  double hvp_epsilon = 1e-3;
};

struct TraceConfig {
  int every_n_epochs = 5;
  int batches = 2;
  int batch_size = 8;
  ArchGroup group = ArchGroup::AlphaBeta;
  PowerIterationConfig power;
};

/// Fixed held-out batches drawn from the front of the validation pool.
std::vector<Batch> held_out_batches(const DataPools& data, int batches, int batch_size);

/// Hook that appends to `trace` every n epochs (and on the last epoch if it is a multiple).
std::function<void(int, Supernet&, MetricsRow&)> make_trace_hook(EigenTrace& trace, const DataPools& data,
                                                                 const TraceConfig& config, std::uint64_t seed);

void write_eigen_csv(std::ostream& os, const EigenTrace& trace);

}  // namespace dnas
