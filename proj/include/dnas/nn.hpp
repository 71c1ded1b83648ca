#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dnas/ops.hpp"
#include "dnas/rng.hpp"
#include "dnas/tensor.hpp"

namespace dnas {

/// Per-forward settings shared by every block.
struct ForwardContext {
  Tape& tape;
  bool training = true;
  bool track_weights = true;  ///< weights receive gradients
  bool track_arch = true;     ///< architecture logits receive gradients

  Var weight(Param& p) const { return tape.param(p, track_weights); }
  Var arch(Param& p) const { return tape.param(p, track_arch); }
};

/// Flat view of a model's mutable state, in a fixed order.
struct StateRegistry {
  std::vector<Param*> weights;
  std::vector<Param*> arch;
  std::vector<std::pair<std::string, ops::BatchNormStats*>> buffers;
};

Param make_conv_weight(std::string name, Shape shape, Rng& rng);

struct BatchNorm {
  Param gamma;
  Param beta;
  ops::BatchNormStats stats;
  double momentum = 0.1;
  double eps = 1e-5;

  static BatchNorm make(const std::string& name, std::int64_t channels);
  Var forward(const ForwardContext& ctx, Var x);
  void register_state(StateRegistry& reg);
};

/// Convolution (no bias) followed by batch-norm and an optional ReLU.
struct ConvBn {
  Param weight;
  BatchNorm bn;
  int stride = 1;
  bool relu = true;

  static ConvBn make(const std::string& name, std::int64_t in, std::int64_t out, int kernel, int stride, bool relu,
                     Rng& rng);
  Var forward(const ForwardContext& ctx, Var x);
  void register_state(StateRegistry& reg);
};

/// Expand 1x1 -> depthwise k x k -> project 1x1, each followed by batch-norm;
/// ReLU after the first two stages, linear projection.
struct InvertedBottleneck {
  std::int64_t in_channels = 0;
  std::int64_t out_channels = 0;
  int kernel_size = 3;
  int expansion = 1;
  Param expand;
  BatchNorm expand_bn;
  Param depthwise;
  BatchNorm depthwise_bn;
  Param project;
  BatchNorm project_bn;

  static InvertedBottleneck make(const std::string& name, std::int64_t in, std::int64_t out, int kernel,
                                 int expansion, Rng& rng);
  std::int64_t hidden_channels() const { return in_channels * expansion; }
  void register_state(StateRegistry& reg);
};

Var apply_bottleneck(const ForwardContext& ctx, InvertedBottleneck& block, Var x);

/// Aligns a feature map produced at `source_scale` with a cell at `target_scale`.
/// Finer sources go through a stride-2 3x3 conv, coarser ones through a bilinear
/// x2 upsample then a 1x1 conv; both end in batch-norm without activation.
/// Same scale with equal channels is the identity.
struct Preprocess {
  enum class Kind { Identity, Down, Up, Project };

  int source_scale = 1;
  int target_scale = 1;
  Kind kind = Kind::Identity;
  ConvBn conv;

  static Preprocess make(const std::string& name, int source_scale, int target_scale, std::int64_t in_channels,
                         std::int64_t out_channels, Rng& rng);
  void register_state(StateRegistry& reg);
};

Var preprocess(const ForwardContext& ctx, Preprocess& p, Var y);

struct ChannelSample {
  std::vector<std::int64_t> selected;  ///< ascending channel ids processed by the cell
  std::vector<double> mask;            ///< 1 for selected channels, 0 for bypassed ones
};

/// Chooses round(channels * ratio) channels, reproducibly from `seed`.
ChannelSample sample_channels(std::int64_t channels, double ratio, std::uint64_t seed);

/// Gathers the sampled channels of x; the rest bypass the cell (see merge_channels).
std::pair<Var, ChannelSample> sample_channels(Var x, double ratio, std::uint64_t seed);

}  // namespace dnas
