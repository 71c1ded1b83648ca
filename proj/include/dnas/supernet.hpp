#pragma once

#include <compare>
#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dnas/nn.hpp"
#include "dnas/tensor.hpp"

namespace dnas {

/// Topology and width of the weight-sharing grid.
struct SupernetConfig {
  int layers = 4;
  int filter_multiplier = 8;
  int expansion = 2;
  double sampling_ratio = 1.0;
  std::vector<int> scales{2, 4, 8};
  std::vector<int> kernel_set{3, 5};
  int num_classes = 4;
  int in_channels = 3;
  int decoder_width = 0;  // 0 means filter_multiplier

  /// Channels of cells at scales[index]: F * scale / min_scale.
  std::int64_t channels_at(std::size_t scale_index) const;
  int head_width() const { return decoder_width > 0 ? decoder_width : filter_multiplier; }
  int max_scale() const { return scales.back(); }
  /// Throws ConfigError naming the offending field.
  void validate() const;

  /// "tiny" (desk scale) or one of the model-size table rows:
  /// "small", "small-deep", "medium", "large".
  static SupernetConfig preset(std::string_view name);
  static std::vector<std::string> preset_names();

  friend bool operator==(const SupernetConfig&, const SupernetConfig&) = default;
};

/// Identifies a transmission into cell (layer, scale) from `source` of the previous layer.
struct EdgeKey {
  int layer = 0;
  int scale = 0;
  int source = 0;
  auto operator<=>(const EdgeKey&) const = default;
};

struct CellArch {
  int layer = 0;
  int scale = 0;
  std::vector<int> sources;  ///< ascending source scales; one beta logit each
  Param beta;
  Param alpha;  ///< one logit per kernel in the kernel set
};

/// Architecture logits for every cell, layer-major then ascending scale.
struct ArchParams {
  std::vector<CellArch> cells;
  std::vector<int> kernel_set;

  std::size_t num_edges() const;
  std::size_t size(bool include_alpha = true, bool include_beta = true) const;
  /// Concatenation [alpha of all cells..., beta of all cells...] (groups as selected).
  std::vector<double> flatten(bool include_alpha = true, bool include_beta = true) const;
  void assign(std::span<const double> flat, bool include_alpha = true, bool include_beta = true);
  std::vector<double> flatten_grad(bool include_alpha = true, bool include_beta = true) const;
  void zero_grad();
};

/// Edges (and optionally kernels) removed from the supernet at inference.
struct PruneMask {
  std::set<EdgeKey> dropped_edges;
  std::set<std::pair<std::size_t, std::size_t>> dropped_ops;  ///< (cell index, kernel index)
  double fraction = 0.0;

  bool empty() const { return dropped_edges.empty() && dropped_ops.empty(); }
  bool drops(const EdgeKey& e) const { return dropped_edges.count(e) != 0; }
};

/// Indices of a cell's surviving incoming edges / kernels under `mask` (all when null).
std::vector<std::int64_t> surviving_edges(const CellArch& cell, std::size_t cell_index, const PruneMask* mask);
std::vector<std::int64_t> surviving_ops(const CellArch& cell, std::size_t cell_index, const PruneMask* mask);

/// Softmax of the cell's beta over surviving edges, zeros at dropped ones.
std::vector<double> edge_weights(const CellArch& cell, std::size_t cell_index, const PruneMask* mask = nullptr);
std::vector<double> op_weights(const CellArch& cell, std::size_t cell_index, const PruneMask* mask = nullptr);

/// X = sum_t softmax(beta)_t * aligned[t]. Throws TopologyError with no inputs.
Var mix_edges(std::span<const Var> aligned, Var beta_logits);
/// Y = sum_k softmax(alpha)_k * outputs[k].
Var mix_ops(std::span<const Var> outputs, Var alpha_logits);

struct ForwardOptions {
  bool training = true;
  bool track_weights = true;
  bool track_arch = true;
  const PruneMask* mask = nullptr;
  std::uint64_t sampling_seed = 0;
};

struct Cell {
  int layer = 0;
  std::size_t scale_index = 0;
  std::vector<Preprocess> inputs;  ///< parallel to CellArch::sources
  std::vector<InvertedBottleneck> ops;  ///< parallel to kernel_set
};

struct DecoderHead {
  std::vector<ConvBn> lateral;  ///< per scale, 1x1 to the head width
  ConvBn fuse;                  ///< 3x3 over the concatenated laterals
  Param classifier;             ///< 1x1 projection to classes
  Param classifier_bias;
};

class Supernet {
 public:
  /// Materializes the grid. Logits start at zero, weights per the nn init policy.
  static Supernet build(const SupernetConfig& config, std::uint64_t seed);

  const SupernetConfig& config() const { return config_; }
  ArchParams& arch() { return arch_; }
  const ArchParams& arch() const { return arch_; }
  std::size_t num_cells() const { return cells_.size(); }
  std::size_t cell_index(int layer, std::size_t scale_index) const {
    return static_cast<std::size_t>(layer) * config_.scales.size() + scale_index;
  }
  Cell& cell(std::size_t index) { return cells_[index]; }

  /// images: [N, C_in, H, W] with H, W divisible by the largest scale.
  /// Returns logits [N, classes, H, W].
  Var forward(Tape& tape, const Tensor& images, const ForwardOptions& options = {});

  std::vector<Var> stem_forward(const ForwardContext& ctx, Var image);
  Var cell_input(const ForwardContext& ctx, std::size_t cell, std::span<const Var> previous,
                 const PruneMask* mask = nullptr);
  Var cell_forward(const ForwardContext& ctx, std::size_t cell, Var x, const PruneMask* mask = nullptr,
                   std::uint64_t sampling_seed = 0);
  Var decode_head(const ForwardContext& ctx, std::span<const Var> outputs, std::int64_t out_h, std::int64_t out_w);

  /// Pointers into this object; invalidated by moving or copying the supernet.
  StateRegistry registry();
  std::int64_t weight_count();

  DecoderHead& head() { return head_; }
  std::vector<ConvBn>& stem() { return stem_; }

 private:
  SupernetConfig config_;
  std::vector<ConvBn> stem_;
  std::vector<Cell> cells_;
  ArchParams arch_;
  DecoderHead head_;
};

struct ModelCost {
  double flops = 0.0;          ///< 2 x multiply-accumulates of convolutions + mixture arithmetic
  std::int64_t params = 0;     ///< trainable weights (conv, norm affine, classifier)
  std::int64_t arch_params = 0;
};

/// Analytic cost of one forward pass at input resolution height x width.
ModelCost count_flops_params(const SupernetConfig& config, std::int64_t height, std::int64_t width);

/// Closed-form costs of the individual building blocks.
namespace cost {
ModelCost conv(std::int64_t in, std::int64_t out, int kernel, std::int64_t out_h, std::int64_t out_w,
               bool bias = false);
ModelCost depthwise(std::int64_t channels, int kernel, std::int64_t out_h, std::int64_t out_w);
ModelCost batch_norm(std::int64_t channels);
ModelCost mixture(std::int64_t terms, std::int64_t elements);
ModelCost bottleneck(std::int64_t in, std::int64_t out, int kernel, int expansion, std::int64_t h, std::int64_t w);
}  // namespace cost

}  // namespace dnas
