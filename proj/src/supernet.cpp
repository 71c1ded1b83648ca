#include "dnas/supernet.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <tuple>

namespace dnas {
namespace {

std::string cell_name(int layer, int scale) {
  return "cell.l" + std::to_string(layer) + ".s" + std::to_string(scale);
}

bool is_power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

std::vector<double> softmax_subset(const Tensor& logits, const std::vector<std::int64_t>& keep) {
  std::vector<double> out(static_cast<std::size_t>(logits.numel()), 0.0);
  if (keep.empty()) return out;
  double mx = -std::numeric_limits<double>::infinity();
  for (auto i : keep) mx = std::max(mx, logits[i]);
  std::vector<double> e(keep.size());
  double z = 0.0;
  for (std::size_t j = 0; j < keep.size(); ++j) {
    e[j] = std::exp(logits[keep[j]] - mx);
    z += e[j];
  }
  for (std::size_t j = 0; j < keep.size(); ++j) out[static_cast<std::size_t>(keep[j])] = e[j] / z;
  return out;
}

std::int64_t sampled_channels(std::int64_t channels, double ratio) {
  return static_cast<std::int64_t>(std::llround(static_cast<double>(channels) * ratio));
}

}  // namespace

std::int64_t SupernetConfig::channels_at(std::size_t scale_index) const {
  return static_cast<std::int64_t>(filter_multiplier) * (scales.at(scale_index) / scales.front());
}

void SupernetConfig::validate() const {
  if (layers < 2) throw ConfigError("model.layers: need at least 2 layers, got " + std::to_string(layers));
  if (filter_multiplier < 1) throw ConfigError("model.filter_multiplier: must be >= 1");
  if (expansion < 1) throw ConfigError("model.expansion: must be >= 1");
  if (!(sampling_ratio > 0.0 && sampling_ratio <= 1.0)) throw ConfigError("model.sampling_ratio: must lie in (0, 1]");
  if (scales.size() < 2) throw ConfigError("model.scales: need at least 2 scales");
  for (std::size_t i = 0; i < scales.size(); ++i) {
    if (!is_power_of_two(scales[i])) throw ConfigError("model.scales: " + std::to_string(scales[i]) + " is not a power of two");
    if (i > 0 && scales[i] != 2 * scales[i - 1]) throw ConfigError("model.scales: scales must be consecutive powers of two");
  }
  if (kernel_set.empty()) throw ConfigError("model.kernel_set: empty");
  for (int k : kernel_set)
    if (k < 1 || k % 2 == 0) throw ConfigError("model.kernel_set: kernel " + std::to_string(k) + " is not odd");
  if (num_classes < 2) throw ConfigError("model.num_classes: need at least 2 classes");
  if (num_classes > 255) throw ConfigError("model.num_classes: at most 255 classes");
  if (in_channels < 1) throw ConfigError("model.in_channels: must be >= 1");
  if (decoder_width < 0) throw ConfigError("model.decoder_width: must be >= 0");
  for (std::size_t i = 0; i < scales.size(); ++i) (void)sample_channels(channels_at(i), sampling_ratio, 0);
}

SupernetConfig SupernetConfig::preset(std::string_view name) {
  SupernetConfig c;
  if (name == "tiny") return c;
  c.scales = {4, 8, 16, 32};
  c.kernel_set = {3, 5};
  c.num_classes = 19;
  if (name == "small") {
    c.layers = 10, c.filter_multiplier = 16, c.expansion = 3, c.sampling_ratio = 1.0;
  } else if (name == "small-deep") {
    c.layers = 14, c.filter_multiplier = 16, c.expansion = 6, c.sampling_ratio = 1.0;
  } else if (name == "medium") {
    c.layers = 14, c.filter_multiplier = 64, c.expansion = 6, c.sampling_ratio = 0.25;
  } else if (name == "large") {
    c.layers = 10, c.filter_multiplier = 64, c.expansion = 3, c.sampling_ratio = 1.0;
  } else {
    throw ConfigError("model.preset: unknown preset '" + std::string(name) + "'");
  }
  return c;
}

std::vector<std::string> SupernetConfig::preset_names() { return {"tiny", "small", "small-deep", "medium", "large"}; }

std::size_t ArchParams::num_edges() const {
  std::size_t n = 0;
  for (const auto& c : cells) n += c.sources.size();
  return n;
}

std::size_t ArchParams::size(bool include_alpha, bool include_beta) const {
  std::size_t n = 0;
  for (const auto& c : cells) {
    if (include_alpha) n += static_cast<std::size_t>(c.alpha.value.numel());
    if (include_beta) n += static_cast<std::size_t>(c.beta.value.numel());
  }
  return n;
}

std::vector<double> ArchParams::flatten(bool include_alpha, bool include_beta) const {
  std::vector<double> out;
  out.reserve(size(include_alpha, include_beta));
  if (include_alpha)
    for (const auto& c : cells) out.insert(out.end(), c.alpha.value.data().begin(), c.alpha.value.data().end());
  if (include_beta)
    for (const auto& c : cells) out.insert(out.end(), c.beta.value.data().begin(), c.beta.value.data().end());
  return out;
}

std::vector<double> ArchParams::flatten_grad(bool include_alpha, bool include_beta) const {
  std::vector<double> out;
  out.reserve(size(include_alpha, include_beta));
  auto append = [&out](const Param& p) {
    if (p.grad.shape() == p.value.shape()) {
      out.insert(out.end(), p.grad.data().begin(), p.grad.data().end());
    } else {
      out.insert(out.end(), static_cast<std::size_t>(p.value.numel()), 0.0);
    }
  };
  if (include_alpha)
    for (const auto& c : cells) append(c.alpha);
  if (include_beta)
    for (const auto& c : cells) append(c.beta);
  return out;
}

void ArchParams::assign(std::span<const double> flat, bool include_alpha, bool include_beta) {
  if (flat.size() != size(include_alpha, include_beta)) {
    throw ShapeError("ArchParams::assign: expected " + std::to_string(size(include_alpha, include_beta)) +
                     " values, got " + std::to_string(flat.size()));
  }
  std::size_t pos = 0;
  auto take = [&](Param& p) {
    for (auto& v : p.value.data()) v = flat[pos++];
  };
  if (include_alpha)
    for (auto& c : cells) take(c.alpha);
  if (include_beta)
    for (auto& c : cells) take(c.beta);
}

void ArchParams::zero_grad() {
  for (auto& c : cells) {
    c.alpha.zero_grad();
    c.beta.zero_grad();
  }
}

std::vector<std::int64_t> surviving_edges(const CellArch& cell, std::size_t, const PruneMask* mask) {
  std::vector<std::int64_t> keep;
  for (std::size_t j = 0; j < cell.sources.size(); ++j) {
    if (mask && mask->drops(EdgeKey{cell.layer, cell.scale, cell.sources[j]})) continue;
    keep.push_back(static_cast<std::int64_t>(j));
  }
  return keep;
}

std::vector<std::int64_t> surviving_ops(const CellArch& cell, std::size_t cell_index, const PruneMask* mask) {
  std::vector<std::int64_t> keep;
  for (std::int64_t k = 0; k < cell.alpha.value.numel(); ++k) {
    if (mask && mask->dropped_ops.count({cell_index, static_cast<std::size_t>(k)})) continue;
    keep.push_back(k);
  }
  return keep;
}

std::vector<double> edge_weights(const CellArch& cell, std::size_t cell_index, const PruneMask* mask) {
  return softmax_subset(cell.beta.value, surviving_edges(cell, cell_index, mask));
}

std::vector<double> op_weights(const CellArch& cell, std::size_t cell_index, const PruneMask* mask) {
  return softmax_subset(cell.alpha.value, surviving_ops(cell, cell_index, mask));
}

Var mix_edges(std::span<const Var> aligned, Var beta_logits) {
  if (aligned.empty()) throw TopologyError("cell has no incoming edge");
  return ops::mix(aligned, ops::softmax(beta_logits, 0));
}

Var mix_ops(std::span<const Var> outputs, Var alpha_logits) {
  if (outputs.empty()) throw TopologyError("cell has no candidate operation");
  return ops::mix(outputs, ops::softmax(alpha_logits, 0));
}

Supernet Supernet::build(const SupernetConfig& config, std::uint64_t seed) {
  config.validate();
  Supernet net;
  net.config_ = config;
  Rng rng(derive_seed(seed, {tag_of("supernet.weights")}));
  const auto& scales = config.scales;
  const std::size_t ns = scales.size();

  for (std::size_t si = 0; si < ns; ++si) {
    net.stem_.push_back(ConvBn::make("stem.s" + std::to_string(scales[si]), config.in_channels,
                                     config.channels_at(si), 3, 1, true, rng));
  }

  net.arch_.kernel_set = config.kernel_set;
  for (int l = 0; l < config.layers; ++l) {
    for (std::size_t si = 0; si < ns; ++si) {
      const std::string name = cell_name(l, scales[si]);
      Cell cell;
      cell.layer = l;
      cell.scale_index = si;
      CellArch arch;
      arch.layer = l;
      arch.scale = scales[si];
      const std::size_t lo = si == 0 ? 0 : si - 1;
      const std::size_t hi = std::min(si + 1, ns - 1);
      for (std::size_t sj = lo; sj <= hi; ++sj) {
        arch.sources.push_back(scales[sj]);
        cell.inputs.push_back(Preprocess::make(name + ".in" + std::to_string(scales[sj]), scales[sj], scales[si],
                                               config.channels_at(sj), config.channels_at(si), rng));
      }
      const std::int64_t c = sampled_channels(config.channels_at(si), config.sampling_ratio);
      for (int k : config.kernel_set) {
        cell.ops.push_back(
            InvertedBottleneck::make(name + ".op.k" + std::to_string(k), c, c, k, config.expansion, rng));
      }
      arch.beta = Param{"arch.l" + std::to_string(l) + ".s" + std::to_string(scales[si]) + ".beta",
                        Tensor(Shape{static_cast<std::int64_t>(arch.sources.size())}, 0.0), {}};
      arch.alpha = Param{"arch.l" + std::to_string(l) + ".s" + std::to_string(scales[si]) + ".alpha",
                         Tensor(Shape{static_cast<std::int64_t>(config.kernel_set.size())}, 0.0), {}};
      net.cells_.push_back(std::move(cell));
      net.arch_.cells.push_back(std::move(arch));
    }
  }

  const std::int64_t d = config.head_width();
  for (std::size_t si = 0; si < ns; ++si) {
    net.head_.lateral.push_back(
        ConvBn::make("head.lateral.s" + std::to_string(scales[si]), config.channels_at(si), d, 1, 1, true, rng));
  }
  net.head_.fuse = ConvBn::make("head.fuse", d * static_cast<std::int64_t>(ns), d, 3, 1, true, rng);
  net.head_.classifier = make_conv_weight("head.classifier", Shape{config.num_classes, d, 1, 1}, rng);
  net.head_.classifier_bias = Param{"head.classifier_bias", Tensor(Shape{config.num_classes}, 0.0), {}};
  return net;
}

std::vector<Var> Supernet::stem_forward(const ForwardContext& ctx, Var image) {
  const Shape& s = image.shape();
  if (s.size() != 4 || s[1] != config_.in_channels) {
    throw ShapeError("stem expects [N, " + std::to_string(config_.in_channels) + ", H, W], got " + to_string(s));
  }
  if (s[2] % config_.max_scale() != 0 || s[3] % config_.max_scale() != 0) {
    throw ShapeError("image size " + std::to_string(s[2]) + "x" + std::to_string(s[3]) +
                     " is not divisible by the largest scale " + std::to_string(config_.max_scale()));
  }
  std::vector<Var> out;
  for (std::size_t si = 0; si < config_.scales.size(); ++si) {
    const int sc = config_.scales[si];
    Var resized = ops::resize_bilinear(image, s[2] / sc, s[3] / sc);
    out.push_back(stem_[si].forward(ctx, resized));
  }
  return out;
}

Var Supernet::cell_input(const ForwardContext& ctx, std::size_t c, std::span<const Var> previous,
                         const PruneMask* mask) {
  CellArch& arch = arch_.cells[c];
  Cell& cell = cells_[c];
  if (previous.size() != config_.scales.size()) {
    throw TopologyError("cell_input: expected " + std::to_string(config_.scales.size()) + " predecessor outputs");
  }
  const auto keep = surviving_edges(arch, c, mask);
  std::vector<Var> aligned;
  aligned.reserve(keep.size());
  for (auto j : keep) {
    const auto src = static_cast<std::size_t>(
        std::find(config_.scales.begin(), config_.scales.end(), arch.sources[static_cast<std::size_t>(j)]) -
        config_.scales.begin());
    aligned.push_back(preprocess(ctx, cell.inputs[static_cast<std::size_t>(j)], previous[src]));
  }
  Var beta = ctx.arch(arch.beta);
  if (keep.size() != arch.sources.size()) beta = ops::select(beta, keep);
  return mix_edges(aligned, beta);
}

Var Supernet::cell_forward(const ForwardContext& ctx, std::size_t c, Var x, const PruneMask* mask,
                           std::uint64_t sampling_seed) {
  CellArch& arch = arch_.cells[c];
  Cell& cell = cells_[c];
  const std::int64_t channels = config_.channels_at(cell.scale_index);
  if (x.shape().size() != 4 || x.shape()[1] != channels) {
    throw ShapeError("cell " + cell_name(arch.layer, arch.scale) + " expects " + std::to_string(channels) +
                     " channels, got " + to_string(x.shape()));
  }
  Var xs = x;
  ChannelSample sample;
  const bool partial = config_.sampling_ratio < 1.0;
  if (partial) std::tie(xs, sample) = sample_channels(x, config_.sampling_ratio, sampling_seed);

  const auto keep = surviving_ops(arch, c, mask);
  std::vector<Var> outs;
  outs.reserve(keep.size());
  for (auto k : keep) outs.push_back(apply_bottleneck(ctx, cell.ops[static_cast<std::size_t>(k)], xs));
  Var alpha = ctx.arch(arch.alpha);
  if (keep.size() != static_cast<std::size_t>(arch.alpha.value.numel())) alpha = ops::select(alpha, keep);
  Var y = mix_ops(outs, alpha);
  if (partial && static_cast<std::int64_t>(sample.selected.size()) < channels) {
    y = ops::merge_channels(x, y, sample.selected);
  }
  return y;
}

Var Supernet::decode_head(const ForwardContext& ctx, std::span<const Var> outputs, std::int64_t out_h,
                          std::int64_t out_w) {
  if (outputs.size() != config_.scales.size()) {
    throw ShapeError("decode_head: expected one output per scale (" + std::to_string(config_.scales.size()) + ")");
  }
  const std::int64_t fh = outputs[0].shape()[2], fw = outputs[0].shape()[3];
  std::vector<Var> lat;
  for (std::size_t si = 0; si < outputs.size(); ++si) {
    Var v = head_.lateral[si].forward(ctx, outputs[si]);
    if (v.shape()[2] != fh || v.shape()[3] != fw) v = ops::resize_bilinear(v, fh, fw);
    lat.push_back(v);
  }
  Var fused = head_.fuse.forward(ctx, ops::concat(lat, 1));
  Var logits = ops::conv2d(fused, ctx.weight(head_.classifier));
  logits = ops::add_channel_bias(logits, ctx.weight(head_.classifier_bias));
  if (fh != out_h || fw != out_w) logits = ops::resize_bilinear(logits, out_h, out_w);
  return logits;
}

Var Supernet::forward(Tape& tape, const Tensor& images, const ForwardOptions& options) {
  ForwardContext ctx{tape, options.training, options.track_weights, options.track_arch};
  Var image = tape.constant(images);
  std::vector<Var> prev = stem_forward(ctx, image);
  const std::size_t ns = config_.scales.size();
  for (int l = 0; l < config_.layers; ++l) {
    std::vector<Var> cur;
    cur.reserve(ns);
    for (std::size_t si = 0; si < ns; ++si) {
      const std::size_t c = cell_index(l, si);
      Var x = cell_input(ctx, c, prev, options.mask);
      cur.push_back(cell_forward(ctx, c, x, options.mask, derive_seed(options.sampling_seed, {c})));
    }
    prev = std::move(cur);
  }
  return decode_head(ctx, prev, images.shape()[2], images.shape()[3]);
}

StateRegistry Supernet::registry() {
  StateRegistry reg;
  for (auto& s : stem_) s.register_state(reg);
  for (auto& c : cells_) {
    for (auto& p : c.inputs) p.register_state(reg);
    for (auto& o : c.ops) o.register_state(reg);
  }
  for (auto& l : head_.lateral) l.register_state(reg);
  head_.fuse.register_state(reg);
  reg.weights.push_back(&head_.classifier);
  reg.weights.push_back(&head_.classifier_bias);
  for (auto& a : arch_.cells) {
    reg.arch.push_back(&a.alpha);
    reg.arch.push_back(&a.beta);
  }
  return reg;
}

std::int64_t Supernet::weight_count() {
  std::int64_t n = 0;
  for (const Param* p : registry().weights) n += p->value.numel();
  return n;
}

namespace cost {

ModelCost conv(std::int64_t in, std::int64_t out, int kernel, std::int64_t out_h, std::int64_t out_w, bool bias) {
  const std::int64_t k2 = static_cast<std::int64_t>(kernel) * kernel;
  ModelCost c;
  c.params = in * out * k2 + (bias ? out : 0);
  c.flops = 2.0 * static_cast<double>(in * out * k2) * static_cast<double>(out_h * out_w);
  return c;
}

ModelCost depthwise(std::int64_t channels, int kernel, std::int64_t out_h, std::int64_t out_w) {
  const std::int64_t k2 = static_cast<std::int64_t>(kernel) * kernel;
  ModelCost c;
  c.params = channels * k2;
  c.flops = 2.0 * static_cast<double>(channels * k2) * static_cast<double>(out_h * out_w);
  return c;
}

ModelCost batch_norm(std::int64_t channels) {
  ModelCost c;
  c.params = 2 * channels;
  return c;
}

ModelCost mixture(std::int64_t terms, std::int64_t elements) {
  ModelCost c;
  c.flops = 2.0 * static_cast<double>(terms) * static_cast<double>(elements);
  return c;
}

ModelCost bottleneck(std::int64_t in, std::int64_t out, int kernel, int expansion, std::int64_t h, std::int64_t w) {
  const std::int64_t hid = in * expansion;
  ModelCost total;
  for (const ModelCost& part : {conv(in, hid, 1, h, w), batch_norm(hid), depthwise(hid, kernel, h, w),
                                batch_norm(hid), conv(hid, out, 1, h, w), batch_norm(out)}) {
    total.flops += part.flops;
    total.params += part.params;
  }
  return total;
}

}  // namespace cost

ModelCost count_flops_params(const SupernetConfig& config, std::int64_t height, std::int64_t width) {
  config.validate();
  ModelCost total;
  auto add = [&total](const ModelCost& c) {
    total.flops += c.flops;
    total.params += c.params;
  };
  const auto& scales = config.scales;
  const std::size_t ns = scales.size();
  auto h_at = [&](std::size_t si) { return height / scales[si]; };
  auto w_at = [&](std::size_t si) { return width / scales[si]; };

  for (std::size_t si = 0; si < ns; ++si) {
    add(cost::conv(config.in_channels, config.channels_at(si), 3, h_at(si), w_at(si)));
    add(cost::batch_norm(config.channels_at(si)));
  }
  for (int l = 0; l < config.layers; ++l) {
    for (std::size_t si = 0; si < ns; ++si) {
      const std::int64_t ch = config.channels_at(si);
      const std::size_t lo = si == 0 ? 0 : si - 1;
      const std::size_t hi = std::min(si + 1, ns - 1);
      std::int64_t edges = 0;
      for (std::size_t sj = lo; sj <= hi; ++sj, ++edges) {
        const std::int64_t src = config.channels_at(sj);
        if (sj + 1 == si) {
          add(cost::conv(src, ch, 3, h_at(si), w_at(si)));
          add(cost::batch_norm(ch));
        } else if (sj == si + 1) {
          add(cost::conv(src, ch, 1, h_at(si), w_at(si)));
          add(cost::batch_norm(ch));
        }
      }
      add(cost::mixture(edges, ch * h_at(si) * w_at(si)));
      total.arch_params += edges;
      const std::int64_t c = sampled_channels(ch, config.sampling_ratio);
      for (int k : config.kernel_set) add(cost::bottleneck(c, c, k, config.expansion, h_at(si), w_at(si)));
      add(cost::mixture(static_cast<std::int64_t>(config.kernel_set.size()), c * h_at(si) * w_at(si)));
      total.arch_params += static_cast<std::int64_t>(config.kernel_set.size());
    }
  }
  const std::int64_t d = config.head_width();
  for (std::size_t si = 0; si < ns; ++si) {
    add(cost::conv(config.channels_at(si), d, 1, h_at(si), w_at(si)));
    add(cost::batch_norm(d));
  }
  add(cost::conv(d * static_cast<std::int64_t>(ns), d, 3, h_at(0), w_at(0)));
  add(cost::batch_norm(d));
  add(cost::conv(d, config.num_classes, 1, h_at(0), w_at(0), true));
  return total;
}

}  // namespace dnas
