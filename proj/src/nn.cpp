#include "dnas/nn.hpp"

#include <algorithm>
#include <cmath>

namespace dnas {

Param make_conv_weight(std::string name, Shape shape, Rng& rng) {
  std::int64_t fan_in = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
  const double bound = std::sqrt(6.0 / static_cast<double>(std::max<std::int64_t>(fan_in, 1)));
  Tensor w(std::move(shape));
  for (auto& v : w.data()) v = rng.uniform(-bound, bound);
  return Param{std::move(name), std::move(w), {}};
}

BatchNorm BatchNorm::make(const std::string& name, std::int64_t channels) {
  BatchNorm bn;
  bn.gamma = Param{name + ".gamma", Tensor(Shape{channels}, 1.0), {}};
  bn.beta = Param{name + ".beta", Tensor(Shape{channels}, 0.0), {}};
  bn.stats.running_mean = Tensor(Shape{channels}, 0.0);
  bn.stats.running_var = Tensor(Shape{channels}, 1.0);
  return bn;
}

Var BatchNorm::forward(const ForwardContext& ctx, Var x) {
  return ops::batch_norm(x, ctx.weight(gamma), ctx.weight(beta), stats, ctx.training, momentum, eps);
}

void BatchNorm::register_state(StateRegistry& reg) {
  reg.weights.push_back(&gamma);
  reg.weights.push_back(&beta);
  // gamma's name is "<prefix>.gamma"; buffers share the prefix
  const std::string prefix = gamma.name.substr(0, gamma.name.size() - 6);
  reg.buffers.emplace_back(prefix + ".running", &stats);
}

ConvBn ConvBn::make(const std::string& name, std::int64_t in, std::int64_t out, int kernel, int stride, bool relu,
                    Rng& rng) {
  ConvBn c;
  c.weight = make_conv_weight(name + ".weight", Shape{out, in, kernel, kernel}, rng);
  c.bn = BatchNorm::make(name + ".bn", out);
  c.stride = stride;
  c.relu = relu;
  return c;
}

Var ConvBn::forward(const ForwardContext& ctx, Var x) {
  Var y = bn.forward(ctx, ops::conv2d(x, ctx.weight(weight), stride));
  return relu ? ops::relu(y) : y;
}

void ConvBn::register_state(StateRegistry& reg) {
  reg.weights.push_back(&weight);
  bn.register_state(reg);
}

InvertedBottleneck InvertedBottleneck::make(const std::string& name, std::int64_t in, std::int64_t out, int kernel,
                                            int expansion, Rng& rng) {
  if (kernel % 2 == 0 || kernel < 1) throw ConfigError("bottleneck kernel must be odd, got " + std::to_string(kernel));
  if (expansion < 1) throw ConfigError("expansion ratio must be >= 1");
  InvertedBottleneck b;
  b.in_channels = in;
  b.out_channels = out;
  b.kernel_size = kernel;
  b.expansion = expansion;
  const std::int64_t hid = in * expansion;
  b.expand = make_conv_weight(name + ".expand", Shape{hid, in, 1, 1}, rng);
  b.expand_bn = BatchNorm::make(name + ".expand_bn", hid);
  b.depthwise = make_conv_weight(name + ".depthwise", Shape{hid, 1, kernel, kernel}, rng);
  b.depthwise_bn = BatchNorm::make(name + ".depthwise_bn", hid);
  b.project = make_conv_weight(name + ".project", Shape{out, hid, 1, 1}, rng);
  b.project_bn = BatchNorm::make(name + ".project_bn", out);
  return b;
}

void InvertedBottleneck::register_state(StateRegistry& reg) {
  reg.weights.push_back(&expand);
  expand_bn.register_state(reg);
  reg.weights.push_back(&depthwise);
  depthwise_bn.register_state(reg);
  reg.weights.push_back(&project);
  project_bn.register_state(reg);
}

Var apply_bottleneck(const ForwardContext& ctx, InvertedBottleneck& block, Var x) {
  if (x.shape().size() != 4 || x.shape()[1] != block.in_channels) {
    throw ShapeError("bottleneck expects " + std::to_string(block.in_channels) + " input channels, got " +
                     to_string(x.shape()));
  }
  Var h = ops::conv2d(x, ctx.weight(block.expand));
  h = ops::relu(block.expand_bn.forward(ctx, h));
  h = ops::depthwise_conv2d(h, ctx.weight(block.depthwise));
  h = ops::relu(block.depthwise_bn.forward(ctx, h));
  h = ops::conv2d(h, ctx.weight(block.project));
  return block.project_bn.forward(ctx, h);
}

Preprocess Preprocess::make(const std::string& name, int source_scale, int target_scale, std::int64_t in_channels,
                            std::int64_t out_channels, Rng& rng) {
  Preprocess p;
  p.source_scale = source_scale;
  p.target_scale = target_scale;
  if (source_scale * 2 == target_scale) {
    p.kind = Kind::Down;
    p.conv = ConvBn::make(name, in_channels, out_channels, 3, 2, false, rng);
  } else if (target_scale * 2 == source_scale) {
    p.kind = Kind::Up;
    p.conv = ConvBn::make(name, in_channels, out_channels, 1, 1, false, rng);
  } else if (source_scale == target_scale) {
    p.kind = in_channels == out_channels ? Kind::Identity : Kind::Project;
    if (p.kind == Kind::Project) p.conv = ConvBn::make(name, in_channels, out_channels, 1, 1, false, rng);
  } else {
    throw ScaleError("preprocess: illegal scale ratio " + std::to_string(source_scale) + " -> " +
                     std::to_string(target_scale));
  }
  return p;
}

void Preprocess::register_state(StateRegistry& reg) {
  if (kind != Kind::Identity) conv.register_state(reg);
}

Var preprocess(const ForwardContext& ctx, Preprocess& p, Var y) {
  switch (p.kind) {
    case Preprocess::Kind::Identity:
      return y;
    case Preprocess::Kind::Project:
    case Preprocess::Kind::Down:
      return p.conv.forward(ctx, y);
    case Preprocess::Kind::Up: {
      if (y.shape().size() != 4) throw ShapeError("preprocess expects NCHW, got " + to_string(y.shape()));
      Var up = ops::resize_bilinear(y, y.shape()[2] * 2, y.shape()[3] * 2);
      return p.conv.forward(ctx, up);
    }
  }
  return y;
}

ChannelSample sample_channels(std::int64_t channels, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError("sampling ratio must lie in (0, 1]");
  const auto keep = static_cast<std::int64_t>(std::llround(static_cast<double>(channels) * ratio));
  if (keep == 0) {
    throw ConfigError("sampling ratio " + std::to_string(ratio) + " keeps no channel out of " +
                      std::to_string(channels));
  }
  ChannelSample s;
  std::vector<std::int64_t> ids(static_cast<std::size_t>(channels));
  for (std::int64_t i = 0; i < channels; ++i) ids[static_cast<std::size_t>(i)] = i;
  if (keep < channels) {
    Rng rng(seed);
    rng.shuffle(ids);
    ids.resize(static_cast<std::size_t>(keep));
    std::sort(ids.begin(), ids.end());
  }
  s.selected = std::move(ids);
  s.mask.assign(static_cast<std::size_t>(channels), 0.0);
  for (auto c : s.selected) s.mask[static_cast<std::size_t>(c)] = 1.0;
  return s;
}

std::pair<Var, ChannelSample> sample_channels(Var x, double ratio, std::uint64_t seed) {
  if (x.shape().size() < 2) throw ShapeError("sample_channels: rank < 2");
  ChannelSample s = sample_channels(x.shape()[1], ratio, seed);
  if (static_cast<std::int64_t>(s.selected.size()) == x.shape()[1]) return {x, std::move(s)};
  Var g = ops::gather_channels(x, s.selected);
  return {g, std::move(s)};
}

}  // namespace dnas
