#pragma once

#include <memory>
#include <string>
#include <vector>

#include "dnas/ops.hpp"
#include "gradcheck.hpp"

namespace dnas::testing {

struct RandomGraph {
  std::vector<Tensor> inputs;
  GraphFn fn;
  std::string description;
};

/// A random composition of 1..6 primitives over an NCHW input with extents <= 8.
inline RandomGraph random_graph(std::uint64_t seed) {
  Rng rng(seed);
  struct Step {
    int kind;
    std::int64_t a = 0, b = 0;
    std::size_t input = 0;
    std::vector<double> mask;
  };
  RandomGraph g;
  const auto n = static_cast<std::int64_t>(1 + rng.below(2));
  std::int64_t c = static_cast<std::int64_t>(1 + rng.below(4));
  std::int64_t h = static_cast<std::int64_t>(2 + rng.below(7));
  std::int64_t w = static_cast<std::int64_t>(2 + rng.below(7));
  g.inputs.push_back(random_tensor(Shape{n, c, h, w}, rng));
  auto steps = std::make_shared<std::vector<Step>>();
  const int depth = 1 + static_cast<int>(rng.below(6));
  for (int d = 0; d < depth; ++d) {
    Step s;
    s.kind = static_cast<int>(rng.below(10));
    switch (s.kind) {
      case 0: {  // conv2d
        const auto co = static_cast<std::int64_t>(1 + rng.below(4));
        const int k = rng.bernoulli(0.5) ? 3 : 1;
        s.a = (h >= 2 && w >= 2 && rng.bernoulli(0.3)) ? 2 : 1;
        s.input = g.inputs.size();
        g.inputs.push_back(random_tensor(Shape{co, c, k, k}, rng, 0.5));
        c = co;
        if (s.a == 2) h = (h + 1) / 2, w = (w + 1) / 2;
        g.description += "conv" + std::to_string(k) + "s" + std::to_string(s.a) + " ";
        break;
      }
      case 1:
        s.input = g.inputs.size();
        g.inputs.push_back(random_tensor(Shape{c, 1, 3, 3}, rng, 0.5));
        g.description += "depthwise ";
        break;
      case 2:
        g.description += "relu ";
        break;
      case 3:
        s.a = static_cast<std::int64_t>(2 + rng.below(7));
        s.b = static_cast<std::int64_t>(2 + rng.below(7));
        h = s.a, w = s.b;
        g.description += "resize ";
        break;
      case 4:
        if (h % 2 == 0 && w % 2 == 0) {
          h /= 2, w /= 2;
          g.description += "avgpool ";
        } else {
          s.kind = 2;
          g.description += "relu ";
        }
        break;
      case 5:
        s.input = g.inputs.size();
        g.inputs.push_back(random_tensor(Shape{c}, rng));
        g.inputs.push_back(random_tensor(Shape{c}, rng));
        g.description += (n * h * w > 1 ? "bn " : "bn(eval) ");
        break;
      case 6:
        g.description += "softmax ";
        break;
      case 7:
        s.input = g.inputs.size();
        g.inputs.push_back(random_tensor(Shape{n, c, h, w}, rng));
        g.description += "add ";
        break;
      case 8:
        s.input = g.inputs.size();
        g.inputs.push_back(random_tensor(Shape{n, c, h, w}, rng));
        g.description += "mul ";
        break;
      default:
        for (std::int64_t i = 0; i < c; ++i) s.mask.push_back(rng.uniform(-1.0, 1.0));
        g.description += "mask ";
        break;
    }
    steps->push_back(s);
  }
  const Tensor target = random_tensor(Shape{n, c, h, w}, rng);
  g.fn = [steps, target](Tape& tape, std::vector<Var>& in) {
    Var y = in[0];
    for (const Step& s : *steps) {
      switch (s.kind) {
        case 0:
          y = ops::conv2d(y, in[s.input], static_cast<int>(s.a));
          break;
        case 1:
          y = ops::depthwise_conv2d(y, in[s.input]);
          break;
        case 2:
          y = ops::relu(y);
          break;
        case 3:
          y = ops::resize_bilinear(y, s.a, s.b);
          break;
        case 4:
          y = ops::avg_pool2d(y, 2);
          break;
        case 5: {
          const auto& sh = y.shape();
          ops::BatchNormStats stats{Tensor(Shape{sh[1]}, 0.0), Tensor(Shape{sh[1]}, 1.0)};
          y = ops::batch_norm(y, in[s.input], in[s.input + 1], stats, sh[0] * sh[2] * sh[3] > 1);
          break;
        }
        case 6:
          y = ops::softmax(y, 1);
          break;
        case 7:
          y = ops::add(y, in[s.input]);
          break;
        case 8:
          y = ops::mul(y, in[s.input]);
          break;
        default:
          y = ops::mask_channels(y, s.mask);
          break;
      }
    }
    return ops::sum(ops::mul(y, tape.constant(target)));
  };
  return g;
}

}  // namespace dnas::testing
