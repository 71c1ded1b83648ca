#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "dnas/tensor.hpp"

namespace dnas {

inline constexpr std::uint8_t kIgnore = 255;

/// image: [3, H, W] in [0, 1]; label: H*W row-major class ids or kIgnore.
struct SegSample {
  Tensor image;
  std::vector<std::uint8_t> label;
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::int64_t id = 0;
  bool coarse = false;
};

struct AugmentConfig {
  double p_flip = 0.0;
  double p_scale = 0.0;
  double scale_min = 0.75;
  double scale_max = 1.25;
  double p_jitter = 0.0;
  double jitter = 0.2;
  double p_noise = 0.0;
  double noise_std = 0.03;

  bool any() const { return p_flip > 0 || p_scale > 0 || p_jitter > 0 || p_noise > 0; }
};

struct DataConfig {
  int fine_train = 512;
  int coarse_train = 1024;
  int validation = 128;
  int height = 64;
  int width = 64;
  int classes = 4;
  int coarse_margin = 3;
  AugmentConfig augment;

  void validate() const;
};

struct DataPools {
  std::vector<SegSample> fine_train;
  std::vector<SegSample> coarse_train;
  std::vector<SegSample> validation;
};

/// Shapes on a textured background; every pool derives from `seed` independently.
DataPools generate(const DataConfig& config, std::uint64_t seed);
SegSample generate_sample(const DataConfig& config, std::uint64_t seed, std::int64_t id);

/// Erodes every connected region by `margin` pixels (Chebyshev distance); the band becomes kIgnore.
std::vector<std::uint8_t> coarsen(std::span<const std::uint8_t> label, std::int64_t height, std::int64_t width,
                                  int margin = 3);

/// Accumulates a confusion matrix; kIgnore label pixels are skipped.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int classes);
  void add(std::span<const std::uint8_t> predictions, std::span<const std::uint8_t> labels);
  std::int64_t at(int label, int prediction) const;
  std::int64_t counted() const { return counted_; }
  /// Mean IoU over classes present in prediction or label. Throws MetricError if nothing was counted.
  double miou() const;
  int classes() const { return classes_; }

 private:
  int classes_;
  std::vector<std::int64_t> counts_;
  std::int64_t counted_ = 0;
};

double miou(std::span<const std::uint8_t> predictions, std::span<const std::uint8_t> labels, int classes);

SegSample augment(const SegSample& sample, const AugmentConfig& config, std::uint64_t seed);

/// Stacks samples into ([N, 3, H, W], labels).
Tensor stack_images(std::span<const SegSample* const> samples);
std::vector<std::uint8_t> stack_labels(std::span<const SegSample* const> samples);

void dump_pool(const std::filesystem::path& path, std::span<const SegSample> pool, int classes);
std::vector<SegSample> load_pool(const std::filesystem::path& path, int* classes = nullptr);

}  // namespace dnas
