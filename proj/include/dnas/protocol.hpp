#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dnas/data.hpp"
#include "dnas/regularizer.hpp"
#include "dnas/supernet.hpp"

namespace dnas {

enum class Phase { Warmup, Searching, FineTuning };
std::string to_string(Phase p);

struct PhasePlan {
  int total_epochs = 30;
  double warmup_frac = 0.05;
  double search_frac = 0.35;
  double finetune_frac = 0.60;

  void validate() const;
  /// max(1, floor(warmup_frac * T)) when warmup_frac > 0, else 0.
  int warmup_epochs() const;
  /// floor(search_frac * T), capped so the phases fit in T.
  int search_epochs() const;
  int finetune_epochs() const { return total_epochs - warmup_epochs() - search_epochs(); }
  Phase phase_of(int epoch) const;
  /// Training progress (in [0, 1]) at which searching ends.
  double search_end_fraction() const;
};

enum class PoolSpec { FineHalfA, FineHalfB, FineFull, CoarseFull, FinePlusCoarse };
PoolSpec parse_pool_spec(std::string_view name);
std::string to_string(PoolSpec p);

struct SplitPolicy {
  PoolSpec weight_stream = PoolSpec::FineFull;
  PoolSpec arch_stream = PoolSpec::FineFull;
  bool independent_batching = true;

  std::string name() const { return to_string(weight_stream) + "/" + to_string(arch_stream); }
  friend bool operator==(const SplitPolicy&, const SplitPolicy&) = default;
};

/// The five weight/architecture data assignments of the split ablation.
std::vector<SplitPolicy> split_ablation_rows();

struct SgdConfig {
  double lr = 0.003;
  double momentum = 0.9;
  double weight_decay = 0.0005;
};

struct AdamConfig {
  double lr = 0.003;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.001;
};

/// SGD with momentum and L2 weight decay folded into the gradient.
class Sgd {
 public:
  explicit Sgd(SgdConfig config = {}) : config_(config) {}
  void step(const std::vector<Param*>& params);
  const SgdConfig& config() const { return config_; }
  std::vector<Tensor>& momentum() { return momentum_; }
  const std::vector<Tensor>& momentum() const { return momentum_; }

 private:
  SgdConfig config_;
  std::vector<Tensor> momentum_;
};

/// Adam with L2 weight decay folded into the gradient.
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}
  void step(const std::vector<Param*>& params);
  const AdamConfig& config() const { return config_; }
  std::vector<Tensor>& first() { return m_; }
  std::vector<Tensor>& second() { return v_; }
  const std::vector<Tensor>& first() const { return m_; }
  const std::vector<Tensor>& second() const { return v_; }
  std::int64_t steps() const { return t_; }
  void set_steps(std::int64_t t) { t_ = t; }

 private:
  AdamConfig config_;
  std::vector<Tensor> m_, v_;
  std::int64_t t_ = 0;
};

struct Batch {
  Tensor images;
  std::vector<std::uint8_t> labels;
  std::vector<std::int64_t> ids;
};

Batch make_batch(std::span<const SegSample* const> samples);

/// Endless, reshuffled-per-pass iterator over a pool of samples.
class BatchStream {
 public:
  BatchStream() = default;
  /// tail: samples appended after every shuffled pass of `pool` (their own shuffle).
  BatchStream(std::vector<const SegSample*> pool, std::vector<const SegSample*> tail, int batch_size,
              std::uint64_t seed, AugmentConfig augment = {});

  Batch next();
  /// Sample ids of the next `n` samples without consuming them.
  std::vector<std::int64_t> peek_ids(std::size_t n) const;
  std::size_t pass_length() const { return pool_.size() + tail_.size(); }
  int batch_size() const { return batch_size_; }
  const std::vector<const SegSample*>& pool() const { return pool_; }
  const std::vector<const SegSample*>& tail() const { return tail_; }
  std::int64_t pass() const { return pass_; }

  /// Position state (pass counter and offset); the order is recomputed from the seed.
  std::pair<std::int64_t, std::size_t> position() const { return {pass_, offset_}; }
  void seek(std::int64_t pass, std::size_t offset);

 private:
  std::vector<const SegSample*> order_for(std::int64_t pass) const;

  std::vector<const SegSample*> pool_, tail_;
  int batch_size_ = 1;
  std::uint64_t seed_ = 0;
  AugmentConfig augment_;
  std::int64_t pass_ = 0;
  std::size_t offset_ = 0;
  std::vector<const SegSample*> order_;
};

/// Deterministic halves of the fine pool.
std::pair<std::vector<const SegSample*>, std::vector<const SegSample*>> fine_halves(const DataPools& data,
                                                                                      std::uint64_t seed);

/// Samples a pool spec draws from (for FinePlusCoarse: the interleaved part and the fine-only tail).
std::pair<std::vector<const SegSample*>, std::vector<const SegSample*>> resolve_pool(const DataPools& data,
                                                                                       PoolSpec spec,
                                                                                       std::uint64_t seed);

std::pair<BatchStream, BatchStream> make_streams(const DataPools& data, const SplitPolicy& policy, int batch_size,
                                                 std::uint64_t seed, const AugmentConfig& augment = {});

struct TrainOptions {
  int batch_size = 8;
  SgdConfig sgd;
  AdamConfig adam;
  /// Validation mIoU every n epochs (the last epoch is always evaluated); 0 = last epoch only.
  int eval_every = 1;
  int eval_batch = 16;
  /// Validation samples used for the per-epoch metric (0 = all).
  int eval_samples = 0;
  /// Weight steps per epoch; 0 = one pass over the weight stream.
  int steps_per_epoch = 0;
  AugmentConfig augment;
};

struct MetricsRow {
  int epoch = 0;
  Phase phase = Phase::Warmup;
  double loss_a = 0.0;
  std::optional<double> loss_b;
  double entropy_term = 0.0;
  double edge_entropy_mean = 0.0;
  double op_entropy_mean = 0.0;
  std::optional<double> val_miou;
  std::optional<double> lambda_max;
  double wall_seconds = 0.0;
};

struct UpdateCounters {
  std::int64_t weight_updates = 0;
  std::int64_t arch_updates = 0;
  std::int64_t arch_updates_outside_search = 0;
  std::int64_t reinit_events = 0;
};

struct StepInfo {
  int epoch = 0;
  int step = 0;
  std::int64_t global_step = 0;
  Phase phase = Phase::Warmup;
  double t = 0.0;
};

struct TrainHooks {
  /// After every optimizer step (weights or architecture).
  std::function<void(const StepInfo&, Supernet&)> on_step;
  /// After the metrics of an epoch are computed, before they are logged.
  std::function<void(int epoch, Supernet&, MetricsRow&)> on_epoch_end;
  /// Once, when the last searching epoch completes.
  std::function<void(Supernet&)> on_search_end;
};

struct Losses {
  double loss_a = 0.0;
  double loss_b = 0.0;
  double entropy = 0.0;
};

/// State carried across epochs; captured in checkpoints.
struct TrainState {
  Sgd sgd;
  Adam adam;
  BatchStream stream_a;
  BatchStream stream_b;
  std::int64_t global_step = 0;
  int next_epoch = 0;
  UpdateCounters counters;
};

/// One weight step on batch_a, then one architecture step on batch_b (+ entropy term).
/// step_index is reported by DivergenceError and, with sampling_seed, picks the channel samples.
Losses bilevel_step(Supernet& net, const Batch& batch_a, const Batch& batch_b, const EntropySchedule& schedule,
                    double t, Sgd& sgd, Adam& adam, std::int64_t step_index, std::uint64_t sampling_seed = 0);

/// A weight-only step; returns the loss.
double weight_step(Supernet& net, const Batch& batch, Sgd& sgd, std::int64_t step_index,
                   const PruneMask* mask = nullptr, std::uint64_t sampling_seed = 0);

double cross_entropy_loss(Supernet& net, const Batch& batch, const ForwardOptions& options);

struct TrainResult {
  std::vector<MetricsRow> metrics;
  UpdateCounters counters;
  double final_val_miou = 0.0;
  /// Identity of the weight storage entering fine-tuning equals that leaving search.
  bool weights_reused = true;
};

class Trainer {
 public:
  Trainer(Supernet& net, const DataPools& data, PhasePlan plan, SplitPolicy split, EntropySchedule schedule,
          TrainOptions options, std::uint64_t seed);

  /// Runs epochs [next_epoch, total); resumable from a restored state.
  TrainResult run(const TrainHooks& hooks = {});
  /// Runs a single epoch and returns its row.
  MetricsRow run_epoch(int epoch, const TrainHooks& hooks = {});

  TrainState& state() { return state_; }
  const PhasePlan& plan() const { return plan_; }
  const EntropySchedule& schedule() const { return schedule_; }
  int steps_per_epoch() const;
  std::vector<const SegSample*> eval_subset() const;

 private:
  Supernet& net_;
  const DataPools& data_;
  PhasePlan plan_;
  SplitPolicy split_;
  EntropySchedule schedule_;
  TrainOptions options_;
  std::uint64_t seed_;
  TrainState state_;
  std::vector<const double*> search_weight_ids_;
  bool weights_reused_ = true;
  std::vector<MetricsRow> log_;
};

TrainResult train(Supernet& net, const DataPools& data, const PhasePlan& plan, const SplitPolicy& split,
                  const EntropySchedule& schedule, const TrainOptions& options, std::uint64_t seed,
                  const TrainHooks& hooks = {});

/// Per-pixel argmax predictions, [N*H*W].
std::vector<std::uint8_t> predict(Supernet& net, const Tensor& images, const PruneMask* mask = nullptr);

double evaluate_miou(Supernet& net, std::span<const SegSample* const> samples, int batch_size = 16,
                     const PruneMask* mask = nullptr);
double evaluate_miou(Supernet& net, std::span<const SegSample> samples, int batch_size = 16,
                     const PruneMask* mask = nullptr);

}  // namespace dnas
