#include "dnas/protocol.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "dnas/discretization.hpp"
#include "dnas/errors.hpp"
#include "dnas/ops.hpp"

namespace dnas {
namespace {

int floor_epochs(double frac, int total) {
  return static_cast<int>(std::floor(frac * static_cast<double>(total) + 1e-9));
}

void check_finite(double loss, std::int64_t step, const char* which) {
  if (!std::isfinite(loss)) throw DivergenceError(std::string(which) + " is not finite", step);
}

}  // namespace

std::string to_string(Phase p) {
  switch (p) {
    case Phase::Warmup:
      return "warmup";
    case Phase::Searching:
      return "searching";
    default:
      return "finetuning";
  }
}

void PhasePlan::validate() const {
  if (total_epochs < 1) throw ConfigError("plan.total_epochs: must be >= 1");
  for (double f : {warmup_frac, search_frac, finetune_frac})
    if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("plan: phase fractions must lie in [0, 1]");
  if (std::abs(warmup_frac + search_frac + finetune_frac - 1.0) > 1e-9)
    throw ConfigError("plan: phase fractions must sum to 1");
  if (warmup_epochs() > total_epochs) throw ConfigError("plan: warmup does not fit in total_epochs");
}

int PhasePlan::warmup_epochs() const {
  if (warmup_frac <= 0.0) return 0;
  return std::max(1, floor_epochs(warmup_frac, total_epochs));
}

int PhasePlan::search_epochs() const {
  return std::max(0, std::min(floor_epochs(search_frac, total_epochs), total_epochs - warmup_epochs()));
}

Phase PhasePlan::phase_of(int epoch) const {
  if (epoch < warmup_epochs()) return Phase::Warmup;
  if (epoch < warmup_epochs() + search_epochs()) return Phase::Searching;
  return Phase::FineTuning;
}

double PhasePlan::search_end_fraction() const {
  return static_cast<double>(warmup_epochs() + search_epochs()) / static_cast<double>(total_epochs);
}

PoolSpec parse_pool_spec(std::string_view name) {
  if (name == "FineHalfA") return PoolSpec::FineHalfA;
  if (name == "FineHalfB") return PoolSpec::FineHalfB;
  if (name == "FineFull") return PoolSpec::FineFull;
  if (name == "CoarseFull") return PoolSpec::CoarseFull;
  if (name == "FinePlusCoarse") return PoolSpec::FinePlusCoarse;
  throw ConfigError("split: unknown pool '" + std::string(name) + "'");
}

std::string to_string(PoolSpec p) {
  switch (p) {
    case PoolSpec::FineHalfA:
      return "FineHalfA";
    case PoolSpec::FineHalfB:
      return "FineHalfB";
    case PoolSpec::FineFull:
      return "FineFull";
    case PoolSpec::CoarseFull:
      return "CoarseFull";
    default:
      return "FinePlusCoarse";
  }
}

std::vector<SplitPolicy> split_ablation_rows() {
  return {{PoolSpec::FineHalfA, PoolSpec::FineHalfB},
          {PoolSpec::FineFull, PoolSpec::FineFull},
          {PoolSpec::FineFull, PoolSpec::CoarseFull},
          {PoolSpec::FinePlusCoarse, PoolSpec::FineFull},
          {PoolSpec::FinePlusCoarse, PoolSpec::FinePlusCoarse}};
}

void Sgd::step(const std::vector<Param*>& params) {
  if (momentum_.size() != params.size()) {
    momentum_.clear();
    for (const Param* p : params) momentum_.emplace_back(p->value.shape());
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param& p = *params[i];
    if (p.grad.shape() != p.value.shape()) p.zero_grad();
    double* w = p.value.ptr();
    const double* g = p.grad.ptr();
    double* buf = momentum_[i].ptr();
    const std::int64_t n = p.value.numel();
    for (std::int64_t k = 0; k < n; ++k) {
      const double d = g[k] + config_.weight_decay * w[k];
      buf[k] = config_.momentum * buf[k] + d;
      w[k] -= config_.lr * buf[k];
    }
    p.zero_grad();
  }
}

void Adam::step(const std::vector<Param*>& params) {
  if (m_.size() != params.size()) {
    m_.clear();
    v_.clear();
    for (const Param* p : params) {
      m_.emplace_back(p->value.shape());
      v_.emplace_back(p->value.shape());
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param& p = *params[i];
    if (p.grad.shape() != p.value.shape()) p.zero_grad();
    double* w = p.value.ptr();
    const double* g = p.grad.ptr();
    double* m = m_[i].ptr();
    double* v = v_[i].ptr();
    const std::int64_t n = p.value.numel();
    for (std::int64_t k = 0; k < n; ++k) {
      const double d = g[k] + config_.weight_decay * w[k];
      m[k] = config_.beta1 * m[k] + (1.0 - config_.beta1) * d;
      v[k] = config_.beta2 * v[k] + (1.0 - config_.beta2) * d * d;
      w[k] -= config_.lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + config_.eps);
    }
    p.zero_grad();
  }
}

Batch make_batch(std::span<const SegSample* const> samples) {
  Batch b;
  b.images = stack_images(samples);
  b.labels = stack_labels(samples);
  for (const SegSample* s : samples) b.ids.push_back(s->id);
  return b;
}

BatchStream::BatchStream(std::vector<const SegSample*> pool, std::vector<const SegSample*> tail, int batch_size,
                         std::uint64_t seed, AugmentConfig augment)
    : pool_(std::move(pool)), tail_(std::move(tail)), batch_size_(batch_size), seed_(seed), augment_(augment) {
  if (pool_.empty() && tail_.empty()) throw ConfigError("data: a training stream has an empty pool");
  if (batch_size_ < 1) throw ConfigError("train.batch_size: must be >= 1");
}

std::vector<const SegSample*> BatchStream::order_for(std::int64_t pass) const {
  Rng rng(derive_seed(seed_, {static_cast<std::uint64_t>(pass)}));
  std::vector<const SegSample*> head = pool_, tail = tail_;
  rng.shuffle(head);
  rng.shuffle(tail);
  head.insert(head.end(), tail.begin(), tail.end());
  return head;
}

void BatchStream::seek(std::int64_t pass, std::size_t offset) {
  pass_ = pass;
  offset_ = offset;
  order_ = order_for(pass_);
}

std::vector<std::int64_t> BatchStream::peek_ids(std::size_t n) const {
  std::vector<std::int64_t> ids;
  std::int64_t pass = pass_;
  std::size_t offset = offset_;
  auto order = order_.empty() ? order_for(pass) : order_;
  while (ids.size() < n) {
    if (offset == order.size()) {
      order = order_for(++pass);
      offset = 0;
    }
    ids.push_back(order[offset++]->id);
  }
  return ids;
}

Batch BatchStream::next() {
  if (order_.empty()) order_ = order_for(pass_);
  std::vector<SegSample> augmented;
  std::vector<const SegSample*> picked;
  augmented.reserve(static_cast<std::size_t>(batch_size_));
  for (int i = 0; i < batch_size_; ++i) {
    if (offset_ == order_.size()) {
      order_ = order_for(++pass_);
      offset_ = 0;
    }
    const SegSample* s = order_[offset_];
    if (augment_.any()) {
      augmented.push_back(augment(*s, augment_, derive_seed(seed_, {tag_of("augment"), static_cast<std::uint64_t>(pass_),
                                                                     static_cast<std::uint64_t>(offset_)})));
      s = &augmented.back();
    }
    picked.push_back(s);
    ++offset_;
  }
  return make_batch(picked);
}

std::pair<std::vector<const SegSample*>, std::vector<const SegSample*>> fine_halves(const DataPools& data,
                                                                                      std::uint64_t seed) {
  std::vector<const SegSample*> all;
  for (const auto& s : data.fine_train) all.push_back(&s);
  Rng rng(derive_seed(seed, {tag_of("split.halves")}));
  rng.shuffle(all);
  const std::size_t half = all.size() / 2;
  std::vector<const SegSample*> a(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(half));
  std::vector<const SegSample*> b(all.begin() + static_cast<std::ptrdiff_t>(half), all.end());
  auto by_id = [](const SegSample* x, const SegSample* y) { return x->id < y->id; };
  std::sort(a.begin(), a.end(), by_id);
  std::sort(b.begin(), b.end(), by_id);
  return {a, b};
}

std::pair<std::vector<const SegSample*>, std::vector<const SegSample*>> resolve_pool(const DataPools& data,
                                                                                       PoolSpec spec,
                                                                                       std::uint64_t seed) {
  std::vector<const SegSample*> fine, coarse;
  for (const auto& s : data.fine_train) fine.push_back(&s);
  for (const auto& s : data.coarse_train) coarse.push_back(&s);
  switch (spec) {
    case PoolSpec::FineHalfA:
      return {fine_halves(data, seed).first, {}};
    case PoolSpec::FineHalfB:
      return {fine_halves(data, seed).second, {}};
    case PoolSpec::FineFull:
      return {fine, {}};
    case PoolSpec::CoarseFull:
      return {coarse, {}};
    case PoolSpec::FinePlusCoarse: {
      std::vector<const SegSample*> mixed = fine;
      mixed.insert(mixed.end(), coarse.begin(), coarse.end());
      return {mixed, fine_halves(data, seed).first};
    }
  }
  throw ConfigError("split: unknown pool");
}

std::pair<BatchStream, BatchStream> make_streams(const DataPools& data, const SplitPolicy& policy, int batch_size,
                                                 std::uint64_t seed, const AugmentConfig& augment) {
  auto [pa, ta] = resolve_pool(data, policy.weight_stream, seed);
  auto [pb, tb] = resolve_pool(data, policy.arch_stream, seed);
  if (pa.empty() && ta.empty()) throw ConfigError("split: weight stream pool " + to_string(policy.weight_stream) + " is empty");
  if (pb.empty() && tb.empty()) throw ConfigError("split: architecture stream pool " + to_string(policy.arch_stream) + " is empty");
  return {BatchStream(std::move(pa), std::move(ta), batch_size, derive_seed(seed, {tag_of("stream.A")}), augment),
          BatchStream(std::move(pb), std::move(tb), batch_size, derive_seed(seed, {tag_of("stream.B")}), augment)};
}

double cross_entropy_loss(Supernet& net, const Batch& batch, const ForwardOptions& options) {
  Tape tape;
  Var logits = net.forward(tape, batch.images, options);
  return ops::cross_entropy(logits, batch.labels).value().item();
}

double weight_step(Supernet& net, const Batch& batch, Sgd& sgd, std::int64_t step_index, const PruneMask* mask,
                   std::uint64_t sampling_seed) {
  StateRegistry reg = net.registry();
  Tape tape;
  ForwardOptions fo;
  fo.training = true;
  fo.track_weights = true;
  fo.track_arch = false;
  fo.mask = mask;
  fo.sampling_seed = derive_seed(sampling_seed, {tag_of("sample.w"), static_cast<std::uint64_t>(step_index)});
  Var loss = ops::cross_entropy(net.forward(tape, batch.images, fo), batch.labels);
  const double value = loss.value().item();
  check_finite(value, step_index, "weight loss");
  tape.backward(loss);
  sgd.step(reg.weights);
  return value;
}

Losses bilevel_step(Supernet& net, const Batch& batch_a, const Batch& batch_b, const EntropySchedule& schedule,
                    double t, Sgd& sgd, Adam& adam, std::int64_t step_index, std::uint64_t sampling_seed) {
  Losses out;
  out.loss_a = weight_step(net, batch_a, sgd, step_index, nullptr, sampling_seed);

  StateRegistry reg = net.registry();
  Tape tape;
  ForwardOptions fo;
  fo.training = true;
  fo.track_weights = false;
  fo.track_arch = true;
  fo.sampling_seed = derive_seed(sampling_seed, {tag_of("sample.arch"), static_cast<std::uint64_t>(step_index)});
  Var ce = ops::cross_entropy(net.forward(tape, batch_b.images, fo), batch_b.labels);
  Var reg_term = entropy_loss(tape, net.arch(), schedule, t);
  Var total = ops::add(ce, reg_term);
  out.loss_b = ce.value().item();
  out.entropy = reg_term.value().item();
  check_finite(total.value().item(), step_index, "architecture loss");
  tape.backward(total);
  adam.step(reg.arch);
  return out;
}

std::vector<std::uint8_t> predict(Supernet& net, const Tensor& images, const PruneMask* mask) {
  Tape tape;
  ForwardOptions fo;
  fo.training = false;
  fo.track_weights = false;
  fo.track_arch = false;
  fo.mask = mask;
  const Tensor& logits = net.forward(tape, images, fo).value();
  const std::int64_t n = logits.dim(0), k = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  std::vector<std::uint8_t> pred(static_cast<std::size_t>(n * hw));
  for (std::int64_t b = 0; b < n; ++b) {
    const double* base = logits.ptr() + b * k * hw;
    for (std::int64_t i = 0; i < hw; ++i) {
      std::int64_t best = 0;
      for (std::int64_t c = 1; c < k; ++c)
        if (base[c * hw + i] > base[best * hw + i]) best = c;
      pred[static_cast<std::size_t>(b * hw + i)] = static_cast<std::uint8_t>(best);
    }
  }
  return pred;
}

double evaluate_miou(Supernet& net, std::span<const SegSample* const> samples, int batch_size,
                     const PruneMask* mask) {
  ConfusionMatrix cm(net.config().num_classes);
  const auto step = static_cast<std::size_t>(std::max(1, batch_size));
  for (std::size_t i = 0; i < samples.size(); i += step) {
    auto chunk = samples.subspan(i, std::min(step, samples.size() - i));
    const Batch b = make_batch(chunk);
    cm.add(predict(net, b.images, mask), b.labels);
  }
  return cm.miou();
}

double evaluate_miou(Supernet& net, std::span<const SegSample> samples, int batch_size, const PruneMask* mask) {
  std::vector<const SegSample*> ptrs;
  for (const auto& s : samples) ptrs.push_back(&s);
  return evaluate_miou(net, std::span<const SegSample* const>(ptrs), batch_size, mask);
}

Trainer::Trainer(Supernet& net, const DataPools& data, PhasePlan plan, SplitPolicy split, EntropySchedule schedule,
                 TrainOptions options, std::uint64_t seed)
    : net_(net), data_(data), plan_(plan), split_(split), schedule_(schedule), options_(options), seed_(seed) {
  plan_.validate();
  schedule_.search_end = plan_.search_end_fraction();
  schedule_.validate();
  state_.sgd = Sgd(options_.sgd);
  state_.adam = Adam(options_.adam);
  if (data_.fine_train.empty() && data_.coarse_train.empty()) throw ConfigError("data: no training samples");
  auto [pa, ta] = resolve_pool(data_, split_.weight_stream, seed_);
  state_.stream_a = BatchStream(std::move(pa), std::move(ta), options_.batch_size,
                                derive_seed(seed_, {tag_of("stream.A")}), options_.augment);
  if (plan_.search_epochs() > 0) {
    auto [pb, tb] = resolve_pool(data_, split_.arch_stream, seed_);
    state_.stream_b = BatchStream(std::move(pb), std::move(tb), options_.batch_size,
                                  derive_seed(seed_, {tag_of("stream.B")}), options_.augment);
  }
}

int Trainer::steps_per_epoch() const {
  if (options_.steps_per_epoch > 0) return options_.steps_per_epoch;
  const auto len = state_.stream_a.pass_length();
  const auto bs = static_cast<std::size_t>(options_.batch_size);
  return static_cast<int>(std::max<std::size_t>(1, (len + bs - 1) / bs));
}

std::vector<const SegSample*> Trainer::eval_subset() const {
  std::vector<const SegSample*> out;
  const std::size_t n = options_.eval_samples > 0
                            ? std::min(data_.validation.size(), static_cast<std::size_t>(options_.eval_samples))
                            : data_.validation.size();
  for (std::size_t i = 0; i < n; ++i) out.push_back(&data_.validation[i]);
  return out;
}

MetricsRow Trainer::run_epoch(int epoch, const TrainHooks& hooks) {
  const auto started = std::chrono::steady_clock::now();
  const Phase phase = plan_.phase_of(epoch);
  const int steps = steps_per_epoch();
  const double total = static_cast<double>(plan_.total_epochs);

  if (phase == Phase::FineTuning && !search_weight_ids_.empty()) {
    std::vector<const double*> now;
    for (const Param* p : net_.registry().weights) now.push_back(p->value.ptr());
    if (now != search_weight_ids_) weights_reused_ = false;
    search_weight_ids_.clear();
  }

  MetricsRow row;
  row.epoch = epoch;
  row.phase = phase;
  double sum_a = 0.0, sum_b = 0.0, sum_e = 0.0;
  for (int s = 0; s < steps; ++s) {
    StepInfo info{epoch, s, state_.global_step, phase, (epoch + static_cast<double>(s) / steps) / total};
    if (phase == Phase::Searching) {
      const Batch a = state_.stream_a.next();
      const Batch b = state_.stream_b.next();
      const Losses l =
          bilevel_step(net_, a, b, schedule_, info.t, state_.sgd, state_.adam, state_.global_step, seed_);
      sum_a += l.loss_a;
      sum_b += l.loss_b;
      sum_e += l.entropy;
      ++state_.counters.weight_updates;
      ++state_.counters.arch_updates;
    } else {
      const Batch a = state_.stream_a.next();
      sum_a += weight_step(net_, a, state_.sgd, state_.global_step, nullptr, seed_);
      ++state_.counters.weight_updates;
    }
    ++state_.global_step;
    if (hooks.on_step) hooks.on_step(info, net_);
  }
  row.loss_a = sum_a / steps;
  if (phase == Phase::Searching) {
    row.loss_b = sum_b / steps;
    row.entropy_term = sum_e / steps;
  }
  const EntropyReport rep = arch_entropy_report(net_.arch());
  row.edge_entropy_mean = rep.edge_mean;
  row.op_entropy_mean = rep.op_mean;

  const bool last = epoch + 1 == plan_.total_epochs;
  const bool scheduled = options_.eval_every > 0 && (epoch + 1) % options_.eval_every == 0;
  if (!data_.validation.empty() && (last || scheduled)) {
    const auto subset = eval_subset();
    row.val_miou = evaluate_miou(net_, std::span<const SegSample* const>(subset), options_.eval_batch);
  }

  if (phase == Phase::Searching && epoch + 1 == plan_.warmup_epochs() + plan_.search_epochs()) {
    for (const Param* p : net_.registry().weights) search_weight_ids_.push_back(p->value.ptr());
    if (hooks.on_search_end) hooks.on_search_end(net_);
  }
  if (hooks.on_epoch_end) hooks.on_epoch_end(epoch, net_, row);
  row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  state_.next_epoch = epoch + 1;
  log_.push_back(row);
  return row;
}

TrainResult Trainer::run(const TrainHooks& hooks) {
  for (int e = state_.next_epoch; e < plan_.total_epochs; ++e) run_epoch(e, hooks);
  TrainResult r;
  r.metrics = log_;
  r.counters = state_.counters;
  r.weights_reused = weights_reused_ && state_.counters.reinit_events == 0;
  if (!log_.empty() && log_.back().val_miou) r.final_val_miou = *log_.back().val_miou;
  return r;
}

TrainResult train(Supernet& net, const DataPools& data, const PhasePlan& plan, const SplitPolicy& split,
                  const EntropySchedule& schedule, const TrainOptions& options, std::uint64_t seed,
                  const TrainHooks& hooks) {
  Trainer trainer(net, data, plan, split, schedule, options, seed);
  return trainer.run(hooks);
}

}  // namespace dnas
