#include "dnas/experiment.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "dnas/errors.hpp"

namespace dnas {
namespace {

using json = nlohmann::json;

/// Strict view of one JSON object: every key must be consumed.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  ~Section() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError(where(k) + ": unknown key");
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) && !j_.at(key).is_null();
  }

  void read(const std::string& key, int& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number_integer()) throw ConfigError(where(key) + ": expected an integer");
    const auto x = v.get<std::int64_t>();
    if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max())
      throw ConfigError(where(key) + ": out of range");
    out = static_cast<int>(x);
  }

  void read(const std::string& key, std::uint64_t& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0))
      throw ConfigError(where(key) + ": expected a nonnegative integer");
    out = v.get<std::uint64_t>();
  }

  void read(const std::string& key, double& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number()) throw ConfigError(where(key) + ": expected a number");
    out = v.get<double>();
  }

  void read(const std::string& key, bool& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_boolean()) throw ConfigError(where(key) + ": expected true or false");
    out = v.get<bool>();
  }

  void read(const std::string& key, std::string& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_string()) throw ConfigError(where(key) + ": expected a string");
    out = v.get<std::string>();
  }

  void read(const std::string& key, std::vector<int>& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_array()) throw ConfigError(where(key) + ": expected an array of integers");
    out.clear();
    for (const auto& e : v) {
      if (!e.is_number_integer()) throw ConfigError(where(key) + ": expected an array of integers");
      out.push_back(e.get<int>());
    }
  }

  const json& child(const std::string& key) { return (has(key), j_.at(key)); }
  std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

std::string group_name(ArchGroup g) { return g == ArchGroup::AlphaBeta ? "alpha_beta" : "alpha"; }

ArchGroup parse_group(const std::string& s) {
  if (s == "alpha_beta") return ArchGroup::AlphaBeta;
  if (s == "alpha") return ArchGroup::AlphaOnly;
  throw ConfigError("curvature.group: expected 'alpha_beta' or 'alpha', got '" + s + "'");
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

std::string opt_fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

}  // namespace

std::uint64_t ExperimentConfig::resolved_data_seed() const {
  return data_seed ? *data_seed : derive_seed(seed, {tag_of("data")});
}

int ExperimentConfig::finetune_budget() const {
  if (finetune_epochs) return *finetune_epochs;
  return std::max(1, static_cast<int>(std::lround(0.1 * plan.total_epochs)));
}

void ExperimentConfig::validate() const {
  model.validate();
  plan.validate();
  entropy.validate();
  data.validate();
  if (data.classes != model.num_classes)
    throw ConfigError("data.classes: must equal model.num_classes (" + std::to_string(model.num_classes) + ")");
  if (data.height % model.max_scale() != 0 || data.width % model.max_scale() != 0)
    throw ConfigError("data.height/width: must be divisible by the largest scale " + std::to_string(model.max_scale()));
  if (train.batch_size < 1) throw ConfigError("train.batch_size: must be >= 1");
  if (train.eval_every < 0) throw ConfigError("train.eval_every: must be >= 0");
  if (train.eval_batch < 1) throw ConfigError("train.eval_batch: must be >= 1");
  if (train.eval_samples < 0) throw ConfigError("train.eval_samples: must be >= 0");
  if (train.steps_per_epoch < 0) throw ConfigError("train.steps_per_epoch: must be >= 0");
  if (!(train.sgd.lr > 0) || !(train.adam.lr > 0)) throw ConfigError("optim: learning rates must be positive");
  if (train.sgd.momentum < 0 || train.sgd.momentum >= 1) throw ConfigError("optim.sgd.momentum: must lie in [0, 1)");
  if (train.adam.beta1 < 0 || train.adam.beta1 >= 1 || train.adam.beta2 < 0 || train.adam.beta2 >= 1)
    throw ConfigError("optim.adam: betas must lie in [0, 1)");
  if (train.sgd.weight_decay < 0 || train.adam.weight_decay < 0)
    throw ConfigError("optim: weight decay must be nonnegative");
  if (curvature.enabled) {
    if (curvature.trace.every_n_epochs < 1) throw ConfigError("curvature.every_n_epochs: must be >= 1");
    if (curvature.trace.batches < 1 || curvature.trace.batch_size < 1)
      throw ConfigError("curvature.batches/batch_size: must be >= 1");
    if (curvature.trace.power.max_iters < 1) throw ConfigError("curvature.max_iters: must be >= 1");
    if (!(curvature.trace.power.eps > 0)) throw ConfigError("curvature.epsilon: must be positive");
    if (curvature.trace.power.block < 1) throw ConfigError("curvature.block: must be >= 1");
    if (data.validation < 1) throw ConfigError("curvature: needs a validation pool");
  }
  if (finetune_epochs && *finetune_epochs < 0) throw ConfigError("discretization.finetune_epochs: must be >= 0");
  if (data.fine_train < 1 && data.coarse_train < 1) throw ConfigError("data: no training samples");
}

std::string ExperimentConfig::to_json() const {
  json j;
  j["model"] = {{"preset", preset},
                {"layers", model.layers},
                {"filter_multiplier", model.filter_multiplier},
                {"expansion", model.expansion},
                {"sampling_ratio", model.sampling_ratio},
                {"scales", model.scales},
                {"kernel_set", model.kernel_set},
                {"num_classes", model.num_classes},
                {"in_channels", model.in_channels},
                {"decoder_width", model.decoder_width}};
  j["plan"] = {{"total_epochs", plan.total_epochs},
               {"warmup_frac", plan.warmup_frac},
               {"search_frac", plan.search_frac},
               {"finetune_frac", plan.finetune_frac}};
  j["entropy"] = {{"scaling", to_string(entropy.scaling)},
                  {"c_alpha", entropy.c_alpha},
                  {"c_beta", entropy.c_beta},
                  {"activation", entropy.activation_fraction}};
  j["split"] = {{"weights", to_string(split.weight_stream)}, {"architecture", to_string(split.arch_stream)}};
  j["optim"] = {{"sgd", {{"lr", train.sgd.lr}, {"momentum", train.sgd.momentum}, {"weight_decay", train.sgd.weight_decay}}},
                {"adam",
                 {{"lr", train.adam.lr},
                  {"beta1", train.adam.beta1},
                  {"beta2", train.adam.beta2},
                  {"eps", train.adam.eps},
                  {"weight_decay", train.adam.weight_decay}}}};
  j["train"] = {{"batch_size", train.batch_size},
                {"eval_every", train.eval_every},
                {"eval_batch", train.eval_batch},
                {"eval_samples", train.eval_samples},
                {"steps_per_epoch", train.steps_per_epoch}};
  const auto& a = data.augment;
  j["data"] = {{"fine_train", data.fine_train},
               {"coarse_train", data.coarse_train},
               {"validation", data.validation},
               {"height", data.height},
               {"width", data.width},
               {"classes", data.classes},
               {"coarse_margin", data.coarse_margin},
               {"augment",
                {{"p_flip", a.p_flip},
                 {"p_scale", a.p_scale},
                 {"scale_min", a.scale_min},
                 {"scale_max", a.scale_max},
                 {"p_jitter", a.p_jitter},
                 {"jitter", a.jitter},
                 {"p_noise", a.p_noise},
                 {"noise_std", a.noise_std}}}};
  if (data_seed) j["data"]["seed"] = *data_seed;
  const auto& t = curvature.trace;
  j["curvature"] = {{"enabled", curvature.enabled},
                    {"every_n_epochs", t.every_n_epochs},
                    {"batches", t.batches},
                    {"batch_size", t.batch_size},
                    {"group", group_name(t.group)},
                    {"max_iters", t.power.max_iters},
                    {"tol", t.power.tol},
                    {"epsilon", t.power.eps},
                    {"block", t.power.block}};
  j["discretization"] = json::object();
  if (finetune_epochs) j["discretization"]["finetune_epochs"] = *finetune_epochs;
  j["seed"] = seed;
  j["out"] = out;
  return j.dump(2);
}

std::string ExperimentConfig::to_json_line() const { return json::parse(to_json()).dump(); }

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  ExperimentConfig c;
  {
    Section top(root, "");
    if (top.has("model")) {
      Section m(top.child("model"), "model");
      m.read("preset", c.preset);
      c.model = SupernetConfig::preset(c.preset);
      m.read("layers", c.model.layers);
      m.read("filter_multiplier", c.model.filter_multiplier);
      m.read("expansion", c.model.expansion);
      m.read("sampling_ratio", c.model.sampling_ratio);
      m.read("scales", c.model.scales);
      m.read("kernel_set", c.model.kernel_set);
      m.read("num_classes", c.model.num_classes);
      m.read("in_channels", c.model.in_channels);
      m.read("decoder_width", c.model.decoder_width);
    }
    if (top.has("plan")) {
      Section p(top.child("plan"), "plan");
      p.read("total_epochs", c.plan.total_epochs);
      p.read("warmup_frac", c.plan.warmup_frac);
      p.read("search_frac", c.plan.search_frac);
      p.read("finetune_frac", c.plan.finetune_frac);
    }
    if (top.has("entropy")) {
      Section e(top.child("entropy"), "entropy");
      std::string scaling = to_string(c.entropy.scaling), magnitude;
      e.read("scaling", scaling);
      c.entropy.scaling = parse_scaling(scaling);
      e.read("magnitude", magnitude);
      if (!magnitude.empty()) c.entropy.c_alpha = c.entropy.c_beta = magnitude_preset(magnitude);
      e.read("c_alpha", c.entropy.c_alpha);
      e.read("c_beta", c.entropy.c_beta);
      e.read("activation", c.entropy.activation_fraction);
    }
    if (top.has("split")) {
      Section s(top.child("split"), "split");
      std::string w = to_string(c.split.weight_stream), a = to_string(c.split.arch_stream);
      s.read("weights", w);
      s.read("architecture", a);
      c.split.weight_stream = parse_pool_spec(w);
      c.split.arch_stream = parse_pool_spec(a);
    }
    if (top.has("optim")) {
      Section o(top.child("optim"), "optim");
      if (o.has("sgd")) {
        Section s(o.child("sgd"), "optim.sgd");
        s.read("lr", c.train.sgd.lr);
        s.read("momentum", c.train.sgd.momentum);
        s.read("weight_decay", c.train.sgd.weight_decay);
      }
      if (o.has("adam")) {
        Section a(o.child("adam"), "optim.adam");
        a.read("lr", c.train.adam.lr);
        a.read("beta1", c.train.adam.beta1);
        a.read("beta2", c.train.adam.beta2);
        a.read("eps", c.train.adam.eps);
        a.read("weight_decay", c.train.adam.weight_decay);
      }
    }
    if (top.has("train")) {
      Section t(top.child("train"), "train");
      t.read("batch_size", c.train.batch_size);
      t.read("eval_every", c.train.eval_every);
      t.read("eval_batch", c.train.eval_batch);
      t.read("eval_samples", c.train.eval_samples);
      t.read("steps_per_epoch", c.train.steps_per_epoch);
    }
    c.data.classes = c.model.num_classes;
    if (top.has("data")) {
      Section d(top.child("data"), "data");
      d.read("fine_train", c.data.fine_train);
      d.read("coarse_train", c.data.coarse_train);
      d.read("validation", c.data.validation);
      d.read("height", c.data.height);
      d.read("width", c.data.width);
      d.read("classes", c.data.classes);
      d.read("coarse_margin", c.data.coarse_margin);
      if (d.has("seed")) {
        std::uint64_t s = 0;
        d.read("seed", s);
        c.data_seed = s;
      }
      if (d.has("augment")) {
        Section a(d.child("augment"), "data.augment");
        auto& g = c.data.augment;
        a.read("p_flip", g.p_flip);
        a.read("p_scale", g.p_scale);
        a.read("scale_min", g.scale_min);
        a.read("scale_max", g.scale_max);
        a.read("p_jitter", g.p_jitter);
        a.read("jitter", g.jitter);
        a.read("p_noise", g.p_noise);
        a.read("noise_std", g.noise_std);
      }
    }
    c.train.augment = c.data.augment;
    if (top.has("curvature")) {
      Section k(top.child("curvature"), "curvature");
      auto& t = c.curvature.trace;
      std::string group = group_name(t.group);
      k.read("enabled", c.curvature.enabled);
      k.read("every_n_epochs", t.every_n_epochs);
      k.read("batches", t.batches);
      k.read("batch_size", t.batch_size);
      k.read("group", group);
      t.group = parse_group(group);
      k.read("max_iters", t.power.max_iters);
      k.read("tol", t.power.tol);
      k.read("epsilon", t.power.eps);
      k.read("block", t.power.block);
    }
    if (top.has("discretization")) {
      Section d(top.child("discretization"), "discretization");
      if (d.has("finetune_epochs")) {
        int v = 0;
        d.read("finetune_epochs", v);
        c.finetune_epochs = v;
      }
    }
    top.read("seed", c.seed);
    top.read("out", c.out);
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return from_json(ss.str());
}

void write_csv_header(std::ostream& os, const ExperimentConfig& config, const std::string& kind) {
  os << "# dnas " << kVersion << ' ' << kind << '\n';
  os << "# config: " << config.to_json_line() << '\n';
}

void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows) {
  os << "epoch,phase,loss_a,loss_b,entropy_term,edge_entropy_mean,op_entropy_mean,val_miou,lambda_max\n";
  for (const auto& r : rows) {
    os << r.epoch << ',' << to_string(r.phase) << ',' << fmt(r.loss_a) << ',' << opt_fmt(r.loss_b) << ','
       << fmt(r.entropy_term) << ',' << fmt(r.edge_entropy_mean) << ',' << fmt(r.op_entropy_mean) << ','
       << opt_fmt(r.val_miou) << ',' << opt_fmt(r.lambda_max) << '\n';
  }
}

void write_timing_csv(std::ostream& os, const std::vector<MetricsRow>& rows) {
  os << "epoch,wall_seconds\n";
  for (const auto& r : rows) os << r.epoch << ',' << fmt(r.wall_seconds) << '\n';
}

RunOutcome run_experiment(const ExperimentConfig& config, const DataPools* data, const TrainHooks& extra) {
  config.validate();
  const auto started = std::chrono::steady_clock::now();
  DataPools local;
  if (!data) {
    local = generate(config.data, config.resolved_data_seed());
    data = &local;
  }
  Supernet net = Supernet::build(config.model, derive_seed(config.seed, {tag_of("init")}));
  TrainOptions opts = config.train;
  opts.augment = config.data.augment;
  Trainer trainer(net, *data, config.plan, config.split, config.entropy, opts,
                  derive_seed(config.seed, {tag_of("train")}));
  RunOutcome out;
  const std::string text = config.to_json();

  std::function<void(int, Supernet&, MetricsRow&)> trace_hook;
  if (config.curvature.enabled)
    trace_hook = make_trace_hook(out.trace, *data, config.curvature.trace, derive_seed(config.seed, {tag_of("curv")}));

  TrainHooks hooks = extra;
  hooks.on_epoch_end = [&](int epoch, Supernet& n, MetricsRow& row) {
    if (trace_hook) trace_hook(epoch, n, row);
    if (row.val_miou && *row.val_miou > out.best_val_miou) {
      out.best_val_miou = *row.val_miou;
      out.best_checkpoint = capture(n, nullptr, text, config.seed);
    }
    if (extra.on_epoch_end) extra.on_epoch_end(epoch, n, row);
  };
  out.result = trainer.run(hooks);
  out.final_checkpoint = capture(net, &trainer.state(), text, config.seed);
  out.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return out;
}

void write_run_outputs(const ExperimentConfig& config, const RunOutcome& outcome) {
  const std::filesystem::path dir(config.out);
  std::filesystem::create_directories(dir);
  auto open = [&dir](const char* name) {
    std::ofstream os(dir / name);
    if (!os) throw IoError("cannot write " + (dir / name).string());
    return os;
  };
  {
    auto os = open("metrics.csv");
    write_csv_header(os, config, "metrics");
    write_metrics_csv(os, outcome.result.metrics);
  }
  {
    auto os = open("timing.csv");
    write_csv_header(os, config, "timing");
    write_timing_csv(os, outcome.result.metrics);
  }
  {
    auto os = open("config.json");
    os << config.to_json() << '\n';
  }
  outcome.final_checkpoint.save(dir / "final.ckpt");
  if (outcome.best_checkpoint) outcome.best_checkpoint->save(dir / "best.ckpt");
  if (config.curvature.enabled) {
    auto os = open("eigen.csv");
    write_csv_header(os, config, "eigen");
    write_eigen_csv(os, outcome.trace);
  }
}

LoadedModel load_model(const std::filesystem::path& path) {
  Checkpoint ckpt = Checkpoint::load(path);
  ExperimentConfig config;
  try {
    config = ExperimentConfig::from_json(ckpt.config_text);
  } catch (const ConfigError& e) {
    throw IoError(std::string("checkpoint carries an invalid config: ") + e.what());
  }
  LoadedModel m{config, Supernet::build(config.model, 0)};
  restore(m.net, nullptr, ckpt);
  return m;
}

std::vector<PruneReport> run_prune_sweep(LoadedModel& model, const DataPools& data, std::span<const double> fractions,
                                         int finetune_epochs) {
  FinetuneSpec spec;
  spec.epochs = finetune_epochs;
  spec.data = &data;
  spec.pool = model.config.split.weight_stream;
  spec.options = model.config.train;
  spec.seed = derive_seed(model.config.seed, {tag_of("finetune")});
  return prune_sweep(model.net, fractions, data.validation, finetune_epochs > 0 ? &spec : nullptr,
                     model.config.train.eval_batch);
}

AblationAxis parse_axis(std::string_view name) {
  if (name == "entropy-magnitudes") return AblationAxis::EntropyMagnitudes;
  if (name == "scaling-functions") return AblationAxis::ScalingFunctions;
  if (name == "splits") return AblationAxis::Splits;
  throw ConfigError("--axis: expected entropy-magnitudes, scaling-functions or splits, got '" + std::string(name) + "'");
}

std::vector<AblationSetting> ablation_grid(const ExperimentConfig& base, AblationAxis axis) {
  std::vector<AblationSetting> grid;
  if (axis == AblationAxis::Splits) {
    for (const auto& s : split_ablation_rows()) {
      ExperimentConfig c = base;
      c.split = s;
      grid.push_back({s.name(), c});
    }
    return grid;
  }
  const std::vector<std::string> magnitudes =
      axis == AblationAxis::EntropyMagnitudes ? std::vector<std::string>{"-", "L", "M", "H"} : std::vector<std::string>{"M"};
  for (Scaling sc : {Scaling::Constant, Scaling::Linear}) {
    for (const auto& m : magnitudes) {
      ExperimentConfig c = base;
      c.entropy.scaling = sc;
      c.entropy.c_alpha = c.entropy.c_beta = magnitude_preset(m);
      grid.push_back({m + "/" + to_string(sc), c});
    }
  }
  return grid;
}

std::vector<AblationRun> run_ablation(const std::vector<AblationSetting>& grid, const std::vector<std::uint64_t>& seeds,
                                      int workers) {
  std::vector<AblationRun> runs;
  for (const auto& s : grid)
    for (auto seed : seeds) runs.push_back({s.name, seed, std::nullopt, "ok"});
  std::atomic<std::size_t> next{0};
  auto work = [&]() {
    for (std::size_t i = next++; i < runs.size(); i = next++) {
      const auto& setting = grid[i / seeds.size()];
      ExperimentConfig c = setting.config;
      c.seed = runs[i].seed;
      try {
        runs[i].miou = run_experiment(c).result.final_val_miou;
      } catch (const std::exception& e) {
        runs[i].status = std::string("error: ") + e.what();
      }
    }
  };
  const int n = std::max(1, std::min<int>(workers, static_cast<int>(runs.size())));
  if (n == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < n; ++i) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  return runs;
}

void write_ablation_csv(std::ostream& os, const std::vector<AblationSetting>& grid,
                        const std::vector<AblationRun>& runs) {
  os << "kind,setting,seed,final_val_miou,std,status\n";
  for (const auto& r : runs) {
    std::string status = r.status;
    std::replace(status.begin(), status.end(), ',', ';');
    std::replace(status.begin(), status.end(), '\n', ' ');
    os << "run," << r.setting << ',' << r.seed << ',' << opt_fmt(r.miou) << ",," << status << '\n';
  }
  for (const auto& s : grid) {
    std::vector<double> v;
    std::size_t total = 0;
    for (const auto& r : runs) {
      if (r.setting != s.name) continue;
      ++total;
      if (r.miou) v.push_back(*r.miou);
    }
    double mean = 0.0, var = 0.0;
    for (double x : v) mean += x;
    if (!v.empty()) mean /= static_cast<double>(v.size());
    for (double x : v) var += (x - mean) * (x - mean);
    if (!v.empty()) var /= static_cast<double>(v.size());
    os << "summary," << s.name << ",," << (v.empty() ? std::string() : fmt(mean)) << ','
       << (v.empty() ? std::string() : fmt(std::sqrt(var))) << ',' << v.size() << '/' << total << " ok\n";
  }
}

std::vector<double> parse_double_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("expected a comma-separated list of numbers, got '" + text + "'");
    }
  }
  return out;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> out;
  for (double d : parse_double_list(text)) {
    if (d < 0 || d != std::floor(d)) throw ConfigError("--seeds: expected nonnegative integers");
    out.push_back(static_cast<std::uint64_t>(d));
  }
  if (out.empty()) throw ConfigError("--seeds: empty list");
  return out;
}

}  // namespace dnas
