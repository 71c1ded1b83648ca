#include "dnas/discretization.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <tuple>

#include "dnas/errors.hpp"
#include "dnas/regularizer.hpp"

namespace dnas {

EntropyReport arch_entropy_report(const ArchParams& arch, const PruneMask* mask) {
  EntropyReport r;
  if (arch.cells.empty()) return r;
  int edge_norm_cells = 0, op_norm_cells = 0;
  for (std::size_t c = 0; c < arch.cells.size(); ++c) {
    const auto& cell = arch.cells[c];
    const auto ew = edge_weights(cell, c, mask);
    const auto ow = op_weights(cell, c, mask);
    const double he = entropy_of(ew), ho = entropy_of(ow);
    r.edge_mean += he;
    r.op_mean += ho;
    const auto ne = surviving_edges(cell, c, mask).size();
    const auto no = surviving_ops(cell, c, mask).size();
    if (ne > 1) {
      r.edge_normalized += he / std::log(static_cast<double>(ne));
      ++edge_norm_cells;
    }
    if (no > 1) {
      r.op_normalized += ho / std::log(static_cast<double>(no));
      ++op_norm_cells;
    }
  }
  const auto n = static_cast<double>(arch.cells.size());
  r.edge_mean /= n;
  r.op_mean /= n;
  if (edge_norm_cells) r.edge_normalized /= edge_norm_cells;
  if (op_norm_cells) r.op_normalized /= op_norm_cells;
  return r;
}

PruneMask rank_and_prune(const ArchParams& arch, double fraction, bool prune_ops) {
  if (!(fraction >= 0.0 && fraction < 1.0)) throw ConfigError("prune fraction must lie in [0, 1)");
  PruneMask mask;
  mask.fraction = fraction;

  struct Candidate {
    double weight;
    EdgeKey key;
    std::size_t cell;
  };
  std::vector<Candidate> edges;
  std::vector<std::size_t> remaining(arch.cells.size());
  for (std::size_t c = 0; c < arch.cells.size(); ++c) {
    const auto& cell = arch.cells[c];
    const auto w = edge_weights(cell, c);
    remaining[c] = cell.sources.size();
    for (std::size_t j = 0; j < cell.sources.size(); ++j) edges.push_back({w[j], {cell.layer, cell.scale, cell.sources[j]}, c});
  }
  std::sort(edges.begin(), edges.end(), [](const Candidate& a, const Candidate& b) {
    if (a.weight != b.weight) return a.weight < b.weight;
    return a.key < b.key;
  });
  const auto target = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(edges.size())));
  for (const auto& e : edges) {
    if (mask.dropped_edges.size() >= target) break;
    if (remaining[e.cell] <= 1) continue;
    mask.dropped_edges.insert(e.key);
    --remaining[e.cell];
  }

  if (prune_ops) {
    struct OpCandidate {
      double weight;
      std::size_t cell, op;
    };
    std::vector<OpCandidate> ops_list;
    std::vector<std::size_t> left(arch.cells.size());
    for (std::size_t c = 0; c < arch.cells.size(); ++c) {
      const auto w = op_weights(arch.cells[c], c);
      left[c] = w.size();
      for (std::size_t k = 0; k < w.size(); ++k) ops_list.push_back({w[k], c, k});
    }
    std::sort(ops_list.begin(), ops_list.end(), [](const OpCandidate& a, const OpCandidate& b) {
      return std::tie(a.weight, a.cell, a.op) < std::tie(b.weight, b.cell, b.op);
    });
    const auto op_target = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(ops_list.size())));
    for (const auto& o : ops_list) {
      if (mask.dropped_ops.size() >= op_target) break;
      if (left[o.cell] <= 1) continue;
      mask.dropped_ops.insert({o.cell, o.op});
      --left[o.cell];
    }
  }
  return mask;
}

Var discretized_forward(Supernet& net, Tape& tape, const PruneMask& mask, const Tensor& images) {
  ForwardOptions fo;
  fo.training = false;
  fo.track_weights = false;
  fo.track_arch = false;
  fo.mask = &mask;
  return net.forward(tape, images, fo);
}

void finetune_masked(Supernet& net, const PruneMask& mask, const FinetuneSpec& spec) {
  if (spec.epochs <= 0) return;
  if (!spec.data) throw ConfigError("finetune: no training data");
  auto [pool, tail] = resolve_pool(*spec.data, spec.pool, spec.seed);
  BatchStream stream(std::move(pool), std::move(tail), spec.options.batch_size,
                     derive_seed(spec.seed, {tag_of("finetune.stream")}), spec.options.augment);
  const auto bs = static_cast<std::size_t>(spec.options.batch_size);
  const int steps = spec.options.steps_per_epoch > 0
                        ? spec.options.steps_per_epoch
                        : static_cast<int>(std::max<std::size_t>(1, (stream.pass_length() + bs - 1) / bs));
  Sgd sgd(spec.options.sgd);
  std::int64_t step = 0;
  for (int e = 0; e < spec.epochs; ++e)
    for (int s = 0; s < steps; ++s, ++step) weight_step(net, stream.next(), sgd, step, &mask, spec.seed);
}

std::vector<PruneReport> prune_sweep(Supernet& net, std::span<const double> fractions,
                                     std::span<const SegSample> eval_set, const FinetuneSpec* finetune,
                                     int eval_batch) {
  for (std::size_t i = 1; i < fractions.size(); ++i)
    if (!(fractions[i] > fractions[i - 1])) throw ConfigError("prune fractions must be strictly increasing");
  std::vector<PruneReport> out;
  for (double f : fractions) {
    PruneReport r;
    r.fraction = f;
    const PruneMask mask = rank_and_prune(net.arch(), f);
    r.edges_dropped = mask.dropped_edges.size();
    r.entropy_at_prune = arch_entropy_report(net.arch(), &mask).edge_mean;
    r.miou_immediate = evaluate_miou(net, eval_set, eval_batch, &mask);
    if (finetune && finetune->epochs > 0) {
      Supernet copy = net;
      finetune_masked(copy, mask, *finetune);
      r.miou_after_finetune = evaluate_miou(copy, eval_set, eval_batch, &mask);
    }
    out.push_back(r);
  }
  return out;
}

void write_prune_csv(std::ostream& os, std::span<const PruneReport> reports) {
  os << "fraction,miou_immediate,miou_after_finetune,entropy_at_prune\n";
  os << std::setprecision(17);
  for (const auto& r : reports) {
    os << r.fraction << ',' << r.miou_immediate << ',';
    if (r.miou_after_finetune) os << *r.miou_after_finetune;
    os << ',' << r.entropy_at_prune << '\n';
  }
}

}  // namespace dnas
