#pragma once

#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "dnas/data.hpp"
#include "dnas/protocol.hpp"
#include "dnas/supernet.hpp"

namespace dnas {

/// Mean per-cell entropies in nats, and the same divided by ln(number of choices).
/// The normalized means skip cells with a single choice.
struct EntropyReport {
  double edge_mean = 0.0;
  double op_mean = 0.0;
  double edge_normalized = 0.0;
  double op_normalized = 0.0;
};

EntropyReport arch_entropy_report(const ArchParams& arch, const PruneMask* mask = nullptr);

/// Drops the globally weakest edges by normalized beta until round(fraction * edges) are gone,
/// never removing a cell's last edge. Ties go to the lexicographically smaller (layer, scale, source).
PruneMask rank_and_prune(const ArchParams& arch, double fraction, bool prune_ops = false);

/// Forward pass of the discretized network; surviving weights renormalized over survivors.
Var discretized_forward(Supernet& net, Tape& tape, const PruneMask& mask, const Tensor& images);

struct FinetuneSpec {
  int epochs = 3;
  const DataPools* data = nullptr;
  PoolSpec pool = PoolSpec::FineFull;
  TrainOptions options;
  std::uint64_t seed = 0;
};

struct PruneReport {
  double fraction = 0.0;
  double miou_immediate = 0.0;
  std::optional<double> miou_after_finetune;
  double entropy_at_prune = 0.0;
  std::size_t edges_dropped = 0;
};

/// Fine-tunes the weights of `net` under `mask` with the architecture frozen.
void finetune_masked(Supernet& net, const PruneMask& mask, const FinetuneSpec& spec);

/// For each fraction: prune, evaluate; optionally fine-tune a copy and evaluate again.
std::vector<PruneReport> prune_sweep(Supernet& net, std::span<const double> fractions,
                                     std::span<const SegSample> eval_set, const FinetuneSpec* finetune = nullptr,
                                     int eval_batch = 16);

void write_prune_csv(std::ostream& os, std::span<const PruneReport> reports);

}  // namespace dnas
