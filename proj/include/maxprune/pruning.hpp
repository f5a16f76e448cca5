#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "maxprune/dataio.hpp"
#include "maxprune/network.hpp"
#include "maxprune/record.hpp"
#include "maxprune/trainer.hpp"

namespace maxprune {

// How often each surviving neuron of a maxout unit was the unit's maximum.
struct UnitCounts {
  std::vector<std::uint32_t> survivors;  // original neuron indices
  std::vector<std::uint64_t> counts;
  friend bool operator==(const UnitCounts&, const UnitCounts&) = default;
};

struct WinnerCounts {
  std::vector<UnitCounts> units;
  std::uint64_t positions = 0;  // counted (sample, spatial position) pairs

  // Elementwise sum with counts taken over another shard of the same net.
  void merge(const WinnerCounts& other);
  friend bool operator==(const WinnerCounts&, const WinnerCounts&) = default;
};

// Winner tally for samples [begin, end) without touching the network.
WinnerCounts count_winners_shard(const Network& net, const Dataset& data, std::size_t begin,
                                 std::size_t end);

// Resets the maxout counters, counts every sample of `data` (split into
// `threads` contiguous shards whose tallies are summed), stores the result in
// net.maxout->win_counts and returns it. Parameters are not modified.
WinnerCounts count_winners(Network& net, const Dataset& data, std::size_t threads = 1);

// Removes, from every maxout unit, the surviving neuron with the fewest wins
// (ties: lowest original index) together with its incoming weights and bias.
// The maxout output width is unchanged, so later layers keep their shapes.
Network prune_least_active(const Network& net, const WinnerCounts& counts);

struct PruneSchedule {
  TrainConfig retrain;
  std::size_t threads = 1;
};

// `steps` rounds of count -> prune -> retrain -> evaluate(test). One record
// per round.
std::pair<Network, std::vector<ExperimentRecord>> iterative_neuron_prune(
    const Network& net, const Dataset& train_data, const Dataset& test_data,
    const PruneSchedule& schedule, std::size_t steps);

// Global magnitude cut over all multiplicative weights. Pruning removes every
// weight with |w| < tau plus, in global index order (layer, then row-major),
// weights with |w| == tau until exactly `count` are removed.
struct WeightThreshold {
  float tau = 0.0f;
  std::size_t count = 0;
};

WeightThreshold threshold_for_fraction(const Network& net, double fraction);

struct ParamAccount {
  struct Layer {
    std::size_t index = 0;
    std::uint64_t original = 0;
    std::uint64_t current = 0;
    std::uint64_t masked = 0;
  };
  std::vector<Layer> layers;
  std::uint64_t original = 0;
  std::uint64_t current = 0;
  std::uint64_t masked = 0;

  // 100 (1 - current / original): weights gone from the architecture.
  double pw_percent() const;
  // Also counts masked weights as removed.
  double combined_percent() const;
};

// Counts multiplicative weights (biases excluded). `original` is the
// architecture the current net descends from with maxout replaced by ReLU;
// see NetworkSpec::without_maxout().
ParamAccount param_account(const NetworkSpec& original, const Network& current);

// Masks (and zeroes) every weight with |w| <= tau; biases are exempt.
// Existing masks are kept.
std::pair<Network, ParamAccount> prune_weights(const Network& net, float tau);
std::pair<Network, ParamAccount> prune_weights(const Network& net, const WeightThreshold& cut);

// Fraction of neurons (dense rows, conv filters) whose incoming weights are
// all exactly zero.
double dead_neuron_fraction(const Network& net);

struct SweepConfig {
  TrainConfig retrain;
  std::size_t threads = 1;
  // Skip retraining (record the masked net as is).
  bool retrain_enabled = true;
};

// For each fraction: threshold, mask, retrain, evaluate. Every point starts
// from a copy of `net`.
std::vector<ExperimentRecord> sweep_weight_pruning(const Network& net,
                                                   std::span<const double> fractions,
                                                   const Dataset& train_data,
                                                   const Dataset& test_data,
                                                   const SweepConfig& config);

// Record for a network as it stands.
ExperimentRecord describe(const Network& net, std::string stage, double accuracy,
                          double seconds = 0.0, std::size_t iteration = 0);

}  // namespace maxprune
