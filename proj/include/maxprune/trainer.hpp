#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "maxprune/dataio.hpp"
#include "maxprune/network.hpp"

namespace maxprune {

struct TrainConfig {
  float base_lr = 0.01f;
  float momentum = 0.9f;
  float weight_decay = 5e-4f;
  // Inverse decay: lr = base_lr * (1 + lr_gamma * iter)^(-lr_power).
  float lr_gamma = 1e-4f;
  float lr_power = 0.75f;
  std::size_t iterations = 10000;
  std::size_t batch_size = 64;
  std::uint64_t seed = 1;
  // Evaluate on the monitor set every this many iterations (0 = never).
  std::size_t eval_every = 0;

  // Budget used after each pruning step: 4000 iterations at base_lr 1e-3.
  TrainConfig retraining() const;

  void validate() const;
};

float lr_at(std::size_t iter, const TrainConfig& cfg);

struct OptimState {
  std::vector<Tensor> velocity;  // one per layer; empty for parameter-free layers
  std::vector<Tensor> bias_velocity;
  std::size_t iteration = 0;

  static OptimState for_network(const Network& net);
};

// v <- momentum v - lr (g + weight_decay w); w <- w + v; masked weights and
// their velocities are then forced to 0.
void sgd_step(Network& net, const Gradients& grads, OptimState& state, const TrainConfig& cfg);

struct HistoryEntry {
  std::size_t iteration = 0;
  float loss = 0.0f;
  float lr = 0.0f;
  std::optional<double> eval_accuracy;
};

using History = std::vector<HistoryEntry>;

// Mean loss of the last `window` entries.
double running_loss(const History& history, std::size_t window = 50);

using StepObserver = std::function<void(const HistoryEntry&)>;

// Runs cfg.iterations SGD steps on seeded per-epoch shuffles of `data`,
// starting from fresh velocities. Deterministic in (net, data, cfg).
History train(Network& net, const Dataset& data, const TrainConfig& cfg,
              const Dataset* monitor = nullptr, const StepObserver& observer = {});

// Per-sample 1 if the argmax logit equals the label (first maximum wins).
std::vector<std::uint8_t> correctness(const Network& net, const Dataset& data,
                                      std::size_t threads = 1);

// Fraction of correctly classified samples.
double evaluate(const Network& net, const Dataset& data, std::size_t threads = 1);

}  // namespace maxprune
