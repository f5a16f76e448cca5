#include "maxprune/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <thread>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "maxprune/errors.hpp"

namespace maxprune {

namespace {

constexpr std::size_t kEvalChunk = 500;

}  // namespace

TrainConfig TrainConfig::retraining() const {
  TrainConfig c = *this;
  c.iterations = 4000;
  c.base_lr = 0.001f;
  return c;
}

void TrainConfig::validate() const {
  if (!(base_lr >= 0) || !(momentum >= 0) || !(weight_decay >= 0) || !(lr_gamma >= 0) ||
      !(lr_power >= 0))
    throw ArgumentError("training rates must be non-negative");
  if (batch_size == 0) throw ArgumentError("batch_size must be >= 1");
}

float lr_at(std::size_t iter, const TrainConfig& cfg) {
  const double scale = std::pow(1.0 + static_cast<double>(cfg.lr_gamma) * static_cast<double>(iter),
                                -static_cast<double>(cfg.lr_power));
  return static_cast<float>(static_cast<double>(cfg.base_lr) * scale);
}

OptimState OptimState::for_network(const Network& net) {
  OptimState s;
  s.velocity.resize(net.params.size());
  s.bias_velocity.resize(net.params.size());
  for (std::size_t i = 0; i < net.params.size(); ++i) {
    if (net.params[i].weight.empty()) continue;
    s.velocity[i] = Tensor(net.params[i].weight.shape());
    s.bias_velocity[i] = Tensor(net.params[i].bias.shape());
  }
  return s;
}

void sgd_step(Network& net, const Gradients& grads, OptimState& state, const TrainConfig& cfg) {
  if (grads.layers.size() != net.params.size() || state.velocity.size() != net.params.size())
    throw StructureError("sgd_step: gradients or optimizer state do not match the network");
  const float lr = lr_at(state.iteration, cfg);
  const float mom = cfg.momentum;
  const float wd = cfg.weight_decay;
  auto update = [&](Tensor& w, const Tensor& g, Tensor& v, const std::vector<std::uint8_t>* mask) {
    if (g.shape() != w.shape() || v.shape() != w.shape())
      throw StructureError("sgd_step: shape mismatch on " + w.shape().to_string());
    float* wp = w.raw();
    float* vp = v.raw();
    const float* gp = g.raw();
    for (std::size_t e = 0; e < w.numel(); ++e) {
      vp[e] = mom * vp[e] - lr * (gp[e] + wd * wp[e]);
      wp[e] += vp[e];
    }
    if (mask) {
      for (std::size_t e = 0; e < mask->size(); ++e)
        if ((*mask)[e]) wp[e] = vp[e] = 0.0f;
    }
  };
  for (std::size_t i = 0; i < net.params.size(); ++i) {
    LayerParams& p = net.params[i];
    if (p.weight.empty()) continue;
    update(p.weight, grads.layers[i].weight, state.velocity[i], p.has_mask() ? &p.mask : nullptr);
    update(p.bias, grads.layers[i].bias, state.bias_velocity[i], nullptr);
  }
  ++state.iteration;
}

double running_loss(const History& history, std::size_t window) {
  if (history.empty()) return 0.0;
  const std::size_t n = std::min(window, history.size());
  double sum = 0.0;
  for (std::size_t i = history.size() - n; i < history.size(); ++i) sum += history[i].loss;
  return sum / static_cast<double>(n);
}

namespace {

// Every training step allocates and frees activation buffers of a few MB.
// glibc would serve each from a fresh mmap and fault its pages in again;
// keeping them on the heap removes that kernel time.
void keep_large_blocks_on_heap() {
#if defined(__GLIBC__)
  static std::once_flag once;
  std::call_once(once, [] {
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
  });
#endif
}

}  // namespace

History train(Network& net, const Dataset& data, const TrainConfig& cfg, const Dataset* monitor,
              const StepObserver& observer) {
  cfg.validate();
  if (data.empty()) throw DataError("train: empty dataset");
  net.validate();
  keep_large_blocks_on_heap();
  History history;
  if (cfg.iterations == 0) return history;
  history.reserve(cfg.iterations);
  OptimState state = OptimState::for_network(net);
  std::uint64_t epoch = 0;
  auto order = batches(data.size(), cfg.batch_size, cfg.seed, epoch);
  std::size_t cursor = 0;
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    if (cursor == order.size()) {
      order = batches(data.size(), cfg.batch_size, cfg.seed, ++epoch);
      cursor = 0;
    }
    const Batch b = gather(data, order[cursor++]);
    ForwardResult fr = forward(static_cast<const Network&>(net), b.images);
    LossResult lr = softmax_xent(fr.logits, b.labels);
    Gradients g = backward(net, fr.cache, lr.grad_logits);
    HistoryEntry entry{it, lr.loss, lr_at(state.iteration, cfg), std::nullopt};
    sgd_step(net, g, state, cfg);
    if (monitor && cfg.eval_every > 0 && (it + 1) % cfg.eval_every == 0)
      entry.eval_accuracy = evaluate(net, *monitor);
    if (observer) observer(entry);
    history.push_back(entry);
  }
  return history;
}

std::vector<std::uint8_t> correctness(const Network& net, const Dataset& data, std::size_t threads) {
  if (data.empty()) throw DataError("evaluate: empty dataset");
  keep_large_blocks_on_heap();
  std::vector<std::uint8_t> ok(data.size(), 0);
  auto run = [&](std::size_t begin, std::size_t end) {
    for (std::size_t s = begin; s < end; s += kEvalChunk) {
      const std::size_t e = std::min(end, s + kEvalChunk);
      const Batch b = slice(data, s, e);
      const Tensor logits = predict(net, b.images);
      const std::size_t classes = logits.shape()[1];
      for (std::size_t i = 0; i < e - s; ++i) {
        const float* row = logits.raw() + i * classes;
        const auto best = static_cast<int>(std::max_element(row, row + classes) - row);
        ok[s + i] = best == b.labels[i] ? 1 : 0;
      }
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, data.size()));
  if (threads == 1) {
    run(0, data.size());
  } else {
    std::vector<std::thread> pool;
    const std::size_t per = (data.size() + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t) {
      const std::size_t begin = t * per, end = std::min(data.size(), begin + per);
      if (begin < end) pool.emplace_back(run, begin, end);
    }
    for (auto& th : pool) th.join();
  }
  return ok;
}

double evaluate(const Network& net, const Dataset& data, std::size_t threads) {
  const auto ok = correctness(net, data, threads);
  std::size_t hits = 0;
  for (auto v : ok) hits += v;
  return static_cast<double>(hits) / static_cast<double>(ok.size());
}

}  // namespace maxprune
