#include "maxprune/pruning.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <sstream>
#include <thread>

#include "maxprune/errors.hpp"

namespace maxprune {

namespace {

constexpr std::size_t kCountChunk = 256;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

const MaxoutState& countable_state(const Network& net) {
  if (!net.maxout) throw StructureError("network has no maxout layer to count");
  if (net.maxout->k_current < 2)
    throw StructureError("maxout units have a single survivor (k_current = 1); nothing to rank");
  return *net.maxout;
}

WinnerCounts empty_counts(const MaxoutState& state) {
  WinnerCounts wc;
  wc.units.resize(state.unit_count);
  for (std::size_t u = 0; u < state.unit_count; ++u) {
    wc.units[u].survivors = state.survivors[u];
    wc.units[u].counts.assign(state.k_current, 0);
  }
  return wc;
}

std::string fraction_label(double f) {
  std::ostringstream os;
  os << f;
  return os.str();
}

}  // namespace

void WinnerCounts::merge(const WinnerCounts& other) {
  if (other.units.size() != units.size())
    throw StructureError("cannot merge winner counts over different unit layouts");
  for (std::size_t u = 0; u < units.size(); ++u) {
    if (other.units[u].survivors != units[u].survivors)
      throw StructureError("cannot merge winner counts of unit " + std::to_string(u) +
                           ": survivor sets differ");
    for (std::size_t s = 0; s < units[u].counts.size(); ++s) units[u].counts[s] += other.units[u].counts[s];
  }
  positions += other.positions;
}

WinnerCounts count_winners_shard(const Network& net, const Dataset& data, std::size_t begin,
                                 std::size_t end) {
  const MaxoutState& state = countable_state(net);
  const std::size_t mi = *net.spec.maxout_index();
  WinnerCounts wc = empty_counts(state);
  for (std::size_t s = begin; s < end; s += kCountChunk) {
    const std::size_t e = std::min(end, s + kCountChunk);
    const Batch b = slice(data, s, e);
    const ForwardResult fr = forward(net, b.images);
    const MaxoutWinners& w = *fr.cache.layers[mi].winners;
    for (std::size_t bi = 0; bi < w.batch; ++bi)
      for (std::size_t u = 0; u < w.units; ++u)
        for (std::size_t p = 0; p < w.positions; ++p) ++wc.units[u].counts[w.at(bi, u, p)];
    wc.positions += w.batch * w.positions;
  }
  return wc;
}

WinnerCounts count_winners(Network& net, const Dataset& data, std::size_t threads) {
  const MaxoutState& state = countable_state(net);
  if (data.empty()) throw DataError("count_winners: empty dataset");
  WinnerCounts total = empty_counts(state);
  threads = std::max<std::size_t>(1, std::min(threads, data.size()));
  if (threads == 1) {
    // Single pass through the counting forward.
    net.maxout->reset_counts();
    for (std::size_t s = 0; s < data.size(); s += kCountChunk) {
      const std::size_t e = std::min(data.size(), s + kCountChunk);
      const Batch b = slice(data, s, e);
      const Tensor logits = forward(net, b.images, true).logits;
      const auto shapes = activation_shapes(net, e - s);
      const Shape& in = shapes[*net.spec.maxout_index() - 1];
      total.positions += (e - s) * (in.rank() == 4 ? in[2] * in[3] : 1);
    }
    for (std::size_t u = 0; u < state.unit_count; ++u) total.units[u].counts = net.maxout->win_counts[u];
    return total;
  }
  std::vector<WinnerCounts> shards(threads);
  std::vector<std::thread> pool;
  const std::size_t per = (data.size() + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t begin = std::min(data.size(), t * per);
    const std::size_t end = std::min(data.size(), begin + per);
    pool.emplace_back([&, t, begin, end] { shards[t] = count_winners_shard(net, data, begin, end); });
  }
  for (auto& th : pool) th.join();
  for (const auto& s : shards) total.merge(s);
  for (std::size_t u = 0; u < state.unit_count; ++u) net.maxout->win_counts[u] = total.units[u].counts;
  return total;
}

Network prune_least_active(const Network& net, const WinnerCounts& counts) {
  const MaxoutState& state = countable_state(net);
  if (counts.units.size() != state.unit_count)
    throw StructureError("winner counts cover " + std::to_string(counts.units.size()) + " of " +
                         std::to_string(state.unit_count) + " maxout units");
  const std::size_t k = state.k_current;
  const std::size_t mi = *net.spec.maxout_index();
  const std::size_t feeder = mi - 1;

  std::vector<std::size_t> keep;  // physical rows of the feeding layer to retain
  keep.reserve(state.unit_count * (k - 1));
  Network out = net;
  MaxoutState& next = *out.maxout;
  for (std::size_t u = 0; u < state.unit_count; ++u) {
    const UnitCounts& uc = counts.units[u];
    if (uc.survivors != state.survivors[u] || uc.counts.size() != k)
      throw StructureError("winner counts for unit " + std::to_string(u) +
                           " do not match the network's survivors");
    const std::size_t drop = static_cast<std::size_t>(
        std::min_element(uc.counts.begin(), uc.counts.end()) - uc.counts.begin());
    next.survivors[u].clear();
    for (std::size_t s = 0; s < k; ++s) {
      if (s == drop) continue;
      keep.push_back(u * k + s);
      next.survivors[u].push_back(state.survivors[u][s]);
    }
  }
  next.k_current = k - 1;
  next.win_counts.assign(state.unit_count, std::vector<std::uint64_t>(k - 1, 0));

  const LayerParams& src = net.params[feeder];
  const std::size_t row = src.weight.numel() / src.weight.shape()[0];
  std::vector<std::size_t> dims = src.weight.shape().dims();
  dims[0] = keep.size();
  LayerParams& dst = out.params[feeder];
  dst.weight = Tensor(Shape(dims));
  dst.bias = Tensor(Shape{keep.size()});
  if (src.has_mask()) dst.mask.assign(keep.size() * row, 0);
  for (std::size_t r = 0; r < keep.size(); ++r) {
    std::copy_n(src.weight.raw() + keep[r] * row, row, dst.weight.raw() + r * row);
    dst.bias[r] = src.bias[keep[r]];
    if (src.has_mask())
      std::copy_n(src.mask.begin() + static_cast<std::ptrdiff_t>(keep[r] * row), row,
                  dst.mask.begin() + static_cast<std::ptrdiff_t>(r * row));
  }
  ++out.structure_version;
  out.validate();
  return out;
}

std::pair<Network, std::vector<ExperimentRecord>> iterative_neuron_prune(
    const Network& net, const Dataset& train_data, const Dataset& test_data,
    const PruneSchedule& schedule, std::size_t steps) {
  Network cur = net;
  std::vector<ExperimentRecord> records;
  if (steps == 0) return {std::move(cur), std::move(records)};
  if (!net.maxout) throw StructureError("iterative_neuron_prune: network has no maxout layer");
  if (steps > net.maxout->k_current - 1)
    throw ArgumentError("cannot prune " + std::to_string(steps) + " neurons from units of k=" +
                        std::to_string(net.maxout->k_current));
  for (std::size_t step = 1; step <= steps; ++step) {
    const auto start = Clock::now();
    const WinnerCounts counts = count_winners(cur, train_data, schedule.threads);
    cur = prune_least_active(cur, counts);
    TrainConfig cfg = schedule.retrain;
    cfg.seed = splitmix64(schedule.retrain.seed + step);
    train(cur, train_data, cfg);
    const double acc = evaluate(cur, test_data, schedule.threads);
    records.push_back(describe(cur, "prune-" + std::to_string(step), acc, seconds_since(start), step));
  }
  return {std::move(cur), std::move(records)};
}

// ---------------------------------------------------------------------------
// Weight pruning

WeightThreshold threshold_for_fraction(const Network& net, double fraction) {
  if (!(fraction >= 0.0) || fraction >= 1.0)
    throw ArgumentError("pruning fraction " + std::to_string(fraction) + " outside [0, 1)");
  std::vector<float> mags;
  for (const LayerParams& p : net.params)
    for (float w : p.weight.data()) mags.push_back(std::fabs(w));
  if (mags.empty()) throw StructureError("network has no multiplicative weights");
  WeightThreshold cut;
  cut.count = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(mags.size())));
  if (cut.count == 0) {
    const float lo = *std::min_element(mags.begin(), mags.end());
    cut.tau = std::nextafter(lo, -std::numeric_limits<float>::infinity());
    return cut;
  }
  auto nth = mags.begin() + static_cast<std::ptrdiff_t>(cut.count - 1);
  std::nth_element(mags.begin(), nth, mags.end());
  cut.tau = *nth;
  return cut;
}

namespace {

std::pair<Network, ParamAccount> mask_where(const Network& net, float tau, std::size_t tie_budget,
                                            bool all_ties) {
  Network out = net;
  for (LayerParams& p : out.params) {
    if (p.weight.empty()) continue;
    if (!p.has_mask()) p.mask.assign(p.weight.numel(), 0);
    for (std::size_t e = 0; e < p.weight.numel(); ++e) {
      const float mag = std::fabs(p.weight[e]);
      bool prune = mag < tau;
      if (!prune && mag == tau) {
        if (all_ties) {
          prune = true;
        } else if (tie_budget > 0) {
          prune = true;
          --tie_budget;
        }
      }
      if (prune) p.mask[e] = 1;
    }
  }
  out.apply_masks();
  ParamAccount account = param_account(out.spec.without_maxout(), out);
  return {std::move(out), std::move(account)};
}

}  // namespace

std::pair<Network, ParamAccount> prune_weights(const Network& net, float tau) {
  if (!(tau >= 0.0f)) throw ArgumentError("weight threshold must be >= 0");
  return mask_where(net, tau, 0, true);
}

std::pair<Network, ParamAccount> prune_weights(const Network& net, const WeightThreshold& cut) {
  std::size_t below = 0;
  for (const LayerParams& p : net.params)
    for (float w : p.weight.data()) below += std::fabs(w) < cut.tau ? 1 : 0;
  const std::size_t ties = cut.count > below ? cut.count - below : 0;
  return mask_where(net, cut.tau, ties, false);
}

double ParamAccount::pw_percent() const {
  return original == 0 ? 0.0
                       : 100.0 * (1.0 - static_cast<double>(current) / static_cast<double>(original));
}

double ParamAccount::combined_percent() const {
  return original == 0 ? 0.0
                       : 100.0 * (1.0 - static_cast<double>(current - masked) /
                                            static_cast<double>(original));
}

ParamAccount param_account(const NetworkSpec& original, const Network& current) {
  if (original.maxout_index())
    throw StructureError("param_account: the reference architecture must not contain maxout");
  const NetworkSpec& cs = current.spec;
  if (original.layers.size() != cs.layers.size() || original.input_channels != cs.input_channels ||
      original.input_height != cs.input_height || original.input_width != cs.input_width)
    throw StructureError("param_account: current network does not descend from the reference");
  for (std::size_t i = 0; i < cs.layers.size(); ++i) {
    LayerSpec a = original.layers[i];
    LayerSpec b = cs.layers[i];
    if (b.kind == LayerKind::maxout) b = LayerSpec{LayerKind::relu, 0, 0, 0};
    if (!(a == b))
      throw StructureError("param_account: layer " + std::to_string(i) + " differs from the reference");
  }

  ParamAccount acc;
  std::size_t channels = original.input_channels;
  std::size_t h = original.input_height, w = original.input_width;
  std::size_t flat = channels * h * w;
  for (std::size_t i = 0; i < original.layers.size(); ++i) {
    const LayerSpec& l = original.layers[i];
    std::uint64_t orig = 0;
    switch (l.kind) {
      case LayerKind::conv2d:
        orig = std::uint64_t{l.units} * channels * l.kernel * l.kernel;
        channels = l.units;
        h = h - l.kernel + 1;
        w = w - l.kernel + 1;
        flat = channels * h * w;
        break;
      case LayerKind::maxpool2:
        h /= 2;
        w /= 2;
        flat = channels * h * w;
        break;
      case LayerKind::dense:
      case LayerKind::softmax:
        orig = std::uint64_t{l.units} * flat;
        channels = flat = l.units;
        break;
      case LayerKind::relu:
      case LayerKind::maxout:
        break;
    }
    if (!l.has_weights()) continue;
    const LayerParams& p = current.params[i];
    ParamAccount::Layer row;
    row.index = i;
    row.original = orig;
    row.current = p.weight.numel();
    for (auto m : p.mask) row.masked += m ? 1 : 0;
    acc.original += row.original;
    acc.current += row.current;
    acc.masked += row.masked;
    acc.layers.push_back(row);
  }
  return acc;
}

double dead_neuron_fraction(const Network& net) {
  std::size_t neurons = 0, dead = 0;
  for (const LayerParams& p : net.params) {
    if (p.weight.empty()) continue;
    const std::size_t rows = p.weight.shape()[0];
    const std::size_t row = p.weight.numel() / rows;
    for (std::size_t r = 0; r < rows; ++r) {
      const float* begin = p.weight.raw() + r * row;
      ++neurons;
      if (std::all_of(begin, begin + row, [](float v) { return v == 0.0f; })) ++dead;
    }
  }
  return neurons == 0 ? 0.0 : static_cast<double>(dead) / static_cast<double>(neurons);
}

std::vector<ExperimentRecord> sweep_weight_pruning(const Network& net,
                                                   std::span<const double> fractions,
                                                   const Dataset& train_data,
                                                   const Dataset& test_data,
                                                   const SweepConfig& config) {
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    if (!(fractions[i] >= 0.0) || fractions[i] >= 1.0)
      throw ArgumentError("sweep fraction " + std::to_string(fractions[i]) + " outside [0, 1)");
    if (i > 0 && fractions[i] < fractions[i - 1])
      throw ArgumentError("sweep fractions must be sorted ascending");
  }
  std::vector<ExperimentRecord> records;
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    const auto start = Clock::now();
    const double f = fractions[i];
    Network point = prune_weights(net, threshold_for_fraction(net, f)).first;
    if (config.retrain_enabled && f > 0.0) {
      TrainConfig cfg = config.retrain;
      cfg.seed = splitmix64(config.retrain.seed + 1000 + i);
      train(point, train_data, cfg);
    }
    const double acc = evaluate(point, test_data, config.threads);
    records.push_back(describe(point, "sweep-" + fraction_label(f), acc, seconds_since(start), i));
  }
  return records;
}

ExperimentRecord describe(const Network& net, std::string stage, double accuracy, double seconds,
                          std::size_t iteration) {
  const ParamAccount acc = param_account(net.spec.without_maxout(), net);
  ExperimentRecord r;
  r.stage = std::move(stage);
  r.k = net.maxout ? net.maxout->k_current : 0;
  r.iteration = iteration;
  r.accuracy = accuracy;
  r.orig_weights = acc.original;
  r.remaining_weights = acc.current;
  r.masked_weights = acc.masked;
  r.pw_percent = acc.pw_percent();
  r.combined_percent = acc.combined_percent();
  r.dead_fraction = dead_neuron_fraction(net);
  r.seconds = seconds;
  return r;
}

}  // namespace maxprune
