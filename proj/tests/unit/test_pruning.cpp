#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "maxprune/errors.hpp"
#include "maxprune/pruning.hpp"
#include "oracles.hpp"

using namespace maxprune;

namespace {

// input [1 x 1 x W] -> dense(W, identity) -> maxout(k) -> softmax(2)
Network identity_maxout(std::size_t width, std::size_t k) {
  NetworkSpec s;
  s.input_height = 1;
  s.input_width = width;
  s.layers = {LayerSpec{LayerKind::dense, width, 0, 0}, LayerSpec{LayerKind::maxout, 0, 0, k},
              LayerSpec{LayerKind::softmax, 2, 0, 0}};
  Network net = build_network(s, 1);
  net.params[0].weight.fill(0.0f);
  for (std::size_t i = 0; i < width; ++i) net.params[0].weight.at(i, i) = 1.0f;
  return net;
}

Dataset rows(std::size_t width, const std::vector<float>& values) {
  Dataset d;
  const std::size_t n = values.size() / width;
  d.images = Tensor(Shape{n, 1, 1, width}, values);
  d.labels.assign(n, 0);
  return d;
}

WinnerCounts synthetic_counts(const Network& net, std::uint64_t seed) {
  Rng rng(seed);
  WinnerCounts wc;
  for (std::size_t u = 0; u < net.maxout->unit_count; ++u) {
    UnitCounts uc{net.maxout->survivors[u], {}};
    for (std::size_t s = 0; s < net.maxout->k_current; ++s) uc.counts.push_back(rng.below(5));
    wc.units.push_back(uc);
  }
  return wc;
}

std::vector<std::uint64_t> account_layers(const ParamAccount& a) {
  std::vector<std::uint64_t> v;
  for (const auto& l : a.layers) v.push_back(l.current);
  return v;
}

}  // namespace

TEST(Counting, HandTracedWinners) {
  Network net = identity_maxout(2, 2);
  const WinnerCounts wc = count_winners(net, rows(2, {2, 1, 3, 0, 0, 5}));
  EXPECT_EQ(wc.units[0].counts, (std::vector<std::uint64_t>{2, 1}));
  EXPECT_EQ(wc.positions, 3u);
  EXPECT_EQ(net.maxout->win_counts[0], wc.units[0].counts);
}

TEST(Counting, EqualInputsAllGoToLowestIndex) {
  Network net = identity_maxout(4, 4);
  const WinnerCounts wc = count_winners(net, rows(4, {1, 1, 1, 1, 0, 0, 0, 0}));
  EXPECT_EQ(wc.units[0].counts, (std::vector<std::uint64_t>{2, 0, 0, 0}));
}

TEST(Counting, ShardsMergeToSinglePassAndOracle) {
  for (Variant v : {Variant::mfc, Variant::mc}) {
    Network net = oracle::tiny_network(v, 3, 21);
    const Dataset d = oracle::random_dataset(net.spec, 100, 4);
    const WinnerCounts single = count_winners(net, d, 1);
    const WinnerCounts expect = oracle::count_by_sample(net, d);
    EXPECT_EQ(single, expect);
    for (std::size_t threads : {2u, 3u, 7u}) EXPECT_EQ(count_winners(net, d, threads), single);
    WinnerCounts a = count_winners_shard(net, d, 0, 37);
    a.merge(count_winners_shard(net, d, 37, 100));
    EXPECT_EQ(a, single);
    const std::uint64_t positions = v == Variant::mc ? 100u * 4 : 100u;
    EXPECT_EQ(single.positions, positions);
    for (const auto& u : single.units) {
      std::uint64_t sum = 0;
      for (auto c : u.counts) sum += c;
      EXPECT_EQ(sum, positions);
    }
  }
}

TEST(Counting, ParametersUntouched) {
  Network net = oracle::tiny_network(Variant::mc, 2, 3);
  const Network before = net;
  count_winners(net, oracle::random_dataset(net.spec, 10, 1), 2);
  for (std::size_t l = 0; l < net.params.size(); ++l)
    EXPECT_TRUE(net.params[l].weight.bit_equal(before.params[l].weight));
}

TEST(Counting, RequiresPrunableMaxout) {
  Network base = oracle::tiny_network(Variant::baseline, 2, 1);
  const Dataset d = oracle::random_dataset(base.spec, 4, 1);
  EXPECT_THROW(count_winners(base, d), StructureError);
  Network one = oracle::tiny_network(Variant::mfc, 2, 1);
  one = prune_least_active(one, synthetic_counts(one, 1));
  EXPECT_EQ(one.maxout->k_current, 1u);
  EXPECT_THROW(count_winners(one, d), StructureError);
  EXPECT_THROW(prune_least_active(one, synthetic_counts(one, 1)), StructureError);
}

TEST(Prune, RemovesArgminSlot) {
  Network net = identity_maxout(4, 4);
  WinnerCounts wc;
  wc.units.push_back({{0, 1, 2, 3}, {5, 1, 3, 2}});
  const Network p = prune_least_active(net, wc);
  EXPECT_EQ(p.maxout->k_current, 3u);
  EXPECT_EQ(p.maxout->survivors[0], (std::vector<std::uint32_t>{0, 2, 3}));
  EXPECT_EQ(p.params[0].weight.shape(), Shape({3, 4}));
  EXPECT_EQ(p.params[0].weight.at(1, 2), 1.0f);  // row of original neuron 2
  EXPECT_EQ(net.maxout->k_current, 4u);           // input untouched
  EXPECT_GT(p.structure_version, net.structure_version);
}

TEST(Prune, TieRemovesLowestOriginalIndex) {
  Network net = identity_maxout(4, 4);
  WinnerCounts wc;
  wc.units.push_back({{0, 1, 2, 3}, {4, 2, 2, 9}});
  EXPECT_EQ(prune_least_active(net, wc).maxout->survivors[0], (std::vector<std::uint32_t>{0, 2, 3}));
}

TEST(Prune, MismatchedCountsAreStructureErrors) {
  Network net = identity_maxout(4, 4);
  WinnerCounts wc;
  wc.units.push_back({{0, 1, 2, 4}, {1, 1, 1, 1}});
  EXPECT_THROW(prune_least_active(net, wc), StructureError);
  EXPECT_THROW(prune_least_active(net, WinnerCounts{}), StructureError);
}

TEST(Prune, MfcStepShrinksDenseRows) {
  Network net = build_network(NetworkSpec::reference(Variant::mfc, 512), 1);
  const std::size_t dense = *net.spec.maxout_index() - 1;
  EXPECT_EQ(net.layer_width(dense), 512u);
  net = prune_least_active(net, synthetic_counts(net, 2));
  EXPECT_EQ(net.layer_width(dense), 384u);
  EXPECT_EQ(net.maxout->unit_count, 128u);
  EXPECT_NO_THROW(predict(net, Tensor(net.spec.input_shape(1), 0.5f)));
}

// Removing a neuron that never wins leaves every output bit-identical.
TEST(Prune, LocalEquivalenceForLosingNeuron) {
  for (Variant v : {Variant::mfc, Variant::mc}) {
    Network net = oracle::tiny_network(v, 3, 31);
    const std::size_t feeder = *net.spec.maxout_index() - 1;
    // Slot 1 of every unit can never win.
    for (std::size_t u = 0; u < net.maxout->unit_count; ++u) net.params[feeder].bias[u * 3 + 1] = -100.0f;
    const Dataset d = oracle::random_dataset(net.spec, 64, 9);
    const WinnerCounts wc = count_winners(net, d);
    for (const auto& u : wc.units) EXPECT_EQ(u.counts[1], 0u);
    const Network pruned = prune_least_active(net, wc);
    EXPECT_TRUE(predict(net, d.images).bit_equal(predict(pruned, d.images)));
  }
}

// Same property on whatever a trained-free random net happens to remove:
// check exactly the samples for which no removed neuron won anywhere.
TEST(Prune, LocalEquivalencePerSample) {
  for (Variant v : {Variant::mfc, Variant::mc}) {
    Network net = oracle::tiny_network(v, 2, 41);
    const Dataset d = oracle::random_dataset(net.spec, 200, 3);
    const WinnerCounts wc = count_winners(net, d);
    const Network pruned = prune_least_active(net, wc);
    const std::size_t mi = *net.spec.maxout_index();
    const ForwardResult before = forward(static_cast<const Network&>(net), d.images);
    const Tensor after = predict(pruned, d.images);
    const MaxoutWinners& w = *before.cache.layers[mi].winners;
    std::size_t checked = 0;
    for (std::size_t b = 0; b < d.size(); ++b) {
      bool untouched = true;
      for (std::size_t u = 0; u < w.units; ++u) {
        const std::uint32_t removed_slot = pruned.maxout->survivors[u][0] == net.maxout->survivors[u][0] ? 1 : 0;
        for (std::size_t p = 0; p < w.positions; ++p) untouched = untouched && w.at(b, u, p) != removed_slot;
      }
      if (!untouched) continue;
      ++checked;
      for (std::size_t c = 0; c < 3; ++c)
        EXPECT_EQ(std::bit_cast<std::uint32_t>(before.logits.at(b, c)),
                  std::bit_cast<std::uint32_t>(after.at(b, c)));
    }
    EXPECT_GT(checked, 0u);
  }
}

TEST(IterativePrune, StepsReduceKAndEmitRecords) {
  const Network net = oracle::tiny_network(Variant::mfc, 4, 5);
  const Dataset d = oracle::random_dataset(net.spec, 40, 5);
  PruneSchedule sched;
  sched.retrain.iterations = 3;
  sched.retrain.batch_size = 8;
  auto [same, none] = iterative_neuron_prune(net, d, d, sched, 0);
  EXPECT_TRUE(none.empty());
  EXPECT_TRUE(same.params[6].weight.bit_equal(net.params[6].weight));
  auto [pruned, records] = iterative_neuron_prune(net, d, d, sched, 3);
  EXPECT_EQ(pruned.maxout->k_current, 1u);
  ASSERT_EQ(records.size(), 3u);
  EXPECT_EQ(records[0].k, 3u);
  EXPECT_EQ(records[2].k, 1u);
  EXPECT_LT(records[0].pw_percent, records[1].pw_percent);
  EXPECT_LT(records[1].pw_percent, records[2].pw_percent);
  EXPECT_THROW(iterative_neuron_prune(net, d, d, sched, 4), ArgumentError);
}

TEST(Threshold, OrderStatisticsExample) {
  NetworkSpec s;
  s.input_height = s.input_width = 1;
  s.layers = {LayerSpec{LayerKind::dense, 1, 0, 0}, LayerSpec{LayerKind::softmax, 3, 0, 0}};
  Network net = build_network(s, 1);
  net.params[0].weight[0] = 0.1f;
  net.params[1].weight[0] = -0.2f;
  net.params[1].weight[1] = 0.3f;
  net.params[1].weight[2] = -0.4f;
  const WeightThreshold cut = threshold_for_fraction(net, 0.5);
  EXPECT_EQ(cut.tau, 0.2f);
  EXPECT_EQ(cut.count, 2u);
  const Network p = prune_weights(net, cut).first;
  EXPECT_EQ(p.params[0].mask, (std::vector<std::uint8_t>{1}));
  EXPECT_EQ(p.params[1].mask, (std::vector<std::uint8_t>{1, 0, 0}));
  EXPECT_EQ(p.params[1].weight[1], 0.3f);
}

TEST(Threshold, ZeroFractionPrunesNothing) {
  const Network net = oracle::tiny_network(Variant::mc, 2, 3);
  const WeightThreshold cut = threshold_for_fraction(net, 0.0);
  EXPECT_EQ(cut.count, 0u);
  float lo = std::numeric_limits<float>::infinity();
  for (const auto& p : net.params)
    for (float w : p.weight.data()) lo = std::min(lo, std::fabs(w));
  EXPECT_LT(cut.tau, lo);
  EXPECT_EQ(prune_weights(net, cut).second.masked, 0u);
}

TEST(Threshold, FractionOutOfRangeIsArgumentError) {
  const Network net = oracle::tiny_network(Variant::mc, 2, 3);
  EXPECT_THROW(threshold_for_fraction(net, -0.1), ArgumentError);
  EXPECT_THROW(threshold_for_fraction(net, 1.0), ArgumentError);
}

TEST(Threshold, DuplicatesMatchSortOracle) {
  Rng rng(12);
  for (int trial = 0; trial < 30; ++trial) {
    Network net = oracle::tiny_network(trial % 2 ? Variant::mc : Variant::mfc, 2, rng.next_u64());
    // Few distinct magnitudes force ties at the cut.
    for (auto& p : net.params)
      for (float& w : p.weight.data()) w = static_cast<float>(rng.below(7)) * (rng.below(2) ? 0.25f : -0.25f);
    const double f = static_cast<double>(rng.uniform01()) * 0.999;
    const auto expect = oracle::sorted_prune_masks(net, f);
    const auto [pruned, account] = prune_weights(net, threshold_for_fraction(net, f));
    std::size_t total = 0, n = 0;
    for (std::size_t l = 0; l < net.params.size(); ++l) {
      if (net.params[l].weight.empty()) continue;
      EXPECT_EQ(pruned.params[l].mask, expect[l]);
      for (auto m : expect[l]) total += m;
      n += net.params[l].weight.numel();
    }
    EXPECT_EQ(account.masked, total);
    EXPECT_EQ(total, static_cast<std::size_t>(std::floor(f * static_cast<double>(n))));
  }
}

TEST(WeightPrune, ZeroTauKeepsNonzeroWeights) {
  const Network net = oracle::tiny_network(Variant::mc, 2, 3);
  const auto [p, acc] = prune_weights(net, 0.0f);
  EXPECT_EQ(acc.masked, 0u);
  for (std::size_t l = 0; l < net.params.size(); ++l)
    EXPECT_TRUE(p.params[l].weight.bit_equal(net.params[l].weight));
  EXPECT_THROW(prune_weights(net, -1.0f), ArgumentError);
}

TEST(WeightPrune, InfiniteTauLeavesOnlyBiases) {
  const Network net = oracle::tiny_network(Variant::mfc, 2, 3);
  const auto [p, acc] = prune_weights(net, std::numeric_limits<float>::infinity());
  EXPECT_EQ(acc.masked, acc.current);
  EXPECT_DOUBLE_EQ(dead_neuron_fraction(p), 1.0);
  const Dataset a = oracle::random_dataset(net.spec, 1, 1), b = oracle::random_dataset(net.spec, 1, 2);
  EXPECT_TRUE(predict(p, a.images).bit_equal(predict(p, b.images)));
}

TEST(WeightPrune, ExistingMasksAreKept) {
  Network net = oracle::tiny_network(Variant::mfc, 2, 3);
  net.params[0].mask.assign(net.params[0].weight.numel(), 0);
  net.params[0].mask[0] = 1;
  net.apply_masks();
  const Network p = prune_weights(net, 0.0f).first;
  EXPECT_EQ(p.params[0].mask[0], 1);
}

TEST(Account, MatchesEnumerationEverywhere) {
  Rng rng(3);
  for (Variant v : {Variant::baseline, Variant::mfc, Variant::mc})
    for (std::size_t fc : {128u, 256u, 512u}) {
      Network net = build_network(NetworkSpec::reference(v, fc), rng.next_u64());
      for (int step = 0; step < (v == Variant::baseline ? 1 : 4); ++step) {
        if (step > 0) net = prune_least_active(net, synthetic_counts(net, rng.next_u64()));
        const ParamAccount a = param_account(net.spec.without_maxout(), net);
        EXPECT_EQ(account_layers(a), oracle::enumerate_weights(net));
        std::uint64_t sum = 0;
        for (auto c : oracle::enumerate_weights(net)) sum += c;
        EXPECT_EQ(a.current, sum);
        EXPECT_GE(a.pw_percent(), 0.0);
        EXPECT_LE(a.pw_percent(), 100.0);
      }
    }
}

TEST(Account, ReferenceMfcPercentages) {
  Network net = build_network(NetworkSpec::reference(Variant::mfc, 512), 1);
  const double expected[] = {0.87, 24.1, 47.4, 70.7};
  double last = -1.0;
  for (int step = 0; step < 4; ++step) {
    if (step > 0) net = prune_least_active(net, synthetic_counts(net, step));
    const double pw = param_account(net.spec.without_maxout(), net).pw_percent();
    EXPECT_NEAR(pw, expected[step], 0.1) << "step " << step;
    EXPECT_GT(pw, last);
    last = pw;
  }
}

TEST(Account, ReferenceMcPercentages) {
  Network net = build_network(NetworkSpec::reference(Variant::mc, 512), 1);
  const double target[] = {69.7, 71.1, 72.6, 74.0};
  for (int step = 0; step < 4; ++step) {
    if (step > 0) net = prune_least_active(net, synthetic_counts(net, step));
    EXPECT_NEAR(param_account(net.spec.without_maxout(), net).pw_percent(), target[step], 1.0);
  }
}

TEST(Account, CombinedCountsMaskedWeights) {
  Network net = build_network(NetworkSpec::reference(Variant::mfc, 512), 1);
  const auto [p, a] = prune_weights(net, threshold_for_fraction(net, 0.5));
  EXPECT_NEAR(a.combined_percent(),
              100.0 * (1.0 - static_cast<double>(a.current - a.masked) / static_cast<double>(a.original)),
              1e-9);
  EXPECT_GT(a.combined_percent(), a.pw_percent());
}

TEST(Account, MismatchedLineageIsStructureError) {
  const Network net = build_network(NetworkSpec::reference(Variant::mfc, 512), 1);
  EXPECT_THROW(param_account(NetworkSpec::reference(Variant::baseline, 256), net), StructureError);
  EXPECT_THROW(param_account(net.spec, net), StructureError);  // reference still has maxout
}

TEST(DeadNeurons, FreshNetHasNone) {
  EXPECT_EQ(dead_neuron_fraction(build_network(NetworkSpec::reference(Variant::mc, 256), 1)), 0.0);
}

TEST(Sweep, ZeroPointAndMaskedFractions) {
  const Network net = oracle::tiny_network(Variant::mfc, 2, 8);
  const Dataset d = oracle::random_dataset(net.spec, 60, 8);
  SweepConfig cfg;
  cfg.retrain.iterations = 4;
  cfg.retrain.batch_size = 8;
  const std::vector<double> fractions = {0.0, 0.3, 0.6, 0.9};
  const auto records = sweep_weight_pruning(net, fractions, d, d, cfg);
  ASSERT_EQ(records.size(), 4u);
  EXPECT_EQ(records[0].accuracy, evaluate(net, d));
  for (std::size_t i = 0; i < records.size(); ++i) {
    const double got = static_cast<double>(records[i].masked_weights) /
                       static_cast<double>(records[i].remaining_weights);
    EXPECT_NEAR(got, fractions[i], 1.0 / static_cast<double>(records[i].remaining_weights));
  }
  const std::vector<double> unsorted = {0.5, 0.2};
  EXPECT_THROW(sweep_weight_pruning(net, unsorted, d, d, cfg), ArgumentError);
}
