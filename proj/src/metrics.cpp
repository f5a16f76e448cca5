#include "maxprune/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>

#include "maxprune/errors.hpp"

namespace maxprune {

double bray_curtis(std::span<const float> u, std::span<const float> v) {
  if (u.size() != v.size())
    throw ArgumentError("bray_curtis: lengths " + std::to_string(u.size()) + " and " +
                        std::to_string(v.size()) + " differ");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    if (u[i] < 0.0f || v[i] < 0.0f)
      throw ArgumentError("bray_curtis: negative component at index " + std::to_string(i));
    num += std::fabs(static_cast<double>(u[i]) - static_cast<double>(v[i]));
    den += static_cast<double>(u[i]) + static_cast<double>(v[i]);
  }
  if (den == 0.0) throw ArgumentError("bray_curtis: both vectors are zero");
  return num / den;
}

void VerificationScores::validate() const {
  if (matched.empty()) throw ArgumentError("verification scores: no matched distances");
  if (nonmatched.empty()) throw ArgumentError("verification scores: no non-matched distances");
  for (const auto* list : {&matched, &nonmatched})
    for (double d : *list)
      if (!std::isfinite(d) || d < 0.0)
        throw ArgumentError("verification scores: distance " + std::to_string(d) +
                            " is not finite and >= 0");
}

namespace {

// Sorted copies allow O(log n) rate queries.
struct SortedScores {
  std::vector<double> matched, nonmatched;

  explicit SortedScores(const VerificationScores& s) : matched(s.matched), nonmatched(s.nonmatched) {
    std::sort(matched.begin(), matched.end());
    std::sort(nonmatched.begin(), nonmatched.end());
  }

  RatePair at(double tau) const {
    auto below = [tau](const std::vector<double>& v) {
      return static_cast<std::size_t>(std::lower_bound(v.begin(), v.end(), tau) - v.begin());
    };
    // Count rejections directly: 1 - accepted / n can differ from
    // rejected / n in the last bit and hide an exact crossing.
    return {static_cast<double>(below(nonmatched)) / static_cast<double>(nonmatched.size()),
            static_cast<double>(matched.size() - below(matched)) / static_cast<double>(matched.size())};
  }
};

}  // namespace

RatePair far_frr(const VerificationScores& scores, double tau) {
  scores.validate();
  std::size_t false_accepts = 0, false_rejects = 0;
  for (double d : scores.nonmatched) false_accepts += d < tau ? 1 : 0;
  for (double d : scores.matched) false_rejects += d < tau ? 0 : 1;
  return {static_cast<double>(false_accepts) / static_cast<double>(scores.nonmatched.size()),
          static_cast<double>(false_rejects) / static_cast<double>(scores.matched.size())};
}

std::vector<double> eer_candidates(const VerificationScores& scores) {
  scores.validate();
  std::vector<double> d(scores.matched);
  d.insert(d.end(), scores.nonmatched.begin(), scores.nonmatched.end());
  std::sort(d.begin(), d.end());
  d.erase(std::unique(d.begin(), d.end()), d.end());
  std::vector<double> out;
  out.reserve(2 * d.size() + 1);
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (i > 0) out.push_back(d[i - 1] + (d[i] - d[i - 1]) / 2.0);
    out.push_back(d[i]);
  }
  out.push_back(d.back() + std::max(1.0, d.back()));
  return out;
}

EerResult eer(const VerificationScores& scores) {
  const std::vector<double> cand = eer_candidates(scores);
  const SortedScores sorted(scores);
  // FAR - FRR rises from -1 at the smallest candidate to +1 above the
  // largest distance, so a sign change always exists.
  RatePair prev = sorted.at(cand.front());
  if (prev.far == prev.frr) return {prev.far, cand.front()};
  for (std::size_t i = 1; i < cand.size(); ++i) {
    const RatePair cur = sorted.at(cand[i]);
    const double d1 = cur.far - cur.frr;
    if (d1 == 0.0) return {cur.far, cand[i]};
    if (d1 > 0.0) {
      const double d0 = prev.far - prev.frr;
      const double t = -d0 / (d1 - d0);
      return {prev.far + t * (cur.far - prev.far), cand[i - 1] + t * (cand[i] - cand[i - 1])};
    }
    prev = cur;
  }
  throw StructureError("eer: no FAR/FRR crossing found");  // unreachable for valid scores
}

double randomization_test(std::span<const std::uint8_t> errors_a,
                          std::span<const std::uint8_t> errors_b, std::size_t permutations,
                          Rng& rng) {
  if (errors_a.size() != errors_b.size())
    throw ArgumentError("randomization_test: " + std::to_string(errors_a.size()) + " vs " +
                        std::to_string(errors_b.size()) + " samples");
  if (errors_a.empty()) throw ArgumentError("randomization_test: no samples");
  if (permutations == 0) throw ArgumentError("randomization_test: permutations must be >= 1");

  // Only discordant samples change the statistic under a swap; work with the
  // integer difference of error counts.
  std::vector<int> delta;
  long long observed = 0;
  for (std::size_t i = 0; i < errors_a.size(); ++i) {
    const int d = (errors_a[i] != 0) - (errors_b[i] != 0);
    if (d != 0) {
      delta.push_back(d);
      observed += d;
    }
  }
  const long long target = std::llabs(observed);
  std::size_t extreme = 0;
  for (std::size_t p = 0; p < permutations; ++p) {
    long long stat = 0;
    std::uint64_t bits = 0;
    for (std::size_t i = 0; i < delta.size(); ++i) {
      if (i % 64 == 0) bits = rng.next_u64();
      stat += (bits >> (i % 64)) & 1 ? -delta[i] : delta[i];
    }
    if (std::llabs(stat) >= target) ++extreme;
  }
  return static_cast<double>(extreme + 1) / static_cast<double>(permutations + 1);
}

}  // namespace maxprune
