#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "maxprune/tensor.hpp"

namespace maxprune {

// Bray-Curtis dissimilarity sum|u - v| / sum(u + v) of non-negative vectors.
double bray_curtis(std::span<const float> u, std::span<const float> v);

// Distances of matched (same identity) and non-matched pairs. A pair is
// accepted as matched when its distance is below the threshold.
struct VerificationScores {
  std::vector<double> matched;
  std::vector<double> nonmatched;

  // Throws ArgumentError unless both lists are non-empty, finite and >= 0.
  void validate() const;
};

struct RatePair {
  double far = 0.0;
  double frr = 0.0;
};

RatePair far_frr(const VerificationScores& scores, double tau);

struct EerResult {
  double eer = 0.0;
  double threshold = 0.0;
};

// Candidate thresholds are the distinct observed distances, the midpoints
// between neighbours and one value above the largest distance. Returns the
// first candidate where FAR == FRR, else the linear interpolation between
// the two candidates where FAR - FRR changes sign.
EerResult eer(const VerificationScores& scores);

// Candidate thresholds used by eer(), ascending.
std::vector<double> eer_candidates(const VerificationScores& scores);

// Paired randomization test on per-sample error indicators (nonzero =
// error). Each permutation swaps a_i and b_i independently with
// probability 1/2; p = (count(|stat| >= observed) + 1) / (permutations + 1).
double randomization_test(std::span<const std::uint8_t> errors_a,
                          std::span<const std::uint8_t> errors_b, std::size_t permutations,
                          Rng& rng);

}  // namespace maxprune
