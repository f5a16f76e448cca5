#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

namespace maxprune {

// One row of an experiment report.
struct ExperimentRecord {
  std::string stage;
  std::size_t k = 0;
  std::size_t iteration = 0;
  double accuracy = 0.0;
  std::uint64_t orig_weights = 0;
  std::uint64_t remaining_weights = 0;
  std::uint64_t masked_weights = 0;
  double pw_percent = 0.0;
  double combined_percent = 0.0;
  double dead_fraction = 0.0;
  double seconds = 0.0;
};

}  // namespace maxprune
