#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "maxprune/network.hpp"
#include "maxprune/trainer.hpp"

namespace maxprune {

// Fully resolved settings of one command-line run. Precedence: built-in
// defaults, then the JSON config file (flat keys named like the fields),
// then command-line flags.
struct RunConfig {
  TrainConfig train;
  Variant variant = Variant::mfc;
  std::size_t fc_size = 512;
  std::size_t k = 4;
  std::size_t conv1 = 20;
  std::size_t conv2 = 0;  // 0 = 50, or 64 for the MC variant
  std::string data_dir;   // falls back to $MAXPRUNE_DATA
  std::string output_dir = "out";
  std::size_t validation = 5000;  // trailing training samples held out
  std::size_t train_limit = 0;    // 0 = every sample
  std::size_t test_limit = 0;
  std::size_t prune_steps = 3;
  std::vector<double> fractions{0.0, 0.5, 0.7, 0.8, 0.9, 0.95, 0.98};
  std::size_t retrain_iterations = 4000;
  float retrain_lr = 0.001f;
  bool retrain = true;
  std::size_t threads = 1;
  bool sparse = true;
  bool record_time = false;  // otherwise report seconds are written as 0

  NetworkSpec spec() const;
  TrainConfig retrain_config() const;
  // Throws ArgumentError on any out-of-range value.
  void validate() const;
};

// JSON text with every RunConfig field.
std::string to_json_text(const RunConfig& cfg);
// Applies the keys of a flat JSON object onto `cfg`; unknown keys are an
// ArgumentError.
void apply_json_text(RunConfig& cfg, const std::string& text);

// Runs one command line. Returns 0 on success, 2 on usage errors (bad
// flags, invalid configuration, missing inputs) and 1 on runtime failures;
// errors are reported as a single "maxprune: error: <category>: <message>"
// line on `err`.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int dispatch(int argc, const char* const* argv);

}  // namespace maxprune
