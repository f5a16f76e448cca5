#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "maxprune/tensor.hpp"

namespace maxprune {

// Labeled image set. images is [N, 1, rows, cols] scaled to [0, 1].
struct Dataset {
  Tensor images;
  std::vector<int> labels;
  std::string split;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }
  std::size_t sample_size() const { return empty() ? 0 : images.numel() / size(); }
};

// Reads an MNIST IDX image/label pair. Magic numbers, 28x28 geometry, count
// agreement and payload length are all checked; any anomaly is a
// FormatError naming the byte offset.
Dataset load_idx(const std::filesystem::path& images_path,
                 const std::filesystem::path& labels_path, std::string split = "");

// Writes the IDX pair for a dataset (pixels re-quantized to bytes).
void save_idx(const Dataset& data, const std::filesystem::path& images_path,
              const std::filesystem::path& labels_path);

// Standard MNIST file names under a directory; split is "train" or "test".
Dataset load_mnist(const std::filesystem::path& dir, const std::string& split);

// Samples [begin, begin + count) in file order.
Dataset subset(const Dataset& data, std::size_t begin, std::size_t count);

// The last `holdout` samples become the validation set.
std::pair<Dataset, Dataset> split_validation(const Dataset& data, std::size_t holdout);

// Sample indices of each batch for one epoch: a permutation seeded by
// (seed, epoch), cut into batch_size pieces with a short final batch.
std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size,
                                              std::uint64_t seed, std::uint64_t epoch);

struct Batch {
  Tensor images;
  std::vector<int> labels;
};

Batch gather(const Dataset& data, std::span<const std::size_t> indices);
// Contiguous samples [begin, end).
Batch slice(const Dataset& data, std::size_t begin, std::size_t end);

// Descriptor pairs for verification. Text format:
//   d <dimension>
//   m v1 ... vd w1 ... wd     (matched pair)
//   n v1 ... vd w1 ... wd     (non-matched pair)
struct EmbeddingPairs {
  std::size_t dimension = 0;
  std::vector<std::pair<std::vector<float>, std::vector<float>>> matched;
  std::vector<std::pair<std::vector<float>, std::vector<float>>> nonmatched;
};

EmbeddingPairs load_embeddings(const std::filesystem::path& path);
void save_embeddings(const EmbeddingPairs& pairs, const std::filesystem::path& path);

}  // namespace maxprune
