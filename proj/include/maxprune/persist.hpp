#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "maxprune/network.hpp"
#include "maxprune/record.hpp"

namespace maxprune {

// Checkpoint file layout (all integers little-endian):
//   "MXPN"  u32 version  u32 header_bytes  header (UTF-8 JSON)  payload
// The header lists every tensor blob with its storage kind, shape, payload
// offset and byte length. Dense blobs are raw f32; CSR blobs are
// u32 row_ptr[rows + 1], u32 col_idx[nnz], f32 values[nnz].
inline constexpr char kCheckpointMagic[4] = {'M', 'X', 'P', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Compressed sparse rows. An entry is stored when its bit pattern is
// nonzero, so -0.0 survives a round trip.
struct CsrMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint32_t> row_ptr;
  std::vector<std::uint32_t> col_idx;
  std::vector<float> values;

  std::size_t nnz() const { return values.size(); }
  // Throws FormatError unless row_ptr starts at 0, is non-decreasing and ends
  // at nnz and column indices rise strictly within each row and stay < cols.
  void validate() const;
  friend bool operator==(const CsrMatrix&, const CsrMatrix&) = default;
};

CsrMatrix to_csr(std::span<const float> dense, std::size_t rows, std::size_t cols);
std::vector<float> from_csr(const CsrMatrix& csr);

// Serialized size of a CSR blob.
std::size_t csr_bytes(std::size_t rows, std::size_t nnz);

// sparse = store weight tensors with at least half zero entries as CSR
// (conv filters flattened to filters x rest). Biases are always dense.
void save_checkpoint(const Network& net, const std::filesystem::path& path, bool sparse = false);
Network load_checkpoint(const std::filesystem::path& path);

// In-memory forms of the same encoding.
std::vector<unsigned char> encode_checkpoint(const Network& net, bool sparse = false);
Network decode_checkpoint(std::span<const unsigned char> bytes, const std::string& source = "");

// Report CSV with the fixed column order below; floats use 6 significant
// digits. Stage labels may not contain commas or line breaks.
inline constexpr const char* kReportHeader =
    "stage,k,iteration,accuracy,orig_weights,remaining_weights,masked_weights,pw_percent,"
    "combined_percent,dead_fraction,seconds";

std::string format_report(const std::vector<ExperimentRecord>& records);
void write_report(const std::vector<ExperimentRecord>& records, const std::filesystem::path& path);
std::vector<ExperimentRecord> read_report(const std::filesystem::path& path);

}  // namespace maxprune
