#include "maxprune/persist.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include <json.hpp>

#include "maxprune/errors.hpp"

namespace maxprune {

using nlohmann::json;

namespace {

constexpr std::size_t kPreamble = 12;  // magic + version + header length

bool is_zero_bits(float v) { return std::bit_cast<std::uint32_t>(v) == 0; }

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int s = 0; s < 32; s += 8) out.push_back(static_cast<unsigned char>(v >> s));
}

void put_f32(std::vector<unsigned char>& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

// Bounds-checked little-endian reader over the whole file; offsets in error
// messages are absolute file offsets.
class Reader {
 public:
  Reader(std::span<const unsigned char> bytes, std::string source)
      : bytes_(bytes), source_(std::move(source)) {}

  std::uint32_t u32(std::size_t offset) const {
    need(offset, 4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | bytes_[offset + static_cast<std::size_t>(i)];
    return v;
  }
  float f32(std::size_t offset) const { return std::bit_cast<float>(u32(offset)); }

  void need(std::size_t offset, std::size_t length) const {
    if (offset > bytes_.size() || length > bytes_.size() - offset)
      fail(offset, "truncated: need " + std::to_string(length) + " bytes, file has " +
                       std::to_string(bytes_.size()));
  }

  [[noreturn]] void fail(std::size_t offset, const std::string& what) const {
    throw FormatError((source_.empty() ? std::string("checkpoint") : source_) + ": " + what +
                      " at byte offset " + std::to_string(offset));
  }

  std::span<const unsigned char> bytes() const { return bytes_; }

 private:
  std::span<const unsigned char> bytes_;
  std::string source_;
};

json spec_to_json(const NetworkSpec& spec) {
  json layers = json::array();
  for (const LayerSpec& l : spec.layers)
    layers.push_back({{"kind", to_string(l.kind)}, {"units", l.units}, {"kernel", l.kernel},
                      {"group", l.group}});
  return {{"variant", to_string(spec.variant)},
          {"fc_size", spec.fc_size},
          {"input", {spec.input_channels, spec.input_height, spec.input_width}},
          {"layers", layers}};
}

NetworkSpec spec_from_json(const json& j) {
  NetworkSpec spec;
  spec.variant = variant_from_string(j.at("variant").get<std::string>());
  spec.fc_size = j.at("fc_size").get<std::size_t>();
  const auto input = j.at("input").get<std::vector<std::size_t>>();
  if (input.size() != 3) throw FormatError("checkpoint header: input must have 3 dimensions");
  spec.input_channels = input[0];
  spec.input_height = input[1];
  spec.input_width = input[2];
  for (const json& l : j.at("layers")) {
    LayerSpec ls;
    ls.kind = layer_kind_from_string(l.at("kind").get<std::string>());
    ls.units = l.at("units").get<std::size_t>();
    ls.kernel = l.at("kernel").get<std::size_t>();
    ls.group = l.at("group").get<std::size_t>();
    spec.layers.push_back(ls);
  }
  return spec;
}

void put_csr(std::vector<unsigned char>& out, const CsrMatrix& csr) {
  for (auto v : csr.row_ptr) put_u32(out, v);
  for (auto v : csr.col_idx) put_u32(out, v);
  for (auto v : csr.values) put_f32(out, v);
}

CsrMatrix read_csr(const Reader& r, std::size_t offset, std::size_t rows, std::size_t cols,
                   std::size_t nnz) {
  CsrMatrix csr;
  csr.rows = rows;
  csr.cols = cols;
  r.need(offset, csr_bytes(rows, nnz));
  std::size_t at = offset;
  for (std::size_t i = 0; i <= rows; ++i, at += 4) csr.row_ptr.push_back(r.u32(at));
  const std::size_t col_base = at;
  for (std::size_t i = 0; i < nnz; ++i, at += 4) csr.col_idx.push_back(r.u32(at));
  for (std::size_t i = 0; i < nnz; ++i, at += 4) csr.values.push_back(r.f32(at));
  // Re-check the invariants here so the error can name the offending byte.
  if (csr.row_ptr[0] != 0) r.fail(offset, "CSR row_ptr[0] is " + std::to_string(csr.row_ptr[0]));
  for (std::size_t i = 0; i < rows; ++i) {
    if (csr.row_ptr[i + 1] < csr.row_ptr[i])
      r.fail(offset + 4 * (i + 1), "CSR row_ptr decreases at row " + std::to_string(i));
    if (csr.row_ptr[i + 1] > nnz)
      r.fail(offset + 4 * (i + 1), "CSR row_ptr exceeds nnz " + std::to_string(nnz));
  }
  if (csr.row_ptr[rows] != nnz)
    r.fail(offset + 4 * rows, "CSR row_ptr ends at " + std::to_string(csr.row_ptr[rows]) +
                                  ", expected nnz " + std::to_string(nnz));
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t e = csr.row_ptr[i]; e < csr.row_ptr[i + 1]; ++e) {
      if (csr.col_idx[e] >= cols)
        r.fail(col_base + 4 * e, "CSR column " + std::to_string(csr.col_idx[e]) + " >= " +
                                     std::to_string(cols));
      if (e > csr.row_ptr[i] && csr.col_idx[e] <= csr.col_idx[e - 1])
        r.fail(col_base + 4 * e, "CSR columns not strictly increasing in row " + std::to_string(i));
    }
  return csr;
}

}  // namespace

// ---------------------------------------------------------------------------
// CSR

void CsrMatrix::validate() const {
  if (row_ptr.size() != rows + 1)
    throw FormatError("CSR row_ptr has " + std::to_string(row_ptr.size()) + " entries for " +
                      std::to_string(rows) + " rows");
  if (col_idx.size() != values.size()) throw FormatError("CSR col_idx and values differ in length");
  if (row_ptr[0] != 0) throw FormatError("CSR row_ptr[0] must be 0");
  for (std::size_t i = 0; i < rows; ++i) {
    if (row_ptr[i + 1] < row_ptr[i])
      throw FormatError("CSR row_ptr decreases at row " + std::to_string(i));
    if (row_ptr[i + 1] > values.size()) throw FormatError("CSR row_ptr exceeds nnz");
  }
  if (row_ptr[rows] != values.size()) throw FormatError("CSR row_ptr does not end at nnz");
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t e = row_ptr[i]; e < row_ptr[i + 1]; ++e) {
      if (col_idx[e] >= cols) throw FormatError("CSR column index out of range in row " + std::to_string(i));
      if (e > row_ptr[i] && col_idx[e] <= col_idx[e - 1])
        throw FormatError("CSR columns not strictly increasing in row " + std::to_string(i));
    }
}

CsrMatrix to_csr(std::span<const float> dense, std::size_t rows, std::size_t cols) {
  if (dense.size() != rows * cols)
    throw DimensionError("to_csr: " + std::to_string(dense.size()) + " values for " +
                         std::to_string(rows) + "x" + std::to_string(cols));
  CsrMatrix csr;
  csr.rows = rows;
  csr.cols = cols;
  csr.row_ptr.reserve(rows + 1);
  csr.row_ptr.push_back(0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const float v = dense[r * cols + c];
      if (is_zero_bits(v)) continue;
      csr.col_idx.push_back(static_cast<std::uint32_t>(c));
      csr.values.push_back(v);
    }
    csr.row_ptr.push_back(static_cast<std::uint32_t>(csr.values.size()));
  }
  return csr;
}

std::vector<float> from_csr(const CsrMatrix& csr) {
  csr.validate();
  std::vector<float> dense(csr.rows * csr.cols, 0.0f);
  for (std::size_t r = 0; r < csr.rows; ++r)
    for (std::size_t e = csr.row_ptr[r]; e < csr.row_ptr[r + 1]; ++e)
      dense[r * csr.cols + csr.col_idx[e]] = csr.values[e];
  return dense;
}

std::size_t csr_bytes(std::size_t rows, std::size_t nnz) { return 4 * (rows + 1) + 8 * nnz; }

// ---------------------------------------------------------------------------
// Checkpoints

std::vector<unsigned char> encode_checkpoint(const Network& net, bool sparse) {
  net.validate();
  json header;
  header["spec"] = spec_to_json(net.spec);
  header["structure_version"] = net.structure_version;
  if (net.maxout) {
    const MaxoutState& m = *net.maxout;
    header["maxout"] = {{"k_original", m.k_original}, {"k_current", m.k_current},
                        {"unit_count", m.unit_count}, {"survivors", m.survivors},
                        {"win_counts", m.win_counts}};
  } else {
    header["maxout"] = nullptr;
  }

  std::vector<unsigned char> payload;
  json tensors = json::array();
  auto add_dense = [&](std::size_t layer, const char* name, const Tensor& t) {
    tensors.push_back({{"layer", layer}, {"name", name}, {"shape", t.shape().dims()},
                       {"storage", "dense"}, {"offset", payload.size()}, {"bytes", 4 * t.numel()}});
    for (float v : t.data()) put_f32(payload, v);
  };
  for (std::size_t i = 0; i < net.params.size(); ++i) {
    const LayerParams& p = net.params[i];
    if (p.weight.empty()) continue;
    const Tensor& w = p.weight;
    std::size_t zeros = 0;
    for (float v : w.data()) zeros += is_zero_bits(v) ? 1 : 0;
    if (sparse && w.shape().rank() >= 2 && 2 * zeros >= w.numel()) {
      const std::size_t rows = w.shape()[0];
      const CsrMatrix csr = to_csr(w.data(), rows, w.numel() / rows);
      tensors.push_back({{"layer", i}, {"name", "weight"}, {"shape", w.shape().dims()},
                         {"storage", "csr"}, {"offset", payload.size()},
                         {"bytes", csr_bytes(csr.rows, csr.nnz())}, {"rows", csr.rows},
                         {"cols", csr.cols}, {"nnz", csr.nnz()}});
      put_csr(payload, csr);
    } else {
      add_dense(i, "weight", w);
    }
    add_dense(i, "bias", p.bias);
  }
  header["tensors"] = tensors;

  // A mask is implied by the zero entries of its weights; list the entries
  // where that guess is wrong.
  json masks = json::array();
  for (std::size_t i = 0; i < net.params.size(); ++i) {
    const LayerParams& p = net.params[i];
    if (!p.has_mask()) continue;
    std::vector<std::size_t> unmasked_zeros, masked_nonzeros;
    for (std::size_t e = 0; e < p.mask.size(); ++e) {
      const bool zero = is_zero_bits(p.weight[e]);
      if (zero && !p.mask[e]) unmasked_zeros.push_back(e);
      if (!zero && p.mask[e]) masked_nonzeros.push_back(e);
    }
    masks.push_back({{"layer", i}, {"unmasked_zeros", unmasked_zeros},
                     {"masked_nonzeros", masked_nonzeros}});
  }
  header["masks"] = masks;
  header["payload_bytes"] = payload.size();

  const std::string text = header.dump();
  std::vector<unsigned char> out(kCheckpointMagic, kCheckpointMagic + 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

Network decode_checkpoint(std::span<const unsigned char> bytes, const std::string& source) {
  const Reader r(bytes, source);
  r.need(0, 4);
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) r.fail(0, "bad magic (expected MXPN)");
  const std::uint32_t version = r.u32(4);
  if (version != kCheckpointVersion)
    r.fail(4, "unsupported version " + std::to_string(version));
  const std::size_t header_len = r.u32(8);
  r.need(kPreamble, header_len);
  const std::size_t payload_base = kPreamble + header_len;

  json header;
  try {
    header = json::parse(bytes.begin() + kPreamble, bytes.begin() + static_cast<std::ptrdiff_t>(payload_base));
  } catch (const json::exception& e) {
    r.fail(kPreamble, std::string("header is not valid JSON (") + e.what() + ")");
  }

  Network net;
  try {
    net.spec = spec_from_json(header.at("spec"));
    net.spec.validate();
    net.structure_version = header.at("structure_version").get<std::uint64_t>();
    net.params.resize(net.spec.layers.size());
    const json& m = header.at("maxout");
    if (!m.is_null()) {
      MaxoutState st;
      st.k_original = m.at("k_original").get<std::size_t>();
      st.k_current = m.at("k_current").get<std::size_t>();
      st.unit_count = m.at("unit_count").get<std::size_t>();
      st.survivors = m.at("survivors").get<std::vector<std::vector<std::uint32_t>>>();
      st.win_counts = m.at("win_counts").get<std::vector<std::vector<std::uint64_t>>>();
      net.maxout = std::move(st);
    }
    const std::size_t payload_bytes = header.at("payload_bytes").get<std::size_t>();
    r.need(payload_base, payload_bytes);
    if (bytes.size() != payload_base + payload_bytes)
      r.fail(payload_base + payload_bytes, "trailing bytes after payload");

    std::size_t expected_offset = 0;
    for (const json& t : header.at("tensors")) {
      const std::size_t layer = t.at("layer").get<std::size_t>();
      const std::string name = t.at("name").get<std::string>();
      const std::string storage = t.at("storage").get<std::string>();
      const std::size_t offset = t.at("offset").get<std::size_t>();
      const std::size_t length = t.at("bytes").get<std::size_t>();
      const Shape shape(t.at("shape").get<std::vector<std::size_t>>());
      if (layer >= net.params.size() || !net.spec.layers[layer].has_weights())
        r.fail(kPreamble, "tensor for layer " + std::to_string(layer) + " which has no parameters");
      if (offset != expected_offset)
        r.fail(payload_base + offset, "tensor blob out of order (expected payload offset " +
                                          std::to_string(expected_offset) + ")");
      if (offset + length > payload_bytes)
        r.fail(payload_base + offset, "tensor blob extends past the payload");
      expected_offset = offset + length;
      const std::size_t at = payload_base + offset;
      Tensor value(shape);
      if (storage == "dense") {
        if (length != 4 * shape.numel()) r.fail(at, "dense blob length disagrees with its shape");
        for (std::size_t e = 0; e < shape.numel(); ++e) value[e] = r.f32(at + 4 * e);
      } else if (storage == "csr") {
        const std::size_t rows = t.at("rows").get<std::size_t>();
        const std::size_t cols = t.at("cols").get<std::size_t>();
        const std::size_t nnz = t.at("nnz").get<std::size_t>();
        if (rows * cols != shape.numel() || length != csr_bytes(rows, nnz))
          r.fail(at, "CSR blob geometry disagrees with its shape");
        const auto dense = from_csr(read_csr(r, at, rows, cols, nnz));
        std::copy(dense.begin(), dense.end(), value.raw());
      } else {
        r.fail(kPreamble, "unknown storage kind '" + storage + "'");
      }
      if (name == "weight") {
        net.params[layer].weight = std::move(value);
      } else if (name == "bias") {
        net.params[layer].bias = std::move(value);
      } else {
        r.fail(kPreamble, "unknown tensor name '" + name + "'");
      }
    }
    if (expected_offset != payload_bytes) r.fail(payload_base + expected_offset, "unused payload bytes");

    for (const json& mj : header.at("masks")) {
      const std::size_t layer = mj.at("layer").get<std::size_t>();
      if (layer >= net.params.size() || net.params[layer].weight.empty())
        r.fail(kPreamble, "mask for layer " + std::to_string(layer) + " without weights");
      LayerParams& p = net.params[layer];
      p.mask.resize(p.weight.numel());
      for (std::size_t e = 0; e < p.mask.size(); ++e) p.mask[e] = is_zero_bits(p.weight[e]) ? 1 : 0;
      for (const auto& key : {"unmasked_zeros", "masked_nonzeros"})
        for (std::size_t e : mj.at(key).get<std::vector<std::size_t>>()) {
          if (e >= p.mask.size()) r.fail(kPreamble, "mask exception index out of range");
          p.mask[e] ^= 1;
        }
    }
    net.validate();
  } catch (const json::exception& e) {
    r.fail(kPreamble, std::string("malformed header (") + e.what() + ")");
  } catch (const FormatError&) {
    throw;
  } catch (const Error& e) {
    r.fail(kPreamble, std::string("header describes an invalid network (") + e.what() + ")");
  }
  return net;
}

void save_checkpoint(const Network& net, const std::filesystem::path& path, bool sparse) {
  const auto bytes = encode_checkpoint(net, sparse);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

Network load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(in),
                                         std::istreambuf_iterator<char>()};
  return decode_checkpoint(bytes, path.string());
}

// ---------------------------------------------------------------------------
// Reports

namespace {

std::string g6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace

std::string format_report(const std::vector<ExperimentRecord>& records) {
  std::string out = std::string(kReportHeader) + "\n";
  for (const ExperimentRecord& r : records) {
    if (r.stage.find_first_of(",\r\n") != std::string::npos)
      throw ArgumentError("report stage label '" + r.stage + "' contains a comma or line break");
    out += r.stage + "," + std::to_string(r.k) + "," + std::to_string(r.iteration) + "," +
           g6(r.accuracy) + "," + std::to_string(r.orig_weights) + "," +
           std::to_string(r.remaining_weights) + "," + std::to_string(r.masked_weights) + "," +
           g6(r.pw_percent) + "," + g6(r.combined_percent) + "," + g6(r.dead_fraction) + "," +
           g6(r.seconds) + "\n";
  }
  return out;
}

void write_report(const std::vector<ExperimentRecord>& records, const std::filesystem::path& path) {
  const std::string text = format_report(records);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

std::vector<ExperimentRecord> read_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kReportHeader)
    throw FormatError(path.string() + ":1: unexpected report header");
  std::vector<ExperimentRecord> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    const std::string where = path.string() + ":" + std::to_string(line_no);
    if (f.size() != 11) throw FormatError(where + ": expected 11 fields, found " + std::to_string(f.size()));
    try {
      ExperimentRecord r;
      r.stage = f[0];
      r.k = std::stoull(f[1]);
      r.iteration = std::stoull(f[2]);
      r.accuracy = std::stod(f[3]);
      r.orig_weights = std::stoull(f[4]);
      r.remaining_weights = std::stoull(f[5]);
      r.masked_weights = std::stoull(f[6]);
      r.pw_percent = std::stod(f[7]);
      r.combined_percent = std::stod(f[8]);
      r.dead_fraction = std::stod(f[9]);
      r.seconds = std::stod(f[10]);
      out.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw FormatError(where + ": malformed number");
    }
  }
  return out;
}

}  // namespace maxprune
