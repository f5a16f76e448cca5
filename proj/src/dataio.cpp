#include "maxprune/dataio.hpp"

#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <sstream>

#include "maxprune/errors.hpp"

namespace maxprune {

namespace {

constexpr std::uint32_t kImagesMagic = 0x00000803;
constexpr std::uint32_t kLabelsMagic = 0x00000801;
constexpr std::size_t kSide = 28;

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t offset,
                        const std::filesystem::path& path) {
  if (offset + 4 > buf.size())
    throw FormatError(path.string() + ": truncated header at byte offset " + std::to_string(offset));
  return (std::uint32_t{buf[offset]} << 24) | (std::uint32_t{buf[offset + 1]} << 16) |
         (std::uint32_t{buf[offset + 2]} << 8) | std::uint32_t{buf[offset + 3]};
}

void put_be32(std::ostream& os, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                         static_cast<char>(v >> 8), static_cast<char>(v)};
  os.write(bytes, 4);
}

std::string hex32(std::uint32_t v) {
  std::ostringstream os;
  os << "0x" << std::hex;
  os.width(8);
  os.fill('0');
  os << v;
  return os.str();
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images_path,
                 const std::filesystem::path& labels_path, std::string split) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);

  const std::uint32_t img_magic = read_be32(img, 0, images_path);
  if (img_magic != kImagesMagic)
    throw FormatError(images_path.string() + ": bad magic " + hex32(img_magic) +
                      " at byte offset 0 (expected " + hex32(kImagesMagic) + ")");
  const std::uint32_t lab_magic = read_be32(lab, 0, labels_path);
  if (lab_magic != kLabelsMagic)
    throw FormatError(labels_path.string() + ": bad magic " + hex32(lab_magic) +
                      " at byte offset 0 (expected " + hex32(kLabelsMagic) + ")");

  const std::uint32_t count = read_be32(img, 4, images_path);
  const std::uint32_t rows = read_be32(img, 8, images_path);
  const std::uint32_t cols = read_be32(img, 12, images_path);
  if (rows != kSide || cols != kSide)
    throw FormatError(images_path.string() + ": image geometry " + std::to_string(rows) + "x" +
                      std::to_string(cols) + " at byte offset 8 (expected 28x28)");
  const std::uint32_t label_count = read_be32(lab, 4, labels_path);
  if (label_count != count)
    throw FormatError(labels_path.string() + ": label count " + std::to_string(label_count) +
                      " at byte offset 4 disagrees with " + std::to_string(count) + " images");
  if (count == 0) throw FormatError(images_path.string() + ": zero images at byte offset 4");

  const std::size_t pixels = std::size_t{count} * rows * cols;
  if (img.size() != 16 + pixels)
    throw FormatError(images_path.string() + ": payload is " + std::to_string(img.size() - 16) +
                      " bytes from byte offset 16, expected " + std::to_string(pixels));
  if (lab.size() != 8 + std::size_t{count})
    throw FormatError(labels_path.string() + ": payload is " + std::to_string(lab.size() - 8) +
                      " bytes from byte offset 8, expected " + std::to_string(count));

  Dataset d;
  d.split = std::move(split);
  d.images = Tensor(Shape{count, 1, rows, cols});
  for (std::size_t i = 0; i < pixels; ++i) d.images[i] = static_cast<float>(img[16 + i]) / 255.0f;
  d.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const int label = lab[8 + i];
    if (label > 9)
      throw FormatError(labels_path.string() + ": label " + std::to_string(label) +
                        " at byte offset " + std::to_string(8 + i));
    d.labels[i] = label;
  }
  return d;
}

void save_idx(const Dataset& data, const std::filesystem::path& images_path,
              const std::filesystem::path& labels_path) {
  std::ofstream img(images_path, std::ios::binary);
  std::ofstream lab(labels_path, std::ios::binary);
  if (!img) throw IoError("cannot write " + images_path.string());
  if (!lab) throw IoError("cannot write " + labels_path.string());
  const auto n = static_cast<std::uint32_t>(data.size());
  put_be32(img, kImagesMagic);
  put_be32(img, n);
  put_be32(img, kSide);
  put_be32(img, kSide);
  for (float v : data.images.data())
    img.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f))));
  put_be32(lab, kLabelsMagic);
  put_be32(lab, n);
  for (int l : data.labels) lab.put(static_cast<char>(l));
  if (!img || !lab) throw IoError("write failed for " + images_path.string());
}

Dataset load_mnist(const std::filesystem::path& dir, const std::string& split) {
  const std::string prefix = split == "train" ? "train" : split == "test" ? "t10k" : "";
  if (prefix.empty()) throw ArgumentError("unknown MNIST split '" + split + "'");
  return load_idx(dir / (prefix + "-images-idx3-ubyte"), dir / (prefix + "-labels-idx1-ubyte"),
                  split);
}

Dataset subset(const Dataset& data, std::size_t begin, std::size_t count) {
  if (count == 0 || begin + count > data.size())
    throw ArgumentError("subset [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                        ") outside dataset of " + std::to_string(data.size()));
  Dataset d;
  d.split = data.split;
  std::vector<std::size_t> dims = data.images.shape().dims();
  dims[0] = count;
  const std::size_t per = data.sample_size();
  d.images = Tensor(Shape(dims), std::vector<float>(data.images.data().begin() + begin * per,
                                                     data.images.data().begin() + (begin + count) * per));
  d.labels.assign(data.labels.begin() + begin, data.labels.begin() + begin + count);
  return d;
}

std::pair<Dataset, Dataset> split_validation(const Dataset& data, std::size_t holdout) {
  if (holdout == 0 || holdout >= data.size())
    throw ArgumentError("validation holdout " + std::to_string(holdout) + " must lie in (0, " +
                        std::to_string(data.size()) + ")");
  Dataset train = subset(data, 0, data.size() - holdout);
  Dataset val = subset(data, data.size() - holdout, holdout);
  train.split = data.split + "/train";
  val.split = data.split + "/val";
  return {std::move(train), std::move(val)};
}

std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size,
                                              std::uint64_t seed, std::uint64_t epoch) {
  if (batch_size == 0) throw ArgumentError("batch_size must be >= 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = Rng::derive(seed, epoch);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = rng.below(i);
    std::swap(order[i - 1], order[j]);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

Batch gather(const Dataset& data, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ArgumentError("gather needs at least one index");
  std::vector<std::size_t> dims = data.images.shape().dims();
  dims[0] = indices.size();
  const std::size_t per = data.sample_size();
  Batch b;
  b.images = Tensor(Shape(dims));
  b.labels.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::size_t src = indices[i];
    if (src >= data.size()) throw ArgumentError("sample index " + std::to_string(src) + " out of range");
    std::copy_n(data.images.raw() + src * per, per, b.images.raw() + i * per);
    b.labels.push_back(data.labels[src]);
  }
  return b;
}

Batch slice(const Dataset& data, std::size_t begin, std::size_t end) {
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  return gather(data, idx);
}

// ---------------------------------------------------------------------------
// Embeddings

EmbeddingPairs load_embeddings(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  EmbeddingPairs pairs;
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag)) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    if (!have_header) {
      long long d = 0;
      if (tag != "d" || !(ls >> d) || d <= 0)
        throw FormatError(where + ": expected header 'd <dimension>'");
      pairs.dimension = static_cast<std::size_t>(d);
      have_header = true;
      continue;
    }
    if (tag != "m" && tag != "n") throw FormatError(where + ": unknown record tag '" + tag + "'");
    std::vector<float> values;
    std::string tok;
    while (ls >> tok) {
      char* end = nullptr;
      const float v = std::strtof(tok.c_str(), &end);
      if (end == tok.c_str() || *end != '\0') throw FormatError(where + ": bad number '" + tok + "'");
      if (!std::isfinite(v)) throw FormatError(where + ": non-finite component '" + tok + "'");
      values.push_back(v);
    }
    if (values.size() != 2 * pairs.dimension)
      throw FormatError(where + ": expected " + std::to_string(2 * pairs.dimension) +
                        " components, found " + std::to_string(values.size()));
    const auto mid = values.begin() + static_cast<std::ptrdiff_t>(pairs.dimension);
    auto& dst = tag == "m" ? pairs.matched : pairs.nonmatched;
    dst.emplace_back(std::vector<float>(values.begin(), mid), std::vector<float>(mid, values.end()));
  }
  if (!have_header) throw FormatError(path.string() + ": missing 'd <dimension>' header");
  if (pairs.matched.empty()) throw FormatError(path.string() + ": no matched pairs");
  if (pairs.nonmatched.empty()) throw FormatError(path.string() + ": no non-matched pairs");
  return pairs;
}

void save_embeddings(const EmbeddingPairs& pairs, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out.precision(9);
  out << "d " << pairs.dimension << '\n';
  auto emit = [&](char tag, const auto& list) {
    for (const auto& [u, v] : list) {
      out << tag;
      for (float x : u) out << ' ' << x;
      for (float x : v) out << ' ' << x;
      out << '\n';
    }
  };
  emit('m', pairs.matched);
  emit('n', pairs.nonmatched);
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace maxprune
