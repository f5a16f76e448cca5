#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>

#include "maxprune/dataio.hpp"
#include "maxprune/errors.hpp"

using namespace maxprune;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("maxprune_dataio_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

Dataset small_dataset(std::size_t n) {
  Dataset d;
  d.images = Tensor(Shape{n, 1, 28, 28});
  for (std::size_t i = 0; i < d.images.numel(); ++i) d.images[i] = static_cast<float>(i % 256) / 255.0f;
  for (std::size_t i = 0; i < n; ++i) d.labels.push_back(static_cast<int>(i % 10));
  return d;
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void dump(const fs::path& p, const std::vector<char>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::string error_of(const fs::path& img, const fs::path& lab) {
  try {
    load_idx(img, lab);
  } catch (const FormatError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Idx, RoundTripIsExact) {
  const fs::path dir = scratch("roundtrip");
  const Dataset d = small_dataset(7);
  save_idx(d, dir / "i", dir / "l");
  const Dataset back = load_idx(dir / "i", dir / "l");
  EXPECT_TRUE(back.images.bit_equal(d.images));
  EXPECT_EQ(back.labels, d.labels);
}

TEST(Idx, SwappedMagicIsFormatError) {
  const fs::path dir = scratch("magic");
  save_idx(small_dataset(3), dir / "i", dir / "l");
  const std::string msg = error_of(dir / "l", dir / "i");
  EXPECT_NE(msg.find("magic"), std::string::npos) << msg;
  EXPECT_NE(msg.find("offset 0"), std::string::npos) << msg;
}

TEST(Idx, TruncatedPayloadIsFormatError) {
  const fs::path dir = scratch("truncated");
  save_idx(small_dataset(3), dir / "i", dir / "l");
  auto bytes = slurp(dir / "i");
  bytes.resize(bytes.size() - 10);
  dump(dir / "i", bytes);
  EXPECT_NE(error_of(dir / "i", dir / "l").find("offset 16"), std::string::npos);
}

TEST(Idx, CountMismatchAndBadLabelsAreFormatErrors) {
  const fs::path dir = scratch("count");
  save_idx(small_dataset(3), dir / "i", dir / "l");
  save_idx(small_dataset(4), dir / "i4", dir / "l4");
  EXPECT_NE(error_of(dir / "i", dir / "l4").find("count"), std::string::npos);
  auto lab = slurp(dir / "l");
  lab[9] = 12;
  dump(dir / "l", lab);
  EXPECT_NE(error_of(dir / "i", dir / "l").find("offset 9"), std::string::npos);
}

TEST(Idx, MissingFileIsIoError) {
  EXPECT_THROW(load_idx("/nonexistent/a", "/nonexistent/b"), IoError);
}

TEST(Idx, OfficialMnistIfAvailable) {
  const char* root = std::getenv("MAXPRUNE_DATA");
  if (!root || !fs::exists(fs::path(root) / "train-labels-idx1-ubyte")) GTEST_SKIP() << "MAXPRUNE_DATA not set";
  const Dataset train = load_mnist(root, "train");
  EXPECT_EQ(train.size(), 60000u);
  EXPECT_EQ(train.labels[0], 5);
  // Independent reader: label bytes straight from the file.
  const auto raw = slurp(fs::path(root) / "train-labels-idx1-ubyte");
  for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(train.labels[i], raw[8 + i]);
  std::set<int> classes(train.labels.begin(), train.labels.end());
  EXPECT_EQ(classes.size(), 10u);
  for (float v : train.images.data()) {
    ASSERT_GE(v, 0.0f);
    ASSERT_LE(v, 1.0f);
  }
}

TEST(Split, LastSamplesBecomeValidation) {
  const Dataset d = small_dataset(20);
  const auto [train, val] = split_validation(d, 5);
  EXPECT_EQ(train.size(), 15u);
  EXPECT_EQ(val.size(), 5u);
  EXPECT_EQ(val.labels.front(), d.labels[15]);
  std::vector<int> joined = train.labels;
  joined.insert(joined.end(), val.labels.begin(), val.labels.end());
  EXPECT_EQ(joined, d.labels);
  EXPECT_THROW(split_validation(d, 20), ArgumentError);
  EXPECT_THROW(split_validation(d, 0), ArgumentError);
}

TEST(Batches, SizesAndCoverage) {
  const auto b = batches(10, 3, 1, 0);
  ASSERT_EQ(b.size(), 4u);
  EXPECT_EQ(b[0].size(), 3u);
  EXPECT_EQ(b[3].size(), 1u);
  std::multiset<std::size_t> seen;
  for (const auto& batch : b) seen.insert(batch.begin(), batch.end());
  EXPECT_EQ(seen.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(seen.count(i), 1u);
}

TEST(Batches, SeededAndEpochDependent) {
  EXPECT_EQ(batches(10000, 64, 7, 3), batches(10000, 64, 7, 3));
  EXPECT_NE(batches(10000, 64, 7, 3), batches(10000, 64, 7, 4));
  EXPECT_THROW(batches(10, 0, 1, 0), ArgumentError);
}

TEST(Embeddings, ParseCountsAndRoundTrip) {
  const fs::path dir = scratch("emb");
  {
    std::ofstream f(dir / "e.txt");
    f << "d 4\n"
      << "m 1 2 3 4 1 2 3 5\nm 0 0 1 1 0 1 1 0\n"
      << "n 1 0 0 0 0 0 0 1\nn 2 2 2 2 3 3 3 3\n";
  }
  const EmbeddingPairs p = load_embeddings(dir / "e.txt");
  EXPECT_EQ(p.dimension, 4u);
  EXPECT_EQ(p.matched.size(), 2u);
  EXPECT_EQ(p.nonmatched.size(), 2u);
  save_embeddings(p, dir / "f.txt");
  const EmbeddingPairs q = load_embeddings(dir / "f.txt");
  EXPECT_EQ(q.matched, p.matched);
  EXPECT_EQ(q.nonmatched, p.nonmatched);
}

TEST(Embeddings, InvalidFilesAreFormatErrors) {
  const fs::path dir = scratch("emb_bad");
  auto write = [&](const std::string& text) {
    std::ofstream(dir / "e.txt") << text;
    return dir / "e.txt";
  };
  EXPECT_THROW(load_embeddings(write("d 2\nn 1 2 3 4\n")), FormatError);            // no matched
  EXPECT_THROW(load_embeddings(write("d 2\nm 1 2 3 4\n")), FormatError);            // no nonmatched
  EXPECT_THROW(load_embeddings(write("d 2\nm 1 2 3\nn 1 2 3 4\n")), FormatError);   // wrong width
  EXPECT_THROW(load_embeddings(write("d 2\nm 1 nan 3 4\nn 1 2 3 4\n")), FormatError);
  EXPECT_THROW(load_embeddings(write("m 1 2 3 4\n")), FormatError);                 // no header
}
