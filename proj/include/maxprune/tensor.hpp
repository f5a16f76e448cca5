#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace maxprune {

// Tensor dimensions, outermost first. Every dimension is >= 1.
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<std::size_t> dims);
  explicit Shape(std::vector<std::size_t> dims);

  std::size_t rank() const { return dims_.size(); }
  std::size_t operator[](std::size_t axis) const { return dims_[axis]; }
  const std::vector<std::size_t>& dims() const { return dims_; }

  // Product of all dimensions; 0 for the default (rank-0) shape.
  std::size_t numel() const;

  // Product of dimensions from `axis` onward.
  std::size_t inner(std::size_t axis) const;

  std::string to_string() const;

  friend bool operator==(const Shape&, const Shape&) = default;

 private:
  std::vector<std::size_t> dims_;
};

// Dense row-major float32 array. A default-constructed tensor is empty and
// acts as a "no value" placeholder; every other tensor holds exactly
// shape().numel() elements.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  const Shape& shape() const { return shape_; }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  float* raw() { return data_.data(); }
  const float* raw() const { return data_.data(); }
  const std::vector<float>& values() const { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  // 2-D indexing; requires rank 2.
  float& at(std::size_t row, std::size_t col) { return data_[row * shape_[1] + col]; }
  float at(std::size_t row, std::size_t col) const { return data_[row * shape_[1] + col]; }

  // Same elements under a new shape with equal element count.
  Tensor reshaped(Shape shape) const;

  void fill(float value);

  // Bitwise equality of shape and every element (distinguishes -0.0 / +0.0).
  bool bit_equal(const Tensor& other) const;

 private:
  Shape shape_;
  std::vector<float> data_;
};

// Seedable 64-bit Mersenne Twister. The engine output sequence is fixed by
// the C++ standard; the float and integer mappings below are implemented
// here instead of with <random> distributions, whose outputs vary between
// standard libraries.
class Rng {
 public:
  static constexpr const char* kAlgorithm = "mt19937_64";

  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 24 random mantissa bits.
  float uniform01();
  // Uniform in [lo, hi].
  float uniform(float lo, float hi);
  // Uniform integer in [0, bound); bound >= 1. Rejection sampling, unbiased.
  std::uint64_t below(std::uint64_t bound);

  // Independent stream derived from this generator's seed and a stream id.
  static Rng derive(std::uint64_t seed, std::uint64_t stream);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);

enum class Trans { no, yes };

// c[m x n] = op(a) * op(b) where op(a) is m x k and op(b) is k x n.
// Each output accumulates its k products in ascending k order starting from
// +0.0f, and every element is produced by the same instruction sequence
// regardless of its position or of m and n. k == 0 yields all zeros.
void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k,
          std::span<const float> a, std::span<const float> b, std::span<float> c);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Valid cross-correlation geometry for input [B, C, H, W] and filters
// [F, C, kh, kw].
struct ConvGeometry {
  std::size_t batch, channels, height, width;
  std::size_t filters, kernel_h, kernel_w, stride;
  std::size_t out_h, out_w;

  static ConvGeometry make(const Shape& input, const Shape& filters, std::size_t stride);
  std::size_t patch() const { return channels * kernel_h * kernel_w; }
  std::size_t positions() const { return out_h * out_w; }
};

// Patch matrix [C*kh*kw, B*out_h*out_w]; row (c, i, j), column (b, y, x).
Tensor im2col(const Tensor& input, const ConvGeometry& g);
// Scatter-add of a patch-matrix gradient back to input layout.
Tensor col2im(const Tensor& cols, const ConvGeometry& g);

struct Conv2dResult {
  Tensor output;  // [B, F, out_h, out_w]
  Tensor cols;    // patch matrix, retained for the backward pass
};

Conv2dResult conv2d_with_cols(const Tensor& input, const Tensor& filters, const Tensor& bias,
                              std::size_t stride = 1);
Tensor conv2d(const Tensor& input, const Tensor& filters, const Tensor& bias,
              std::size_t stride = 1);

struct Conv2dGrads {
  Tensor input;    // empty when not requested
  Tensor filters;
  Tensor bias;
};

Conv2dGrads conv2d_backward(const Tensor& grad_out, const Tensor& cols, const Tensor& filters,
                            const ConvGeometry& g, bool need_input_grad);

struct PoolResult {
  Tensor output;
  // Flat input index of each output's winner.
  std::vector<std::uint32_t> argmax;
};

// Non-overlapping 2x2 max pooling; ties go to the lowest flat index.
PoolResult maxpool2d(const Tensor& input);
Tensor maxpool2d_backward(const Tensor& grad_out, std::span<const std::uint32_t> argmax,
                          const Shape& input_shape);

Tensor relu(const Tensor& x);
Tensor relu_backward(const Tensor& grad_out, const Tensor& x);

// Uniform Glorot/Xavier initialization in +-sqrt(6 / (fan_in + fan_out)).
Tensor glorot_init(const Shape& shape, std::size_t fan_in, std::size_t fan_out, Rng& rng);

bool all_finite(std::span<const float> values);

}  // namespace maxprune
