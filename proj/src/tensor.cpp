#include "maxprune/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "maxprune/errors.hpp"

namespace maxprune {

// ---------------------------------------------------------------------------
// Shape / Tensor

Shape::Shape(std::initializer_list<std::size_t> dims) : Shape(std::vector<std::size_t>(dims)) {}

Shape::Shape(std::vector<std::size_t> dims) : dims_(std::move(dims)) {
  if (dims_.empty()) throw DimensionError("shape must have at least one dimension");
  for (std::size_t d : dims_) {
    if (d == 0) throw DimensionError("shape " + to_string() + " has a zero dimension");
  }
}

std::size_t Shape::numel() const {
  if (dims_.empty()) return 0;
  return std::accumulate(dims_.begin(), dims_.end(), std::size_t{1}, std::multiplies<>());
}

std::size_t Shape::inner(std::size_t axis) const {
  std::size_t n = 1;
  for (std::size_t i = axis; i < dims_.size(); ++i) n *= dims_[i];
  return n;
}

std::string Shape::to_string() const {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims_.size(); ++i) {
    if (i) os << 'x';
    os << dims_[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)), data_(shape_.numel(), fill) {}

Tensor::Tensor(Shape shape, std::vector<float> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  if (data_.size() != shape_.numel()) {
    throw DimensionError("tensor of shape " + shape_.to_string() + " given " +
                         std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape.numel() != numel()) {
    throw DimensionError("cannot reshape " + shape_.to_string() + " to " + shape.to_string());
  }
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(float value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::bit_equal(const Tensor& other) const {
  return shape_ == other.shape_ && data_.size() == other.data_.size() &&
         (data_.empty() ||
          std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(float)) == 0);
}

bool all_finite(std::span<const float> values) {
  return std::all_of(values.begin(), values.end(), [](float v) { return std::isfinite(v); });
}

// ---------------------------------------------------------------------------
// Rng

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

float Rng::uniform01() { return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f; }

float Rng::uniform(float lo, float hi) { return lo + (hi - lo) * uniform01(); }

std::uint64_t Rng::below(std::uint64_t bound) {
  if (bound == 0) throw ArgumentError("Rng::below requires bound >= 1");
  const std::uint64_t threshold = (0 - bound) % bound;  // 2^64 mod bound
  std::uint64_t x = next_u64();
  while (x < threshold) x = next_u64();
  return x % bound;
}

Rng Rng::derive(std::uint64_t seed, std::uint64_t stream) {
  return Rng(splitmix64(seed ^ splitmix64(stream + 0x632BE59BD9B4E019ull)));
}

// ---------------------------------------------------------------------------
// gemm
//
// Both operands are packed into zero-padded panels and every MR x NR output
// tile goes through the same micro-kernel, so an element's value never
// depends on where it sits in C. The k loop is blocked, but blocks run in
// ascending order and the partial sums are carried through a tile buffer, so
// each output is still the sequential sum a(i,0)b(0,j) + a(i,1)b(1,j) + ...

namespace {

constexpr std::size_t kMR = 8;
constexpr std::size_t kNR = 32;
constexpr std::size_t kKC = 256;

// Sixteen-lane float vectors (GCC/Clang vector extension); a tile row is two
// lanes. LaneU is the unaligned view used for loads and stores.
constexpr std::size_t kLanes = 16;
typedef float Lane __attribute__((vector_size(kLanes * sizeof(float))));
typedef float LaneU __attribute__((vector_size(kLanes * sizeof(float)), aligned(4)));
static_assert(kNR == 2 * kLanes);

inline Lane load_lane(const float* p) { return *reinterpret_cast<const LaneU*>(p); }
inline void store_lane(float* p, Lane v) { *reinterpret_cast<LaneU*>(p) = v; }

void micro_kernel(std::size_t kc, const float* __restrict ap, const float* __restrict bp,
                  float* __restrict tile) {
  Lane acc[kMR][2];
  for (std::size_t r = 0; r < kMR; ++r) {
    acc[r][0] = load_lane(tile + r * kNR);
    acc[r][1] = load_lane(tile + r * kNR + kLanes);
  }
  for (std::size_t p = 0; p < kc; ++p) {
    const Lane b0 = load_lane(bp + p * kNR);
    const Lane b1 = load_lane(bp + p * kNR + kLanes);
    const float* acol = ap + p * kMR;
    for (std::size_t r = 0; r < kMR; ++r) {
      const Lane av = Lane{} + acol[r];
      acc[r][0] += av * b0;
      acc[r][1] += av * b1;
    }
  }
  for (std::size_t r = 0; r < kMR; ++r) {
    store_lane(tile + r * kNR, acc[r][0]);
    store_lane(tile + r * kNR + kLanes, acc[r][1]);
  }
}

}  // namespace

void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k,
          std::span<const float> a, std::span<const float> b, std::span<float> c) {
  if (a.size() < m * k || b.size() < k * n || c.size() < m * n) {
    throw DimensionError("gemm operand buffers smaller than " + std::to_string(m) + "x" +
                         std::to_string(k) + " * " + std::to_string(k) + "x" + std::to_string(n));
  }
  if (m == 0 || n == 0) return;
  if (k == 0) {
    std::fill(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(m * n), 0.0f);
    return;
  }

  const std::size_t m_panels = (m + kMR - 1) / kMR;
  const std::size_t n_panels = (n + kNR - 1) / kNR;

  // A packed per k-block: for block kb, panel ip, element (p, r) at
  // a_pack[kb_offset + ip*kc*MR + p*MR + r].
  std::vector<float> a_pack(m_panels * kMR * k, 0.0f);
  for (std::size_t k0 = 0; k0 < k; k0 += kKC) {
    const std::size_t kc = std::min(kKC, k - k0);
    float* block = a_pack.data() + m_panels * kMR * k0;
    for (std::size_t ip = 0; ip < m_panels; ++ip) {
      float* panel = block + ip * kc * kMR;
      const std::size_t mr = std::min(kMR, m - ip * kMR);
      if (ta == Trans::no) {
        for (std::size_t r = 0; r < mr; ++r) {
          const float* src = a.data() + (ip * kMR + r) * k + k0;
          for (std::size_t p = 0; p < kc; ++p) panel[p * kMR + r] = src[p];
        }
      } else {
        for (std::size_t p = 0; p < kc; ++p) {
          const float* src = a.data() + (k0 + p) * m + ip * kMR;
          for (std::size_t r = 0; r < mr; ++r) panel[p * kMR + r] = src[r];
        }
      }
    }
  }

  std::vector<float> b_pack(kKC * kNR);
  std::vector<float> tiles(m_panels * kMR * kNR);
  for (std::size_t jp = 0; jp < n_panels; ++jp) {
    const std::size_t j0 = jp * kNR;
    const std::size_t nr = std::min(kNR, n - j0);
    std::fill(tiles.begin(), tiles.end(), 0.0f);
    for (std::size_t k0 = 0; k0 < k; k0 += kKC) {
      const std::size_t kc = std::min(kKC, k - k0);
      for (std::size_t p = 0; p < kc; ++p) {
        float* row = b_pack.data() + p * kNR;
        const std::size_t kk = k0 + p;
        if (tb == Trans::no) {
          const float* src = b.data() + kk * n + j0;
          for (std::size_t j = 0; j < nr; ++j) row[j] = src[j];
          for (std::size_t j = nr; j < kNR; ++j) row[j] = 0.0f;
        }
      }
      if (tb == Trans::yes) {
        for (std::size_t j = 0; j < nr; ++j) {
          const float* src = b.data() + (j0 + j) * k + k0;
          for (std::size_t p = 0; p < kc; ++p) b_pack[p * kNR + j] = src[p];
        }
        for (std::size_t p = 0; p < kc; ++p)
          for (std::size_t j = nr; j < kNR; ++j) b_pack[p * kNR + j] = 0.0f;
      }
      const float* a_block = a_pack.data() + m_panels * kMR * k0;
      for (std::size_t ip = 0; ip < m_panels; ++ip) {
        micro_kernel(kc, a_block + ip * kc * kMR, b_pack.data(), tiles.data() + ip * kMR * kNR);
      }
    }
    for (std::size_t ip = 0; ip < m_panels; ++ip) {
      for (std::size_t r = 0; r < kMR; ++r) {
        const std::size_t i = ip * kMR + r;
        if (i >= m) break;
        const float* src = tiles.data() + (ip * kMR + r) * kNR;
        std::copy(src, src + nr, c.data() + i * n + j0);
      }
    }
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().rank() != 2 || b.shape().rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw DimensionError("matmul shape mismatch: " + a.shape().to_string() + " x " +
                         b.shape().to_string());
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  Tensor c(Shape{m, n});
  gemm(Trans::no, Trans::no, m, n, k, a.data(), b.data(), c.data());
  return c;
}

Tensor transpose(const Tensor& a) {
  if (a.shape().rank() != 2) throw DimensionError("transpose needs rank 2, got " + a.shape().to_string());
  const std::size_t rows = a.shape()[0], cols = a.shape()[1];
  Tensor t(Shape{cols, rows});
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = a[i * cols + j];
  return t;
}

// ---------------------------------------------------------------------------
// Convolution

ConvGeometry ConvGeometry::make(const Shape& input, const Shape& filters, std::size_t stride) {
  if (input.rank() != 4 || filters.rank() != 4) {
    throw DimensionError("conv2d expects 4-D input and filters, got " + input.to_string() +
                         " and " + filters.to_string());
  }
  if (input[1] != filters[1]) {
    throw DimensionError("conv2d channel mismatch: input " + input.to_string() + ", filters " +
                         filters.to_string());
  }
  if (filters[2] > input[2] || filters[3] > input[3]) {
    throw DimensionError("conv2d kernel " + filters.to_string() + " larger than input " +
                         input.to_string());
  }
  if (stride == 0) throw DimensionError("conv2d stride must be positive");
  ConvGeometry g{};
  g.batch = input[0];
  g.channels = input[1];
  g.height = input[2];
  g.width = input[3];
  g.filters = filters[0];
  g.kernel_h = filters[2];
  g.kernel_w = filters[3];
  g.stride = stride;
  g.out_h = (g.height - g.kernel_h) / stride + 1;
  g.out_w = (g.width - g.kernel_w) / stride + 1;
  return g;
}

Tensor im2col(const Tensor& input, const ConvGeometry& g) {
  const std::size_t cols_n = g.batch * g.positions();
  Tensor cols(Shape{g.patch(), cols_n});
  const float* in = input.raw();
  float* out = cols.raw();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
        float* row = out + ((c * g.kernel_h + ki) * g.kernel_w + kj) * cols_n;
        for (std::size_t b = 0; b < g.batch; ++b) {
          const float* plane = in + (b * g.channels + c) * g.height * g.width;
          for (std::size_t y = 0; y < g.out_h; ++y) {
            const float* src = plane + (y * g.stride + ki) * g.width + kj;
            float* dst = row + b * g.positions() + y * g.out_w;
            for (std::size_t x = 0; x < g.out_w; ++x) dst[x] = src[x * g.stride];
          }
        }
      }
    }
  }
  return cols;
}

Tensor col2im(const Tensor& cols, const ConvGeometry& g) {
  const std::size_t cols_n = g.batch * g.positions();
  Tensor input(Shape{g.batch, g.channels, g.height, g.width});
  float* out = input.raw();
  const float* in = cols.raw();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
        const float* row = in + ((c * g.kernel_h + ki) * g.kernel_w + kj) * cols_n;
        for (std::size_t b = 0; b < g.batch; ++b) {
          float* plane = out + (b * g.channels + c) * g.height * g.width;
          for (std::size_t y = 0; y < g.out_h; ++y) {
            float* dst = plane + (y * g.stride + ki) * g.width + kj;
            const float* src = row + b * g.positions() + y * g.out_w;
            for (std::size_t x = 0; x < g.out_w; ++x) dst[x * g.stride] += src[x];
          }
        }
      }
    }
  }
  return input;
}

Conv2dResult conv2d_with_cols(const Tensor& input, const Tensor& filters, const Tensor& bias,
                              std::size_t stride) {
  const ConvGeometry g = ConvGeometry::make(input.shape(), filters.shape(), stride);
  if (bias.numel() != g.filters) {
    throw DimensionError("conv2d bias " + bias.shape().to_string() + " does not match " +
                         std::to_string(g.filters) + " filters");
  }
  Conv2dResult result;
  result.cols = im2col(input, g);
  const std::size_t cols_n = g.batch * g.positions();
  std::vector<float> product(g.filters * cols_n);
  gemm(Trans::no, Trans::no, g.filters, cols_n, g.patch(), filters.data(), result.cols.data(),
       product);
  result.output = Tensor(Shape{g.batch, g.filters, g.out_h, g.out_w});
  float* out = result.output.raw();
  const std::size_t pos = g.positions();
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t f = 0; f < g.filters; ++f) {
      const float* src = product.data() + f * cols_n + b * pos;
      float* dst = out + (b * g.filters + f) * pos;
      const float shift = bias[f];
      for (std::size_t p = 0; p < pos; ++p) dst[p] = src[p] + shift;
    }
  }
  return result;
}

Tensor conv2d(const Tensor& input, const Tensor& filters, const Tensor& bias, std::size_t stride) {
  return conv2d_with_cols(input, filters, bias, stride).output;
}

Conv2dGrads conv2d_backward(const Tensor& grad_out, const Tensor& cols, const Tensor& filters,
                            const ConvGeometry& g, bool need_input_grad) {
  const std::size_t pos = g.positions();
  const std::size_t cols_n = g.batch * pos;
  if (grad_out.numel() != g.filters * cols_n || cols.numel() != g.patch() * cols_n) {
    throw DimensionError("conv2d_backward: gradient " + grad_out.shape().to_string() +
                         " inconsistent with cached patches " + cols.shape().to_string());
  }
  // [B, F, P] -> [F, B*P]
  std::vector<float> g2(g.filters * cols_n);
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t f = 0; f < g.filters; ++f)
      std::copy_n(grad_out.raw() + (b * g.filters + f) * pos, pos,
                  g2.data() + f * cols_n + b * pos);

  Conv2dGrads grads;
  grads.filters = Tensor(filters.shape());
  gemm(Trans::no, Trans::yes, g.filters, g.patch(), cols_n, g2, cols.data(), grads.filters.data());

  grads.bias = Tensor(Shape{g.filters});
  for (std::size_t f = 0; f < g.filters; ++f) {
    float sum = 0.0f;
    const float* row = g2.data() + f * cols_n;
    for (std::size_t i = 0; i < cols_n; ++i) sum += row[i];
    grads.bias[f] = sum;
  }

  if (need_input_grad) {
    Tensor dcols(Shape{g.patch(), cols_n});
    gemm(Trans::yes, Trans::no, g.patch(), cols_n, g.filters, filters.data(), g2, dcols.data());
    grads.input = col2im(dcols, g);
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Pooling, activations, init

PoolResult maxpool2d(const Tensor& input) {
  const Shape& s = input.shape();
  if (s.rank() != 4) throw DimensionError("maxpool2d expects 4-D input, got " + s.to_string());
  if (s[2] % 2 != 0 || s[3] % 2 != 0) {
    throw DimensionError("maxpool2d needs even height and width, got " + s.to_string());
  }
  const std::size_t planes = s[0] * s[1], h = s[2], w = s[3];
  const std::size_t oh = h / 2, ow = w / 2;
  PoolResult r;
  r.output = Tensor(Shape{s[0], s[1], oh, ow});
  r.argmax.resize(r.output.numel());
  const float* in = input.raw();
  float* out = r.output.raw();
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const std::size_t base = pl * h * w;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        const std::size_t i00 = base + (2 * y) * w + 2 * x;
        const std::size_t cand[4] = {i00, i00 + 1, i00 + w, i00 + w + 1};
        std::size_t best = cand[0];
        for (int t = 1; t < 4; ++t)
          if (in[cand[t]] > in[best]) best = cand[t];
        const std::size_t o = (pl * oh + y) * ow + x;
        out[o] = in[best];
        r.argmax[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  return r;
}

Tensor maxpool2d_backward(const Tensor& grad_out, std::span<const std::uint32_t> argmax,
                          const Shape& input_shape) {
  if (argmax.size() != grad_out.numel()) {
    throw DimensionError("maxpool2d_backward: argmax map does not match gradient " +
                         grad_out.shape().to_string());
  }
  Tensor grad_in(input_shape);
  for (std::size_t o = 0; o < argmax.size(); ++o) grad_in[argmax[o]] += grad_out[o];
  return grad_in;
}

Tensor relu(const Tensor& x) {
  Tensor y = x;
  for (float& v : y.data()) v = v > 0.0f ? v : 0.0f;
  return y;
}

Tensor relu_backward(const Tensor& grad_out, const Tensor& x) {
  if (grad_out.numel() != x.numel()) {
    throw DimensionError("relu_backward: gradient " + grad_out.shape().to_string() +
                         " vs input " + x.shape().to_string());
  }
  Tensor g(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) g[i] = x[i] > 0.0f ? grad_out[i] : 0.0f;
  return g;
}

Tensor glorot_init(const Shape& shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  if (fan_in == 0 || fan_out == 0) throw ArgumentError("glorot_init: fans must be >= 1");
  const float bound = static_cast<float>(std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)));
  Tensor t(shape);
  for (float& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

}  // namespace maxprune
