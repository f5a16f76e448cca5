#include "maxprune/network.hpp"

#include <algorithm>
#include <cmath>

#include "maxprune/errors.hpp"

namespace maxprune {

namespace {

constexpr std::size_t kReferenceKernel = 5;
constexpr std::size_t kClasses = 10;

}  // namespace

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::maxpool2: return "maxpool2";
    case LayerKind::dense: return "dense";
    case LayerKind::relu: return "relu";
    case LayerKind::maxout: return "maxout";
    case LayerKind::softmax: return "softmax";
  }
  return "?";
}

LayerKind layer_kind_from_string(const std::string& name) {
  for (LayerKind k : {LayerKind::conv2d, LayerKind::maxpool2, LayerKind::dense, LayerKind::relu,
                      LayerKind::maxout, LayerKind::softmax}) {
    if (name == to_string(k)) return k;
  }
  throw FormatError("unknown layer kind '" + name + "'");
}

const char* to_string(Variant v) {
  switch (v) {
    case Variant::baseline: return "baseline";
    case Variant::mfc: return "mfc";
    case Variant::mc: return "mc";
  }
  return "?";
}

Variant variant_from_string(const std::string& name) {
  if (name == "baseline") return Variant::baseline;
  if (name == "mfc") return Variant::mfc;
  if (name == "mc") return Variant::mc;
  throw ArgumentError("unknown variant '" + name + "' (expected baseline, mfc or mc)");
}

// ---------------------------------------------------------------------------
// NetworkSpec

NetworkSpec NetworkSpec::reference(Variant variant, std::size_t fc_size, std::size_t k,
                                   std::size_t conv1, std::size_t conv2) {
  if (conv2 == 0) conv2 = variant == Variant::mc ? 64 : 50;
  NetworkSpec s;
  s.variant = variant;
  s.fc_size = fc_size;
  auto conv = [](std::size_t filters) {
    return LayerSpec{LayerKind::conv2d, filters, kReferenceKernel, 0};
  };
  const LayerSpec relu{LayerKind::relu, 0, 0, 0};
  const LayerSpec pool{LayerKind::maxpool2, 0, 0, 0};
  const LayerSpec maxout{LayerKind::maxout, 0, 0, k};

  s.layers = {conv(conv1), relu, pool, conv(conv2)};
  s.layers.push_back(variant == Variant::mc ? maxout : relu);
  s.layers.push_back(pool);
  s.layers.push_back(LayerSpec{LayerKind::dense, fc_size, 0, 0});
  s.layers.push_back(variant == Variant::mfc ? maxout : relu);
  s.layers.push_back(LayerSpec{LayerKind::softmax, kClasses, 0, 0});
  s.validate();
  return s;
}

NetworkSpec NetworkSpec::without_maxout() const {
  NetworkSpec s = *this;
  s.variant = Variant::baseline;
  for (LayerSpec& l : s.layers) {
    if (l.kind == LayerKind::maxout) l = LayerSpec{LayerKind::relu, 0, 0, 0};
  }
  return s;
}

std::optional<std::size_t> NetworkSpec::maxout_index() const {
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i].kind == LayerKind::maxout) return i;
  return std::nullopt;
}

void NetworkSpec::validate() const {
  if (layers.empty()) throw StructureError("network spec has no layers");
  if (input_channels == 0 || input_height == 0 || input_width == 0)
    throw StructureError("network input dimensions must be positive");
  if (layers.back().kind != LayerKind::softmax)
    throw StructureError("last layer must be softmax");
  std::size_t maxouts = 0;
  // Walk the shapes with the widths as built.
  std::vector<std::size_t> dims = {input_channels, input_height, input_width};
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    const std::string where = "layer " + std::to_string(i) + " (" + to_string(l.kind) + ")";
    switch (l.kind) {
      case LayerKind::conv2d:
        if (dims.size() != 3) throw StructureError(where + ": conv2d after a flat layer");
        if (l.units == 0 || l.kernel == 0) throw StructureError(where + ": zero size");
        if (l.kernel > dims[1] || l.kernel > dims[2])
          throw StructureError(where + ": kernel larger than its input");
        dims = {l.units, dims[1] - l.kernel + 1, dims[2] - l.kernel + 1};
        break;
      case LayerKind::maxpool2:
        if (dims.size() != 3 || dims[1] % 2 || dims[2] % 2)
          throw StructureError(where + ": needs an even spatial input");
        dims = {dims[0], dims[1] / 2, dims[2] / 2};
        break;
      case LayerKind::dense:
      case LayerKind::softmax:
        if (l.units == 0) throw StructureError(where + ": zero width");
        if (l.kind == LayerKind::softmax && i + 1 != layers.size())
          throw StructureError(where + ": softmax must be last");
        dims = {l.units};
        break;
      case LayerKind::relu:
        break;
      case LayerKind::maxout:
        ++maxouts;
        if (l.group == 0) throw StructureError(where + ": group size must be >= 1");
        if (l.group > 255) throw StructureError(where + ": group size above 255");
        if (dims[0] % l.group != 0)
          throw StructureError(where + ": width " + std::to_string(dims[0]) +
                               " not divisible by k=" + std::to_string(l.group));
        if (i == 0 || !layers[i - 1].has_weights() || layers[i - 1].kind == LayerKind::softmax)
          throw StructureError(where + ": must directly follow a conv2d or dense layer");
        dims[0] /= l.group;
        break;
    }
  }
  if (maxouts > 1) throw StructureError("at most one maxout layer is supported");
}

// ---------------------------------------------------------------------------
// MaxoutState

MaxoutState MaxoutState::fresh(std::size_t width, std::size_t k) {
  if (k == 0 || width % k != 0)
    throw StructureError("maxout width " + std::to_string(width) + " not divisible by k=" +
                         std::to_string(k));
  MaxoutState s;
  s.k_original = k;
  s.k_current = k;
  s.unit_count = width / k;
  s.survivors.resize(s.unit_count);
  s.win_counts.assign(s.unit_count, std::vector<std::uint64_t>(k, 0));
  for (std::size_t u = 0; u < s.unit_count; ++u)
    for (std::size_t j = 0; j < k; ++j) s.survivors[u].push_back(static_cast<std::uint32_t>(u * k + j));
  return s;
}

void MaxoutState::reset_counts() {
  for (auto& c : win_counts) std::fill(c.begin(), c.end(), 0);
}

void MaxoutState::validate() const {
  if (k_current == 0 || k_current > k_original)
    throw StructureError("maxout k_current=" + std::to_string(k_current) + " outside [1, " +
                         std::to_string(k_original) + "]");
  if (survivors.size() != unit_count || win_counts.size() != unit_count)
    throw StructureError("maxout bookkeeping does not cover " + std::to_string(unit_count) + " units");
  const std::size_t original_width = unit_count * k_original;
  for (std::size_t u = 0; u < unit_count; ++u) {
    const auto& s = survivors[u];
    if (s.size() != k_current || win_counts[u].size() != k_current)
      throw StructureError("maxout unit " + std::to_string(u) + " does not have k_current survivors");
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (s[j] >= original_width)
        throw StructureError("maxout survivor index out of range in unit " + std::to_string(u));
      if (j > 0 && s[j] <= s[j - 1])
        throw StructureError("maxout survivors of unit " + std::to_string(u) +
                             " not strictly increasing");
    }
  }
}

// ---------------------------------------------------------------------------
// Maxout

namespace {

struct MaxoutLayout {
  std::size_t batch, units, positions;
};

MaxoutLayout maxout_layout(const Shape& s, const MaxoutState& state) {
  if (state.k_current == 0) throw StructureError("maxout k_current must be >= 1");
  if (s.rank() != 2 && s.rank() != 4)
    throw StructureError("maxout input must be [B, W] or [B, C, H, W], got " + s.to_string());
  if (s[1] != state.width())
    throw StructureError("maxout input " + s.to_string() + " does not match " +
                         std::to_string(state.unit_count) + " units of k=" +
                         std::to_string(state.k_current));
  const std::size_t positions = s.rank() == 4 ? s[2] * s[3] : 1;
  return {s[0], state.unit_count, positions};
}

MaxoutResult maxout_impl(const Tensor& x, const MaxoutState& state,
                         std::vector<std::vector<std::uint64_t>>* counts) {
  const MaxoutLayout lay = maxout_layout(x.shape(), state);
  const std::size_t k = state.k_current;
  MaxoutResult r;
  std::vector<std::size_t> out_dims = x.shape().dims();
  out_dims[1] = lay.units;
  r.output = Tensor(Shape(out_dims));
  r.winners = MaxoutWinners{lay.batch, lay.units, lay.positions, k, {}};
  r.winners.slot.resize(lay.batch * lay.units * lay.positions);
  const float* in = x.raw();
  float* out = r.output.raw();
  for (std::size_t b = 0; b < lay.batch; ++b) {
    for (std::size_t u = 0; u < lay.units; ++u) {
      const float* group = in + (b * state.width() + u * k) * lay.positions;
      for (std::size_t p = 0; p < lay.positions; ++p) {
        std::size_t best = 0;
        float best_v = group[p];
        for (std::size_t s = 1; s < k; ++s) {
          const float v = group[s * lay.positions + p];
          if (v > best_v) {
            best_v = v;
            best = s;
          }
        }
        const std::size_t o = (b * lay.units + u) * lay.positions + p;
        out[o] = best_v;
        r.winners.slot[o] = static_cast<std::uint8_t>(best);
        if (counts) ++(*counts)[u][best];
      }
    }
  }
  return r;
}

}  // namespace

MaxoutResult maxout_forward(const Tensor& x, const MaxoutState& state) {
  return maxout_impl(x, state, nullptr);
}

MaxoutResult maxout_forward(const Tensor& x, MaxoutState& state, bool count) {
  return maxout_impl(x, state, count ? &state.win_counts : nullptr);
}

Tensor maxout_backward(const Tensor& grad_y, const MaxoutWinners& winners,
                       const MaxoutState& state) {
  if (winners.k != state.k_current || winners.units != state.unit_count)
    throw StructureError("stale maxout winners: recorded k=" + std::to_string(winners.k) +
                         ", state has k=" + std::to_string(state.k_current));
  if (grad_y.numel() != winners.slot.size())
    throw StructureError("maxout gradient " + grad_y.shape().to_string() +
                         " does not match the winners map");
  std::vector<std::size_t> dims = grad_y.shape().dims();
  dims[1] = state.width();
  Tensor grad_x{Shape(dims)};
  const std::size_t k = state.k_current;
  for (std::size_t b = 0; b < winners.batch; ++b) {
    for (std::size_t u = 0; u < winners.units; ++u) {
      float* group = grad_x.raw() + (b * state.width() + u * k) * winners.positions;
      for (std::size_t p = 0; p < winners.positions; ++p) {
        const std::size_t o = (b * winners.units + u) * winners.positions + p;
        group[winners.slot[o] * winners.positions + p] = grad_y[o];
      }
    }
  }
  return grad_x;
}

// ---------------------------------------------------------------------------
// Dense

Tensor dense_forward(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const std::size_t batch = x.shape()[0];
  const std::size_t in = x.numel() / batch;
  const std::size_t out = weight.shape()[0];
  if (weight.shape().rank() != 2 || weight.shape()[1] != in || bias.numel() != out)
    throw DimensionError("dense: input " + x.shape().to_string() + " vs weight " +
                         weight.shape().to_string() + ", bias " + bias.shape().to_string());
  Tensor y(Shape{batch, out});
  gemm(Trans::no, Trans::yes, batch, out, in, x.data(), weight.data(), y.data());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t j = 0; j < out; ++j) y[b * out + j] += bias[j];
  return y;
}

DenseGrads dense_backward(const Tensor& grad_y, const Tensor& x, const Tensor& weight,
                          bool need_input_grad) {
  const std::size_t batch = x.shape()[0];
  const std::size_t in = x.numel() / batch;
  const std::size_t out = weight.shape()[0];
  if (grad_y.numel() != batch * out)
    throw DimensionError("dense_backward: gradient " + grad_y.shape().to_string() +
                         " vs weight " + weight.shape().to_string());
  DenseGrads g;
  g.weight = Tensor(weight.shape());
  gemm(Trans::yes, Trans::no, out, in, batch, grad_y.data(), x.data(), g.weight.data());
  g.bias = Tensor(Shape{out});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t j = 0; j < out; ++j) g.bias[j] += grad_y[b * out + j];
  if (need_input_grad) {
    g.input = Tensor(x.shape());
    gemm(Trans::no, Trans::no, batch, in, out, grad_y.data(), weight.data(), g.input.data());
  }
  return g;
}

// ---------------------------------------------------------------------------
// Network

void Network::validate() const {
  spec.validate();
  if (params.size() != spec.layers.size())
    throw StructureError("parameter list does not match the layer list");
  const auto mi = spec.maxout_index();
  if (mi.has_value() != maxout.has_value())
    throw StructureError("maxout bookkeeping present without a maxout layer, or vice versa");
  if (maxout) {
    maxout->validate();
    if (maxout->k_original != spec.layers[*mi].group)
      throw StructureError("maxout k_original disagrees with the network spec");
    if (layer_width(*mi - 1) != maxout->width())
      throw StructureError("layer feeding maxout has " + std::to_string(layer_width(*mi - 1)) +
                           " outputs, maxout expects " + std::to_string(maxout->width()));
  }
  const auto shapes = activation_shapes(*this, 1);
  (void)shapes;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const LayerParams& p = params[i];
    if (!spec.layers[i].has_weights()) {
      if (!p.weight.empty() || !p.bias.empty())
        throw StructureError("parameter-free layer " + std::to_string(i) + " carries tensors");
      continue;
    }
    if (p.bias.numel() != p.weight.shape()[0])
      throw StructureError("bias of layer " + std::to_string(i) + " does not match its weights");
    if (p.has_mask()) {
      if (p.mask.size() != p.weight.numel())
        throw StructureError("mask of layer " + std::to_string(i) + " has the wrong size");
      for (std::size_t e = 0; e < p.mask.size(); ++e)
        if (p.mask[e] && p.weight[e] != 0.0f)
          throw StructureError("masked weight " + std::to_string(e) + " of layer " +
                               std::to_string(i) + " is nonzero");
    }
  }
}

void Network::apply_masks() {
  for (LayerParams& p : params) {
    if (!p.has_mask()) continue;
    for (std::size_t e = 0; e < p.mask.size(); ++e)
      if (p.mask[e]) p.weight[e] = 0.0f;
  }
}

Network build_network(const NetworkSpec& spec, Rng& rng) {
  spec.validate();
  Network net;
  net.spec = spec;
  net.params.resize(spec.layers.size());
  std::size_t channels = spec.input_channels;
  std::size_t flat = spec.input_channels * spec.input_height * spec.input_width;
  std::size_t h = spec.input_height, w = spec.input_width;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    LayerParams& p = net.params[i];
    switch (l.kind) {
      case LayerKind::conv2d: {
        const std::size_t area = l.kernel * l.kernel;
        p.weight = glorot_init(Shape{l.units, channels, l.kernel, l.kernel}, channels * area,
                               l.units * area, rng);
        p.bias = Tensor(Shape{l.units});
        channels = l.units;
        h = h - l.kernel + 1;
        w = w - l.kernel + 1;
        flat = channels * h * w;
        break;
      }
      case LayerKind::maxpool2:
        h /= 2;
        w /= 2;
        flat = channels * h * w;
        break;
      case LayerKind::dense:
      case LayerKind::softmax:
        p.weight = glorot_init(Shape{l.units, flat}, flat, l.units, rng);
        p.bias = Tensor(Shape{l.units});
        channels = flat = l.units;
        break;
      case LayerKind::relu:
        break;
      case LayerKind::maxout:
        net.maxout = MaxoutState::fresh(channels, l.group);
        channels /= l.group;
        flat /= l.group;
        break;
    }
  }
  return net;
}

Network build_network(const NetworkSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  return build_network(spec, rng);
}

std::vector<Shape> activation_shapes(const Network& net, std::size_t batch) {
  std::vector<Shape> shapes;
  std::vector<std::size_t> cur = net.spec.input_shape(batch).dims();
  for (std::size_t i = 0; i < net.spec.layers.size(); ++i) {
    const LayerSpec& l = net.spec.layers[i];
    const std::string where = "layer " + std::to_string(i) + " (" + to_string(l.kind) + ")";
    switch (l.kind) {
      case LayerKind::conv2d: {
        const Shape& ws = net.params[i].weight.shape();
        if (ws.rank() != 4 || cur.size() != 4 || ws[1] != cur[1])
          throw StructureError(where + ": filters " + ws.to_string() + " do not fit the input");
        cur = {batch, ws[0], cur[2] - ws[2] + 1, cur[3] - ws[3] + 1};
        break;
      }
      case LayerKind::maxpool2:
        cur[2] /= 2;
        cur[3] /= 2;
        break;
      case LayerKind::dense:
      case LayerKind::softmax: {
        const Shape& ws = net.params[i].weight.shape();
        std::size_t in = 1;
        for (std::size_t d = 1; d < cur.size(); ++d) in *= cur[d];
        if (ws.rank() != 2 || ws[1] != in)
          throw StructureError(where + ": weights " + ws.to_string() + " do not fit input width " +
                               std::to_string(in));
        cur = {batch, ws[0]};
        break;
      }
      case LayerKind::relu:
        break;
      case LayerKind::maxout:
        if (!net.maxout || cur[1] != net.maxout->width())
          throw StructureError(where + ": input width does not match maxout state");
        cur[1] = net.maxout->unit_count;
        break;
    }
    shapes.emplace_back(cur);
  }
  return shapes;
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

ForwardResult forward_impl(const Network& net, const Tensor& batch, MaxoutState* counter,
                           bool keep_cache) {
  const Shape expected = net.spec.input_shape(batch.shape().rank() ? batch.shape()[0] : 1);
  if (batch.shape() != expected)
    throw DimensionError("forward: batch " + batch.shape().to_string() + " does not match input " +
                         expected.to_string());
  ForwardResult r;
  r.cache.structure_version = net.structure_version;
  if (keep_cache) r.cache.layers.resize(net.spec.layers.size());
  Tensor x = batch;
  for (std::size_t i = 0; i < net.spec.layers.size(); ++i) {
    const LayerSpec& l = net.spec.layers[i];
    const LayerParams& p = net.params[i];
    LayerCache* c = keep_cache ? &r.cache.layers[i] : nullptr;
    Tensor y;
    switch (l.kind) {
      case LayerKind::conv2d: {
        Conv2dResult cr = conv2d_with_cols(x, p.weight, p.bias, 1);
        y = std::move(cr.output);
        if (c) c->cols = std::move(cr.cols);
        break;
      }
      case LayerKind::maxpool2: {
        PoolResult pr = maxpool2d(x);
        y = std::move(pr.output);
        if (c) c->argmax = std::move(pr.argmax);
        break;
      }
      case LayerKind::dense:
      case LayerKind::softmax:
        y = dense_forward(x, p.weight, p.bias);
        break;
      case LayerKind::relu:
        y = relu(x);
        break;
      case LayerKind::maxout: {
        MaxoutResult mr = counter ? maxout_forward(x, *counter, true)
                                  : maxout_forward(x, *net.maxout);
        y = std::move(mr.output);
        if (c) c->winners = std::move(mr.winners);
        break;
      }
    }
    if (c) c->input = std::move(x);
    x = std::move(y);
  }
  r.logits = std::move(x);
  return r;
}

}  // namespace

ForwardResult forward(Network& net, const Tensor& batch, bool count) {
  if (count && !net.maxout) throw StructureError("counting requested on a network without maxout");
  return forward_impl(net, batch, count ? &*net.maxout : nullptr, true);
}

ForwardResult forward(const Network& net, const Tensor& batch) {
  return forward_impl(net, batch, nullptr, true);
}

Tensor predict(const Network& net, const Tensor& batch) {
  return forward_impl(net, batch, nullptr, false).logits;
}

LossResult softmax_xent(const Tensor& logits, std::span<const int> labels) {
  if (logits.shape().rank() != 2 || logits.shape()[0] != labels.size())
    throw DimensionError("softmax_xent: logits " + logits.shape().to_string() + " vs " +
                         std::to_string(labels.size()) + " labels");
  const std::size_t batch = logits.shape()[0], classes = logits.shape()[1];
  LossResult r;
  r.grad_logits = Tensor(logits.shape());
  double total = 0.0;
  const float inv_b = 1.0f / static_cast<float>(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const int label = labels[b];
    if (label < 0 || static_cast<std::size_t>(label) >= classes)
      throw DataError("label " + std::to_string(label) + " of sample " + std::to_string(b) +
                      " outside [0, " + std::to_string(classes) + ")");
    const float* row = logits.raw() + b * classes;
    const float peak = *std::max_element(row, row + classes);
    double denom = 0.0;
    for (std::size_t j = 0; j < classes; ++j) denom += std::exp(static_cast<double>(row[j] - peak));
    const double log_denom = std::log(denom);
    total += log_denom - static_cast<double>(row[label] - peak);
    float* g = r.grad_logits.raw() + b * classes;
    for (std::size_t j = 0; j < classes; ++j) {
      const double prob = std::exp(static_cast<double>(row[j] - peak) - log_denom);
      g[j] = static_cast<float>(prob - (static_cast<std::size_t>(label) == j ? 1.0 : 0.0)) * inv_b;
    }
  }
  r.loss = static_cast<float>(total / static_cast<double>(batch));
  return r;
}

Gradients backward(const Network& net, const ForwardCache& cache, const Tensor& grad_logits) {
  if (cache.layers.size() != net.spec.layers.size())
    throw StructureError("backward: missing or incomplete forward cache");
  if (cache.structure_version != net.structure_version)
    throw StructureError("backward: forward cache predates a structural change");
  Gradients grads;
  grads.layers.resize(net.spec.layers.size());
  Tensor g = grad_logits;
  for (std::size_t n = net.spec.layers.size(); n-- > 0;) {
    const LayerSpec& l = net.spec.layers[n];
    const LayerParams& p = net.params[n];
    const LayerCache& c = cache.layers[n];
    const bool need_input = n > 0;
    switch (l.kind) {
      case LayerKind::conv2d: {
        const ConvGeometry geo = ConvGeometry::make(c.input.shape(), p.weight.shape(), 1);
        Conv2dGrads cg = conv2d_backward(g, c.cols, p.weight, geo, need_input);
        grads.layers[n] = {std::move(cg.filters), std::move(cg.bias)};
        g = std::move(cg.input);
        break;
      }
      case LayerKind::maxpool2:
        g = maxpool2d_backward(g, c.argmax, c.input.shape());
        break;
      case LayerKind::dense:
      case LayerKind::softmax: {
        DenseGrads dg = dense_backward(g, c.input, p.weight, need_input);
        grads.layers[n] = {std::move(dg.weight), std::move(dg.bias)};
        g = std::move(dg.input);
        break;
      }
      case LayerKind::relu:
        g = relu_backward(g, c.input);
        break;
      case LayerKind::maxout:
        if (!c.winners) throw StructureError("backward: maxout winners missing from cache");
        g = maxout_backward(g, *c.winners, *net.maxout);
        break;
    }
    if (p.has_mask()) {
      Tensor& gw = grads.layers[n].weight;
      for (std::size_t e = 0; e < p.mask.size(); ++e)
        if (p.mask[e]) gw[e] = 0.0f;
    }
  }
  return grads;
}

}  // namespace maxprune
