#pragma once

// Depth-aware discrete autoencoder.
//
// Input (N, 4, H, W) = RGB | depth. Encoder 1 downsamples 4x to f1,
// encoder 2 a further 2x to f2. f2 is quantized with VQ1 into Q1; the mid
// decoder lifts Q1 back to f1 resolution as fU; [f1, fU] is reordered so
// RGB-derived channels precede depth-derived ones and quantized with VQ2
// into Q2. Decoder 2 maps [up(Q1), Q2] (reordered the same way) to the
// reconstructed RGB and depth.
//
// With grouping on, every convolution in the encoders and decoder 2 keeps
// the two modalities in separate channel groups.

#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "tdsr/image.hpp"
#include "tdsr/kv.hpp"
#include "tdsr/nn/adam.hpp"
#include "tdsr/nn/blocks.hpp"
#include "tdsr/nn/checkpoint.hpp"
#include "tdsr/nn/losses.hpp"
#include "tdsr/nn/quantize.hpp"

namespace tdsr::dada {

using nn::Codebook;
using nn::Param;
using nn::QuantizedFeatureMap;
using nn::Sequential;

inline constexpr int kRgbChannels = 3;
inline constexpr int kDepthChannels = 1;
inline constexpr int kInputChannels = kRgbChannels + kDepthChannels;
/// Spatial reduction of f1 / Q2 and of f2 / Q1.
inline constexpr int kStage1Factor = 4;
inline constexpr int kStage2Factor = 8;

struct DadaConfig {
  int hidden = 64;           // channels per modality group
  int residual_hidden = 16;  // per group, inside residual blocks
  int residual_blocks = 2;
  int codebook1_size = 128;
  int codebook2_size = 128;
  int embedding_dim = 32;
  double lambda_image = 1.0;
  double lambda_depth = 1.0;
  double lambda_commit = 0.25;
  bool grouped = true;
  bool grouped_mid_decoder = true;
  /// Applies the second-level codebook/commitment terms to the f1 channels
  /// of fR only instead of the whole quantized map.
  bool strict_first_level_terms = false;

  int groups() const noexcept { return grouped ? 2 : 1; }
  int mid_groups() const noexcept { return grouped && grouped_mid_decoder ? 2 : 1; }
  int f1_channels() const noexcept { return embedding_dim / 2; }

  void validate() const {
    if (hidden < 1 || residual_hidden < 1 || residual_blocks < 0)
      throw ConfigError("dada: hidden widths must be >= 1 and block count >= 0");
    if (codebook1_size < 1 || codebook2_size < 1 || embedding_dim < 1)
      throw ConfigError("dada: codebook sizes and embedding dim must be >= 1");
    if (embedding_dim % (2 * groups()) != 0)
      throw ConfigError("dada: embedding_dim must be divisible by " +
                        std::to_string(2 * groups()));
    if (lambda_image < 0 || lambda_depth < 0 || lambda_commit < 0)
      throw ConfigError("dada: loss weights must be non-negative");
  }

  KeyValues to_key_values() const {
    return {{"dada.hidden", std::to_string(hidden)},
            {"dada.residual_hidden", std::to_string(residual_hidden)},
            {"dada.residual_blocks", std::to_string(residual_blocks)},
            {"dada.codebook1_size", std::to_string(codebook1_size)},
            {"dada.codebook2_size", std::to_string(codebook2_size)},
            {"dada.embedding_dim", std::to_string(embedding_dim)},
            {"dada.lambda_image", format_number(lambda_image)},
            {"dada.lambda_depth", format_number(lambda_depth)},
            {"dada.lambda_commit", format_number(lambda_commit)},
            {"dada.grouped", grouped ? "true" : "false"},
            {"dada.grouped_mid_decoder", grouped_mid_decoder ? "true" : "false"},
            {"dada.strict_first_level_terms", strict_first_level_terms ? "true" : "false"}};
  }

  /// Reads the "dada.*" keys present in kv; other keys are ignored.
  void apply(const KeyValues& kv) {
    for (const auto& [k, v] : kv) {
      if (k == "dada.hidden") hidden = static_cast<int>(parse_int(k, v));
      else if (k == "dada.residual_hidden") residual_hidden = static_cast<int>(parse_int(k, v));
      else if (k == "dada.residual_blocks") residual_blocks = static_cast<int>(parse_int(k, v));
      else if (k == "dada.codebook1_size") codebook1_size = static_cast<int>(parse_int(k, v));
      else if (k == "dada.codebook2_size") codebook2_size = static_cast<int>(parse_int(k, v));
      else if (k == "dada.embedding_dim") embedding_dim = static_cast<int>(parse_int(k, v));
      else if (k == "dada.lambda_image") lambda_image = parse_double(k, v);
      else if (k == "dada.lambda_depth") lambda_depth = parse_double(k, v);
      else if (k == "dada.lambda_commit") lambda_commit = parse_double(k, v);
      else if (k == "dada.grouped") grouped = parse_bool(k, v);
      else if (k == "dada.grouped_mid_decoder") grouped_mid_decoder = parse_bool(k, v);
      else if (k == "dada.strict_first_level_terms") strict_first_level_terms = parse_bool(k, v);
    }
  }

  static bool knows(const std::string& key) {
    static const DadaConfig probe;
    return probe.to_key_values().count(key) != 0;
  }
};

// ---- channel reordering -------------------------------------------------------

/// Index map for reordering [a | b] so that the g-th group of a is followed
/// by the g-th group of b: out[c] = naive_concat[order[c]].
inline std::vector<int> reorder_permutation(int a_channels, int b_channels, int groups) {
  if (groups < 1 || a_channels % groups != 0 || b_channels % groups != 0)
    throw ShapeError("reorder: channel counts not divisible by group count");
  const int ag = a_channels / groups;
  const int bg = b_channels / groups;
  std::vector<int> order;
  order.reserve(a_channels + b_channels);
  for (int g = 0; g < groups; ++g) {
    for (int i = 0; i < ag; ++i) order.push_back(g * ag + i);
    for (int i = 0; i < bg; ++i) order.push_back(a_channels + g * bg + i);
  }
  return order;
}

template <typename T>
Tensor<T> reorder_concat(const Tensor<T>& a, const Tensor<T>& b, int groups) {
  if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w())
    throw ShapeError("reorder_concat: " + a.shape().str() + " vs " + b.shape().str());
  const auto order = reorder_permutation(a.c(), b.c(), groups);
  return permute_channels(concat_channels(a, b), std::span<const int>(order));
}

/// Splits a gradient w.r.t. reorder_concat's output back onto (a, b).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> reorder_concat_backward(const Tensor<T>& d, int a_channels,
                                                        int b_channels, int groups) {
  const auto order = reorder_permutation(a_channels, b_channels, groups);
  const Tensor<T> naive = scatter_channels(d, std::span<const int>(order));
  return {slice_channels(naive, 0, a_channels), slice_channels(naive, a_channels, b_channels)};
}

// ---- model ----------------------------------------------------------------------

template <typename T>
nn::ModulePtr<T> make_modality_conv(bool grouped, int in_rgb, int in_depth, int out_rgb,
                                    int out_depth, int kernel, int stride, int padding) {
  if (grouped)
    return std::make_unique<nn::PartitionedConv2d<T>>(
        std::vector<int>{in_rgb, in_depth}, std::vector<int>{out_rgb, out_depth}, kernel, stride,
        padding);
  return nn::make_conv<T>(in_rgb + in_depth, out_rgb + out_depth, kernel, stride, padding, 1);
}

/// Decoder mapping (Q1 at /8, Q2 at /4) to a 4-channel image. Shared by the
/// DADA general appearance decoder and the object-specific decoder.
template <typename T>
std::unique_ptr<Sequential<T>> make_image_decoder(const DadaConfig& cfg) {
  const int G = cfg.groups();
  const int H = cfg.hidden * 2;
  const int R = cfg.residual_hidden * 2;
  const int E = cfg.embedding_dim;
  auto dec = std::make_unique<Sequential<T>>();
  dec->add(nn::make_conv<T>(2 * E, H, 3, 1, 1, G));
  dec->add(nn::make_res_stack<T>(H, R, cfg.residual_blocks, G));
  dec->template emplace<nn::Upsample<T>>(2);
  dec->add(nn::make_conv<T>(H, H, 3, 1, 1, G));
  dec->template emplace<nn::ReLU<T>>();
  dec->template emplace<nn::Upsample<T>>(2);
  dec->add(make_modality_conv<T>(cfg.grouped, cfg.hidden, cfg.hidden, kRgbChannels,
                                 kDepthChannels, 3, 1, 1));
  return dec;
}

/// Decoder input: up(Q1) and Q2 interleaved per modality group.
template <typename T>
Tensor<T> decoder_input(const Tensor<T>& q1, const Tensor<T>& q2, int groups) {
  return reorder_concat(nn::upsample_nearest(q1, 2), q2, groups);
}

template <typename T>
class DadaModel {
 public:
  explicit DadaModel(DadaConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    const int G = cfg_.groups();
    const int Gm = cfg_.mid_groups();
    const int H = cfg_.hidden * 2;
    const int R = cfg_.residual_hidden * 2;
    const int E = cfg_.embedding_dim;
    const int E1 = cfg_.f1_channels();

    encoder1_.add(make_modality_conv<T>(cfg_.grouped, kRgbChannels, kDepthChannels, cfg_.hidden,
                                        cfg_.hidden, 4, 2, 1));
    encoder1_.template emplace<nn::ReLU<T>>();
    encoder1_.add(nn::make_conv<T>(H, H, 4, 2, 1, G));
    encoder1_.template emplace<nn::ReLU<T>>();
    encoder1_.add(nn::make_conv<T>(H, H, 3, 1, 1, G));
    encoder1_.add(nn::make_res_stack<T>(H, R, cfg_.residual_blocks, G));
    encoder1_.add(nn::make_conv<T>(H, E1, 1, 1, 0, G));

    encoder2_.add(nn::make_conv<T>(E1, H, 4, 2, 1, G));
    encoder2_.template emplace<nn::ReLU<T>>();
    encoder2_.add(nn::make_conv<T>(H, H, 3, 1, 1, G));
    encoder2_.add(nn::make_res_stack<T>(H, R, cfg_.residual_blocks, G));
    encoder2_.add(nn::make_conv<T>(H, E, 1, 1, 0, G));

    mid_.add(nn::make_conv<T>(E, H, 3, 1, 1, Gm));
    mid_.add(nn::make_res_stack<T>(H, R, cfg_.residual_blocks, Gm));
    mid_.template emplace<nn::Upsample<T>>(2);
    mid_.add(nn::make_conv<T>(H, E - E1, 3, 1, 1, Gm));

    decoder_ = make_image_decoder<T>(cfg_);

    vq1_ = Codebook<T>("vq1", cfg_.codebook1_size, E);
    vq2_ = Codebook<T>("vq2", cfg_.codebook2_size, E);
  }

  DadaModel(const DadaModel&) = delete;
  DadaModel& operator=(const DadaModel&) = delete;

  const DadaConfig& config() const noexcept { return cfg_; }

  void init(Rng& rng) {
    encoder1_.init(rng);
    encoder2_.init(rng);
    mid_.init(rng);
    decoder_->init(rng);
    vq1_.init(rng);
    vq2_.init(rng);
  }

  Sequential<T>& encoder1() noexcept { return encoder1_; }
  Sequential<T>& encoder2() noexcept { return encoder2_; }
  Sequential<T>& mid_decoder() noexcept { return mid_; }
  Sequential<T>& decoder() noexcept { return *decoder_; }
  const Sequential<T>& encoder1() const noexcept { return encoder1_; }
  const Sequential<T>& encoder2() const noexcept { return encoder2_; }
  const Sequential<T>& mid_decoder() const noexcept { return mid_; }
  const Sequential<T>& decoder() const noexcept { return *decoder_; }
  Codebook<T>& vq1() noexcept { return vq1_; }
  Codebook<T>& vq2() noexcept { return vq2_; }
  const Codebook<T>& vq1() const noexcept { return vq1_; }
  const Codebook<T>& vq2() const noexcept { return vq2_; }

  std::vector<Param<T>*> parameters() {
    std::vector<Param<T>*> out;
    encoder1_.collect("enc1.", out);
    encoder2_.collect("enc2.", out);
    mid_.collect("mid.", out);
    decoder_->collect("dec.", out);
    vq1_.entries.name = "vq1";
    vq2_.entries.name = "vq2";
    out.push_back(&vq1_.entries);
    out.push_back(&vq2_.entries);
    return out;
  }

  void pin_activations(bool on) {
    encoder1_.pin_activations(on);
    encoder2_.pin_activations(on);
    mid_.pin_activations(on);
    decoder_->pin_activations(on);
  }

  void check_input(const Tensor<T>& x) const {
    if (x.c() != kInputChannels)
      throw ShapeError("dada: expected 4 input channels, got " + x.shape().str());
    if (x.h() % kStage2Factor != 0 || x.w() % kStage2Factor != 0 || x.h() == 0 || x.w() == 0)
      throw ShapeError("dada: input extent " + std::to_string(x.h()) + "x" +
                       std::to_string(x.w()) + " is not divisible by 8");
  }

 private:
  DadaConfig cfg_;
  Sequential<T> encoder1_;
  Sequential<T> encoder2_;
  Sequential<T> mid_;
  std::unique_ptr<Sequential<T>> decoder_;
  Codebook<T> vq1_;
  Codebook<T> vq2_;
};

// ---- input assembly ---------------------------------------------------------------

/// Stacks samples into an (N, 4, H, W) tensor: RGB then depth.
template <typename T>
Tensor<T> to_input(std::span<const RgbdSample* const> samples) {
  if (samples.empty()) throw ArgumentError("to_input: no samples");
  const int w = samples[0]->width();
  const int h = samples[0]->height();
  Tensor<T> x(static_cast<int>(samples.size()), kInputChannels, h, w);
  for (std::size_t b = 0; b < samples.size(); ++b) {
    const RgbdSample& s = *samples[b];
    s.validate();
    if (s.width() != w || s.height() != h) throw ShapeError("to_input: mixed sample extents");
    const std::size_t p = static_cast<std::size_t>(w) * h;
    for (int c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < p; ++i)
        x.plane(static_cast<int>(b), c)[i] = static_cast<T>(s.rgb.planes[c * p + i]);
    for (std::size_t i = 0; i < p; ++i)
      x.plane(static_cast<int>(b), 3)[i] = static_cast<T>(s.depth.depth.values[i]);
  }
  return x;
}

template <typename T>
Tensor<T> to_input(const RgbdSample& s) {
  const RgbdSample* one[] = {&s};
  return to_input<T>(std::span<const RgbdSample* const>(one));
}

// ---- forward ----------------------------------------------------------------------

template <typename T>
struct Encoded {
  Tensor<T> f1;
  Tensor<T> f2;
};

/// Frozen encoders (no caching).
template <typename T>
Encoded<T> encode(const DadaModel<T>& m, const Tensor<T>& input) {
  m.check_input(input);
  Encoded<T> e;
  e.f1 = m.encoder1().infer(input);
  e.f2 = m.encoder2().infer(e.f1);
  return e;
}

template <typename T>
struct Quantized {
  QuantizedFeatureMap<T> q1;  // VQ1 over f2
  QuantizedFeatureMap<T> q2;  // VQ2 over fR
  Tensor<T> fu;
  Tensor<T> fr;
};

/// Frozen quantization path: f2 -> Q1 -> fU, [f1, fU] -> fR -> Q2.
template <typename T>
Quantized<T> quantize_features(const DadaModel<T>& m, const Encoded<T>& e) {
  Quantized<T> q;
  q.q1 = nn::quantize(e.f2, m.vq1());
  q.fu = m.mid_decoder().infer(q.q1.embeddings);
  q.fr = reorder_concat(e.f1, q.fu, m.config().groups());
  q.q2 = nn::quantize(q.fr, m.vq2());
  return q;
}

/// Frozen decoder 2 applied to a pair of quantized maps; returns 4 channels.
template <typename T>
Tensor<T> decode(const DadaModel<T>& m, const Tensor<T>& q1, const Tensor<T>& q2) {
  return m.decoder().infer(decoder_input(q1, q2, m.config().groups()));
}

/// Everything the loss and the backward pass need.
template <typename T>
struct ForwardResult {
  Tensor<T> image_out;  // (N, 3, H, W)
  Tensor<T> depth_out;  // (N, 1, H, W)
  Tensor<T> f1;
  Tensor<T> f2;
  Tensor<T> fu;
  Tensor<T> fr;
  QuantizedFeatureMap<T> q1;
  QuantizedFeatureMap<T> q2;
  Tensor<T> q1_st;  // decoder-side value of Q1 (straight-through)
  Tensor<T> q2_st;
};

/// Holds every non-differentiable choice of one forward pass so later
/// passes evaluate the same piecewise-smooth function: quantizer indices,
/// straight-through offsets (Q - f) and stop-gradient operands.
template <typename T>
struct LinearizationPins {
  bool recorded = false;
  std::vector<int> idx1;
  std::vector<int> idx2;
  Tensor<T> offset1;
  Tensor<T> offset2;
  Tensor<T> sg_f2;
  Tensor<T> sg_q1;
  Tensor<T> sg_fr;
  Tensor<T> sg_q2;
};

namespace detail {

template <typename T>
QuantizedFeatureMap<T> quantize_pinned(const Tensor<T>& f, const Codebook<T>& cb,
                                       const std::vector<int>* pinned) {
  if (!pinned) return nn::quantize(f, cb);
  QuantizedFeatureMap<T> q;
  q.indices = *pinned;
  q.embeddings = nn::dequantize(q.indices, cb, f.n(), f.h(), f.w());
  return q;
}

template <typename T>
Tensor<T> straight_through(const Tensor<T>& f, const QuantizedFeatureMap<T>& q,
                           const Tensor<T>* offset) {
  if (!offset) return q.embeddings;
  Tensor<T> st = f;
  st += *offset;
  return st;
}

}  // namespace detail

/// Training forward pass (caches activations for backward).
template <typename T>
ForwardResult<T> forward(DadaModel<T>& m, const Tensor<T>& input,
                         LinearizationPins<T>* pins = nullptr) {
  m.check_input(input);
  const bool use = pins && pins->recorded;
  const int G = m.config().groups();
  ForwardResult<T> r;
  r.f1 = m.encoder1().forward(input);
  r.f2 = m.encoder2().forward(r.f1);
  r.q1 = detail::quantize_pinned(r.f2, m.vq1(), use ? &pins->idx1 : nullptr);
  r.q1_st = detail::straight_through(r.f2, r.q1, use ? &pins->offset1 : nullptr);
  r.fu = m.mid_decoder().forward(r.q1_st);
  r.fr = reorder_concat(r.f1, r.fu, G);
  r.q2 = detail::quantize_pinned(r.fr, m.vq2(), use ? &pins->idx2 : nullptr);
  r.q2_st = detail::straight_through(r.fr, r.q2, use ? &pins->offset2 : nullptr);
  const Tensor<T> out = m.decoder().forward(decoder_input(r.q1_st, r.q2_st, G));
  r.image_out = slice_channels(out, 0, kRgbChannels);
  r.depth_out = slice_channels(out, kRgbChannels, kDepthChannels);
  if (pins && !pins->recorded) {
    pins->recorded = true;
    pins->idx1 = r.q1.indices;
    pins->idx2 = r.q2.indices;
    pins->offset1 = r.q1.embeddings;
    pins->offset1 -= r.f2;
    pins->offset2 = r.q2.embeddings;
    pins->offset2 -= r.fr;
    pins->sg_f2 = r.f2;
    pins->sg_q1 = r.q1.embeddings;
    pins->sg_fr = r.fr;
    pins->sg_q2 = r.q2.embeddings;
  }
  return r;
}

// ---- loss -----------------------------------------------------------------------------

struct LossTerms {
  double depth = 0.0;      // lambda_D * L2(D, D_o)
  double image = 0.0;      // lambda_I * L2(I, I_o)
  double codebook1 = 0.0;  // L2(sg[f2], Q1)
  double commit1 = 0.0;    // lambda_K * L2(f2, sg[Q1])
  double codebook2 = 0.0;  // L2(sg[f1 / fR], Q2)
  double commit2 = 0.0;    // lambda_K * L2(f1 / fR, sg[Q2])
  double total = 0.0;

  double reconstruction() const { return depth + image; }
  bool finite() const {
    return std::isfinite(depth) && std::isfinite(image) && std::isfinite(codebook1) &&
           std::isfinite(commit1) && std::isfinite(codebook2) && std::isfinite(commit2) &&
           std::isfinite(total);
  }
  std::string str() const {
    return "total=" + format_number(total) + " depth=" + format_number(depth) +
           " image=" + format_number(image) + " codebook1=" + format_number(codebook1) +
           " commit1=" + format_number(commit1) + " codebook2=" + format_number(codebook2) +
           " commit2=" + format_number(commit2);
  }
};

/// Loss value and the gradients it injects into the network.
template <typename T>
struct LossResult {
  LossTerms terms;
  Tensor<T> d_image_out;
  Tensor<T> d_depth_out;
  Tensor<T> d_f2;   // commitment, level 1
  Tensor<T> d_q1;   // codebook, level 1 (w.r.t. selected embeddings)
  Tensor<T> d_fr;   // commitment, level 2
  Tensor<T> d_q2;   // codebook, level 2
};

/// Channels of fR that come from f1 in the reordered layout.
inline std::vector<int> f1_channels_in_fr(const DadaConfig& cfg) {
  const int G = cfg.groups();
  const int per_a = cfg.f1_channels() / G;
  const int per_b = (cfg.embedding_dim - cfg.f1_channels()) / G;
  std::vector<int> ch;
  for (int g = 0; g < G; ++g)
    for (int i = 0; i < per_a; ++i) ch.push_back(g * (per_a + per_b) + i);
  return ch;
}

namespace detail {

/// Weighted mean of squared differences over the selected channels (all
/// channels when `channels` is empty), with gradient w.r.t. `a`.
template <typename T>
double masked_mse(const Tensor<T>& a, const Tensor<T>& b, const std::vector<int>& channels,
                  double weight, Tensor<T>* grad_a) {
  a.require_same_shape(b, "dada loss");
  std::vector<int> all;
  const std::vector<int>* ch = &channels;
  if (channels.empty()) {
    all.resize(a.c());
    std::iota(all.begin(), all.end(), 0);
    ch = &all;
  }
  const std::size_t p = a.shape().plane();
  const double count = static_cast<double>(a.n()) * ch->size() * p;
  double sum = 0.0;
  if (grad_a) *grad_a = Tensor<T>(a.shape());
  for (int b_ = 0; b_ < a.n(); ++b_)
    for (int c : *ch) {
      const T* pa = a.plane(b_, c);
      const T* pb = b.plane(b_, c);
      T* g = grad_a ? grad_a->plane(b_, c) : nullptr;
      for (std::size_t i = 0; i < p; ++i) {
        const double d = static_cast<double>(pa[i]) - static_cast<double>(pb[i]);
        sum += d * d;
        if (g) g[i] = static_cast<T>(2.0 * weight * d / count);
      }
    }
  return weight * sum / count;
}

}  // namespace detail

/// Reconstruction plus two-level codebook/commitment loss. `image` and
/// `depth` are the clean targets. When pins are supplied and recorded,
/// stop-gradient operands come from the pinned pass.
template <typename T>
LossResult<T> dada_loss(const Tensor<T>& image, const Tensor<T>& depth,
                        const ForwardResult<T>& r, const DadaConfig& cfg,
                        const LinearizationPins<T>* pins = nullptr) {
  const bool use = pins && pins->recorded;
  const Tensor<T>& sg_f2 = use ? pins->sg_f2 : r.f2;
  const Tensor<T>& sg_q1 = use ? pins->sg_q1 : r.q1.embeddings;
  const Tensor<T>& sg_fr = use ? pins->sg_fr : r.fr;
  const Tensor<T>& sg_q2 = use ? pins->sg_q2 : r.q2.embeddings;
  const std::vector<int> second =
      cfg.strict_first_level_terms ? f1_channels_in_fr(cfg) : std::vector<int>{};

  LossResult<T> out;
  LossTerms& t = out.terms;
  t.depth = detail::masked_mse(r.depth_out, depth, {}, cfg.lambda_depth, &out.d_depth_out);
  t.image = detail::masked_mse(r.image_out, image, {}, cfg.lambda_image, &out.d_image_out);
  t.codebook1 = detail::masked_mse(r.q1.embeddings, sg_f2, {}, 1.0, &out.d_q1);
  t.commit1 = detail::masked_mse(r.f2, sg_q1, {}, cfg.lambda_commit, &out.d_f2);
  t.codebook2 = detail::masked_mse(r.q2.embeddings, sg_fr, second, 1.0, &out.d_q2);
  t.commit2 = detail::masked_mse(r.fr, sg_q2, second, cfg.lambda_commit, &out.d_fr);
  t.total = t.depth + t.image + t.codebook1 + t.commit1 + t.codebook2 + t.commit2;
  return out;
}

/// Backpropagates a loss through the cached forward pass, accumulating
/// parameter and codebook gradients.
template <typename T>
void backward(DadaModel<T>& m, const ForwardResult<T>& r, const LossResult<T>& loss) {
  const int G = m.config().groups();
  const int E1 = r.f1.c();
  const int EU = r.fu.c();
  const int E = m.config().embedding_dim;

  Tensor<T> d_out = concat_channels(loss.d_image_out, loss.d_depth_out);
  const Tensor<T> d_dec_in = m.decoder().backward(d_out);
  auto [d_up_q1, d_q2_st] = reorder_concat_backward(d_dec_in, E, E, G);
  Tensor<T> d_q1_st = nn::upsample_nearest_backward(d_up_q1, 2);

  // Q2 straight-through onto fR, plus the commitment gradient.
  Tensor<T> d_fr = std::move(d_q2_st);
  d_fr += loss.d_fr;
  auto [d_f1, d_fu] = reorder_concat_backward(d_fr, E1, EU, G);

  d_q1_st += m.mid_decoder().backward(d_fu);
  // Q1 straight-through onto f2, plus the commitment gradient.
  Tensor<T> d_f2 = std::move(d_q1_st);
  d_f2 += loss.d_f2;
  d_f1 += m.encoder2().backward(d_f2);
  m.encoder1().backward(d_f1);

  nn::accumulate_codebook_grad(r.q1.indices, loss.d_q1, m.vq1());
  nn::accumulate_codebook_grad(r.q2.indices, loss.d_q2, m.vq2());
}

// ---- checkpoints -------------------------------------------------------------------

inline std::string dada_header(const DadaConfig& cfg) {
  KeyValues kv = cfg.to_key_values();
  kv["kind"] = "dada";
  return format_key_values(kv);
}

template <typename T>
void save_checkpoint(const std::string& path, DadaModel<T>& m,
                     const nn::ParamStore<T>* optimizer = nullptr) {
  const auto params = m.parameters();
  nn::save_archive<T>(path, dada_header(m.config()), params, optimizer);
}

inline DadaConfig read_checkpoint_config(const nn::Archive& a, const std::string& path) {
  const KeyValues kv = parse_key_values(a.header, path);
  const auto kind = kv.find("kind");
  if (kind == kv.end() || kind->second != "dada")
    throw IoError(path, "not a DADA checkpoint");
  DadaConfig cfg;
  cfg.apply(kv);
  cfg.validate();
  return cfg;
}

template <typename T>
std::unique_ptr<DadaModel<T>> load_checkpoint(const std::string& path,
                                              nn::ParamStore<T>* optimizer = nullptr) {
  const nn::Archive a = nn::read_archive(path);
  auto m = std::make_unique<DadaModel<T>>(read_checkpoint_config(a, path));
  const auto params = m->parameters();
  nn::load_archive<T>(a, params, optimizer);
  return m;
}

// ---- stage-1 training ------------------------------------------------------------------

struct TrainHyper {
  int iterations = 2000;
  int batch_size = 8;
  double learning_rate = 2e-4;
  std::uint64_t seed = 0;
  int log_every = 0;  // 0: silent
};

struct TrainLog {
  std::vector<LossTerms> curve;
  std::vector<std::size_t> usage1;
  std::vector<std::size_t> usage2;
};

/// Assembles a batch by index from a pre-stacked (N, 4, H, W) corpus.
template <typename T>
Tensor<T> gather_batch(const Tensor<T>& corpus, std::span<const int> idx) {
  Tensor<T> out(static_cast<int>(idx.size()), corpus.c(), corpus.h(), corpus.w());
  const std::size_t per = static_cast<std::size_t>(corpus.c()) * corpus.shape().plane();
  for (std::size_t b = 0; b < idx.size(); ++b)
    std::copy_n(corpus.data() + per * idx[b], per, out.data() + per * b);
  return out;
}

/// Adam on the full loss over uniformly sampled mini-batches.
template <typename T>
TrainLog train_stage1(DadaModel<T>& m, const Tensor<T>& corpus, const TrainHyper& hyper,
                      const std::function<void(int, const LossTerms&)>& on_log = {}) {
  if (corpus.n() == 0) throw ArgumentError("train_stage1: empty corpus");
  if (hyper.batch_size < 1 || hyper.iterations < 0)
    throw ArgumentError("train_stage1: invalid batch size or iteration count");
  m.check_input(corpus);
  Rng rng(hyper.seed);
  nn::ParamStore<T> store(m.parameters());
  nn::AdamConfig adam;
  adam.lr = hyper.learning_rate;
  TrainLog log;
  log.curve.reserve(hyper.iterations);
  std::vector<int> idx(hyper.batch_size);
  log.usage1.assign(m.config().codebook1_size, 0);
  log.usage2.assign(m.config().codebook2_size, 0);
  for (int it = 0; it < hyper.iterations; ++it) {
    for (auto& i : idx) i = static_cast<int>(rng.below(static_cast<std::uint64_t>(corpus.n())));
    const Tensor<T> batch = gather_batch(corpus, idx);
    const Tensor<T> image = slice_channels(batch, 0, kRgbChannels);
    const Tensor<T> depth = slice_channels(batch, kRgbChannels, kDepthChannels);
    store.zero_grad();
    const ForwardResult<T> r = forward(m, batch);
    const LossResult<T> loss = dada_loss(image, depth, r, m.config());
    if (!loss.terms.finite())
      throw NumericError("stage-1 loss not finite at iteration " + std::to_string(it) + ": " +
                         loss.terms.str());
    backward(m, r, loss);
    nn::adam_step(store, adam);
    log.curve.push_back(loss.terms);
    for (int k : r.q1.indices) ++log.usage1[k];
    for (int k : r.q2.indices) ++log.usage2[k];
    if (on_log && hyper.log_every > 0 && (it % hyper.log_every == 0 || it + 1 == hyper.iterations))
      on_log(it, loss.terms);
  }
  return log;
}

}  // namespace tdsr::dada
