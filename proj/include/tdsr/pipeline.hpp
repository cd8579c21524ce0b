#pragma once

// Second stage: feature-space anomaly synthesis on top of a frozen DADA,
// subspace restriction, object-specific decoding, the anomaly detection
// head, and image-level scoring.

#include <cmath>
#include <cstring>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "tdsr/dada.hpp"
#include "tdsr/depthsim.hpp"
#include "tdsr/nn/module.hpp"

namespace tdsr::pipeline {

using dada::DadaConfig;
using dada::DadaModel;
using nn::Param;
using nn::Sequential;

struct Stage2Config {
  int restriction_hidden = 64;
  int head_width = 16;
  double focal_gamma = 2.0;
  double focal_alpha = 0.75;
  double mask_threshold = 0.5;
  int lattice_min_pow = 1;
  int lattice_max_pow = 3;
  /// Fraction of training samples that receive a synthetic anomaly.
  double anomaly_probability = 0.5;
  double sigma = 4.0;
  /// Project restored features back onto the codebooks before decoding.
  bool requantize = false;

  void validate() const {
    if (restriction_hidden < 1 || head_width < 1)
      throw ConfigError("stage2: widths must be >= 1");
    if (focal_gamma < 0.0) throw ConfigError("stage2.focal_gamma must be >= 0");
    if (!(focal_alpha >= 0.0 && focal_alpha <= 1.0))
      throw ConfigError("stage2.focal_alpha must lie in [0,1]");
    if (!(mask_threshold >= 0.0 && mask_threshold < 1.0))
      throw ConfigError("stage2.mask_threshold must lie in [0,1)");
    if (lattice_min_pow < 0 || lattice_max_pow < lattice_min_pow)
      throw ConfigError("stage2 lattice range is empty");
    if (!(anomaly_probability >= 0.0 && anomaly_probability <= 1.0))
      throw ConfigError("stage2.anomaly_probability must lie in [0,1]");
    if (!(sigma > 0.0)) throw ConfigError("stage2.sigma must be > 0");
  }

  depthsim::LatticeRange lattice() const { return {lattice_min_pow, lattice_max_pow}; }

  KeyValues to_key_values() const {
    return {{"stage2.restriction_hidden", std::to_string(restriction_hidden)},
            {"stage2.head_width", std::to_string(head_width)},
            {"stage2.focal_gamma", format_number(focal_gamma)},
            {"stage2.focal_alpha", format_number(focal_alpha)},
            {"stage2.mask_threshold", format_number(mask_threshold)},
            {"stage2.lattice_min_pow", std::to_string(lattice_min_pow)},
            {"stage2.lattice_max_pow", std::to_string(lattice_max_pow)},
            {"stage2.anomaly_probability", format_number(anomaly_probability)},
            {"stage2.sigma", format_number(sigma)},
            {"stage2.requantize", requantize ? "true" : "false"}};
  }

  void apply(const KeyValues& kv) {
    for (const auto& [k, v] : kv) {
      if (k == "stage2.restriction_hidden") restriction_hidden = static_cast<int>(parse_int(k, v));
      else if (k == "stage2.head_width") head_width = static_cast<int>(parse_int(k, v));
      else if (k == "stage2.focal_gamma") focal_gamma = parse_double(k, v);
      else if (k == "stage2.focal_alpha") focal_alpha = parse_double(k, v);
      else if (k == "stage2.mask_threshold") mask_threshold = parse_double(k, v);
      else if (k == "stage2.lattice_min_pow") lattice_min_pow = static_cast<int>(parse_int(k, v));
      else if (k == "stage2.lattice_max_pow") lattice_max_pow = static_cast<int>(parse_int(k, v));
      else if (k == "stage2.anomaly_probability") anomaly_probability = parse_double(k, v);
      else if (k == "stage2.sigma") sigma = parse_double(k, v);
      else if (k == "stage2.requantize") requantize = parse_bool(k, v);
    }
  }

  static bool knows(const std::string& key) {
    static const Stage2Config probe;
    return probe.to_key_values().count(key) != 0;
  }
};

// ---- mask resampling ---------------------------------------------------------------

/// Nearest-neighbour downsampling by an integer factor: cell (i, j) takes
/// the pixel at (factor*i + factor/2, factor*j + factor/2).
inline BinaryMask downsample_nearest(const BinaryMask& m, int factor) {
  if (factor < 1 || m.width % factor || m.height % factor)
    throw ShapeError("mask downsample: extent not divisible by " + std::to_string(factor));
  BinaryMask out(m.width / factor, m.height / factor, 0);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      out.at(x, y) = m.at(factor * x + factor / 2, factor * y + factor / 2);
  return out;
}

inline BinaryMask upsample_nearest(const BinaryMask& m, int factor) {
  BinaryMask out(m.width * factor, m.height * factor, 0);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x) out.at(x, y) = m.at(x / factor, y / factor);
  return out;
}

// ---- anomaly injection ---------------------------------------------------------------

template <typename T>
struct InjectedFeatures {
  Tensor<T> q1a;
  Tensor<T> q2a;
  std::vector<BinaryMask> mask1;  // per sample, Q1 resolution
  std::vector<BinaryMask> mask2;  // per sample, Q2 resolution
};

/// Replaces features under each sample's mask by uniformly drawn codebook
/// entries. `masks` are at input resolution; an empty optional (or an all
/// zero mask) leaves the sample untouched.
template <typename T>
InjectedFeatures<T> inject_anomaly(const Tensor<T>& q1, const Tensor<T>& q2,
                                   const std::vector<std::optional<BinaryMask>>& masks,
                                   const nn::Codebook<T>& vq1, const nn::Codebook<T>& vq2,
                                   Rng& rng) {
  if (static_cast<int>(masks.size()) != q1.n() || q1.n() != q2.n())
    throw ShapeError("inject_anomaly: batch / mask count mismatch");
  InjectedFeatures<T> out{q1, q2, {}, {}};
  auto replace = [&](Tensor<T>& q, int b, const BinaryMask& m, const nn::Codebook<T>& cb) {
    if (q.c() != cb.dim()) throw ShapeError("inject_anomaly: codebook dim mismatch");
    for (int y = 0; y < q.h(); ++y)
      for (int x = 0; x < q.w(); ++x) {
        if (!m.at(x, y)) continue;
        const T* e = cb.entry(static_cast<int>(rng.below(static_cast<std::uint64_t>(cb.size()))));
        for (int c = 0; c < q.c(); ++c) q.at(b, c, y, x) = e[c];
      }
  };
  for (int b = 0; b < q1.n(); ++b) {
    const int f1 = masks[b] ? masks[b]->width / q1.w() : 1;
    const int f2 = masks[b] ? masks[b]->width / q2.w() : 1;
    BinaryMask m1(q1.w(), q1.h(), 0);
    BinaryMask m2(q2.w(), q2.h(), 0);
    if (masks[b]) {
      if (masks[b]->width != q1.w() * f1 || masks[b]->height != q1.h() * f1 ||
          masks[b]->width != q2.w() * f2 || masks[b]->height != q2.h() * f2)
        throw ShapeError("inject_anomaly: mask extent does not match feature maps");
      m1 = downsample_nearest(*masks[b], f1);
      m2 = downsample_nearest(*masks[b], f2);
    }
    replace(out.q1a, b, m1, vq1);
    replace(out.q2a, b, m2, vq2);
    out.mask1.push_back(std::move(m1));
    out.mask2.push_back(std::move(m2));
  }
  return out;
}

/// Pixels whose Q1 or Q2 cell was replaced.
inline BinaryMask injected_region(const BinaryMask& mask1, int factor1, const BinaryMask& mask2,
                                  int factor2) {
  BinaryMask a = upsample_nearest(mask1, factor1);
  const BinaryMask b = upsample_nearest(mask2, factor2);
  if (!a.same_extent(b)) throw ShapeError("injected_region: extent mismatch");
  for (std::size_t i = 0; i < a.values.size(); ++i) a.values[i] = a.values[i] || b.values[i];
  return a;
}

// ---- networks ---------------------------------------------------------------------------

/// E -> hidden -> E feature restoration at a fixed resolution.
template <typename T>
std::unique_ptr<Sequential<T>> make_restriction_net(int channels, int hidden) {
  auto s = std::make_unique<Sequential<T>>();
  s->add(nn::make_conv<T>(channels, hidden, 3, 1, 1, 1));
  s->template emplace<nn::ReLU<T>>();
  s->template emplace<nn::ResBlock<T>>(hidden, hidden, 1);
  s->template emplace<nn::ReLU<T>>();
  s->add(nn::make_conv<T>(hidden, channels, 3, 1, 1, 1));
  return s;
}

/// Two-level U-shaped segmentation network ending in a sigmoid.
template <typename T>
class DetectionHead final : public nn::Module<T> {
 public:
  DetectionHead(int in_channels, int width) : width_(width) {
    const int c = width;
    enc_.add(nn::make_conv<T>(in_channels, c, 3, 1, 1, 1));
    enc_.template emplace<nn::ReLU<T>>();
    enc_.add(nn::make_conv<T>(c, c, 3, 1, 1, 1));
    enc_.template emplace<nn::ReLU<T>>();

    down_.add(nn::make_conv<T>(c, 2 * c, 4, 2, 1, 1));
    down_.template emplace<nn::ReLU<T>>();
    down_.add(nn::make_conv<T>(2 * c, 2 * c, 3, 1, 1, 1));
    down_.template emplace<nn::ReLU<T>>();
    down_.template emplace<nn::Upsample<T>>(2);
    down_.add(nn::make_conv<T>(2 * c, c, 3, 1, 1, 1));
    down_.template emplace<nn::ReLU<T>>();

    out_.add(nn::make_conv<T>(2 * c, c, 3, 1, 1, 1));
    out_.template emplace<nn::ReLU<T>>();
    out_.add(nn::make_conv<T>(c, 1, 1, 1, 0, 1));
    out_.template emplace<nn::Sigmoid<T>>();
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    const Tensor<T> skip = enc_.forward(x);
    const Tensor<T> deep = down_.forward(skip);
    return out_.forward(concat_channels(skip, deep));
  }
  Tensor<T> infer(const Tensor<T>& x) const override {
    const Tensor<T> skip = enc_.infer(x);
    const Tensor<T> deep = down_.infer(skip);
    return out_.infer(concat_channels(skip, deep));
  }
  Tensor<T> backward(const Tensor<T>& dy) override {
    const Tensor<T> d = out_.backward(dy);
    Tensor<T> d_skip = slice_channels(d, 0, width_);
    d_skip += down_.backward(slice_channels(d, width_, width_));
    return enc_.backward(d_skip);
  }
  void collect(const std::string& prefix, std::vector<Param<T>*>& out) override {
    enc_.collect(prefix + "enc.", out);
    down_.collect(prefix + "down.", out);
    out_.collect(prefix + "out.", out);
  }
  void init(Rng& rng) override {
    enc_.init(rng);
    down_.init(rng);
    out_.init(rng);
  }
  void pin_activations(bool on) override {
    enc_.pin_activations(on);
    down_.pin_activations(on);
    out_.pin_activations(on);
  }

  /// The final 1x1 convolution, before the sigmoid.
  nn::Module<T>& logits_layer() { return out_[2]; }

 private:
  int width_;
  Sequential<T> enc_;
  Sequential<T> down_;
  Sequential<T> out_;
};

inline constexpr int kHeadInputChannels = 2 * dada::kInputChannels;

/// Frozen DADA plus the trainable second-stage networks.
template <typename T>
class StageTwoModel {
 public:
  StageTwoModel(std::unique_ptr<DadaModel<T>> dada, Stage2Config cfg)
      : dada_(std::move(dada)), cfg_(cfg) {
    if (!dada_) throw ConfigError("stage 2 needs a pretrained DADA model");
    cfg_.validate();
    const int E = dada_->config().embedding_dim;
    restrict1_ = make_restriction_net<T>(E, cfg_.restriction_hidden);
    restrict2_ = make_restriction_net<T>(E, cfg_.restriction_hidden);
    object_decoder_ = dada::make_image_decoder<T>(dada_->config());
    head_ = std::make_unique<DetectionHead<T>>(kHeadInputChannels, cfg_.head_width);
  }

  /// Random restriction/head weights; the object decoder starts as a copy
  /// of the general appearance decoder.
  void init(Rng& rng) {
    restrict1_->init(rng);
    restrict2_->init(rng);
    head_->init(rng);
    std::vector<Param<T>*> dst, src;
    object_decoder_->collect("obj.", dst);
    dada_->decoder().collect("dec.", src);
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i]->value = src[i]->value;
  }

  const Stage2Config& config() const noexcept { return cfg_; }
  DadaModel<T>& dada() noexcept { return *dada_; }
  const DadaModel<T>& dada() const noexcept { return *dada_; }
  Sequential<T>& restriction1() noexcept { return *restrict1_; }
  Sequential<T>& restriction2() noexcept { return *restrict2_; }
  Sequential<T>& object_decoder() noexcept { return *object_decoder_; }
  DetectionHead<T>& head() noexcept { return *head_; }
  const Sequential<T>& restriction1() const noexcept { return *restrict1_; }
  const Sequential<T>& restriction2() const noexcept { return *restrict2_; }
  const Sequential<T>& object_decoder() const noexcept { return *object_decoder_; }
  const DetectionHead<T>& head() const noexcept { return *head_; }

  std::vector<Param<T>*> trainable() {
    std::vector<Param<T>*> out;
    restrict1_->collect("r1.", out);
    restrict2_->collect("r2.", out);
    object_decoder_->collect("obj.", out);
    head_->collect("head.", out);
    return out;
  }

  std::vector<Param<T>*> all_parameters() {
    auto out = dada_->parameters();
    for (auto* p : trainable()) out.push_back(p);
    return out;
  }

 private:
  std::unique_ptr<DadaModel<T>> dada_;
  Stage2Config cfg_;
  std::unique_ptr<Sequential<T>> restrict1_;
  std::unique_ptr<Sequential<T>> restrict2_;
  std::unique_ptr<Sequential<T>> object_decoder_;
  std::unique_ptr<DetectionHead<T>> head_;
};

/// FNV-1a over the raw bytes of every parameter value.
template <typename T>
std::uint64_t parameter_checksum(std::span<Param<T>* const> params) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ull;
    }
  };
  for (const auto* p : params) {
    mix(p->name.data(), p->name.size());
    mix(p->value.data(), p->value.size() * sizeof(T));
  }
  return h;
}

namespace detail {

/// Nearest codebook entries; used by the optional re-quantization step.
template <typename T>
Tensor<T> project(const Tensor<T>& q, const nn::Codebook<T>& cb) {
  return nn::quantize(q, cb).embeddings;
}

template <typename T>
Tensor<T> head_input(const Tensor<T>& general, const Tensor<T>& object) {
  return concat_channels(general, object);
}

}  // namespace detail

// ---- scoring ---------------------------------------------------------------------------

struct ScoredResult {
  Grid<double> mask;           // M_out in [0, 1]
  Grid<double> smoothed_mask;  // Gaussian-smoothed M_out
  double image_score = 0.0;    // max of smoothed_mask
};

/// Half-sample symmetric reflection (d c b a | a b c d | d c b a), folded
/// as often as needed for any offset.
inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * n;
  int m = i % period;
  if (m < 0) m += period;
  return m < n ? m : period - 1 - m;
}

/// Normalized 1-D Gaussian taps for offsets -radius..radius.
inline std::vector<double> gaussian_kernel(double sigma, int radius) {
  if (radius < 0) throw ArgumentError("gaussian kernel: radius must be >= 0");
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = radius == 0 ? 1.0 : std::exp(-0.5 * (i / sigma) * (i / sigma));
    sum += k[i + radius];
  }
  for (auto& v : k) v /= sum;
  return k;
}

inline int default_radius(double sigma) { return static_cast<int>(std::ceil(4.0 * sigma)); }

/// Separable Gaussian filter with reflective borders.
inline Grid<double> gaussian_smooth(const Grid<double>& in, double sigma, int radius = -1) {
  if (!(sigma > 0.0)) throw ArgumentError("smoothing sigma must be > 0");
  if (radius < 0) radius = default_radius(sigma);
  const auto k = gaussian_kernel(sigma, radius);
  Grid<double> tmp(in.width, in.height);
  Grid<double> out(in.width, in.height);
  for (int y = 0; y < in.height; ++y)
    for (int x = 0; x < in.width; ++x) {
      double s = 0.0;
      for (int d = -radius; d <= radius; ++d) s += k[d + radius] * in.at(reflect_index(x + d, in.width), y);
      tmp.at(x, y) = s;
    }
  for (int y = 0; y < in.height; ++y)
    for (int x = 0; x < in.width; ++x) {
      double s = 0.0;
      for (int d = -radius; d <= radius; ++d) s += k[d + radius] * tmp.at(x, reflect_index(y + d, in.height));
      out.at(x, y) = s;
    }
  return out;
}

inline ScoredResult smooth_and_score(Grid<double> mask, double sigma, int radius = -1) {
  if (mask.values.empty()) throw ShapeError("smooth_and_score: empty mask");
  ScoredResult r;
  r.smoothed_mask = gaussian_smooth(mask, sigma, radius);
  r.image_score = *std::max_element(r.smoothed_mask.values.begin(), r.smoothed_mask.values.end());
  r.mask = std::move(mask);
  return r;
}

// ---- inference ---------------------------------------------------------------------------

/// Intermediate tensors of one inference pass.
template <typename T>
struct DetectTrace {
  Tensor<T> q1;
  Tensor<T> q2;
  Tensor<T> q1s;
  Tensor<T> q2s;
  Tensor<T> general;  // I_G | D_G
  Tensor<T> object;   // I_S | D_S
  Tensor<T> m_out;
};

/// Frozen forward over a batch. No anomaly injection on this path.
template <typename T>
DetectTrace<T> detect_batch(const StageTwoModel<T>& m, const Tensor<T>& input) {
  const auto& d = m.dada();
  const int G = d.config().groups();
  DetectTrace<T> t;
  const auto enc = dada::encode(d, input);
  auto q = dada::quantize_features(d, enc);
  t.q1 = std::move(q.q1.embeddings);
  t.q2 = std::move(q.q2.embeddings);
  t.q1s = m.restriction1().infer(t.q1);
  t.q2s = m.restriction2().infer(t.q2);
  Tensor<T> o1 = m.config().requantize ? detail::project(t.q1s, d.vq1()) : t.q1s;
  Tensor<T> o2 = m.config().requantize ? detail::project(t.q2s, d.vq2()) : t.q2s;
  t.object = m.object_decoder().infer(dada::decoder_input(o1, o2, G));
  t.general = dada::decode(d, t.q1, t.q2);
  t.m_out = m.head().infer(detail::head_input(t.general, t.object));
  return t;
}

template <typename T>
std::vector<ScoredResult> score_batch(const Tensor<T>& m_out, double sigma) {
  std::vector<ScoredResult> out;
  for (int b = 0; b < m_out.n(); ++b) {
    Grid<double> g(m_out.w(), m_out.h());
    const T* p = m_out.plane(b, 0);
    for (std::size_t i = 0; i < g.values.size(); ++i) g.values[i] = static_cast<double>(p[i]);
    out.push_back(smooth_and_score(std::move(g), sigma));
  }
  return out;
}

template <typename T>
ScoredResult detect(const StageTwoModel<T>& m, const RgbdSample& sample) {
  const auto t = detect_batch(m, dada::to_input<T>(sample));
  return score_batch(t.m_out, m.config().sigma).front();
}

/// Detects over many samples in fixed-size batches.
template <typename T>
std::vector<ScoredResult> detect_all(const StageTwoModel<T>& m,
                                     const std::vector<RgbdSample>& samples, int batch = 16) {
  std::vector<ScoredResult> out;
  for (std::size_t i = 0; i < samples.size(); i += batch) {
    std::vector<const RgbdSample*> ptrs;
    for (std::size_t j = i; j < std::min(samples.size(), i + batch); ++j) ptrs.push_back(&samples[j]);
    const auto t = detect_batch(m, dada::to_input<T>(std::span<const RgbdSample* const>(ptrs)));
    for (auto& r : score_batch(t.m_out, m.config().sigma)) out.push_back(std::move(r));
  }
  return out;
}

// ---- training ----------------------------------------------------------------------------

struct Stage2Terms {
  double restore1 = 0.0;  // L1(Q1S, Q1)
  double restore2 = 0.0;  // L1(Q2S, Q2)
  double object = 0.0;    // L2 of the object decoder to the clean input
  double focal = 0.0;
  double total = 0.0;
  int injected = 0;       // samples whose features were modified

  bool finite() const {
    return std::isfinite(restore1) && std::isfinite(restore2) && std::isfinite(object) &&
           std::isfinite(focal) && std::isfinite(total);
  }
  std::string str() const {
    return "total=" + format_number(total) + " restore1=" + format_number(restore1) +
           " restore2=" + format_number(restore2) + " object=" + format_number(object) +
           " focal=" + format_number(focal);
  }
};

/// Training tensors of one stage-2 step.
template <typename T>
struct Stage2Step {
  Tensor<T> input;
  Tensor<T> q1;
  Tensor<T> q2;
  InjectedFeatures<T> injected;
  Tensor<T> target;  // (N, 1, H, W) focal target
  Tensor<T> q1s;
  Tensor<T> q2s;
  Tensor<T> object;
  Tensor<T> general;
  Tensor<T> m_out;
  Stage2Terms terms;
};

/// Draws per-sample anomaly masks at input resolution, restricted to the
/// foreground (the whole image when a sample has none).
template <typename T>
std::vector<std::optional<BinaryMask>> draw_training_masks(
    std::span<const RgbdSample* const> batch, const Stage2Config& cfg, Rng& rng) {
  std::vector<std::optional<BinaryMask>> masks;
  for (const RgbdSample* s : batch) {
    if (rng.uniform() >= cfg.anomaly_probability) {
      masks.emplace_back();
      continue;
    }
    try {
      const BinaryMask* fg = s->foreground ? &*s->foreground : nullptr;
      masks.emplace_back(depthsim::generate_anomaly_mask(s->width(), s->height(),
                                                         cfg.mask_threshold, rng, fg,
                                                         cfg.lattice())
                             .mask);
    } catch (const DegenerateError&) {
      masks.emplace_back();
    }
  }
  return masks;
}

/// Forward, loss and backward for one batch; accumulates gradients into the
/// trainable parameters.
template <typename T>
Stage2Step<T> stage2_step(StageTwoModel<T>& m, std::span<const RgbdSample* const> batch, Rng& rng) {
  auto& d = m.dada();
  const auto& cfg = m.config();
  const int G = d.config().groups();
  Stage2Step<T> st;
  st.input = dada::to_input<T>(batch);
  const auto enc = dada::encode(d, st.input);
  auto q = dada::quantize_features(d, enc);
  st.q1 = std::move(q.q1.embeddings);
  st.q2 = std::move(q.q2.embeddings);

  const auto masks = draw_training_masks<T>(batch, cfg, rng);
  st.injected = inject_anomaly(st.q1, st.q2, masks, d.vq1(), d.vq2(), rng);
  const int f1 = st.input.w() / st.q1.w();
  const int f2 = st.input.w() / st.q2.w();
  st.target = Tensor<T>(st.input.n(), 1, st.input.h(), st.input.w());
  for (int b = 0; b < st.input.n(); ++b) {
    const BinaryMask region = injected_region(st.injected.mask1[b], f1, st.injected.mask2[b], f2);
    std::size_t on = 0;
    for (std::size_t i = 0; i < region.values.size(); ++i) {
      st.target.plane(b, 0)[i] = region.values[i] ? T(1) : T(0);
      on += region.values[i];
    }
    st.terms.injected += on > 0;
  }

  st.q1s = m.restriction1().forward(st.injected.q1a);
  st.q2s = m.restriction2().forward(st.injected.q2a);
  const Tensor<T> o1 = cfg.requantize ? detail::project(st.q1s, d.vq1()) : st.q1s;
  const Tensor<T> o2 = cfg.requantize ? detail::project(st.q2s, d.vq2()) : st.q2s;
  st.object = m.object_decoder().forward(dada::decoder_input(o1, o2, G));
  st.general = dada::decode(d, st.injected.q1a, st.injected.q2a);
  // The head sees both reconstructions as constants.
  st.m_out = m.head().forward(detail::head_input(st.general, st.object));

  const auto l_r1 = nn::l1(st.q1s, st.q1);
  const auto l_r2 = nn::l1(st.q2s, st.q2);
  const auto l_obj = nn::mse(st.object, st.input);
  const auto l_focal = nn::focal_loss(st.m_out, st.target, cfg.focal_gamma, cfg.focal_alpha);
  st.terms.restore1 = static_cast<double>(l_r1.value);
  st.terms.restore2 = static_cast<double>(l_r2.value);
  st.terms.object = static_cast<double>(l_obj.value);
  st.terms.focal = static_cast<double>(l_focal.value);
  st.terms.total = st.terms.restore1 + st.terms.restore2 + st.terms.object + st.terms.focal;
  if (!st.terms.finite()) return st;

  m.head().backward(l_focal.grad);
  const Tensor<T> d_in = m.object_decoder().backward(l_obj.grad);
  const int E = d.config().embedding_dim;
  auto [d_up1, d_q2s] = dada::reorder_concat_backward(d_in, E, E, G);
  // Re-quantization passes gradients straight through.
  Tensor<T> d_q1s = nn::upsample_nearest_backward(d_up1, 2);
  d_q1s += l_r1.grad;
  d_q2s += l_r2.grad;
  m.restriction1().backward(d_q1s);
  m.restriction2().backward(d_q2s);
  return st;
}

struct Stage2Hyper {
  int iterations = 2000;
  int batch_size = 8;
  double learning_rate = 2e-4;
  std::uint64_t seed = 0;
  int log_every = 0;
};

struct Stage2Log {
  std::vector<Stage2Terms> curve;
};

template <typename T>
Stage2Log train_stage2(StageTwoModel<T>& m, const std::vector<RgbdSample>& data,
                       const Stage2Hyper& hyper,
                       const std::function<void(int, const Stage2Terms&)>& on_log = {}) {
  if (data.empty()) throw ArgumentError("train_stage2: empty dataset");
  if (hyper.batch_size < 1 || hyper.iterations < 0)
    throw ArgumentError("train_stage2: invalid batch size or iteration count");
  auto frozen = m.dada().parameters();
  const std::uint64_t before = parameter_checksum<T>(frozen);
  Rng rng(hyper.seed);
  nn::ParamStore<T> store(m.trainable());
  nn::AdamConfig adam;
  adam.lr = hyper.learning_rate;
  Stage2Log log;
  std::vector<const RgbdSample*> batch(hyper.batch_size);
  for (int it = 0; it < hyper.iterations; ++it) {
    for (auto& p : batch) p = &data[rng.below(data.size())];
    store.zero_grad();
    const auto st = stage2_step(m, std::span<const RgbdSample* const>(batch), rng);
    if (!st.terms.finite())
      throw NumericError("stage-2 loss not finite at iteration " + std::to_string(it) + ": " +
                         st.terms.str());
    nn::adam_step(store, adam);
    log.curve.push_back(st.terms);
    if (on_log && hyper.log_every > 0 && (it % hyper.log_every == 0 || it + 1 == hyper.iterations))
      on_log(it, st.terms);
  }
  if (parameter_checksum<T>(frozen) != before)
    throw Error("stage 2 modified frozen DADA parameters");
  return log;
}

// ---- checkpoints --------------------------------------------------------------------------

inline std::string stage2_header(const DadaConfig& dc, const Stage2Config& sc) {
  KeyValues kv = dc.to_key_values();
  for (auto& [k, v] : sc.to_key_values()) kv[k] = v;
  kv["kind"] = "3dsr";
  return format_key_values(kv);
}

template <typename T>
void save_checkpoint(const std::string& path, StageTwoModel<T>& m) {
  const auto params = m.all_parameters();
  nn::save_archive<T>(path, stage2_header(m.dada().config(), m.config()), params);
}

template <typename T>
std::unique_ptr<StageTwoModel<T>> load_checkpoint(const std::string& path) {
  const nn::Archive a = nn::read_archive(path);
  const KeyValues kv = parse_key_values(a.header, path);
  const auto kind = kv.find("kind");
  if (kind == kv.end() || kind->second != "3dsr") throw IoError(path, "not a 3DSR checkpoint");
  DadaConfig dc;
  dc.apply(kv);
  Stage2Config sc;
  sc.apply(kv);
  auto m = std::make_unique<StageTwoModel<T>>(std::make_unique<DadaModel<T>>(dc), sc);
  const auto params = m->all_parameters();
  nn::load_archive<T>(a, params);
  return m;
}

}  // namespace tdsr::pipeline
