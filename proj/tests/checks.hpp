#pragma once

// Property checks shared by the unit tests and the acceptance runner. Each
// check compares library code against an independent reference.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "tdsr/config.hpp"
#include "tdsr/nn/gradcheck.hpp"

namespace tdsr::checks {

using nn::Module;
using Tensor64 = Tensor<double>;

inline Tensor64 random_tensor(Shape4 s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor64 t(s);
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

inline double dot(const Tensor64& a, const Tensor64& b) {
  a.require_same_shape(b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// ---- gradients ----------------------------------------------------------------------------

inline constexpr double kOpTolerance = 1e-4;
inline constexpr double kEndToEndTolerance = 1e-3;
inline constexpr double kStep = 1e-3;

struct GradCase {
  std::string name;
  double max_error = 0.0;
  double tolerance = kOpTolerance;
  std::size_t checked = 0;
  bool pass() const { return std::isfinite(max_error) && max_error < tolerance; }
};

inline nn::GradCheckOptions grad_options(Rng& rng, std::size_t max_coords = 0, double step = kStep) {
  nn::GradCheckOptions o;
  o.step = step;
  o.tolerance = 1.0;
  o.max_coords = max_coords;
  o.seed = rng.next_u64();
  return o;
}

/// Gradients of sum(w * m(x)) with respect to x and every parameter of m.
/// ReLU masks are pinned at the first forward pass so finite differences
/// stay inside one linear region.
inline GradCase module_case(std::string name, Module<double>& m, Shape4 in, Rng& rng,
                            std::size_t max_coords = 0) {
  m.init(rng);
  for (auto* p : m.parameters())
    for (auto& v : p->value.values()) v = rng.uniform(-0.5, 0.5);
  const Tensor64 x = random_tensor(in, rng);
  m.pin_activations(true);
  const Tensor64 w = random_tensor(m.forward(x).shape(), rng);
  auto params = m.parameters();
  const auto opt = grad_options(rng, max_coords);

  const auto in_report = nn::grad_check(
      [&](std::span<const double> v, std::vector<double>* g) {
        Tensor64 xi(in);
        std::copy(v.begin(), v.end(), xi.data());
        const double L = dot(m.forward(xi), w);
        if (g) {
          for (auto* p : params) p->zero_grad();
          const Tensor64 dx = m.backward(w);
          g->assign(dx.values().begin(), dx.values().end());
        }
        return L;
      },
      x.storage(), opt);
  const auto p_report = nn::grad_check_params([&] { return dot(m.forward(x), w); },
                                              [&] { m.backward(w); }, params, opt);
  m.pin_activations(false);
  GradCase c{std::move(name), std::max(in_report.max_relative_error, p_report.max_relative_error)};
  c.checked = in_report.checked + p_report.checked;
  return c;
}

/// Gradient of a scalar function given as value + analytic gradient.
inline GradCase function_case(std::string name, const nn::ScalarFn& fn, std::vector<double> x,
                              Rng& rng, double tolerance = kOpTolerance, double step = kStep) {
  const auto r = nn::grad_check(fn, std::move(x), grad_options(rng, 0, step));
  GradCase c{std::move(name), r.max_relative_error, tolerance};
  c.checked = r.checked;
  return c;
}

inline GradCase loss_case(std::string name,
                          const std::function<nn::LossValue<double>(const Tensor64&)>& loss,
                          const Tensor64& pred, Rng& rng, double step = kStep) {
  const Shape4 s = pred.shape();
  return function_case(
      std::move(name),
      [&, s](std::span<const double> v, std::vector<double>* g) {
        Tensor64 p(s);
        std::copy(v.begin(), v.end(), p.data());
        const auto l = loss(p);
        if (g) g->assign(l.grad.values().begin(), l.grad.values().end());
        return static_cast<double>(l.value);
      },
      pred.storage(), rng, kOpTolerance, step);
}

inline dada::DadaConfig tiny_dada_config(bool grouped) {
  dada::DadaConfig c;
  c.hidden = 4;
  c.residual_hidden = 2;
  c.residual_blocks = 1;
  c.codebook1_size = 8;
  c.codebook2_size = 8;
  c.embedding_dim = 8;
  c.grouped = grouped;
  return c;
}

/// Full two-level DADA loss, quantizer choices pinned by LinearizationPins.
inline GradCase dada_loss_case(const dada::DadaConfig& cfg, int n, int size, Rng& rng,
                               std::size_t max_coords) {
  dada::DadaModel<double> m(cfg);
  m.init(rng);
  const Tensor64 x = random_tensor({n, dada::kInputChannels, size, size}, rng, 0.0, 1.0);
  const Tensor64 image = slice_channels(x, 0, dada::kRgbChannels);
  const Tensor64 depth = slice_channels(x, dada::kRgbChannels, dada::kDepthChannels);
  dada::LinearizationPins<double> pins;
  m.pin_activations(true);
  dada::ForwardResult<double> last;
  dada::LossResult<double> last_loss;
  auto evaluate = [&] {
    last = dada::forward(m, x, &pins);
    last_loss = dada::dada_loss(image, depth, last, m.config(), &pins);
    return last_loss.terms.total;
  };
  auto params = m.parameters();
  const auto r = nn::grad_check_params(evaluate, [&] { dada::backward(m, last, last_loss); },
                                       params, grad_options(rng, max_coords));
  m.pin_activations(false);
  GradCase c{std::string("dada_loss") + (cfg.grouped ? "" : "_ungrouped"), r.max_relative_error,
             kEndToEndTolerance};
  c.checked = r.checked;
  return c;
}

/// Small RGB-D samples for stage-2 checks.
inline std::vector<RgbdSample> tiny_samples(int count, int size, std::uint64_t seed) {
  dataio::CorpusConfig cc;
  cc.count = count;
  cc.width = size;
  cc.height = size;
  cc.seed = seed;
  cc.lattice = {1, 2};
  return dataio::samples_of(dataio::build_synthetic_corpus(cc));
}

/// Stage-2 training loss over the trainable networks, injection and mask
/// draws replayed from a fixed seed on every evaluation. The head sees its
/// inputs as constants, so head parameters are checked against the focal
/// term and all others against the restoration and object terms.
/// Coordinates whose perturbation flips the sign of an L1 residual straddle
/// a kink and are skipped.
inline GradCase stage2_loss_case(Rng& rng, std::size_t max_coords) {
  auto d = std::make_unique<dada::DadaModel<double>>(tiny_dada_config(true));
  d->init(rng);
  pipeline::Stage2Config sc;
  sc.restriction_hidden = 4;
  sc.head_width = 2;
  sc.anomaly_probability = 1.0;
  pipeline::StageTwoModel<double> m(std::move(d), sc);
  m.init(rng);
  const auto samples = tiny_samples(2, 16, rng.next_u64());
  std::vector<const RgbdSample*> batch{&samples[0], &samples[1]};
  const std::uint64_t step_seed = rng.next_u64();
  m.restriction1().pin_activations(true);
  m.restriction2().pin_activations(true);
  m.object_decoder().pin_activations(true);
  m.head().pin_activations(true);
  struct Eval {
    pipeline::Stage2Terms terms;
    std::vector<bool> signs;
  };
  auto evaluate = [&] {
    Rng r(step_seed);
    const auto st = pipeline::stage2_step(m, std::span<const RgbdSample* const>(batch), r);
    Eval e{st.terms, {}};
    for (std::size_t i = 0; i < st.q1s.size(); ++i) e.signs.push_back(st.q1s[i] > st.q1[i]);
    for (std::size_t i = 0; i < st.q2s.size(); ++i) e.signs.push_back(st.q2s[i] > st.q2[i]);
    return e;
  };
  auto params = m.trainable();
  for (auto* p : params) p->zero_grad();
  // stage2_step backpropagates internally.
  const Eval base = evaluate();
  std::vector<Tensor64> analytic;
  for (auto* p : params) analytic.push_back(p->grad);

  GradCase c{"stage2_loss", 0.0, kEndToEndTolerance};
  const auto opt = grad_options(rng, max_coords);
  Rng pick(opt.seed);
  for (std::size_t t = 0; t < params.size(); ++t) {
    const bool head = params[t]->name.rfind("head.", 0) == 0;
    auto term = [&](const Eval& e) {
      return head ? e.terms.focal : e.terms.restore1 + e.terms.restore2 + e.terms.object;
    };
    Tensor64& v = params[t]->value;
    for (std::size_t i : nn::detail::pick_coords(v.size(), max_coords, pick)) {
      const double saved = v[i];
      v[i] = saved + opt.step;
      const Eval up = evaluate();
      v[i] = saved - opt.step;
      const Eval down = evaluate();
      v[i] = saved;
      if (up.signs != base.signs || down.signs != base.signs) continue;
      const double numeric = (term(up) - term(down)) / (2.0 * opt.step);
      c.max_error = std::max(c.max_error, nn::relative_error(analytic[t][i], numeric, opt.abs_floor));
      ++c.checked;
    }
  }
  return c;
}

/// Every differentiable operator on random small shapes drawn from `seed`.
inline std::vector<GradCase> gradient_suite(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<GradCase> out;
  {
    const int g = rng.uniform_int(1, 2);
    nn::ConvSpec s{g * rng.uniform_int(1, 2), g * rng.uniform_int(1, 3), rng.uniform_int(1, 4),
                   rng.uniform_int(1, 2), rng.uniform_int(0, 2), g};
    const int extent = rng.uniform_int(std::max(4, s.kernel), 7);
    nn::Conv2d<double> conv(s);
    out.push_back(module_case("conv2d", conv, {rng.uniform_int(1, 2), s.in_channels, extent, extent}, rng));
  }
  {
    nn::PartitionedConv2d<double> conv({3, 1}, {2, 1}, 3, 1, 1);
    out.push_back(module_case("partitioned_conv2d", conv, {1, 4, 5, 5}, rng));
  }
  {
    nn::ReLU<double> relu;
    out.push_back(module_case("relu", relu, {2, 2, 3, 3}, rng));
    nn::Sigmoid<double> sig;
    out.push_back(module_case("sigmoid", sig, {2, 2, 3, 3}, rng));
    nn::Upsample<double> up(rng.uniform_int(1, 3));
    out.push_back(module_case("upsample", up, {1, 2, 3, 2}, rng));
  }
  {
    nn::ResBlock<double> block(4, 2, 2);
    out.push_back(module_case("resblock", block, {1, 4, 4, 4}, rng));
    auto stack = nn::make_res_stack<double>(4, 2, 2, 2);
    out.push_back(module_case("res_stack", *stack, {1, 4, 4, 4}, rng));
  }
  {
    auto dec = dada::make_image_decoder<double>(tiny_dada_config(true));
    out.push_back(module_case("image_decoder", *dec, {1, 16, 2, 2}, rng, 40));
    auto net = pipeline::make_restriction_net<double>(8, 4);
    out.push_back(module_case("restriction_net", *net, {1, 8, 2, 2}, rng, 40));
    pipeline::DetectionHead<double> head(pipeline::kHeadInputChannels, 2);
    out.push_back(module_case("detection_head", head, {1, pipeline::kHeadInputChannels, 4, 4}, rng, 40));
  }
  {
    const int G = rng.uniform_int(1, 2);
    const Shape4 sa{1, 2 * G, 2, 2}, sb{1, 4 * G, 2, 2};
    const Tensor64 w = random_tensor({1, 6 * G, 2, 2}, rng);
    std::vector<double> x = random_tensor({1, 1, 1, static_cast<int>(sa.count() + sb.count())}, rng).storage();
    out.push_back(function_case(
        "reorder_concat",
        [&](std::span<const double> v, std::vector<double>* g) {
          Tensor64 a(sa), b(sb);
          std::copy_n(v.begin(), sa.count(), a.data());
          std::copy_n(v.begin() + sa.count(), sb.count(), b.data());
          const double L = dot(dada::reorder_concat(a, b, G), w);
          if (g) {
            auto [da, db] = dada::reorder_concat_backward(w, sa.c, sb.c, G);
            g->assign(da.values().begin(), da.values().end());
            g->insert(g->end(), db.values().begin(), db.values().end());
          }
          return L;
        },
        x, rng));
  }
  {
    const Tensor64 target = random_tensor({2, 1, 3, 3}, rng);
    // Residuals bounded away from zero keep L1 differentiable.
    Tensor64 pred = target;
    for (auto& v : pred.values()) v += (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.05, 1.0);
    out.push_back(loss_case("mse", [&](const Tensor64& p) { return nn::mse(p, target); }, pred, rng));
    out.push_back(loss_case("l1", [&](const Tensor64& p) { return nn::l1(p, target); }, pred, rng));
    Tensor64 prob = random_tensor({2, 1, 3, 3}, rng, 0.05, 0.95);
    Tensor64 bin(prob.shape());
    for (auto& v : bin.values()) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
    const double gamma = rng.uniform(0.0, 3.0), alpha = rng.uniform(0.1, 0.9);
    // (1 - p_t)^gamma with gamma < 1 has large third derivatives near p_t = 1;
    // a smaller step keeps the central-difference truncation below tolerance.
    out.push_back(loss_case("focal",
                            [&](const Tensor64& p) { return nn::focal_loss(p, bin, gamma, alpha); },
                            prob, rng, 1e-4));
  }
  {
    // Codebook rows through dequantization with fixed indices.
    nn::Codebook<double> cb("cb", 5, 3);
    cb.init(rng);
    std::vector<int> idx(2 * 2 * 3);
    for (auto& k : idx) k = static_cast<int>(rng.below(5));
    const Tensor64 w = random_tensor({2, 3, 2, 3}, rng);
    out.push_back(function_case(
        "dequantize",
        [&](std::span<const double> v, std::vector<double>* g) {
          std::copy(v.begin(), v.end(), cb.entries.value.data());
          const double L = dot(nn::dequantize(idx, cb, 2, 2, 3), w);
          if (g) {
            cb.entries.zero_grad();
            nn::accumulate_codebook_grad(idx, w, cb);
            g->assign(cb.entries.grad.values().begin(), cb.entries.grad.values().end());
          }
          return L;
        },
        cb.entries.value.storage(), rng));
  }
  out.push_back(dada_loss_case(tiny_dada_config(true), 2, 16, rng, 12));
  out.push_back(dada_loss_case(tiny_dada_config(false), 2, 16, rng, 12));
  out.push_back(stage2_loss_case(rng, 8));
  return out;
}

// ---- group isolation ------------------------------------------------------------------

struct IsolationResult {
  int models = 0;
  int rgb_unchanged = 0;      // f_I1 and f_IU bit-identical
  int f_i1_changed = 0;
  int depth_changed = 0;      // sanity: depth-group features did move
  int perturbation_retries = 0;
};

/// Perturbs only the depth channel of random inputs to random models and
/// compares the RGB-group halves of f1 and fU. The perturbation is shrunk
/// until the first-level code indices are unchanged, since fU reads the
/// jointly quantized Q1.
inline IsolationResult group_isolation(int models, bool grouped, std::uint64_t seed) {
  IsolationResult r;
  Rng rng(seed);
  for (int k = 0; k < models; ++k) {
    dada::DadaConfig cfg = tiny_dada_config(grouped);
    cfg.hidden = 8;
    cfg.codebook1_size = 32;
    cfg.embedding_dim = 16;
    dada::DadaModel<double> m(cfg);
    m.init(rng);
    const Tensor64 x = random_tensor({2, dada::kInputChannels, 16, 16}, rng, 0.0, 1.0);
    const auto e0 = dada::encode(m, x);
    const auto q0 = dada::quantize_features(m, e0);
    double eps = 1e-3;
    dada::Encoded<double> e1;
    dada::Quantized<double> q1;
    for (;;) {
      Tensor64 xp = x;
      for (int b = 0; b < x.n(); ++b) {
        double* p = xp.plane(b, dada::kRgbChannels);
        for (std::size_t i = 0; i < x.shape().plane(); ++i) p[i] += eps * rng.uniform(-1.0, 1.0);
      }
      e1 = dada::encode(m, xp);
      q1 = dada::quantize_features(m, e1);
      if (q1.q1.indices == q0.q1.indices) break;
      eps *= 0.1;
      ++r.perturbation_retries;
    }
    const int e1c = e0.f1.c(), euc = q0.fu.c();
    const bool f_i1_same = slice_channels(e0.f1, 0, e1c / 2) == slice_channels(e1.f1, 0, e1c / 2);
    const bool f_iu_same = slice_channels(q0.fu, 0, euc / 2) == slice_channels(q1.fu, 0, euc / 2);
    const bool depth_same = slice_channels(e0.f1, e1c / 2, e1c / 2) == slice_channels(e1.f1, e1c / 2, e1c / 2);
    ++r.models;
    r.rgb_unchanged += f_i1_same && f_iu_same;
    r.f_i1_changed += !f_i1_same;
    r.depth_changed += !depth_same;
  }
  return r;
}

// ---- quantizer ----------------------------------------------------------------------------

/// Nearest-code assignments of random (feature, codebook) pairs against an
/// exhaustive distance table. A third of the codebooks contain duplicated
/// entries and a third of the features equal an entry exactly.
inline int quantizer_mismatches(int pairs, std::uint64_t seed) {
  Rng rng(seed);
  int mismatches = 0;
  for (int t = 0; t < pairs; ++t) {
    const int K = rng.uniform_int(1, 64), E = rng.uniform_int(1, 16);
    nn::Codebook<double> cb("cb", K, E);
    for (auto& v : cb.entries.value.values()) v = rng.uniform(-1.0, 1.0);
    const int mode = static_cast<int>(rng.below(3));
    if (mode == 0 && K > 1) {
      const int src = static_cast<int>(rng.below(K - 1));
      const int dst = rng.uniform_int(src + 1, K - 1);
      std::copy_n(cb.entry(src), E, cb.entry(dst));
    }
    Tensor64 f(1, E, 1, 1);
    if (mode == 1) {
      const int k = static_cast<int>(rng.below(K));
      for (int c = 0; c < E; ++c) f[c] = cb.entry(k)[c];
    } else if (mode == 0 && K > 1) {
      // Exactly on the duplicated entry.
      int dup = -1;
      for (int a = 0; a < K && dup < 0; ++a)
        for (int b = a + 1; b < K; ++b)
          if (std::equal(cb.entry(a), cb.entry(a) + E, cb.entry(b))) {
            dup = a;
            break;
          }
      for (int c = 0; c < E; ++c) f[c] = cb.entry(dup)[c];
    } else {
      for (auto& v : f.values()) v = rng.uniform(-1.0, 1.0);
    }
    std::vector<double> dist(K);
    for (int k = 0; k < K; ++k) {
      double d = 0.0;
      for (int c = 0; c < E; ++c) d += (f[c] - cb.entry(k)[c]) * (f[c] - cb.entry(k)[c]);
      dist[k] = d;
    }
    const int want = static_cast<int>(std::min_element(dist.begin(), dist.end()) - dist.begin());
    mismatches += nn::quantize(f, cb).indices[0] != want;
  }
  return mismatches;
}

// ---- metric references ----------------------------------------------------------------

/// Counts every (positive, negative) pair.
inline double brute_auroc(const std::vector<double>& s, const std::vector<std::uint8_t>& l) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (l[i] && !l[j]) {
        pairs += 1.0;
        wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return wins / pairs;
}

/// 8-connected regions by repeated label propagation until fixpoint.
inline std::vector<std::vector<std::size_t>> brute_regions(const BinaryMask& m) {
  std::vector<int> lab(m.values.size());
  for (std::size_t i = 0; i < lab.size(); ++i) lab[i] = m.values[i] ? static_cast<int>(i) : -1;
  for (bool changed = true; changed;) {
    changed = false;
    for (int y = 0; y < m.height; ++y)
      for (int x = 0; x < m.width; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * m.width + x;
        if (lab[i] < 0) continue;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int qx = x + dx, qy = y + dy;
            if (qx < 0 || qy < 0 || qx >= m.width || qy >= m.height) continue;
            const std::size_t q = static_cast<std::size_t>(qy) * m.width + qx;
            if (lab[q] >= 0 && lab[q] < lab[i]) {
              lab[i] = lab[q];
              changed = true;
            }
          }
      }
  }
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < lab.size(); ++i)
    if (lab[i] >= 0) groups[lab[i]].push_back(i);
  std::vector<std::vector<std::size_t>> out;
  for (auto& [k, v] : groups) out.push_back(std::move(v));
  return out;
}

/// Sweeps every distinct score: at each threshold counts overlap per region
/// and false positives directly, then integrates PRO over FPR in [0, limit].
inline double brute_aupro(const std::vector<Grid<double>>& maps, const std::vector<BinaryMask>& gts,
                          double limit) {
  std::vector<double> scores;
  for (const auto& m : maps) scores.insert(scores.end(), m.values.begin(), m.values.end());
  std::sort(scores.begin(), scores.end(), std::greater<>());
  scores.erase(std::unique(scores.begin(), scores.end()), scores.end());
  std::vector<std::vector<std::vector<std::size_t>>> regions;
  double negatives = 0.0;
  for (const auto& g : gts) {
    regions.push_back(brute_regions(g));
    for (auto v : g.values) negatives += v == 0;
  }
  std::vector<double> fx{0.0}, fy{0.0};
  for (double t : scores) {
    double fp = 0.0, pro = 0.0, n = 0.0;
    for (std::size_t i = 0; i < maps.size(); ++i) {
      for (std::size_t p = 0; p < maps[i].values.size(); ++p)
        fp += gts[i].values[p] == 0 && maps[i].values[p] >= t;
      for (const auto& reg : regions[i]) {
        double hit = 0.0;
        for (auto p : reg) hit += maps[i].values[p] >= t;
        pro += hit / static_cast<double>(reg.size());
        n += 1.0;
      }
    }
    fx.push_back(fp / negatives);
    fy.push_back(pro / n);
  }
  double area = 0.0;
  for (std::size_t i = 1; i < fx.size() && fx[i - 1] < limit; ++i) {
    const double x1 = std::min(fx[i], limit);
    const double y1 = fx[i] == fx[i - 1] ? fy[i] : fy[i - 1] + (fy[i] - fy[i - 1]) * (x1 - fx[i - 1]) / (fx[i] - fx[i - 1]);
    area += (x1 - fx[i - 1]) * (fy[i - 1] + y1) / 2.0;
  }
  return area / limit;
}

struct MetricFixture {
  std::vector<Grid<double>> maps;
  std::vector<BinaryMask> gts;
  std::vector<double> image_scores;
  std::vector<std::uint8_t> image_labels;
};

/// Random maps and blob-shaped ground truth up to 16x16; scores drawn from a
/// few levels half of the time so ties are common.
inline MetricFixture random_fixture(Rng& rng) {
  MetricFixture f;
  const int images = rng.uniform_int(1, 4);
  const int w = rng.uniform_int(3, 16), h = rng.uniform_int(3, 16);
  const bool coarse = rng.uniform() < 0.5;
  auto draw = [&] { return coarse ? static_cast<double>(rng.below(6)) / 5.0 : rng.uniform(); };
  for (;;) {
    f.maps.clear();
    f.gts.clear();
    std::size_t pos = 0, neg = 0;
    for (int i = 0; i < images; ++i) {
      Grid<double> m(w, h);
      BinaryMask g(w, h, 0);
      const int blobs = static_cast<int>(rng.below(4));
      for (int b = 0; b < blobs; ++b) {
        const int cx = static_cast<int>(rng.below(w)), cy = static_cast<int>(rng.below(h));
        const int rx = rng.uniform_int(0, 3), ry = rng.uniform_int(0, 3);
        for (int y = std::max(0, cy - ry); y <= std::min(h - 1, cy + ry); ++y)
          for (int x = std::max(0, cx - rx); x <= std::min(w - 1, cx + rx); ++x)
            if (rng.uniform() < 0.85) g.at(x, y) = 1;
      }
      for (std::size_t p = 0; p < m.values.size(); ++p) {
        m.values[p] = draw();
        if (g.values[p] && rng.uniform() < 0.6) m.values[p] = std::min(1.0, m.values[p] + 0.4);
        (g.values[p] ? pos : neg) += 1;
      }
      f.maps.push_back(std::move(m));
      f.gts.push_back(std::move(g));
    }
    if (pos > 0 && neg > 0) break;
  }
  const int n = rng.uniform_int(2, 30);
  for (int i = 0; i < n; ++i) {
    f.image_scores.push_back(draw());
    f.image_labels.push_back(i < 2 ? static_cast<std::uint8_t>(i) : rng.uniform() < 0.5);
  }
  return f;
}

struct MetricDeviation {
  double auroc = 0.0;
  double pixel_auroc = 0.0;
  double aupro = 0.0;
  double max() const { return std::max({auroc, pixel_auroc, aupro}); }
};

inline MetricDeviation metric_deviation(int fixtures, std::uint64_t seed, double limit = 0.3) {
  Rng rng(seed);
  MetricDeviation d;
  for (int k = 0; k < fixtures; ++k) {
    const auto f = random_fixture(rng);
    d.auroc = std::max(d.auroc, std::abs(metrics::auroc(f.image_scores, f.image_labels) -
                                         brute_auroc(f.image_scores, f.image_labels)));
    std::vector<double> s;
    std::vector<std::uint8_t> l;
    for (std::size_t i = 0; i < f.maps.size(); ++i) {
      s.insert(s.end(), f.maps[i].values.begin(), f.maps[i].values.end());
      for (auto v : f.gts[i].values) l.push_back(v);
    }
    d.pixel_auroc = std::max(d.pixel_auroc, std::abs(metrics::pixel_auroc(f.maps, f.gts) - brute_auroc(s, l)));
    d.aupro = std::max(d.aupro, std::abs(metrics::aupro(f.maps, f.gts, limit) - brute_aupro(f.maps, f.gts, limit)));
  }
  return d;
}

// ---- simulation laws --------------------------------------------------------------------

struct SimulationLaws {
  int pairs = 0;
  int range_violations = 0;   // min != beta or max != alpha + beta
  double ks_alpha = 0.0;      // sup |F_n - F| of alpha against U(0,1)
  double ks_beta_ratio = 0.0; // beta / (1 - alpha) against U(0,1)
  int constraint_violations = 0;
};

inline double ks_uniform(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const double n = static_cast<double>(v.size());
  double d = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i)
    d = std::max({d, std::abs((i + 1) / n - v[i]), std::abs(v[i] - i / n)});
  return d;
}

inline SimulationLaws simulation_laws(int pairs, int draws, std::uint64_t seed) {
  Rng rng(seed);
  SimulationLaws r;
  for (int k = 0; k < pairs; ++k) {
    const auto field = depthsim::sample_perlin(16, 16, {1, 4}, rng);
    const auto p = depthsim::sample_depth_params(rng);
    const auto d = depthsim::simulate_depth(field, p);
    const auto [lo, hi] = std::minmax_element(d.depth.values.begin(), d.depth.values.end());
    ++r.pairs;
    r.range_violations += !(*lo == p.beta && *hi == p.alpha + p.beta);
  }
  std::vector<double> alpha, ratio;
  for (int k = 0; k < draws; ++k) {
    const auto p = depthsim::sample_depth_params(rng);
    alpha.push_back(p.alpha);
    ratio.push_back(p.beta / (1.0 - p.alpha));
    r.constraint_violations += !(p.alpha + p.beta < 1.0 && p.alpha > 0.0 && p.beta >= 0.0);
  }
  r.ks_alpha = ks_uniform(alpha);
  r.ks_beta_ratio = ks_uniform(ratio);
  return r;
}

// ---- preprocessing laws -----------------------------------------------------------------

struct PreprocessLaws {
  int patterns = 0;
  int rule_violations = 0;
  int idempotence_violations = 0;
  int planes = 0;
  double max_angle = 0.0;  // radians
};

inline PreprocessLaws preprocessing_laws(int planes, std::uint64_t seed) {
  Rng rng(seed);
  PreprocessLaws r;
  for (int pattern = 0; pattern < 512; ++pattern) {
    DepthImage in(3, 3);
    for (int i = 0; i < 9; ++i) {
      in.valid.values[i] = (pattern >> i) & 1;
      in.depth.values[i] = in.valid.values[i] ? rng.uniform() : 0.0;
    }
    const DepthImage out = dataio::fill_missing(in);
    ++r.patterns;
    bool ok = true;
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 3; ++x) {
        double want = in.depth.at(x, y);
        if (!in.valid.at(x, y)) {
          double sum = 0.0;
          int n = 0;
          for (int yy = std::max(0, y - 1); yy <= std::min(2, y + 1); ++yy)
            for (int xx = std::max(0, x - 1); xx <= std::min(2, x + 1); ++xx)
              if ((xx != x || yy != y) && in.valid.at(xx, yy)) {
                sum += in.depth.at(xx, yy);
                ++n;
              }
          want = n ? sum / n : 0.0;
        }
        ok = ok && std::abs(out.depth.at(x, y) - want) <= 1e-15 && out.valid.at(x, y);
      }
    r.rule_violations += !ok;
    const DepthImage twice = dataio::fill_missing(out);
    r.idempotence_violations += !(twice.depth == out.depth && twice.valid == out.valid);
  }
  for (int k = 0; k < planes; ++k) {
    // Unit normal within 0.3 rad of +z; points generated on n.p = offset.
    const double tilt = rng.uniform(0.0, 0.3), az = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double nx = std::sin(tilt) * std::cos(az), ny = std::sin(tilt) * std::sin(az), nz = std::cos(tilt);
    const double offset = rng.uniform(0.5, 2.0);
    const int w = rng.uniform_int(12, 24), h = rng.uniform_int(12, 24);
    dataio::SortedPointCloud c(w, h);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double px = 0.01 * x, py = 0.01 * y;
        c.set_point(x, y, {px, py, (offset - nx * px - ny * py) / nz});
      }
    c.refresh_validity();
    const auto plane = dataio::fit_background_plane(c, rng.uniform_int(1, 5));
    const double cosang = std::clamp(plane.normal[0] * nx + plane.normal[1] * ny + plane.normal[2] * nz, -1.0, 1.0);
    // acos loses precision near 1; the cross-product norm does not.
    const double cx = plane.normal[1] * nz - plane.normal[2] * ny;
    const double cy = plane.normal[2] * nx - plane.normal[0] * nz;
    const double cz = plane.normal[0] * ny - plane.normal[1] * nx;
    const double angle = std::atan2(std::sqrt(cx * cx + cy * cy + cz * cz), cosang);
    ++r.planes;
    r.max_angle = std::max(r.max_angle, angle);
  }
  return r;
}

}  // namespace tdsr::checks
