#pragma once

#include "pxseg/ops.hpp"

#include <array>
#include <string>

namespace pxseg {

struct LossWeights {
  double lambda1 = 0.5;  // adversarial
  double lambda2 = 1.0;  // invertibility
  double lambda3 = 10.0; // smoothness
  double lambda4 = 1.0;  // diversity

  void validate() const {
    require(lambda1 >= 0 && lambda2 >= 0 && lambda3 >= 0 && lambda4 >= 0,
            "LossWeights: weights must be nonnegative");
  }
};

struct LossReport {
  double seg = 0, adv = 0, inv = 0, smt = 0, div = 0, total = 0;
};

/// Eq-style affine combination of the five terms. The diversity term enters
/// negated so the whole objective is a minimization for G and S.
inline LossReport total_loss(double seg, double adv, double inv, double smt, double div,
                             const LossWeights& w) {
  w.validate();
  LossReport r;
  r.seg = seg;
  r.adv = adv;
  r.inv = inv;
  r.smt = smt;
  r.div = div;
  r.total = seg + w.lambda1 * adv + w.lambda2 * inv + w.lambda3 * smt - w.lambda4 * div;
  return r;
}

constexpr double kDiceEps = 1.0;
constexpr double kProbClampLo = 1e-7;
constexpr double kProbClampHi = 1.0 - 1e-7;

// ---- soft Dice ----

/// 1 - mean over classes of (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps).
/// Differentiable in both arguments.
template <class S>
Var dice_loss_op(Graph<S>& g, Var pred, Var target, S eps = S(kDiceEps)) {
  const auto ps = g.shape(pred);
  require(ps == g.shape(target), "dice_loss: shape mismatch");
  const int C = ps.channels;
  const long n = ps.dims.voxels();
  const VecX<S>& p = g.value(pred);
  const VecX<S>& t = g.value(target);

  auto inter = std::make_shared<std::vector<S>>(C);
  auto denom = std::make_shared<std::vector<S>>(C);
  S loss = S(1);
  for (int c = 0; c < C; ++c) {
    const auto pc = p.segment(static_cast<long>(c) * n, n);
    const auto tc = t.segment(static_cast<long>(c) * n, n);
    (*inter)[c] = S(2) * (pc * tc).sum() + eps;
    (*denom)[c] = pc.sum() + tc.sum() + eps;
    loss -= (*inter)[c] / (*denom)[c] / S(C);
  }
  VecX<S> out(1);
  out[0] = loss;
  typename Graph<S>::Shape os{1, {1, 1, 1}};
  return g.push(os, std::move(out), g.any_requires({pred, target}),
                [pred, target, C, n, inter, denom](Graph<S>& gr, int self) {
                  const S go = gr.grad(self)[0];
                  const VecX<S>& p = gr.value(pred);
                  const VecX<S>& t = gr.value(target);
                  for (int c = 0; c < C; ++c) {
                    const S den = (*denom)[c];
                    const S num = (*inter)[c];
                    const S scale = -go / S(C) / (den * den);
                    const long off = static_cast<long>(c) * n;
                    if (gr.node(pred).requires_grad)
                      gr.grad(pred.id).segment(off, n) +=
                          scale * (S(2) * t.segment(off, n) * den - num);
                    if (gr.node(target).requires_grad)
                      gr.grad(target.id).segment(off, n) +=
                          scale * (S(2) * p.segment(off, n) * den - num);
                  }
                });
}

// ---- SSIM / MS-SSIM ----

struct SsimConfig {
  int window = 11;
  double sigma = 1.5;
  double c1 = 0.01 * 0.01;  // (K1 * L)^2, L = 1
  double c2 = 0.03 * 0.03;
  int scales = 3;
  std::array<double, 3> scale_weights{0.2, 0.3, 0.5};
};

namespace detail {

// Per-voxel window normalizer: Gaussian mass that falls inside the grid.
template <class S>
VecX<S> window_normalizer(Dims3 dims, const std::vector<S>& kernel) {
  VecX<S> ones = VecX<S>::Constant(dims.voxels(), S(1));
  VecX<S> out(dims.voxels()), scratch(dims.voxels());
  blur3(1, dims, kernel, ones.data(), out.data(), scratch.data());
  return out;
}

// Boundary-renormalized Gaussian window mean of each channel.
template <class S>
Var window_mean(Graph<S>& g, Var x, const std::vector<S>& kernel, Var norm) {
  Var blurred = gauss_blur(g, x, kernel);
  const int C = g.shape(x).channels;
  if (C == 1) return cdiv(g, blurred, norm);
  VecX<S> tiled(g.value(blurred).size());
  for (int c = 0; c < C; ++c)
    tiled.segment(static_cast<long>(c) * g.value(norm).size(), g.value(norm).size()) =
        g.value(norm);
  Var tiled_norm = g.constant(g.shape(x), std::move(tiled));
  return cdiv(g, blurred, tiled_norm);
}

}  // namespace detail

/// Mean local SSIM at one scale; inputs are (C, dims) nodes in [0, 1].
template <class S>
Var ssim_op(Graph<S>& g, Var x, Var y, const SsimConfig& cfg = {}) {
  require(g.shape(x) == g.shape(y), "ssim: shape mismatch");
  const Dims3 dims = g.shape(x).dims;
  auto kernel = detail::gaussian_kernel<S>(cfg.window, static_cast<S>(cfg.sigma));
  Var norm = g.constant({1, dims}, detail::window_normalizer(dims, kernel));

  Var mu_x = detail::window_mean(g, x, kernel, norm);
  Var mu_y = detail::window_mean(g, y, kernel, norm);
  Var mu_xx = detail::window_mean(g, mul(g, x, x), kernel, norm);
  Var mu_yy = detail::window_mean(g, mul(g, y, y), kernel, norm);
  Var mu_xy = detail::window_mean(g, mul(g, x, y), kernel, norm);

  Var var_x = sub(g, mu_xx, mul(g, mu_x, mu_x));
  Var var_y = sub(g, mu_yy, mul(g, mu_y, mu_y));
  Var cov = sub(g, mu_xy, mul(g, mu_x, mu_y));

  const S c1 = static_cast<S>(cfg.c1), c2 = static_cast<S>(cfg.c2);
  Var num = mul(g, add_scalar(g, mul_scalar(g, mul(g, mu_x, mu_y), S(2)), c1),
                add_scalar(g, mul_scalar(g, cov, S(2)), c2));
  Var den = mul(g, add_scalar(g, add(g, mul(g, mu_x, mu_x), mul(g, mu_y, mu_y)), c1),
                add_scalar(g, add(g, var_x, var_y), c2));
  return mean_all(g, cdiv(g, num, den));
}

inline void check_msssim_dims(Dims3 dims, int scales) {
  const int min_extent = 2 << (scales - 1);  // 2 voxels at the smallest scale
  if (dims.H < min_extent || dims.W < min_extent || dims.D < min_extent)
    throw Error("ms_ssim: dims " + dims.str() + " too small for " + std::to_string(scales) +
                " scales; need >= " + std::to_string(min_extent) + " per axis");
}

/// Weighted average of per-scale SSIM scores; scales connected by 2x average
/// pooling.
template <class S>
Var ms_ssim_op(Graph<S>& g, Var x, Var y, const SsimConfig& cfg = {}) {
  check_msssim_dims(g.shape(x).dims, cfg.scales);
  std::vector<Var> scores;
  std::vector<S> weights;
  Var cx = x, cy = y;
  for (int s = 0; s < cfg.scales; ++s) {
    if (s > 0) {
      cx = avgpool2(g, cx);
      cy = avgpool2(g, cy);
    }
    scores.push_back(ssim_op(g, cx, cy, cfg));
    weights.push_back(static_cast<S>(cfg.scale_weights[s]));
  }
  return affine_combine(g, scores, weights);
}

/// SSIM loss mapped into [0, 1]: 1 - MS-SSIM.
template <class S>
Var ssim_loss_op(Graph<S>& g, Var x, Var y, const SsimConfig& cfg = {}) {
  return affine_combine(g, {ms_ssim_op(g, x, y, cfg)}, {S(-1)}, S(1));
}

// ---- adversarial terms ----

/// log D(a, b), probability clamped away from {0, 1}.
template <class S>
Var log_prob(Graph<S>& g, Var p) {
  return log_clamped(g, p, S(kProbClampLo), S(kProbClampHi));
}

/// log(1 - D(a, b)), clamped likewise.
template <class S>
Var log_one_minus(Graph<S>& g, Var p) {
  Var one_minus = add_scalar(g, mul_scalar(g, p, S(-1)), S(1));
  return log_clamped(g, one_minus, S(kProbClampLo), S(kProbClampHi));
}

/// Cross-entropy term of one labeled pair: s log D + (1 - s) log(1 - D).
template <class S>
Var pair_log_likelihood(Graph<S>& g, Var prob, int label) {
  require(label == 0 || label == 1, "pair label must be 0 or 1, got " + std::to_string(label));
  return label == 1 ? log_prob(g, prob) : log_one_minus(g, prob);
}

// ---- flow smoothness ----

/// Mean over voxels of the Frobenius norm of the forward-difference spatial
/// Jacobian; replicated edges make boundary differences vanish.
template <class S>
Var smoothness_op(Graph<S>& g, Var flow) {
  const auto fs = g.shape(flow);
  require(fs.channels == 3, "smoothness: flow must have 3 channels");
  const Dims3 dims = fs.dims;
  const long n = dims.voxels();
  const VecX<S>& f = g.value(flow);
  const std::array<long, 3> stride{static_cast<long>(dims.W) * dims.D, dims.D, 1};

  auto norms = std::make_shared<VecX<S>>(n);
  S total = S(0);
  long p = 0;
  for (int u = 0; u < dims.H; ++u)
    for (int v = 0; v < dims.W; ++v)
      for (int w = 0; w < dims.D; ++w, ++p) {
        const std::array<int, 3> pos{u, v, w};
        const std::array<int, 3> extent{dims.H, dims.W, dims.D};
        S sq = S(0);
        for (int comp = 0; comp < 3; ++comp) {
          const long base = static_cast<long>(comp) * n + p;
          for (int axis = 0; axis < 3; ++axis) {
            if (pos[axis] + 1 >= extent[axis]) continue;  // replicated edge
            const S d = f[base + stride[axis]] - f[base];
            sq += d * d;
          }
        }
        (*norms)[p] = std::sqrt(sq);
        total += (*norms)[p];
      }
  VecX<S> out(1);
  out[0] = total / S(n);
  typename Graph<S>::Shape os{1, {1, 1, 1}};
  return g.push(os, std::move(out), g.any_requires({flow}),
                [flow, dims, n, stride, norms](Graph<S>& gr, int self) {
                  if (!gr.node(flow).requires_grad) return;
                  const S go = gr.grad(self)[0];
                  const VecX<S>& f = gr.value(flow);
                  VecX<S>& df = gr.grad(flow.id);
                  long p = 0;
                  for (int u = 0; u < dims.H; ++u)
                    for (int v = 0; v < dims.W; ++v)
                      for (int w = 0; w < dims.D; ++w, ++p) {
                        if ((*norms)[p] <= S(0)) continue;  // subgradient 0 at the kink
                        const S coeff = go / (S(n) * (*norms)[p]);
                        const std::array<int, 3> pos{u, v, w};
                        const std::array<int, 3> extent{dims.H, dims.W, dims.D};
                        for (int comp = 0; comp < 3; ++comp) {
                          const long base = static_cast<long>(comp) * n + p;
                          for (int axis = 0; axis < 3; ++axis) {
                            if (pos[axis] + 1 >= extent[axis]) continue;
                            const S d = f[base + stride[axis]] - f[base];
                            df[base + stride[axis]] += coeff * d;
                            df[base] -= coeff * d;
                          }
                        }
                      }
                });
}

// ---- plain (non-training) metric wrappers ----

template <class S>
S ms_ssim_value(Dims3 dims, int channels, const VecX<S>& a, const VecX<S>& b,
                const SsimConfig& cfg = {}) {
  Graph<S> g;
  typename Graph<S>::Shape shape{channels, dims};
  Var va = g.constant(shape, a);
  Var vb = g.constant(shape, b);
  return g.scalar(ms_ssim_op(g, va, vb, cfg));
}

template <class S>
S ms_ssim(const Volume<S>& a, const Volume<S>& b, const SsimConfig& cfg = {}) {
  require(a.dims == b.dims, "ms_ssim: dims mismatch");
  return ms_ssim_value(a.dims, 1, a.data, b.data, cfg);
}

/// Channel-mean MS-SSIM as a similarity between soft segmentation maps.
template <class S>
S ms_ssim(const SegMap<S>& a, const SegMap<S>& b, const SsimConfig& cfg = {}) {
  require(a.dims == b.dims && a.classes == b.classes, "ms_ssim: segmap shape mismatch");
  return ms_ssim_value(a.dims, a.classes, a.soft, b.soft, cfg);
}

template <class S>
S ssim(const Volume<S>& a, const Volume<S>& b, const SsimConfig& cfg = {}) {
  require(a.dims == b.dims, "ssim: dims mismatch");
  Graph<S> g;
  typename Graph<S>::Shape shape{1, a.dims};
  return g.scalar(ssim_op(g, g.constant(shape, a.data), g.constant(shape, b.data), cfg));
}

template <class S>
S dice_loss(const SegMap<S>& pred, const SegMap<S>& target, S eps = S(kDiceEps)) {
  require(pred.dims == target.dims && pred.classes == target.classes,
          "dice_loss: shape mismatch");
  Graph<S> g;
  typename Graph<S>::Shape shape{pred.classes, pred.dims};
  return g.scalar(
      dice_loss_op(g, g.constant(shape, pred.soft), g.constant(shape, target.soft), eps));
}

// ---- round trips ----

template <class S>
struct RoundtripResult {
  Volume<S> reconstruction;
  S ms_ssim_score;
};

template <class S>
RoundtripResult<S> compose_roundtrip(const Volume<S>& input, const FlowField<S>& forward,
                                     const FlowField<S>& inverse) {
  Volume<S> rec = warp(warp(input, forward), inverse);
  S score = ms_ssim(input, rec);
  return {std::move(rec), score};
}

template <class S>
struct SegRoundtripResult {
  SegMap<S> reconstruction;
  S dice_loss_score;
};

template <class S>
SegRoundtripResult<S> compose_roundtrip(const SegMap<S>& input, const FlowField<S>& forward,
                                        const FlowField<S>& inverse) {
  SegMap<S> rec = warp(warp(input, forward), inverse);
  S score = dice_loss(rec, input);
  return {std::move(rec), score};
}

}  // namespace pxseg
