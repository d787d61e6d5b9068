#pragma once

#include "pxseg/volume.hpp"

#include <cmath>

namespace pxseg {

// Trilinear grid sampling with zero-padding semantics: every output voxel is
// the hat-weighted sum of the 8 neighbors of its sampling location d = b + f,
// and weights vanish outside the grid.

namespace detail {

template <class S>
S hat(S t) {
  const S a = std::abs(t);
  return a < S(1) ? S(1) - a : S(0);
}

// d/dt of hat(t). Subgradient 0 at |t| >= 1; at t == 0 the right-limit
// convention gives -1.
template <class S>
S hat_deriv(S t) {
  if (std::abs(t) >= S(1)) return S(0);
  return t >= S(0) ? S(-1) : S(1);
}

}  // namespace detail

/// Warps `channels` planes of `input` (channel-major over dims) by `flow`
/// (3 planes: du, dv, dw in voxel units). Output has the same layout.
template <class S>
void warp_forward(int channels, Dims3 dims, const S* input, const S* flow, S* output) {
  const long n = dims.voxels();
  const S* fu = flow;
  const S* fv = flow + n;
  const S* fw = flow + 2 * n;
  long p = 0;
  for (int u = 0; u < dims.H; ++u)
    for (int v = 0; v < dims.W; ++v)
      for (int w = 0; w < dims.D; ++w, ++p) {
        const S du = S(u) + fu[p];
        const S dv = S(v) + fv[p];
        const S dw = S(w) + fw[p];
        const int u0 = static_cast<int>(std::floor(du));
        const int v0 = static_cast<int>(std::floor(dv));
        const int w0 = static_cast<int>(std::floor(dw));
        for (int c = 0; c < channels; ++c) output[static_cast<long>(c) * n + p] = S(0);
        for (int a = 0; a < 2; ++a) {
          const int uu = u0 + a;
          if (uu < 0 || uu >= dims.H) continue;
          const S wu = detail::hat(du - S(uu));
          if (wu == S(0)) continue;
          for (int b = 0; b < 2; ++b) {
            const int vv = v0 + b;
            if (vv < 0 || vv >= dims.W) continue;
            const S wv = detail::hat(dv - S(vv));
            if (wv == S(0)) continue;
            for (int cdx = 0; cdx < 2; ++cdx) {
              const int ww = w0 + cdx;
              if (ww < 0 || ww >= dims.D) continue;
              const S wwt = detail::hat(dw - S(ww));
              if (wwt == S(0)) continue;
              const S weight = wu * wv * wwt;
              const long q = dims.index(uu, vv, ww);
              for (int c = 0; c < channels; ++c)
                output[static_cast<long>(c) * n + p] += weight * input[static_cast<long>(c) * n + q];
            }
          }
        }
      }
}

/// Analytical adjoint of warp_forward. Accumulates (does not overwrite) into
/// grad_input (channels * voxels) and grad_flow (3 * voxels); either may be null.
template <class S>
void warp_backward(int channels, Dims3 dims, const S* input, const S* flow,
                   const S* upstream, S* grad_input, S* grad_flow) {
  const long n = dims.voxels();
  const S* fu = flow;
  const S* fv = flow + n;
  const S* fw = flow + 2 * n;
  long p = 0;
  for (int u = 0; u < dims.H; ++u)
    for (int v = 0; v < dims.W; ++v)
      for (int w = 0; w < dims.D; ++w, ++p) {
        const S du = S(u) + fu[p];
        const S dv = S(v) + fv[p];
        const S dw = S(w) + fw[p];
        const int u0 = static_cast<int>(std::floor(du));
        const int v0 = static_cast<int>(std::floor(dv));
        const int w0 = static_cast<int>(std::floor(dw));
        S gu = S(0), gv = S(0), gw = S(0);
        for (int a = 0; a < 2; ++a) {
          const int uu = u0 + a;
          if (uu < 0 || uu >= dims.H) continue;
          const S tu = du - S(uu);
          const S wu = detail::hat(tu);
          const S dwu = detail::hat_deriv(tu);
          for (int b = 0; b < 2; ++b) {
            const int vv = v0 + b;
            if (vv < 0 || vv >= dims.W) continue;
            const S tv = dv - S(vv);
            const S wv = detail::hat(tv);
            const S dwv = detail::hat_deriv(tv);
            for (int cdx = 0; cdx < 2; ++cdx) {
              const int ww = w0 + cdx;
              if (ww < 0 || ww >= dims.D) continue;
              const S tw = dw - S(ww);
              const S wwt = detail::hat(tw);
              const S dwwt = detail::hat_deriv(tw);
              const long q = dims.index(uu, vv, ww);
              for (int c = 0; c < channels; ++c) {
                const S g = upstream[static_cast<long>(c) * n + p];
                if (g == S(0)) continue;
                const S x = input[static_cast<long>(c) * n + q];
                if (grad_input != nullptr)
                  grad_input[static_cast<long>(c) * n + q] += g * wu * wv * wwt;
                gu += g * x * dwu * wv * wwt;
                gv += g * x * wu * dwv * wwt;
                gw += g * x * wu * wv * dwwt;
              }
            }
          }
        }
        if (grad_flow != nullptr) {
          grad_flow[p] += gu;
          grad_flow[n + p] += gv;
          grad_flow[2 * n + p] += gw;
        }
      }
}

template <class S>
Volume<S> warp(const Volume<S>& input, const FlowField<S>& flow) {
  require(input.dims == flow.dims, "warp: input dims " + input.dims.str() +
          " != flow dims " + flow.dims.str());
  VecX<S> out(input.dims.voxels());
  warp_forward(1, input.dims, input.data.data(), flow.data.data(), out.data());
  return Volume<S>(input.dims, std::move(out));
}

template <class S>
SegMap<S> warp(const SegMap<S>& input, const FlowField<S>& flow) {
  require(input.dims == flow.dims, "warp: segmap dims " + input.dims.str() +
          " != flow dims " + flow.dims.str());
  VecX<S> out(input.soft.size());
  warp_forward(input.classes, input.dims, input.soft.data(), flow.data.data(), out.data());
  return SegMap<S>(input.dims, input.classes, std::move(out));
}

template <class S>
FlowField<S> warp(const FlowField<S>& input, const FlowField<S>& flow) {
  require(input.dims == flow.dims, "warp: flow dims mismatch");
  VecX<S> out(input.data.size());
  warp_forward(3, input.dims, input.data.data(), flow.data.data(), out.data());
  return FlowField<S>(input.dims, std::move(out));
}

/// Numerical inverse of a flow field by fixed-point iteration
/// g_{n+1}(p) = -f(p + g_n(p)). Learning-free ground truth for
/// invertibility checks.
template <class S>
FlowField<S> invert_flow_fixed_point(const FlowField<S>& f, int iterations = 20) {
  FlowField<S> g = FlowField<S>::zeros(f.dims);
  for (int it = 0; it < iterations; ++it) {
    FlowField<S> f_at_g = warp(f, g);  // f(p + g(p))
    g.data = -f_at_g.data;
  }
  return g;
}

}  // namespace pxseg
