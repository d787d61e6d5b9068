#pragma once

#include "pxseg/graph.hpp"
#include "pxseg/warp.hpp"

#include <vector>

namespace pxseg {

// 3-D network primitives over channel-major (C, H, W, D) node layouts.

namespace detail {

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using RowMap = Eigen::Map<RowMat<S>>;
template <class S>
using ConstRowMap = Eigen::Map<const RowMat<S>>;

// 3x3x3 neighborhood with zero padding 1: cols((cin*27 + o), p).
template <class S>
MatX<S> im2col_3x3x3(int cin, Dims3 dims, const S* x) {
  const long n = dims.voxels();
  MatX<S> cols(static_cast<long>(cin) * 27, n);
  long p = 0;
  for (int u = 0; u < dims.H; ++u)
    for (int v = 0; v < dims.W; ++v)
      for (int w = 0; w < dims.D; ++w, ++p) {
        S* col = cols.data() + p * cols.rows();
        for (int c = 0; c < cin; ++c) {
          const S* plane = x + static_cast<long>(c) * n;
          long k = static_cast<long>(c) * 27;
          for (int ku = -1; ku <= 1; ++ku)
            for (int kv = -1; kv <= 1; ++kv)
              for (int kw = -1; kw <= 1; ++kw, ++k) {
                const int uu = u + ku, vv = v + kv, ww = w + kw;
                col[k] = dims.contains(uu, vv, ww) ? plane[dims.index(uu, vv, ww)] : S(0);
              }
        }
      }
  return cols;
}

// Adjoint of im2col: scatters column entries back onto the padded grid.
template <class S>
void col2im_3x3x3(int cin, Dims3 dims, const MatX<S>& cols, S* dx) {
  const long n = dims.voxels();
  long p = 0;
  for (int u = 0; u < dims.H; ++u)
    for (int v = 0; v < dims.W; ++v)
      for (int w = 0; w < dims.D; ++w, ++p) {
        const S* col = cols.data() + p * cols.rows();
        for (int c = 0; c < cin; ++c) {
          S* plane = dx + static_cast<long>(c) * n;
          long k = static_cast<long>(c) * 27;
          for (int ku = -1; ku <= 1; ++ku)
            for (int kv = -1; kv <= 1; ++kv)
              for (int kw = -1; kw <= 1; ++kw, ++k) {
                const int uu = u + ku, vv = v + kv, ww = w + kw;
                if (dims.contains(uu, vv, ww)) plane[dims.index(uu, vv, ww)] += col[k];
              }
        }
      }
}

}  // namespace detail

/// 3x3x3 convolution, stride 1, zero padding 1.
/// weight: flat (cout, cin, 3,3,3); bias: (cout).
template <class S>
Var conv3d(Graph<S>& g, Var x, Var weight, Var bias, int cout) {
  const auto xs = g.shape(x);
  const int cin = xs.channels;
  const Dims3 dims = xs.dims;
  const long n = dims.voxels();
  const long K = static_cast<long>(cin) * 27;
  require(g.value(weight).size() == cout * K, "conv3d: weight size mismatch");
  require(g.value(bias).size() == cout, "conv3d: bias size mismatch");

  MatX<S> cols = detail::im2col_3x3x3(cin, dims, g.value(x).data());
  detail::ConstRowMap<S> Wm(g.value(weight).data(), cout, K);
  VecX<S> out(static_cast<long>(cout) * n);
  detail::RowMap<S> Om(out.data(), cout, n);
  Om.noalias() = Wm * cols;
  for (int c = 0; c < cout; ++c) Om.row(c).array() += g.value(bias)[c];

  typename Graph<S>::Shape os{cout, dims};
  return g.push(os, std::move(out), g.any_requires({x, weight, bias}),
                [x, weight, bias, cin, cout, dims, n, K](Graph<S>& gr, int self) {
                  detail::ConstRowMap<S> dY(gr.grad(self).data(), cout, n);
                  if (gr.node(bias).requires_grad) {
                    VecX<S>& db = gr.grad(bias.id);
                    for (int c = 0; c < cout; ++c) db[c] += dY.row(c).sum();
                  }
                  if (gr.node(weight).requires_grad) {
                    MatX<S> cols = detail::im2col_3x3x3(cin, dims, gr.value(x).data());
                    detail::RowMap<S> dW(gr.grad(weight.id).data(), cout, K);
                    dW.noalias() += dY * cols.transpose();
                  }
                  if (gr.node(x).requires_grad) {
                    detail::ConstRowMap<S> Wm(gr.value(weight).data(), cout, K);
                    MatX<S> M(K, n);
                    M.noalias() = Wm.transpose() * dY;
                    detail::col2im_3x3x3(cin, dims, M, gr.grad(x.id).data());
                  }
                });
}

/// 2x2x2 transpose convolution with stride 2 (exact 2x upsampling).
/// weight: flat (cin, cout, 2,2,2); bias: (cout).
template <class S>
Var conv_transpose3d(Graph<S>& g, Var x, Var weight, Var bias, int cout) {
  const auto xs = g.shape(x);
  const int cin = xs.channels;
  const Dims3 in = xs.dims;
  const Dims3 out_dims{in.H * 2, in.W * 2, in.D * 2};
  const long nin = in.voxels();
  const long nout = out_dims.voxels();
  require(g.value(weight).size() == static_cast<long>(cin) * cout * 8,
          "conv_transpose3d: weight size mismatch");
  require(g.value(bias).size() == cout, "conv_transpose3d: bias size mismatch");

  detail::ConstRowMap<S> Wm(g.value(weight).data(), cin, static_cast<long>(cout) * 8);
  detail::ConstRowMap<S> Xm(g.value(x).data(), cin, nin);
  MatX<S> Yb(static_cast<long>(cout) * 8, nin);
  Yb.noalias() = Wm.transpose() * Xm;

  VecX<S> out(static_cast<long>(cout) * nout);
  for (int c = 0; c < cout; ++c)
    out.segment(static_cast<long>(c) * nout, nout).setConstant(g.value(bias)[c]);
  long p = 0;
  for (int u = 0; u < in.H; ++u)
    for (int v = 0; v < in.W; ++v)
      for (int w = 0; w < in.D; ++w, ++p)
        for (int c = 0; c < cout; ++c)
          for (int o = 0; o < 8; ++o) {
            const int a = o >> 2, b = (o >> 1) & 1, cc = o & 1;
            out[static_cast<long>(c) * nout + out_dims.index(2 * u + a, 2 * v + b, 2 * w + cc)] +=
                Yb(static_cast<long>(c) * 8 + o, p);
          }

  typename Graph<S>::Shape os{cout, out_dims};
  return g.push(
      os, std::move(out), g.any_requires({x, weight, bias}),
      [x, weight, bias, cin, cout, in, out_dims, nin, nout](Graph<S>& gr, int self) {
        const VecX<S>& dy = gr.grad(self);
        MatX<S> dYb(static_cast<long>(cout) * 8, nin);
        long p = 0;
        for (int u = 0; u < in.H; ++u)
          for (int v = 0; v < in.W; ++v)
            for (int w = 0; w < in.D; ++w, ++p)
              for (int c = 0; c < cout; ++c)
                for (int o = 0; o < 8; ++o) {
                  const int a = o >> 2, b = (o >> 1) & 1, cc = o & 1;
                  dYb(static_cast<long>(c) * 8 + o, p) =
                      dy[static_cast<long>(c) * nout +
                         out_dims.index(2 * u + a, 2 * v + b, 2 * w + cc)];
                }
        if (gr.node(bias).requires_grad) {
          VecX<S>& db = gr.grad(bias.id);
          for (int c = 0; c < cout; ++c)
            db[c] += dy.segment(static_cast<long>(c) * nout, nout).sum();
        }
        if (gr.node(weight).requires_grad) {
          detail::ConstRowMap<S> Xm(gr.value(x).data(), cin, nin);
          detail::RowMap<S> dW(gr.grad(weight.id).data(), cin, static_cast<long>(cout) * 8);
          dW.noalias() += (dYb * Xm.transpose()).transpose();
        }
        if (gr.node(x).requires_grad) {
          detail::ConstRowMap<S> Wm(gr.value(weight).data(), cin, static_cast<long>(cout) * 8);
          detail::RowMap<S> dX(gr.grad(x.id).data(), cin, nin);
          dX.noalias() += Wm * dYb;
        }
      });
}

/// 2x2x2 max pooling, stride 2. Requires even dims.
template <class S>
Var maxpool2(Graph<S>& g, Var x) {
  const auto xs = g.shape(x);
  require(xs.dims.H % 2 == 0 && xs.dims.W % 2 == 0 && xs.dims.D % 2 == 0,
          "maxpool2: dims must be even, got " + xs.dims.str());
  const Dims3 out_dims{xs.dims.H / 2, xs.dims.W / 2, xs.dims.D / 2};
  const long nin = xs.dims.voxels();
  const long nout = out_dims.voxels();
  const int C = xs.channels;

  VecX<S> out(static_cast<long>(C) * nout);
  auto argmax = std::make_shared<std::vector<long>>(static_cast<size_t>(C) * nout);
  const S* xd = g.value(x).data();
  for (int c = 0; c < C; ++c) {
    const S* plane = xd + static_cast<long>(c) * nin;
    long q = 0;
    for (int u = 0; u < out_dims.H; ++u)
      for (int v = 0; v < out_dims.W; ++v)
        for (int w = 0; w < out_dims.D; ++w, ++q) {
          long best = xs.dims.index(2 * u, 2 * v, 2 * w);
          S best_val = plane[best];
          for (int o = 1; o < 8; ++o) {
            const long idx =
                xs.dims.index(2 * u + (o >> 2), 2 * v + ((o >> 1) & 1), 2 * w + (o & 1));
            if (plane[idx] > best_val) { best_val = plane[idx]; best = idx; }
          }
          out[static_cast<long>(c) * nout + q] = best_val;
          (*argmax)[static_cast<size_t>(c) * nout + q] = static_cast<long>(c) * nin + best;
        }
  }
  typename Graph<S>::Shape os{C, out_dims};
  return g.push(os, std::move(out), g.any_requires({x}),
                [x, argmax](Graph<S>& gr, int self) {
                  if (!gr.node(x).requires_grad) return;
                  const VecX<S>& dy = gr.grad(self);
                  VecX<S>& dx = gr.grad(x.id);
                  for (long i = 0; i < dy.size(); ++i) dx[(*argmax)[i]] += dy[i];
                });
}

/// 2x2x2 average pooling, stride 2; odd trailing slices are dropped.
template <class S>
Var avgpool2(Graph<S>& g, Var x) {
  const auto xs = g.shape(x);
  const Dims3 out_dims{xs.dims.H / 2, xs.dims.W / 2, xs.dims.D / 2};
  require(out_dims.H > 0 && out_dims.W > 0 && out_dims.D > 0,
          "avgpool2: dims too small: " + xs.dims.str());
  const long nin = xs.dims.voxels();
  const long nout = out_dims.voxels();
  const int C = xs.channels;
  const Dims3 in_dims = xs.dims;

  VecX<S> out = VecX<S>::Zero(static_cast<long>(C) * nout);
  const S* xd = g.value(x).data();
  for (int c = 0; c < C; ++c) {
    const S* plane = xd + static_cast<long>(c) * nin;
    long q = 0;
    for (int u = 0; u < out_dims.H; ++u)
      for (int v = 0; v < out_dims.W; ++v)
        for (int w = 0; w < out_dims.D; ++w, ++q) {
          S acc = S(0);
          for (int o = 0; o < 8; ++o)
            acc += plane[in_dims.index(2 * u + (o >> 2), 2 * v + ((o >> 1) & 1), 2 * w + (o & 1))];
          out[static_cast<long>(c) * nout + q] = acc / S(8);
        }
  }
  typename Graph<S>::Shape os{C, out_dims};
  return g.push(os, std::move(out), g.any_requires({x}),
                [x, C, in_dims, out_dims, nin, nout](Graph<S>& gr, int self) {
                  if (!gr.node(x).requires_grad) return;
                  const VecX<S>& dy = gr.grad(self);
                  VecX<S>& dx = gr.grad(x.id);
                  for (int c = 0; c < C; ++c) {
                    long q = 0;
                    for (int u = 0; u < out_dims.H; ++u)
                      for (int v = 0; v < out_dims.W; ++v)
                        for (int w = 0; w < out_dims.D; ++w, ++q) {
                          const S gshare = dy[static_cast<long>(c) * nout + q] / S(8);
                          for (int o = 0; o < 8; ++o)
                            dx[static_cast<long>(c) * nin +
                               in_dims.index(2 * u + (o >> 2), 2 * v + ((o >> 1) & 1),
                                             2 * w + (o & 1))] += gshare;
                        }
                  }
                });
}

/// Per-channel spatial mean: (C, dims) -> (C).
template <class S>
Var global_avgpool(Graph<S>& g, Var x) {
  const auto xs = g.shape(x);
  const long n = xs.dims.voxels();
  const int C = xs.channels;
  VecX<S> out(C);
  for (int c = 0; c < C; ++c) out[c] = g.value(x).segment(static_cast<long>(c) * n, n).mean();
  typename Graph<S>::Shape os{C, {1, 1, 1}};
  return g.push(os, std::move(out), g.any_requires({x}),
                [x, C, n](Graph<S>& gr, int self) {
                  if (!gr.node(x).requires_grad) return;
                  const VecX<S>& dy = gr.grad(self);
                  VecX<S>& dx = gr.grad(x.id);
                  for (int c = 0; c < C; ++c)
                    dx.segment(static_cast<long>(c) * n, n) += dy[c] / S(n);
                });
}

template <class S>
Var concat_channels(Graph<S>& g, const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_channels: empty");
  const Dims3 dims = g.shape(parts[0]).dims;
  const long n = dims.voxels();
  int C = 0;
  bool rg = false;
  for (Var v : parts) {
    require(g.shape(v).dims == dims, "concat_channels: dims mismatch");
    C += g.shape(v).channels;
    rg = rg || g.node(v).requires_grad;
  }
  VecX<S> out(static_cast<long>(C) * n);
  long off = 0;
  for (Var v : parts) {
    out.segment(off, g.value(v).size()) = g.value(v);
    off += g.value(v).size();
  }
  typename Graph<S>::Shape os{C, dims};
  auto parts_copy = parts;
  return g.push(os, std::move(out), rg,
                [parts_copy](Graph<S>& gr, int self) {
                  const VecX<S>& dy = gr.grad(self);
                  long off = 0;
                  for (Var v : parts_copy) {
                    const long sz = gr.value(v).size();
                    if (gr.node(v).requires_grad)
                      gr.grad(v.id) += dy.segment(off, sz);
                    off += sz;
                  }
                });
}

/// Per-voxel softmax across channels.
template <class S>
Var softmax_channels(Graph<S>& g, Var x) {
  const auto xs = g.shape(x);
  const long n = xs.dims.voxels();
  const int C = xs.channels;
  VecX<S> out(g.value(x).size());
  const S* xd = g.value(x).data();
  for (long p = 0; p < n; ++p) {
    S m = xd[p];
    for (int c = 1; c < C; ++c) m = std::max(m, xd[static_cast<long>(c) * n + p]);
    S z = S(0);
    for (int c = 0; c < C; ++c) {
      const S e = std::exp(xd[static_cast<long>(c) * n + p] - m);
      out[static_cast<long>(c) * n + p] = e;
      z += e;
    }
    for (int c = 0; c < C; ++c) out[static_cast<long>(c) * n + p] /= z;
  }
  auto y = std::make_shared<VecX<S>>(out);
  return g.push(xs, std::move(out), g.any_requires({x}),
                [x, y, C, n](Graph<S>& gr, int self) {
                  if (!gr.node(x).requires_grad) return;
                  const VecX<S>& dy = gr.grad(self);
                  VecX<S>& dx = gr.grad(x.id);
                  for (long p = 0; p < n; ++p) {
                    S dot = S(0);
                    for (int c = 0; c < C; ++c)
                      dot += dy[static_cast<long>(c) * n + p] * (*y)[static_cast<long>(c) * n + p];
                    for (int c = 0; c < C; ++c) {
                      const long i = static_cast<long>(c) * n + p;
                      dx[i] += (*y)[i] * (dy[i] - dot);
                    }
                  }
                });
}

/// Fully connected: weight flat row-major (out, in); bias (out).
template <class S>
Var fc(Graph<S>& g, Var x, Var weight, Var bias, int out_dim) {
  const long in_dim = g.value(x).size();
  require(g.value(weight).size() == out_dim * in_dim, "fc: weight size mismatch");
  require(g.value(bias).size() == out_dim, "fc: bias size mismatch");
  detail::ConstRowMap<S> Wm(g.value(weight).data(), out_dim, in_dim);
  VecX<S> out = (Wm * g.value(x).matrix()).array() + g.value(bias);
  typename Graph<S>::Shape os{static_cast<int>(out_dim), {1, 1, 1}};
  return g.push(os, std::move(out), g.any_requires({x, weight, bias}),
                [x, weight, bias, out_dim, in_dim](Graph<S>& gr, int self) {
                  const VecX<S>& dy = gr.grad(self);
                  if (gr.node(bias).requires_grad) gr.grad(bias.id) += dy;
                  if (gr.node(weight).requires_grad) {
                    detail::RowMap<S> dW(gr.grad(weight.id).data(), out_dim, in_dim);
                    dW.noalias() += dy.matrix() * gr.value(x).matrix().transpose();
                  }
                  if (gr.node(x).requires_grad) {
                    detail::ConstRowMap<S> Wm(gr.value(weight).data(), out_dim, in_dim);
                    gr.grad(x.id).matrix().noalias() += Wm.transpose() * dy.matrix();
                  }
                });
}

namespace detail {

// Separable 1-D correlation along one axis with zero padding; symmetric
// kernels make this self-adjoint.
template <class S>
void blur_axis(int channels, Dims3 dims, int axis, const std::vector<S>& kernel, const S* in,
               S* out) {
  const long n = dims.voxels();
  const int radius = static_cast<int>(kernel.size()) / 2;
  const int extent = axis == 0 ? dims.H : axis == 1 ? dims.W : dims.D;
  const long stride = axis == 0 ? static_cast<long>(dims.W) * dims.D
                    : axis == 1 ? static_cast<long>(dims.D)
                    : 1;
  for (int c = 0; c < channels; ++c) {
    const S* src = in + static_cast<long>(c) * n;
    S* dst = out + static_cast<long>(c) * n;
    long p = 0;
    for (int u = 0; u < dims.H; ++u)
      for (int v = 0; v < dims.W; ++v)
        for (int w = 0; w < dims.D; ++w, ++p) {
          const int pos = axis == 0 ? u : axis == 1 ? v : w;
          S acc = S(0);
          const int lo = std::max(-radius, -pos);
          const int hi = std::min(radius, extent - 1 - pos);
          for (int t = lo; t <= hi; ++t) acc += kernel[t + radius] * src[p + t * stride];
          dst[p] = acc;
        }
  }
}

template <class S>
void blur3(int channels, Dims3 dims, const std::vector<S>& kernel, const S* in, S* out,
           S* scratch) {
  blur_axis(channels, dims, 0, kernel, in, out);
  blur_axis(channels, dims, 1, kernel, out, scratch);
  blur_axis(channels, dims, 2, kernel, scratch, out);
}

template <class S>
std::vector<S> gaussian_kernel(int size, S sigma) {
  std::vector<S> k(size);
  const int radius = size / 2;
  S sum = S(0);
  for (int i = 0; i < size; ++i) {
    const S t = S(i - radius) / sigma;
    k[i] = std::exp(S(-0.5) * t * t);
    sum += k[i];
  }
  for (auto& v : k) v /= sum;
  return k;
}

}  // namespace detail

/// Separable Gaussian filtering with zero padding (self-adjoint backward).
template <class S>
Var gauss_blur(Graph<S>& g, Var x, const std::vector<S>& kernel) {
  const auto xs = g.shape(x);
  VecX<S> out(g.value(x).size());
  VecX<S> scratch(g.value(x).size());
  detail::blur3(xs.channels, xs.dims, kernel, g.value(x).data(), out.data(), scratch.data());
  return g.push(xs, std::move(out), g.any_requires({x}),
                [x, xs, kernel](Graph<S>& gr, int self) {
                  if (!gr.node(x).requires_grad) return;
                  VecX<S> back(gr.grad(self).size());
                  VecX<S> scratch(gr.grad(self).size());
                  detail::blur3(xs.channels, xs.dims, kernel, gr.grad(self).data(), back.data(),
                                scratch.data());
                  gr.grad(x.id) += back;
                });
}

/// Trilinear warp as a graph op; flow must be a (3, dims) node.
template <class S>
Var warp_op(Graph<S>& g, Var input, Var flow) {
  const auto xs = g.shape(input);
  require(g.shape(flow).channels == 3, "warp_op: flow must have 3 channels");
  require(g.shape(flow).dims == xs.dims, "warp_op: dims mismatch");
  VecX<S> out(g.value(input).size());
  warp_forward(xs.channels, xs.dims, g.value(input).data(), g.value(flow).data(), out.data());
  return g.push(xs, std::move(out), g.any_requires({input, flow}),
                [input, flow, xs](Graph<S>& gr, int self) {
                  S* gi = gr.node(input).requires_grad ? gr.grad(input.id).data() : nullptr;
                  S* gf = gr.node(flow).requires_grad ? gr.grad(flow.id).data() : nullptr;
                  if (gi == nullptr && gf == nullptr) return;
                  warp_backward(xs.channels, xs.dims, gr.value(input).data(),
                                gr.value(flow).data(), gr.grad(self).data(), gi, gf);
                });
}

}  // namespace pxseg
