#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "mccl/tensor.hpp"

namespace mccl {

template <typename T>
using MatrixX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using RowMajorMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// ---------------------------------------------------------------------------
// Elementwise / reductions

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  out.array() = x.array().max(T(0));
  return out;
}

template <typename T>
T mean_all(const Tensor<T>& x) {
  return x.array().mean();
}

/// Mean over all entries of (a - b)^2.
template <typename T>
T mean_squared_diff(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.same_shape(b), "mean_squared_diff: shape mismatch " + shape_str(a.shape()) + " vs " +
                              shape_str(b.shape()));
  return (a.array() - b.array()).square().mean();
}

// ---------------------------------------------------------------------------
// Cosine similarity

/// cos(a, b) over raw vectors; returns 0 when either norm is below eps.
template <typename T>
T cosine(const T* a, const T* b, std::int64_t n, T eps = T(1e-12)) {
  T dot = 0, na = 0, nb = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (na < eps || nb < eps) return T(0);
  return dot / (na * nb);
}

template <typename T>
T cosine_similarity(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.size() == b.size() && a.size() >= 1, "cosine_similarity: length mismatch");
  return cosine(a.data(), b.data(), a.size());
}

// ---------------------------------------------------------------------------
// Softmax

/// Numerically stable softmax along `axis` (max-subtraction).
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::int64_t axis) {
  check(axis >= 0 && axis < x.rank(), "softmax: axis out of range");
  const auto& s = x.shape();
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::int64_t i = axis + 1; i < x.rank(); ++i) inner *= s[i];
  const std::int64_t n = s[axis];

  Tensor<T> out(x.shape());
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * n * inner + in;
      T mx = x[base];
      for (std::int64_t k = 1; k < n; ++k) mx = std::max(mx, x[base + k * inner]);
      T sum = 0;
      for (std::int64_t k = 0; k < n; ++k) {
        const T e = std::exp(x[base + k * inner] - mx);
        out[base + k * inner] = e;
        sum += e;
      }
      for (std::int64_t k = 0; k < n; ++k) out[base + k * inner] /= sum;
    }
  }
  return out;
}

/// Argmax along `axis`, ties resolved to the lowest index.
template <typename T>
Tensor<std::int32_t> argmax_axis(const Tensor<T>& x, std::int64_t axis) {
  check(axis >= 0 && axis < x.rank(), "argmax_axis: axis out of range");
  const auto& s = x.shape();
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::int64_t i = axis + 1; i < x.rank(); ++i) inner *= s[i];
  const std::int64_t n = s[axis];

  Shape out_shape;
  for (std::int64_t i = 0; i < x.rank(); ++i)
    if (i != axis) out_shape.push_back(s[i]);
  if (out_shape.empty()) out_shape = {1};
  Tensor<std::int32_t> out(out_shape);
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * n * inner + in;
      std::int32_t best = 0;
      T bv = x[base];
      for (std::int64_t k = 1; k < n; ++k) {
        const T v = x[base + k * inner];
        if (v > bv) {
          bv = v;
          best = static_cast<std::int32_t>(k);
        }
      }
      out[o * inner + in] = best;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Channel mean

/// Mean over the channel axis. {B,C,H,W} -> {B,1,H,W}; {C,H,W} -> {H,W}.
template <typename T>
Tensor<T> channel_mean(const Tensor<T>& x) {
  check(x.rank() == 3 || x.rank() == 4, "channel_mean: expected rank 3 or 4");
  if (x.rank() == 4) {
    const std::int64_t b = x.extent(0), c = x.extent(1), hw = x.extent(2) * x.extent(3);
    Tensor<T> out({x.extent(0), 1, x.extent(2), x.extent(3)});
    for (std::int64_t i = 0; i < b; ++i)
      for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t p = 0; p < hw; ++p) out[i * hw + p] += x[(i * c + ch) * hw + p];
    out.array() /= T(c);
    return out;
  }
  const std::int64_t c = x.extent(0), hw = x.extent(1) * x.extent(2);
  Tensor<T> out({x.extent(1), x.extent(2)});
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t p = 0; p < hw; ++p) out[p] += x[ch * hw + p];
  out.array() /= T(c);
  return out;
}

// ---------------------------------------------------------------------------
// Convolution (im2col + GEMM)

inline std::int64_t conv_out_extent(std::int64_t in, std::int64_t k, std::int64_t stride,
                                    std::int64_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

/// Gathers kh*kw*Cin patches of one image into a (K x Ho*Wo) matrix.
template <typename T>
void im2col(const T* x, std::int64_t cin, std::int64_t h, std::int64_t w, std::int64_t kh,
            std::int64_t kw, std::int64_t stride, std::int64_t pad, MatrixX<T>& col) {
  const std::int64_t ho = conv_out_extent(h, kh, stride, pad);
  const std::int64_t wo = conv_out_extent(w, kw, stride, pad);
  col.setZero(cin * kh * kw, ho * wo);
  for (std::int64_t ci = 0; ci < cin; ++ci) {
    for (std::int64_t dy = 0; dy < kh; ++dy) {
      for (std::int64_t dx = 0; dx < kw; ++dx) {
        const std::int64_t k = (ci * kh + dy) * kw + dx;
        for (std::int64_t oy = 0; oy < ho; ++oy) {
          const std::int64_t iy = oy * stride + dy - pad;
          if (iy < 0 || iy >= h) continue;
          for (std::int64_t ox = 0; ox < wo; ++ox) {
            const std::int64_t ix = ox * stride + dx - pad;
            if (ix < 0 || ix >= w) continue;
            col(k, oy * wo + ox) = x[(ci * h + iy) * w + ix];
          }
        }
      }
    }
  }
}

/// Scatter-adds a (K x Ho*Wo) gradient matrix back onto one image.
template <typename T>
void col2im(const MatrixX<T>& col, std::int64_t cin, std::int64_t h, std::int64_t w,
            std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad, T* gx) {
  const std::int64_t ho = conv_out_extent(h, kh, stride, pad);
  const std::int64_t wo = conv_out_extent(w, kw, stride, pad);
  for (std::int64_t ci = 0; ci < cin; ++ci) {
    for (std::int64_t dy = 0; dy < kh; ++dy) {
      for (std::int64_t dx = 0; dx < kw; ++dx) {
        const std::int64_t k = (ci * kh + dy) * kw + dx;
        for (std::int64_t oy = 0; oy < ho; ++oy) {
          const std::int64_t iy = oy * stride + dy - pad;
          if (iy < 0 || iy >= h) continue;
          for (std::int64_t ox = 0; ox < wo; ++ox) {
            const std::int64_t ix = ox * stride + dx - pad;
            if (ix < 0 || ix >= w) continue;
            gx[(ci * h + iy) * w + ix] += col(k, oy * wo + ox);
          }
        }
      }
    }
  }
}

/// 2-D convolution. x {B,Cin,H,W}, w {Cout,Cin,kh,kw}, b {Cout}.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::int64_t stride,
                 std::int64_t pad) {
  check(x.rank() == 4 && w.rank() == 4 && b.rank() == 1, "conv2d: bad ranks");
  check(x.extent(1) == w.extent(1),
        "conv2d: input channels " + std::to_string(x.extent(1)) + " vs kernel " +
            std::to_string(w.extent(1)));
  check(b.extent(0) == w.extent(0), "conv2d: bias size mismatch");
  check(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
  const std::int64_t bs = x.extent(0), cin = x.extent(1), h = x.extent(2), wd = x.extent(3);
  const std::int64_t cout = w.extent(0), kh = w.extent(2), kw = w.extent(3);
  const std::int64_t ho = conv_out_extent(h, kh, stride, pad);
  const std::int64_t wo = conv_out_extent(wd, kw, stride, pad);
  check(ho >= 1 && wo >= 1, "conv2d: kernel larger than padded input");

  Tensor<T> out({bs, cout, ho, wo});
  RowMajorMap<T> wmat(w.data(), cout, cin * kh * kw);
  MatrixX<T> col;
  for (std::int64_t i = 0; i < bs; ++i) {
    im2col(x.data() + i * cin * h * wd, cin, h, wd, kh, kw, stride, pad, col);
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> om(
        out.data() + i * cout * ho * wo, cout, ho * wo);
    om.noalias() = wmat * col;
    om.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(b.data(), cout);
  }
  return out;
}

template <typename T>
struct Conv2dGrads {
  Tensor<T> gx, gw, gb;
};

template <typename T>
Conv2dGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& gout,
                               std::int64_t stride, std::int64_t pad, bool want_gx = true,
                               bool want_gw = true) {
  const std::int64_t bs = x.extent(0), cin = x.extent(1), h = x.extent(2), wd = x.extent(3);
  const std::int64_t cout = w.extent(0), kh = w.extent(2), kw = w.extent(3);
  const std::int64_t ho = gout.extent(2), wo = gout.extent(3);

  Conv2dGrads<T> g{want_gx ? Tensor<T>(x.shape()) : Tensor<T>{},
                   want_gw ? Tensor<T>(w.shape()) : Tensor<T>{}, Tensor<T>({cout})};
  RowMajorMap<T> wmat(w.data(), cout, cin * kh * kw);
  Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> gbv(g.gb.data(), cout);

  MatrixX<T> col, gcol;
  for (std::int64_t i = 0; i < bs; ++i) {
    RowMajorMap<T> gm(gout.data() + i * cout * ho * wo, cout, ho * wo);
    gbv += gm.rowwise().sum();
    if (want_gw) {
      im2col(x.data() + i * cin * h * wd, cin, h, wd, kh, kw, stride, pad, col);
      Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> gwmat(
          g.gw.data(), cout, cin * kh * kw);
      gwmat.noalias() += gm * col.transpose();
    }
    if (want_gx) {
      gcol.noalias() = wmat.transpose() * gm;
      col2im(gcol, cin, h, wd, kh, kw, stride, pad, g.gx.data() + i * cin * h * wd);
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Bilinear upsampling (align-corners = false)

/// Source coordinate of output index i at integer scale factor f:
/// y = (i + 0.5) / f - 0.5, clamped to the valid range.
struct LerpTap {
  std::int64_t i0, i1;
  double t;  // weight of i1
};

inline std::vector<LerpTap> lerp_taps(std::int64_t out_n, std::int64_t in_n, std::int64_t factor) {
  std::vector<LerpTap> taps(out_n);
  for (std::int64_t i = 0; i < out_n; ++i) {
    double y = (static_cast<double>(i) + 0.5) / static_cast<double>(factor) - 0.5;
    y = std::max(0.0, std::min(y, static_cast<double>(in_n - 1)));
    const std::int64_t y0 = static_cast<std::int64_t>(std::floor(y));
    const std::int64_t y1 = std::min(y0 + 1, in_n - 1);
    taps[i] = {y0, y1, y - static_cast<double>(y0)};
  }
  return taps;
}

template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, std::int64_t factor) {
  check(x.rank() == 4, "bilinear_upsample: expected {B,C,H,W}");
  check(factor >= 1, "bilinear_upsample: factor must be >= 1");
  const std::int64_t b = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
  const std::int64_t ho = h * factor, wo = w * factor;
  const auto ty = lerp_taps(ho, h, factor);
  const auto tx = lerp_taps(wo, w, factor);

  Tensor<T> out({b, c, ho, wo});
  for (std::int64_t bc = 0; bc < b * c; ++bc) {
    const T* in = x.data() + bc * h * w;
    T* o = out.data() + bc * ho * wo;
    for (std::int64_t oy = 0; oy < ho; ++oy) {
      const auto& yt = ty[oy];
      for (std::int64_t ox = 0; ox < wo; ++ox) {
        const auto& xt = tx[ox];
        const double v00 = in[yt.i0 * w + xt.i0], v01 = in[yt.i0 * w + xt.i1];
        const double v10 = in[yt.i1 * w + xt.i0], v11 = in[yt.i1 * w + xt.i1];
        o[oy * wo + ox] = static_cast<T>((1 - yt.t) * ((1 - xt.t) * v00 + xt.t * v01) +
                                         yt.t * ((1 - xt.t) * v10 + xt.t * v11));
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> bilinear_upsample_backward(const Tensor<T>& gout, std::int64_t in_h, std::int64_t in_w,
                                     std::int64_t factor) {
  const std::int64_t b = gout.extent(0), c = gout.extent(1);
  const std::int64_t ho = gout.extent(2), wo = gout.extent(3);
  const auto ty = lerp_taps(ho, in_h, factor);
  const auto tx = lerp_taps(wo, in_w, factor);

  Tensor<T> gx({b, c, in_h, in_w});
  for (std::int64_t bc = 0; bc < b * c; ++bc) {
    const T* g = gout.data() + bc * ho * wo;
    T* o = gx.data() + bc * in_h * in_w;
    for (std::int64_t oy = 0; oy < ho; ++oy) {
      const auto& yt = ty[oy];
      for (std::int64_t ox = 0; ox < wo; ++ox) {
        const auto& xt = tx[ox];
        const T gv = g[oy * wo + ox];
        o[yt.i0 * in_w + xt.i0] += static_cast<T>((1 - yt.t) * (1 - xt.t)) * gv;
        o[yt.i0 * in_w + xt.i1] += static_cast<T>((1 - yt.t) * xt.t) * gv;
        o[yt.i1 * in_w + xt.i0] += static_cast<T>(yt.t * (1 - xt.t)) * gv;
        o[yt.i1 * in_w + xt.i1] += static_cast<T>(yt.t * xt.t) * gv;
      }
    }
  }
  return gx;
}

// ---------------------------------------------------------------------------
// Nearest-neighbour downsampling for label maps

/// {H,W} -> {H/f,W/f}, sampling the centre of each f x f block.
inline Tensor<std::int32_t> nearest_downsample(const Tensor<std::int32_t>& m, std::int64_t factor) {
  check(m.rank() == 2, "nearest_downsample: expected {H,W}");
  check(m.extent(0) % factor == 0 && m.extent(1) % factor == 0,
        "nearest_downsample: extents not divisible by factor");
  const std::int64_t h = m.extent(0) / factor, w = m.extent(1) / factor;
  const std::int64_t off = factor / 2;
  Tensor<std::int32_t> out({h, w});
  for (std::int64_t i = 0; i < h; ++i)
    for (std::int64_t j = 0; j < w; ++j)
      out[i * w + j] = m[(i * factor + off) * m.extent(1) + (j * factor + off)];
  return out;
}

}  // namespace mccl
