#pragma once

// Differentiable building blocks used by the forecasting network. Each op has
// a forward function and an analytic backward that returns gradients for its
// inputs given the upstream gradient. There is no tape: the model composes
// these calls explicitly.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <initializer_list>
#include <numbers>
#include <string>
#include <vector>

#include "lookout/error.hpp"
#include "lookout/tensor.hpp"

namespace lookout::ndiff {

inline constexpr double kLayerNormEps = 1e-5;

namespace detail {

inline void expect_shape(bool ok, const std::string& op, const std::string& msg) {
  if (!ok) fail(ErrorCode::kShapeMismatch, op + ": " + msg);
}

template <typename T>
std::size_t rows_of(const Tensor<T>& x, std::size_t inner, const std::string& op) {
  expect_shape(x.rank() >= 1 && x.shape().back() == inner, op,
               "last dim of " + shape_string(x.shape()) + " must be " + std::to_string(inner));
  return x.size() / inner;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// linear: y = x W + b over the last axis of x. W is (in, out), b is (out).

template <typename T>
struct LinearGrads {
  Tensor<T> dx, dw, db;
};

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  detail::expect_shape(w.rank() == 2, "linear", "weight must be rank 2");
  const std::size_t in = w.dim(0), out = w.dim(1);
  detail::expect_shape(b.rank() == 1 && b.dim(0) == out, "linear", "bias must have length " + std::to_string(out));
  const std::size_t n = detail::rows_of(x, in, "linear");
  Shape ys = x.shape();
  ys.back() = out;
  Tensor<T> y(ys);
  for (std::size_t r = 0; r < n; ++r) {
    T* yr = y.data() + r * out;
    std::copy(b.data(), b.data() + out, yr);
    const T* xr = x.data() + r * in;
    for (std::size_t i = 0; i < in; ++i) {
      const T xv = xr[i];
      const T* wi = w.data() + i * out;
      for (std::size_t o = 0; o < out; ++o) yr[o] += xv * wi[o];
    }
  }
  return y;
}

template <typename T>
LinearGrads<T> linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy) {
  const std::size_t in = w.dim(0), out = w.dim(1);
  const std::size_t n = detail::rows_of(x, in, "linear_backward");
  detail::expect_shape(dy.size() == n * out, "linear_backward", "upstream gradient size mismatch");
  LinearGrads<T> g{Tensor<T>(x.shape()), Tensor<T>(w.shape()), Tensor<T>(Shape{out})};
  for (std::size_t r = 0; r < n; ++r) {
    const T* dyr = dy.data() + r * out;
    const T* xr = x.data() + r * in;
    T* dxr = g.dx.data() + r * in;
    for (std::size_t o = 0; o < out; ++o) g.db[o] += dyr[o];
    for (std::size_t i = 0; i < in; ++i) {
      const T* wi = w.data() + i * out;
      T* dwi = g.dw.data() + i * out;
      const T xv = xr[i];
      T acc = 0;
      for (std::size_t o = 0; o < out; ++o) {
        acc += wi[o] * dyr[o];
        dwi[o] += xv * dyr[o];
      }
      dxr[i] = acc;
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// conv2d: cross-correlation on H x W x Cin inputs with (k, k, Cin, Cout) kernels.

struct Conv2dSpec {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

inline std::size_t conv_out_dim(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  if (in + 2 * pad < k) fail(ErrorCode::kShapeMismatch, "conv: kernel larger than padded input");
  return (in + 2 * pad - k) / stride + 1;
}

template <typename T>
struct ConvGrads {
  Tensor<T> dx, dk, db;
};

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& b, Conv2dSpec spec) {
  detail::expect_shape(x.rank() == 3, "conv2d", "input must be H x W x C");
  detail::expect_shape(k.rank() == 4 && k.dim(0) == k.dim(1), "conv2d", "kernel must be (k, k, Cin, Cout)");
  const std::size_t h = x.dim(0), w = x.dim(1), cin = x.dim(2);
  const std::size_t ks = k.dim(0), cout = k.dim(3);
  detail::expect_shape(k.dim(2) == cin, "conv2d", "kernel Cin does not match input channels");
  detail::expect_shape(b.rank() == 1 && b.dim(0) == cout, "conv2d", "bias length must equal Cout");
  detail::expect_shape(spec.stride >= 1, "conv2d", "stride must be >= 1");
  const std::size_t ho = conv_out_dim(h, ks, spec.stride, spec.padding);
  const std::size_t wo = conv_out_dim(w, ks, spec.stride, spec.padding);
  Tensor<T> y(Shape{ho, wo, cout});
  const auto pad = static_cast<std::ptrdiff_t>(spec.padding);
  for (std::size_t oy = 0; oy < ho; ++oy) {
    for (std::size_t ox = 0; ox < wo; ++ox) {
      T* yp = y.data() + (oy * wo + ox) * cout;
      std::copy(b.data(), b.data() + cout, yp);
      for (std::size_t ky = 0; ky < ks; ++ky) {
        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * spec.stride + ky) - pad;
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
        for (std::size_t kx = 0; kx < ks; ++kx) {
          const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * spec.stride + kx) - pad;
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
          const T* xp = x.data() + (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * cin;
          const T* kp = k.data() + (ky * ks + kx) * cin * cout;
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const T xv = xp[ci];
            const T* kc = kp + ci * cout;
            for (std::size_t co = 0; co < cout; ++co) yp[co] += xv * kc[co];
          }
        }
      }
    }
  }
  return y;
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& dy, Conv2dSpec spec) {
  const std::size_t h = x.dim(0), w = x.dim(1), cin = x.dim(2);
  const std::size_t ks = k.dim(0), cout = k.dim(3);
  const std::size_t ho = conv_out_dim(h, ks, spec.stride, spec.padding);
  const std::size_t wo = conv_out_dim(w, ks, spec.stride, spec.padding);
  detail::expect_shape(dy.shape() == Shape{ho, wo, cout}, "conv2d_backward", "upstream gradient shape mismatch");
  ConvGrads<T> g{Tensor<T>(x.shape()), Tensor<T>(k.shape()), Tensor<T>(Shape{cout})};
  const auto pad = static_cast<std::ptrdiff_t>(spec.padding);
  for (std::size_t oy = 0; oy < ho; ++oy) {
    for (std::size_t ox = 0; ox < wo; ++ox) {
      const T* dyp = dy.data() + (oy * wo + ox) * cout;
      for (std::size_t co = 0; co < cout; ++co) g.db[co] += dyp[co];
      for (std::size_t ky = 0; ky < ks; ++ky) {
        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * spec.stride + ky) - pad;
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
        for (std::size_t kx = 0; kx < ks; ++kx) {
          const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * spec.stride + kx) - pad;
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
          const std::size_t xoff = (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * cin;
          const T* xp = x.data() + xoff;
          T* dxp = g.dx.data() + xoff;
          const std::size_t koff = (ky * ks + kx) * cin * cout;
          const T* kp = k.data() + koff;
          T* dkp = g.dk.data() + koff;
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const T xv = xp[ci];
            const T* kc = kp + ci * cout;
            T* dkc = dkp + ci * cout;
            T acc = 0;
            for (std::size_t co = 0; co < cout; ++co) {
              acc += kc[co] * dyp[co];
              dkc[co] += xv * dyp[co];
            }
            dxp[ci] += acc;
          }
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// conv3d: D x H x W x Cin inputs, (kd, kh, kw, Cin, Cout) kernels, per-axis
// stride and padding. Only the 3D-convolution model variant uses it.

struct Conv3dSpec {
  std::array<std::size_t, 3> stride{1, 1, 1};
  std::array<std::size_t, 3> padding{0, 0, 0};
};

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& b, const Conv3dSpec& spec) {
  detail::expect_shape(x.rank() == 4, "conv3d", "input must be D x H x W x C");
  detail::expect_shape(k.rank() == 5 && k.dim(3) == x.dim(3), "conv3d", "kernel must be (kd, kh, kw, Cin, Cout)");
  const std::size_t cin = x.dim(3), cout = k.dim(4);
  detail::expect_shape(b.rank() == 1 && b.dim(0) == cout, "conv3d", "bias length must equal Cout");
  std::array<std::size_t, 3> in{x.dim(0), x.dim(1), x.dim(2)}, ks{k.dim(0), k.dim(1), k.dim(2)}, out{};
  for (int a = 0; a < 3; ++a) out[a] = conv_out_dim(in[a], ks[a], spec.stride[a], spec.padding[a]);
  Tensor<T> y(Shape{out[0], out[1], out[2], cout});
  for (std::size_t od = 0; od < out[0]; ++od)
    for (std::size_t oh = 0; oh < out[1]; ++oh)
      for (std::size_t ow = 0; ow < out[2]; ++ow) {
        T* yp = y.data() + ((od * out[1] + oh) * out[2] + ow) * cout;
        std::copy(b.data(), b.data() + cout, yp);
        for (std::size_t kd = 0; kd < ks[0]; ++kd) {
          const auto id = static_cast<std::ptrdiff_t>(od * spec.stride[0] + kd) - static_cast<std::ptrdiff_t>(spec.padding[0]);
          if (id < 0 || id >= static_cast<std::ptrdiff_t>(in[0])) continue;
          for (std::size_t kh = 0; kh < ks[1]; ++kh) {
            const auto ih = static_cast<std::ptrdiff_t>(oh * spec.stride[1] + kh) - static_cast<std::ptrdiff_t>(spec.padding[1]);
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(in[1])) continue;
            for (std::size_t kw = 0; kw < ks[2]; ++kw) {
              const auto iw = static_cast<std::ptrdiff_t>(ow * spec.stride[2] + kw) - static_cast<std::ptrdiff_t>(spec.padding[2]);
              if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(in[2])) continue;
              const T* xp = x.data() + ((static_cast<std::size_t>(id) * in[1] + static_cast<std::size_t>(ih)) * in[2] +
                                        static_cast<std::size_t>(iw)) * cin;
              const T* kp = k.data() + ((kd * ks[1] + kh) * ks[2] + kw) * cin * cout;
              for (std::size_t ci = 0; ci < cin; ++ci) {
                const T xv = xp[ci];
                const T* kc = kp + ci * cout;
                for (std::size_t co = 0; co < cout; ++co) yp[co] += xv * kc[co];
              }
            }
          }
        }
      }
  return y;
}

template <typename T>
ConvGrads<T> conv3d_backward(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& dy, const Conv3dSpec& spec) {
  const std::size_t cin = x.dim(3), cout = k.dim(4);
  std::array<std::size_t, 3> in{x.dim(0), x.dim(1), x.dim(2)}, ks{k.dim(0), k.dim(1), k.dim(2)}, out{};
  for (int a = 0; a < 3; ++a) out[a] = conv_out_dim(in[a], ks[a], spec.stride[a], spec.padding[a]);
  detail::expect_shape(dy.shape() == Shape{out[0], out[1], out[2], cout}, "conv3d_backward",
                       "upstream gradient shape mismatch");
  ConvGrads<T> g{Tensor<T>(x.shape()), Tensor<T>(k.shape()), Tensor<T>(Shape{cout})};
  for (std::size_t od = 0; od < out[0]; ++od)
    for (std::size_t oh = 0; oh < out[1]; ++oh)
      for (std::size_t ow = 0; ow < out[2]; ++ow) {
        const T* dyp = dy.data() + ((od * out[1] + oh) * out[2] + ow) * cout;
        for (std::size_t co = 0; co < cout; ++co) g.db[co] += dyp[co];
        for (std::size_t kd = 0; kd < ks[0]; ++kd) {
          const auto id = static_cast<std::ptrdiff_t>(od * spec.stride[0] + kd) - static_cast<std::ptrdiff_t>(spec.padding[0]);
          if (id < 0 || id >= static_cast<std::ptrdiff_t>(in[0])) continue;
          for (std::size_t kh = 0; kh < ks[1]; ++kh) {
            const auto ih = static_cast<std::ptrdiff_t>(oh * spec.stride[1] + kh) - static_cast<std::ptrdiff_t>(spec.padding[1]);
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(in[1])) continue;
            for (std::size_t kw = 0; kw < ks[2]; ++kw) {
              const auto iw = static_cast<std::ptrdiff_t>(ow * spec.stride[2] + kw) - static_cast<std::ptrdiff_t>(spec.padding[2]);
              if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(in[2])) continue;
              const std::size_t xoff = ((static_cast<std::size_t>(id) * in[1] + static_cast<std::size_t>(ih)) * in[2] +
                                        static_cast<std::size_t>(iw)) * cin;
              const std::size_t koff = ((kd * ks[1] + kh) * ks[2] + kw) * cin * cout;
              for (std::size_t ci = 0; ci < cin; ++ci) {
                const T xv = x[xoff + ci];
                const T* kc = k.data() + koff + ci * cout;
                T* dkc = g.dk.data() + koff + ci * cout;
                T acc = 0;
                for (std::size_t co = 0; co < cout; ++co) {
                  acc += kc[co] * dyp[co];
                  dkc[co] += xv * dyp[co];
                }
                g.dx[xoff + ci] += acc;
              }
            }
          }
        }
      }
  return g;
}

// ---------------------------------------------------------------------------
// layernorm over the last axis: y = gamma * (x - mu) / sqrt(var + 1e-5) + beta.

template <typename T>
struct LayerNormGrads {
  Tensor<T> dx, dgamma, dbeta;
};

template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) {
  detail::expect_shape(gamma.rank() == 1 && beta.shape() == gamma.shape(), "layernorm", "gamma/beta must be 1-D and equal");
  const std::size_t c = gamma.dim(0);
  detail::expect_shape(c >= 2, "layernorm", "normalized axis length must be >= 2");
  const std::size_t n = detail::rows_of(x, c, "layernorm");
  Tensor<T> y(x.shape());
  for (std::size_t r = 0; r < n; ++r) {
    const T* xr = x.data() + r * c;
    T* yr = y.data() + r * c;
    T mean = 0;
    for (std::size_t i = 0; i < c; ++i) mean += xr[i];
    mean /= static_cast<T>(c);
    T var = 0;
    for (std::size_t i = 0; i < c; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= static_cast<T>(c);
    const T inv = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    for (std::size_t i = 0; i < c; ++i) yr[i] = gamma[i] * (xr[i] - mean) * inv + beta[i];
  }
  return y;
}

template <typename T>
LayerNormGrads<T> layernorm_backward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& dy) {
  const std::size_t c = gamma.dim(0);
  const std::size_t n = detail::rows_of(x, c, "layernorm_backward");
  detail::expect_shape(dy.shape() == x.shape(), "layernorm_backward", "upstream gradient shape mismatch");
  LayerNormGrads<T> g{Tensor<T>(x.shape()), Tensor<T>(gamma.shape()), Tensor<T>(gamma.shape())};
  std::vector<T> xhat(c);
  for (std::size_t r = 0; r < n; ++r) {
    const T* xr = x.data() + r * c;
    const T* dyr = dy.data() + r * c;
    T* dxr = g.dx.data() + r * c;
    T mean = 0;
    for (std::size_t i = 0; i < c; ++i) mean += xr[i];
    mean /= static_cast<T>(c);
    T var = 0;
    for (std::size_t i = 0; i < c; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= static_cast<T>(c);
    const T inv = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    T sum_g = 0, sum_gx = 0;
    for (std::size_t i = 0; i < c; ++i) {
      xhat[i] = (xr[i] - mean) * inv;
      const T gi = dyr[i] * gamma[i];
      g.dgamma[i] += dyr[i] * xhat[i];
      g.dbeta[i] += dyr[i];
      sum_g += gi;
      sum_gx += gi * xhat[i];
    }
    const T cn = static_cast<T>(c);
    for (std::size_t i = 0; i < c; ++i) dxr[i] = inv * (dyr[i] * gamma[i] - sum_g / cn - xhat[i] * sum_gx / cn);
  }
  return g;
}

// ---------------------------------------------------------------------------
// gelu, exact erf form: y = x * Phi(x).

template <typename T>
T gelu_scalar(T x) {
  return static_cast<T>(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <typename T>
T gelu_grad_scalar(T x) {
  const T cdf = static_cast<T>(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(static_cast<T>(-0.5) * x * x) * (std::numbers::inv_sqrtpi_v<T> / std::numbers::sqrt2_v<T>);
  return cdf + x * pdf;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = gelu_scalar(x[i]);
  return y;
}

template <typename T>
Tensor<T> gelu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  detail::expect_shape(dy.shape() == x.shape(), "gelu_backward", "upstream gradient shape mismatch");
  Tensor<T> dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = dy[i] * gelu_grad_scalar(x[i]);
  return dx;
}

// ---------------------------------------------------------------------------
// Per-channel mean over all leading (spatial) axes.

template <typename T>
Tensor<T> avg_pool_spatial(const Tensor<T>& x) {
  detail::expect_shape(x.rank() >= 2 && x.size() > 0, "avg_pool_spatial", "input must be ... x C with spatial extent");
  const std::size_t c = x.shape().back();
  const std::size_t n = x.size() / c;
  Tensor<T> y(Shape{c});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t i = 0; i < c; ++i) y[i] += x[r * c + i];
  for (std::size_t i = 0; i < c; ++i) y[i] /= static_cast<T>(n);
  return y;
}

template <typename T>
Tensor<T> avg_pool_spatial_backward(const Shape& x_shape, const Tensor<T>& dy) {
  const std::size_t c = x_shape.back();
  detail::expect_shape(dy.size() == c, "avg_pool_spatial_backward", "upstream gradient must have C entries");
  Tensor<T> dx(x_shape);
  const std::size_t n = dx.size() / c;
  const T scale = T(1) / static_cast<T>(n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t i = 0; i < c; ++i) dx[r * c + i] = dy[i] * scale;
  return dx;
}

// ---------------------------------------------------------------------------
// 6D -> rotation matrix on tensor scalars, with its backward pass.

template <typename T>
using Mat3T = std::array<T, 9>;  // row-major

template <typename T>
struct GramSchmidt {
  std::array<T, 3> a1, a2, b1, b2, b3;
  T n1, n2, s;  // |a1|, |a2 - s b1|, s = b1 . a2
};

template <typename T>
GramSchmidt<T> gram_schmidt(const T* r6) {
  GramSchmidt<T> g;
  for (int i = 0; i < 3; ++i) {
    g.a1[i] = r6[i];
    g.a2[i] = r6[3 + i];
  }
  auto norm = [](const std::array<T, 3>& v) { return std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]); };
  g.n1 = norm(g.a1);
  if (!(static_cast<double>(g.n1) > 1e-8)) fail(ErrorCode::kDegenerateRotation, "first column norm below 1e-8");
  if (!(static_cast<double>(norm(g.a2)) > 1e-8)) fail(ErrorCode::kDegenerateRotation, "second column norm below 1e-8");
  for (int i = 0; i < 3; ++i) g.b1[i] = g.a1[i] / g.n1;
  g.s = g.b1[0] * g.a2[0] + g.b1[1] * g.a2[1] + g.b1[2] * g.a2[2];
  std::array<T, 3> resid;
  for (int i = 0; i < 3; ++i) resid[i] = g.a2[i] - g.s * g.b1[i];
  g.n2 = norm(resid);
  if (!(static_cast<double>(g.n2) > 1e-8)) fail(ErrorCode::kDegenerateRotation, "columns are parallel");
  for (int i = 0; i < 3; ++i) g.b2[i] = resid[i] / g.n2;
  g.b3 = {g.b1[1] * g.b2[2] - g.b1[2] * g.b2[1], g.b1[2] * g.b2[0] - g.b1[0] * g.b2[2],
          g.b1[0] * g.b2[1] - g.b1[1] * g.b2[0]};
  return g;
}

template <typename T>
Mat3T<T> to_matrix(const GramSchmidt<T>& g) {
  Mat3T<T> m;
  for (int i = 0; i < 3; ++i) {
    m[i * 3 + 0] = g.b1[i];
    m[i * 3 + 1] = g.b2[i];
    m[i * 3 + 2] = g.b3[i];
  }
  return m;
}

/// Given dL/dR (row-major), accumulate dL/d(6D) into `d6`.
template <typename T>
void gram_schmidt_backward(const GramSchmidt<T>& g, const Mat3T<T>& dm, T* d6) {
  using V = std::array<T, 3>;
  auto cross = [](const V& a, const V& b) {
    return V{a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
  };
  auto dot = [](const V& a, const V& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; };
  V g1, g2, g3;
  for (int i = 0; i < 3; ++i) {
    g1[i] = dm[i * 3 + 0];
    g2[i] = dm[i * 3 + 1];
    g3[i] = dm[i * 3 + 2];
  }
  // b3 = b1 x b2
  const V c1 = cross(g.b2, g3), c2 = cross(g3, g.b1);
  for (int i = 0; i < 3; ++i) {
    g1[i] += c1[i];
    g2[i] += c2[i];
  }
  // b2 = r / |r|
  const T p2 = dot(g.b2, g2);
  V dr;
  for (int i = 0; i < 3; ++i) dr[i] = (g2[i] - g.b2[i] * p2) / g.n2;
  // r = a2 - (b1 . a2) b1
  const T b1dr = dot(g.b1, dr);
  V da2;
  for (int i = 0; i < 3; ++i) {
    da2[i] = dr[i] - b1dr * g.b1[i];
    g1[i] += -g.s * dr[i] - b1dr * g.a2[i];
  }
  // b1 = a1 / |a1|
  const T p1 = dot(g.b1, g1);
  for (int i = 0; i < 3; ++i) {
    d6[i] += (g1[i] - g.b1[i] * p1) / g.n1;
    d6[3 + i] += da2[i];
  }
}

// ---------------------------------------------------------------------------
// Pose loss: (1/T2) sum_t [w_trans |t - t^|_1 + w_rot |M_t - I|_1], where
// M = R^T R^ (relative form, default) or R R^ (literal form).

enum class RotationLossForm { kRelative, kLiteral };

struct PoseLossWeights {
  double trans = 1.0;
  double rot = 1.0;
  RotationLossForm form = RotationLossForm::kRelative;
};

struct PoseLossValue {
  double total = 0, trans = 0, rot = 0;
};

namespace detail {

template <typename T>
Mat3T<T> rotation_product(const Mat3T<T>& gt, const Mat3T<T>& pr, RotationLossForm form) {
  Mat3T<T> m{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      T acc = 0;
      for (int k = 0; k < 3; ++k)
        acc += (form == RotationLossForm::kRelative ? gt[k * 3 + i] : gt[i * 3 + k]) * pr[k * 3 + j];
      m[i * 3 + j] = acc;
    }
  return m;
}

template <typename T>
T sign(T v) {
  return static_cast<T>((v > T(0)) - (v < T(0)));
}

template <typename T>
void check_pose_tensors(const Tensor<T>& pred, const Tensor<T>& gt) {
  expect_shape(pred.rank() == 2 && pred.dim(1) == 9 && pred.shape() == gt.shape(), "pose_loss",
               "pred and gt must both be T2 x 9");
}

}  // namespace detail

template <typename T>
PoseLossValue pose_loss(const Tensor<T>& pred, const Tensor<T>& gt, const PoseLossWeights& w = {}) {
  detail::check_pose_tensors(pred, gt);
  const std::size_t steps = pred.dim(0);
  PoseLossValue out;
  for (std::size_t t = 0; t < steps; ++t) {
    const T* p = pred.data() + t * 9;
    const T* g = gt.data() + t * 9;
    double lt = 0;
    for (int i = 0; i < 3; ++i) lt += std::abs(static_cast<double>(g[i] - p[i]));
    const auto m = detail::rotation_product(to_matrix(gram_schmidt(g + 3)), to_matrix(gram_schmidt(p + 3)), w.form);
    double lr = 0;
    for (int i = 0; i < 9; ++i) lr += std::abs(static_cast<double>(m[i]) - (i % 4 == 0 ? 1.0 : 0.0));
    out.trans += lt;
    out.rot += lr;
  }
  out.trans /= static_cast<double>(steps);
  out.rot /= static_cast<double>(steps);
  out.total = w.trans * out.trans + w.rot * out.rot;
  return out;
}

/// Gradient of `scale * pose_loss(pred, gt).total` with respect to pred.
template <typename T>
Tensor<T> pose_loss_backward(const Tensor<T>& pred, const Tensor<T>& gt, const PoseLossWeights& w = {}, T scale = T(1)) {
  detail::check_pose_tensors(pred, gt);
  const std::size_t steps = pred.dim(0);
  Tensor<T> d(pred.shape());
  const T k = scale / static_cast<T>(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    const T* p = pred.data() + t * 9;
    const T* g = gt.data() + t * 9;
    T* dp = d.data() + t * 9;
    for (int i = 0; i < 3; ++i) dp[i] = -k * static_cast<T>(w.trans) * detail::sign(g[i] - p[i]);
    const auto gs = gram_schmidt(p + 3);
    const auto gm = to_matrix(gram_schmidt(g + 3));
    const auto pm = to_matrix(gs);
    const auto m = detail::rotation_product(gm, pm, w.form);
    Mat3T<T> dM;
    for (int i = 0; i < 9; ++i) dM[i] = k * static_cast<T>(w.rot) * detail::sign(m[i] - (i % 4 == 0 ? T(1) : T(0)));
    // M = A R^, A = G^T (relative) or G (literal); dR^ = A^T dM.
    Mat3T<T> dR{};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        T acc = 0;
        for (int q = 0; q < 3; ++q) {
          const T a_qi = w.form == RotationLossForm::kRelative ? gm[i * 3 + q] : gm[q * 3 + i];
          acc += a_qi * dM[q * 3 + j];
        }
        dR[i * 3 + j] = acc;
      }
    gram_schmidt_backward(gs, dR, dp + 3);
  }
  return d;
}

// ---------------------------------------------------------------------------
// Parameters and optimization.

template <typename T = float>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool is_bias = false;

  Param() = default;
  Param(std::string n, Tensor<T> v, bool bias)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()), is_bias(bias) {}

  void zero_grad() { grad.fill(T(0)); }
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

template <typename T = float>
struct OptimState {
  AdamWConfig config;
  std::vector<Tensor<T>> m, v;
  std::int64_t step = 0;

  OptimState() = default;
  OptimState(const std::vector<Param<T>>& params, AdamWConfig cfg) : config(cfg) { reset(params); }

  void reset(const std::vector<Param<T>>& params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(p.value.shape());
      v.emplace_back(p.value.shape());
    }
    step = 0;
  }
};

/// AdamW with bias correction; decoupled decay lr * wd * theta is skipped for biases.
template <typename T>
void adamw_step(std::vector<Param<T>>& params, OptimState<T>& state, double lr) {
  require(state.m.size() == params.size(), ErrorCode::kShapeMismatch, "optimizer state does not match parameters");
  for (const auto& p : params)
    if (!p.grad.all_finite()) fail(ErrorCode::kNonFiniteGradient, "gradient of " + p.name + " is not finite");
  ++state.step;
  const auto& c = state.config;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    auto& m = state.m[pi];
    auto& v = state.v[pi];
    require(m.shape() == p.value.shape(), ErrorCode::kShapeMismatch, "moment shape mismatch for " + p.name);
    const double decay = p.is_bias ? 0.0 : c.weight_decay;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      const double mi = c.beta1 * m[i] + (1.0 - c.beta1) * g;
      const double vi = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      const double theta = p.value[i];
      p.value[i] = static_cast<T>(theta - lr * (mhat / (std::sqrt(vhat) + c.eps) + decay * theta));
    }
  }
}

/// One-cycle schedule with linear annealing: ramp from max/div to max over
/// pct_start * total steps, then down to max/final_div at `total`.
struct OneCycleSchedule {
  double max_lr = 1e-3;
  std::int64_t total_steps = 1000;
  double pct_start = 0.05;
  double div_factor = 25.0;
  double final_div_factor = 1e4;

  void validate() const {
    require(max_lr > 0 && total_steps > 0, ErrorCode::kConfigInvalid, "schedule needs max_lr > 0 and total_steps > 0");
    require(pct_start > 0 && pct_start < 1, ErrorCode::kConfigInvalid, "pct_start must lie in (0, 1)");
    require(div_factor > 0 && final_div_factor > 0, ErrorCode::kConfigInvalid, "div factors must be positive");
  }
};

inline double onecycle_lr(const OneCycleSchedule& s, std::int64_t step) {
  s.validate();
  if (step < 0 || step > s.total_steps)
    fail(ErrorCode::kStepOutOfRange, "step " + std::to_string(step) + " outside [0, " + std::to_string(s.total_steps) + "]");
  const double initial = s.max_lr / s.div_factor;
  const double final_lr = s.max_lr / s.final_div_factor;
  const double peak = s.pct_start * static_cast<double>(s.total_steps);
  const double x = static_cast<double>(step);
  if (x <= peak) return initial + (s.max_lr - initial) * (x / peak);
  return s.max_lr + (final_lr - s.max_lr) * ((x - peak) / (static_cast<double>(s.total_steps) - peak));
}

// ---------------------------------------------------------------------------
// Finite-difference verification.

/// Central-difference check of `analytic` (dL/d inputs) against the scalar
/// function `loss(inputs)`. Returns the max over entries of
/// |a - n| / max(|a|, |n|, 1e-6).
template <typename T, typename F>
double grad_check(F&& loss, std::vector<Tensor<T>> inputs, const std::vector<Tensor<T>>& analytic, double h = 1e-3) {
  require(analytic.size() == inputs.size(), ErrorCode::kShapeMismatch, "grad_check: one analytic gradient per input");
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    require(analytic[k].shape() == inputs[k].shape(), ErrorCode::kShapeMismatch, "grad_check: gradient shape mismatch");
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const T orig = inputs[k][i];
      inputs[k][i] = static_cast<T>(orig + h);
      const double up = static_cast<double>(loss(inputs));
      inputs[k][i] = static_cast<T>(orig - h);
      const double down = static_cast<double>(loss(inputs));
      inputs[k][i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = static_cast<double>(analytic[k][i]);
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

template <typename T, typename F>
double grad_check(F&& loss, std::initializer_list<Tensor<T>> inputs, std::initializer_list<Tensor<T>> analytic,
                  double h = 1e-3) {
  return grad_check(std::forward<F>(loss), std::vector<Tensor<T>>(inputs), std::vector<Tensor<T>>(analytic), h);
}

/// Sum of elementwise products, accumulated in double.
template <typename T>
double dot(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.size() == b.size(), ErrorCode::kShapeMismatch, "dot: size mismatch");
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return acc;
}

// ---------------------------------------------------------------------------
// Checkpoint file (little-endian):
//   "LOCK" u32 version u32 param_count
//   per param: u32 name_len, name, u8 is_bias, u32 rank, u32 dims[rank], f32 data
//   u8 has_optimizer; if set: i64 step, then f32 m and v for every param
//   u64 metadata_len, metadata bytes (free-form JSON written by the trainer)

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}
inline void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}
inline void put_f32(std::ostream& os, float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  put_u32(os, u);
}
inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) fail(ErrorCode::kIo, "unexpected end of binary file");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}
inline std::uint64_t get_u64(std::istream& is) {
  const std::uint64_t lo = get_u32(is);
  const std::uint64_t hi = get_u32(is);
  return lo | (hi << 32);
}
inline float get_f32(std::istream& is) {
  const std::uint32_t u = get_u32(is);
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}

}  // namespace detail

struct Checkpoint {
  std::vector<Param<float>> params;
  bool has_optimizer = false;
  OptimState<float> optimizer;
  std::string metadata;
};

inline void write_checkpoint(const std::string& path, const std::vector<Param<float>>& params,
                             const OptimState<float>* optim, const std::string& metadata) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorCode::kIo, "cannot write checkpoint " + path);
  os.write("LOCK", 4);
  detail::put_u32(os, kCheckpointVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    detail::put_u32(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    os.put(p.is_bias ? 1 : 0);
    detail::put_u32(os, static_cast<std::uint32_t>(p.value.rank()));
    for (auto d : p.value.shape()) detail::put_u32(os, static_cast<std::uint32_t>(d));
    for (float v : p.value.values()) detail::put_f32(os, v);
  }
  os.put(optim ? 1 : 0);
  if (optim) {
    detail::put_u64(os, static_cast<std::uint64_t>(optim->step));
    for (std::size_t i = 0; i < params.size(); ++i) {
      for (float v : optim->m[i].values()) detail::put_f32(os, v);
      for (float v : optim->v[i].values()) detail::put_f32(os, v);
    }
  }
  detail::put_u64(os, metadata.size());
  os.write(metadata.data(), static_cast<std::streamsize>(metadata.size()));
  if (!os) fail(ErrorCode::kIo, "failed writing checkpoint " + path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::kIo, "cannot open checkpoint " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "LOCK") fail(ErrorCode::kParse, path + " is not a checkpoint");
  const std::uint32_t version = detail::get_u32(is);
  require(version == kCheckpointVersion, ErrorCode::kParse, "unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t count = detail::get_u32(is);
  Checkpoint ck;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(detail::get_u32(is), '\0');
    is.read(name.data(), static_cast<std::streamsize>(name.size()));
    const bool is_bias = is.get() == 1;
    Shape shape(detail::get_u32(is));
    for (auto& d : shape) d = detail::get_u32(is);
    Tensor<float> value(shape);
    for (auto& v : value.values()) v = detail::get_f32(is);
    ck.params.emplace_back(std::move(name), std::move(value), is_bias);
  }
  ck.has_optimizer = is.get() == 1;
  if (ck.has_optimizer) {
    ck.optimizer.reset(ck.params);
    ck.optimizer.step = static_cast<std::int64_t>(detail::get_u64(is));
    for (std::size_t i = 0; i < ck.params.size(); ++i) {
      for (auto& v : ck.optimizer.m[i].values()) v = detail::get_f32(is);
      for (auto& v : ck.optimizer.v[i].values()) v = detail::get_f32(is);
    }
  }
  ck.metadata.resize(detail::get_u64(is));
  is.read(ck.metadata.data(), static_cast<std::streamsize>(ck.metadata.size()));
  if (!is) fail(ErrorCode::kIo, "truncated checkpoint " + path);
  return ck;
}

}  // namespace lookout::ndiff
