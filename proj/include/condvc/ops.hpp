#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "condvc/autograd.hpp"

namespace condvc {

namespace detail {

inline int broadcast_dim(int a, int b, const Shape& sa, const Shape& sb) {
  if (a == b) return a;
  if (a == 1) return b;
  if (b == 1) return a;
  throw ShapeError("cannot broadcast " + sa.str() + " with " + sb.str());
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  return Shape{broadcast_dim(a.n, b.n, a, b), broadcast_dim(a.c, b.c, a, b),
               broadcast_dim(a.h, b.h, a, b), broadcast_dim(a.w, b.w, a, b)};
}

// Strides of `s` when read through output shape `out` (0 on broadcast dims).
inline std::array<std::size_t, 4> read_strides(const Shape& s, const Shape& out) {
  std::array<std::size_t, 4> st{static_cast<std::size_t>(s.c) * s.h * s.w,
                                static_cast<std::size_t>(s.h) * s.w,
                                static_cast<std::size_t>(s.w), 1};
  if (s.n == 1 && out.n != 1) st[0] = 0;
  if (s.c == 1 && out.c != 1) st[1] = 0;
  if (s.h == 1 && out.h != 1) st[2] = 0;
  if (s.w == 1 && out.w != 1) st[3] = 0;
  return st;
}

// Calls f(out_index, a_index, b_index) over the broadcast output.
template <typename F>
void for_each_broadcast(const Shape& out, const Shape& sa, const Shape& sb, F&& f) {
  if (sa == out && sb == out) {
    for (std::size_t i = 0; i < out.numel(); ++i) f(i, i, i);
    return;
  }
  const auto as = read_strides(sa, out);
  const auto bs = read_strides(sb, out);
  std::size_t o = 0;
  for (int n = 0; n < out.n; ++n)
    for (int c = 0; c < out.c; ++c)
      for (int y = 0; y < out.h; ++y) {
        std::size_t ai = n * as[0] + c * as[1] + y * as[2];
        std::size_t bi = n * bs[0] + c * bs[1] + y * bs[2];
        for (int x = 0; x < out.w; ++x, ++o) f(o, ai + x * as[3], bi + x * bs[3]);
      }
}

template <typename T, typename Fwd, typename DA, typename DB>
Var<T> binary(const Var<T>& a, const Var<T>& b, Fwd fwd, DA da, DB db) {
  const Shape sa = a.shape(), sb = b.shape();
  const Shape so = broadcast_shape(sa, sb);
  Tensor<T> out(so);
  const T* pa = a.value().data();
  const T* pb = b.value().data();
  T* po = out.data();
  for_each_broadcast(so, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) {
    po[o] = fwd(pa[i], pb[j]);
  });
  return make_result<T>(std::move(out), {a, b}, [a, b, so, sa, sb, da, db](Node<T>& self) {
    const T* g = self.grad.data();
    const T* pa = a.value().data();
    const T* pb = b.value().data();
    Node<T>* na = a.node();
    Node<T>* nb = b.node();
    T* ga = na->requires_grad ? na->ensure_grad().data() : nullptr;
    T* gb = nb->requires_grad ? nb->ensure_grad().data() : nullptr;
    for_each_broadcast(so, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) {
      if (ga) ga[i] += g[o] * da(pa[i], pb[j]);
      if (gb) gb[j] += g[o] * db(pa[i], pb[j]);
    });
  });
}

// Elementwise unary op; df receives (input, output).
template <typename T, typename Fwd, typename Df>
Var<T> unary(const Var<T>& a, Fwd fwd, Df df) {
  Tensor<T> out(a.shape());
  const T* pa = a.value().data();
  T* po = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) po[i] = fwd(pa[i]);
  return make_result<T>(std::move(out), {a}, [a, df](Node<T>& self) {
    const T* g = self.grad.data();
    const T* pa = a.value().data();
    const T* po = self.value.data();
    T* ga = a.node()->ensure_grad().data();
    for (std::size_t i = 0; i < self.value.size(); ++i) ga[i] += g[i] * df(pa[i], po[i]);
  });
}

}  // namespace detail

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return detail::binary(
      a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return detail::binary(
      a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return detail::binary(
      a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <typename T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <typename T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <typename T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) { return mul(a, b); }

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  return detail::unary(a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
  return detail::unary(a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

// 1 - a, the complement of a weight map.
template <typename T>
Var<T> one_minus(const Var<T>& a) {
  return detail::unary(a, [](T x) { return T(1) - x; }, [](T, T) { return T(-1); });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& a, T slope) {
  return detail::unary(
      a, [slope](T x) { return x >= T(0) ? x : slope * x; },
      [slope](T x, T) { return x >= T(0) ? T(1) : slope; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  return detail::unary(
      a,
      [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
T softplus_value(T x) {
  return x > T(20) ? x : std::log1p(std::exp(x));
}

template <typename T>
Var<T> softplus(const Var<T>& a) {
  return detail::unary(
      a, [](T x) { return softplus_value(x); },
      [](T x, T) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      });
}

template <typename T>
Var<T> square(const Var<T>& a) {
  return detail::unary(a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

// Hard clamp; gradient is zero where the input was outside [lo, hi].
template <typename T>
Var<T> clamp(const Var<T>& a, T lo, T hi) {
  return detail::unary(
      a, [lo, hi](T x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](T x, T) { return (x >= lo && x <= hi) ? T(1) : T(0); });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  T s = T(0);
  for (T v : a.value().vec()) s += v;
  return make_result<T>(Tensor<T>::scalar(s), {a}, [a](Node<T>& self) {
    const T g = self.grad[0];
    for (T& v : a.node()->ensure_grad().vec()) v += g;
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

template <typename T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mse");
  return mean(square(sub(a, b)));
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  Shape s = parts[0].shape();
  int total_c = 0;
  for (const auto& p : parts) {
    const Shape& ps = p.shape();
    if (ps.n != s.n || ps.h != s.h || ps.w != s.w) {
      throw ShapeError("concat_channels: " + ps.str() + " vs " + s.str());
    }
    total_c += ps.c;
  }
  Shape so{s.n, total_c, s.h, s.w};
  Tensor<T> out(so);
  const std::size_t plane = s.plane();
  for (int n = 0; n < s.n; ++n) {
    int c0 = 0;
    for (const auto& p : parts) {
      const int pc = p.shape().c;
      std::copy_n(p.value().data() + static_cast<std::size_t>(n) * pc * plane, pc * plane,
                  out.data() + (static_cast<std::size_t>(n) * total_c + c0) * plane);
      c0 += pc;
    }
  }
  return make_result<T>(std::move(out), parts, [parts, total_c, plane](Node<T>& self) {
    const int nb = self.value.n();
    for (int n = 0; n < nb; ++n) {
      int c0 = 0;
      for (const auto& p : parts) {
        const int pc = p.shape().c;
        if (p.requires_grad()) {
          const T* g = self.grad.data() + (static_cast<std::size_t>(n) * total_c + c0) * plane;
          T* dst = p.node()->ensure_grad().data() + static_cast<std::size_t>(n) * pc * plane;
          for (std::size_t i = 0; i < pc * plane; ++i) dst[i] += g[i];
        }
        c0 += pc;
      }
    }
  });
}

// Channels [c0, c1).
template <typename T>
Var<T> slice_channels(const Var<T>& a, int c0, int c1) {
  const Shape s = a.shape();
  if (c0 < 0 || c1 > s.c || c0 >= c1) {
    throw ShapeError("slice_channels: bad range on " + s.str());
  }
  const int oc = c1 - c0;
  const std::size_t plane = s.plane();
  Tensor<T> out(Shape{s.n, oc, s.h, s.w});
  for (int n = 0; n < s.n; ++n) {
    std::copy_n(a.value().data() + (static_cast<std::size_t>(n) * s.c + c0) * plane,
                oc * plane, out.data() + static_cast<std::size_t>(n) * oc * plane);
  }
  return make_result<T>(std::move(out), {a}, [a, c0, oc, plane](Node<T>& self) {
    const Shape s = a.shape();
    T* ga = a.node()->ensure_grad().data();
    for (int n = 0; n < s.n; ++n) {
      const T* g = self.grad.data() + static_cast<std::size_t>(n) * oc * plane;
      T* dst = ga + (static_cast<std::size_t>(n) * s.c + c0) * plane;
      for (std::size_t i = 0; i < oc * plane; ++i) dst[i] += g[i];
    }
  });
}

// Single batch item [i, i+1).
template <typename T>
Var<T> slice_batch(const Var<T>& a, int i) {
  const Shape s = a.shape();
  if (i < 0 || i >= s.n) throw ShapeError("slice_batch: index out of range");
  const std::size_t len = static_cast<std::size_t>(s.c) * s.plane();
  Tensor<T> out(Shape{1, s.c, s.h, s.w});
  std::copy_n(a.value().data() + i * len, len, out.data());
  return make_result<T>(std::move(out), {a}, [a, i, len](Node<T>& self) {
    T* dst = a.node()->ensure_grad().data() + i * len;
    for (std::size_t k = 0; k < len; ++k) dst[k] += self.grad[k];
  });
}

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ConvGeom {
  int n, cin, h, w, k, stride, pad, ho, wo;
  std::size_t rows() const { return static_cast<std::size_t>(cin) * k * k; }
  std::size_t cols() const { return static_cast<std::size_t>(n) * ho * wo; }
};

template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  const std::size_t ncols = g.cols();
  const std::size_t p = static_cast<std::size_t>(g.ho) * g.wo;
  for (int ci = 0; ci < g.cin; ++ci)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        T* row = col + ((static_cast<std::size_t>(ci) * g.k + ky) * g.k + kx) * ncols;
        for (int n = 0; n < g.n; ++n) {
          const T* plane = x + (static_cast<std::size_t>(n) * g.cin + ci) * g.h * g.w;
          T* dst = row + n * p;
          for (int oy = 0; oy < g.ho; ++oy) {
            const int iy = oy * g.stride - g.pad + ky;
            T* d = dst + static_cast<std::size_t>(oy) * g.wo;
            if (iy < 0 || iy >= g.h) {
              std::fill_n(d, g.wo, T(0));
              continue;
            }
            const T* src = plane + static_cast<std::size_t>(iy) * g.w;
            for (int ox = 0; ox < g.wo; ++ox) {
              const int ix = ox * g.stride - g.pad + kx;
              d[ox] = (ix >= 0 && ix < g.w) ? src[ix] : T(0);
            }
          }
        }
      }
}

template <typename T>
void col2im(const T* col, const ConvGeom& g, T* dx) {
  const std::size_t ncols = g.cols();
  const std::size_t p = static_cast<std::size_t>(g.ho) * g.wo;
  for (int ci = 0; ci < g.cin; ++ci)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        const T* row = col + ((static_cast<std::size_t>(ci) * g.k + ky) * g.k + kx) * ncols;
        for (int n = 0; n < g.n; ++n) {
          T* plane = dx + (static_cast<std::size_t>(n) * g.cin + ci) * g.h * g.w;
          const T* srcp = row + n * p;
          for (int oy = 0; oy < g.ho; ++oy) {
            const int iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.h) continue;
            const T* s = srcp + static_cast<std::size_t>(oy) * g.wo;
            T* d = plane + static_cast<std::size_t>(iy) * g.w;
            for (int ox = 0; ox < g.wo; ++ox) {
              const int ix = ox * g.stride - g.pad + kx;
              if (ix >= 0 && ix < g.w) d[ix] += s[ox];
            }
          }
        }
      }
}

}  // namespace detail

// 2-D convolution. weight is [cout, cin, k, k]; bias is [1, cout, 1, 1] or
// an empty Var (no bias).
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride, int pad) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  if (ws.c != xs.c || ws.h != ws.w) {
    throw ShapeError("conv2d: input " + xs.str() + " incompatible with weight " + ws.str());
  }
  const bool has_bias = bias.value().size() > 0;
  if (has_bias && bias.value().size() != static_cast<std::size_t>(ws.n)) {
    throw ShapeError("conv2d: bias size does not match output channels");
  }
  detail::ConvGeom g{xs.n, xs.c, xs.h, xs.w, ws.h, stride, pad, 0, 0};
  g.ho = (xs.h + 2 * pad - g.k) / stride + 1;
  g.wo = (xs.w + 2 * pad - g.k) / stride + 1;
  if (g.ho <= 0 || g.wo <= 0) throw ShapeError("conv2d: input too small " + xs.str());
  const int cout = ws.n;
  const std::size_t p = static_cast<std::size_t>(g.ho) * g.wo;

  using Mat = detail::RowMat<T>;
  Mat col(g.rows(), g.cols());
  detail::im2col(x.value().data(), g, col.data());
  Eigen::Map<const Mat> wm(weight.value().data(), cout, g.rows());
  Mat om(cout, g.cols());
  om.noalias() = wm * col;

  Tensor<T> out(Shape{xs.n, cout, g.ho, g.wo});
  for (int n = 0; n < xs.n; ++n)
    for (int co = 0; co < cout; ++co) {
      const T b = has_bias ? bias.value()[co] : T(0);
      const T* src = om.data() + static_cast<std::size_t>(co) * g.cols() + n * p;
      T* dst = out.data() + (static_cast<std::size_t>(n) * cout + co) * p;
      for (std::size_t i = 0; i < p; ++i) dst[i] = src[i] + b;
    }

  std::vector<Var<T>> parents{x, weight};
  if (has_bias) parents.push_back(bias);
  return make_result<T>(std::move(out), parents, [x, weight, bias, has_bias, g, cout, p](Node<T>& self) {
    using Mat = detail::RowMat<T>;
    Mat gm(cout, g.cols());
    for (int n = 0; n < g.n; ++n)
      for (int co = 0; co < cout; ++co) {
        const T* src = self.grad.data() + (static_cast<std::size_t>(n) * cout + co) * p;
        std::copy_n(src, p, gm.data() + static_cast<std::size_t>(co) * g.cols() + n * p);
      }
    if (has_bias && bias.requires_grad()) {
      T* gb = bias.node()->ensure_grad().data();
      for (int co = 0; co < cout; ++co) gb[co] += gm.row(co).sum();
    }
    if (weight.requires_grad()) {
      Mat col(g.rows(), g.cols());
      detail::im2col(x.value().data(), g, col.data());
      Eigen::Map<Mat> gw(weight.node()->ensure_grad().data(), cout, g.rows());
      gw.noalias() += gm * col.transpose();
    }
    if (x.requires_grad()) {
      Eigen::Map<const Mat> wm(weight.value().data(), cout, g.rows());
      Mat dcol(g.rows(), g.cols());
      dcol.noalias() = wm.transpose() * gm;
      detail::col2im(dcol.data(), g, x.node()->ensure_grad().data());
    }
  });
}

// Depth-to-space: [n, c*r*r, h, w] -> [n, c, h*r, w*r].
template <typename T>
Var<T> pixel_shuffle(const Var<T>& x, int r) {
  const Shape s = x.shape();
  if (s.c % (r * r) != 0) throw ShapeError("pixel_shuffle: channels not divisible by r^2");
  const int oc = s.c / (r * r);
  Shape so{s.n, oc, s.h * r, s.w * r};
  Tensor<T> out(so);
  auto map_index = [s, so, r, oc](int n, int c, int y, int x) {
    // returns (input index, output index) for input coordinate
    (void)oc;
    const int co = c / (r * r);
    const int sub = c % (r * r);
    const int oy = y * r + sub / r;
    const int ox = x * r + sub % r;
    return std::pair<std::size_t, std::size_t>{
        ((static_cast<std::size_t>(n) * s.c + c) * s.h + y) * s.w + x,
        ((static_cast<std::size_t>(n) * so.c + co) * so.h + oy) * so.w + ox};
  };
  const T* px = x.value().data();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < s.h; ++y)
        for (int xx = 0; xx < s.w; ++xx) {
          auto [i, o] = map_index(n, c, y, xx);
          out[o] = px[i];
        }
  return make_result<T>(std::move(out), {x}, [x, s, map_index](Node<T>& self) {
    T* gx = x.node()->ensure_grad().data();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c)
        for (int y = 0; y < s.h; ++y)
          for (int xx = 0; xx < s.w; ++xx) {
            auto [i, o] = map_index(n, c, y, xx);
            gx[i] += self.grad[o];
          }
  });
}

// 2x2 mean pooling; spatial dims must be even.
template <typename T>
Var<T> avg_pool2(const Var<T>& x) {
  const Shape s = x.shape();
  if (s.h % 2 || s.w % 2) throw ShapeError("avg_pool2: odd spatial size " + s.str());
  Shape so{s.n, s.c, s.h / 2, s.w / 2};
  Tensor<T> out(so);
  const T* px = x.value().data();
  for (int nc = 0; nc < s.n * s.c; ++nc)
    for (int y = 0; y < so.h; ++y)
      for (int xx = 0; xx < so.w; ++xx) {
        const std::size_t b = (static_cast<std::size_t>(nc) * s.h + 2 * y) * s.w + 2 * xx;
        out[(static_cast<std::size_t>(nc) * so.h + y) * so.w + xx] =
            T(0.25) * (px[b] + px[b + 1] + px[b + s.w] + px[b + s.w + 1]);
      }
  return make_result<T>(std::move(out), {x}, [x, s, so](Node<T>& self) {
    T* gx = x.node()->ensure_grad().data();
    for (int nc = 0; nc < s.n * s.c; ++nc)
      for (int y = 0; y < so.h; ++y)
        for (int xx = 0; xx < so.w; ++xx) {
          const T g = T(0.25) * self.grad[(static_cast<std::size_t>(nc) * so.h + y) * so.w + xx];
          const std::size_t b = (static_cast<std::size_t>(nc) * s.h + 2 * y) * s.w + 2 * xx;
          gx[b] += g;
          gx[b + 1] += g;
          gx[b + s.w] += g;
          gx[b + s.w + 1] += g;
        }
  });
}

namespace detail {
struct Tap {
  int i0, i1;
  double l;  // weight of i1
};

// Half-pixel-centred source taps for a 2x upsampling axis.
inline std::vector<Tap> upsample_taps(int in) {
  std::vector<Tap> taps(2 * in);
  for (int o = 0; o < 2 * in; ++o) {
    double src = (o + 0.5) / 2.0 - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(std::floor(src));
    int i1 = std::min(i0 + 1, in - 1);
    taps[o] = Tap{i0, i1, src - i0};
  }
  return taps;
}
}  // namespace detail

// Bilinear 2x upsampling (half-pixel centres, edge clamped).
template <typename T>
Var<T> upsample_bilinear2(const Var<T>& x) {
  const Shape s = x.shape();
  Shape so{s.n, s.c, s.h * 2, s.w * 2};
  const auto ty = detail::upsample_taps(s.h);
  const auto tx = detail::upsample_taps(s.w);
  Tensor<T> out(so);
  const T* px = x.value().data();
  for (int nc = 0; nc < s.n * s.c; ++nc) {
    const T* p = px + static_cast<std::size_t>(nc) * s.plane();
    T* o = out.data() + static_cast<std::size_t>(nc) * so.plane();
    for (int y = 0; y < so.h; ++y) {
      const T ly = static_cast<T>(ty[y].l);
      const T* r0 = p + static_cast<std::size_t>(ty[y].i0) * s.w;
      const T* r1 = p + static_cast<std::size_t>(ty[y].i1) * s.w;
      for (int xx = 0; xx < so.w; ++xx) {
        const T lx = static_cast<T>(tx[xx].l);
        const T top = (T(1) - lx) * r0[tx[xx].i0] + lx * r0[tx[xx].i1];
        const T bot = (T(1) - lx) * r1[tx[xx].i0] + lx * r1[tx[xx].i1];
        o[static_cast<std::size_t>(y) * so.w + xx] = (T(1) - ly) * top + ly * bot;
      }
    }
  }
  return make_result<T>(std::move(out), {x}, [x, s, so, ty, tx](Node<T>& self) {
    T* gx = x.node()->ensure_grad().data();
    for (int nc = 0; nc < s.n * s.c; ++nc) {
      T* p = gx + static_cast<std::size_t>(nc) * s.plane();
      const T* g = self.grad.data() + static_cast<std::size_t>(nc) * so.plane();
      for (int y = 0; y < so.h; ++y) {
        const T ly = static_cast<T>(ty[y].l);
        T* r0 = p + static_cast<std::size_t>(ty[y].i0) * s.w;
        T* r1 = p + static_cast<std::size_t>(ty[y].i1) * s.w;
        for (int xx = 0; xx < so.w; ++xx) {
          const T lx = static_cast<T>(tx[xx].l);
          const T gv = g[static_cast<std::size_t>(y) * so.w + xx];
          r0[tx[xx].i0] += (T(1) - ly) * (T(1) - lx) * gv;
          r0[tx[xx].i1] += (T(1) - ly) * lx * gv;
          r1[tx[xx].i0] += ly * (T(1) - lx) * gv;
          r1[tx[xx].i1] += ly * lx * gv;
        }
      }
    }
  });
}

// Backward warping: out(p) = bilinear sample of img at p + flow(p), with
// flow channel 0 horizontal and channel 1 vertical, in pixels. Sample
// positions are clamped to the image (edge replication) and the result is
// clamped to [0, 1]. Differentiable in both img and flow.
template <typename T>
Var<T> warp(const Var<T>& img, const Var<T>& flow) {
  const Shape is = img.shape();
  const Shape fs = flow.shape();
  if (fs.c != 2 || fs.n != is.n || fs.h != is.h || fs.w != is.w) {
    throw ShapeError("warp: image " + is.str() + " incompatible with flow " + fs.str());
  }
  const int H = is.h, W = is.w, C = is.c;
  const std::size_t plane = is.plane();
  Tensor<T> out(is);
  const T* pi = img.value().data();
  const T* pf = flow.value().data();
  for (int n = 0; n < is.n; ++n) {
    const T* fx = pf + (static_cast<std::size_t>(n) * 2) * plane;
    const T* fy = fx + plane;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const std::size_t q = static_cast<std::size_t>(y) * W + x;
        const T sx = std::min(std::max(static_cast<T>(x) + fx[q], T(0)), static_cast<T>(W - 1));
        const T sy = std::min(std::max(static_cast<T>(y) + fy[q], T(0)), static_cast<T>(H - 1));
        const int x0 = static_cast<int>(std::floor(sx));
        const int y0 = static_cast<int>(std::floor(sy));
        const int x1 = std::min(x0 + 1, W - 1);
        const int y1 = std::min(y0 + 1, H - 1);
        const T wx = sx - static_cast<T>(x0);
        const T wy = sy - static_cast<T>(y0);
        for (int c = 0; c < C; ++c) {
          const T* p = pi + (static_cast<std::size_t>(n) * C + c) * plane;
          const T top = (T(1) - wx) * p[y0 * W + x0] + wx * p[y0 * W + x1];
          const T bot = (T(1) - wx) * p[y1 * W + x0] + wx * p[y1 * W + x1];
          const T v = (T(1) - wy) * top + wy * bot;
          out[(static_cast<std::size_t>(n) * C + c) * plane + q] =
              std::min(std::max(v, T(0)), T(1));
        }
      }
  }
  return make_result<T>(std::move(out), {img, flow}, [img, flow, is](Node<T>& self) {
    const int H = is.h, W = is.w, C = is.c;
    const std::size_t plane = is.plane();
    const T* pi = img.value().data();
    const T* pf = flow.value().data();
    T* gi = img.requires_grad() ? img.node()->ensure_grad().data() : nullptr;
    T* gf = flow.requires_grad() ? flow.node()->ensure_grad().data() : nullptr;
    for (int n = 0; n < is.n; ++n) {
      const T* fx = pf + (static_cast<std::size_t>(n) * 2) * plane;
      const T* fy = fx + plane;
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const std::size_t q = static_cast<std::size_t>(y) * W + x;
          const T rx = static_cast<T>(x) + fx[q];
          const T ry = static_cast<T>(y) + fy[q];
          const bool inx = rx > T(0) && rx < static_cast<T>(W - 1);
          const bool iny = ry > T(0) && ry < static_cast<T>(H - 1);
          const T sx = std::min(std::max(rx, T(0)), static_cast<T>(W - 1));
          const T sy = std::min(std::max(ry, T(0)), static_cast<T>(H - 1));
          const int x0 = static_cast<int>(std::floor(sx));
          const int y0 = static_cast<int>(std::floor(sy));
          const int x1 = std::min(x0 + 1, W - 1);
          const int y1 = std::min(y0 + 1, H - 1);
          const T wx = sx - static_cast<T>(x0);
          const T wy = sy - static_cast<T>(y0);
          T dfx = T(0), dfy = T(0);
          for (int c = 0; c < C; ++c) {
            const std::size_t base = (static_cast<std::size_t>(n) * C + c) * plane;
            const T v = self.value[base + q];
            // clamp at the output: no gradient where the sample saturated
            T g = self.grad[base + q];
            if (v <= T(0) || v >= T(1)) {
              const T* p = pi + base;
              const T top = (T(1) - wx) * p[y0 * W + x0] + wx * p[y0 * W + x1];
              const T bot = (T(1) - wx) * p[y1 * W + x0] + wx * p[y1 * W + x1];
              const T raw = (T(1) - wy) * top + wy * bot;
              if (raw < T(0) || raw > T(1)) g = T(0);
            }
            if (g == T(0)) continue;
            const T* p = pi + base;
            const T a = p[y0 * W + x0], b = p[y0 * W + x1];
            const T cc = p[y1 * W + x0], d = p[y1 * W + x1];
            if (gi) {
              T* gp = gi + base;
              gp[y0 * W + x0] += g * (T(1) - wx) * (T(1) - wy);
              gp[y0 * W + x1] += g * wx * (T(1) - wy);
              gp[y1 * W + x0] += g * (T(1) - wx) * wy;
              gp[y1 * W + x1] += g * wx * wy;
            }
            if (gf) {
              if (inx) dfx += g * ((T(1) - wy) * (b - a) + wy * (d - cc));
              if (iny) dfy += g * ((T(1) - wx) * (cc - a) + wx * (d - b));
            }
          }
          if (gf) {
            gf[(static_cast<std::size_t>(n) * 2) * plane + q] += dfx;
            gf[(static_cast<std::size_t>(n) * 2 + 1) * plane + q] += dfy;
          }
        }
    }
  });
}

}  // namespace condvc
