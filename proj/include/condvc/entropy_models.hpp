#pragma once

#include <array>
#include <cmath>
#include <string>

#include "condvc/nn.hpp"

namespace condvc {

enum class CodingMode { Train, Eval };

inline constexpr double kScaleFloor = 0.11;
inline constexpr double kProbabilityFloor = 1.0 / 65536.0;  // 2^-16
inline constexpr double kLn2 = 0.69314718055994530942;

// Train: additive U(-0.5, 0.5) noise (gradient passes straight through).
// Eval: round half to even; the result carries no gradient.
template <typename T>
Var<T> quantize(const Var<T>& x, CodingMode mode, Rng& rng) {
  if (mode == CodingMode::Eval) {
    Tensor<T> q(x.shape());
    for (std::size_t i = 0; i < q.size(); ++i) q[i] = std::nearbyint(x.value()[i]);
    return constant(std::move(q));
  }
  Tensor<T> noise(x.shape());
  for (T& v : noise.vec()) v = static_cast<T>(rng.uniform(-0.5, 0.5));
  return add(x, constant(std::move(noise)));
}

// Rounds in the forward pass and passes the gradient through unchanged. Used
// for the synthesis input during training so the decoder sees the same
// integer latents it gets at eval time; the rate still uses the noisy proxy.
template <typename T>
Var<T> ste_round(const Var<T>& x) {
  Tensor<T> q(x.shape());
  for (std::size_t i = 0; i < q.size(); ++i) q[i] = std::nearbyint(x.value()[i]);
  return make_result<T>(std::move(q), {x}, [x](Node<T>& self) {
    if (!x.requires_grad()) return;
    T* g = x.node()->ensure_grad().data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

namespace detail {
inline bool& noisy_synthesis_flag() {
  thread_local bool flag = false;
  return flag;
}
}  // namespace detail

// While alive, training-mode synthesis consumes the noisy latents instead of
// straight-through rounded ones. The graph is then smooth, which finite
// difference checks need.
class NoisySynthesisGuard {
 public:
  NoisySynthesisGuard() : prev_(detail::noisy_synthesis_flag()) { detail::noisy_synthesis_flag() = true; }
  ~NoisySynthesisGuard() { detail::noisy_synthesis_flag() = prev_; }
  NoisySynthesisGuard(const NoisySynthesisGuard&) = delete;
  NoisySynthesisGuard& operator=(const NoisySynthesisGuard&) = delete;

 private:
  bool prev_;
};

// Latents handed to the synthesis transform, given the raw y and its
// quantized proxy yq.
template <typename T>
Var<T> synthesis_input(const Var<T>& y, const Var<T>& yq, CodingMode mode) {
  if (mode != CodingMode::Train || detail::noisy_synthesis_flag()) return yq;
  return ste_round(y);
}

inline double std_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }
inline double std_normal_pdf(double x) { return 0.3989422804014327 * std::exp(-0.5 * x * x); }

// Probability mass of the unit bin centred on y under N(mu, sigma^2).
// Evaluated on the lower tail for accuracy.
inline double gaussian_bin_mass(double y, double mu, double sigma) {
  const double v = std::fabs(y - mu);
  return std_normal_cdf((0.5 - v) / sigma) - std_normal_cdf((-0.5 - v) / sigma);
}

// Per-element bits -log2 P(y) under a discretized Gaussian, with the scale
// floored at kScaleFloor and the mass floored at 2^-16.
template <typename T>
Var<T> gaussian_bits(const Var<T>& y, const Var<T>& mu, const Var<T>& sigma) {
  require_same_shape(y.shape(), mu.shape(), "gaussian_bits(mu)");
  require_same_shape(y.shape(), sigma.shape(), "gaussian_bits(sigma)");
  Tensor<T> out(y.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double s = std::max(static_cast<double>(sigma.value()[i]), kScaleFloor);
    const double lik = gaussian_bin_mass(y.value()[i], mu.value()[i], s);
    out[i] = static_cast<T>(-std::log2(std::max(lik, kProbabilityFloor)));
  }
  return make_result<T>(std::move(out), {y, mu, sigma}, [y, mu, sigma](Node<T>& self) {
    T* gy = y.requires_grad() ? y.node()->ensure_grad().data() : nullptr;
    T* gm = mu.requires_grad() ? mu.node()->ensure_grad().data() : nullptr;
    T* gs = sigma.requires_grad() ? sigma.node()->ensure_grad().data() : nullptr;
    for (std::size_t i = 0; i < self.value.size(); ++i) {
      const double g = self.grad[i];
      if (g == 0.0) continue;
      const double raw_s = sigma.value()[i];
      const double s = std::max(raw_s, kScaleFloor);
      const double d = static_cast<double>(y.value()[i]) - mu.value()[i];
      const double v = std::fabs(d);
      const double a = (0.5 - v) / s;
      const double b = (-0.5 - v) / s;
      const double lik = std_normal_cdf(a) - std_normal_cdf(b);
      const double dbits_dlik = -1.0 / (std::max(lik, kProbabilityFloor) * kLn2);
      const double dlik_dv = (-std_normal_pdf(a) + std_normal_pdf(b)) / s;
      const double dlik_ds = (-a * std_normal_pdf(a) + b * std_normal_pdf(b)) / s;
      const double sgn = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
      const double gv = g * dbits_dlik * dlik_dv;
      if (gy) gy[i] += static_cast<T>(gv * sgn);
      if (gm) gm[i] -= static_cast<T>(gv * sgn);
      if (gs) {
        const double gsig = g * dbits_dlik * dlik_ds;
        // lower bound passes gradient that would raise the scale
        if (raw_s >= kScaleFloor || gsig < 0.0) gs[i] += static_cast<T>(gsig);
      }
    }
  });
}

template <typename T>
Var<T> rate_gaussian(const Var<T>& y, const Var<T>& mu, const Var<T>& sigma) {
  return sum(gaussian_bits(y, mu, sigma));
}

// Learned non-parametric per-channel CDF (the factorized prior of the
// hyperprior design): a 1-3-3-3-1 monotone network per channel.
template <typename T>
class FactorizedPrior {
 public:
  static constexpr int kLayers = 4;
  static constexpr std::array<int, kLayers + 1> kDims{1, 3, 3, 3, 1};

  FactorizedPrior() = default;
  FactorizedPrior(ParamStore<T>& store, const std::string& name, int channels)
      : channels_(channels) {
    for (int k = 0; k < kLayers; ++k) {
      const std::string p = name + ".l" + std::to_string(k);
      matrix_[k] = store.create(p + ".matrix", Shape{channels, kDims[k + 1], kDims[k], 1});
      bias_[k] = store.create(p + ".bias", Shape{channels, kDims[k + 1], 1, 1});
      if (k < kLayers - 1) factor_[k] = store.create(p + ".factor", Shape{channels, kDims[k + 1], 1, 1});
    }
  }

  void init(Rng& rng, double init_scale = 10.0) {
    const double scale = std::pow(init_scale, 1.0 / kLayers);
    for (int k = 0; k < kLayers; ++k) {
      const double m = std::log(std::expm1(1.0 / scale / kDims[k + 1]));
      matrix_[k].mutable_value().fill(static_cast<T>(m));
      for (T& b : bias_[k].mutable_value().vec()) b = static_cast<T>(rng.uniform(-0.5, 0.5));
      if (k < kLayers - 1) factor_[k].mutable_value().fill(T(0));
    }
  }

  int channels() const { return channels_; }

  // Logit of the cumulative at u for channel c; when `grads` is non-null the
  // derivative with respect to u is returned through du and parameter
  // gradients scaled by `upstream` are accumulated.
  struct ParamGrads {
    std::array<T*, kLayers> matrix{};
    std::array<T*, kLayers> bias{};
    std::array<T*, kLayers> factor{};
  };

  double logit(int c, double u, double upstream, const ParamGrads* grads, double* du) const {
    std::array<std::array<double, 3>, kLayers + 1> h{};
    std::array<std::array<double, 3>, kLayers> pre{};
    h[0][0] = u;
    for (int k = 0; k < kLayers; ++k) {
      const int in = kDims[k], out = kDims[k + 1];
      const T* m = matrix_[k].value().data() + static_cast<std::size_t>(c) * out * in;
      const T* b = bias_[k].value().data() + static_cast<std::size_t>(c) * out;
      for (int o = 0; o < out; ++o) {
        double acc = b[o];
        for (int i = 0; i < in; ++i) acc += softplus_value<double>(m[o * in + i]) * h[k][i];
        pre[k][o] = acc;
        if (k < kLayers - 1) {
          const double f = std::tanh(static_cast<double>(factor_[k].value()[c * out + o]));
          h[k + 1][o] = acc + f * std::tanh(acc);
        } else {
          h[k + 1][o] = acc;
        }
      }
    }
    const double result = h[kLayers][0];
    if (du == nullptr) return result;

    std::array<double, 3> g{upstream, 0, 0};
    for (int k = kLayers - 1; k >= 0; --k) {
      const int in = kDims[k], out = kDims[k + 1];
      std::array<double, 3> gpre{};
      for (int o = 0; o < out; ++o) {
        if (k < kLayers - 1) {
          const double fr = factor_[k].value()[c * out + o];
          const double f = std::tanh(fr);
          const double tp = std::tanh(pre[k][o]);
          gpre[o] = g[o] * (1.0 + f * (1.0 - tp * tp));
          if (grads && grads->factor[k]) grads->factor[k][c * out + o] += static_cast<T>(g[o] * tp * (1.0 - f * f));
        } else {
          gpre[o] = g[o];
        }
        if (grads && grads->bias[k]) grads->bias[k][c * out + o] += static_cast<T>(gpre[o]);
      }
      const T* m = matrix_[k].value().data() + static_cast<std::size_t>(c) * out * in;
      std::array<double, 3> gh{};
      for (int o = 0; o < out; ++o)
        for (int i = 0; i < in; ++i) {
          const double raw = m[o * in + i];
          gh[i] += softplus_value(raw) * gpre[o];
          if (grads && grads->matrix[k]) {
            const double sig = 1.0 / (1.0 + std::exp(-raw));
            grads->matrix[k][static_cast<std::size_t>(c) * out * in + o * in + i] +=
                static_cast<T>(gpre[o] * h[k][i] * sig);
          }
        }
      g = gh;
    }
    *du = g[0];
    return result;
  }

  // Mass of the unit bin around u for channel c (no flooring).
  double bin_mass(int c, double u) const {
    const double lo = logit(c, u - 0.5, 0, nullptr, nullptr);
    const double hi = logit(c, u + 0.5, 0, nullptr, nullptr);
    const double s = (lo + hi) > 0 ? -1.0 : 1.0;
    return std::fabs(sigmoid_d(s * hi) - sigmoid_d(s * lo));
  }

  // Per-element bits of z (shape [n, channels, h, w]).
  Var<T> bits(const Var<T>& z) const {
    const Shape s = z.shape();
    if (s.c != channels_) throw ShapeError("FactorizedPrior: channel mismatch " + s.str());
    Tensor<T> out(s);
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c)
        for (std::size_t q = 0; q < s.plane(); ++q) {
          const std::size_t i = (static_cast<std::size_t>(n) * s.c + c) * s.plane() + q;
          out[i] = static_cast<T>(-std::log2(std::max(bin_mass(c, z.value()[i]), kProbabilityFloor)));
        }
    std::vector<Var<T>> parents{z};
    for (int k = 0; k < kLayers; ++k) {
      parents.push_back(matrix_[k]);
      parents.push_back(bias_[k]);
      if (k < kLayers - 1) parents.push_back(factor_[k]);
    }
    const FactorizedPrior self_copy = *this;
    return make_result<T>(std::move(out), parents, [z, self_copy](Node<T>& node) {
      self_copy.backward_bits(z, node);
    });
  }

 private:
  static double sigmoid_d(double x) {
    return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }

  void backward_bits(const Var<T>& z, Node<T>& node) const {
    ParamGrads pg;
    for (int k = 0; k < kLayers; ++k) {
      if (matrix_[k].requires_grad()) pg.matrix[k] = matrix_[k].node()->ensure_grad().data();
      if (bias_[k].requires_grad()) pg.bias[k] = bias_[k].node()->ensure_grad().data();
      if (k < kLayers - 1 && factor_[k].requires_grad()) pg.factor[k] = factor_[k].node()->ensure_grad().data();
    }
    T* gz = z.requires_grad() ? z.node()->ensure_grad().data() : nullptr;
    const Shape s = z.shape();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c)
        for (std::size_t q = 0; q < s.plane(); ++q) {
          const std::size_t i = (static_cast<std::size_t>(n) * s.c + c) * s.plane() + q;
          const double g = node.grad[i];
          if (g == 0.0) continue;
          const double u = z.value()[i];
          const double lo = logit(c, u - 0.5, 0, nullptr, nullptr);
          const double hi = logit(c, u + 0.5, 0, nullptr, nullptr);
          const double sg = (lo + hi) > 0 ? -1.0 : 1.0;
          const double ph = sigmoid_d(sg * hi), pl = sigmoid_d(sg * lo);
          const double d = ph - pl;
          const double lik = std::fabs(d);
          const double dbits = -g / (std::max(lik, kProbabilityFloor) * kLn2);
          const double sd = d >= 0 ? 1.0 : -1.0;
          // dlik/dhi and dlik/dlo
          const double ghi = dbits * sd * sg * ph * (1.0 - ph);
          const double glo = -dbits * sd * sg * pl * (1.0 - pl);
          double du_hi = 0, du_lo = 0;
          logit(c, u + 0.5, ghi, &pg, &du_hi);
          logit(c, u - 0.5, glo, &pg, &du_lo);
          if (gz) gz[i] += static_cast<T>(du_hi + du_lo);
        }
  }

  int channels_{0};
  std::array<Var<T>, kLayers> matrix_;
  std::array<Var<T>, kLayers> bias_;
  std::array<Var<T>, kLayers> factor_;
};

template <typename T>
Var<T> rate_factorized(const Var<T>& z, const FactorizedPrior<T>& prior) {
  return sum(prior.bits(z));
}

}  // namespace condvc
