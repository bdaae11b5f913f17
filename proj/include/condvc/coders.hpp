#pragma once

#include <array>
#include <numeric>
#include <string>
#include <string_view>

#include "condvc/entropy_models.hpp"

namespace condvc {

// Coded streams. There is deliberately no stream for the alpha/beta mode maps:
// they are regenerated at the decoder.
enum class Stream : int { Motion = 0, HyperMotion, Inter, HyperInter, Intra, HyperIntra };
inline constexpr int kStreamCount = 6;

inline constexpr std::array<std::string_view, kStreamCount> kStreamNames{
    "motion", "hyper_motion", "inter", "hyper_inter", "intra", "hyper_intra"};

inline std::string_view stream_name(Stream s) { return kStreamNames[static_cast<int>(s)]; }

struct RateReport {
  std::array<double, kStreamCount> bits{};
  long long pixel_count{0};

  double& operator[](Stream s) { return bits[static_cast<int>(s)]; }
  double operator[](Stream s) const { return bits[static_cast<int>(s)]; }

  double bits_total() const { return std::accumulate(bits.begin(), bits.end(), 0.0); }
  double bpp() const { return pixel_count > 0 ? bits_total() / static_cast<double>(pixel_count) : 0.0; }

  RateReport& operator+=(const RateReport& o) {
    for (int i = 0; i < kStreamCount; ++i) bits[i] += o.bits[i];
    pixel_count += o.pixel_count;
    return *this;
  }
};

// Quantized (eval) or noised (train) latents of one coded signal.
template <typename T>
struct Latents {
  Tensor<T> y;
  Tensor<T> z;
};

template <typename T>
struct CodeResult {
  Var<T> recon;
  Var<T> latent_bits;  // scalar
  Var<T> hyper_bits;   // scalar
  Latents<T> latents;
};

struct CoderWidths {
  int analysis{32};
  int synthesis{16};
  int latent{48};
  int hyper{32};
};

inline constexpr double kLeakySlope = 0.1;

namespace detail {
template <typename T>
void require_coder_dims(const Shape& s, int channels, const char* who) {
  if (s.c != channels) throw ShapeError(std::string(who) + ": expected " + std::to_string(channels) + " channels, got " + s.str());
  if (s.h % 16 || s.w % 16) throw ShapeError(std::string(who) + ": spatial dims must be divisible by 16, got " + s.str());
}

template <typename T>
Var<T> lrelu(const Var<T>& x) {
  return leaky_relu(x, static_cast<T>(kLeakySlope));
}
}  // namespace detail

// Mean-scale hyperprior autoencoder: latent at /4, hyper-latent at /16.
template <typename T>
class HyperpriorCoder {
 public:
  HyperpriorCoder() = default;
  HyperpriorCoder(ParamStore<T>& store, const std::string& prefix, int channels, CoderWidths wd = {})
      : channels_(channels), wd_(wd) {
    const std::string p = prefix + "/";
    ga0_ = Conv2d<T>(store, p + "g_a.0", channels, wd.analysis, 5, 2);
    ga1_ = Conv2d<T>(store, p + "g_a.1", wd.analysis, wd.latent, 5, 2);
    ha0_ = Conv2d<T>(store, p + "h_a.0", wd.latent, wd.hyper, 3, 1);
    ha1_ = Conv2d<T>(store, p + "h_a.1", wd.hyper, wd.hyper, 5, 2);
    ha2_ = Conv2d<T>(store, p + "h_a.2", wd.hyper, wd.hyper, 5, 2);
    hs0_ = Conv2d<T>(store, p + "h_s.0", wd.hyper, 4 * wd.hyper, 3, 1);
    hs1_ = Conv2d<T>(store, p + "h_s.1", wd.hyper, 4 * wd.hyper, 3, 1);
    hs2_ = Conv2d<T>(store, p + "h_s.2", wd.hyper, 2 * wd.latent, 3, 1);
    gs0_ = Conv2d<T>(store, p + "g_s.0", wd.latent, 4 * wd.synthesis, 3, 1);
    gs1_ = Conv2d<T>(store, p + "g_s.1", wd.synthesis, 4 * wd.synthesis, 3, 1);
    gs2_ = Conv2d<T>(store, p + "g_s.2", wd.synthesis, channels, 3, 1);
    prior_ = FactorizedPrior<T>(store, p + "prior", wd.hyper);
  }

  void init(Rng& rng) {
    for (auto* c : {&ga0_, &ga1_, &ha0_, &ha1_, &ha2_, &hs0_, &hs1_, &hs2_, &gs0_, &gs1_, &gs2_}) c->init_uniform(rng);
    prior_.init(rng);
  }

  int channels() const { return channels_; }
  const FactorizedPrior<T>& prior() const { return prior_; }

  CodeResult<T> code(const Var<T>& x, CodingMode mode, Rng& rng) const {
    detail::require_coder_dims<T>(x.shape(), channels_, "HyperpriorCoder");
    const Var<T> y = analysis(x);
    const Var<T> z = hyper_analysis(y);
    const Var<T> yq = quantize(y, mode, rng);
    const Var<T> zq = quantize(z, mode, rng);
    return synthesize(yq, zq, synthesis_input(y, yq, mode));
  }

  // Decoder side: everything follows from the quantized latents.
  CodeResult<T> decode(const Latents<T>& lat) const {
    const Var<T> y = constant(lat.y);
    return synthesize(y, constant(lat.z), y);
  }

  Var<T> analysis(const Var<T>& x) const { return ga1_(detail::lrelu(ga0_(x))); }

 private:
  Var<T> hyper_analysis(const Var<T>& y) const {
    return ha2_(detail::lrelu(ha1_(detail::lrelu(ha0_(y)))));
  }

  // yq feeds the rate, yd the synthesis (identical outside training).
  CodeResult<T> synthesize(const Var<T>& yq, const Var<T>& zq, const Var<T>& yd) const {
    Var<T> h = detail::lrelu(pixel_shuffle(hs0_(zq), 2));
    h = detail::lrelu(pixel_shuffle(hs1_(h), 2));
    const Var<T> params = hs2_(h);
    const Var<T> mu = slice_channels(params, 0, wd_.latent);
    const Var<T> sigma = softplus(slice_channels(params, wd_.latent, 2 * wd_.latent));
    Var<T> r = detail::lrelu(pixel_shuffle(gs0_(yd), 2));
    r = detail::lrelu(pixel_shuffle(gs1_(r), 2));
    CodeResult<T> out;
    out.recon = gs2_(r);
    out.latent_bits = rate_gaussian(yq, mu, sigma);
    out.hyper_bits = rate_factorized(zq, prior_);
    out.latents = Latents<T>{yq.value(), zq.value()};
    return out;
  }

  int channels_{0};
  CoderWidths wd_{};
  Conv2d<T> ga0_, ga1_, ha0_, ha1_, ha2_, hs0_, hs1_, hs2_, gs0_, gs1_, gs2_;
  FactorizedPrior<T> prior_;
};

// Conditional hyperprior autoencoder. The condition enters the analysis
// input (alongside target - condition), the entropy-parameter network and the synthesis. The condition
// branch has no biases, so an all-zero condition contributes exactly zero
// and the coder falls back to its unconditional path. The condition is also
// added to the output, so synthesis starts out predicting it.
template <typename T>
class ConditionalCoder {
 public:
  ConditionalCoder() = default;
  ConditionalCoder(ParamStore<T>& store, const std::string& prefix, int channels, CoderWidths wd = {})
      : channels_(channels), wd_(wd) {
    const std::string p = prefix + "/";
    ga0_ = Conv2d<T>(store, p + "g_a.0", 3 * channels, wd.analysis, 5, 2);
    ga1_ = Conv2d<T>(store, p + "g_a.1", wd.analysis, wd.latent, 5, 2);
    gc0_ = Conv2d<T>(store, p + "g_c.0", channels, wd.analysis, 5, 2, false);
    gc1_ = Conv2d<T>(store, p + "g_c.1", wd.analysis, wd.latent, 5, 2, false);
    ha0_ = Conv2d<T>(store, p + "h_a.0", wd.latent, wd.hyper, 3, 1);
    ha1_ = Conv2d<T>(store, p + "h_a.1", wd.hyper, wd.hyper, 5, 2);
    ha2_ = Conv2d<T>(store, p + "h_a.2", wd.hyper, wd.hyper, 5, 2);
    hs0_ = Conv2d<T>(store, p + "h_s.0", wd.hyper, 4 * wd.hyper, 3, 1);
    hs1_ = Conv2d<T>(store, p + "h_s.1", wd.hyper, 4 * wd.hyper, 3, 1);
    ep_ = Conv2d<T>(store, p + "ep", wd.hyper + wd.latent, 2 * wd.latent, 1, 1);
    gs0_ = Conv2d<T>(store, p + "g_s.0", 2 * wd.latent, 4 * wd.synthesis, 3, 1);
    gs1_ = Conv2d<T>(store, p + "g_s.1", wd.synthesis, 4 * wd.synthesis, 3, 1);
    gs2_ = Conv2d<T>(store, p + "g_s.2", wd.synthesis + channels, channels, 3, 1);
    prior_ = FactorizedPrior<T>(store, p + "prior", wd.hyper);
  }

  void init(Rng& rng) {
    for (auto* c : {&ga0_, &ga1_, &gc0_, &gc1_, &ha0_, &ha1_, &ha2_, &hs0_, &hs1_, &ep_, &gs0_, &gs1_, &gs2_})
      c->init_uniform(rng);
    prior_.init(rng);
  }

  int channels() const { return channels_; }

  CodeResult<T> code(const Var<T>& target, const Var<T>& condition, CodingMode mode, Rng& rng) const {
    detail::require_coder_dims<T>(target.shape(), channels_, "ConditionalCoder(target)");
    require_same_shape(target.shape(), condition.shape(), "ConditionalCoder");
    const Var<T> y = ga1_(detail::lrelu(ga0_(concat_channels<T>({target, condition, sub(target, condition)}))));
    const Var<T> z = ha2_(detail::lrelu(ha1_(detail::lrelu(ha0_(y)))));
    const Var<T> yq = quantize(y, mode, rng);
    const Var<T> zq = quantize(z, mode, rng);
    return synthesize(yq, zq, synthesis_input(y, yq, mode), condition);
  }

  CodeResult<T> decode(const Latents<T>& lat, const Var<T>& condition) const {
    detail::require_coder_dims<T>(condition.shape(), channels_, "ConditionalCoder(condition)");
    const Var<T> y = constant(lat.y);
    return synthesize(y, constant(lat.z), y, condition);
  }

 private:
  CodeResult<T> synthesize(const Var<T>& yq, const Var<T>& zq, const Var<T>& yd, const Var<T>& condition) const {
    const Var<T> cfeat = gc1_(detail::lrelu(gc0_(condition)));
    Var<T> h = detail::lrelu(pixel_shuffle(hs0_(zq), 2));
    h = detail::lrelu(pixel_shuffle(hs1_(h), 2));
    const Var<T> params = ep_(concat_channels<T>({h, cfeat}));
    const Var<T> mu = slice_channels(params, 0, wd_.latent);
    const Var<T> sigma = softplus(slice_channels(params, wd_.latent, 2 * wd_.latent));
    Var<T> r = detail::lrelu(pixel_shuffle(gs0_(concat_channels<T>({yd, cfeat})), 2));
    r = detail::lrelu(pixel_shuffle(gs1_(r), 2));
    CodeResult<T> out;
    out.recon = add(gs2_(concat_channels<T>({r, condition})), condition);
    out.latent_bits = rate_gaussian(yq, mu, sigma);
    out.hyper_bits = rate_factorized(zq, prior_);
    out.latents = Latents<T>{yq.value(), zq.value()};
    return out;
  }

  int channels_{0};
  CoderWidths wd_{};
  Conv2d<T> ga0_, ga1_, gc0_, gc1_, ha0_, ha1_, ha2_, hs0_, hs1_, ep_, gs0_, gs1_, gs2_;
  FactorizedPrior<T> prior_;
};

}  // namespace condvc
