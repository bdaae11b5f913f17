#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "condvc/ops.hpp"

namespace condvc {

// Portable seeded generator. std::*_distribution output is implementation
// defined, so samples are derived from the raw 64-bit stream here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * M_PI * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * M_PI * u2);
  }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : engine_() % n; }

  std::uint64_t next() { return engine_(); }

  // Independent child stream, for handing to sub-components.
  Rng fork() { return Rng(engine_() ^ 0x9E3779B97F4A7C15ULL); }

 private:
  std::mt19937_64 engine_;
  bool has_spare_{false};
  double spare_{0.0};
};

// Named parameter registry. Keys are module paths such as
// "inter_coder/g_a.0.weight"; std::map keeps iteration order deterministic.
template <typename T>
class ParamStore {
 public:
  Var<T> create(const std::string& name, Shape shape) {
    if (params_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
    Var<T> v(Tensor<T>(shape), true);
    params_.emplace(name, v);
    return v;
  }

  const std::map<std::string, Var<T>>& all() const { return params_; }
  std::map<std::string, Var<T>>& all() { return params_; }

  bool contains(const std::string& name) const { return params_.count(name) > 0; }
  Var<T>& at(const std::string& name) { return params_.at(name); }
  const Var<T>& at(const std::string& name) const { return params_.at(name); }

  std::vector<std::string> names_with_prefix(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& [k, v] : params_)
      if (k.rfind(prefix, 0) == 0) out.push_back(k);
    return out;
  }

  void zero_grad() {
    for (auto& [k, v] : params_) v.zero_grad();
  }

  // Only parameters in `trainable` record weight gradients.
  void set_trainable(const std::set<std::string>& trainable) {
    for (auto& [k, v] : params_) v.set_requires_grad(trainable.count(k) > 0);
  }
  void set_all_trainable(bool on) {
    for (auto& [k, v] : params_) v.set_requires_grad(on);
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [k, v] : params_) n += v.value().size();
    return n;
  }

  // Copies values by name; shapes must agree.
  void copy_values_from(const ParamStore& other) {
    for (auto& [k, v] : params_) {
      const auto& src = other.at(k).value();
      require_same_shape(v.shape(), src.shape(), k.c_str());
      v.mutable_value() = src;
    }
  }

 private:
  std::map<std::string, Var<T>> params_;
};

// Square-kernel convolution layer with registered parameters.
template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParamStore<T>& store, const std::string& name, int cin, int cout, int k, int stride,
         bool bias = true)
      : stride_(stride), pad_(k / 2) {
    weight_ = store.create(name + ".weight", Shape{cout, cin, k, k});
    if (bias) bias_ = store.create(name + ".bias", Shape{1, cout, 1, 1});
  }

  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and bias.
  void init_uniform(Rng& rng) {
    const Shape s = weight_.shape();
    const double bound = 1.0 / std::sqrt(static_cast<double>(s.c) * s.h * s.w);
    for (T& v : weight_.mutable_value().vec()) v = static_cast<T>(rng.uniform(-bound, bound));
    if (has_bias())
      for (T& v : bias_.mutable_value().vec()) v = static_cast<T>(rng.uniform(-bound, bound));
  }

  void init_zero() {
    weight_.mutable_value().fill(T(0));
    if (has_bias()) bias_.mutable_value().fill(T(0));
  }

  Var<T> operator()(const Var<T>& x) const { return conv2d(x, weight_, bias_, stride_, pad_); }

  bool has_bias() const { return bias_.value().size() > 0; }
  const Var<T>& weight() const { return weight_; }
  const Var<T>& bias() const { return bias_; }

 private:
  Var<T> weight_;
  Var<T> bias_;
  int stride_{1};
  int pad_{0};
};

}  // namespace condvc
