#pragma once

#include <cmath>
#include <map>
#include <set>
#include <string>

#include "condvc/nn.hpp"

namespace condvc {

struct AdamOptions {
  double lr{1e-4};
  double beta1{0.9};
  double beta2{0.999};
  double eps{1e-8};
};

template <typename T>
struct AdamSlot {
  Tensor<T> m;
  Tensor<T> v;
};

// Adam over a named subset of a ParamStore. Moments are kept per parameter
// name so they survive checkpointing.
template <typename T>
class Adam {
 public:
  Adam(ParamStore<T>& store, std::set<std::string> names, AdamOptions opt)
      : store_(&store), names_(std::move(names)), opt_(opt) {}

  void set_lr(double lr) { opt_.lr = lr; }
  const AdamOptions& options() const { return opt_; }
  const std::set<std::string>& names() const { return names_; }
  long step_count() const { return t_; }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (const auto& name : names_) {
      Var<T>& p = store_->at(name);
      if (!p.has_grad()) continue;
      auto& slot = slots_[name];
      if (slot.m.empty()) {
        slot.m = Tensor<T>(p.shape());
        slot.v = Tensor<T>(p.shape());
      }
      T* w = p.mutable_value().data();
      const T* g = p.grad().data();
      T* m = slot.m.data();
      T* v = slot.v.data();
      for (std::size_t i = 0; i < p.value().size(); ++i) {
        m[i] = static_cast<T>(opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g[i]);
        v[i] = static_cast<T>(opt_.beta2 * v[i] + (1.0 - opt_.beta2) * g[i] * g[i]);
        const double mh = m[i] / bc1;
        const double vh = v[i] / bc2;
        w[i] = static_cast<T>(w[i] - opt_.lr * mh / (std::sqrt(vh) + opt_.eps));
      }
    }
  }

  std::map<std::string, AdamSlot<T>>& slots() { return slots_; }
  const std::map<std::string, AdamSlot<T>>& slots() const { return slots_; }
  void set_step_count(long t) { t_ = t; }

 private:
  ParamStore<T>* store_;
  std::set<std::string> names_;
  AdamOptions opt_;
  std::map<std::string, AdamSlot<T>> slots_;
  long t_{0};
};

}  // namespace condvc
