#pragma once

#include <deque>
#include <stdexcept>
#include <string>

#include "condvc/coders.hpp"
#include "condvc/video.hpp"

namespace condvc {

class PreconditionError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Flows enter and leave the small motion networks divided by this many pixels.
inline constexpr double kFlowNetScale = 4.0;
// Flow coders see flow / kDefaultFlowScale; the value is written to manifests.
inline constexpr double kDefaultFlowScale = 20.0;

// Coarse-to-fine flow estimator: three pyramid levels (1/4, 1/2, 1), each
// refining the upsampled flow from the level below with a 3-layer CNN that
// sees the current frame, the warped reference and the running flow. The
// last layer of every level is zero-initialised, so an untrained estimator
// returns exactly zero flow.
template <typename T>
class FlowNet {
 public:
  static constexpr int kLevels = 3;

  FlowNet() = default;
  FlowNet(ParamStore<T>& store, const std::string& prefix, int hidden = 16) {
    for (int l = 0; l < kLevels; ++l) {
      const std::string p = prefix + "/level" + std::to_string(l);
      a_[l] = Conv2d<T>(store, p + ".a", 8, hidden, 3, 1);
      b_[l] = Conv2d<T>(store, p + ".b", hidden, hidden, 3, 1);
      c_[l] = Conv2d<T>(store, p + ".c", hidden, 2, 3, 1);
    }
  }

  void init(Rng& rng) {
    for (int l = 0; l < kLevels; ++l) {
      a_[l].init_uniform(rng);
      b_[l].init_uniform(rng);
      c_[l].init_zero();
    }
  }

  // Backward flow from `current` to `reference`: warp(reference, flow) ~ current.
  Var<T> operator()(const Var<T>& current, const Var<T>& reference) const {
    require_same_shape(current.shape(), reference.shape(), "estimate_flow");
    std::array<Var<T>, kLevels> cur, ref;
    cur[kLevels - 1] = current;
    ref[kLevels - 1] = reference;
    for (int l = kLevels - 2; l >= 0; --l) {
      cur[l] = avg_pool2(cur[l + 1]);
      ref[l] = avg_pool2(ref[l + 1]);
    }
    const Shape s0 = cur[0].shape();
    Var<T> flow = constant(Tensor<T>(Shape{s0.n, 2, s0.h, s0.w}));
    const T in_scale = static_cast<T>(1.0 / kFlowNetScale);
    const T out_scale = static_cast<T>(kFlowNetScale);
    for (int l = 0; l < kLevels; ++l) {
      if (l > 0) flow = scale(upsample_bilinear2(flow), T(2));
      const Var<T> warped = warp(ref[l], flow);
      const Var<T> in = concat_channels<T>({cur[l], warped, scale(flow, in_scale)});
      const Var<T> h = detail::lrelu(b_[l](detail::lrelu(a_[l](in))));
      flow = add(flow, scale(c_[l](h), out_scale));
    }
    return flow;
  }

 private:
  std::array<Conv2d<T>, kLevels> a_, b_, c_;
};

// Decoder-side motion history of the current GOP.
template <typename T>
struct FlowCoderState {
  std::deque<Var<T>> frames;  // oldest first: X̂_{t-3}, X̂_{t-2}, X̂_{t-1}
  std::deque<Var<T>> flows;   // oldest first: F̂_{t-2}, F̂_{t-1}

  void reset() {
    frames.clear();
    flows.clear();
  }
  void push_frame(Var<T> f) {
    frames.push_back(std::move(f));
    if (frames.size() > kFrameHistory) frames.pop_front();
  }
  void push_flow(Var<T> f) {
    flows.push_back(std::move(f));
    if (flows.size() > kFlowHistory) flows.pop_front();
  }
  bool full() const {
    return frames.size() == static_cast<std::size_t>(kFrameHistory) &&
           flows.size() == static_cast<std::size_t>(kFlowHistory);
  }
};

// Predicts the conditioning flow F_c for the current frame from decoded
// history only. Input: X̂_{t-1}, X̂_{t-2} warped by F̂_{t-1}, X̂_{t-3} warped
// by F̂_{t-2}, and both flows. Zero-initialised output layer.
template <typename T>
class FlowExtrapolator {
 public:
  FlowExtrapolator() = default;
  FlowExtrapolator(ParamStore<T>& store, const std::string& prefix, int hidden = 16) {
    a_ = Conv2d<T>(store, prefix + "/a", 13, hidden, 3, 1);
    b_ = Conv2d<T>(store, prefix + "/b", hidden, hidden, 3, 1);
    c_ = Conv2d<T>(store, prefix + "/c", hidden, 2, 3, 1);
  }

  void init(Rng& rng) {
    a_.init_uniform(rng);
    b_.init_uniform(rng);
    c_.init_zero();
  }

  Var<T> operator()(const FlowCoderState<T>& st) const {
    if (!st.full())
      throw PreconditionError("extrapolate_flow: needs " + std::to_string(kFrameHistory) + " decoded frames and " +
                              std::to_string(kFlowHistory) + " decoded flows, have " +
                              std::to_string(st.frames.size()) + " and " + std::to_string(st.flows.size()) +
                              "; use the hyperprior flow path");
    const T s = static_cast<T>(1.0 / kFlowNetScale);
    const Var<T>& f3 = st.frames[0];
    const Var<T>& f2 = st.frames[1];
    const Var<T>& f1 = st.frames[2];
    const Var<T>& v2 = st.flows[0];
    const Var<T>& v1 = st.flows[1];
    const Var<T> in = concat_channels<T>({f1, warp(f2, v1), warp(f3, v2), scale(v2, s), scale(v1, s)});
    const Var<T> h = detail::lrelu(b_(detail::lrelu(a_(in))));
    return scale(c_(h), static_cast<T>(kFlowNetScale));
  }

 private:
  Conv2d<T> a_, b_, c_;
};

// Flow coding wrappers: the coders work on flow / flow_scale; results are
// returned in pixels.
template <typename T>
CodeResult<T> code_flow_hyperprior(const HyperpriorCoder<T>& coder, const Var<T>& flow, CodingMode mode, Rng& rng,
                                   double flow_scale = kDefaultFlowScale) {
  CodeResult<T> r = coder.code(scale(flow, static_cast<T>(1.0 / flow_scale)), mode, rng);
  r.recon = scale(r.recon, static_cast<T>(flow_scale));
  return r;
}

template <typename T>
CodeResult<T> decode_flow_hyperprior(const HyperpriorCoder<T>& coder, const Latents<T>& lat,
                                     double flow_scale = kDefaultFlowScale) {
  CodeResult<T> r = coder.decode(lat);
  r.recon = scale(r.recon, static_cast<T>(flow_scale));
  return r;
}

template <typename T>
CodeResult<T> code_flow_conditional(const ConditionalCoder<T>& coder, const Var<T>& flow, const Var<T>& condition,
                                    CodingMode mode, Rng& rng, double flow_scale = kDefaultFlowScale) {
  require_same_shape(flow.shape(), condition.shape(), "code_flow_conditional");
  const T inv = static_cast<T>(1.0 / flow_scale);
  CodeResult<T> r = coder.code(scale(flow, inv), scale(condition, inv), mode, rng);
  r.recon = scale(r.recon, static_cast<T>(flow_scale));
  return r;
}

template <typename T>
CodeResult<T> decode_flow_conditional(const ConditionalCoder<T>& coder, const Latents<T>& lat,
                                      const Var<T>& condition, double flow_scale = kDefaultFlowScale) {
  CodeResult<T> r = coder.decode(lat, scale(condition, static_cast<T>(1.0 / flow_scale)));
  r.recon = scale(r.recon, static_cast<T>(flow_scale));
  return r;
}

}  // namespace condvc
