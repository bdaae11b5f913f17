#pragma once

#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "condvc/motion.hpp"

namespace condvc {

// Produces the two decoder-side weight maps (alpha, beta) from X̂_{t-1},
// the motion-compensated frame X̄_t and the decoded flow F̂_t.
template <typename T>
class ModeGenerator {
 public:
  ModeGenerator() = default;
  ModeGenerator(ParamStore<T>& store, const std::string& prefix, int hidden = 32) {
    c1_ = Conv2d<T>(store, prefix + "/c1", 8, hidden, 3, 1);
    c2_ = Conv2d<T>(store, prefix + "/c2", hidden, hidden, 3, 1);
    proj_ = Conv2d<T>(store, prefix + "/proj", hidden, 2, 1, 1);
  }

  void init(Rng& rng) {
    c1_.init_uniform(rng);
    c2_.init_uniform(rng);
    proj_.init_zero();
  }

  struct Maps {
    Var<T> alpha;  // [N,1,H,W]
    Var<T> beta;
  };

  Maps operator()(const Var<T>& x_prev, const Var<T>& x_mc, const Var<T>& flow_hat) const {
    require_same_shape(x_prev.shape(), x_mc.shape(), "generate_modes");
    const Shape fs = flow_hat.shape();
    if (fs.c != 2 || fs.n != x_prev.shape().n || fs.h != x_prev.shape().h || fs.w != x_prev.shape().w)
      throw ShapeError("generate_modes: flow " + fs.str() + " does not match frame " + x_prev.shape().str());
    const Var<T> in = concat_channels<T>({x_prev, x_mc, scale(flow_hat, static_cast<T>(1.0 / kFlowNetScale))});
    const Var<T> m = sigmoid(proj_(c2_(detail::lrelu(c1_(in)))));
    return {slice_channels(m, 0, 1), slice_channels(m, 1, 2)};
  }

 private:
  Conv2d<T> c1_, c2_, proj_;
};

// X̃ = beta * X̄ + (1 - beta) * X̂_{t-1}, beta broadcast over colour.
template <typename T>
Var<T> blend_predictor(const Var<T>& beta, const Var<T>& x_mc, const Var<T>& x_prev) {
  require_same_shape(x_mc.shape(), x_prev.shape(), "blend_predictor");
  return add(mul(beta, x_mc), mul(one_minus(beta), x_prev));
}

// Codes alpha*X conditioned on alpha*X̃. Any coder with the ConditionalCoder
// call shape works, which lets tests substitute an identity stub.
template <typename T, typename Coder>
CodeResult<T> code_inter(const Coder& coder, const Var<T>& x, const Var<T>& x_tilde, const Var<T>& alpha,
                         CodingMode mode, Rng& rng) {
  require_same_shape(x.shape(), x_tilde.shape(), "code_inter");
  return coder.code(mul(alpha, x), mul(alpha, x_tilde), mode, rng);
}

// X̂ = clamp(X̌ + (1 - alpha) * X̃, 0, 1).
template <typename T>
Var<T> reconstruct(const Var<T>& x_check, const Var<T>& alpha, const Var<T>& x_tilde) {
  require_same_shape(x_check.shape(), x_tilde.shape(), "reconstruct");
  return clamp(add(x_check, mul(one_minus(alpha), x_tilde)), T(0), T(1));
}

// Modes: the full alpha/beta pipeline. Plain: no blending or masking, the
// inter coder sees (X, X̄) directly. Residual: ablation coding X - X̃ with an
// all-zero condition on the same backbone.
enum class InterVariant { Modes, Plain, Residual };

inline std::string variant_name(InterVariant v) {
  switch (v) {
    case InterVariant::Modes: return "modes";
    case InterVariant::Plain: return "plain";
    case InterVariant::Residual: return "residual";
  }
  return "?";
}

inline InterVariant parse_variant(const std::string& s) {
  if (s == "modes") return InterVariant::Modes;
  if (s == "plain") return InterVariant::Plain;
  if (s == "residual") return InterVariant::Residual;
  throw std::invalid_argument("unknown inter variant '" + s + "' (modes, plain, residual)");
}

// Rate ladder: one model per lambda1, lowest rate first.
inline constexpr std::array<double, 4> kLambdaLadder{256, 512, 1024, 2048};

struct CodecConfig {
  CoderWidths intra{};
  CoderWidths motion{};
  CoderWidths inter{};
  int flow_hidden{16};
  int extrapolator_hidden{16};
  int mode_hidden{32};
  double flow_scale{kDefaultFlowScale};
  InterVariant variant{InterVariant::Modes};
};

// Forces constant maps in place of the generator output.
struct ModeOverride {
  std::optional<double> alpha;
  std::optional<double> beta;
};

template <typename T>
class Codec {
 public:
  explicit Codec(CodecConfig cfg = {}) : cfg_(cfg) {
    intra_ = HyperpriorCoder<T>(store_, "intra_coder", 3, cfg.intra);
    flow_net_ = FlowNet<T>(store_, "flow_net", cfg.flow_hidden);
    flow_coder_ = HyperpriorCoder<T>(store_, "flow_coder", 2, cfg.motion);
    flow_cond_coder_ = ConditionalCoder<T>(store_, "flow_cond_coder", 2, cfg.motion);
    extrapolator_ = FlowExtrapolator<T>(store_, "extrapolator", cfg.extrapolator_hidden);
    mode_generator_ = ModeGenerator<T>(store_, "mode_generator", cfg.mode_hidden);
    inter_coder_ = ConditionalCoder<T>(store_, "inter_coder", 3, cfg.inter);
  }
  Codec(const Codec&) = delete;
  Codec& operator=(const Codec&) = delete;

  void init(Rng& rng) {
    intra_.init(rng);
    flow_net_.init(rng);
    flow_coder_.init(rng);
    flow_cond_coder_.init(rng);
    extrapolator_.init(rng);
    mode_generator_.init(rng);
    inter_coder_.init(rng);
  }

  // Independent copy with identical weights.
  std::unique_ptr<Codec> clone() const {
    auto c = std::make_unique<Codec>(cfg_);
    c->store_.copy_values_from(store_);
    return c;
  }

  // Parameter-name prefixes of the conditional coders (frozen in stage 1).
  static const std::vector<std::string>& conditional_prefixes() {
    static const std::vector<std::string> p{"flow_cond_coder/", "inter_coder/"};
    return p;
  }
  static const std::vector<std::string>& component_prefixes() {
    static const std::vector<std::string> p{"intra_coder/",     "flow_net/",       "flow_coder/", "flow_cond_coder/",
                                            "extrapolator/",    "mode_generator/", "inter_coder/"};
    return p;
  }

  std::set<std::string> names_with_prefixes(const std::vector<std::string>& prefixes) const {
    std::set<std::string> s;
    for (const auto& p : prefixes)
      for (auto& n : store_.names_with_prefix(p)) s.insert(n);
    return s;
  }

  const CodecConfig& config() const { return cfg_; }
  CodecConfig& mutable_config() { return cfg_; }
  ParamStore<T>& store() { return store_; }
  const ParamStore<T>& store() const { return store_; }

  const HyperpriorCoder<T>& intra() const { return intra_; }
  const FlowNet<T>& flow_net() const { return flow_net_; }
  const HyperpriorCoder<T>& flow_coder() const { return flow_coder_; }
  const ConditionalCoder<T>& flow_cond_coder() const { return flow_cond_coder_; }
  const FlowExtrapolator<T>& extrapolator() const { return extrapolator_; }
  const ModeGenerator<T>& mode_generator() const { return mode_generator_; }
  const ConditionalCoder<T>& inter_coder() const { return inter_coder_; }

 private:
  CodecConfig cfg_;
  ParamStore<T> store_;
  HyperpriorCoder<T> intra_;
  FlowNet<T> flow_net_;
  HyperpriorCoder<T> flow_coder_;
  ConditionalCoder<T> flow_cond_coder_;
  FlowExtrapolator<T> extrapolator_;
  ModeGenerator<T> mode_generator_;
  ConditionalCoder<T> inter_coder_;
};

template <typename T>
struct PipelineState {
  Var<T> prev;  // X̂_{t-1}
  FlowCoderState<T> motion;
  bool has_prev{false};

  void reset() {
    prev = Var<T>();
    has_prev = false;
    motion.reset();
  }
};

// Everything the decoder needs for one frame.
template <typename T>
struct FrameLatents {
  FrameRole role{FrameRole::I};
  Latents<T> motion;   // empty for I
  Latents<T> texture;  // intra or inter latents
};

template <typename T>
struct FrameResult {
  FrameRole role{FrameRole::I};
  Var<T> recon;      // X̂_t
  Var<T> mc;         // X̄_t
  Var<T> predictor;  // X̃_t
  Var<T> alpha, beta;
  Var<T> flow;       // F_t (encoder only)
  Var<T> flow_hat;   // F̂_t
  Var<T> flow_cond;  // F_c (P_later)
  Var<T> bits;         // scalar, all streams
  Var<T> motion_bits;  // scalar, motion + hyper_motion
  RateReport report;
  FrameLatents<T> latents;
};

namespace detail {

template <typename T>
double scalar_value(const Var<T>& v) {
  return static_cast<double>(v.value()[0]);
}

template <typename T>
Var<T> constant_map(const Shape& frame, double v) {
  return constant(Tensor<T>(Shape{frame.n, 1, frame.h, frame.w}, static_cast<T>(v)));
}

template <typename T>
void check_role(const PipelineState<T>& st, FrameRole role) {
  if (role == FrameRole::I) return;
  if (!st.has_prev) throw PreconditionError("encode_frame: P-frame without a previous reconstruction");
  if (role == FrameRole::PLater && !st.motion.full())
    throw PreconditionError("encode_frame: P_later needs a full motion history (" + std::to_string(kFrameHistory) +
                            " frames, " + std::to_string(kFlowHistory) + " flows)");
}

// Motion-compensated prediction and texture stage shared by the encoder
// (codes `x`) and decoder (decodes `texture`).
template <typename T>
void texture_stage(const Codec<T>& codec, const ModeOverride& ov, const Var<T>* x, const Latents<T>* texture,
                   CodingMode mode, Rng& rng, const PipelineState<T>& st, FrameResult<T>& r) {
  const Var<T>& prev = st.prev;
  const Shape fs = prev.shape();
  r.mc = warp(prev, r.flow_hat);
  const InterVariant variant = codec.config().variant;
  CodeResult<T> ic;
  if (variant == InterVariant::Plain) {
    r.predictor = r.mc;
    ic = x ? codec.inter_coder().code(*x, r.predictor, mode, rng) : codec.inter_coder().decode(*texture, r.predictor);
    r.recon = clamp(ic.recon, T(0), T(1));
  } else {
    if (!ov.alpha || !ov.beta) {
      auto maps = codec.mode_generator()(prev, r.mc, r.flow_hat);
      r.alpha = maps.alpha;
      r.beta = maps.beta;
    }
    if (ov.alpha) r.alpha = constant_map<T>(fs, *ov.alpha);
    if (ov.beta) r.beta = constant_map<T>(fs, *ov.beta);
    r.predictor = blend_predictor(r.beta, r.mc, prev);
    if (variant == InterVariant::Modes) {
      ic = x ? code_inter(codec.inter_coder(), *x, r.predictor, r.alpha, mode, rng)
             : codec.inter_coder().decode(*texture, mul(r.alpha, r.predictor));
      r.recon = reconstruct(ic.recon, r.alpha, r.predictor);
    } else {
      const Var<T> zero = constant(Tensor<T>(fs));
      ic = x ? codec.inter_coder().code(sub(*x, r.predictor), zero, mode, rng)
             : codec.inter_coder().decode(*texture, zero);
      r.recon = clamp(add(r.predictor, ic.recon), T(0), T(1));
    }
  }
  r.latents.texture = ic.latents;
  r.report[Stream::Inter] = scalar_value(ic.latent_bits);
  r.report[Stream::HyperInter] = scalar_value(ic.hyper_bits);
  r.bits = add(r.motion_bits, add(ic.latent_bits, ic.hyper_bits));
}

template <typename T>
void finish(FrameResult<T>& r, PipelineState<T>& st, const Shape& s, long long pixel_count) {
  r.report.pixel_count = pixel_count > 0 ? pixel_count : static_cast<long long>(s.n) * s.h * s.w;
  if (r.role == FrameRole::I) st.reset();
  st.prev = r.recon;
  st.has_prev = true;
  st.motion.push_frame(r.recon);
  if (r.role != FrameRole::I) st.motion.push_flow(r.flow_hat);
}

}  // namespace detail

// Codes one (batched) frame and advances the pipeline state. pixel_count
// overrides the rate denominator when the frame was padded.
template <typename T>
FrameResult<T> encode_frame(const Codec<T>& codec, const Var<T>& x, FrameRole role, PipelineState<T>& st,
                            CodingMode mode, Rng& rng, const ModeOverride& ov = {}, long long pixel_count = 0) {
  detail::check_role(st, role);
  FrameResult<T> r;
  r.role = role;
  r.latents.role = role;
  const double fscale = codec.config().flow_scale;
  if (role == FrameRole::I) {
    const auto c = codec.intra().code(x, mode, rng);
    r.recon = clamp(c.recon, T(0), T(1));
    r.latents.texture = c.latents;
    r.report[Stream::Intra] = detail::scalar_value(c.latent_bits);
    r.report[Stream::HyperIntra] = detail::scalar_value(c.hyper_bits);
    r.bits = add(c.latent_bits, c.hyper_bits);
  } else {
    require_same_shape(x.shape(), st.prev.shape(), "encode_frame");
    r.flow = codec.flow_net()(x, st.prev);
    CodeResult<T> mc;
    if (role == FrameRole::PLater) {
      r.flow_cond = codec.extrapolator()(st.motion);
      mc = code_flow_conditional(codec.flow_cond_coder(), r.flow, r.flow_cond, mode, rng, fscale);
    } else {
      mc = code_flow_hyperprior(codec.flow_coder(), r.flow, mode, rng, fscale);
    }
    r.flow_hat = mc.recon;
    r.latents.motion = mc.latents;
    r.report[Stream::Motion] = detail::scalar_value(mc.latent_bits);
    r.report[Stream::HyperMotion] = detail::scalar_value(mc.hyper_bits);
    r.motion_bits = add(mc.latent_bits, mc.hyper_bits);
    detail::texture_stage<T>(codec, ov, &x, nullptr, mode, rng, st, r);
  }
  detail::finish(r, st, x.shape(), pixel_count);
  return r;
}

// Decoder: rebuilds X̂_t from latents and decoder-side state only.
template <typename T>
FrameResult<T> decode_frame(const Codec<T>& codec, const FrameLatents<T>& lat, PipelineState<T>& st,
                            const ModeOverride& ov = {}, long long pixel_count = 0) {
  NoGradGuard ng;
  detail::check_role(st, lat.role);
  Rng unused(0);
  FrameResult<T> r;
  r.role = lat.role;
  r.latents = lat;
  const double fscale = codec.config().flow_scale;
  if (lat.role == FrameRole::I) {
    const auto c = codec.intra().decode(lat.texture);
    r.recon = clamp(c.recon, T(0), T(1));
    r.report[Stream::Intra] = detail::scalar_value(c.latent_bits);
    r.report[Stream::HyperIntra] = detail::scalar_value(c.hyper_bits);
    r.bits = add(c.latent_bits, c.hyper_bits);
  } else {
    CodeResult<T> mc;
    if (lat.role == FrameRole::PLater) {
      r.flow_cond = codec.extrapolator()(st.motion);
      mc = decode_flow_conditional(codec.flow_cond_coder(), lat.motion, r.flow_cond, fscale);
    } else {
      mc = decode_flow_hyperprior(codec.flow_coder(), lat.motion, fscale);
    }
    r.flow_hat = mc.recon;
    r.report[Stream::Motion] = detail::scalar_value(mc.latent_bits);
    r.report[Stream::HyperMotion] = detail::scalar_value(mc.hyper_bits);
    r.motion_bits = add(mc.latent_bits, mc.hyper_bits);
    detail::texture_stage<T>(codec, ov, nullptr, &lat.texture, CodingMode::Eval, unused, st, r);
  }
  const Shape s = r.recon.shape();
  detail::finish(r, st, s, pixel_count);
  return r;
}

// ---------------------------------------------------------------------------
// GOP level

inline constexpr int kCoderAlign = 16;

// Edge-replicating pad of a [1,C,H,W] tensor up to multiples of `align`.
template <typename T>
Tensor<T> pad_to_multiple(const Tensor<T>& t, int align) {
  const Shape s = t.shape();
  const int H = (s.h + align - 1) / align * align, W = (s.w + align - 1) / align * align;
  if (H == s.h && W == s.w) return t;
  Tensor<T> out(Shape{s.n, s.c, H, W});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) out.at(n, c, y, x) = t.at(n, c, std::min(y, s.h - 1), std::min(x, s.w - 1));
  return out;
}

template <typename T>
Tensor<T> crop(const Tensor<T>& t, int h, int w) {
  const Shape s = t.shape();
  if (s.h == h && s.w == w) return t;
  Tensor<T> out(Shape{s.n, s.c, h, w});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out.at(n, c, y, x) = t.at(n, c, y, x);
  return out;
}

struct GopResult {
  int height{0}, width{0};
  std::vector<FrameRole> roles;
  std::vector<Frame> recon;
  std::vector<RateReport> reports;
  std::vector<FrameLatents<float>> latents;
  std::vector<Tensor<float>> alpha, beta;  // cropped maps, empty tensors for I / plain

  RateReport total() const {
    RateReport t;
    for (const auto& r : reports) t += r;
    return t;
  }
};

template <typename T>
GopResult encode_gop(const Codec<T>& codec, const SequenceSource& src, GopConfig cfg, const ModeOverride& ov = {}) {
  src.validate();
  cfg.validate();
  cfg.frame_budget = std::min<int>(cfg.frame_budget, static_cast<int>(src.size()));
  NoGradGuard ng;
  Rng unused(0);
  GopResult g;
  g.height = src.height();
  g.width = src.width();
  g.roles = gop_schedule(cfg);
  PipelineState<T> st;
  const long long px = static_cast<long long>(g.height) * g.width;
  for (int i = 0; i < cfg.frame_budget; ++i) {
    const Var<T> x = constant(pad_to_multiple(src.frames[i].as<T>(), kCoderAlign));
    auto r = encode_frame(codec, x, g.roles[i], st, CodingMode::Eval, unused, ov, px);
    g.recon.push_back(Frame::clamped(crop(r.recon.value(), g.height, g.width)));
    g.reports.push_back(r.report);
    g.latents.push_back(FrameLatents<float>{r.role, {r.latents.motion.y.template cast<float>(), r.latents.motion.z.template cast<float>()},
                                            {r.latents.texture.y.template cast<float>(), r.latents.texture.z.template cast<float>()}});
    g.alpha.push_back(r.alpha.value().size() ? crop(r.alpha.value(), g.height, g.width).template cast<float>() : Tensor<float>());
    g.beta.push_back(r.beta.value().size() ? crop(r.beta.value(), g.height, g.width).template cast<float>() : Tensor<float>());
  }
  return g;
}

// Decoder-only replay of a coded GOP. Returns a GopResult whose recon,
// reports and maps come purely from latents.
template <typename T>
GopResult decode_gop(const Codec<T>& codec, const std::vector<FrameLatents<float>>& latents, int height, int width,
                     const ModeOverride& ov = {}) {
  GopResult g;
  g.height = height;
  g.width = width;
  PipelineState<T> st;
  const long long px = static_cast<long long>(height) * width;
  for (const auto& l : latents) {
    FrameLatents<T> lt{l.role, {l.motion.y.template cast<T>(), l.motion.z.template cast<T>()},
                       {l.texture.y.template cast<T>(), l.texture.z.template cast<T>()}};
    auto r = decode_frame(codec, lt, st, ov, px);
    g.roles.push_back(l.role);
    g.recon.push_back(Frame::clamped(crop(r.recon.value(), height, width)));
    g.reports.push_back(r.report);
    g.latents.push_back(l);
    g.alpha.push_back(r.alpha.value().size() ? crop(r.alpha.value(), height, width).template cast<float>() : Tensor<float>());
    g.beta.push_back(r.beta.value().size() ? crop(r.beta.value(), height, width).template cast<float>() : Tensor<float>());
  }
  return g;
}

}  // namespace condvc
