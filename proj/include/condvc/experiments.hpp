#pragma once

#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "condvc/eval.hpp"
#include "condvc/training.hpp"

// Desk-scale comparisons: conditional vs hyperprior flow coding, the full
// mode codec vs a residual-coding ablation, and the rate ladder.
namespace condvc::experiments {

struct DeskScale {
  int patch{32};
  int batch{4};
  int gop_train{5};
  int stage0_steps{1200};
  int stage1_steps{1200};
  int stage2_steps{1200};
  double lr0{1e-3};
  double lr1{1e-3};
  double lr2{1e-3};
  double lambda1{2048};
  // held-out evaluation; frames match the training patch because the
  // hyper grid at 32 px is all border and does not transfer to larger frames
  int heldout_clips{12};
  int heldout_size{32};
  int heldout_frames{16};
  int heldout_gop{8};
  // rate ladder
  int ladder_steps{150};
  double ladder_lr{1e-3};
};

inline TrainConfig desk_train_config(const DeskScale& d, std::uint64_t seed, InterVariant variant, double lambda1) {
  TrainConfig c;
  c.lambda1 = lambda1;
  c.gop = d.gop_train;
  c.batch = d.batch;
  c.patch = d.patch;
  c.stage0_steps = d.stage0_steps;
  c.steps_per_epoch = 20;
  c.stage1_epochs = d.stage1_steps / c.steps_per_epoch;
  c.stage2_epochs = d.stage2_steps / c.steps_per_epoch;
  c.lr0 = d.lr0;
  c.lr1 = d.lr1;
  c.lr2 = d.lr2;
  c.seed = seed;
  c.codec.variant = variant;
  return c;
}

// Held-out clips use their own seed range, disjoint from the training stream.
inline std::vector<NamedSequence> heldout_set(const DeskScale& d, std::uint64_t seed) {
  static const char* gens[] = {"moving_square", "moving_texture", "global_pan"};
  std::vector<NamedSequence> out;
  for (int i = 0; i < d.heldout_clips; ++i) {
    SynthSpec s;
    s.generator = gens[i % 3];
    s.width = s.height = d.heldout_size;
    s.frames = d.heldout_frames;
    s.seed = 0xC0FFEE0000ULL + seed * 1000 + static_cast<std::uint64_t>(i);
    out.push_back({s.generator + "_" + std::to_string(i), synth_sequence(s)});
  }
  return out;
}

struct RdScore {
  double bpp{0};
  double mse{0};
  double psnr{0};
  double rd_loss{0};  // bpp + lambda1 * mse, averaged over clips
};

template <typename T>
RdScore evaluate_rd(const Codec<T>& codec, const std::vector<NamedSequence>& seqs, const GopConfig& gop, double lambda1) {
  RdScore s;
  for (const auto& q : seqs) {
    const auto recs = evaluate_sequence(codec, q.source, gop, q.name, "", lambda1);
    RateReport tot;
    double mse = 0, psnr = 0;
    for (const auto& r : recs) {
      tot += r.rate;
      mse += r.mse;
      psnr += r.psnr;
    }
    mse /= static_cast<double>(recs.size());
    s.bpp += tot.bpp();
    s.mse += mse;
    s.psnr += psnr / static_cast<double>(recs.size());
    s.rd_loss += tot.bpp() + lambda1 * mse;
  }
  const double n = static_cast<double>(seqs.size());
  s.bpp /= n;
  s.mse /= n;
  s.psnr /= n;
  s.rd_loss /= n;
  return s;
}

// ---------------------------------------------------------------------------
// Flow coding: hyperprior vs extrapolation-conditioned coder

struct FlowLabConfig {
  std::vector<double> lambdas{32, 128, 512, 2048};
  int patch{32};
  int batch{4};
  int extrapolator_steps{300};
  int coder_steps{1000};
  double lr{1e-3};
  int heldout_clips{24};
  int heldout_size{32};
};

struct FlowLabResult {
  RDCurve hyperprior{"hyperprior", Metric::Psnr, {}};
  RDCurve conditional{"conditional", Metric::Psnr, {}};
  std::vector<double> lambdas;
  MatchedRate matched;      // hyperprior is the anchor
  double bd_rate{0};        // conditional against hyperprior; negative = fewer bits
  bool bd_valid{false};     // both curves monotone with overlapping quality
  std::string note;
  double mean_bpp_hyper{0}, mean_bpp_cond{0};
  double mean_psnr_hyper{0}, mean_psnr_cond{0};
};

namespace detail {

template <typename T>
struct FlowSample {
  Var<T> prev, cur;  // x_{t-1}, x_t
  Var<T> flow;       // ground-truth F_t
  FlowCoderState<T> hist;
};

// Clip of 4 frames: history x0..x2 with flows f1, f2; target flow f3.
template <typename T>
FlowSample<T> flow_sample(const ClipBatch<T>& b) {
  FlowSample<T> s;
  for (int t = 0; t < 3; ++t) s.hist.push_frame(b.frames[t]);
  s.hist.push_flow(constant(b.flows[1]));
  s.hist.push_flow(constant(b.flows[2]));
  s.prev = b.frames[2];
  s.cur = b.frames[3];
  s.flow = constant(b.flows[3]);
  return s;
}

inline std::set<std::string> with_prefix(const ParamStore<float>& store, const std::string& p) {
  const auto v = store.names_with_prefix(p);
  return {v.begin(), v.end()};
}

}  // namespace detail

// Trains both flow coders from the same initialisation at every lambda on
// ground-truth flows (history from ground truth too) and compares RD curves
// of flow bpp against warped-prediction PSNR on held-out clips.
inline FlowLabResult flow_lab(const FlowLabConfig& cfg, std::uint64_t seed) {
  CodecConfig cc;
  Codec<float> codec(cc);
  Rng init(seed * 0x9E3779B97F4A7C15ULL + 11);
  codec.init(init);
  auto& store = codec.store();
  const double fscale = cc.flow_scale;
  CorpusConfig corpus_cfg;

  // extrapolator, supervised
  {
    Corpus corpus(corpus_cfg, 4, cfg.patch, seed * 31 + 1);
    Adam<float> adam(store, detail::with_prefix(store, "extrapolator/"), AdamOptions{cfg.lr});
    store.set_trainable(detail::with_prefix(store, "extrapolator/"));
    for (int k = 0; k < cfg.extrapolator_steps; ++k) {
      const auto s = detail::flow_sample(corpus.next_batch<float>(cfg.batch));
      store.zero_grad();
      backward(mse(codec.extrapolator()(s.hist), s.flow));
      adam.step();
    }
  }

  // held-out flow samples
  std::vector<detail::FlowSample<float>> held;
  {
    Corpus corpus(corpus_cfg, 4, cfg.heldout_size, 0xF10E0000ULL + seed);
    for (int i = 0; i < cfg.heldout_clips; ++i) held.push_back(detail::flow_sample(corpus.next_batch<float>(1)));
  }

  const auto hyper_names = detail::with_prefix(store, "flow_coder/");
  const auto cond_names = detail::with_prefix(store, "flow_cond_coder/");
  std::map<std::string, Tensor<float>> initial;
  for (const auto& n : hyper_names) initial[n] = store.at(n).value();
  for (const auto& n : cond_names) initial[n] = store.at(n).value();

  FlowLabResult res;
  res.lambdas = cfg.lambdas;
  std::vector<RDPoint> ph, pc;
  for (double lambda : cfg.lambdas) {
    for (auto& [n, v] : initial) store.at(n).mutable_value() = v;
    std::set<std::string> both = hyper_names;
    both.insert(cond_names.begin(), cond_names.end());
    store.set_trainable(both);
    Adam<float> ah(store, hyper_names, AdamOptions{cfg.lr});
    Adam<float> ac(store, cond_names, AdamOptions{cfg.lr});
    Corpus corpus(corpus_cfg, 4, cfg.patch, seed * 31 + 2);
    Rng noise(seed * 131 + static_cast<std::uint64_t>(lambda));
    const float inv_px = 1.0f / static_cast<float>(cfg.batch * cfg.patch * cfg.patch);
    for (int k = 0; k < cfg.coder_steps; ++k) {
      const auto s = detail::flow_sample(corpus.next_batch<float>(cfg.batch));
      Var<float> cond;
      {
        NoGradGuard ng;
        cond = constant(codec.extrapolator()(s.hist).value());
      }
      store.zero_grad();
      const auto h = code_flow_hyperprior(codec.flow_coder(), s.flow, CodingMode::Train, noise, fscale);
      const auto c = code_flow_conditional(codec.flow_cond_coder(), s.flow, cond, CodingMode::Train, noise, fscale);
      auto loss = [&](const CodeResult<float>& r) {
        return add(scale(add(r.latent_bits, r.hyper_bits), inv_px),
                   scale(mse(warp(s.prev, r.recon), s.cur), static_cast<float>(lambda)));
      };
      backward(add(loss(h), loss(c)));
      ah.step();
      ac.step();
    }
    store.set_all_trainable(true);

    NoGradGuard ng;
    double bh = 0, bc = 0, mh = 0, mc = 0;
    for (const auto& s : held) {
      const double px = static_cast<double>(cfg.heldout_size) * cfg.heldout_size;
      const auto h = code_flow_hyperprior(codec.flow_coder(), s.flow, CodingMode::Eval, noise, fscale);
      const auto cond = codec.extrapolator()(s.hist);
      const auto c = code_flow_conditional(codec.flow_cond_coder(), s.flow, cond, CodingMode::Eval, noise, fscale);
      bh += (h.latent_bits.item() + h.hyper_bits.item()) / px;
      bc += (c.latent_bits.item() + c.hyper_bits.item()) / px;
      mh += mse(warp(s.prev, h.recon), s.cur).item();
      mc += mse(warp(s.prev, c.recon), s.cur).item();
    }
    const double n = static_cast<double>(held.size());
    ph.push_back({bh / n, psnr_from_mse_db(mh / n)});
    pc.push_back({bc / n, psnr_from_mse_db(mc / n)});
  }
  res.hyperprior = make_curve("hyperprior", Metric::Psnr, ph);
  res.conditional = make_curve("conditional", Metric::Psnr, pc);
  for (std::size_t i = 0; i < ph.size(); ++i) {
    res.mean_bpp_hyper += ph[i].bpp / ph.size();
    res.mean_bpp_cond += pc[i].bpp / pc.size();
    res.mean_psnr_hyper += ph[i].quality / ph.size();
    res.mean_psnr_cond += pc[i].quality / pc.size();
  }
  res.matched = matched_rate(res.hyperprior, res.conditional);
  try {
    res.bd_rate = bd_rate(res.hyperprior, res.conditional);
    res.bd_valid = true;
  } catch (const EvalError& e) {
    res.note = e.what();
  }
  return res;
}

// ---------------------------------------------------------------------------
// Full mode codec vs residual ablation

struct VariantRun {
  std::unique_ptr<Codec<float>> codec;
  std::vector<TelemetryRow> telemetry;
  RdScore heldout;
};

inline VariantRun train_variant(const DeskScale& d, std::uint64_t seed, InterVariant v,
                                const std::function<void(const TelemetryRow&)>& on_step = {}) {
  const TrainConfig cfg = desk_train_config(d, seed, v, d.lambda1);
  VariantRun r;
  r.codec = make_codec<float>(cfg);
  Trainer<float> t(*r.codec, cfg);
  t.on_step = on_step;
  t.train_two_stage();
  r.telemetry = t.telemetry;
  r.heldout = evaluate_rd(*r.codec, heldout_set(d, seed), GopConfig{d.heldout_gop, d.heldout_frames}, d.lambda1);
  return r;
}

// ---------------------------------------------------------------------------
// Rate ladder

struct LadderPoint {
  double lambda{0};
  RdScore score;
};

// Fine-tunes every rung, the top lambda included, from `base` for the same
// number of steps so the four models share a training budget, then evaluates
// them on held-out clips, lowest lambda first.
inline std::vector<LadderPoint> rate_ladder(const Codec<float>& base, const DeskScale& d, std::uint64_t seed) {
  TrainConfig cfg = desk_train_config(d, seed, base.config().variant, d.lambda1);
  cfg.codec = base.config();
  const std::vector<double> rungs(kLambdaLadder.begin(), kLambdaLadder.end());
  auto models = init_rate_ladder(base, cfg, rungs, d.ladder_steps, d.ladder_lr);
  const auto held = heldout_set(d, seed + 100);
  const GopConfig gop{d.heldout_gop, d.heldout_frames};
  std::vector<LadderPoint> out;
  for (const auto& [lambda, codec] : models) out.push_back({lambda, evaluate_rd(*codec, held, gop, lambda)});
  return out;
}

}  // namespace condvc::experiments
