#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <memory>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "condvc/mode_codec.hpp"
#include "condvc/optim.hpp"

namespace condvc {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kLambdaRatio = 0.01;

// ---------------------------------------------------------------------------
// Corpus

struct CorpusConfig {
  std::vector<std::string> generators{"moving_square", "moving_texture", "global_pan"};
  double max_displacement{3.0};
  // Directory of clip folders (im1.png ...). Empty: synthetic only.
  std::string clip_root;
};

template <typename T>
struct ClipBatch {
  std::vector<Var<T>> frames;   // N entries of [B,3,P,P]
  std::vector<Tensor<T>> flows;  // N entries of [B,2,P,P] (entry 0 zero); synthetic only
  bool has_flows{false};
};

namespace detail {

template <typename T>
void stack_into(Tensor<T>& dst, int b, const Tensor<float>& src) {
  const std::size_t n = src.size();
  for (std::size_t i = 0; i < n; ++i) dst[b * n + i] = static_cast<T>(src[i]);
}

inline Tensor<float> crop_patch(const Tensor<float>& t, int y0, int x0, int p) {
  Tensor<float> out(Shape{1, t.c(), p, p});
  for (int c = 0; c < t.c(); ++c)
    for (int y = 0; y < p; ++y)
      for (int x = 0; x < p; ++x) out.at(0, c, y, x) = t.at(0, c, y0 + y, x0 + x);
  return out;
}

}  // namespace detail

// Seeded stream of training clips. Synthetic clips draw a fresh generator
// and seed per sample; real clips are random patch crops of clip folders.
class Corpus {
 public:
  Corpus(CorpusConfig cfg, int clip_len, int patch, std::uint64_t seed)
      : cfg_(std::move(cfg)), clip_len_(clip_len), patch_(patch), rng_(seed) {
    if (cfg_.generators.empty() && cfg_.clip_root.empty()) throw TrainingError("corpus: no generators and no clip_root");
    if (!cfg_.clip_root.empty()) {
      namespace fs = std::filesystem;
      if (!fs::is_directory(cfg_.clip_root)) throw TrainingError("corpus: clip_root is not a directory: " + cfg_.clip_root);
      for (const auto& e : fs::recursive_directory_iterator(cfg_.clip_root))
        if (e.is_regular_file() && e.path().filename() == "im1.png") clip_dirs_.push_back(e.path().parent_path());
      std::sort(clip_dirs_.begin(), clip_dirs_.end());
      if (clip_dirs_.empty()) throw TrainingError("corpus: no im1.png clips under " + cfg_.clip_root);
    }
  }

  bool synthetic() const { return clip_dirs_.empty(); }

  // One clip: frames [1,3,P,P] and ground-truth flows when synthetic.
  SequenceSource next_clip() {
    if (synthetic()) {
      SynthSpec s;
      s.generator = cfg_.generators[rng_.below(cfg_.generators.size())];
      s.width = s.height = patch_;
      s.frames = clip_len_;
      s.seed = rng_.next();
      s.max_displacement = cfg_.max_displacement;
      return synth_sequence(s);
    }
    const auto& dir = clip_dirs_[rng_.below(clip_dirs_.size())];
    SequenceSource full = load_clip_directory(dir);
    if (static_cast<int>(full.size()) < clip_len_)
      throw TrainingError("corpus: clip " + dir.string() + " has fewer than " + std::to_string(clip_len_) + " frames");
    if (full.height() < patch_ || full.width() < patch_)
      throw TrainingError("corpus: clip " + dir.string() + " smaller than patch " + std::to_string(patch_));
    const int y0 = static_cast<int>(rng_.below(full.height() - patch_ + 1));
    const int x0 = static_cast<int>(rng_.below(full.width() - patch_ + 1));
    SequenceSource out;
    out.provenance = full.provenance;
    for (int t = 0; t < clip_len_; ++t)
      out.frames.emplace_back(detail::crop_patch(full.frames[t].tensor(), y0, x0, patch_));
    return out;
  }

  template <typename T>
  ClipBatch<T> next_batch(int batch) {
    ClipBatch<T> b;
    std::vector<Tensor<T>> frames(clip_len_, Tensor<T>(Shape{batch, 3, patch_, patch_}));
    std::vector<Tensor<T>> flows(clip_len_, Tensor<T>(Shape{batch, 2, patch_, patch_}));
    b.has_flows = synthetic();
    for (int i = 0; i < batch; ++i) {
      const auto clip = next_clip();
      for (int t = 0; t < clip_len_; ++t) {
        detail::stack_into(frames[t], i, clip.frames[t].tensor());
        if (b.has_flows) detail::stack_into(flows[t], i, clip.true_flows[t].tensor());
      }
    }
    for (auto& f : frames) b.frames.push_back(constant(std::move(f)));
    if (b.has_flows) b.flows = std::move(flows);
    return b;
  }

 private:
  CorpusConfig cfg_;
  int clip_len_;
  int patch_;
  Rng rng_;
  std::vector<std::filesystem::path> clip_dirs_;
};

// ---------------------------------------------------------------------------
// Losses

template <typename T>
struct FrameLoss {
  int index{1};
  Var<T> total;
  double rate_bpp{0}, distortion{0}, aux{0};
};

inline double psnr_from_mse(double mse) { return mse <= 0 ? 100.0 : std::min(100.0, 10.0 * std::log10(1.0 / mse)); }

// L_i = bits_i / pixels + lambda1 * MSE(X̂, X) + lambda2 * MSE(X̄, X).
// The auxiliary term is skipped when `mc` is empty (I-frames).
template <typename T>
FrameLoss<T> frame_loss(int i, const Var<T>& bits, long long pixels, const Var<T>& recon, const Var<T>& target,
                        const Var<T>& mc, double lambda1, double lambda2) {
  if (i < 1) throw std::invalid_argument("frame_loss: frame index starts at 1");
  if (pixels <= 0) throw std::invalid_argument("frame_loss: pixel count must be positive");
  FrameLoss<T> f;
  f.index = i;
  const Var<T> rate = scale(bits, static_cast<T>(1.0 / static_cast<double>(pixels)));
  const Var<T> dist = mse(recon, target);
  Var<T> total = add(rate, scale(dist, static_cast<T>(lambda1)));
  f.rate_bpp = static_cast<double>(rate.item());
  f.distortion = static_cast<double>(dist.item());
  if (mc.value().size() > 0) {
    const Var<T> aux = mse(mc, target);
    f.aux = static_cast<double>(aux.item());
    total = add(total, scale(aux, static_cast<T>(lambda2)));
  }
  f.total = total;
  const char* bad = !std::isfinite(f.rate_bpp) ? "rate" : !std::isfinite(f.distortion) ? "distortion"
                                                      : !std::isfinite(f.aux)        ? "motion distortion"
                                                                                       : nullptr;
  if (bad) throw TrainingError("non-finite loss: " + std::string(bad) + " term of frame " + std::to_string(i));
  return f;
}

// eta_i = i, normalised to sum to one.
inline std::vector<double> sequence_weights(int n) {
  if (n < 1) throw std::invalid_argument("sequence_weights: N must be >= 1");
  const double denom = 0.5 * n * (n + 1);
  std::vector<double> w(n);
  for (int i = 1; i <= n; ++i) w[i - 1] = i / denom;
  return w;
}

template <typename T>
Var<T> sequence_loss(const std::vector<Var<T>>& frame_losses) {
  const auto w = sequence_weights(static_cast<int>(frame_losses.size()));
  Var<T> total = scale(frame_losses[0], static_cast<T>(w[0]));
  for (std::size_t i = 1; i < frame_losses.size(); ++i) total = add(total, scale(frame_losses[i], static_cast<T>(w[i])));
  return total;
}

template <typename T>
struct ClipLoss {
  Var<T> loss;
  std::vector<FrameLoss<T>> frames;
  double bpp{0};
  double mse{0};
  double psnr() const { return psnr_from_mse(mse); }
};

// Codes a training clip (first frame intra) and assembles the weighted loss.
template <typename T>
ClipLoss<T> clip_loss(const Codec<T>& codec, const std::vector<Var<T>>& frames, double lambda1, CodingMode mode,
                      Rng& rng, const ModeOverride& ov = {}) {
  const int n = static_cast<int>(frames.size());
  const auto roles = gop_schedule({n, n});
  PipelineState<T> st;
  ClipLoss<T> out;
  std::vector<Var<T>> losses;
  for (int i = 0; i < n; ++i) {
    const auto r = encode_frame(codec, frames[i], roles[i], st, mode, rng, ov);
    const Shape s = frames[i].shape();
    auto fl = frame_loss(i + 1, r.bits, static_cast<long long>(s.n) * s.h * s.w, r.recon, frames[i], r.mc, lambda1,
                         kLambdaRatio * lambda1);
    out.bpp += fl.rate_bpp / n;
    out.mse += fl.distortion / n;
    losses.push_back(fl.total);
    out.frames.push_back(std::move(fl));
  }
  out.loss = sequence_loss(losses);
  return out;
}

// Standalone pretraining of every coder and the two motion networks on
// synthetic clips with ground-truth flow. Needs at least 4 frames.
template <typename T>
Var<T> pretrain_loss(const Codec<T>& codec, const ClipBatch<T>& b, double lambda1, Rng& rng) {
  if (!b.has_flows) throw TrainingError("stage 0 needs synthetic clips with ground-truth flow");
  if (b.frames.size() < 4) throw TrainingError("stage 0 needs clips of at least 4 frames");
  const auto& x = b.frames;
  const Shape s = x[0].shape();
  const T inv_px = static_cast<T>(1.0 / (static_cast<double>(s.n) * s.h * s.w));
  const T l1 = static_cast<T>(lambda1);
  const double fscale = codec.config().flow_scale;
  auto rd = [&](const CodeResult<T>& c, const Var<T>& recon, const Var<T>& target) {
    return add(scale(add(c.latent_bits, c.hyper_bits), inv_px), scale(mse(recon, target), l1));
  };
  const Var<T> f1 = constant(b.flows[1]), f2 = constant(b.flows[2]), f3 = constant(b.flows[3]);

  const auto ci = codec.intra().code(x[0], CodingMode::Train, rng);
  Var<T> total = rd(ci, ci.recon, x[0]);

  const auto cf = code_flow_hyperprior(codec.flow_coder(), f1, CodingMode::Train, rng, fscale);
  total = add(total, rd(cf, warp(x[0], cf.recon), x[1]));

  const auto cc = code_flow_conditional(codec.flow_cond_coder(), f2, f1, CodingMode::Train, rng, fscale);
  total = add(total, rd(cc, warp(x[1], cc.recon), x[2]));

  // inter coder in the configuration the variant uses: alpha-masked with a
  // per-sample constant alpha, unmasked, or on the motion residual. The
  // prediction comes from the codec's own (detached) flow estimate; with
  // ground-truth flow it is near perfect on synthetic clips and the
  // conditional coder learns to copy its condition.
  const Var<T> flow_est = codec.flow_net()(x[1], x[0]);
  const Var<T> mc = warp(x[0], constant(flow_est.value()));
  const InterVariant variant = codec.config().variant;
  if (variant == InterVariant::Residual) {
    const Var<T> zero = constant(Tensor<T>(mc.shape()));
    const auto cx = codec.inter_coder().code(sub(x[1], mc), zero, CodingMode::Train, rng);
    total = add(total, rd(cx, clamp(add(mc, cx.recon), T(0), T(1)), x[1]));
  } else {
    Tensor<T> a(Shape{s.n, 1, s.h, s.w}, static_cast<T>(1));
    if (variant == InterVariant::Modes)
      for (int n = 0; n < s.n; ++n) {
        const T v = static_cast<T>(rng.uniform(0.25, 1.0));
        std::fill(a.data() + static_cast<std::size_t>(n) * s.h * s.w, a.data() + static_cast<std::size_t>(n + 1) * s.h * s.w, v);
      }
    const Var<T> alpha = constant(a);
    const auto cx = code_inter(codec.inter_coder(), x[1], mc, alpha, CodingMode::Train, rng);
    total = add(total, rd(cx, reconstruct(cx.recon, alpha, mc), x[1]));
  }

  // motion networks: supervised flow error in pixels^2
  const T wflow = static_cast<T>(0.1);
  total = add(total, scale(mse(flow_est, f1), wflow));
  FlowCoderState<T> hist;
  for (int t = 0; t < 3; ++t) hist.push_frame(x[t]);
  hist.push_flow(f1);
  hist.push_flow(f2);
  total = add(total, scale(mse(codec.extrapolator()(hist), f3), wflow));
  if (!std::isfinite(static_cast<double>(total.item()))) throw TrainingError("non-finite loss in stage 0 pretraining");
  return total;
}

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  double lambda1{2048};
  int gop{5};
  int batch{4};
  int patch{64};
  int stage0_steps{100};
  int stage1_epochs{5};
  int stage2_epochs{5};
  int steps_per_epoch{20};
  double lr0{1e-3};
  double lr1{1e-4};
  double lr2{1e-5};
  std::uint64_t seed{0};
  CorpusConfig corpus{};
  CodecConfig codec{};

  double lambda2() const { return kLambdaRatio * lambda1; }

  void validate() const {
    auto pos = [](double v, const char* n) {
      if (!(v > 0)) throw std::invalid_argument(std::string("train config: ") + n + " must be positive");
    };
    pos(lambda1, "lambda1");
    pos(gop, "gop");
    pos(batch, "batch");
    pos(patch, "patch");
    pos(lr0, "lr0");
    pos(lr1, "lr1");
    pos(lr2, "lr2");
    if (stage0_steps < 0 || stage1_epochs < 0 || stage2_epochs < 0 || steps_per_epoch < 1)
      throw std::invalid_argument("train config: step and epoch counts must be non-negative");
    if (patch % kCoderAlign) throw std::invalid_argument("train config: patch must be a multiple of 16");
    if (stage0_steps > 0 && gop < 4) throw std::invalid_argument("train config: stage 0 needs gop_train >= 4");
  }
};

inline std::string widths_text(const CoderWidths& w) {
  std::ostringstream os;
  os << w.analysis << "," << w.synthesis << "," << w.latent << "," << w.hyper;
  return os.str();
}

inline CoderWidths parse_widths(const std::string& s) {
  CoderWidths w;
  char c1, c2, c3;
  std::istringstream is(s);
  if (!(is >> w.analysis >> c1 >> w.synthesis >> c2 >> w.latent >> c3 >> w.hyper) || c1 != ',' || c2 != ',' || c3 != ',')
    throw std::invalid_argument("widths must be analysis,synthesis,latent,hyper: '" + s + "'");
  return w;
}

// Key/value form shared by config files, CLI overrides and checkpoints.
inline std::map<std::string, std::string> to_key_values(const TrainConfig& c) {
  auto num = [](double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
  };
  std::string gens;
  for (const auto& g : c.corpus.generators) gens += (gens.empty() ? "" : ",") + g;
  return {{"lambda1", num(c.lambda1)},
          {"gop_train", std::to_string(c.gop)},
          {"batch", std::to_string(c.batch)},
          {"patch", std::to_string(c.patch)},
          {"stage0_steps", std::to_string(c.stage0_steps)},
          {"stage1_epochs", std::to_string(c.stage1_epochs)},
          {"stage2_epochs", std::to_string(c.stage2_epochs)},
          {"steps_per_epoch", std::to_string(c.steps_per_epoch)},
          {"lr0", num(c.lr0)},
          {"lr1", num(c.lr1)},
          {"lr2", num(c.lr2)},
          {"seed", std::to_string(c.seed)},
          {"generators", gens},
          {"max_displacement", num(c.corpus.max_displacement)},
          {"clip_root", c.corpus.clip_root},
          {"intra_widths", widths_text(c.codec.intra)},
          {"motion_widths", widths_text(c.codec.motion)},
          {"inter_widths", widths_text(c.codec.inter)},
          {"flow_hidden", std::to_string(c.codec.flow_hidden)},
          {"extrapolator_hidden", std::to_string(c.codec.extrapolator_hidden)},
          {"mode_hidden", std::to_string(c.codec.mode_hidden)},
          {"flow_scale", num(c.codec.flow_scale)},
          {"variant", variant_name(c.codec.variant)}};
}

// Applies known keys; returns the keys it did not recognise.
inline std::vector<std::string> apply_key_values(TrainConfig& c, const std::map<std::string, std::string>& kv) {
  std::vector<std::string> unknown;
  for (const auto& [k, v] : kv) {
    try {
      if (k == "lambda1") c.lambda1 = std::stod(v);
      else if (k == "gop_train") c.gop = std::stoi(v);
      else if (k == "batch") c.batch = std::stoi(v);
      else if (k == "patch") c.patch = std::stoi(v);
      else if (k == "stage0_steps") c.stage0_steps = std::stoi(v);
      else if (k == "stage1_epochs") c.stage1_epochs = std::stoi(v);
      else if (k == "stage2_epochs") c.stage2_epochs = std::stoi(v);
      else if (k == "steps_per_epoch") c.steps_per_epoch = std::stoi(v);
      else if (k == "lr0") c.lr0 = std::stod(v);
      else if (k == "lr1") c.lr1 = std::stod(v);
      else if (k == "lr2") c.lr2 = std::stod(v);
      else if (k == "seed") c.seed = std::stoull(v);
      else if (k == "generators") {
        c.corpus.generators.clear();
        std::istringstream is(v);
        for (std::string g; std::getline(is, g, ',');)
          if (!g.empty()) c.corpus.generators.push_back(g);
      } else if (k == "max_displacement") c.corpus.max_displacement = std::stod(v);
      else if (k == "clip_root") c.corpus.clip_root = v;
      else if (k == "intra_widths") c.codec.intra = parse_widths(v);
      else if (k == "motion_widths") c.codec.motion = parse_widths(v);
      else if (k == "inter_widths") c.codec.inter = parse_widths(v);
      else if (k == "flow_hidden") c.codec.flow_hidden = std::stoi(v);
      else if (k == "extrapolator_hidden") c.codec.extrapolator_hidden = std::stoi(v);
      else if (k == "mode_hidden") c.codec.mode_hidden = std::stoi(v);
      else if (k == "flow_scale") c.codec.flow_scale = std::stod(v);
      else if (k == "variant") c.codec.variant = parse_variant(v);
      else unknown.push_back(k);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("bad value for " + k + " = '" + v + "': " + e.what());
    } catch (const std::out_of_range&) {
      throw std::invalid_argument("value out of range for " + k + " = '" + v + "'");
    }
  }
  return unknown;
}

inline std::string config_text(const TrainConfig& c) {
  std::string s;
  for (const auto& [k, v] : to_key_values(c)) s += k + "=" + v + "\n";
  return s;
}

// ---------------------------------------------------------------------------
// Training loop

struct TelemetryRow {
  long step{0};
  int stage{0};
  int epoch{0};
  double loss{0}, bpp{0}, psnr{0};
};

inline void write_telemetry_csv(std::ostream& os, const std::vector<TelemetryRow>& rows) {
  os << "step,stage,loss,bpp,psnr\n";
  os << std::setprecision(9);
  for (const auto& r : rows) os << r.step << "," << r.stage << "," << r.loss << "," << r.bpp << "," << r.psnr << "\n";
}

// Mean of `rows` per (stage, epoch).
inline std::vector<TelemetryRow> epoch_means(const std::vector<TelemetryRow>& rows) {
  std::vector<TelemetryRow> out;
  std::size_t i = 0;
  while (i < rows.size()) {
    std::size_t j = i;
    TelemetryRow m = rows[i];
    m.loss = m.bpp = m.psnr = 0;
    while (j < rows.size() && rows[j].stage == rows[i].stage && rows[j].epoch == rows[i].epoch) {
      m.loss += rows[j].loss;
      m.bpp += rows[j].bpp;
      m.psnr += rows[j].psnr;
      m.step = rows[j].step;
      ++j;
    }
    const double n = static_cast<double>(j - i);
    m.loss /= n;
    m.bpp /= n;
    m.psnr /= n;
    out.push_back(m);
    i = j;
  }
  return out;
}

template <typename T>
struct Trainer {
  Codec<T>& codec;
  TrainConfig cfg;
  Adam<T> adam;
  long step{0};
  std::vector<TelemetryRow> telemetry;
  std::function<void(const TelemetryRow&)> on_step;
  std::function<void(int)> on_stage_end;

  Trainer(Codec<T>& c, TrainConfig config)
      : codec(c), cfg(std::move(config)), adam(c.store(), all_names(c), AdamOptions{cfg.lr1}) {
    cfg.validate();
  }

  static std::set<std::string> all_names(const Codec<T>& c) {
    std::set<std::string> s;
    for (const auto& [k, v] : c.store().all()) s.insert(k);
    return s;
  }

  // Everything except the conditional coders.
  std::set<std::string> stage1_trainable() const {
    const auto frozen = codec.names_with_prefixes(Codec<T>::conditional_prefixes());
    std::set<std::string> s;
    for (const auto& [k, v] : codec.store().all())
      if (!frozen.count(k)) s.insert(k);
    return s;
  }

  void run_stage0(Corpus& corpus, Rng& rng) {
    codec.store().set_all_trainable(true);
    adam.set_lr(cfg.lr0);
    for (int k = 0; k < cfg.stage0_steps; ++k) {
      const auto b = corpus.next_batch<T>(cfg.batch);
      codec.store().zero_grad();
      const Var<T> loss = pretrain_loss(codec, b, cfg.lambda1, rng);
      backward(loss);
      adam.step();
      record(0, k / cfg.steps_per_epoch, static_cast<double>(loss.item()), 0, 0);
    }
  }

  // Runs `epochs` epochs of the weighted clip loss with the given trainable set.
  void run_stage(int stage, int epochs, double lr, const std::set<std::string>& trainable, Corpus& corpus, Rng& rng) {
    codec.store().set_trainable(trainable);
    adam.set_lr(lr);
    for (int e = 0; e < epochs; ++e)
      for (int k = 0; k < cfg.steps_per_epoch; ++k) {
        const auto b = corpus.next_batch<T>(cfg.batch);
        codec.store().zero_grad();
        ClipLoss<T> cl;
        try {
          cl = clip_loss(codec, b.frames, cfg.lambda1, CodingMode::Train, rng);
        } catch (const TrainingError& err) {
          throw TrainingError(std::string(err.what()) + " (stage " + std::to_string(stage) + ", step " +
                              std::to_string(step) + ")");
        }
        backward(cl.loss);
        adam.step();
        record(stage, e, static_cast<double>(cl.loss.item()), cl.bpp, cl.psnr());
      }
    codec.store().set_all_trainable(true);
  }

  void record(int stage, int epoch, double loss, double bpp, double psnr) {
    TelemetryRow r{++step, stage, epoch, loss, bpp, psnr};
    telemetry.push_back(r);
    if (on_step) on_step(r);
  }

  // Stage 0 pretraining, stage 1 with the conditional coders frozen, stage 2
  // end to end.
  void train_two_stage() {
    Corpus corpus(cfg.corpus, cfg.gop, cfg.patch, cfg.seed * 2654435761ULL + 1);
    Rng rng(cfg.seed ^ 0x5DEECE66DULL);
    if (cfg.stage0_steps > 0) run_stage0(corpus, rng);
    stage_end(0);
    run_stage(1, cfg.stage1_epochs, cfg.lr1, stage1_trainable(), corpus, rng);
    stage_end(1);
    run_stage(2, cfg.stage2_epochs, cfg.lr2, all_names(codec), corpus, rng);
    stage_end(2);
  }

  void stage_end(int stage) {
    if (on_stage_end) on_stage_end(stage);
  }

  // End-to-end fine-tuning used by the rate ladder.
  void fine_tune(int steps, double lr) {
    Corpus corpus(cfg.corpus, cfg.gop, cfg.patch, cfg.seed * 2654435761ULL + 7);
    Rng rng(cfg.seed ^ 0x2545F4914F6CDD1DULL);
    const int epochs = (steps + cfg.steps_per_epoch - 1) / cfg.steps_per_epoch;
    TrainConfig c = cfg;
    const int keep = cfg.steps_per_epoch;
    cfg.steps_per_epoch = std::min(steps, keep);
    run_stage(2, epochs, lr, all_names(codec), corpus, rng);
    cfg = c;
  }
};

// Builds a freshly initialised codec for a config.
template <typename T>
std::unique_ptr<Codec<T>> make_codec(const TrainConfig& cfg) {
  auto c = std::make_unique<Codec<T>>(cfg.codec);
  Rng rng(cfg.seed * 0x9E3779B97F4A7C15ULL + 3);
  c->init(rng);
  return c;
}

// Lower-rate models start from the base weights and fine-tune at their own
// lambda pair.
template <typename T>
std::vector<std::pair<double, std::unique_ptr<Codec<T>>>> init_rate_ladder(const Codec<T>& base, const TrainConfig& base_cfg,
                                                                           const std::vector<double>& targets,
                                                                           int fine_tune_steps, double lr) {
  std::vector<std::pair<double, std::unique_ptr<Codec<T>>>> out;
  for (double lambda : targets) {
    auto c = base.clone();
    if (fine_tune_steps > 0) {
      TrainConfig cfg = base_cfg;
      cfg.lambda1 = lambda;
      Trainer<T> t(*c, cfg);
      t.fine_tune(fine_tune_steps, lr);
    }
    out.emplace_back(lambda, std::move(c));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: "CVCK" magic, version, config text, step, named tensors,
// Adam moments.

struct Checkpoint {
  std::string config;
  long step{0};
  long adam_step{0};
  std::map<std::string, Tensor<float>> params;
  std::map<std::string, AdamSlot<float>> adam;
};

namespace detail {
inline constexpr char kCkptMagic[4] = {'C', 'V', 'C', 'K'};
inline constexpr std::uint32_t kCkptVersion = 1;

template <typename V>
void put(std::ostream& os, const V& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}
template <typename V>
V get(std::istream& is) {
  V v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(V))) throw std::runtime_error("checkpoint: truncated file");
  return v;
}
inline void put_string(std::ostream& os, const std::string& s) {
  put<std::uint64_t>(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::string get_string(std::istream& is) {
  const auto n = get<std::uint64_t>(is);
  if (n > (1ULL << 32)) throw std::runtime_error("checkpoint: corrupt string length");
  std::string s(n, '\0');
  if (!is.read(s.data(), static_cast<std::streamsize>(n))) throw std::runtime_error("checkpoint: truncated file");
  return s;
}
inline void put_tensor(std::ostream& os, const Tensor<float>& t) {
  const Shape s = t.shape();
  for (int d : {s.n, s.c, s.h, s.w}) put<std::int32_t>(os, d);
  os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
}
inline Tensor<float> get_tensor(std::istream& is) {
  Shape s;
  s.n = get<std::int32_t>(is);
  s.c = get<std::int32_t>(is);
  s.h = get<std::int32_t>(is);
  s.w = get<std::int32_t>(is);
  if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0 || s.numel() > (1ULL << 31))
    throw std::runtime_error("checkpoint: corrupt tensor shape " + s.str());
  Tensor<float> t(s);
  if (!is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float))))
    throw std::runtime_error("checkpoint: truncated file");
  return t;
}
}  // namespace detail

template <typename T>
Checkpoint make_checkpoint(const Codec<T>& codec, const std::string& config, long step, const Adam<T>* adam = nullptr) {
  Checkpoint c;
  c.config = config;
  c.step = step;
  for (const auto& [k, v] : codec.store().all()) c.params[k] = v.value().template cast<float>();
  if (adam) {
    c.adam_step = adam->step_count();
    for (const auto& [k, s] : adam->slots()) c.adam[k] = {s.m.template cast<float>(), s.v.template cast<float>()};
  }
  return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  os.write(detail::kCkptMagic, 4);
  detail::put<std::uint32_t>(os, detail::kCkptVersion);
  detail::put_string(os, c.config);
  detail::put<std::int64_t>(os, c.step);
  detail::put<std::uint64_t>(os, c.params.size());
  for (const auto& [k, t] : c.params) {
    detail::put_string(os, k);
    detail::put_tensor(os, t);
  }
  detail::put<std::int64_t>(os, c.adam_step);
  detail::put<std::uint64_t>(os, c.adam.size());
  for (const auto& [k, s] : c.adam) {
    detail::put_string(os, k);
    detail::put_tensor(os, s.m);
    detail::put_tensor(os, s.v);
  }
  if (!os) throw std::runtime_error("failed writing checkpoint " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, detail::kCkptMagic, 4) != 0)
    throw std::runtime_error(path.string() + " is not a checkpoint (bad magic)");
  const auto version = detail::get<std::uint32_t>(is);
  if (version != detail::kCkptVersion) throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  c.config = detail::get_string(is);
  c.step = detail::get<std::int64_t>(is);
  const auto np = detail::get<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < np; ++i) {
    auto k = detail::get_string(is);
    c.params[k] = detail::get_tensor(is);
  }
  c.adam_step = detail::get<std::int64_t>(is);
  const auto na = detail::get<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < na; ++i) {
    auto k = detail::get_string(is);
    AdamSlot<float> s;
    s.m = detail::get_tensor(is);
    s.v = detail::get_tensor(is);
    c.adam[k] = std::move(s);
  }
  return c;
}

inline TrainConfig config_from_checkpoint(const Checkpoint& c) {
  std::istringstream is(c.config);
  TrainConfig cfg;
  const auto unknown = apply_key_values(cfg, parse_key_values(is, "checkpoint config"));
  if (!unknown.empty()) throw std::runtime_error("checkpoint config has unknown key " + unknown.front());
  return cfg;
}

// Copies weights (and optionally Adam state) into a codec with matching names.
template <typename T>
void apply_checkpoint(const Checkpoint& c, Codec<T>& codec, Adam<T>* adam = nullptr) {
  for (auto& [k, v] : codec.store().all()) {
    auto it = c.params.find(k);
    if (it == c.params.end()) throw std::runtime_error("checkpoint lacks parameter " + k);
    require_same_shape(v.shape(), it->second.shape(), k.c_str());
    v.mutable_value() = it->second.template cast<T>();
  }
  if (c.params.size() != codec.store().all().size())
    throw std::runtime_error("checkpoint has parameters the model does not know");
  if (adam) {
    adam->set_step_count(c.adam_step);
    adam->slots().clear();
    for (const auto& [k, s] : c.adam) adam->slots()[k] = {s.m.template cast<T>(), s.v.template cast<T>()};
  }
}

template <typename T>
std::unique_ptr<Codec<T>> codec_from_checkpoint(const Checkpoint& c) {
  const TrainConfig cfg = config_from_checkpoint(c);
  auto codec = std::make_unique<Codec<T>>(cfg.codec);
  apply_checkpoint(c, *codec);
  return codec;
}

}  // namespace condvc
