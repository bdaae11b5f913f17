#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <memory>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "condvc/mode_codec.hpp"

namespace condvc {

class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Quality metrics

inline constexpr double kPsnrCap = 100.0;

inline void require_same_dims(const Frame& a, const Frame& b, const char* what) {
  if (a.height() != b.height() || a.width() != b.width())
    throw EvalError(std::string(what) + ": dimension mismatch " + std::to_string(a.height()) + "x" +
                    std::to_string(a.width()) + " vs " + std::to_string(b.height()) + "x" + std::to_string(b.width()));
}

inline double mse_rgb(const Frame& a, const Frame& b) {
  require_same_dims(a, b, "mse");
  const auto& x = a.tensor().vec();
  const auto& y = b.tensor().vec();
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = static_cast<double>(x[i]) - static_cast<double>(y[i]);
    s += d * d;
  }
  return s / static_cast<double>(x.size());
}

inline double psnr_from_mse_db(double mse) {
  if (mse <= 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

inline double psnr_rgb(const Frame& a, const Frame& b) { return psnr_from_mse_db(mse_rgb(a, b)); }

inline constexpr std::array<double, 5> kMsssimWeights{0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
inline constexpr int kMsssimWindow = 11;
inline constexpr double kMsssimSigma = 1.5;
// Smallest side at which a scale is still evaluated.
inline constexpr int kMsssimMinSide = 10;

struct MsssimResult {
  double score{0};
  int scales{0};
};

namespace detail {

struct Plane {
  int h{0}, w{0};
  std::vector<double> v;
  double at(int y, int x) const { return v[static_cast<std::size_t>(y) * w + x]; }
};

inline std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> g(size);
  const double c = (size - 1) / 2.0;
  double s = 0;
  for (int i = 0; i < size; ++i) s += g[i] = std::exp(-(i - c) * (i - c) / (2 * sigma * sigma));
  for (double& v : g) v /= s;
  return g;
}

// Separable 'valid' filtering.
inline Plane filter_valid(const Plane& p, const std::vector<double>& g) {
  const int k = static_cast<int>(g.size());
  Plane tmp{p.h, p.w - k + 1, {}};
  tmp.v.assign(static_cast<std::size_t>(tmp.h) * tmp.w, 0.0);
  for (int y = 0; y < tmp.h; ++y)
    for (int x = 0; x < tmp.w; ++x) {
      double s = 0;
      for (int i = 0; i < k; ++i) s += g[i] * p.at(y, x + i);
      tmp.v[static_cast<std::size_t>(y) * tmp.w + x] = s;
    }
  Plane out{p.h - k + 1, tmp.w, {}};
  out.v.assign(static_cast<std::size_t>(out.h) * out.w, 0.0);
  for (int y = 0; y < out.h; ++y)
    for (int x = 0; x < out.w; ++x) {
      double s = 0;
      for (int i = 0; i < k; ++i) s += g[i] * tmp.at(y + i, x);
      out.v[static_cast<std::size_t>(y) * out.w + x] = s;
    }
  return out;
}

inline Plane pool2(const Plane& p) {
  Plane out{p.h / 2, p.w / 2, {}};
  out.v.resize(static_cast<std::size_t>(out.h) * out.w);
  for (int y = 0; y < out.h; ++y)
    for (int x = 0; x < out.w; ++x)
      out.v[static_cast<std::size_t>(y) * out.w + x] =
          0.25 * (p.at(2 * y, 2 * x) + p.at(2 * y, 2 * x + 1) + p.at(2 * y + 1, 2 * x) + p.at(2 * y + 1, 2 * x + 1));
  return out;
}

// Mean SSIM and mean contrast-structure term at one scale.
inline std::pair<double, double> ssim_cs(const Plane& a, const Plane& b) {
  const int side = std::min(a.h, a.w);
  int win = std::min(kMsssimWindow, side);
  if (win % 2 == 0) --win;
  const auto g = gaussian_window(win, kMsssimSigma);
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  Plane aa = a, bb = b, ab = a;
  for (std::size_t i = 0; i < a.v.size(); ++i) {
    aa.v[i] = a.v[i] * a.v[i];
    bb.v[i] = b.v[i] * b.v[i];
    ab.v[i] = a.v[i] * b.v[i];
  }
  const Plane mu_a = filter_valid(a, g), mu_b = filter_valid(b, g);
  const Plane s_aa = filter_valid(aa, g), s_bb = filter_valid(bb, g), s_ab = filter_valid(ab, g);
  double ssim = 0, cs = 0;
  const std::size_t n = mu_a.v.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double ma = mu_a.v[i], mb = mu_b.v[i];
    const double va = s_aa.v[i] - ma * ma, vb = s_bb.v[i] - mb * mb, cov = s_ab.v[i] - ma * mb;
    const double c = (2 * cov + c2) / (va + vb + c2);
    cs += c;
    ssim += c * (2 * ma * mb + c1) / (ma * ma + mb * mb + c1);
  }
  return {ssim / static_cast<double>(n), cs / static_cast<double>(n)};
}

}  // namespace detail

// Number of scales evaluated for an image whose smaller side is `side`.
inline int msssim_scales(int side) {
  int m = 0;
  while (m < 5 && (side >> m) >= kMsssimMinSide) ++m;
  return m;
}

// Per-channel multi-scale SSIM averaged over RGB. Frames smaller than 160 px
// use the leading scales that fit, with weights renormalised to sum to one.
inline MsssimResult msssim_rgb(const Frame& a, const Frame& b) {
  require_same_dims(a, b, "msssim");
  const int m = msssim_scales(std::min(a.height(), a.width()));
  if (m == 0) throw EvalError("msssim: frame smaller than " + std::to_string(kMsssimMinSide) + " px");
  double wsum = 0;
  for (int k = 0; k < m; ++k) wsum += kMsssimWeights[k];
  double total = 0;
  for (int c = 0; c < 3; ++c) {
    detail::Plane pa{a.height(), a.width(), {}}, pb = pa;
    pa.v.resize(static_cast<std::size_t>(pa.h) * pa.w);
    pb.v.resize(pa.v.size());
    for (int y = 0; y < pa.h; ++y)
      for (int x = 0; x < pa.w; ++x) {
        pa.v[static_cast<std::size_t>(y) * pa.w + x] = a.at(c, y, x);
        pb.v[static_cast<std::size_t>(y) * pa.w + x] = b.at(c, y, x);
      }
    double log_score = 0;
    bool zero = false;
    for (int k = 0; k < m; ++k) {
      const auto [ssim, cs] = detail::ssim_cs(pa, pb);
      const double term = std::max(0.0, k + 1 == m ? ssim : cs);
      if (term <= 0) zero = true;
      else log_score += kMsssimWeights[k] / wsum * std::log(term);
      if (k + 1 < m) {
        pa = detail::pool2(pa);
        pb = detail::pool2(pb);
      }
    }
    total += zero ? 0.0 : std::exp(log_score);
  }
  return {std::clamp(total / 3.0, 0.0, 1.0), m};
}

// ---------------------------------------------------------------------------
// RD curves and BD-rate

enum class Metric { Psnr, Msssim };

inline std::string metric_name(Metric m) { return m == Metric::Psnr ? "psnr" : "msssim"; }

struct RDPoint {
  double bpp{0};
  double quality{0};
};

struct RDCurve {
  std::string label;
  Metric metric{Metric::Psnr};
  std::vector<RDPoint> points;

  // Sorted by bpp (strictly increasing) with non-decreasing quality.
  void validate(std::size_t min_points = 2) const {
    if (points.size() < min_points)
      throw EvalError("curve '" + label + "' needs at least " + std::to_string(min_points) + " points, has " +
                      std::to_string(points.size()));
    for (std::size_t i = 0; i < points.size(); ++i) {
      const auto& p = points[i];
      if (!(p.bpp >= 0) || !std::isfinite(p.quality)) throw EvalError("curve '" + label + "': invalid point");
      if (metric == Metric::Msssim && (p.quality < 0 || p.quality > 1))
        throw EvalError("curve '" + label + "': MS-SSIM outside [0,1]");
      if (i == 0) continue;
      if (!(p.bpp > points[i - 1].bpp))
        throw EvalError("curve '" + label + "': bpp not strictly increasing at point " + std::to_string(i));
      if (p.quality < points[i - 1].quality)
        throw EvalError("curve '" + label + "': quality decreases from " + std::to_string(points[i - 1].quality) +
                        " to " + std::to_string(p.quality) + " at bpp " + std::to_string(p.bpp));
    }
  }
};

// Builds a curve from unordered points, sorting by bpp.
inline RDCurve make_curve(std::string label, Metric m, std::vector<RDPoint> pts) {
  std::sort(pts.begin(), pts.end(), [](const RDPoint& a, const RDPoint& b) { return a.bpp < b.bpp; });
  return RDCurve{std::move(label), m, std::move(pts)};
}

// Shape-preserving piecewise cubic Hermite interpolant (Fritsch-Carlson
// derivatives with the three-point end rule, as in common PCHIP codes).
class Pchip {
 public:
  Pchip(std::vector<double> x, std::vector<double> y) : x_(std::move(x)), y_(std::move(y)) {
    const std::size_t n = x_.size();
    if (n < 2 || y_.size() != n) throw EvalError("pchip: need at least two points");
    for (std::size_t i = 1; i < n; ++i)
      if (!(x_[i] > x_[i - 1])) throw EvalError("pchip: abscissae must be strictly increasing");
    std::vector<double> h(n - 1), delta(n - 1);
    for (std::size_t i = 0; i + 1 < n; ++i) {
      h[i] = x_[i + 1] - x_[i];
      delta[i] = (y_[i + 1] - y_[i]) / h[i];
    }
    d_.assign(n, 0.0);
    if (n == 2) {
      d_[0] = d_[1] = delta[0];
      return;
    }
    for (std::size_t k = 1; k + 1 < n; ++k) {
      if (delta[k - 1] * delta[k] <= 0) continue;
      const double w1 = 2 * h[k] + h[k - 1], w2 = h[k] + 2 * h[k - 1];
      d_[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k]);
    }
    d_[0] = end_slope(h[0], h[1], delta[0], delta[1]);
    d_[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
  }

  // Exact integral over [a, b] within the data range.
  double integral(double a, double b) const {
    if (a < x_.front() - 1e-12 || b > x_.back() + 1e-12 || a > b) throw EvalError("pchip: integral outside data range");
    double s = 0;
    for (std::size_t k = 0; k + 1 < x_.size(); ++k) {
      const double lo = std::max(a, x_[k]), hi = std::min(b, x_[k + 1]);
      if (hi > lo) s += segment_antiderivative(k, hi) - segment_antiderivative(k, lo);
    }
    return s;
  }

  double operator()(double t) const {
    std::size_t k = 0;
    while (k + 2 < x_.size() && t > x_[k + 1]) ++k;
    const double h = x_[k + 1] - x_[k], s = (t - x_[k]) / h;
    const double h00 = (1 + 2 * s) * (1 - s) * (1 - s), h10 = s * (1 - s) * (1 - s);
    const double h01 = s * s * (3 - 2 * s), h11 = s * s * (s - 1);
    return h00 * y_[k] + h10 * h * d_[k] + h01 * y_[k + 1] + h11 * h * d_[k + 1];
  }

 private:
  static double end_slope(double h0, double h1, double m0, double m1) {
    double d = ((2 * h0 + h1) * m0 - h0 * m1) / (h0 + h1);
    if (d * m0 <= 0) d = 0;
    else if (m0 * m1 <= 0 && std::fabs(d) > std::fabs(3 * m0)) d = 3 * m0;
    return d;
  }

  // Integral of segment k from x_k to t.
  double segment_antiderivative(std::size_t k, double t) const {
    const double h = x_[k + 1] - x_[k], s = (t - x_[k]) / h;
    const double s2 = s * s, s3 = s2 * s, s4 = s3 * s;
    const double i00 = s - s3 + s4 / 2;
    const double i10 = s2 / 2 - 2 * s3 / 3 + s4 / 4;
    const double i01 = s3 - s4 / 2;
    const double i11 = s4 / 4 - s3 / 3;
    return h * (i00 * y_[k] + i10 * h * d_[k] + i01 * y_[k + 1] + i11 * h * d_[k + 1]);
  }

  std::vector<double> x_, y_, d_;
};

inline constexpr const char* kBdRateVariant = "pchip(quality, ln rate), exact integral over overlap";

// Average rate difference of `test` against `anchor` in percent over the
// overlapping quality interval; negative means the test codec saves bits.
inline double bd_rate(const RDCurve& anchor, const RDCurve& test) {
  anchor.validate(4);
  test.validate(4);
  if (anchor.metric != test.metric) throw EvalError("bd_rate: metric mismatch");
  auto fit = [](const RDCurve& c) {
    std::vector<double> q, r;
    for (const auto& p : c.points) {
      if (!(p.bpp > 0)) throw EvalError("bd_rate: curve '" + c.label + "' has a zero-rate point");
      if (!q.empty() && !(p.quality > q.back()))
        throw EvalError("bd_rate: curve '" + c.label + "' has repeated quality values");
      q.push_back(p.quality);
      r.push_back(std::log(p.bpp));
    }
    return Pchip(q, r);
  };
  const double lo = std::max(anchor.points.front().quality, test.points.front().quality);
  const double hi = std::min(anchor.points.back().quality, test.points.back().quality);
  if (!(hi > lo)) throw EvalError("bd_rate: quality ranges of '" + anchor.label + "' and '" + test.label + "' do not overlap");
  const double ia = fit(anchor).integral(lo, hi);
  const double it = fit(test).integral(lo, hi);
  return 100.0 * (std::exp((it - ia) / (hi - lo)) - 1.0);
}

// Rate at matched distortion without interpolation. For every anchor point,
// the test rate is the cheapest test point whose quality is at least the
// anchor's. Works on non-monotone and non-overlapping curves, where bd_rate
// refuses. An anchor quality the test never reaches leaves the point
// unmatched, and then `test_not_worse` is false.
struct MatchedRate {
  double anchor_bpp{0};  // mean over anchor points
  double test_bpp{0};    // mean over matched anchor points
  int matched{0};
  int unmatched{0};
  bool test_not_worse() const { return unmatched == 0 && matched > 0 && test_bpp <= anchor_bpp; }
};

inline MatchedRate matched_rate(const RDCurve& anchor, const RDCurve& test) {
  if (anchor.metric != test.metric) throw EvalError("matched_rate: metric mismatch");
  if (anchor.points.empty() || test.points.empty()) throw EvalError("matched_rate: empty curve");
  MatchedRate m;
  for (const auto& a : anchor.points) {
    m.anchor_bpp += a.bpp;
    double best = std::numeric_limits<double>::infinity();
    for (const auto& t : test.points)
      if (t.quality >= a.quality) best = std::min(best, t.bpp);
    if (std::isfinite(best)) {
      m.test_bpp += best;
      m.matched++;
    } else {
      m.unmatched++;
    }
  }
  m.anchor_bpp /= static_cast<double>(anchor.points.size());
  if (m.matched > 0) m.test_bpp /= m.matched;
  return m;
}

// ---------------------------------------------------------------------------
// Per-frame records and protocol

struct FrameRecord {
  std::string sequence;
  std::string label;  // model label, e.g. "lambda=2048"
  double lambda{0};
  int frame{0};
  FrameRole role{FrameRole::I};
  RateReport rate;
  double mse{0};
  double psnr{0};
  double msssim{0};
  int msssim_scales{0};
};

inline nlohmann::ordered_json to_json(const FrameRecord& r) {
  nlohmann::ordered_json j;
  j["sequence"] = r.sequence;
  j["label"] = r.label;
  j["lambda"] = r.lambda;
  j["frame"] = r.frame;
  j["role"] = role_name(r.role);
  for (int s = 0; s < kStreamCount; ++s) j["bits_" + std::string(kStreamNames[s])] = r.rate.bits[s];
  j["bits_total"] = r.rate.bits_total();
  j["pixels"] = r.rate.pixel_count;
  j["bpp"] = r.rate.bpp();
  j["mse"] = r.mse;
  j["psnr"] = r.psnr;
  j["msssim"] = r.msssim;
  j["msssim_scales"] = r.msssim_scales;
  return j;
}

inline FrameRecord record_from_json(const nlohmann::json& j) {
  FrameRecord r;
  r.sequence = j.at("sequence").get<std::string>();
  r.label = j.at("label").get<std::string>();
  r.lambda = j.at("lambda").get<double>();
  r.frame = j.at("frame").get<int>();
  r.role = parse_role(j.at("role").get<std::string>());
  for (int s = 0; s < kStreamCount; ++s) r.rate.bits[s] = j.at("bits_" + std::string(kStreamNames[s])).get<double>();
  r.rate.pixel_count = j.at("pixels").get<long long>();
  r.mse = j.at("mse").get<double>();
  r.psnr = j.at("psnr").get<double>();
  r.msssim = j.at("msssim").get<double>();
  r.msssim_scales = j.at("msssim_scales").get<int>();
  return r;
}

inline void write_jsonl(std::ostream& os, const std::vector<FrameRecord>& recs) {
  for (const auto& r : recs) os << to_json(r).dump() << "\n";
}

inline std::vector<FrameRecord> read_jsonl(std::istream& is) {
  std::vector<FrameRecord> out;
  std::string line;
  int n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw EvalError("jsonl line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

// Encodes one sequence and evaluates every reconstructed frame.
template <typename T>
std::vector<FrameRecord> evaluate_sequence(const Codec<T>& codec, const SequenceSource& src, const GopConfig& gop,
                                           const std::string& sequence, const std::string& label, double lambda,
                                           GopResult* out = nullptr, const ModeOverride& ov = {}) {
  GopResult g = encode_gop(codec, src, gop, ov);
  std::vector<FrameRecord> recs;
  for (std::size_t i = 0; i < g.recon.size(); ++i) {
    FrameRecord r;
    r.sequence = sequence;
    r.label = label;
    r.lambda = lambda;
    r.frame = static_cast<int>(i);
    r.role = g.roles[i];
    r.rate = g.reports[i];
    r.mse = mse_rgb(src.frames[i], g.recon[i]);
    r.psnr = psnr_from_mse_db(r.mse);
    const auto ms = msssim_rgb(src.frames[i], g.recon[i]);
    r.msssim = ms.score;
    r.msssim_scales = ms.scales;
    recs.push_back(r);
  }
  if (out) *out = std::move(g);
  return recs;
}

struct SequenceSummary {
  std::string sequence;
  std::string label;
  double lambda{0};
  int frames{0};
  int intra_frames{0};
  RateReport rate;
  double psnr{0};    // mean over frames
  double msssim{0};  // mean over frames
  int msssim_scales{0};
  double bpp() const { return rate.bpp(); }
};

struct ModelSummary {
  std::string label;
  double lambda{0};
  double bpp{0};     // mean over sequences
  double psnr{0};
  double msssim{0};
  double mse{0};     // mean over sequences of mean frame MSE
};

struct ProtocolReport {
  GopConfig gop;
  std::vector<FrameRecord> records;
  std::vector<SequenceSummary> sequences;
  std::vector<ModelSummary> models;  // in ladder order
  std::vector<std::string> notes;
};

// Folds per-frame records into per-sequence and per-model aggregates. Order
// follows first appearance, so the fold is deterministic.
inline void aggregate(ProtocolReport& rep) {
  rep.sequences.clear();
  rep.models.clear();
  std::map<std::pair<std::string, std::string>, std::size_t> seq_index;
  std::map<std::string, std::size_t> model_index;
  std::vector<double> mse_sum;
  for (const auto& r : rep.records) {
    const auto key = std::make_pair(r.label, r.sequence);
    auto it = seq_index.find(key);
    if (it == seq_index.end()) {
      it = seq_index.emplace(key, rep.sequences.size()).first;
      SequenceSummary s;
      s.sequence = r.sequence;
      s.label = r.label;
      s.lambda = r.lambda;
      s.msssim_scales = r.msssim_scales;
      rep.sequences.push_back(s);
      mse_sum.push_back(0);
    }
    auto& s = rep.sequences[it->second];
    s.frames++;
    s.intra_frames += r.role == FrameRole::I;
    s.rate += r.rate;
    s.psnr += r.psnr;
    s.msssim += r.msssim;
    mse_sum[it->second] += r.mse;
  }
  std::vector<int> counts;
  for (std::size_t i = 0; i < rep.sequences.size(); ++i) {
    auto& s = rep.sequences[i];
    s.psnr /= s.frames;
    s.msssim /= s.frames;
    auto it = model_index.find(s.label);
    if (it == model_index.end()) {
      it = model_index.emplace(s.label, rep.models.size()).first;
      rep.models.push_back(ModelSummary{s.label, s.lambda, 0, 0, 0, 0});
      counts.push_back(0);
    }
    auto& m = rep.models[it->second];
    m.bpp += s.bpp();
    m.psnr += s.psnr;
    m.msssim += s.msssim;
    m.mse += mse_sum[i] / s.frames;
    counts[it->second]++;
  }
  for (std::size_t i = 0; i < rep.models.size(); ++i) {
    auto& m = rep.models[i];
    m.bpp /= counts[i];
    m.psnr /= counts[i];
    m.msssim /= counts[i];
    m.mse /= counts[i];
  }
}

struct NamedSequence {
  std::string name;
  SequenceSource source;
};

template <typename T>
struct LadderModel {
  std::string label;
  double lambda{0};
  const Codec<T>* codec{nullptr};
};

// Encodes min(frame_budget, available) frames of every sequence with every
// model. Requires at least `min_models` models (four for a full ladder).
template <typename T>
ProtocolReport run_protocol(const std::vector<NamedSequence>& seqs, const std::vector<LadderModel<T>>& models,
                            const GopConfig& gop, std::size_t min_models = 4, int jobs = 1) {
  gop.validate();
  if (models.size() < min_models) {
    std::ostringstream os;
    os << "run_protocol: " << models.size() << " model(s) given, need " << min_models << "; have lambda";
    for (const auto& m : models) os << " " << m.lambda;
    os << ", ladder is";
    for (double l : kLambdaLadder) os << " " << l;
    throw EvalError(os.str());
  }
  for (const auto& m : models)
    if (!m.codec) throw EvalError("run_protocol: missing model for " + m.label);
  ProtocolReport rep;
  rep.gop = gop;
  if (gop.gop_size != 32 || gop.frame_budget != 96) {
    std::ostringstream os;
    os << "desk-scale protocol override: gop " << gop.gop_size << ", frames " << gop.frame_budget;
    rep.notes.push_back(os.str());
  }
  // Independent (model, sequence) jobs; results are folded in task order.
  const std::size_t n_tasks = models.size() * seqs.size();
  std::vector<std::vector<FrameRecord>> results(n_tasks);
  std::vector<std::string> errors(n_tasks);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t t; (t = next.fetch_add(1)) < n_tasks;) {
      const auto& m = models[t / seqs.size()];
      const auto& s = seqs[t % seqs.size()];
      try {
        results[t] = evaluate_sequence(*m.codec, s.source, gop, s.name, m.label, m.lambda);
      } catch (const std::exception& e) {
        errors[t] = e.what();
      }
    }
  };
  const int n_threads = static_cast<int>(std::min<std::size_t>(std::max(1, jobs), std::max<std::size_t>(n_tasks, 1)));
  std::vector<std::thread> pool;
  for (int i = 1; i < n_threads; ++i) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  for (std::size_t t = 0; t < n_tasks; ++t) {
    if (!errors[t].empty()) throw EvalError("run_protocol: " + errors[t]);
    rep.records.insert(rep.records.end(), results[t].begin(), results[t].end());
  }
  aggregate(rep);
  const int scales = rep.records.empty() ? 0 : rep.records.front().msssim_scales;
  if (scales < 5) rep.notes.push_back("ms-ssim evaluated with " + std::to_string(scales) + " of 5 scales");
  return rep;
}

inline RDCurve curve_of(const std::vector<ModelSummary>& models, const std::string& label, Metric m) {
  std::vector<RDPoint> pts;
  for (const auto& s : models) pts.push_back({s.bpp, m == Metric::Psnr ? s.psnr : s.msssim});
  return make_curve(label, m, std::move(pts));
}

// ---------------------------------------------------------------------------
// Report emission

inline void write_summary_csv(std::ostream& os, const ProtocolReport& rep) {
  os << "sequence,label,lambda,frames,bpp,psnr,msssim\n" << std::setprecision(10);
  for (const auto& s : rep.sequences)
    os << s.sequence << "," << s.label << "," << s.lambda << "," << s.frames << "," << s.bpp() << "," << s.psnr << ","
       << s.msssim << "\n";
}

// BD-rate of every curve against the first one, per metric.
inline nlohmann::ordered_json bd_table(const std::vector<RDCurve>& curves) {
  nlohmann::ordered_json t = nlohmann::ordered_json::array();
  if (curves.empty()) return t;
  for (std::size_t i = 1; i < curves.size(); ++i) {
    nlohmann::ordered_json row;
    row["anchor"] = curves[0].label;
    row["test"] = curves[i].label;
    row["metric"] = metric_name(curves[i].metric);
    try {
      row["bd_rate_percent"] = bd_rate(curves[0], curves[i]);
    } catch (const EvalError& e) {
      row["bd_rate_percent"] = nullptr;
      row["error"] = e.what();
    }
    t.push_back(row);
  }
  return t;
}

inline nlohmann::ordered_json summary_json(const ProtocolReport& rep, const std::vector<RDCurve>& curves) {
  nlohmann::ordered_json j;
  j["gop_size"] = rep.gop.gop_size;
  j["frame_budget"] = rep.gop.frame_budget;
  j["rate_kind"] = "analytic";
  j["bd_rate_variant"] = kBdRateVariant;
  j["notes"] = rep.notes;
  auto& ms = j["models"] = nlohmann::ordered_json::array();
  for (const auto& m : rep.models)
    ms.push_back({{"label", m.label}, {"lambda", m.lambda}, {"bpp", m.bpp}, {"psnr", m.psnr}, {"msssim", m.msssim}});
  auto& cs = j["curves"] = nlohmann::ordered_json::array();
  for (const auto& c : curves) {
    nlohmann::ordered_json pts = nlohmann::ordered_json::array();
    for (const auto& p : c.points) pts.push_back({p.bpp, p.quality});
    cs.push_back({{"label", c.label}, {"metric", metric_name(c.metric)}, {"points", pts}});
  }
  std::vector<RDCurve> psnr, ssim;
  for (const auto& c : curves) (c.metric == Metric::Psnr ? psnr : ssim).push_back(c);
  j["bd_rate"] = {{"psnr", bd_table(psnr)}, {"msssim", bd_table(ssim)}};
  return j;
}

// Static RD plot: quality against bpp, one polyline per curve.
inline std::string rd_plot_svg(const std::vector<RDCurve>& curves, const std::string& title) {
  const double W = 480, H = 360, L = 60, R = 20, T = 30, B = 50;
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& c : curves)
    for (const auto& p : c.points) {
      x0 = std::min(x0, p.bpp);
      x1 = std::max(x1, p.bpp);
      y0 = std::min(y0, p.quality);
      y1 = std::max(y1, p.quality);
    }
  if (!(x1 > x0)) x1 = x0 + 1;
  if (!(y1 > y0)) y1 = y0 + 1;
  const double px = (x1 - x0) * 0.05, py = (y1 - y0) * 0.05;
  x0 -= px, x1 += px, y0 -= py, y1 += py;
  auto sx = [&](double v) { return L + (v - x0) / (x1 - x0) * (W - L - R); };
  auto sy = [&](double v) { return H - B - (v - y0) / (y1 - y0) * (H - T - B); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  const std::string ylabel = curves.empty() || curves[0].metric == Metric::Psnr ? "RGB-PSNR (dB)" : "RGB-MS-SSIM";
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"18\" text-anchor=\"middle\">" << title << "</text>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4, yv = y0 + (y1 - y0) * i / 4;
    os << "<text x=\"" << sx(xv) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << std::setprecision(3) << xv << "</text>\n";
    os << "<text x=\"" << L - 6 << "\" y=\"" << sy(yv) + 4 << "\" text-anchor=\"end\">" << yv << "</text>\n";
    os << std::setprecision(2);
  }
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">BPP</text>\n";
  os << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " << (T + H - B) / 2
     << ")\">" << ylabel << "</text>\n";
  for (std::size_t k = 0; k < curves.size(); ++k) {
    const char* col = colors[k % 6];
    os << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"2\" points=\"";
    for (const auto& p : curves[k].points) os << sx(p.bpp) << "," << sy(p.quality) << " ";
    os << "\"/>\n";
    for (const auto& p : curves[k].points)
      os << "<circle cx=\"" << sx(p.bpp) << "\" cy=\"" << sy(p.quality) << "\" r=\"3\" fill=\"" << col << "\"/>\n";
    os << "<text x=\"" << L + 10 << "\" y=\"" << T + 14 + 14 * k << "\" fill=\"" << col << "\">" << curves[k].label << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

// Writes records.jsonl, summary.csv, summary.json and one plot per metric.
inline void write_protocol_outputs(const std::filesystem::path& dir, const ProtocolReport& rep,
                                   const std::vector<RDCurve>& curves, const std::string& dataset = "synthetic") {
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "records.jsonl");
    write_jsonl(os, rep.records);
  }
  {
    std::ofstream os(dir / "summary.csv");
    write_summary_csv(os, rep);
  }
  {
    std::ofstream os(dir / "summary.json");
    os << summary_json(rep, curves).dump(2) << "\n";
  }
  for (Metric m : {Metric::Psnr, Metric::Msssim}) {
    std::vector<RDCurve> sel;
    for (const auto& c : curves)
      if (c.metric == m) sel.push_back(c);
    if (sel.empty()) continue;
    std::ofstream os(dir / ("rd_" + dataset + "_" + metric_name(m) + ".svg"));
    os << rd_plot_svg(sel, dataset + " " + metric_name(m));
  }
}

}  // namespace condvc
