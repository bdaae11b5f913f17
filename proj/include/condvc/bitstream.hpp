#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "condvc/mode_codec.hpp"

namespace condvc {

class BitstreamError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Rates are analytic (-log2 P); no entropy-coded payload is produced. The
// manifest carries the header plus per-frame analytic bit counts, and the
// quantised latents are stored alongside so the decoder can be re-run.
inline constexpr const char* kManifestMagic = "CVCM";
inline constexpr int kManifestVersion = 1;
inline constexpr const char* kManifestKind = "rate-manifest: analytic bit counts, not an entropy-coded bitstream";

struct ManifestHeader {
  int width{0};
  int height{0};
  int gop_size{32};
  int frame_budget{96};
  int lambda_id{3};  // index into kLambdaLadder
  double lambda1{2048};
  double flow_scale{kDefaultFlowScale};
  std::string variant{"modes"};
};

struct Manifest {
  ManifestHeader header;
  std::vector<FrameRole> roles;
  std::vector<RateReport> reports;
};

inline int lambda_id(double lambda1) {
  for (std::size_t i = 0; i < kLambdaLadder.size(); ++i)
    if (kLambdaLadder[i] == lambda1) return static_cast<int>(i);
  return -1;
}

inline nlohmann::ordered_json manifest_json(const Manifest& m) {
  nlohmann::ordered_json j;
  j["magic"] = kManifestMagic;
  j["version"] = kManifestVersion;
  j["kind"] = kManifestKind;
  const auto& h = m.header;
  j["header"] = {{"width", h.width},         {"height", h.height},   {"gop_size", h.gop_size},
                 {"frame_budget", h.frame_budget}, {"lambda_id", h.lambda_id}, {"lambda1", h.lambda1},
                 {"flow_scale", h.flow_scale}, {"variant", h.variant}};
  auto& frames = j["frames"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < m.reports.size(); ++i) {
    nlohmann::ordered_json f;
    f["index"] = i;
    f["role"] = role_name(m.roles[i]);
    nlohmann::ordered_json bits;
    for (int s = 0; s < kStreamCount; ++s) bits[std::string(kStreamNames[s])] = m.reports[i].bits[s];
    f["bits"] = bits;
    f["pixels"] = m.reports[i].pixel_count;
    frames.push_back(f);
  }
  return j;
}

inline Manifest manifest_from_json(const nlohmann::json& j) {
  if (j.value("magic", "") != kManifestMagic) throw BitstreamError("manifest: bad magic");
  if (j.value("version", 0) != kManifestVersion)
    throw BitstreamError("manifest: unsupported version " + std::to_string(j.value("version", 0)));
  Manifest m;
  const auto& h = j.at("header");
  m.header.width = h.at("width").get<int>();
  m.header.height = h.at("height").get<int>();
  m.header.gop_size = h.at("gop_size").get<int>();
  m.header.frame_budget = h.at("frame_budget").get<int>();
  m.header.lambda_id = h.at("lambda_id").get<int>();
  m.header.lambda1 = h.at("lambda1").get<double>();
  m.header.flow_scale = h.at("flow_scale").get<double>();
  m.header.variant = h.at("variant").get<std::string>();
  for (const auto& f : j.at("frames")) {
    m.roles.push_back(parse_role(f.at("role").get<std::string>()));
    RateReport r;
    for (int s = 0; s < kStreamCount; ++s) r.bits[s] = f.at("bits").at(std::string(kStreamNames[s])).get<double>();
    r.pixel_count = f.at("pixels").get<long long>();
    m.reports.push_back(r);
  }
  return m;
}

inline void write_manifest(const std::filesystem::path& p, const Manifest& m) {
  std::ofstream os(p);
  if (!os) throw BitstreamError("cannot write " + p.string());
  os << manifest_json(m).dump(2) << "\n";
}

inline Manifest read_manifest(const std::filesystem::path& p) {
  std::ifstream is(p);
  if (!is) throw BitstreamError("cannot open manifest " + p.string());
  try {
    return manifest_from_json(nlohmann::json::parse(is));
  } catch (const nlohmann::json::exception& e) {
    throw BitstreamError("manifest " + p.string() + ": " + e.what());
  }
}

namespace detail {

inline constexpr char kLatentMagic[4] = {'C', 'V', 'C', 'L'};
inline constexpr char kReconMagic[4] = {'C', 'V', 'C', 'R'};

template <typename V>
void wr(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}
template <typename V>
V rd(std::istream& is) {
  V v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(V))) throw BitstreamError("truncated file");
  return v;
}

// Eval-mode latents are integers; stored as int32.
inline void write_int_tensor(std::ostream& os, const Tensor<float>& t) {
  const Shape s = t.shape();
  for (int d : {s.n, s.c, s.h, s.w}) wr<std::int32_t>(os, d);
  for (float v : t.vec()) {
    if (v != std::nearbyint(v)) throw BitstreamError("latent is not an integer; was it produced in eval mode?");
    wr<std::int32_t>(os, static_cast<std::int32_t>(v));
  }
}

inline Tensor<float> read_int_tensor(std::istream& is) {
  Shape s;
  s.n = rd<std::int32_t>(is);
  s.c = rd<std::int32_t>(is);
  s.h = rd<std::int32_t>(is);
  s.w = rd<std::int32_t>(is);
  if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0 || s.numel() > (1ULL << 30)) throw BitstreamError("corrupt latent shape");
  Tensor<float> t(s);
  for (float& v : t.vec()) v = static_cast<float>(rd<std::int32_t>(is));
  return t;
}

}  // namespace detail

inline void write_latents(const std::filesystem::path& p, const std::vector<FrameLatents<float>>& lat) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw BitstreamError("cannot write " + p.string());
  os.write(detail::kLatentMagic, 4);
  detail::wr<std::uint32_t>(os, static_cast<std::uint32_t>(lat.size()));
  for (const auto& l : lat) {
    detail::wr<std::uint8_t>(os, static_cast<std::uint8_t>(l.role));
    detail::write_int_tensor(os, l.motion.y);
    detail::write_int_tensor(os, l.motion.z);
    detail::write_int_tensor(os, l.texture.y);
    detail::write_int_tensor(os, l.texture.z);
  }
}

inline std::vector<FrameLatents<float>> read_latents(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw BitstreamError("cannot open latents " + p.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, detail::kLatentMagic, 4) != 0)
    throw BitstreamError(p.string() + ": bad latent magic");
  const auto n = detail::rd<std::uint32_t>(is);
  std::vector<FrameLatents<float>> out(n);
  for (auto& l : out) {
    const auto r = detail::rd<std::uint8_t>(is);
    if (r > 2) throw BitstreamError("corrupt frame role");
    l.role = static_cast<FrameRole>(r);
    l.motion.y = detail::read_int_tensor(is);
    l.motion.z = detail::read_int_tensor(is);
    l.texture.y = detail::read_int_tensor(is);
    l.texture.z = detail::read_int_tensor(is);
  }
  return out;
}

// Encoder-side reconstructions at full float precision, used by `verify`.
inline void write_recon(const std::filesystem::path& p, const std::vector<Frame>& frames) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw BitstreamError("cannot write " + p.string());
  os.write(detail::kReconMagic, 4);
  detail::wr<std::uint32_t>(os, static_cast<std::uint32_t>(frames.size()));
  for (const auto& f : frames) {
    detail::wr<std::int32_t>(os, f.height());
    detail::wr<std::int32_t>(os, f.width());
    os.write(reinterpret_cast<const char*>(f.tensor().data()), static_cast<std::streamsize>(f.tensor().size() * sizeof(float)));
  }
}

inline std::vector<Frame> read_recon(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw BitstreamError("cannot open " + p.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, detail::kReconMagic, 4) != 0)
    throw BitstreamError(p.string() + ": bad recon magic");
  const auto n = detail::rd<std::uint32_t>(is);
  std::vector<Frame> out;
  for (std::uint32_t i = 0; i < n; ++i) {
    const int h = detail::rd<std::int32_t>(is), w = detail::rd<std::int32_t>(is);
    if (h <= 0 || w <= 0 || static_cast<long long>(h) * w > (1LL << 28)) throw BitstreamError("corrupt recon shape");
    Tensor<float> t(Shape{1, 3, h, w});
    if (!is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float))))
      throw BitstreamError("truncated recon file");
    out.emplace_back(std::move(t));
  }
  return out;
}

struct VerifyResult {
  int frames{0};
  int mismatched_frames{0};
  int mismatched_maps{0};
  double max_bit_error{0};
  bool ok() const { return mismatched_frames == 0 && mismatched_maps == 0 && max_bit_error <= 1e-6; }
};

// Re-runs the decoder from latents and the manifest header and compares with
// encoder-side reconstructions (bit-exact) and manifest bit counts (1e-6).
template <typename T>
VerifyResult verify_decode(const Codec<T>& codec, const Manifest& m, const std::vector<FrameLatents<float>>& lat,
                           const std::vector<Frame>& encoder_recon, const std::vector<Tensor<float>>* alpha = nullptr,
                           const std::vector<Tensor<float>>* beta = nullptr) {
  if (lat.size() != m.reports.size() || encoder_recon.size() != lat.size())
    throw BitstreamError("verify: manifest, latents and reconstructions disagree on frame count");
  if (codec.config().flow_scale != m.header.flow_scale)
    throw BitstreamError("verify: flow scale in manifest differs from the model");
  const auto g = decode_gop(codec, lat, m.header.height, m.header.width);
  VerifyResult v;
  v.frames = static_cast<int>(lat.size());
  for (std::size_t i = 0; i < lat.size(); ++i) {
    if (g.roles[i] != m.roles[i] || !bit_identical(g.recon[i].tensor(), encoder_recon[i].tensor())) v.mismatched_frames++;
    if (alpha && !bit_identical(g.alpha[i], (*alpha)[i])) v.mismatched_maps++;
    if (beta && !bit_identical(g.beta[i], (*beta)[i])) v.mismatched_maps++;
    for (int s = 0; s < kStreamCount; ++s)
      v.max_bit_error = std::max(v.max_bit_error, std::fabs(g.reports[i].bits[s] - m.reports[i].bits[s]));
  }
  return v;
}

}  // namespace condvc
