#pragma once

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "condvc/nn.hpp"

namespace condvc {

class VideoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kDefaultDimStride = 4;
inline constexpr int kMinFrameDim = 8;

// One RGB frame, planar, values in [0, 1]. Stored as a [1, 3, H, W] tensor.
class Frame {
 public:
  Frame() = default;
  Frame(int height, int width) : t_(Shape{1, 3, height, width}) { validate(kDefaultDimStride); }
  explicit Frame(Tensor<float> t, int stride = kDefaultDimStride) : t_(std::move(t)) { validate(stride); }

  int height() const { return t_.h(); }
  int width() const { return t_.w(); }
  long long pixel_count() const { return static_cast<long long>(t_.h()) * t_.w(); }

  float& at(int c, int y, int x) { return t_.at(0, c, y, x); }
  float at(int c, int y, int x) const { return t_.at(0, c, y, x); }

  const Tensor<float>& tensor() const { return t_; }

  template <typename T>
  Tensor<T> as() const { return t_.cast<T>(); }

  // Builds a frame from an arbitrary tensor, clamping into [0, 1]. This is
  // the one place clamping happens implicitly; callers opt in by name.
  template <typename T>
  static Frame clamped(const Tensor<T>& t) {
    Tensor<float> f(t.shape());
    for (std::size_t i = 0; i < f.size(); ++i)
      f[i] = std::clamp(static_cast<float>(t[i]), 0.0f, 1.0f);
    return Frame(std::move(f));
  }

  friend bool operator==(const Frame& a, const Frame& b) { return a.t_ == b.t_; }

 private:
  void validate(int stride) const {
    const Shape& s = t_.shape();
    if (s.n != 1 || s.c != 3) throw VideoError("Frame: expected [1,3,H,W], got " + s.str());
    if (s.h < kMinFrameDim || s.w < kMinFrameDim)
      throw VideoError("Frame: dimensions must be >= 8, got " + s.str());
    if (s.h % stride || s.w % stride)
      throw VideoError("Frame: dimensions must be divisible by " + std::to_string(stride) + ", got " + s.str());
    for (float v : t_.vec())
      if (!(v >= 0.0f && v <= 1.0f)) throw VideoError("Frame: value outside [0,1]");
  }

  Tensor<float> t_;
};

// Dense displacement field in pixels; channel 0 horizontal, 1 vertical.
class FlowMap {
 public:
  FlowMap() = default;
  FlowMap(int height, int width) : t_(Shape{1, 2, height, width}) {}
  explicit FlowMap(Tensor<float> t) : t_(std::move(t)) {
    if (t_.n() != 1 || t_.c() != 2) throw VideoError("FlowMap: expected [1,2,H,W], got " + t_.shape().str());
    for (float v : t_.vec())
      if (!std::isfinite(v)) throw VideoError("FlowMap: non-finite displacement");
  }
  int height() const { return t_.h(); }
  int width() const { return t_.w(); }
  float& at(int c, int y, int x) { return t_.at(0, c, y, x); }
  float at(int c, int y, int x) const { return t_.at(0, c, y, x); }
  const Tensor<float>& tensor() const { return t_; }

 private:
  Tensor<float> t_;
};

// Per-pixel coding-mode weight in (0, 1), broadcast over colour channels.
class WeightMap {
 public:
  WeightMap() = default;
  explicit WeightMap(Tensor<float> t) : t_(std::move(t)) {
    if (t_.n() != 1 || t_.c() != 1) throw VideoError("WeightMap: expected [1,1,H,W], got " + t_.shape().str());
    for (float v : t_.vec())
      if (!(v > 0.0f && v < 1.0f)) throw VideoError("WeightMap: value outside (0,1)");
  }
  int height() const { return t_.h(); }
  int width() const { return t_.w(); }
  float at(int y, int x) const { return t_.at(0, 0, y, x); }
  const Tensor<float>& tensor() const { return t_; }

 private:
  Tensor<float> t_;
};

struct GopConfig {
  int gop_size{32};
  int frame_budget{96};

  void validate() const {
    if (gop_size < 1) throw VideoError("GopConfig: gop_size must be >= 1");
    if (frame_budget < 1) throw VideoError("GopConfig: frame_budget must be >= 1");
  }
};

enum class FrameRole { I, PFirst, PLater };

inline std::string role_name(FrameRole r) {
  switch (r) {
    case FrameRole::I: return "I";
    case FrameRole::PFirst: return "P_first";
    case FrameRole::PLater: return "P_later";
  }
  return "?";
}

inline FrameRole parse_role(const std::string& s) {
  if (s == "I") return FrameRole::I;
  if (s == "P_first") return FrameRole::PFirst;
  if (s == "P_later") return FrameRole::PLater;
  throw VideoError("unknown frame role '" + s + "'");
}

// History needed by the extrapolated-flow path.
inline constexpr int kFrameHistory = 3;
inline constexpr int kFlowHistory = 2;

// Frame 0 of every GOP is intra. A P-frame uses the extrapolated-flow path
// once the GOP has produced kFrameHistory decoded frames and kFlowHistory
// decoded flows; until then it uses the hyperprior flow path.
inline std::vector<FrameRole> gop_schedule(const GopConfig& cfg) {
  cfg.validate();
  std::vector<FrameRole> roles;
  roles.reserve(cfg.frame_budget);
  for (int i = 0; i < cfg.frame_budget; ++i) {
    const int pos = i % cfg.gop_size;
    if (pos == 0) {
      roles.push_back(FrameRole::I);
      continue;
    }
    const int decoded_frames = pos;     // frames 0..pos-1 of this GOP
    const int decoded_flows = pos - 1;  // one per earlier P-frame
    roles.push_back(decoded_frames >= kFrameHistory && decoded_flows >= kFlowHistory ? FrameRole::PLater
                                                                                     : FrameRole::PFirst);
  }
  return roles;
}

struct SequenceSource {
  std::vector<Frame> frames;
  std::string provenance;
  // Ground-truth backward flow per frame (frame t -> t-1), synthetic only.
  // Entry 0 is zero.
  std::vector<FlowMap> true_flows;

  int height() const { return frames.empty() ? 0 : frames.front().height(); }
  int width() const { return frames.empty() ? 0 : frames.front().width(); }
  std::size_t size() const { return frames.size(); }

  void validate() const {
    if (frames.empty()) throw VideoError("SequenceSource: no frames");
    for (const auto& f : frames)
      if (f.height() != height() || f.width() != width())
        throw VideoError("SequenceSource: frames differ in size");
  }
};

// ---------------------------------------------------------------------------
// Raw file I/O

enum class PixelFormat { Rgb24, Yuv420p };

inline const char* kSupportedFormats = "rgb24, yuv420p";

inline PixelFormat parse_pixel_format(const std::string& s) {
  if (s == "rgb24") return PixelFormat::Rgb24;
  if (s == "yuv420p" || s == "yuv420") return PixelFormat::Yuv420p;
  throw VideoError("unsupported pixel format '" + s + "' (supported: " + kSupportedFormats + ")");
}

inline std::string pixel_format_name(PixelFormat f) { return f == PixelFormat::Rgb24 ? "rgb24" : "yuv420p"; }

struct FormatDescriptor {
  int width{0};
  int height{0};
  PixelFormat format{PixelFormat::Rgb24};
  int frame_count{0};  // 0: infer from file size
  std::string data_path;

  std::size_t frame_bytes() const {
    const std::size_t px = static_cast<std::size_t>(width) * height;
    return format == PixelFormat::Rgb24 ? 3 * px : px + 2 * (px / 4);
  }
};

// Plain "key=value" lines; '#' starts a comment.
inline std::map<std::string, std::string> parse_key_values(std::istream& in, const std::string& origin) {
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw VideoError(origin + ":" + std::to_string(lineno) + ": expected key=value");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

inline FormatDescriptor read_descriptor(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw VideoError("cannot open descriptor " + path.string());
  auto kv = parse_key_values(in, path.string());
  FormatDescriptor d;
  try {
    d.width = std::stoi(kv.at("width"));
    d.height = std::stoi(kv.at("height"));
  } catch (const std::exception&) {
    throw VideoError("descriptor " + path.string() + " needs integer width and height");
  }
  if (kv.count("format")) d.format = parse_pixel_format(kv["format"]);
  if (kv.count("frame_count")) d.frame_count = std::stoi(kv["frame_count"]);
  if (kv.count("path")) {
    std::filesystem::path p = kv["path"];
    d.data_path = p.is_absolute() ? p.string() : (path.parent_path() / p).string();
  }
  return d;
}

inline void write_descriptor(const std::filesystem::path& path, const FormatDescriptor& d) {
  std::ofstream out(path);
  out << "width=" << d.width << "\nheight=" << d.height << "\nformat=" << pixel_format_name(d.format)
      << "\nframe_count=" << d.frame_count << "\n";
  if (!d.data_path.empty()) out << "path=" << std::filesystem::path(d.data_path).filename().string() << "\n";
}

inline float byte_to_unit(std::uint8_t b) { return static_cast<float>(b) / 255.0f; }
inline std::uint8_t unit_to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

// BT.601 full-range YCbCr -> RGB, all inputs 8-bit.
inline std::array<float, 3> yuv_to_rgb(double y, double u, double v) {
  const double r = y + 1.402 * (v - 128.0);
  const double g = y - 0.344136 * (u - 128.0) - 0.714136 * (v - 128.0);
  const double b = y + 1.772 * (u - 128.0);
  auto n = [](double x) { return static_cast<float>(std::clamp(x / 255.0, 0.0, 1.0)); };
  return {n(r), n(g), n(b)};
}

inline std::array<double, 3> rgb_to_yuv(double r, double g, double b) {
  return {0.299 * r + 0.587 * g + 0.114 * b, -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0,
          0.5 * r - 0.418688 * g - 0.081312 * b + 128.0};
}

inline Frame decode_raw_frame(const std::uint8_t* p, const FormatDescriptor& d) {
  Tensor<float> t(Shape{1, 3, d.height, d.width});
  const int W = d.width, H = d.height;
  if (d.format == PixelFormat::Rgb24) {
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        for (int c = 0; c < 3; ++c) t.at(0, c, y, x) = byte_to_unit(p[(static_cast<std::size_t>(y) * W + x) * 3 + c]);
  } else {
    const std::uint8_t* Y = p;
    const std::uint8_t* U = p + static_cast<std::size_t>(W) * H;
    const std::uint8_t* V = U + static_cast<std::size_t>(W / 2) * (H / 2);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const std::size_t ci = static_cast<std::size_t>(y / 2) * (W / 2) + x / 2;
        const auto rgb = yuv_to_rgb(Y[static_cast<std::size_t>(y) * W + x], U[ci], V[ci]);
        for (int c = 0; c < 3; ++c) t.at(0, c, y, x) = rgb[c];
      }
  }
  return Frame(std::move(t));
}

inline std::vector<std::uint8_t> encode_raw_frame(const Frame& f, PixelFormat format) {
  const int W = f.width(), H = f.height();
  std::vector<std::uint8_t> out;
  if (format == PixelFormat::Rgb24) {
    out.resize(static_cast<std::size_t>(W) * H * 3);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        for (int c = 0; c < 3; ++c) out[(static_cast<std::size_t>(y) * W + x) * 3 + c] = unit_to_byte(f.at(c, y, x));
    return out;
  }
  const std::size_t px = static_cast<std::size_t>(W) * H;
  out.resize(px + 2 * (px / 4));
  std::vector<double> u(px), v(px);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const auto yuv = rgb_to_yuv(255.0 * f.at(0, y, x), 255.0 * f.at(1, y, x), 255.0 * f.at(2, y, x));
      out[static_cast<std::size_t>(y) * W + x] = static_cast<std::uint8_t>(std::lround(std::clamp(yuv[0], 0.0, 255.0)));
      u[static_cast<std::size_t>(y) * W + x] = yuv[1];
      v[static_cast<std::size_t>(y) * W + x] = yuv[2];
    }
  for (int y = 0; y < H / 2; ++y)
    for (int x = 0; x < W / 2; ++x) {
      auto avg = [&](const std::vector<double>& p) {
        const std::size_t b = static_cast<std::size_t>(2 * y) * W + 2 * x;
        return 0.25 * (p[b] + p[b + 1] + p[b + W] + p[b + W + 1]);
      };
      const std::size_t ci = static_cast<std::size_t>(y) * (W / 2) + x;
      out[px + ci] = static_cast<std::uint8_t>(std::lround(std::clamp(avg(u), 0.0, 255.0)));
      out[px + px / 4 + ci] = static_cast<std::uint8_t>(std::lround(std::clamp(avg(v), 0.0, 255.0)));
    }
  return out;
}

inline SequenceSource load_sequence(const std::filesystem::path& path, const FormatDescriptor& d) {
  if (d.width <= 0 || d.height <= 0) throw VideoError("load_sequence: descriptor needs positive width/height");
  if (d.format == PixelFormat::Yuv420p && (d.width % 2 || d.height % 2))
    throw VideoError("load_sequence: yuv420p needs even dimensions");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw VideoError("load_sequence: cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::size_t fb = d.frame_bytes();
  std::size_t count = d.frame_count;
  if (count == 0) {
    if (bytes.empty() || bytes.size() % fb != 0)
      throw VideoError("load_sequence: " + path.string() + " holds " + std::to_string(bytes.size()) +
                       " bytes, not a whole number of " + std::to_string(fb) + "-byte frames");
    count = bytes.size() / fb;
  }
  const std::size_t expected = count * fb;
  if (bytes.size() < expected)
    throw VideoError("load_sequence: truncated file " + path.string() + ": expected " + std::to_string(expected) +
                     " bytes, got " + std::to_string(bytes.size()));
  SequenceSource seq;
  seq.provenance = "file:" + path.string();
  for (std::size_t i = 0; i < count; ++i) seq.frames.push_back(decode_raw_frame(bytes.data() + i * fb, d));
  return seq;
}

inline SequenceSource load_sequence(const std::filesystem::path& descriptor_path) {
  const auto d = read_descriptor(descriptor_path);
  if (d.data_path.empty()) throw VideoError("descriptor " + descriptor_path.string() + " has no path= entry");
  return load_sequence(d.data_path, d);
}

inline void save_sequence(const std::filesystem::path& path, const std::vector<Frame>& frames, PixelFormat format) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw VideoError("save_sequence: cannot open " + path.string());
  for (const auto& f : frames) {
    const auto bytes = encode_raw_frame(f, format);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
}

inline Frame read_png(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw VideoError("read_png: " + path.string() + ": " + img.message);
  img.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw VideoError("read_png: " + path.string() + ": " + img.message);
  }
  FormatDescriptor d{static_cast<int>(img.width), static_cast<int>(img.height), PixelFormat::Rgb24, 1, {}};
  return decode_raw_frame(buf.data(), d);
}

inline void write_png(const std::filesystem::path& path, const Frame& f) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = f.width();
  img.height = f.height();
  img.format = PNG_FORMAT_RGB;
  const auto bytes = encode_raw_frame(f, PixelFormat::Rgb24);
  if (!png_image_write_to_file(&img, path.c_str(), 0, bytes.data(), 0, nullptr))
    throw VideoError("write_png: " + path.string() + ": " + img.message);
}

// Clip directory in the im1.png, im2.png, ... layout used by septuplet
// training sets.
inline SequenceSource load_clip_directory(const std::filesystem::path& dir) {
  SequenceSource seq;
  seq.provenance = "clip:" + dir.string();
  for (int i = 1;; ++i) {
    const auto p = dir / ("im" + std::to_string(i) + ".png");
    if (!std::filesystem::exists(p)) break;
    seq.frames.push_back(read_png(p));
  }
  if (seq.frames.empty()) throw VideoError("load_clip_directory: no im1.png in " + dir.string());
  seq.validate();
  return seq;
}

// ---------------------------------------------------------------------------
// Synthetic sequences

struct SynthSpec {
  std::string generator{"global_pan"};  // moving_square | moving_texture | global_pan
  int width{64};
  int height{64};
  int frames{5};
  std::uint64_t seed{0};
  double max_displacement{3.0};
  // Content velocity in pixels/frame; drawn from the seed when not set.
  bool has_velocity{false};
  double vx{0}, vy{0};
};

namespace detail {

// Band-limited analytic texture; sampling at fractional positions is exact,
// so sub-pixel translations have a known ground truth.
struct AnalyticTexture {
  struct Wave {
    double fx, fy, phase;
    std::array<double, 3> amp;
  };
  std::array<double, 3> base{};
  std::vector<Wave> waves;

  static AnalyticTexture random(Rng& rng, int count = 6) {
    AnalyticTexture t;
    for (double& b : t.base) b = rng.uniform(0.35, 0.65);
    for (int k = 0; k < count; ++k) {
      const double period = rng.uniform(6.0, 28.0);
      const double ang = rng.uniform(0.0, 2.0 * M_PI);
      Wave w{std::cos(ang) / period, std::sin(ang) / period, rng.uniform(0.0, 2.0 * M_PI), {}};
      for (double& a : w.amp) a = rng.uniform(-0.12, 0.12);
      t.waves.push_back(w);
    }
    return t;
  }

  float sample(int c, double x, double y) const {
    double v = base[c];
    for (const auto& w : waves) v += w.amp[c] * std::sin(2.0 * M_PI * (w.fx * x + w.fy * y) + w.phase);
    return static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
};

}  // namespace detail

inline SequenceSource synth_sequence(const SynthSpec& spec) {
  if (spec.generator != "moving_square" && spec.generator != "moving_texture" && spec.generator != "global_pan")
    throw VideoError("synth_sequence: unknown generator '" + spec.generator +
                     "' (known: moving_square, moving_texture, global_pan)");
  if (spec.frames < 1) throw VideoError("synth_sequence: frames must be >= 1");
  Rng rng(spec.seed * 0x2545F4914F6CDD1DULL + 17);
  const int W = spec.width, H = spec.height;
  const double md = spec.max_displacement;

  auto draw_velocity = [&](double& vx, double& vy) {
    do {
      vx = rng.uniform(-md, md);
      vy = rng.uniform(-md, md);
    } while (std::hypot(vx, vy) > md);
  };
  double vx = spec.vx, vy = spec.vy;
  if (!spec.has_velocity) draw_velocity(vx, vy);
  if (std::hypot(vx, vy) > md + 1e-12) throw VideoError("synth_sequence: velocity exceeds max_displacement");

  const auto background = detail::AnalyticTexture::random(rng);
  const auto foreground = detail::AnalyticTexture::random(rng);
  double bvx = 0, bvy = 0;
  if (spec.generator == "moving_texture") {
    bvx = rng.uniform(-0.5, 0.5) * md;
    bvy = rng.uniform(-0.5, 0.5) * md;
  }
  const int side = std::max(4, std::min(W, H) / 3);
  const double sx0 = rng.uniform(0.25 * W, 0.75 * W - side);
  const double sy0 = rng.uniform(0.25 * H, 0.75 * H - side);

  SequenceSource seq;
  std::ostringstream prov;
  prov << "synth:" << spec.generator << ":seed=" << spec.seed << ":v=" << vx << "," << vy;
  seq.provenance = prov.str();

  for (int t = 0; t < spec.frames; ++t) {
    Tensor<float> img(Shape{1, 3, H, W});
    FlowMap flow(H, W);
    const double ox = sx0 + vx * t, oy = sy0 + vy * t;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        bool fg = false;
        if (spec.generator != "global_pan") fg = x >= ox && x < ox + side && y >= oy && y < oy + side;
        for (int c = 0; c < 3; ++c) {
          float v;
          if (spec.generator == "global_pan") {
            v = background.sample(c, x - vx * t, y - vy * t);
          } else if (fg) {
            v = foreground.sample(c, x - ox, y - oy);
          } else {
            v = background.sample(c, x - bvx * t, y - bvy * t);
          }
          img.at(0, c, y, x) = v;
        }
        if (t > 0) {
          // backward flow: where this pixel's content sat in frame t-1
          const bool moving = spec.generator == "global_pan" || fg;
          flow.at(0, y, x) = static_cast<float>(moving ? -vx : -bvx);
          flow.at(1, y, x) = static_cast<float>(moving ? -vy : -bvy);
        }
      }
    seq.frames.emplace_back(std::move(img));
    seq.true_flows.push_back(flow);
  }
  return seq;
}

}  // namespace condvc
