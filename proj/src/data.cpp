#include "splittrain/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <json.hpp>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include "splittrain/image_io.hpp"
#include "splittrain/parallel.hpp"
#include "splittrain/rng.hpp"

namespace splittrain {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(ImageMode mode) { return mode == ImageMode::ir ? "ir" : "rgb"; }

ImageMode image_mode_from_string(const std::string& s) {
  if (s == "ir") return ImageMode::ir;
  if (s == "rgb") return ImageMode::rgb;
  throw DataError("unknown image mode '" + s + "' (expected ir or rgb)");
}

std::string to_string(Split split) { return split == Split::train ? "train" : "test"; }

std::size_t Sample::mask_area() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

void Sample::validate() const {
  if (height == 0 || width == 0) throw DataError("sample has empty dimensions");
  const std::size_t expect_c = mode == ImageMode::ir ? 1 : 3;
  if (channels != expect_c) {
    throw DataError("sample in " + to_string(mode) + " mode must have " +
                    std::to_string(expect_c) + " channel(s), got " +
                    std::to_string(channels));
  }
  if (pixels.size() != height * width * channels) {
    throw DataError("sample pixel buffer does not match " + std::to_string(height) + "x" +
                    std::to_string(width) + "x" + std::to_string(channels));
  }
  if (mask.size() != height * width) throw DataError("mask size differs from image size");
  if (mask_area() == 0) throw DataError("sample mask has no target pixels");
}

// ---- sample files -----------------------------------------------------------

namespace {

static_assert(std::endian::native == std::endian::little,
              "sample I/O assumes a little-endian host");

template <typename U>
void put(std::vector<std::uint8_t>& out, U v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(U));
}

template <typename U>
U get(std::span<const std::uint8_t> bytes, std::size_t& pos) {
  if (pos + sizeof(U) > bytes.size()) {
    throw DataError("sample file truncated at byte " + std::to_string(pos));
  }
  U v;
  std::memcpy(&v, bytes.data() + pos, sizeof(U));
  pos += sizeof(U);
  return v;
}

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, bytes.data(), static_cast<uInt>(bytes.size())));
}

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

}  // namespace

std::vector<std::uint8_t> encode_sample(const Sample& sample) {
  sample.validate();
  if (sample.height > 0xFFFF || sample.width > 0xFFFF) {
    throw DataError("sample dimensions exceed 65535");
  }
  std::vector<std::uint8_t> out;
  out.insert(out.end(), {'S', 'T', 'S', 'M'});
  put(out, kSampleFormatVersion);
  put(out, static_cast<std::uint8_t>(sample.mode == ImageMode::ir ? 0 : 1));
  put(out, static_cast<std::uint16_t>(sample.height));
  put(out, static_cast<std::uint16_t>(sample.width));
  put(out, static_cast<std::uint8_t>(sample.channels));
  if (sample.mode == ImageMode::ir) {
    for (auto v : sample.pixels) put(out, v);
  } else {
    for (auto v : sample.pixels) {
      if (v > 255) throw DataError("RGB sample value exceeds 255");
      out.push_back(static_cast<std::uint8_t>(v));
    }
  }
  const auto n = sample.mask.size();
  std::vector<std::uint8_t> bits((n + 7) / 8, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (sample.mask[i]) bits[i / 8] |= static_cast<std::uint8_t>(0x80u >> (i % 8));
  }
  out.insert(out.end(), bits.begin(), bits.end());
  put(out, crc32_of(out));
  return out;
}

Sample decode_sample(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "STSM", 4) != 0) {
    throw DataError("bad magic, not a sample file");
  }
  std::size_t pos = 4;
  const auto version = get<std::uint16_t>(bytes, pos);
  if (version != kSampleFormatVersion) {
    throw DataError("unsupported sample format version " + std::to_string(version));
  }
  Sample s;
  const auto mode = get<std::uint8_t>(bytes, pos);
  if (mode > 1) throw DataError("unknown sample mode byte " + std::to_string(mode));
  s.mode = mode == 0 ? ImageMode::ir : ImageMode::rgb;
  s.height = get<std::uint16_t>(bytes, pos);
  s.width = get<std::uint16_t>(bytes, pos);
  s.channels = get<std::uint8_t>(bytes, pos);
  const auto n = s.height * s.width * s.channels;
  s.pixels.resize(n);
  for (auto& v : s.pixels) {
    v = s.mode == ImageMode::ir ? get<std::uint16_t>(bytes, pos) : get<std::uint8_t>(bytes, pos);
  }
  const auto area = s.height * s.width;
  s.mask.resize(area);
  const auto nbytes = (area + 7) / 8;
  if (pos + nbytes > bytes.size()) throw DataError("sample file truncated in mask");
  for (std::size_t i = 0; i < area; ++i) {
    s.mask[i] = (bytes[pos + i / 8] >> (7 - i % 8)) & 1u;
  }
  pos += nbytes;
  const auto body_end = pos;
  const auto stored = get<std::uint32_t>(bytes, pos);
  if (pos != bytes.size()) throw DataError("trailing bytes after sample checksum");
  if (crc32_of(bytes.first(body_end)) != stored) throw DataError("sample checksum mismatch");
  s.validate();
  return s;
}

void write_sample(const Sample& sample, const fs::path& path) {
  write_file(path, encode_sample(sample));
}

Sample read_sample(const fs::path& path) {
  try {
    return decode_sample(read_file(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

// ---- manifests --------------------------------------------------------------

std::string SampleRecord::id() const { return fs::path(file).stem().string(); }

std::size_t DatasetManifest::count(Split s) const {
  return static_cast<std::size_t>(std::count_if(
      samples.begin(), samples.end(), [s](const auto& r) { return r.split == s; }));
}

DatasetManifest DatasetManifest::subset(Split s) const {
  DatasetManifest out = *this;
  out.samples.clear();
  for (const auto& r : samples) {
    if (r.split == s) out.samples.push_back(r);
  }
  return out;
}

Sample DatasetManifest::load(std::size_t index) const {
  const auto& rec = samples.at(index);
  auto s = read_sample(root / rec.file);
  if (s.mode != mode) {
    throw DataError(rec.file + ": sample mode " + to_string(s.mode) +
                    " differs from manifest mode " + to_string(mode));
  }
  s.label = rec.label;
  s.meta = rec.meta;
  return s;
}

void write_manifest(const DatasetManifest& m, const fs::path& path) {
  json j;
  j["version"] = m.version;
  j["mode"] = to_string(m.mode);
  j["class_names"] = m.class_names;
  j["generator"] = json::parse(m.generator_json);
  json records = json::array();
  for (const auto& r : m.samples) {
    records.push_back({{"file", r.file},
                       {"label", r.label},
                       {"meta",
                        {{"background", r.meta.background},
                         {"signature", r.meta.signature},
                         {"pose", r.meta.pose}}},
                       {"split", to_string(r.split)}});
  }
  j["samples"] = std::move(records);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write manifest " + path.string());
  out << j.dump(2) << '\n';
}

DatasetManifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  DatasetManifest m;
  try {
    const auto j = json::parse(in);
    m.version = j.at("version").get<int>();
    m.mode = image_mode_from_string(j.at("mode").get<std::string>());
    m.class_names = j.at("class_names").get<std::vector<std::string>>();
    m.generator_json = j.value("generator", json::object()).dump();
    for (const auto& r : j.at("samples")) {
      SampleRecord rec;
      rec.file = r.at("file").get<std::string>();
      rec.label = r.at("label").get<int>();
      const auto& meta = r.at("meta");
      rec.meta = {meta.at("background").get<int>(), meta.at("signature").get<int>(),
                  meta.at("pose").get<int>()};
      const auto tag = r.at("split").get<std::string>();
      if (tag != "train" && tag != "test") {
        throw DataError("sample " + rec.file + " has unknown split tag '" + tag + "'");
      }
      rec.split = tag == "train" ? Split::train : Split::test;
      m.samples.push_back(std::move(rec));
    }
  } catch (const json::exception& e) {
    throw DataError("malformed manifest " + path.string() + ": " + e.what());
  }
  if (m.version != 1) {
    throw DataError("unsupported manifest version " + std::to_string(m.version));
  }
  m.root = path.parent_path();
  return m;
}

void verify_manifest(const DatasetManifest& m) {
  std::set<int> seen;
  for (const auto& r : m.samples) {
    if (r.label < 0 || static_cast<std::size_t>(r.label) >= m.class_names.size()) {
      throw DataError("sample " + r.file + " label " + std::to_string(r.label) +
                      " outside the class list");
    }
    seen.insert(r.label);
  }
  if (!m.samples.empty() && seen.size() != m.class_names.size()) {
    throw DataError("class indices are not dense: some classes have no samples");
  }
  for (std::size_t i = 0; i < m.samples.size(); ++i) {
    if (!fs::exists(m.root / m.samples[i].file)) {
      throw DataError("missing sample file " + m.samples[i].file);
    }
    (void)m.load(i);
  }
}

// ---- procedural generator ---------------------------------------------------

void GenConfig::validate() const {
  if (classes < 2 || classes > 3) {
    throw DataError("classes must be 2 or 3 (one silhouette family per class)");
  }
  if (backgrounds < 2) throw DataError("backgrounds must be at least 2");
  if (signatures < 1) throw DataError("signatures must be at least 1");
  if (poses < 1) throw DataError("poses must be at least 1");
  if (height < 16 || width < 16) throw DataError("image size must be at least 16x16");
  for (int b : held_out_backgrounds) {
    if (b < 0 || b >= backgrounds) {
      throw DataError("held-out background " + std::to_string(b) + " outside [0," +
                      std::to_string(backgrounds) + ")");
    }
  }
}

namespace {

constexpr std::array<const char*, 3> kClassNames{"apc", "tank", "truck"};

// Axis-aligned box or disc in target-local units (image half-size = 1),
// with a heat offset added on top of the signature's base temperature.
struct Part {
  enum Kind { box, disc } kind;
  double cx, cy, hx, hy;  // disc uses hx as radius
  double heat;
};

std::vector<Part> silhouette(int label) {
  switch (label) {
    case 0:  // boxy hull, bevelled by two offset boxes, small cupola
      return {{Part::box, 0.0, 0.0, 0.46, 0.24, 0.0},
              {Part::box, 0.02, 0.0, 0.40, 0.30, 0.0},
              {Part::box, -0.12, 0.0, 0.10, 0.10, 0.15}};
    case 1:  // hull, round turret, long barrel
      return {{Part::box, -0.08, 0.0, 0.38, 0.25, 0.0},
              {Part::disc, -0.10, 0.0, 0.19, 0.0, 0.2},
              {Part::box, 0.40, 0.0, 0.34, 0.055, 0.1}};
    default:  // cab, gap, long cargo bed
      return {{Part::box, 0.50, 0.0, 0.13, 0.19, 0.25},
              {Part::box, -0.18, 0.0, 0.44, 0.21, -0.05}};
  }
}

struct Pose {
  double angle, scale, tx, ty;
};

Pose pose_for(const GenConfig& cfg, int pose, Rng& rng) {
  Pose p;
  p.angle = 2.0 * std::numbers::pi * (static_cast<double>(pose) + rng.uniform(-0.25, 0.25)) /
            static_cast<double>(cfg.poses);
  p.scale = rng.uniform(0.8, 1.05);
  p.tx = rng.uniform(-0.15, 0.15);
  p.ty = rng.uniform(-0.15, 0.15);
  return p;
}

// Heat offset of the part covering local point (lx, ly), or nullopt.
std::optional<double> cover(const std::vector<Part>& parts, double lx, double ly) {
  std::optional<double> heat;
  for (const auto& part : parts) {
    const double dx = lx - part.cx, dy = ly - part.cy;
    const bool inside = part.kind == Part::box
                            ? (std::abs(dx) <= part.hx && std::abs(dy) <= part.hy)
                            : (dx * dx + dy * dy <= part.hx * part.hx);
    if (inside) heat = std::max(heat.value_or(-1.0), part.heat);
  }
  return heat;
}

struct Signature {
  double base;      // IR temperature proxy, or RGB brightness
  double gradient;  // extra heat toward the rear (-x)
  std::array<double, 3> tint;
};

Signature signature_for(const GenConfig& cfg, int label, int signature) {
  auto rng = Rng::stream(cfg.seed, 0x5100'0000ULL + static_cast<std::uint64_t>(label) * 4096 +
                                       static_cast<std::uint64_t>(signature));
  Signature s;
  s.base = rng.uniform(0.35, 0.85);
  s.gradient = rng.uniform(-0.15, 0.25);
  s.tint = {rng.uniform(0.4, 1.0), rng.uniform(0.4, 1.0), rng.uniform(0.4, 1.0)};
  return s;
}

enum class Texture { noise, stripes, checker, gradient };

struct Background {
  Texture texture;
  double level;      // mean, in [0,1] of the output range
  double amplitude;  // texture contrast
  double period;     // in units of image width
  double angle;
  std::array<double, 3> tint;
};

Background background_for(const GenConfig& cfg, int id) {
  auto rng = Rng::stream(cfg.seed, 0xB600'0000ULL + static_cast<std::uint64_t>(id));
  Background b;
  b.texture = static_cast<Texture>(id % 4);
  b.level = rng.uniform(0.25, 0.7);
  b.amplitude = rng.uniform(0.15, 0.35);
  b.period = rng.uniform(0.12, 0.35);
  b.angle = rng.uniform(0.0, std::numbers::pi);
  b.tint = {rng.uniform(0.3, 1.0), rng.uniform(0.3, 1.0), rng.uniform(0.3, 1.0)};
  return b;
}

// Bilinear value noise over a lattice with `cells` cells per image side.
class ValueNoise {
 public:
  ValueNoise(std::size_t cells, Rng& rng) : n_(cells + 2), grid_(n_ * n_) {
    for (auto& g : grid_) g = rng.uniform(-1.0, 1.0);
  }
  double at(double u, double v) const {  // u, v in [0, cells]
    const auto i = static_cast<std::size_t>(u), j = static_cast<std::size_t>(v);
    const double fu = u - i, fv = v - j;
    const auto g = [&](std::size_t a, std::size_t b) { return grid_[std::min(b, n_ - 1) * n_ + std::min(a, n_ - 1)]; };
    return (1 - fv) * ((1 - fu) * g(i, j) + fu * g(i + 1, j)) +
           fv * ((1 - fu) * g(i, j + 1) + fu * g(i + 1, j + 1));
  }

 private:
  std::size_t n_;
  std::vector<double> grid_;
};

// Background field in [-1, 1]-ish for normalized coords (x, y) in [0,1].
double texture_value(const Background& bg, double x, double y, double phase,
                     const ValueNoise& noise, double cells) {
  const double ca = std::cos(bg.angle), sa = std::sin(bg.angle);
  const double r = x * ca + y * sa;
  const double s = -x * sa + y * ca;
  switch (bg.texture) {
    case Texture::noise:
      return noise.at(x * cells, y * cells);
    case Texture::stripes:
      return std::sin(2.0 * std::numbers::pi * (r / bg.period + phase)) > 0 ? 1.0 : -1.0;
    case Texture::checker: {
      const auto a = static_cast<long>(std::floor(r / bg.period + phase));
      const auto b = static_cast<long>(std::floor(s / bg.period + phase));
      return ((a + b) % 2 == 0) ? 1.0 : -1.0;
    }
    case Texture::gradient:
      return 2.0 * (r - 0.5) + 0.5 * noise.at(x * cells, y * cells);
  }
  return 0.0;
}

std::uint16_t to_ir(double unit) {
  const double v = kIrMin + std::clamp(unit, 0.0, 1.0) * (kIrMax - kIrMin);
  return static_cast<std::uint16_t>(std::lround(v));
}

std::uint16_t to_u8(double unit) {
  return static_cast<std::uint16_t>(std::lround(std::clamp(unit, 0.0, 1.0) * 255.0));
}

}  // namespace

Sample render_sample(const GenConfig& cfg, int label, const SampleMeta& meta) {
  const auto key = ((static_cast<std::uint64_t>(label) * 4096 + meta.background) * 4096 +
                    static_cast<std::uint64_t>(meta.signature)) *
                       4096 +
                   static_cast<std::uint64_t>(meta.pose);
  auto rng = Rng::stream(cfg.seed, key);
  const auto bg = background_for(cfg, meta.background);
  const auto sig = signature_for(cfg, label, meta.signature);
  const auto pose = pose_for(cfg, meta.pose, rng);
  const auto parts = silhouette(label);
  const double phase = rng.uniform();
  const double cells = std::max(2.0, 1.0 / bg.period);
  ValueNoise noise(static_cast<std::size_t>(cells) + 1, rng);

  // Distractor blobs: background clutter at target-like intensities.
  struct Blob {
    double x, y, r, level;
  };
  std::vector<Blob> blobs(rng.below(3));
  for (auto& b : blobs) {
    b = {rng.uniform(), rng.uniform(), rng.uniform(0.05, 0.12), rng.uniform(0.3, 0.9)};
  }

  Sample s;
  s.mode = cfg.mode;
  s.height = cfg.height;
  s.width = cfg.width;
  s.channels = cfg.mode == ImageMode::ir ? 1 : 3;
  s.pixels.resize(s.height * s.width * s.channels);
  s.mask.assign(s.height * s.width, 0);
  s.label = label;
  s.meta = meta;

  const double ca = std::cos(pose.angle), sa = std::sin(pose.angle);
  const double half_h = 0.5 * static_cast<double>(cfg.height);
  const double half_w = 0.5 * static_cast<double>(cfg.width);
  const double half = std::min(half_h, half_w);
  for (std::size_t y = 0; y < cfg.height; ++y) {
    for (std::size_t x = 0; x < cfg.width; ++x) {
      const double px = (static_cast<double>(x) + 0.5 - half_w) / half;
      const double py = (static_cast<double>(y) + 0.5 - half_h) / half;
      // image -> target-local: undo translation, rotation, scale
      const double dx = px - pose.tx, dy = py - pose.ty;
      const double lx = (dx * ca + dy * sa) / pose.scale;
      const double ly = (-dx * sa + dy * ca) / pose.scale;
      const auto heat = cover(parts, lx, ly);
      const double jitter = 0.02 * rng.normal();
      double value;
      bool target = heat.has_value();
      if (target) {
        value = sig.base + *heat * 0.5 - sig.gradient * lx * 0.5 + jitter;
      } else {
        const double nx = (static_cast<double>(x) + 0.5) / static_cast<double>(cfg.width);
        const double ny = (static_cast<double>(y) + 0.5) / static_cast<double>(cfg.height);
        value = bg.level + bg.amplitude * texture_value(bg, nx, ny, phase, noise, cells) + jitter;
        for (const auto& b : blobs) {
          const double ddx = nx - b.x, ddy = ny - b.y;
          if (ddx * ddx + ddy * ddy <= b.r * b.r) value = b.level + jitter;
        }
      }
      const auto idx = y * cfg.width + x;
      s.mask[idx] = target ? 1 : 0;
      if (cfg.mode == ImageMode::ir) {
        s.pixels[idx] = to_ir(value);
      } else {
        const auto& tint = target ? sig.tint : bg.tint;
        for (std::size_t c = 0; c < 3; ++c) {
          s.pixels[idx * 3 + c] = to_u8(value * (0.5 + 0.5 * tint[c]));
        }
      }
    }
  }
  return s;
}

DatasetManifest generate_dataset(const GenConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  fs::create_directories(out_dir / "samples");

  DatasetManifest m;
  m.mode = cfg.mode;
  m.root = out_dir;
  for (int c = 0; c < cfg.classes; ++c) m.class_names.emplace_back(kClassNames[c]);
  json gen{{"source", "procedural"},
           {"seed", cfg.seed},
           {"params",
            {{"mode", to_string(cfg.mode)},
             {"classes", cfg.classes},
             {"backgrounds", cfg.backgrounds},
             {"signatures", cfg.signatures},
             {"poses", cfg.poses},
             {"height", cfg.height},
             {"width", cfg.width},
             {"held_out_backgrounds", cfg.held_out_backgrounds}}}};
  m.generator_json = gen.dump();

  const std::set<int> held(cfg.held_out_backgrounds.begin(), cfg.held_out_backgrounds.end());
  for (int c = 0; c < cfg.classes; ++c)
    for (int b = 0; b < cfg.backgrounds; ++b)
      for (int s = 0; s < cfg.signatures; ++s)
        for (int p = 0; p < cfg.poses; ++p) {
          SampleRecord r;
          char name[32];
          std::snprintf(name, sizeof name, "samples/%06zu.stsm", m.samples.size());
          r.file = name;
          r.label = c;
          r.meta = {b, s, p};
          r.split = held.count(b) ? Split::test : Split::train;
          m.samples.push_back(std::move(r));
        }

  parallel_for(m.samples.size(), [&](std::size_t i) {
    const auto& r = m.samples[i];
    write_sample(render_sample(cfg, r.label, r.meta), out_dir / r.file);
  });
  write_manifest(m, out_dir / "manifest.json");
  return m;
}

// ---- preprocessing ----------------------------------------------------------

Tensor preprocess(const Sample& sample, bool masked) {
  sample.validate();
  const auto H = sample.height, W = sample.width, C = sample.channels;
  const auto n = sample.pixels.size();
  double sum = 0.0;
  for (auto v : sample.pixels) sum += v;
  const double mean_all = sum / static_cast<double>(n);
  double ss = 0.0;
  for (auto v : sample.pixels) ss += (v - mean_all) * (v - mean_all);
  const double stdev = std::sqrt(ss / static_cast<double>(n));
  if (!(stdev > 0.0)) throw DataError("zero-variance image cannot be scaled to unit variance");

  double shift = 0.0;
  if (sample.mode == ImageMode::ir) {
    double tsum = 0.0;
    std::size_t tcount = 0;
    for (std::size_t i = 0; i < H * W; ++i) {
      if (sample.mask[i]) {
        tsum += sample.pixels[i];
        ++tcount;
      }
    }
    shift = tsum / static_cast<double>(tcount);
  }

  std::vector<float> out(C * H * W);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < H * W; ++i) {
      const double v = (static_cast<double>(sample.pixels[i * C + c]) - shift) / stdev;
      out[c * H * W + i] = static_cast<float>(v);
      if (masked && !sample.mask[i]) out[c * H * W + i] = 0.0f;
    }
  }
  return Tensor({C, H, W}, std::move(out));
}

// ---- random backgrounds -----------------------------------------------------

Sample with_random_background(const Sample& sample, std::uint64_t palette_seed,
                              std::uint64_t key) {
  auto rng = Rng::stream(palette_seed, key);
  Sample out = sample;
  std::array<std::uint16_t, 3> colour{};
  if (sample.mode == ImageMode::ir) {
    colour[0] = static_cast<std::uint16_t>(kIrMin + rng.below(kIrMax - kIrMin + 1));
  } else {
    for (auto& c : colour) c = static_cast<std::uint16_t>(rng.below(256));
  }
  for (std::size_t i = 0; i < sample.height * sample.width; ++i) {
    if (sample.mask[i]) continue;
    for (std::size_t c = 0; c < sample.channels; ++c) {
      out.pixels[i * sample.channels + c] = colour[c];
    }
  }
  return out;
}

DatasetManifest random_background_testset(const DatasetManifest& manifest,
                                          std::uint64_t palette_seed,
                                          const fs::path& out_dir) {
  fs::create_directories(out_dir / "samples");
  DatasetManifest out = manifest;
  out.root = out_dir;
  auto gen = json::parse(manifest.generator_json);
  gen["random_background"] = {{"palette_seed", palette_seed}};
  out.generator_json = gen.dump();
  parallel_for(manifest.samples.size(), [&](std::size_t i) {
    auto s = with_random_background(manifest.load(i), palette_seed, i);
    out.samples[i].file = "samples/" + manifest.samples[i].id() + ".stsm";
    write_sample(s, out_dir / out.samples[i].file);
  });
  write_manifest(out, out_dir / "manifest.json");
  return out;
}

// ---- splits -----------------------------------------------------------------

std::pair<DatasetManifest, DatasetManifest> split(const DatasetManifest& manifest,
                                                  const std::vector<int>& held_out) {
  std::set<int> present;
  for (const auto& r : manifest.samples) present.insert(r.meta.background);
  for (int b : held_out) {
    if (!present.count(b)) {
      throw DataError("held-out background " + std::to_string(b) + " not in manifest");
    }
  }
  const std::set<int> held(held_out.begin(), held_out.end());
  DatasetManifest train = manifest, test = manifest;
  train.samples.clear();
  test.samples.clear();
  for (auto r : manifest.samples) {
    if (held.count(r.meta.background)) {
      r.split = Split::test;
      test.samples.push_back(std::move(r));
    } else {
      r.split = Split::train;
      train.samples.push_back(std::move(r));
    }
  }
  return {std::move(train), std::move(test)};
}

// ---- external corpora -------------------------------------------------------

Sample letterbox(const Sample& in, std::size_t H, std::size_t W) {
  const double scale = std::min(static_cast<double>(H) / static_cast<double>(in.height),
                                static_cast<double>(W) / static_cast<double>(in.width));
  const auto nh = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::lround(static_cast<double>(in.height) * scale)), 1, H);
  const auto nw = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::lround(static_cast<double>(in.width) * scale)), 1, W);
  const auto top = (H - nh) / 2, left = (W - nw) / 2;
  const double sy = static_cast<double>(in.height) / static_cast<double>(nh);
  const double sx = static_cast<double>(in.width) / static_cast<double>(nw);
  const auto C = in.channels;

  Sample out = in;
  out.height = H;
  out.width = W;
  out.pixels.assign(H * W * C, 0);
  out.mask.assign(H * W, 0);
  for (std::size_t y = 0; y < nh; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0,
                                 static_cast<double>(in.height - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const auto y1 = std::min(y0 + 1, in.height - 1);
    const double wy = fy - static_cast<double>(y0);
    const auto my = std::min(static_cast<std::size_t>((static_cast<double>(y) + 0.5) * sy),
                             in.height - 1);
    for (std::size_t x = 0; x < nw; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0,
                                   static_cast<double>(in.width - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const auto x1 = std::min(x0 + 1, in.width - 1);
      const double wx = fx - static_cast<double>(x0);
      const auto mx = std::min(static_cast<std::size_t>((static_cast<double>(x) + 0.5) * sx),
                               in.width - 1);
      const auto o = (top + y) * W + left + x;
      for (std::size_t c = 0; c < C; ++c) {
        const auto p = [&](std::size_t yy, std::size_t xx) {
          return static_cast<double>(in.pixels[(yy * in.width + xx) * C + c]);
        };
        const double v = (1 - wy) * ((1 - wx) * p(y0, x0) + wx * p(y0, x1)) +
                         wy * ((1 - wx) * p(y1, x0) + wx * p(y1, x1));
        out.pixels[o * C + c] = static_cast<std::uint16_t>(std::lround(v));
      }
      out.mask[o] = in.mask[my * in.width + mx];
    }
  }
  return out;
}

namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (const auto& s : items) out += (out.empty() ? "" : ", ") + s;
  return out;
}

}  // namespace

DatasetManifest ingest_external(const fs::path& dir, const IngestConfig& cfg,
                                const fs::path& out_dir) {
  if (cfg.height % 16 != 0 || cfg.width % 16 != 0 || cfg.height == 0 || cfg.width == 0) {
    throw DataError("ingest size must be a nonzero multiple of 16");
  }
  const auto images_dir = dir / "images", masks_dir = dir / "masks";
  if (!fs::is_directory(images_dir)) throw DataError("missing directory " + images_dir.string());
  if (!fs::is_directory(masks_dir)) throw DataError("missing directory " + masks_dir.string());

  struct LabelEntry {
    std::string cls;
    std::optional<Split> split;
  };
  std::map<std::string, LabelEntry> labels;
  {
    std::ifstream in(dir / "labels.csv");
    if (!in) throw DataError("missing labels file " + (dir / "labels.csv").string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      line = trim(line);
      if (line.empty() || line[0] == '#') continue;
      std::vector<std::string> cols;
      std::stringstream ss(line);
      std::string col;
      while (std::getline(ss, col, ',')) cols.push_back(trim(col));
      if (cols.size() < 2 || cols.size() > 3) {
        throw DataError("labels.csv line " + std::to_string(lineno) +
                        ": expected stem,class[,split]");
      }
      LabelEntry e{cols[1], std::nullopt};
      if (cols.size() == 3) {
        if (cols[2] == "train") e.split = Split::train;
        else if (cols[2] == "test") e.split = Split::test;
        else throw DataError("labels.csv line " + std::to_string(lineno) + ": bad split '" + cols[2] + "'");
      }
      labels[cols[0]] = e;
    }
  }

  std::vector<std::string> stems;
  for (const auto& entry : fs::directory_iterator(images_dir)) {
    if (entry.path().extension() == ".png") stems.push_back(entry.path().stem().string());
  }
  std::sort(stems.begin(), stems.end());
  std::vector<std::string> missing_masks, unknown_labels;
  for (const auto& stem : stems) {
    if (!fs::exists(masks_dir / (stem + ".png"))) missing_masks.push_back(stem);
    if (!labels.count(stem)) unknown_labels.push_back(stem);
  }
  if (!missing_masks.empty()) throw DataError("no mask for image(s): " + join(missing_masks));
  if (!unknown_labels.empty()) throw DataError("no label for image(s): " + join(unknown_labels));
  if (stems.empty()) throw DataError("no PNG images in " + images_dir.string());

  std::set<std::string> class_set;
  for (const auto& stem : stems) class_set.insert(labels[stem].cls);
  DatasetManifest m;
  m.mode = cfg.mode;
  m.root = out_dir;
  m.class_names.assign(class_set.begin(), class_set.end());
  m.generator_json = json{{"source", "external"},
                          {"height", cfg.height},
                          {"width", cfg.width},
                          {"mode", to_string(cfg.mode)}}
                         .dump();

  fs::create_directories(out_dir / "samples");
  std::vector<std::string> unreadable;
  for (const auto& stem : stems) {
    Sample s;
    try {
      const auto img = read_png(images_dir / (stem + ".png"));
      const auto msk = read_png(masks_dir / (stem + ".png"));
      if (msk.height != img.height || msk.width != img.width) {
        throw DataError("mask size differs from image size");
      }
      s.mode = cfg.mode;
      s.height = img.height;
      s.width = img.width;
      s.channels = cfg.mode == ImageMode::ir ? 1 : 3;
      const auto area = img.height * img.width;
      s.pixels.resize(area * s.channels);
      if (cfg.mode == ImageMode::ir) {
        if (img.channels != 1) throw DataError("IR ingestion needs single-channel images");
        s.pixels = img.values;
      } else {
        for (std::size_t i = 0; i < area; ++i) {
          for (std::size_t c = 0; c < 3; ++c) {
            auto v = img.values[i * img.channels + (img.channels == 3 ? c : 0)];
            if (img.bit_depth == 16) v = static_cast<std::uint16_t>(v >> 8);
            s.pixels[i * 3 + c] = v;
          }
        }
      }
      s.mask.resize(area);
      for (std::size_t i = 0; i < area; ++i) {
        bool on = false;
        for (std::size_t c = 0; c < msk.channels; ++c) on |= msk.values[i * msk.channels + c] != 0;
        s.mask[i] = on ? 1 : 0;
      }
      if (s.mask_area() == 0) throw DataError("mask has no target pixels");
      s = letterbox(s, cfg.height, cfg.width);
      s.validate();
    } catch (const std::exception& e) {
      unreadable.push_back(stem + " (" + e.what() + ")");
      continue;
    }
    SampleRecord r;
    r.file = "samples/" + stem + ".stsm";
    const auto& entry = labels[stem];
    r.label = static_cast<int>(
        std::distance(class_set.begin(), class_set.find(entry.cls)));
    r.split = entry.split.value_or(Split::train);
    write_sample(s, out_dir / r.file);
    m.samples.push_back(std::move(r));
  }
  if (!unreadable.empty()) throw DataError("unreadable image(s): " + join(unreadable));
  write_manifest(m, out_dir / "manifest.json");
  return m;
}

// ---- prepared tensors -------------------------------------------------------

PreparedSet::PreparedSet(const DatasetManifest& manifest) {
  std::vector<Sample> samples(manifest.samples.size());
  parallel_for(samples.size(), [&](std::size_t i) { samples[i] = manifest.load(i); });
  for (const auto& s : samples) add(s);
}

PreparedSet::PreparedSet(const std::vector<Sample>& samples) {
  for (const auto& s : samples) add(s);
}

void PreparedSet::add(const Sample& sample) {
  const auto u = preprocess(sample, false);
  const auto m = preprocess(sample, true);
  if (shape_.empty()) {
    shape_ = u.shape();
  } else if (shape_ != u.shape()) {
    throw DataError("samples differ in shape: " + shape_str(shape_) + " vs " +
                    shape_str(u.shape()));
  }
  unmasked_.insert(unmasked_.end(), u.data().begin(), u.data().end());
  masked_.insert(masked_.end(), m.data().begin(), m.data().end());
  labels_.push_back(sample.label);
  metas_.push_back(sample.meta);
  raw_.push_back(sample);
}

Tensor PreparedSet::batch(std::span<const std::size_t> indices, bool masked) const {
  const auto per = shape_numel(shape_);
  const auto& src = masked ? masked_ : unmasked_;
  std::vector<float> out(indices.size() * per);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto i = indices[k];
    if (i >= labels_.size()) throw std::out_of_range("sample index out of range");
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(i * per), per,
                out.begin() + static_cast<std::ptrdiff_t>(k * per));
  }
  Shape shape{indices.size()};
  shape.insert(shape.end(), shape_.begin(), shape_.end());
  return Tensor(std::move(shape), std::move(out));
}

std::vector<int> PreparedSet::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels_.at(i));
  return out;
}

}  // namespace splittrain
