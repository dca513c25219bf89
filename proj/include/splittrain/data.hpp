#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "splittrain/tensor.hpp"

namespace splittrain {

enum class ImageMode { ir, rgb };

std::string to_string(ImageMode mode);
ImageMode image_mode_from_string(const std::string& s);

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SampleMeta {
  int background = 0;
  int signature = 0;
  int pose = 0;

  bool operator==(const SampleMeta&) const = default;
};

/// Raw image plus exact target mask. Pixels are channel-last; IR values are
/// 16-bit intensities, RGB values are 0..255.
struct Sample {
  ImageMode mode = ImageMode::ir;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::vector<std::uint16_t> pixels;
  std::vector<std::uint8_t> mask;  // H*W, 1 = target
  int label = 0;
  SampleMeta meta;

  std::size_t mask_area() const;
  void validate() const;
};

// Sample file: "STSM", u16 version, u8 mode, u16 H, u16 W, u8 C, pixels
// (u16 LE for IR, u8 for RGB, row-major channel-last), mask bits packed
// MSB-first row-major, CRC32 (LE) of everything before it. Label and meta
// live in the manifest.
inline constexpr std::uint16_t kSampleFormatVersion = 1;

std::vector<std::uint8_t> encode_sample(const Sample& sample);
Sample decode_sample(std::span<const std::uint8_t> bytes);
void write_sample(const Sample& sample, const std::filesystem::path& path);
Sample read_sample(const std::filesystem::path& path);

enum class Split { train, test };
std::string to_string(Split split);

struct SampleRecord {
  std::string file;  // relative to the manifest's directory
  int label = 0;
  SampleMeta meta;
  Split split = Split::train;

  std::string id() const;  // file stem
};

struct DatasetManifest {
  int version = 1;
  ImageMode mode = ImageMode::ir;
  std::vector<std::string> class_names;
  std::vector<SampleRecord> samples;
  std::string generator_json = "{}";  // seed and parameters, serialized
  std::filesystem::path root;         // directory files resolve against

  std::size_t count(Split split) const;
  DatasetManifest subset(Split split) const;
  Sample load(std::size_t index) const;  // label/meta filled from the record
};

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest read_manifest(const std::filesystem::path& path);
// Checks dense labels and that every referenced file exists and decodes.
void verify_manifest(const DatasetManifest& manifest);

struct GenConfig {
  ImageMode mode = ImageMode::ir;
  int classes = 3;
  int backgrounds = 18;
  int signatures = 6;  // per class
  int poses = 10;      // per (class, background, signature)
  std::size_t height = 64;
  std::size_t width = 64;
  std::uint64_t seed = 0;
  std::vector<int> held_out_backgrounds;  // tagged as test

  void validate() const;
  std::size_t sample_count() const {
    return static_cast<std::size_t>(classes) * backgrounds * signatures * poses;
  }
};

inline constexpr std::uint16_t kIrMin = 400;
inline constexpr std::uint16_t kIrMax = 4000;

// Renders one scene. Deterministic in (config.seed, class, background,
// signature, pose).
Sample render_sample(const GenConfig& config, int label, const SampleMeta& meta);

DatasetManifest generate_dataset(const GenConfig& config,
                                 const std::filesystem::path& out_dir);

/// Normalized [C,H,W] tensor. IR: subtract the target mean, divide by the
/// whole-image standard deviation. RGB: divide by the whole-image standard
/// deviation only. Masked zeroes background pixels after normalization, so
/// target pixels agree exactly between both variants.
Tensor preprocess(const Sample& sample, bool masked);

// Background pixels replaced by one solid intensity (IR, uniform in the
// generator's range) or colour (RGB); target pixels untouched.
Sample with_random_background(const Sample& sample, std::uint64_t palette_seed,
                              std::uint64_t key);

DatasetManifest random_background_testset(const DatasetManifest& manifest,
                                          std::uint64_t palette_seed,
                                          const std::filesystem::path& out_dir);

std::pair<DatasetManifest, DatasetManifest> split(const DatasetManifest& manifest,
                                                  const std::vector<int>& held_out_backgrounds);

struct IngestConfig {
  ImageMode mode = ImageMode::rgb;
  std::size_t height = 160;
  std::size_t width = 128;
};

// Reads <dir>/images/*.png, <dir>/masks/*.png (same stems, nonzero =
// target) and <dir>/labels.csv ("stem,class[,train|test]" lines); writes
// letterboxed samples and a manifest into out_dir.
DatasetManifest ingest_external(const std::filesystem::path& dir,
                                const IngestConfig& config,
                                const std::filesystem::path& out_dir);

// Aspect-preserving resize into height x width with symmetric zero bands.
// Image uses bilinear sampling, mask nearest neighbour.
Sample letterbox(const Sample& sample, std::size_t height, std::size_t width);

/// Preprocessed tensors held in memory for training and evaluation.
class PreparedSet {
 public:
  explicit PreparedSet(const DatasetManifest& manifest);
  explicit PreparedSet(const std::vector<Sample>& samples);

  std::size_t size() const { return labels_.size(); }
  const Shape& sample_shape() const { return shape_; }
  std::span<const int> labels() const { return labels_; }
  const std::vector<SampleMeta>& metas() const { return metas_; }
  const std::vector<Sample>& raw() const { return raw_; }

  // [B,C,H,W] batch gathered in the given order.
  Tensor batch(std::span<const std::size_t> indices, bool masked) const;
  std::vector<int> batch_labels(std::span<const std::size_t> indices) const;

 private:
  void add(const Sample& sample);

  Shape shape_;
  std::vector<float> unmasked_;
  std::vector<float> masked_;
  std::vector<int> labels_;
  std::vector<SampleMeta> metas_;
  std::vector<Sample> raw_;
};

}  // namespace splittrain
