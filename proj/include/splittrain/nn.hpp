#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "splittrain/ops.hpp"
#include "splittrain/tensor.hpp"

namespace splittrain {

enum class LayerKind { conv, batchnorm, relu, maxpool, flatten, linear };

std::string to_string(LayerKind kind);

template <typename T>
struct NamedTensor {
  std::string name;
  BasicTensor<T> tensor;
};

/// One stage of a sequential network. Frozen layers (trainable == false)
/// always run in eval mode, so batchnorm running statistics stay fixed too.
template <typename T>
class Layer {
 public:
  explicit Layer(std::string name) : name_(std::move(name)) {}
  virtual ~Layer() = default;

  virtual LayerKind kind() const = 0;
  virtual BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode) = 0;
  virtual std::unique_ptr<Layer> clone() const = 0;

  // Learnable tensors.
  virtual std::vector<NamedTensor<T>> parameters() { return {}; }
  // Learnable tensors plus persistent buffers, in serialization order.
  virtual std::vector<NamedTensor<T>> state() { return parameters(); }

  const std::string& name() const { return name_; }
  bool trainable() const { return trainable_; }
  void set_trainable(bool flag);

  Mode effective_mode(Mode requested) const {
    return trainable_ ? requested : Mode::eval;
  }

 private:
  std::string name_;
  bool trainable_ = true;
};

struct ModelConfig {
  std::array<std::size_t, 3> input_shape{1, 64, 64};  // C, H, W
  std::array<std::size_t, 4> channel_widths{16, 32, 64, 128};
  std::size_t hidden_dim = 128;
  std::size_t class_count = 3;
  std::uint64_t seed = 0;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename T>
struct TapOutput {
  std::optional<BasicTensor<T>> logits;
  std::optional<BasicTensor<T>> activation;
};

/// Sequential CNN: four conv-batchnorm-relu-maxpool blocks, flatten, then a
/// two-layer classifier. Copying a model deep-copies every tensor.
template <typename T>
class BasicModel {
 public:
  static BasicModel build_simple_cnn(const ModelConfig& config);

  BasicModel(const BasicModel& other);
  BasicModel& operator=(const BasicModel& other);
  BasicModel(BasicModel&&) noexcept = default;
  BasicModel& operator=(BasicModel&&) noexcept = default;

  const ModelConfig& config() const { return config_; }
  std::size_t layer_count() const { return layers_.size(); }
  Layer<T>& layer(std::size_t i) { return *layers_.at(i); }
  const Layer<T>& layer(std::size_t i) const { return *layers_.at(i); }

  // Valid tap positions: the layer index of each block's maxpool.
  const std::vector<std::size_t>& tap_indices() const { return tap_indices_; }
  std::size_t feature_end() const { return tap_indices_.back(); }
  std::size_t class_count() const { return config_.class_count; }
  bool is_tap(std::size_t index) const;

  // Runs layers [first, last) on x.
  BasicTensor<T> forward_range(const BasicTensor<T>& x, std::size_t first,
                               std::size_t last, Mode mode);
  BasicTensor<T> forward(const BasicTensor<T>& batch, Mode mode) {
    return forward_range(batch, 0, layers_.size(), mode);
  }

  // With need_logits == false and a tap given, stops after the tap layer.
  TapOutput<T> forward_with_tap(const BasicTensor<T>& batch,
                                std::optional<std::size_t> tap, Mode mode,
                                bool need_logits = true);

  // Inclusive layer range.
  void set_trainable(std::size_t first, std::size_t last, bool flag);
  void set_trainable(bool flag) { set_trainable(0, layers_.size() - 1, flag); }

  std::vector<BasicTensor<T>> parameters(std::size_t first, std::size_t last);
  std::vector<BasicTensor<T>> trainable_parameters();
  std::vector<NamedTensor<T>> state();
  std::vector<NamedTensor<T>> state(std::size_t first, std::size_t last);

 private:
  BasicModel() = default;

  ModelConfig config_;
  std::vector<std::unique_ptr<Layer<T>>> layers_;
  std::vector<std::size_t> tap_indices_;
};

using Model = BasicModel<float>;
using Model64 = BasicModel<double>;

// Weight file: "STWT", u16 version, u32 count, then per tensor u16 name
// length, name bytes, u8 rank, u32 dims, f32 data; CRC32 trailer. All
// integers and floats little-endian.
inline constexpr std::uint16_t kWeightFormatVersion = 1;

class WeightFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<std::uint8_t> encode_weights(Model& model);
// Verifies the whole file against the model before writing any tensor.
void decode_weights(Model& model, std::span<const std::uint8_t> bytes);

void save_weights(Model& model, const std::filesystem::path& path);
void load_weights(Model& model, const std::filesystem::path& path);

// Byte stream of the serialized tensors in an inclusive layer range; used for
// freeze checks.
std::vector<std::uint8_t> layer_bytes(Model& model, std::size_t first,
                                      std::size_t last);

}  // namespace splittrain
