#include "splittrain/nn.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "splittrain/rng.hpp"

namespace splittrain {

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::flatten: return "flatten";
    case LayerKind::linear: return "linear";
  }
  return "unknown";
}

template <typename T>
void Layer<T>::set_trainable(bool flag) {
  trainable_ = flag;
  for (auto& p : parameters()) p.tensor.set_requires_grad(flag);
}

namespace {

template <typename T>
BasicTensor<T> kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) v = static_cast<T>(rng.uniform(-bound, bound));
  return BasicTensor<T>(std::move(shape), std::move(values), true);
}

template <typename T>
BasicTensor<T> deep_copy(const BasicTensor<T>& t) {
  return BasicTensor<T>(t.shape(), std::vector<T>(t.data().begin(), t.data().end()),
                        t.requires_grad());
}

template <typename T>
class Conv final : public Layer<T> {
 public:
  Conv(std::string name, std::size_t in, std::size_t out, Rng& rng)
      : Layer<T>(std::move(name)),
        weight_(kaiming_uniform<T>({out, in, 3, 3}, in * 9, rng)),
        bias_(BasicTensor<T>::zeros({out}, true)) {}
  Conv(const Conv& o)
      : Layer<T>(o), weight_(deep_copy(o.weight_)), bias_(deep_copy(o.bias_)) {}

  LayerKind kind() const override { return LayerKind::conv; }
  BasicTensor<T> forward(const BasicTensor<T>& x, Mode) override {
    return ops::conv2d(x, weight_, bias_, 1, 1);
  }
  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<Conv>(*this);
  }
  std::vector<NamedTensor<T>> parameters() override {
    return {{this->name() + ".weight", weight_}, {this->name() + ".bias", bias_}};
  }

 private:
  BasicTensor<T> weight_, bias_;
};

template <typename T>
class BatchNorm final : public Layer<T> {
 public:
  BatchNorm(std::string name, std::size_t channels)
      : Layer<T>(std::move(name)),
        gamma_(BasicTensor<T>::full({channels}, T(1), true)),
        beta_(BasicTensor<T>::zeros({channels}, true)),
        running_mean_(BasicTensor<T>::zeros({channels})),
        running_var_(BasicTensor<T>::full({channels}, T(1))) {}
  BatchNorm(const BatchNorm& o)
      : Layer<T>(o),
        gamma_(deep_copy(o.gamma_)),
        beta_(deep_copy(o.beta_)),
        running_mean_(deep_copy(o.running_mean_)),
        running_var_(deep_copy(o.running_var_)) {}

  LayerKind kind() const override { return LayerKind::batchnorm; }
  BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode) override {
    RunningStats<T> stats{running_mean_.mutable_data(), running_var_.mutable_data()};
    return ops::batchnorm2d(x, gamma_, beta_, stats, this->effective_mode(mode));
  }
  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<BatchNorm>(*this);
  }
  std::vector<NamedTensor<T>> parameters() override {
    return {{this->name() + ".gamma", gamma_}, {this->name() + ".beta", beta_}};
  }
  std::vector<NamedTensor<T>> state() override {
    return {{this->name() + ".gamma", gamma_},
            {this->name() + ".beta", beta_},
            {this->name() + ".running_mean", running_mean_},
            {this->name() + ".running_var", running_var_}};
  }

 private:
  BasicTensor<T> gamma_, beta_, running_mean_, running_var_;
};

template <typename T>
class Relu final : public Layer<T> {
 public:
  using Layer<T>::Layer;
  LayerKind kind() const override { return LayerKind::relu; }
  BasicTensor<T> forward(const BasicTensor<T>& x, Mode) override { return ops::relu(x); }
  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<Relu>(*this);
  }
};

template <typename T>
class MaxPool final : public Layer<T> {
 public:
  using Layer<T>::Layer;
  LayerKind kind() const override { return LayerKind::maxpool; }
  BasicTensor<T> forward(const BasicTensor<T>& x, Mode) override {
    return ops::maxpool2(x);
  }
  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<MaxPool>(*this);
  }
};

template <typename T>
class Flatten final : public Layer<T> {
 public:
  using Layer<T>::Layer;
  LayerKind kind() const override { return LayerKind::flatten; }
  BasicTensor<T> forward(const BasicTensor<T>& x, Mode) override {
    const auto n = x.dim(0);
    return ops::reshape(x, Shape{n, x.numel() / n});
  }
  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<Flatten>(*this);
  }
};

template <typename T>
class Linear final : public Layer<T> {
 public:
  Linear(std::string name, std::size_t in, std::size_t out, Rng& rng)
      : Layer<T>(std::move(name)),
        weight_(kaiming_uniform<T>({out, in}, in, rng)),
        bias_(BasicTensor<T>::zeros({out}, true)) {}
  Linear(const Linear& o)
      : Layer<T>(o), weight_(deep_copy(o.weight_)), bias_(deep_copy(o.bias_)) {}

  LayerKind kind() const override { return LayerKind::linear; }
  BasicTensor<T> forward(const BasicTensor<T>& x, Mode) override {
    return ops::linear(x, weight_, bias_);
  }
  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<Linear>(*this);
  }
  std::vector<NamedTensor<T>> parameters() override {
    return {{this->name() + ".weight", weight_}, {this->name() + ".bias", bias_}};
  }

 private:
  BasicTensor<T> weight_, bias_;
};

}  // namespace

template <typename T>
BasicModel<T> BasicModel<T>::build_simple_cnn(const ModelConfig& config) {
  const auto [C, H, W] = config.input_shape;
  if (C == 0 || H == 0 || W == 0 || H % 16 != 0 || W % 16 != 0) {
    throw ConfigError("input size " + std::to_string(H) + "x" + std::to_string(W) +
                      " must be nonzero multiples of 16 for four 2x2 pools");
  }
  if (config.class_count < 2) throw ConfigError("class_count must be at least 2");
  if (config.hidden_dim == 0) throw ConfigError("hidden_dim must be positive");
  for (auto w : config.channel_widths) {
    if (w == 0) throw ConfigError("channel widths must be positive");
  }

  BasicModel model;
  model.config_ = config;
  Rng rng(config.seed);
  std::size_t in = C;
  for (std::size_t b = 0; b < 4; ++b) {
    const auto prefix = "block" + std::to_string(b + 1);
    const auto out = config.channel_widths[b];
    model.layers_.push_back(std::make_unique<Conv<T>>(prefix + ".conv", in, out, rng));
    model.layers_.push_back(std::make_unique<BatchNorm<T>>(prefix + ".bn", out));
    model.layers_.push_back(std::make_unique<Relu<T>>(prefix + ".relu"));
    model.layers_.push_back(std::make_unique<MaxPool<T>>(prefix + ".pool"));
    model.tap_indices_.push_back(model.layers_.size() - 1);
    in = out;
  }
  const auto features = in * (H / 16) * (W / 16);
  model.layers_.push_back(std::make_unique<Flatten<T>>("flatten"));
  model.layers_.push_back(
      std::make_unique<Linear<T>>("fc1", features, config.hidden_dim, rng));
  model.layers_.push_back(std::make_unique<Relu<T>>("fc1.relu"));
  model.layers_.push_back(
      std::make_unique<Linear<T>>("fc2", config.hidden_dim, config.class_count, rng));
  return model;
}

template <typename T>
BasicModel<T>::BasicModel(const BasicModel& other)
    : config_(other.config_), tap_indices_(other.tap_indices_) {
  layers_.reserve(other.layers_.size());
  for (const auto& l : other.layers_) layers_.push_back(l->clone());
}

template <typename T>
BasicModel<T>& BasicModel<T>::operator=(const BasicModel& other) {
  if (this != &other) {
    BasicModel copy(other);
    *this = std::move(copy);
  }
  return *this;
}

template <typename T>
bool BasicModel<T>::is_tap(std::size_t index) const {
  return std::find(tap_indices_.begin(), tap_indices_.end(), index) !=
         tap_indices_.end();
}

template <typename T>
BasicTensor<T> BasicModel<T>::forward_range(const BasicTensor<T>& x,
                                            std::size_t first, std::size_t last,
                                            Mode mode) {
  if (first > last || last > layers_.size()) {
    throw std::out_of_range("layer range [" + std::to_string(first) + "," +
                            std::to_string(last) + ") outside model of " +
                            std::to_string(layers_.size()) + " layers");
  }
  BasicTensor<T> h = x;
  for (auto i = first; i < last; ++i) h = layers_[i]->forward(h, mode);
  return h;
}

template <typename T>
TapOutput<T> BasicModel<T>::forward_with_tap(const BasicTensor<T>& batch,
                                             std::optional<std::size_t> tap,
                                             Mode mode, bool need_logits) {
  TapOutput<T> out;
  if (!tap) {
    out.logits = forward(batch, mode);
    return out;
  }
  if (!is_tap(*tap)) {
    throw std::invalid_argument("invalid tap index " + std::to_string(*tap));
  }
  auto act = forward_range(batch, 0, *tap + 1, mode);
  out.activation = act;
  if (need_logits) out.logits = forward_range(act, *tap + 1, layers_.size(), mode);
  return out;
}

template <typename T>
void BasicModel<T>::set_trainable(std::size_t first, std::size_t last, bool flag) {
  if (first > last || last >= layers_.size()) {
    throw std::out_of_range("trainable range [" + std::to_string(first) + "," +
                            std::to_string(last) + "] outside model of " +
                            std::to_string(layers_.size()) + " layers");
  }
  for (auto i = first; i <= last; ++i) layers_[i]->set_trainable(flag);
}

template <typename T>
std::vector<BasicTensor<T>> BasicModel<T>::parameters(std::size_t first,
                                                      std::size_t last) {
  std::vector<BasicTensor<T>> out;
  for (auto i = first; i <= last && i < layers_.size(); ++i) {
    for (auto& p : layers_[i]->parameters()) out.push_back(p.tensor);
  }
  return out;
}

template <typename T>
std::vector<BasicTensor<T>> BasicModel<T>::trainable_parameters() {
  std::vector<BasicTensor<T>> out;
  for (auto& l : layers_) {
    if (!l->trainable()) continue;
    for (auto& p : l->parameters()) out.push_back(p.tensor);
  }
  return out;
}

template <typename T>
std::vector<NamedTensor<T>> BasicModel<T>::state() {
  return state(0, layers_.size() - 1);
}

template <typename T>
std::vector<NamedTensor<T>> BasicModel<T>::state(std::size_t first, std::size_t last) {
  std::vector<NamedTensor<T>> out;
  for (auto i = first; i <= last && i < layers_.size(); ++i) {
    for (auto& p : layers_[i]->state()) out.push_back(p);
  }
  return out;
}

template class Layer<float>;
template class Layer<double>;
template class BasicModel<float>;
template class BasicModel<double>;

// ---- weight files ---------------------------------------------------------

namespace {

static_assert(std::endian::native == std::endian::little,
              "weight I/O assumes a little-endian host");

class Writer {
 public:
  template <typename U>
  void put(U v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(U));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes.insert(bytes.end(), p, p + n);
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}
  template <typename U>
  U get() {
    U v;
    std::memcpy(&v, take(sizeof(U)), sizeof(U));
    return v;
  }
  const std::uint8_t* take(std::size_t n) {
    if (pos_ + n > bytes_.size()) {
      throw WeightFormatError("weight file truncated at byte " + std::to_string(pos_));
    }
    const auto* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t pos() const { return pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, bytes.data(), static_cast<uInt>(bytes.size())));
}

void write_tensors(Writer& w, const std::vector<NamedTensor<float>>& tensors) {
  for (const auto& [name, t] : tensors) {
    w.put(static_cast<std::uint16_t>(name.size()));
    w.put_bytes(name.data(), name.size());
    w.put(static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) w.put(static_cast<std::uint32_t>(d));
    w.put_bytes(t.data().data(), t.numel() * sizeof(float));
  }
}

}  // namespace

std::vector<std::uint8_t> encode_weights(Model& model) {
  const auto tensors = model.state();
  Writer w;
  w.put_bytes("STWT", 4);
  w.put(kWeightFormatVersion);
  w.put(static_cast<std::uint32_t>(tensors.size()));
  write_tensors(w, tensors);
  w.put(crc32_of(w.bytes));
  return std::move(w.bytes);
}

void decode_weights(Model& model, std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 + 2 + 4 + 4) {
    throw WeightFormatError("weight file truncated: " + std::to_string(bytes.size()) +
                            " bytes");
  }
  if (std::memcmp(bytes.data(), "STWT", 4) != 0) {
    throw WeightFormatError("bad magic, not a weight file");
  }
  Reader r(bytes);
  r.take(4);
  const auto version = r.get<std::uint16_t>();
  if (version != kWeightFormatVersion) {
    throw WeightFormatError("unsupported weight format version " +
                            std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>();
  auto targets = model.state();
  if (count != targets.size()) {
    throw WeightFormatError("weight file holds " + std::to_string(count) +
                            " tensors, model expects " + std::to_string(targets.size()));
  }
  struct Pending {
    std::size_t target;
    const std::uint8_t* data;
  };
  std::vector<Pending> pending;
  pending.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint16_t>();
    const auto* name_ptr = r.take(name_len);
    std::string name(reinterpret_cast<const char*>(name_ptr), name_len);
    const auto rank = r.get<std::uint8_t>();
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint32_t>();
    const auto* data = r.take(shape_numel(shape) * sizeof(float));
    const auto& target = targets[i];
    if (target.name != name) {
      throw WeightFormatError("tensor " + std::to_string(i) + " is '" + name +
                              "', model expects '" + target.name + "'");
    }
    if (target.tensor.shape() != shape) {
      throw WeightFormatError("shape mismatch for tensor '" + name + "': file " +
                              shape_str(shape) + ", model " +
                              shape_str(target.tensor.shape()));
    }
    pending.push_back({i, data});
  }
  const auto body_end = r.pos();
  const auto stored = r.get<std::uint32_t>();
  if (r.pos() != bytes.size()) {
    throw WeightFormatError("trailing bytes after weight file checksum");
  }
  if (crc32_of(bytes.first(body_end)) != stored) {
    throw WeightFormatError("weight file checksum mismatch");
  }
  for (const auto& p : pending) {
    auto dst = targets[p.target].tensor.mutable_data();
    std::memcpy(dst.data(), p.data, dst.size() * sizeof(float));
  }
}

void save_weights(Model& model, const std::filesystem::path& path) {
  const auto bytes = encode_weights(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

void load_weights(Model& model, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  decode_weights(model, bytes);
}

std::vector<std::uint8_t> layer_bytes(Model& model, std::size_t first,
                                      std::size_t last) {
  Writer w;
  write_tensors(w, model.state(first, last));
  return std::move(w.bytes);
}

}  // namespace splittrain
