#include "splittrain/explain.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <numeric>
#include <stdexcept>

namespace splittrain {

std::vector<double> upsample_bilinear(std::span<const double> src, std::size_t h, std::size_t w,
                                      std::size_t H, std::size_t W) {
  if (src.size() != h * w || h == 0 || w == 0) {
    throw std::invalid_argument("upsample_bilinear: source size mismatch");
  }
  std::vector<double> out(H * W);
  const double sy = static_cast<double>(h) / static_cast<double>(H);
  const double sx = static_cast<double>(w) / static_cast<double>(W);
  for (std::size_t y = 0; y < H; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0,
                                 static_cast<double>(h - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const auto y1 = std::min(y0 + 1, h - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < W; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0,
                                   static_cast<double>(w - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const auto x1 = std::min(x0 + 1, w - 1);
      const double wx = fx - static_cast<double>(x0);
      out[y * W + x] = (1 - wy) * ((1 - wx) * src[y0 * w + x0] + wx * src[y0 * w + x1]) +
                       wy * ((1 - wx) * src[y1 * w + x0] + wx * src[y1 * w + x1]);
    }
  }
  return out;
}

void normalize_max(std::vector<double>& values) {
  double peak = 0.0;
  for (auto& v : values) {
    v = std::max(v, 0.0);
    peak = std::max(peak, v);
  }
  if (peak <= 0.0) return;
  for (auto& v : values) v = std::min(v / peak, 1.0);
}

std::vector<double> grad_cam_map(std::span<const float> activation, std::span<const float> grad,
                                 std::size_t channels, std::size_t h, std::size_t w) {
  const auto area = h * w;
  if (activation.size() != channels * area || grad.size() != channels * area) {
    throw std::invalid_argument("grad_cam_map: buffer size mismatch");
  }
  std::vector<double> map(area, 0.0);
  for (std::size_t k = 0; k < channels; ++k) {
    double alpha = 0.0;
    for (std::size_t i = 0; i < area; ++i) alpha += grad[k * area + i];
    alpha /= static_cast<double>(area);
    for (std::size_t i = 0; i < area; ++i) map[i] += alpha * activation[k * area + i];
  }
  for (auto& v : map) v = std::max(v, 0.0);
  return map;
}

namespace {

// Restores per-layer trainable flags on scope exit.
class TrainableSnapshot {
 public:
  explicit TrainableSnapshot(Model& model) : model_(model) {
    for (std::size_t i = 0; i < model.layer_count(); ++i) flags_.push_back(model.layer(i).trainable());
  }
  ~TrainableSnapshot() {
    for (std::size_t i = 0; i < flags_.size(); ++i) model_.layer(i).set_trainable(flags_[i]);
  }
  TrainableSnapshot(const TrainableSnapshot&) = delete;
  TrainableSnapshot& operator=(const TrainableSnapshot&) = delete;

 private:
  Model& model_;
  std::vector<bool> flags_;
};

}  // namespace

Heatmap grad_cam(Model& model, const Tensor& image, int class_index,
                 std::optional<std::size_t> tap_opt) {
  const auto tap = tap_opt.value_or(model.feature_end());
  if (!model.is_tap(tap)) throw std::invalid_argument("grad_cam: invalid tap " + std::to_string(tap));
  if (class_index < 0 || static_cast<std::size_t>(class_index) >= model.class_count()) {
    throw std::out_of_range("grad_cam: class index " + std::to_string(class_index) +
                            " outside [0," + std::to_string(model.class_count()) + ")");
  }
  Tensor batch = image;
  if (image.rank() == 3) batch = ops::reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)});
  if (batch.rank() != 4 || batch.dim(0) != 1) {
    throw std::invalid_argument("grad_cam: expected one image, got " + shape_str(image.shape()));
  }

  Tensor activation;
  {
    NoGradGuard guard;
    activation = model.forward_range(batch.detach(), 0, tap + 1, Mode::eval);
  }
  Tensor leaf(activation.shape(), std::vector<float>(activation.data().begin(), activation.data().end()),
              true);
  {
    TrainableSnapshot snapshot(model);
    model.set_trainable(tap + 1, model.layer_count() - 1, false);
    auto logits = model.forward_range(leaf, tap + 1, model.layer_count(), Mode::eval);
    auto score = ops::element(logits, static_cast<std::size_t>(class_index));
    backward(score);
  }

  const auto K = activation.dim(1), h = activation.dim(2), w = activation.dim(3);
  const auto raw = grad_cam_map(activation.data(), leaf.grad(), K, h, w);
  Heatmap hm;
  hm.height = batch.dim(2);
  hm.width = batch.dim(3);
  hm.values = upsample_bilinear(raw, h, w, hm.height, hm.width);
  normalize_max(hm.values);
  hm.tap = tap;
  hm.class_index = class_index;
  return hm;
}

double attention_iou(const Heatmap& heatmap, std::span<const std::uint8_t> mask, double q) {
  const auto n = heatmap.values.size();
  if (mask.size() != n || n != heatmap.height * heatmap.width) {
    throw std::invalid_argument("attention_iou: heatmap is " + std::to_string(heatmap.height) +
                                "x" + std::to_string(heatmap.width) + " but mask has " +
                                std::to_string(mask.size()) + " pixels");
  }
  if (!(q > 0.0 && q < 1.0)) throw std::invalid_argument("attention_iou: q must lie in (0, 1)");
  const auto k = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::lround((1.0 - q) * static_cast<double>(n))));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return heatmap.values[a] > heatmap.values[b];
  });
  std::vector<std::uint8_t> top(n, 0);
  for (std::size_t i = 0; i < k; ++i) top[order[i]] = 1;
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const bool a = top[i], b = mask[i] != 0;
    inter += a && b;
    uni += a || b;
  }
  return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

std::array<double, 3> colormap(double v) {
  v = std::clamp(v, 0.0, 1.0);
  static constexpr std::array<std::array<double, 3>, 5> stops{{
      {0, 0, 1}, {0, 1, 1}, {0, 1, 0}, {1, 1, 0}, {1, 0, 0}}};
  const double pos = v * 4.0;
  const auto i = std::min<std::size_t>(static_cast<std::size_t>(pos), 3);
  const double t = pos - static_cast<double>(i);
  std::array<double, 3> out{};
  for (std::size_t c = 0; c < 3; ++c) out[c] = (1 - t) * stops[i][c] + t * stops[i + 1][c];
  return out;
}

PngImage overlay(const Heatmap& heatmap, const Sample& base) {
  const auto H = base.height, W = base.width, C = base.channels;
  if (heatmap.height != H || heatmap.width != W) {
    throw std::invalid_argument("overlay: heatmap and image sizes differ");
  }
  std::vector<double> gray(H * W);
  for (std::size_t i = 0; i < H * W; ++i) {
    if (C == 3) {
      gray[i] = 0.299 * base.pixels[i * 3] + 0.587 * base.pixels[i * 3 + 1] +
                0.114 * base.pixels[i * 3 + 2];
    } else {
      gray[i] = base.pixels[i];
    }
  }
  const auto [lo, hi] = std::minmax_element(gray.begin(), gray.end());
  const double span = *hi - *lo;
  const double lo_v = *lo;
  PngImage img{H, W, 3, 8, std::vector<std::uint16_t>(H * W * 3)};
  for (std::size_t i = 0; i < H * W; ++i) {
    const double g = span > 0 ? (gray[i] - lo_v) / span : 0.0;
    const auto colour = colormap(heatmap.values[i]);
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = 0.5 * colour[c] + 0.5 * g;
      img.values[i * 3 + c] = static_cast<std::uint16_t>(std::lround(255.0 * v));
    }
  }
  return img;
}

void render_heatmap(const Heatmap& heatmap, const Sample& base,
                    const std::filesystem::path& out_path) {
  write_png(out_path, overlay(heatmap, base));
}

void write_heatmap_sidecar(const std::filesystem::path& path, const std::string& sample_id,
                           const Heatmap& heatmap, double iou) {
  const nlohmann::json j{{"sample", sample_id},
                         {"class", heatmap.class_index},
                         {"tap", heatmap.tap},
                         {"iou", iou}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

}  // namespace splittrain
