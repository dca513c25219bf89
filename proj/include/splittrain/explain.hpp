#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "splittrain/data.hpp"
#include "splittrain/image_io.hpp"
#include "splittrain/nn.hpp"

namespace splittrain {

/// Attention map at input resolution, values in [0, 1].
struct Heatmap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;  // row-major
  std::size_t tap = 0;
  int class_index = 0;
};

// Bilinear resize with half-pixel centres and edge clamping.
std::vector<double> upsample_bilinear(std::span<const double> src, std::size_t h, std::size_t w,
                                      std::size_t H, std::size_t W);

// Divides by the maximum; an all-zero map stays zero. Negative inputs are
// clamped to zero first.
void normalize_max(std::vector<double>& values);

// Grad-CAM for one preprocessed image ([C,H,W] or [1,C,H,W]). Differentiates
// the pre-softmax logit of `class_index`. The model runs in eval mode and its
// parameter gradients are left untouched.
Heatmap grad_cam(Model& model, const Tensor& image, int class_index,
                 std::optional<std::size_t> tap = std::nullopt);

// Grad-CAM from a tap activation [1,K,h,w] and its gradient, before
// upsampling: relu(sum_k mean(grad_k) * A_k).
std::vector<double> grad_cam_map(std::span<const float> activation, std::span<const float> grad,
                                 std::size_t channels, std::size_t h, std::size_t w);

// Top round((1 - q) * N) pixels (at least one; ties broken row-major) as the
// attention region, intersected over united with the mask.
double attention_iou(const Heatmap& heatmap, std::span<const std::uint8_t> mask,
                     double q = 0.8);

// Piecewise-linear blue, cyan, green, yellow, red for v in [0, 1].
std::array<double, 3> colormap(double v);

// 8-bit RGB overlay: colour at alpha 0.5 over the min-max scaled grayscale
// image (RGB inputs are reduced to luma).
PngImage overlay(const Heatmap& heatmap, const Sample& base);

void render_heatmap(const Heatmap& heatmap, const Sample& base,
                    const std::filesystem::path& out_path);

// {"sample", "class", "tap", "iou"} next to a rendered heatmap.
void write_heatmap_sidecar(const std::filesystem::path& path, const std::string& sample_id,
                           const Heatmap& heatmap, double iou);

}  // namespace splittrain
