#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "splittrain/tensor.hpp"

namespace splittrain {

enum class Mode { train, eval };

// Per-channel running mean/variance, viewed over storage owned elsewhere
// (a batchnorm layer's buffers).
template <typename T>
struct RunningStats {
  std::span<T> mean;
  std::span<T> var;
};

inline constexpr double kBatchNormMomentum = 0.1;
inline constexpr double kBatchNormEps = 1e-5;

namespace ops {

// Cross-correlation, square stride and zero padding.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias, std::size_t stride = 1,
                      std::size_t padding = 0);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input);

// 2x2 window, stride 2. Gradient goes to the first maximal element in
// row-major window order.
template <typename T>
BasicTensor<T> maxpool2(const BasicTensor<T>& input);

// Train mode normalizes with batch statistics over (N,H,W) and updates
// `stats`; eval mode reads `stats` only.
template <typename T>
BasicTensor<T> batchnorm2d(const BasicTensor<T>& input,
                           const BasicTensor<T>& gamma,
                           const BasicTensor<T>& beta, RunningStats<T>& stats,
                           Mode mode, double momentum = kBatchNormMomentum,
                           double eps = kBatchNormEps);

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias);

template <typename T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits,
                                     std::span<const int> labels);

template <typename T>
BasicTensor<T> mse_loss(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& input);

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& input, T factor);

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& input, Shape shape);

// Scalar view of one element; used to backpropagate from a single logit.
template <typename T>
BasicTensor<T> element(const BasicTensor<T>& input, std::size_t flat_index);

}  // namespace ops
}  // namespace splittrain
