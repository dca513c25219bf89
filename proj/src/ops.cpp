#include "splittrain/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cassert>
#include <cmath>
#include <limits>
#include <string>

#include "splittrain/parallel.hpp"

namespace splittrain::ops {

namespace {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Map = Eigen::Map<MatRM<T>>;
template <typename T>
using CMap = Eigen::Map<const MatRM<T>>;

template <typename T>
void check_finite([[maybe_unused]] const std::vector<T>& values,
                  [[maybe_unused]] const char* op) {
#ifndef NDEBUG
  for (const T v : values) {
    assert(std::isfinite(v) && "non-finite value after forward op");
  }
#endif
}

void require_rank(const Shape& shape, std::size_t rank, const char* op,
                  const char* what) {
  if (shape.size() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " +
                     std::to_string(rank) + ", got " + shape_str(shape));
  }
}

// Unfolds one sample [C,H,W] into columns [C*kh*kw, Ho*Wo].
template <typename T>
void im2col(const T* x, std::size_t C, std::size_t H, std::size_t W,
            std::size_t kh, std::size_t kw, std::size_t stride,
            std::size_t pad, std::size_t Ho, std::size_t Wo, T* cols) {
  const std::size_t plane = Ho * Wo;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        T* row = cols + ((c * kh + ki) * kw + kj) * plane;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const auto iy = static_cast<long>(oy * stride + ki) - static_cast<long>(pad);
          T* dst = row + oy * Wo;
          if (iy < 0 || iy >= static_cast<long>(H)) {
            std::fill(dst, dst + Wo, T(0));
            continue;
          }
          const T* src = x + (c * H + static_cast<std::size_t>(iy)) * W;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const auto ix = static_cast<long>(ox * stride + kj) - static_cast<long>(pad);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(W))
                          ? T(0)
                          : src[static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, std::size_t C, std::size_t H, std::size_t W,
                std::size_t kh, std::size_t kw, std::size_t stride,
                std::size_t pad, std::size_t Ho, std::size_t Wo, T* dx) {
  const std::size_t plane = Ho * Wo;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const T* row = cols + ((c * kh + ki) * kw + kj) * plane;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const auto iy = static_cast<long>(oy * stride + ki) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(H)) continue;
          T* dst = dx + (c * H + static_cast<std::size_t>(iy)) * W;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const auto ix = static_cast<long>(ox * stride + kj) - static_cast<long>(pad);
            if (ix < 0 || ix >= static_cast<long>(W)) continue;
            dst[static_cast<std::size_t>(ix)] += row[oy * Wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias, std::size_t stride,
                      std::size_t padding) {
  require_rank(input.shape(), 4, "conv2d", "input");
  require_rank(weight.shape(), 4, "conv2d", "weight");
  require_rank(bias.shape(), 1, "conv2d", "bias");
  const auto N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const auto F = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != C) {
    throw ShapeError("conv2d: input channels C=" + std::to_string(C) +
                     " but weight expects C=" + std::to_string(weight.dim(1)));
  }
  if (bias.dim(0) != F) {
    throw ShapeError("conv2d: bias has " + std::to_string(bias.dim(0)) +
                     " entries for F=" + std::to_string(F) + " filters");
  }
  if (kh % 2 == 0 || kw % 2 == 0) {
    throw ShapeError("conv2d: kernel size must be odd, got kh=" +
                     std::to_string(kh) + " kw=" + std::to_string(kw));
  }
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  if (H + 2 * padding < kh || W + 2 * padding < kw) {
    throw ShapeError("conv2d: padded input H=" + std::to_string(H + 2 * padding) +
                     " W=" + std::to_string(W + 2 * padding) +
                     " smaller than kernel");
  }
  if ((H + 2 * padding - kh) % stride != 0 || (W + 2 * padding - kw) % stride != 0) {
    throw ShapeError("conv2d: output size not integral for H=" + std::to_string(H) +
                     " W=" + std::to_string(W) + " stride=" + std::to_string(stride));
  }
  const auto Ho = (H + 2 * padding - kh) / stride + 1;
  const auto Wo = (W + 2 * padding - kw) / stride + 1;
  const auto K = C * kh * kw;
  const auto P = Ho * Wo;

  const bool need_cols = grad_mode_enabled() && weight.requires_grad();
  std::vector<T> out(N * F * P);
  std::vector<T> saved_cols(need_cols ? N * K * P : 0);
  const T* x = input.data().data();
  const T* b = bias.data().data();
  CMap<T> wmat(weight.data().data(), F, K);

  parallel_for(N, [&](std::size_t n) {
    std::vector<T> scratch(need_cols ? 0 : K * P);
    T* cols = need_cols ? saved_cols.data() + n * K * P : scratch.data();
    im2col(x + n * C * H * W, C, H, W, kh, kw, stride, padding, Ho, Wo, cols);
    Map<T> y(out.data() + n * F * P, F, P);
    y.noalias() = wmat * CMap<T>(cols, K, P);
    for (std::size_t f = 0; f < F; ++f) y.row(f).array() += b[f];
  });
  check_finite(out, "conv2d");

  auto in_impl = input.impl();
  auto w_impl = weight.impl();
  auto b_impl = bias.impl();
  auto cols_holder = std::make_shared<std::vector<T>>(std::move(saved_cols));
  return record<T>(
      Shape{N, F, Ho, Wo}, std::move(out), {input, weight, bias},
      [=](std::span<const T> gy) {
        if (w_impl->requires_grad) {
          std::vector<T> partial(N * F * K);
          parallel_for(N, [&](std::size_t n) {
            CMap<T> dy(gy.data() + n * F * P, F, P);
            Map<T>(partial.data() + n * F * K, F, K).noalias() =
                dy * CMap<T>(cols_holder->data() + n * K * P, K, P).transpose();
          });
          auto gw = grad_buffer(w_impl);
          for (std::size_t n = 0; n < N; ++n) {
            const T* p = partial.data() + n * F * K;
            for (std::size_t i = 0; i < F * K; ++i) gw[i] += p[i];
          }
        }
        if (b_impl->requires_grad) {
          auto gb = grad_buffer(b_impl);
          for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t f = 0; f < F; ++f) {
              const T* row = gy.data() + (n * F + f) * P;
              T acc = T(0);
              for (std::size_t p = 0; p < P; ++p) acc += row[p];
              gb[f] += acc;
            }
          }
        }
        if (in_impl->requires_grad) {
          auto gx = grad_buffer(in_impl);
          CMap<T> wm(w_impl->data.data(), F, K);
          parallel_for(N, [&](std::size_t n) {
            std::vector<T> dcols(K * P);
            Map<T>(dcols.data(), K, P).noalias() =
                wm.transpose() * CMap<T>(gy.data() + n * F * P, F, P);
            col2im_add(dcols.data(), C, H, W, kh, kw, stride, padding, Ho, Wo,
                       gx.data() + n * C * H * W);
          });
        }
      });
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input) {
  const auto x = input.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  auto in_impl = input.impl();
  return record<T>(input.shape(), std::move(out), {input},
                   [in_impl](std::span<const T> gy) {
                     auto gx = grad_buffer(in_impl);
                     const auto& xv = in_impl->data;
                     for (std::size_t i = 0; i < gy.size(); ++i) {
                       if (xv[i] > T(0)) gx[i] += gy[i];
                     }
                   });
}

template <typename T>
BasicTensor<T> maxpool2(const BasicTensor<T>& input) {
  require_rank(input.shape(), 4, "maxpool2", "input");
  const auto N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (H % 2 != 0 || W % 2 != 0) {
    throw ShapeError("maxpool2: spatial dims must be even, got H=" +
                     std::to_string(H) + " W=" + std::to_string(W));
  }
  const auto Ho = H / 2, Wo = W / 2;
  std::vector<T> out(N * C * Ho * Wo);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  const T* x = input.data().data();
  for (std::size_t plane = 0; plane < N * C; ++plane) {
    const T* src = x + plane * H * W;
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        std::size_t best = (2 * oy) * W + 2 * ox;
        const std::size_t candidates[3] = {best + 1, best + W, best + W + 1};
        for (auto idx : candidates) {
          if (src[idx] > src[best]) best = idx;
        }
        const auto o = (plane * Ho + oy) * Wo + ox;
        out[o] = src[best];
        (*argmax)[o] = plane * H * W + best;
      }
    }
  }
  auto in_impl = input.impl();
  return record<T>(Shape{N, C, Ho, Wo}, std::move(out), {input},
                   [in_impl, argmax](std::span<const T> gy) {
                     auto gx = grad_buffer(in_impl);
                     for (std::size_t o = 0; o < gy.size(); ++o) {
                       gx[(*argmax)[o]] += gy[o];
                     }
                   });
}

template <typename T>
BasicTensor<T> batchnorm2d(const BasicTensor<T>& input,
                           const BasicTensor<T>& gamma,
                           const BasicTensor<T>& beta, RunningStats<T>& stats,
                           Mode mode, double momentum, double eps) {
  require_rank(input.shape(), 4, "batchnorm2d", "input");
  const auto N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (gamma.numel() != C || beta.numel() != C || stats.mean.size() != C ||
      stats.var.size() != C) {
    throw ShapeError("batchnorm2d: per-channel parameters must have C=" +
                     std::to_string(C) + " entries");
  }
  const auto HW = H * W;
  const auto M = N * HW;
  if (mode == Mode::train && M < 2) {
    throw ShapeError("batchnorm2d: degenerate batch, N*H*W=" + std::to_string(M) +
                     " < 2 in train mode");
  }
  const T* x = input.data().data();
  const T* g = gamma.data().data();
  const T* bt = beta.data().data();
  std::vector<T> out(input.numel());
  auto xhat = std::make_shared<std::vector<T>>(input.numel());
  auto invstd = std::make_shared<std::vector<T>>(C);

  parallel_for(C, [&](std::size_t c) {
    T mean, var;
    if (mode == Mode::train) {
      double s = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = x + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(M);
      double ss = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = x + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) {
          const double d = p[i] - mu;
          ss += d * d;
        }
      }
      const double biased = ss / static_cast<double>(M);
      const double unbiased = ss / static_cast<double>(M - 1);
      mean = static_cast<T>(mu);
      var = static_cast<T>(biased);
      stats.mean[c] = static_cast<T>((1.0 - momentum) * stats.mean[c] + momentum * mu);
      stats.var[c] = static_cast<T>((1.0 - momentum) * stats.var[c] + momentum * unbiased);
    } else {
      mean = stats.mean[c];
      var = stats.var[c];
    }
    const T is = T(1) / std::sqrt(var + static_cast<T>(eps));
    (*invstd)[c] = is;
    for (std::size_t n = 0; n < N; ++n) {
      const auto off = (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) {
        const T xh = (x[off + i] - mean) * is;
        (*xhat)[off + i] = xh;
        out[off + i] = g[c] * xh + bt[c];
      }
    }
  });
  check_finite(out, "batchnorm2d");

  auto in_impl = input.impl();
  auto g_impl = gamma.impl();
  auto b_impl = beta.impl();
  const bool batch_stats = mode == Mode::train;
  return record<T>(
      input.shape(), std::move(out), {input, gamma, beta},
      [=](std::span<const T> gy) {
        std::vector<T> sum_dy(C), sum_dy_xhat(C);
        parallel_for(C, [&](std::size_t c) {
          double a = 0.0, b = 0.0;
          for (std::size_t n = 0; n < N; ++n) {
            const auto off = (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) {
              a += gy[off + i];
              b += gy[off + i] * (*xhat)[off + i];
            }
          }
          sum_dy[c] = static_cast<T>(a);
          sum_dy_xhat[c] = static_cast<T>(b);
        });
        if (g_impl->requires_grad) {
          auto gg = grad_buffer(g_impl);
          for (std::size_t c = 0; c < C; ++c) gg[c] += sum_dy_xhat[c];
        }
        if (b_impl->requires_grad) {
          auto gb = grad_buffer(b_impl);
          for (std::size_t c = 0; c < C; ++c) gb[c] += sum_dy[c];
        }
        if (in_impl->requires_grad) {
          auto gx = grad_buffer(in_impl);
          const T* gam = g_impl->data.data();
          const T inv_m = T(1) / static_cast<T>(M);
          parallel_for(C, [&](std::size_t c) {
            const T k = gam[c] * (*invstd)[c];
            for (std::size_t n = 0; n < N; ++n) {
              const auto off = (n * C + c) * HW;
              for (std::size_t i = 0; i < HW; ++i) {
                if (batch_stats) {
                  gx[off + i] += k * (gy[off + i] - inv_m * sum_dy[c] -
                                      (*xhat)[off + i] * inv_m * sum_dy_xhat[c]);
                } else {
                  gx[off + i] += k * gy[off + i];
                }
              }
            }
          });
        }
      });
}

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias) {
  require_rank(input.shape(), 2, "linear", "input");
  require_rank(weight.shape(), 2, "linear", "weight");
  require_rank(bias.shape(), 1, "linear", "bias");
  const auto N = input.dim(0), D = input.dim(1), O = weight.dim(0);
  if (weight.dim(1) != D) {
    throw ShapeError("linear: input has D=" + std::to_string(D) +
                     " features but weight expects " + std::to_string(weight.dim(1)));
  }
  if (bias.dim(0) != O) {
    throw ShapeError("linear: bias has " + std::to_string(bias.dim(0)) +
                     " entries for O=" + std::to_string(O) + " outputs");
  }
  std::vector<T> out(N * O);
  Map<T> y(out.data(), N, O);
  y.noalias() = CMap<T>(input.data().data(), N, D) *
                CMap<T>(weight.data().data(), O, D).transpose();
  const T* b = bias.data().data();
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t o = 0; o < O; ++o) out[n * O + o] += b[o];
  }
  check_finite(out, "linear");
  auto in_impl = input.impl();
  auto w_impl = weight.impl();
  auto b_impl = bias.impl();
  return record<T>(
      Shape{N, O}, std::move(out), {input, weight, bias},
      [=](std::span<const T> gy) {
        CMap<T> dy(gy.data(), N, O);
        if (in_impl->requires_grad) {
          auto gx = grad_buffer(in_impl);
          Map<T>(gx.data(), N, D).noalias() +=
              dy * CMap<T>(w_impl->data.data(), O, D);
        }
        if (w_impl->requires_grad) {
          auto gw = grad_buffer(w_impl);
          Map<T>(gw.data(), O, D).noalias() +=
              dy.transpose() * CMap<T>(in_impl->data.data(), N, D);
        }
        if (b_impl->requires_grad) {
          auto gb = grad_buffer(b_impl);
          for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t o = 0; o < O; ++o) gb[o] += gy[n * O + o];
          }
        }
      });
}

template <typename T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits,
                                     std::span<const int> labels) {
  require_rank(logits.shape(), 2, "softmax_cross_entropy", "logits");
  const auto N = logits.dim(0), K = logits.dim(1);
  if (labels.size() != N) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                     " labels for batch of " + std::to_string(N));
  }
  for (std::size_t n = 0; n < N; ++n) {
    if (labels[n] < 0 || static_cast<std::size_t>(labels[n]) >= K) {
      throw std::out_of_range("softmax_cross_entropy: label " +
                              std::to_string(labels[n]) + " at row " +
                              std::to_string(n) + " outside [0," +
                              std::to_string(K) + ")");
    }
  }
  const T* z = logits.data().data();
  auto probs = std::make_shared<std::vector<T>>(N * K);
  double total = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    const T* row = z + n * K;
    const T mx = *std::max_element(row, row + K);
    double denom = 0.0;
    for (std::size_t k = 0; k < K; ++k) denom += std::exp(static_cast<double>(row[k] - mx));
    const double log_denom = std::log(denom);
    for (std::size_t k = 0; k < K; ++k) {
      (*probs)[n * K + k] =
          static_cast<T>(std::exp(static_cast<double>(row[k] - mx) - log_denom));
    }
    total += log_denom - static_cast<double>(row[labels[n]] - mx);
  }
  const T loss = static_cast<T>(total / static_cast<double>(N));
  auto z_impl = logits.impl();
  std::vector<int> lab(labels.begin(), labels.end());
  return record<T>(Shape{}, std::vector<T>{loss}, {logits},
                   [=](std::span<const T> gy) {
                     auto gz = grad_buffer(z_impl);
                     const T s = gy[0] / static_cast<T>(N);
                     for (std::size_t n = 0; n < N; ++n) {
                       for (std::size_t k = 0; k < K; ++k) {
                         T p = (*probs)[n * K + k];
                         if (static_cast<int>(k) == lab[n]) p -= T(1);
                         gz[n * K + k] += s * p;
                       }
                     }
                   });
}

template <typename T>
BasicTensor<T> mse_loss(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mse_loss: shapes differ, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const auto av = a.data(), bv = b.data();
  const auto count = av.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    const double d = static_cast<double>(av[i]) - static_cast<double>(bv[i]);
    acc += d * d;
  }
  const T loss = static_cast<T>(acc / static_cast<double>(count));
  auto a_impl = a.impl();
  auto b_impl = b.impl();
  return record<T>(Shape{}, std::vector<T>{loss}, {a, b},
                   [=](std::span<const T> gy) {
                     const T s = T(2) * gy[0] / static_cast<T>(count);
                     const auto& ad = a_impl->data;
                     const auto& bd = b_impl->data;
                     if (a_impl->requires_grad) {
                       auto ga = grad_buffer(a_impl);
                       for (std::size_t i = 0; i < count; ++i) ga[i] += s * (ad[i] - bd[i]);
                     }
                     if (b_impl->requires_grad) {
                       auto gb = grad_buffer(b_impl);
                       for (std::size_t i = 0; i < count; ++i) gb[i] -= s * (ad[i] - bd[i]);
                     }
                   });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& input) {
  double acc = 0.0;
  for (const T v : input.data()) acc += v;
  auto in_impl = input.impl();
  return record<T>(Shape{}, std::vector<T>{static_cast<T>(acc)}, {input},
                   [in_impl](std::span<const T> gy) {
                     auto gx = grad_buffer(in_impl);
                     for (auto& g : gx) g += gy[0];
                   });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& input, T factor) {
  std::vector<T> out(input.data().begin(), input.data().end());
  for (auto& v : out) v *= factor;
  auto in_impl = input.impl();
  return record<T>(input.shape(), std::move(out), {input},
                   [in_impl, factor](std::span<const T> gy) {
                     auto gx = grad_buffer(in_impl);
                     for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += factor * gy[i];
                   });
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& input, Shape shape) {
  if (shape_numel(shape) != input.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(input.shape()) + " as " +
                     shape_str(shape));
  }
  auto in_impl = input.impl();
  return record<T>(std::move(shape),
                   std::vector<T>(input.data().begin(), input.data().end()), {input},
                   [in_impl](std::span<const T> gy) {
                     auto gx = grad_buffer(in_impl);
                     for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
                   });
}

template <typename T>
BasicTensor<T> element(const BasicTensor<T>& input, std::size_t flat_index) {
  if (flat_index >= input.numel()) {
    throw std::out_of_range("element: index " + std::to_string(flat_index) +
                            " outside tensor of " + std::to_string(input.numel()));
  }
  auto in_impl = input.impl();
  return record<T>(Shape{}, std::vector<T>{input.data()[flat_index]}, {input},
                   [in_impl, flat_index](std::span<const T> gy) {
                     grad_buffer(in_impl)[flat_index] += gy[0];
                   });
}

#define SPLITTRAIN_INSTANTIATE(T)                                                 \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&,    \
                                 const BasicTensor<T>&, std::size_t, std::size_t); \
  template BasicTensor<T> relu(const BasicTensor<T>&);                            \
  template BasicTensor<T> maxpool2(const BasicTensor<T>&);                        \
  template BasicTensor<T> batchnorm2d(const BasicTensor<T>&, const BasicTensor<T>&, \
                                      const BasicTensor<T>&, RunningStats<T>&,    \
                                      Mode, double, double);                      \
  template BasicTensor<T> linear(const BasicTensor<T>&, const BasicTensor<T>&,    \
                                 const BasicTensor<T>&);                          \
  template BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>&,            \
                                                std::span<const int>);            \
  template BasicTensor<T> mse_loss(const BasicTensor<T>&, const BasicTensor<T>&); \
  template BasicTensor<T> sum(const BasicTensor<T>&);                             \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                        \
  template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                  \
  template BasicTensor<T> element(const BasicTensor<T>&, std::size_t);

SPLITTRAIN_INSTANTIATE(float)
SPLITTRAIN_INSTANTIATE(double)

#undef SPLITTRAIN_INSTANTIATE

}  // namespace splittrain::ops
