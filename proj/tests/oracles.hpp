#pragma once

// Independent reference implementations used only by tests. Nothing here
// calls into the library's op implementations.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "splittrain/tensor.hpp"

namespace oracle {

// out[n,f,y,x] = b[f] + sum_{c,i,j} in[n,c,y*s+i-p,x*s+j-p] * w[f,c,i,j]
template <typename T>
std::vector<T> conv2d(const std::vector<T>& in, std::size_t N, std::size_t C,
                      std::size_t H, std::size_t W, const std::vector<T>& w,
                      std::size_t F, std::size_t kh, std::size_t kw,
                      const std::vector<T>& b, std::size_t stride, std::size_t pad) {
  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1;
  const std::size_t Wo = (W + 2 * pad - kw) / stride + 1;
  std::vector<T> out(N * F * Ho * Wo);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t y = 0; y < Ho; ++y)
        for (std::size_t x = 0; x < Wo; ++x) {
          double acc = b[f];
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const long iy = static_cast<long>(y * stride + i) - static_cast<long>(pad);
                const long ix = static_cast<long>(x * stride + j) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) ||
                    ix >= static_cast<long>(W))
                  continue;
                acc += static_cast<double>(in[((n * C + c) * H + iy) * W + ix]) *
                       static_cast<double>(w[((f * C + c) * kh + i) * kw + j]);
              }
          out[((n * F + f) * Ho + y) * Wo + x] = static_cast<T>(acc);
        }
  return out;
}

// x[N,D] * w[O,D]^T + b
template <typename T>
std::vector<T> matmul_bias(const std::vector<T>& x, std::size_t N, std::size_t D,
                           const std::vector<T>& w, std::size_t O,
                           const std::vector<T>& b) {
  std::vector<T> out(N * O);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o) {
      double acc = b[o];
      for (std::size_t d = 0; d < D; ++d)
        acc += static_cast<double>(x[n * D + d]) * static_cast<double>(w[o * D + d]);
      out[n * O + o] = static_cast<T>(acc);
    }
  return out;
}

template <typename T>
std::vector<T> random_values(std::size_t n, std::mt19937_64& gen, double lo = -1.0,
                             double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(dist(gen));
  return v;
}

// Central differences of a scalar function w.r.t. selected coordinates of a
// tensor's storage. The function re-reads the storage on each call.
inline std::vector<double> central_difference(
    splittrain::Tensor64& t, const std::vector<std::size_t>& coords,
    const std::function<double()>& f, double h = 1e-6) {
  std::vector<double> out;
  out.reserve(coords.size());
  auto data = t.mutable_data();
  for (auto i : coords) {
    const double saved = data[i];
    data[i] = saved + h;
    const double up = f();
    data[i] = saved - h;
    const double down = f();
    data[i] = saved;
    out.push_back((up - down) / (2.0 * h));
  }
  return out;
}

inline std::vector<std::size_t> all_coords(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

// ||a - b|| / max(||a|| + ||b||, floor)
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b,
                             double floor = 1e-12) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max(std::sqrt(na) + std::sqrt(nb), floor);
}

inline std::vector<double> pick(std::span<const double> v,
                                const std::vector<std::size_t>& coords) {
  std::vector<double> out;
  for (auto i : coords) out.push_back(v[i]);
  return out;
}

}  // namespace oracle
