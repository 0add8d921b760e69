#pragma once

#include "mccl/rng.hpp"
#include "mccl/tensor.hpp"

namespace testutil {

template <typename T = double>
mccl::Tensor<T> random_tensor(mccl::Shape shape, mccl::Rng& rng, double lo = -1.0,
                              double hi = 1.0) {
  mccl::Tensor<T> t(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

/// Random per-pixel probability map {B,Z,H,W} (positive, sums to 1 over Z).
template <typename T = double>
mccl::Tensor<T> random_prob_map(std::int64_t b, std::int64_t z, std::int64_t h, std::int64_t w,
                                mccl::Rng& rng) {
  mccl::Tensor<T> t({b, z, h, w});
  const std::int64_t inner = h * w;
  for (std::int64_t i = 0; i < b; ++i) {
    for (std::int64_t p = 0; p < inner; ++p) {
      double sum = 0;
      for (std::int64_t k = 0; k < z; ++k) {
        const double v = rng.uniform(0.05, 1.0);
        t[(i * z + k) * inner + p] = static_cast<T>(v);
        sum += v;
      }
      for (std::int64_t k = 0; k < z; ++k)
        t[(i * z + k) * inner + p] = static_cast<T>(t[(i * z + k) * inner + p] / sum);
    }
  }
  return t;
}

template <typename T>
std::vector<double> to_vec(const mccl::Tensor<T>& t) {
  std::vector<double> v(t.size());
  for (std::int64_t i = 0; i < t.size(); ++i) v[i] = static_cast<double>(t[i]);
  return v;
}

template <typename T>
bool bitwise_equal(const mccl::Tensor<T>& a, const mccl::Tensor<T>& b) {
  if (!(a.shape() == b.shape())) return false;
  for (std::int64_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

}  // namespace testutil
