#pragma once

// Brute-force reference implementations used as independent oracles. These
// are deliberately written as plain nested loops over std::vector<double>
// so they share no code path with the library kernels they check.

#include <cmath>
#include <cstdint>
#include <vector>

namespace oracle {

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (na < 1e-12 || nb < 1e-12) return 0.0;
  return dot / (na * nb);
}

/// Mean over positions of the channel-vector cosine; layout {C, P} flattened.
inline double p2p_similarity(const std::vector<double>& fs, const std::vector<double>& fw,
                             std::int64_t channels, std::int64_t positions) {
  double acc = 0;
  for (std::int64_t p = 0; p < positions; ++p) {
    std::vector<double> a(channels), b(channels);
    for (std::int64_t c = 0; c < channels; ++c) {
      a[c] = fs[c * positions + p];
      b[c] = fw[c * positions + p];
    }
    acc += cosine(a, b);
  }
  return acc / static_cast<double>(positions);
}

/// Mean over all entries of the squared difference.
inline double mse(const std::vector<double>& a, const std::vector<double>& b) {
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return acc / static_cast<double>(a.size());
}

/// Pixel-wise cross-entropy of logits {B,Z,H*W} against labels {B,H*W}.
inline double cross_entropy(const std::vector<double>& logits,
                            const std::vector<std::int32_t>& labels, std::int64_t batch,
                            std::int64_t classes, std::int64_t pixels) {
  double total = 0;
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t p = 0; p < pixels; ++p) {
      double denom = 0;
      for (std::int64_t k = 0; k < classes; ++k)
        denom += std::exp(logits[(b * classes + k) * pixels + p]);
      const double prob =
          std::exp(logits[(b * classes + labels[b * pixels + p]) * pixels + p]) / denom;
      total -= std::log(prob);
    }
  }
  return total / static_cast<double>(batch * pixels);
}

/// Confidence-masked pseudo-label cross-entropy on probability maps
/// {B,Z,H*W}; returns 0 when no pixel clears the threshold.
inline double ip_loss(const std::vector<double>& p_s, const std::vector<double>& p_w,
                      double tau, std::int64_t batch, std::int64_t classes, std::int64_t pixels) {
  double total = 0;
  std::int64_t confident = 0;
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t p = 0; p < pixels; ++p) {
      double best = p_w[b * classes * pixels + p];
      std::int64_t arg = 0;
      for (std::int64_t k = 1; k < classes; ++k) {
        const double v = p_w[(b * classes + k) * pixels + p];
        if (v > best) {
          best = v;
          arg = k;
        }
      }
      if (best >= tau) {
        ++confident;
        total -= std::log(p_s[(b * classes + arg) * pixels + p]);
      }
    }
  }
  return confident == 0 ? 0.0 : total / static_cast<double>(confident);
}

/// O(|M_in| * |M_dis|) nearest-neighbour similarity loss. Each class k
/// supplies m_in[k] (rows of intra features) and m_dis[k] (rows of
/// outliers); classes with an empty side are excluded.
inline double outlier_loss(const std::vector<std::vector<std::vector<double>>>& m_in,
                           const std::vector<std::vector<std::vector<double>>>& m_dis) {
  double total = 0;
  std::int64_t eligible = 0;
  for (std::size_t k = 0; k < m_in.size(); ++k) {
    if (m_in[k].empty() || m_dis[k].empty()) continue;
    ++eligible;
    double cls = 0;
    for (const auto& h : m_dis[k]) {
      double best = -2.0;
      for (const auto& r : m_in[k]) best = std::max(best, cosine(h, r));
      cls += 1.0 - best;
    }
    total += cls / static_cast<double>(m_dis[k].size());
  }
  return eligible == 0 ? 0.0 : total / static_cast<double>(eligible);
}

}  // namespace oracle
