#pragma once

#include "mccl/data.hpp"
#include "mccl/segnet.hpp"

namespace mccl {

/// Streaming per-class intersection/union accumulator over an evaluation set.
struct IouAccumulator {
  std::vector<std::int64_t> intersection;
  std::vector<std::int64_t> union_;

  explicit IouAccumulator(int num_classes) : intersection(num_classes, 0), union_(num_classes, 0) {}

  void add(const Tensor<std::int32_t>& pred, const Tensor<std::int32_t>& gt) {
    check(pred.size() == gt.size(), "miou: prediction/label size mismatch");
    const int z = static_cast<int>(intersection.size());
    for (std::int64_t i = 0; i < pred.size(); ++i) {
      const int p = pred[i], g = gt[i];
      check(p >= 0 && p < z && g >= 0 && g < z, "miou: label out of range [0,Z)");
      if (p == g) {
        ++intersection[p];
        ++union_[p];
      } else {
        ++union_[p];
        ++union_[g];
      }
    }
  }

  /// Mean IoU over classes with non-zero union (absent classes excluded).
  double value() const {
    double sum = 0;
    int counted = 0;
    for (std::size_t k = 0; k < union_.size(); ++k) {
      if (union_[k] == 0) continue;
      sum += static_cast<double>(intersection[k]) / static_cast<double>(union_[k]);
      ++counted;
    }
    return counted == 0 ? 0.0 : sum / counted;
  }
};

/// mIoU of a batch of prediction maps against ground truth.
inline double miou(const std::vector<Tensor<std::int32_t>>& pred,
                   const std::vector<Tensor<std::int32_t>>& gt, int num_classes) {
  check(pred.size() == gt.size(), "miou: batch size mismatch");
  IouAccumulator acc(num_classes);
  for (std::size_t i = 0; i < pred.size(); ++i) acc.add(pred[i], gt[i]);
  return acc.value();
}

/// Predicted label map for one raw sample image (no augmentation).
template <typename S>
Tensor<std::int32_t> predict_labels(const SegNetParams<S>& params, const Tensor<double>& image) {
  Tensor<S> chw = chw_from_hwc<S>(image);
  const std::int64_t h = chw.extent(1), w = chw.extent(2);
  Tensor<S> probs = decode(encode(chw.reshaped({1, 3, h, w}), params.enc), params.dec);
  return argmax_axis(probs.reshaped({probs.extent(1), h, w}), 0);
}

template <typename S>
double evaluate_miou(const SegNetParams<S>& params, const std::vector<Sample>& samples,
                     int num_classes) {
  IouAccumulator acc(num_classes);
  for (const auto& s : samples) acc.add(predict_labels(params, s.image), s.labels);
  return acc.value();
}

/// Spearman rank correlation with tie-aware (average) ranks.
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  check(x.size() == y.size() && x.size() >= 2, "spearman: need >= 2 paired samples");
  const auto ranks = [](const std::vector<double>& v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&v](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(n);
    std::size_t i = 0;
    while (i < n) {
      std::size_t j = i;
      while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= rx.size();
  my /= ry.size();
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace mccl
