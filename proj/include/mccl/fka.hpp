#pragma once

#include <numeric>

#include "mccl/tape.hpp"

namespace mccl {

// ---------------------------------------------------------------------------
// Point-to-point alignment

/// Mean over feature-map positions of the cosine between the two views'
/// channel vectors. Inputs are {C,p,q}; positions with a near-zero norm on
/// either side contribute 0.
template <typename S>
S p2p_similarity_value(const Tensor<S>& fs, const Tensor<S>& fw) {
  check(fs.same_shape(fw) && fs.rank() == 3,
        "p2p_similarity: expected matching {C,p,q}, got " + shape_str(fs.shape()) + " vs " +
            shape_str(fw.shape()));
  const std::int64_t c = fs.extent(0), pq = fs.extent(1) * fs.extent(2);
  double acc = 0;
  for (std::int64_t pos = 0; pos < pq; ++pos) {
    double dot = 0, na = 0, nb = 0;
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const double a = fs[ch * pq + pos], b = fw[ch * pq + pos];
      dot += a * b;
      na += a * a;
      nb += b * b;
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    if (na >= 1e-12 && nb >= 1e-12) acc += dot / (na * nb);
  }
  return static_cast<S>(acc / static_cast<double>(pq));
}

/// Tape form; the weak-view features are a constant (stop-gradient).
template <typename S>
Var<S> p2p_similarity(Var<S> fs, const Tensor<S>& fw) {
  Tensor<S> fw_copy = fw;
  const S val = p2p_similarity_value(fs.value(), fw);
  const auto pfs = fs.id;
  return fs.tape->push(
      Tensor<S>::scalar(val), {pfs}, "p2p_similarity",
      [pfs, fw = std::move(fw_copy)](Tape<S>& t, std::int32_t self) {
        const S g = t.grad_value(self).item();
        const Tensor<S>& a = t.value(pfs);
        const std::int64_t c = a.extent(0), pq = a.extent(1) * a.extent(2);
        const S inv_p = S(1) / static_cast<S>(pq);
        Tensor<S> ga(a.shape());
        for (std::int64_t pos = 0; pos < pq; ++pos) {
          double dot = 0, na2 = 0, nb2 = 0;
          for (std::int64_t ch = 0; ch < c; ++ch) {
            const double av = a[ch * pq + pos], bv = fw[ch * pq + pos];
            dot += av * bv;
            na2 += av * av;
            nb2 += bv * bv;
          }
          const double na = std::sqrt(na2), nb = std::sqrt(nb2);
          if (na < 1e-12 || nb < 1e-12) continue;
          const double cosv = dot / (na * nb);
          for (std::int64_t ch = 0; ch < c; ++ch) {
            const double av = a[ch * pq + pos], bv = fw[ch * pq + pos];
            ga[ch * pq + pos] =
                g * inv_p * static_cast<S>(bv / (na * nb) - cosv * av / na2);
          }
        }
        t.add_grad(pfs, ga);
      });
}

template <typename S>
S p2p_loss_value(const std::vector<S>& sims) {
  check(!sims.empty(), "p2p_loss: empty batch");
  double m = 0;
  for (S s : sims) m += s;
  return static_cast<S>(1.0 - m / static_cast<double>(sims.size()));
}

/// 1 - mean of per-image similarities.
template <typename S>
Var<S> p2p_loss(const std::vector<Var<S>>& sims) {
  check(!sims.empty(), "p2p_loss: empty batch");
  Var<S> acc = sims[0];
  for (std::size_t i = 1; i < sims.size(); ++i) acc = add(acc, sims[i]);
  return add_scalar(scale(acc, -1.0 / static_cast<double>(sims.size())), 1.0);
}

// ---------------------------------------------------------------------------
// Class feature sets (pseudo-labelled gathering)

/// Row index into a batch of feature maps: image b, flattened position pos.
struct FeatureRef {
  std::int32_t image;
  std::int32_t pos;
};

/// Per class k: weak-view and strong-view feature vectors gathered at the
/// positions pseudo-labelled k. Rows of `weak` and `strong` are aligned and
/// `refs` records where each row came from.
template <typename S>
struct ClassFeatureSets {
  std::int64_t channels = 0;
  std::vector<Tensor<S>> weak;              // per class, {N_k, C}; empty when N_k == 0
  std::vector<Tensor<S>> strong;            // same layout as weak
  std::vector<std::vector<FeatureRef>> refs;

  explicit ClassFeatureSets(int num_classes = 0, std::int64_t c = 0)
      : channels(c), weak(num_classes), strong(num_classes), refs(num_classes) {}

  int num_classes() const { return static_cast<int>(weak.size()); }
  std::int64_t count(int k) const { return static_cast<std::int64_t>(refs[k].size()); }
};

/// Pseudo-label map for one image: argmax over classes of p_w {Z,H,W},
/// downsampled to the feature resolution by nearest neighbour.
template <typename S>
Tensor<std::int32_t> pseudo_labels(const Tensor<S>& p_w, std::int64_t p, std::int64_t q) {
  check(p_w.rank() == 3, "pseudo_labels: expected {Z,H,W}");
  check(p_w.extent(1) % p == 0 && p_w.extent(2) % q == 0, "pseudo_labels: resolution mismatch");
  return nearest_downsample(argmax_axis(p_w, 0), p_w.extent(1) / p);
}

/// Gathers W_k / S_k for one image. Weak features are detached by taking
/// values only; strong rows keep their (image,pos) refs so fused losses can
/// route gradients back into F_s.
template <typename S>
ClassFeatureSets<S> class_feature_sets(const Tensor<S>& f_w, const Tensor<S>& f_s,
                                       const Tensor<S>& p_w, int num_classes,
                                       std::int32_t image_index = 0) {
  check(f_w.same_shape(f_s) && f_w.rank() == 3, "class_feature_sets: feature shape mismatch");
  const std::int64_t c = f_w.extent(0), p = f_w.extent(1), q = f_w.extent(2);
  const Tensor<std::int32_t> lbl = pseudo_labels(p_w, p, q);

  ClassFeatureSets<S> sets(num_classes, c);
  const std::int64_t pq = p * q;
  std::vector<std::vector<std::int32_t>> pos_per_class(num_classes);
  for (std::int64_t i = 0; i < pq; ++i) {
    check(lbl[i] >= 0 && lbl[i] < num_classes, "class_feature_sets: pseudo-label out of range");
    pos_per_class[lbl[i]].push_back(static_cast<std::int32_t>(i));
  }
  for (int k = 0; k < num_classes; ++k) {
    const auto& ps = pos_per_class[k];
    if (ps.empty()) continue;
    const std::int64_t n = static_cast<std::int64_t>(ps.size());
    Tensor<S> wk({n, c}), sk({n, c});
    for (std::int64_t r = 0; r < n; ++r) {
      for (std::int64_t ch = 0; ch < c; ++ch) {
        wk[r * c + ch] = f_w[ch * pq + ps[r]];
        sk[r * c + ch] = f_s[ch * pq + ps[r]];
      }
      sets.refs[k].push_back(FeatureRef{image_index, ps[r]});
    }
    sets.weak[k] = std::move(wk);
    sets.strong[k] = std::move(sk);
  }
  return sets;
}

/// Concatenates per-image sets into batch-level sets.
template <typename S>
ClassFeatureSets<S> merge_class_sets(const std::vector<ClassFeatureSets<S>>& per_image) {
  check(!per_image.empty(), "merge_class_sets: empty batch");
  const int z = per_image[0].num_classes();
  const std::int64_t c = per_image[0].channels;
  ClassFeatureSets<S> out(z, c);
  for (int k = 0; k < z; ++k) {
    std::int64_t total = 0;
    for (const auto& s : per_image) total += s.count(k);
    if (total == 0) continue;
    Tensor<S> wk({total, c}), sk({total, c});
    std::int64_t row = 0;
    for (const auto& s : per_image) {
      for (std::int64_t r = 0; r < s.count(k); ++r, ++row) {
        std::copy(s.weak[k].data() + r * c, s.weak[k].data() + (r + 1) * c, wk.data() + row * c);
        std::copy(s.strong[k].data() + r * c, s.strong[k].data() + (r + 1) * c, sk.data() + row * c);
        out.refs[k].push_back(s.refs[k][r]);
      }
    }
    out.weak[k] = std::move(wk);
    out.strong[k] = std::move(sk);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Prototype bank

/// Per-class EMA feature prototypes. A class contributes to no loss until
/// its first batch mean initializes it.
template <typename S>
struct PrototypeBank {
  Tensor<S> prototypes;  // {Z,C}
  std::vector<std::uint8_t> initialized;
  S eta = S(0.99);

  PrototypeBank() = default;
  PrototypeBank(int num_classes, std::int64_t channels, S eta_in)
      : prototypes({num_classes, channels}),
        initialized(num_classes, 0),
        eta(eta_in) {}

  int num_classes() const { return static_cast<int>(initialized.size()); }
  std::int64_t channels() const { return prototypes.extent(1); }

  Tensor<S> prototype(int k) const {
    const std::int64_t c = channels();
    Tensor<S> out({c});
    std::copy(prototypes.data() + k * c, prototypes.data() + (k + 1) * c, out.data());
    return out;
  }
};

/// EMA update: rho' = eta*rho + (1-eta)*mean(W_k); the first batch mean of a
/// class initializes its prototype. Classes absent from the batch are
/// untouched. Call AFTER the iteration's losses are computed.
template <typename S>
void update_prototypes(PrototypeBank<S>& bank, const ClassFeatureSets<S>& sets) {
  check(bank.num_classes() == sets.num_classes(), "update_prototypes: class count mismatch");
  const std::int64_t c = bank.channels();
  for (int k = 0; k < bank.num_classes(); ++k) {
    const std::int64_t n = sets.count(k);
    if (n == 0) continue;
    std::vector<S> mu(c, S(0));
    for (std::int64_t r = 0; r < n; ++r)
      for (std::int64_t ch = 0; ch < c; ++ch) mu[ch] += sets.weak[k][r * c + ch];
    for (std::int64_t ch = 0; ch < c; ++ch) mu[ch] /= static_cast<S>(n);
    S* rho = bank.prototypes.data() + k * c;
    if (!bank.initialized[k]) {
      std::copy(mu.begin(), mu.end(), rho);
      bank.initialized[k] = 1;
    } else {
      for (std::int64_t ch = 0; ch < c; ++ch)
        rho[ch] = bank.eta * rho[ch] + (S(1) - bank.eta) * mu[ch];
    }
  }
}

// ---------------------------------------------------------------------------
// Intra-cluster / outlier selection

namespace detail {
template <typename S>
std::vector<std::pair<S, std::int64_t>> prototype_cosines(const Tensor<S>& rows,
                                                          const Tensor<S>& rho) {
  const std::int64_t n = rows.extent(0), c = rows.extent(1);
  check(rho.size() == c, "selection: prototype length mismatch");
  std::vector<std::pair<S, std::int64_t>> cs(n);
  for (std::int64_t r = 0; r < n; ++r) cs[r] = {cosine(rows.data() + r * c, rho.data(), c), r};
  return cs;
}
}  // namespace detail

/// Row indices of the min(n_keep, N) features with highest prototype cosine;
/// ties resolve to the lower row (= lower position) index.
template <typename S>
std::vector<std::int64_t> select_intra(const Tensor<S>& w_k, const Tensor<S>& rho,
                                       std::int64_t n_keep) {
  if (w_k.empty() || w_k.extent(0) == 0) return {};
  auto cs = detail::prototype_cosines(w_k, rho);
  std::sort(cs.begin(), cs.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  const std::int64_t m = std::min<std::int64_t>(n_keep, cs.size());
  std::vector<std::int64_t> idx(m);
  for (std::int64_t i = 0; i < m; ++i) idx[i] = cs[i].second;
  return idx;
}

/// Row indices of the min(n_keep, N) features with lowest prototype cosine.
template <typename S>
std::vector<std::int64_t> select_outliers(const Tensor<S>& s_k, const Tensor<S>& rho,
                                          std::int64_t n_keep) {
  if (s_k.empty() || s_k.extent(0) == 0) return {};
  auto cs = detail::prototype_cosines(s_k, rho);
  std::sort(cs.begin(), cs.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first < b.first : a.second < b.second;
  });
  const std::int64_t m = std::min<std::int64_t>(n_keep, cs.size());
  std::vector<std::int64_t> idx(m);
  for (std::int64_t i = 0; i < m; ++i) idx[i] = cs[i].second;
  return idx;
}

/// Selections feeding the outlier loss. Only classes with an initialized
/// prototype and both sets non-empty appear ("skip class" otherwise).
template <typename S>
struct CompactnessSelection {
  struct ClassSel {
    int cls;
    Tensor<S> m_in;                     // {m,C} intra-cluster weak features (constants)
    Tensor<S> m_dis;                    // {d,C} outlier strong feature values
    std::vector<FeatureRef> dis_refs;   // gradient routes for m_dis rows
  };
  std::vector<ClassSel> classes;
};

template <typename S>
CompactnessSelection<S> build_compactness_selection(const ClassFeatureSets<S>& sets,
                                                    const PrototypeBank<S>& bank,
                                                    std::int64_t n_r, std::int64_t n_d) {
  CompactnessSelection<S> sel;
  const std::int64_t c = sets.channels;
  for (int k = 0; k < sets.num_classes(); ++k) {
    if (!bank.initialized[k] || sets.count(k) == 0) continue;
    const Tensor<S> rho = bank.prototype(k);
    const auto in_idx = select_intra(sets.weak[k], rho, n_r);
    const auto dis_idx = select_outliers(sets.strong[k], rho, n_d);
    if (in_idx.empty() || dis_idx.empty()) continue;

    typename CompactnessSelection<S>::ClassSel cs;
    cs.cls = k;
    cs.m_in = Tensor<S>({static_cast<std::int64_t>(in_idx.size()), c});
    for (std::size_t i = 0; i < in_idx.size(); ++i)
      std::copy(sets.weak[k].data() + in_idx[i] * c, sets.weak[k].data() + (in_idx[i] + 1) * c,
                cs.m_in.data() + i * c);
    cs.m_dis = Tensor<S>({static_cast<std::int64_t>(dis_idx.size()), c});
    for (std::size_t i = 0; i < dis_idx.size(); ++i) {
      std::copy(sets.strong[k].data() + dis_idx[i] * c, sets.strong[k].data() + (dis_idx[i] + 1) * c,
                cs.m_dis.data() + i * c);
      cs.dis_refs.push_back(sets.refs[k][dis_idx[i]]);
    }
    sel.classes.push_back(std::move(cs));
  }
  return sel;
}

// ---------------------------------------------------------------------------
// Outlier (nearest-neighbour similarity) loss

namespace detail {
template <typename S>
struct OutlierForward {
  S value = S(0);
  std::vector<std::vector<std::int64_t>> nearest;  // per class, per outlier row
};

template <typename S>
OutlierForward<S> outlier_forward(const CompactnessSelection<S>& sel) {
  OutlierForward<S> f;
  if (sel.classes.empty()) return f;
  double total = 0;
  for (const auto& cs : sel.classes) {
    const std::int64_t c = cs.m_in.extent(1);
    const std::int64_t n_in = cs.m_in.extent(0), n_dis = cs.m_dis.extent(0);
    std::vector<std::int64_t> nearest(n_dis, 0);
    double cls_loss = 0;
    for (std::int64_t h = 0; h < n_dis; ++h) {
      S best = cosine(cs.m_dis.data() + h * c, cs.m_in.data(), c);
      std::int64_t best_r = 0;
      for (std::int64_t r = 1; r < n_in; ++r) {
        const S cv = cosine(cs.m_dis.data() + h * c, cs.m_in.data() + r * c, c);
        if (cv > best) {
          best = cv;
          best_r = r;
        }
      }
      nearest[h] = best_r;
      cls_loss += 1.0 - static_cast<double>(best);
    }
    total += cls_loss / static_cast<double>(n_dis);
    f.nearest.push_back(std::move(nearest));
  }
  f.value = static_cast<S>(total / static_cast<double>(sel.classes.size()));
  return f;
}
}  // namespace detail

/// Value form of the outlier loss: mean over eligible classes of the mean
/// over outliers h of 1 - cos(h, nearest intra-cluster feature).
template <typename S>
S outlier_loss_value(const CompactnessSelection<S>& sel) {
  return detail::outlier_forward(sel).value;
}

/// Tape form. `fs_vars[i]` is image i's strong feature map {C,p,q}; gradient
/// reaches only the selected outlier positions.
template <typename S>
Var<S> outlier_loss(Tape<S>& tape, const std::vector<Var<S>>& fs_vars,
                    const CompactnessSelection<S>& sel) {
  auto fwd = detail::outlier_forward(sel);
  if (sel.classes.empty()) return tape.constant(Tensor<S>::scalar(S(0)), "outlier_loss");

  std::vector<std::int32_t> ids;
  for (const auto& v : fs_vars) ids.push_back(v.id);
  CompactnessSelection<S> sel_copy = sel;
  auto nearest = std::move(fwd.nearest);
  return tape.push(
      Tensor<S>::scalar(fwd.value), ids, "outlier_loss",
      [sel = std::move(sel_copy), nearest = std::move(nearest),
       ids](Tape<S>& t, std::int32_t self) {
        const S g = t.grad_value(self).item();
        std::vector<Tensor<S>> grads(ids.size());
        for (std::size_t i = 0; i < ids.size(); ++i) grads[i] = Tensor<S>(t.value(ids[i]).shape());
        const S cls_norm = S(1) / static_cast<S>(sel.classes.size());
        for (std::size_t ci = 0; ci < sel.classes.size(); ++ci) {
          const auto& cs = sel.classes[ci];
          const std::int64_t c = cs.m_in.extent(1), n_dis = cs.m_dis.extent(0);
          const S row_norm = cls_norm / static_cast<S>(n_dis);
          for (std::int64_t hrow = 0; hrow < n_dis; ++hrow) {
            const S* h = cs.m_dis.data() + hrow * c;
            const S* r = cs.m_in.data() + nearest[ci][hrow] * c;
            double dot = 0, nh2 = 0, nr2 = 0;
            for (std::int64_t ch = 0; ch < c; ++ch) {
              dot += h[ch] * r[ch];
              nh2 += h[ch] * h[ch];
              nr2 += r[ch] * r[ch];
            }
            const double nh = std::sqrt(nh2), nr = std::sqrt(nr2);
            if (nh < 1e-12 || nr < 1e-12) continue;
            const double cosv = dot / (nh * nr);
            const auto& ref = cs.dis_refs[hrow];
            Tensor<S>& gt = grads[ref.image];
            const std::int64_t pq = gt.extent(1) * gt.extent(2);
            // d(1 - cos)/dh = cos*h/|h|^2 - r/(|h||r|)
            for (std::int64_t ch = 0; ch < c; ++ch)
              gt[ch * pq + ref.pos] +=
                  g * row_norm * static_cast<S>(cosv * h[ch] / nh2 - r[ch] / (nh * nr));
          }
        }
        for (std::size_t i = 0; i < ids.size(); ++i) t.add_grad(ids[i], grads[i]);
      });
}

}  // namespace mccl
