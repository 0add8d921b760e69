#pragma once

#include "mccl/rng.hpp"
#include "mccl/tape.hpp"

namespace mccl {

/// Per-image intervention bookkeeping: similarity-conditioned intervention
/// value, threshold boundaries, the sampled mask threshold and noise seed.
template <typename S>
struct InterventionState {
  S s_p2p = S(0);       // detached point-to-point similarity
  double lambda = 0.15;
  double v_u = 0;
  double b_l = 0, b_r = 0;
  double u = 0;                  // mask threshold draw ~ U(b_l, b_r)
  std::uint64_t noise_seed = 0;
};

/// v_u = lambda * (1 + S_p2p); monotone increasing in the similarity.
inline double intervention_value(double s_p2p, double lambda) {
  check(lambda > 0, "intervention_value: lambda must be > 0");
  check(s_p2p >= -1.0 - 1e-9 && s_p2p <= 1.0 + 1e-9,
        "intervention_value: S_p2p out of [-1,1]");
  return lambda * (1.0 + std::clamp(s_p2p, -1.0, 1.0));
}

/// (b_l, b_r) = (max(0, 9/10 - v), min(1, 11/10 - v)), clamped to [0,1].
/// Evaluated in tenths so the canonical lambda=0.15 grid lands on the exact
/// decimal doubles.
inline std::pair<double, double> boundaries(double v_u) {
  check(v_u >= 0, "boundaries: v_u must be >= 0");
  const double b_l = std::clamp(9.0 - 10.0 * v_u, 0.0, 10.0) / 10.0;
  const double b_r = std::clamp(11.0 - 10.0 * v_u, 0.0, 10.0) / 10.0;
  return {b_l, b_r};
}

template <typename S>
InterventionState<S> make_intervention_state(S s_p2p, double lambda) {
  InterventionState<S> st;
  st.s_p2p = s_p2p;
  st.lambda = lambda;
  st.v_u = intervention_value(static_cast<double>(s_p2p), lambda);
  std::tie(st.b_l, st.b_r) = boundaries(st.v_u);
  return st;
}

// ---------------------------------------------------------------------------
// Self-adaptive feature masking

template <typename S>
struct MaskDraw {
  Tensor<S> mask;  // {p,q}, entries in {0,1}; 1 = keep
  double u = 0;
};

/// G_t[i] = 1 if channel_mean(F_s)[i] < max(channel_mean(F_s)) * u with one
/// scalar u ~ U(b_l, b_r) per image; high-activation regions get zeroed.
/// Guard: a feature map whose channel-mean maximum is not positive keeps
/// everything (an all-zero map would otherwise be fully masked).
template <typename S>
MaskDraw<S> masking_matrix(const Tensor<S>& f_s, double b_l, double b_r, Rng& rng) {
  check(f_s.rank() == 3, "masking_matrix: expected {C,p,q}");
  check(b_l <= b_r, "masking_matrix: b_l > b_r");
  Tensor<S> m = channel_mean(f_s);
  const double u = rng.uniform(b_l, b_r);
  S mx = m[0];
  for (std::int64_t i = 1; i < m.size(); ++i) mx = std::max(mx, m[i]);

  MaskDraw<S> out{Tensor<S>(m.shape()), u};
  if (mx <= S(0)) {
    out.mask.array().setConstant(S(1));
    return out;
  }
  const S thr = mx * static_cast<S>(u);
  for (std::int64_t i = 0; i < m.size(); ++i) out.mask[i] = m[i] < thr ? S(1) : S(0);
  return out;
}

template <typename S>
Tensor<S> apply_mask_value(const Tensor<S>& f_s, const Tensor<S>& mask) {
  check(f_s.rank() == 3 && mask.rank() == 2 && f_s.extent(1) == mask.extent(0) &&
            f_s.extent(2) == mask.extent(1),
        "apply_mask: spatial shape mismatch");
  Tensor<S> out(f_s.shape());
  const std::int64_t c = f_s.extent(0), pq = mask.size();
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t i = 0; i < pq; ++i) out[ch * pq + i] = f_s[ch * pq + i] * mask[i];
  return out;
}

/// Hadamard product with the mask broadcast over channels; gradients flow
/// through kept positions only.
template <typename S>
Var<S> apply_mask(Var<S> f_s, const Tensor<S>& mask) {
  Tensor<S> v = apply_mask_value(f_s.value(), mask);
  const auto pf = f_s.id;
  Tensor<S> mask_copy = mask;
  return f_s.tape->push(std::move(v), {pf}, "apply_mask",
                        [pf, mask = std::move(mask_copy)](Tape<S>& t, std::int32_t self) {
                          const Tensor<S>& g = t.grad_value(self);
                          Tensor<S> gx(g.shape());
                          const std::int64_t c = g.extent(0), pq = mask.size();
                          for (std::int64_t ch = 0; ch < c; ++ch)
                            for (std::int64_t i = 0; i < pq; ++i)
                              gx[ch * pq + i] = g[ch * pq + i] * mask[i];
                          t.add_grad(pf, gx);
                        });
}

// ---------------------------------------------------------------------------
// Self-adaptive noise injection

/// i.i.d. uniform noise in [-v_u, v_u], deterministic per seed.
template <typename S>
Tensor<S> sample_noise(double v_u, const Shape& shape, std::uint64_t seed) {
  check(v_u >= 0, "sample_noise: v_u must be >= 0");
  Rng rng(seed);
  Tensor<S> n(shape);
  for (std::int64_t i = 0; i < n.size(); ++i) n[i] = static_cast<S>(rng.uniform(-v_u, v_u));
  return n;
}

template <typename S>
Tensor<S> inject_noise_value(const Tensor<S>& f_s, const Tensor<S>& noise) {
  check(f_s.same_shape(noise), "inject_noise: shape mismatch");
  Tensor<S> out(f_s.shape());
  out.array() = f_s.array() * noise.array() + f_s.array();
  return out;
}

/// F_ne = F_s (.) N + F_s; the noise tensor is a constant for gradients, so
/// zero features stay exactly zero and grad scales by (1 + N).
template <typename S>
Var<S> inject_noise(Var<S> f_s, const Tensor<S>& noise) {
  Tensor<S> v = inject_noise_value(f_s.value(), noise);
  const auto pf = f_s.id;
  Tensor<S> n_copy = noise;
  return f_s.tape->push(std::move(v), {pf}, "inject_noise",
                        [pf, n = std::move(n_copy)](Tape<S>& t, std::int32_t self) {
                          Tensor<S> gx(n.shape());
                          gx.array() = t.grad_value(self).array() * (n.array() + S(1));
                          t.add_grad(pf, gx);
                        });
}

// ---------------------------------------------------------------------------
// Prediction-consistency losses (MSE distance on probability maps)

/// Mean over batch, pixels and classes of (p_m - p_w)^2; p_w detached.
template <typename S>
S masking_loss(const Tensor<S>& p_m, const Tensor<S>& p_w) {
  return mean_squared_diff(p_m, p_w);
}

template <typename S>
S noise_loss(const Tensor<S>& p_n, const Tensor<S>& p_w) {
  return mean_squared_diff(p_n, p_w);
}

/// Tape form shared by both intervention losses.
template <typename S>
Var<S> intervention_loss(Var<S> p_perturbed, const Tensor<S>& p_w) {
  return mse_against(p_perturbed, p_w);
}

}  // namespace mccl
