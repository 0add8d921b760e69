#pragma once

#include <filesystem>
#include <limits>

#include "mccl/checkpoint.hpp"
#include "mccl/config.hpp"
#include "mccl/data.hpp"
#include "mccl/fka.hpp"
#include "mccl/metrics.hpp"
#include "mccl/sai.hpp"
#include "mccl/segnet.hpp"

namespace mccl {

struct LossWeights {
  double alpha = 0.1;
  double omega = 0.01;
  double beta = 0.01;
  double ip_weight = 1.0;
  double tau = 0.95;

  static LossWeights from(const ExperimentConfig& c) {
    return {c.alpha, c.omega, c.beta, c.ip_weight, c.tau};
  }
};

// ---------------------------------------------------------------------------
// Loss terms

/// Mean over batch and pixels of -log softmax(logits)[label].
template <typename S>
Var<S> supervised_loss(Var<S> logits, const Tensor<std::int32_t>& labels) {
  return cross_entropy_loss(logits, labels);
}

template <typename S>
S supervised_loss_value(const Tensor<S>& logits, const Tensor<std::int32_t>& labels) {
  Tape<S> t;
  return supervised_loss(t.constant(logits, "logits"), labels).value().item();
}

namespace detail {
struct IpSelection {
  std::vector<std::int64_t> pixels;  // confident pixel index within {B,*,H,W}
  std::vector<std::int32_t> target;  // argmax(p_w) at those pixels
};

template <typename S>
IpSelection ip_select(const Tensor<S>& p_w, double tau) {
  const std::int64_t bs = p_w.extent(0), z = p_w.extent(1), inner = p_w.extent(2) * p_w.extent(3);
  IpSelection sel;
  for (std::int64_t i = 0; i < bs; ++i) {
    for (std::int64_t pos = 0; pos < inner; ++pos) {
      const std::int64_t base = i * z * inner + pos;
      S best = p_w[base];
      std::int32_t arg = 0;
      for (std::int64_t k = 1; k < z; ++k) {
        const S v = p_w[base + k * inner];
        if (v > best) {
          best = v;
          arg = static_cast<std::int32_t>(k);
        }
      }
      if (static_cast<double>(best) >= tau) {
        sel.pixels.push_back(i * inner + pos);
        sel.target.push_back(arg);
      }
    }
  }
  return sel;
}
}  // namespace detail

/// Hard pseudo-label cross-entropy of p_s against argmax(p_w), restricted to
/// pixels where max(p_w) >= tau and averaged over those pixels; 0 when no
/// pixel is confident. p_w is detached; both inputs are probability maps
/// {B,Z,H,W}.
template <typename S>
Var<S> ip_loss(Var<S> p_s, const Tensor<S>& p_w, double tau) {
  check(p_s.value().same_shape(p_w) && p_w.rank() == 4, "ip_loss: shape mismatch");
  const auto sel = detail::ip_select(p_w, tau);
  Tape<S>& tape = *p_s.tape;
  if (sel.pixels.empty()) return tape.constant(Tensor<S>::scalar(S(0)), "ip_loss");

  const Tensor<S>& ps = p_s.value();
  const std::int64_t z = ps.extent(1), inner = ps.extent(2) * ps.extent(3);
  const S tiny = std::numeric_limits<S>::min();
  double total = 0;
  for (std::size_t i = 0; i < sel.pixels.size(); ++i) {
    const std::int64_t b = sel.pixels[i] / inner, pos = sel.pixels[i] % inner;
    total -=
        std::log(static_cast<double>(std::max(ps[(b * z + sel.target[i]) * inner + pos], tiny)));
  }
  const double n_conf = static_cast<double>(sel.pixels.size());
  const auto pp = p_s.id;
  return tape.push(Tensor<S>::scalar(static_cast<S>(total / n_conf)), {pp}, "ip_loss",
                   [pp, sel, n_conf, z, inner, tiny](Tape<S>& t, std::int32_t self) {
                     const S g = t.grad_value(self).item() / static_cast<S>(n_conf);
                     const Tensor<S>& ps = t.value(pp);
                     Tensor<S> gx(ps.shape());
                     for (std::size_t i = 0; i < sel.pixels.size(); ++i) {
                       const std::int64_t b = sel.pixels[i] / inner, pos = sel.pixels[i] % inner;
                       const std::int64_t at = (b * z + sel.target[i]) * inner + pos;
                       if (ps[at] >= tiny) gx[at] -= g / ps[at];
                     }
                     t.add_grad(pp, gx);
                   });
}

template <typename S>
S ip_loss_value(const Tensor<S>& p_s, const Tensor<S>& p_w, double tau) {
  Tape<S> t;
  return ip_loss(t.constant(p_s, "p_s"), p_w, tau).value().item();
}

/// Composite unlabeled objective: alpha*L_p2p + omega*L_dt + beta*(L_m+L_n)
/// with the feature-alignment terms zeroed when if_on is false and the
/// perturbation terms zeroed when fp_on is false, plus ip_weight*L_ip when
/// ip_on.
inline double unsup_loss(double l_p2p, double l_dt, double l_m, double l_n, double l_ip,
                         const LossWeights& w, const Toggles& t) {
  check(std::isfinite(l_p2p) && std::isfinite(l_dt) && std::isfinite(l_m) && std::isfinite(l_n) &&
            std::isfinite(l_ip),
        "unsup_loss: component losses must be finite");
  double total = 0;
  if (t.if_on) total += w.alpha * l_p2p + w.omega * l_dt;
  if (t.fp_on) total += w.beta * (l_m + l_n);
  if (t.ip_on) total += w.ip_weight * l_ip;
  return total;
}

// ---------------------------------------------------------------------------
// Optimizer

/// SGD with momentum: v' = momentum*v + g; p' = p - lr*v'.
template <typename S>
void sgd_update(Tensor<S>& param, const Tensor<S>& grad, Tensor<S>& velocity, double lr,
                double momentum) {
  check(lr > 0, "sgd_update: lr must be > 0");
  check(momentum >= 0 && momentum < 1, "sgd_update: momentum must be in [0,1)");
  check(param.same_shape(grad) && param.same_shape(velocity), "sgd_update: shape mismatch");
  velocity.array() = static_cast<S>(momentum) * velocity.array() + grad.array();
  param.array() -= static_cast<S>(lr) * velocity.array();
}

// ---------------------------------------------------------------------------
// Loss graph assembly

namespace detail {
template <typename S>
Var<S> mean_of(Tape<S>& tape, const std::vector<Var<S>>& parts) {
  if (parts.empty()) return tape.constant(Tensor<S>::scalar(S(0)), "zero");
  Var<S> acc = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) acc = add(acc, parts[i]);
  return scale(acc, 1.0 / static_cast<double>(parts.size()));
}
}  // namespace detail

template <typename S>
struct LossGraph {
  Var<S> l_s, l_ip, l_p2p, l_dt, l_m, l_n, total;
  std::vector<double> sim_values;   // per unlabeled image, detached S_p2p
  ClassFeatureSets<S> merged;       // batch-level sets (if_on only)
  bool has_sets = false;
};

/// Assembles the full objective on `tape`. The weak branch (teacher) runs
/// value-only from `weak_params`; gradients flow exclusively through `vars`.
/// Ordering per iteration: augment, encode both views, decode p_w/p_s,
/// alignment losses against the pre-update prototype bank, per-image
/// interventions, then the supervised term. Toggled-off branches are skipped
/// entirely rather than weighted to zero.
template <typename S>
LossGraph<S> build_loss_graph(Tape<S>& tape, const SegNetVars<S>& vars,
                              const SegNetParams<S>& weak_params, const PrototypeBank<S>& bank,
                              const std::vector<const Sample*>& labeled,
                              const std::vector<const Sample*>& unlabeled,
                              const ExperimentConfig& cfg, std::uint64_t run_seed,
                              std::int64_t epoch, std::int64_t step) {
  check(!labeled.empty(), "build_loss_graph: labeled batch must be non-empty");
  const Toggles& tg = cfg.toggles;
  const LossWeights w = LossWeights::from(cfg);
  const bool use_unlabeled = (tg.ip_on || tg.if_on || tg.fp_on) && !unlabeled.empty();
  const std::int64_t z = weak_params.num_classes(), c = weak_params.feature_channels();

  LossGraph<S> g;
  std::vector<Var<S>> sim_vars, fs_vars, lm_parts, ln_parts;
  std::vector<std::pair<Var<S>, std::int64_t>> ip_parts;
  std::vector<ClassFeatureSets<S>> sets_per_image;

  if (use_unlabeled) {
    for (std::size_t j = 0; j < unlabeled.size(); ++j) {
      const Sample& s = *unlabeled[j];
      const std::int64_t h = s.image.extent(0), wd = s.image.extent(1);
      const ViewPair vp =
          make_view_pair(s.image, mix64(run_seed, stream::kGeoUnlabeled, epoch, step, j),
                         mix64(run_seed, stream::kPhoto, epoch, step, j));

      // weak branch carries no gradient
      const Tensor<S> f_w4 =
          encode(chw_from_hwc<S>(vp.weak).reshaped({1, 3, h, wd}), weak_params.enc);
      const Tensor<S> p_w4 = decode(f_w4, weak_params.dec);
      const std::int64_t p = f_w4.extent(2), q = f_w4.extent(3);
      const Tensor<S> f_w3 = f_w4.reshaped({c, p, q});

      Var<S> x_s = tape.constant(chw_from_hwc<S>(vp.strong).reshaped({1, 3, h, wd}), "u_s");
      Var<S> f_s4 = encode(x_s, vars);
      Var<S> f_s3 = reshape(f_s4, {c, p, q});

      g.sim_values.push_back(static_cast<double>(p2p_similarity_value(f_s3.value(), f_w3)));

      if (tg.if_on) {
        sim_vars.push_back(p2p_similarity(f_s3, f_w3));
        fs_vars.push_back(f_s3);
        sets_per_image.push_back(class_feature_sets(f_w3, f_s3.value(), p_w4.reshaped({z, h, wd}),
                                                    static_cast<int>(z),
                                                    static_cast<std::int32_t>(j)));
      }
      if (tg.ip_on) {
        const auto sel = detail::ip_select(p_w4, w.tau);
        if (!sel.pixels.empty())
          ip_parts.emplace_back(ip_loss(decode(f_s4, vars), p_w4, w.tau),
                                static_cast<std::int64_t>(sel.pixels.size()));
      }
      if (tg.fp_on) {
        auto ist = make_intervention_state<S>(static_cast<S>(g.sim_values.back()), cfg.lambda);
        Rng mask_rng(mix64(run_seed, stream::kMask, epoch, step, j));
        const MaskDraw<S> draw = masking_matrix(f_s3.value(), ist.b_l, ist.b_r, mask_rng);
        ist.u = draw.u;
        Var<S> p_m = decode(reshape(apply_mask(f_s3, draw.mask), {1, c, p, q}), vars);
        lm_parts.push_back(intervention_loss(p_m, p_w4));

        ist.noise_seed = mix64(run_seed, stream::kNoise, epoch, step, j);
        const Tensor<S> noise = sample_noise<S>(ist.v_u, f_s3.shape(), ist.noise_seed);
        Var<S> p_n = decode(reshape(inject_noise(f_s3, noise), {1, c, p, q}), vars);
        ln_parts.push_back(intervention_loss(p_n, p_w4));
      }
    }
  }

  // batch-level alignment losses, computed against the pre-update bank
  g.l_p2p = tape.constant(Tensor<S>::scalar(S(0)), "zero");
  g.l_dt = g.l_p2p;
  if (tg.if_on && !sim_vars.empty()) {
    g.l_p2p = p2p_loss(sim_vars);
    g.merged = merge_class_sets(sets_per_image);
    g.has_sets = true;
    g.l_dt = outlier_loss(tape, fs_vars, build_compactness_selection(g.merged, bank, cfg.n_r, cfg.n_d));
  }
  g.l_m = detail::mean_of(tape, lm_parts);
  g.l_n = detail::mean_of(tape, ln_parts);

  g.l_ip = tape.constant(Tensor<S>::scalar(S(0)), "zero");
  if (tg.ip_on && !ip_parts.empty()) {
    std::int64_t total_conf = 0;
    for (const auto& part : ip_parts) total_conf += part.second;
    g.l_ip = scale(ip_parts[0].first,
                   static_cast<double>(ip_parts[0].second) / static_cast<double>(total_conf));
    for (std::size_t i = 1; i < ip_parts.size(); ++i)
      g.l_ip = add(g.l_ip, scale(ip_parts[i].first, static_cast<double>(ip_parts[i].second) /
                                                        static_cast<double>(total_conf)));
  }

  // supervised branch (weak augmentation on labeled images)
  const std::int64_t h = labeled[0]->image.extent(0), wd = labeled[0]->image.extent(1);
  Tensor<S> x_l({static_cast<std::int64_t>(labeled.size()), 3, h, wd});
  Tensor<std::int32_t> y_l({static_cast<std::int64_t>(labeled.size()), h, wd});
  for (std::size_t i = 0; i < labeled.size(); ++i) {
    Rng geo_rng(mix64(run_seed, stream::kGeoLabeled, epoch, step, i));
    const GeoTransform geo = sample_geo(geo_rng);
    const Tensor<S> img = chw_from_hwc<S>(weak_view(labeled[i]->image, geo));
    std::copy(img.data(), img.data() + img.size(), x_l.data() + i * img.size());
    const Tensor<std::int32_t> lbl = flip_labels(labeled[i]->labels, geo);
    std::copy(lbl.data(), lbl.data() + lbl.size(), y_l.data() + i * lbl.size());
  }
  g.l_s = supervised_loss(decode_logits(encode(tape.constant(x_l, "x_l"), vars), vars), y_l);

  g.total = g.l_s;
  if (tg.if_on) g.total = add(g.total, add(scale(g.l_p2p, w.alpha), scale(g.l_dt, w.omega)));
  if (tg.fp_on) g.total = add(g.total, scale(add(g.l_m, g.l_n), w.beta));
  if (tg.ip_on) g.total = add(g.total, scale(g.l_ip, w.ip_weight));
  return g;
}

// ---------------------------------------------------------------------------
// Training step

template <typename S>
struct TrainState {
  SegNetParams<S> params;
  PrototypeBank<S> bank;
  std::vector<Tensor<S>> velocity;

  void init_velocity() {
    velocity.clear();
    for (auto* t : param_list(params)) velocity.emplace_back(t->shape());
  }
};

struct StepMetrics {
  double l_s = 0, l_ip = 0, l_p2p = 0, l_dt = 0, l_m = 0, l_n = 0, l_total = 0;
  double mean_s_p2p = std::numeric_limits<double>::quiet_NaN();
};

/// One iteration: full objective, one SGD-with-momentum update, THEN the
/// prototype EMA update. Aborts with a diagnostic naming the first
/// non-finite loss component.
template <typename S>
StepMetrics train_step(const std::vector<const Sample*>& labeled,
                       const std::vector<const Sample*>& unlabeled, TrainState<S>& st,
                       const ExperimentConfig& cfg, std::uint64_t run_seed, std::int64_t epoch,
                       std::int64_t step) {
  Tape<S> tape;
  SegNetVars<S> vars = register_params(tape, st.params);
  LossGraph<S> g = build_loss_graph(tape, vars, st.params, st.bank, labeled, unlabeled, cfg,
                                    run_seed, epoch, step);

  StepMetrics m;
  m.l_s = static_cast<double>(g.l_s.value().item());
  m.l_ip = static_cast<double>(g.l_ip.value().item());
  m.l_p2p = static_cast<double>(g.l_p2p.value().item());
  m.l_dt = static_cast<double>(g.l_dt.value().item());
  m.l_m = static_cast<double>(g.l_m.value().item());
  m.l_n = static_cast<double>(g.l_n.value().item());
  m.l_total = static_cast<double>(g.total.value().item());
  if (!g.sim_values.empty()) {
    double acc = 0;
    for (double v : g.sim_values) acc += v;
    m.mean_s_p2p = acc / static_cast<double>(g.sim_values.size());
  }
  const std::pair<const char*, double> components[] = {
      {"L_s", m.l_s}, {"L_ip", m.l_ip}, {"L_p2p", m.l_p2p}, {"L_dt", m.l_dt},
      {"L_m", m.l_m}, {"L_n", m.l_n},   {"L_total", m.l_total}};
  for (const auto& [name, v] : components)
    if (!std::isfinite(v)) throw NonFiniteError(std::string("train_step: non-finite ") + name);

  tape.backward(g.total);
  const auto plist = param_list(st.params);
  const auto vlist = var_list(vars);
  for (std::size_t i = 0; i < plist.size(); ++i)
    sgd_update(*plist[i], tape.grad(vlist[i]), st.velocity[i], cfg.lr, cfg.momentum);

  if (g.has_sets) update_prototypes(st.bank, g.merged);
  return m;
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochMetrics {
  int epoch = 0;
  double l_s = 0, l_ip = 0, l_p2p = 0, l_dt = 0, l_m = 0, l_n = 0, l_total = 0;
  double mean_s_p2p = std::numeric_limits<double>::quiet_NaN();
  double val_miou = 0;
};

inline std::string fmt_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline constexpr const char* kMetricsCsvHeader =
    "epoch,L_s,L_ip,L_p2p,L_dt,L_m,L_n,L_total,mean_S_p2p,val_mIoU";

inline std::string metrics_csv(const std::vector<EpochMetrics>& rows) {
  std::string out = kMetricsCsvHeader;
  out += "\n";
  for (const auto& r : rows) {
    out += std::to_string(r.epoch);
    for (double v :
         {r.l_s, r.l_ip, r.l_p2p, r.l_dt, r.l_m, r.l_n, r.l_total, r.mean_s_p2p, r.val_miou}) {
      out += ",";
      out += fmt_g17(v);
    }
    out += "\n";
  }
  return out;
}

template <typename S>
struct TrainResult {
  SegNetParams<S> params;
  PrototypeBank<S> bank;
  std::vector<EpochMetrics> epochs;
  double final_val_miou = 0;
  std::string metrics_csv_text;
};

/// Full deterministic run. An epoch is one pass over the labeled subset;
/// unlabeled batches cycle through their own per-epoch shuffle. Checkpoints
/// land in out_dir (when given) every ckpt_every epochs plus a final one.
template <typename S>
TrainResult<S> train_model(const ExperimentConfig& cfg, const Dataset& data,
                           const SplitManifest& split, std::uint64_t run_seed,
                           const std::string& out_dir = "") {
  cfg.validate();
  check(!split.labeled.empty(), "train_model: split has no labeled samples");
  ArchConfig arch;
  arch.feature_channels = cfg.feature_channels;
  arch.num_classes = cfg.num_classes;

  TrainState<S> st;
  st.params = init_params<S>(run_seed, 1.0, arch);
  st.bank = PrototypeBank<S>(cfg.num_classes, cfg.feature_channels, static_cast<S>(cfg.eta));
  st.init_velocity();

  const std::int64_t n_l = static_cast<std::int64_t>(split.labeled.size());
  const std::int64_t n_u = static_cast<std::int64_t>(split.unlabeled.size());
  const std::int64_t steps_per_epoch = (n_l + cfg.batch - 1) / cfg.batch;

  const auto shuffled = [](std::vector<int> ids, Rng& rng) {
    for (std::int64_t i = static_cast<std::int64_t>(ids.size()) - 1; i > 0; --i)
      std::swap(ids[i], ids[rng.uniform_int(0, i)]);
    return ids;
  };

  TrainResult<S> res;
  const std::uint64_t cfg_hash = config_hash(cfg);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng order_rng(mix64(run_seed, stream::kOrder, epoch));
    const std::vector<int> lab = shuffled(split.labeled, order_rng);
    const std::vector<int> unl = shuffled(split.unlabeled, order_rng);

    EpochMetrics row;
    row.epoch = epoch;
    double s_sum = 0;
    std::int64_t s_count = 0;
    for (std::int64_t step = 0; step < steps_per_epoch; ++step) {
      std::vector<const Sample*> lb, ub;
      for (std::int64_t i = 0; i < cfg.batch; ++i)
        lb.push_back(&data.train[lab[(step * cfg.batch + i) % n_l]]);
      if (n_u > 0)
        for (std::int64_t i = 0; i < cfg.batch; ++i)
          ub.push_back(&data.train[unl[(step * cfg.batch + i) % n_u]]);

      const StepMetrics sm = train_step(lb, ub, st, cfg, run_seed, epoch, step);
      row.l_s += sm.l_s;
      row.l_ip += sm.l_ip;
      row.l_p2p += sm.l_p2p;
      row.l_dt += sm.l_dt;
      row.l_m += sm.l_m;
      row.l_n += sm.l_n;
      row.l_total += sm.l_total;
      if (std::isfinite(sm.mean_s_p2p)) {
        s_sum += sm.mean_s_p2p;
        ++s_count;
      }
    }
    const double inv = 1.0 / static_cast<double>(steps_per_epoch);
    row.l_s *= inv;
    row.l_ip *= inv;
    row.l_p2p *= inv;
    row.l_dt *= inv;
    row.l_m *= inv;
    row.l_n *= inv;
    row.l_total *= inv;
    if (s_count > 0) row.mean_s_p2p = s_sum / static_cast<double>(s_count);
    row.val_miou = evaluate_miou(st.params, data.val, cfg.num_classes);
    res.epochs.push_back(row);

    if (!out_dir.empty() && (epoch + 1) % cfg.ckpt_every == 0) {
      char name[48];
      std::snprintf(name, sizeof(name), "ckpt_epoch_%04d.mckp", epoch + 1);
      save_checkpoint((std::filesystem::path(out_dir) / name).string(),
                      Checkpoint<S>{cfg_hash, static_cast<std::uint32_t>(epoch + 1), run_seed,
                                    st.params, st.bank});
    }
  }

  res.params = std::move(st.params);
  res.bank = std::move(st.bank);
  res.final_val_miou = res.epochs.empty() ? evaluate_miou(res.params, data.val, cfg.num_classes)
                                          : res.epochs.back().val_miou;
  res.metrics_csv_text = metrics_csv(res.epochs);
  if (!out_dir.empty())
    save_checkpoint((std::filesystem::path(out_dir) / "ckpt_final.mckp").string(),
                    Checkpoint<S>{cfg_hash, static_cast<std::uint32_t>(cfg.epochs), run_seed,
                                  res.params, res.bank});
  return res;
}

}  // namespace mccl
