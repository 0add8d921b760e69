#pragma once

#include <atomic>
#include <chrono>
#include <thread>

#include "mccl/trainer.hpp"

namespace mccl {

// ---------------------------------------------------------------------------
// Similarity / consistency analysis

struct SimilarityHistogram {
  std::vector<double> bin_lo, bin_hi;      // normalized similarity edges in [0,1]
  std::vector<double> pixel_ratio;         // sums to 1
  std::vector<double> agreement_ratio;     // strong/weak argmax agreement, in [0,1]
  double mean_s_p2p = 0;                   // raw mean per-image similarity

  std::string csv() const {
    std::string out = "bin_lo,bin_hi,pixel_ratio,agreement_ratio\n";
    for (std::size_t i = 0; i < bin_lo.size(); ++i)
      out += fmt_g17(bin_lo[i]) + "," + fmt_g17(bin_hi[i]) + "," + fmt_g17(pixel_ratio[i]) + "," +
             fmt_g17(agreement_ratio[i]) + "\n";
    return out;
  }
};

/// Per feature position: cosine between strong- and weak-view features,
/// min-max normalized over the whole evaluated set, binned; each bin reports
/// its pixel fraction and the fraction whose strong/weak predictions agree.
/// A degenerate set (all similarities equal) lands in the top bin.
template <typename S>
SimilarityHistogram similarity_histogram(const SegNetParams<S>& params,
                                         const std::vector<Sample>& samples, int bins,
                                         std::uint64_t seed = 0) {
  check(!samples.empty(), "similarity_histogram: empty sample set");
  check(bins >= 1, "similarity_histogram: bins must be >= 1");

  std::vector<double> cos_values;
  std::vector<std::uint8_t> agree;
  double sim_sum = 0;
  const std::int64_t c = params.feature_channels();
  const int z = static_cast<int>(params.num_classes());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Sample& s = samples[i];
    const std::int64_t h = s.image.extent(0), wd = s.image.extent(1);
    const ViewPair vp = make_view_pair(s.image, mix64(seed, stream::kGeoUnlabeled, i),
                                       mix64(seed, stream::kPhoto, i));
    const Tensor<S> f_w = encode(chw_from_hwc<S>(vp.weak).reshaped({1, 3, h, wd}), params.enc);
    const Tensor<S> f_s = encode(chw_from_hwc<S>(vp.strong).reshaped({1, 3, h, wd}), params.enc);
    const std::int64_t p = f_w.extent(2), q = f_w.extent(3), pq = p * q;
    const Tensor<S> p_w = decode(f_w, params.dec).reshaped({z, h, wd});
    const Tensor<S> p_s = decode(f_s, params.dec).reshaped({z, h, wd});
    const Tensor<std::int32_t> y_w = pseudo_labels(p_w, p, q);
    const Tensor<std::int32_t> y_s = pseudo_labels(p_s, p, q);

    sim_sum += static_cast<double>(
        p2p_similarity_value(f_s.reshaped({c, p, q}), f_w.reshaped({c, p, q})));
    for (std::int64_t pos = 0; pos < pq; ++pos) {
      double dot = 0, na = 0, nb = 0;
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const double a = f_s[ch * pq + pos], b = f_w[ch * pq + pos];
        dot += a * b;
        na += a * a;
        nb += b * b;
      }
      na = std::sqrt(na);
      nb = std::sqrt(nb);
      cos_values.push_back(na < 1e-12 || nb < 1e-12 ? 0.0 : dot / (na * nb));
      agree.push_back(y_w[pos] == y_s[pos] ? 1 : 0);
    }
  }

  double lo = cos_values[0], hi = cos_values[0];
  for (double v : cos_values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double span = hi - lo;

  SimilarityHistogram out;
  out.mean_s_p2p = sim_sum / static_cast<double>(samples.size());
  out.bin_lo.resize(bins);
  out.bin_hi.resize(bins);
  out.pixel_ratio.assign(bins, 0.0);
  out.agreement_ratio.assign(bins, 0.0);
  for (int b = 0; b < bins; ++b) {
    out.bin_lo[b] = static_cast<double>(b) / bins;
    out.bin_hi[b] = static_cast<double>(b + 1) / bins;
  }
  std::vector<std::int64_t> count(bins, 0), agree_count(bins, 0);
  for (std::size_t i = 0; i < cos_values.size(); ++i) {
    const double norm = span > 0 ? (cos_values[i] - lo) / span : 1.0;
    const int b = std::min(bins - 1, static_cast<int>(norm * bins));
    ++count[b];
    agree_count[b] += agree[i];
  }
  const double total = static_cast<double>(cos_values.size());
  for (int b = 0; b < bins; ++b) {
    out.pixel_ratio[b] = static_cast<double>(count[b]) / total;
    if (count[b] > 0)
      out.agreement_ratio[b] = static_cast<double>(agree_count[b]) / static_cast<double>(count[b]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ablation runner

struct AblationArm {
  std::string name;  // display name
  std::string key;   // filesystem-safe identifier
  Toggles toggles;
};

inline std::vector<AblationArm> ablation_arms() {
  return {{"baseline", "baseline", {false, false, false}},
          {"+IP", "ip", {true, false, false}},
          {"+IP+IF", "ip_if", {true, true, false}},
          {"+IP+FP", "ip_fp", {true, false, true}},
          {"full", "full", {true, true, true}}};
}

template <typename S>
struct AblationRun {
  std::uint64_t seed = 0;
  bool failed = false;
  std::string error;
  TrainResult<S> result;
};

template <typename S>
struct ArmResult {
  AblationArm arm;
  std::vector<AblationRun<S>> runs;
  double mean_miou = 0;
  double stddev_miou = 0;
  int n_ok = 0;
};

template <typename S>
struct AblationReport {
  std::vector<ArmResult<S>> arms;

  std::string csv() const {
    std::string out = "arm,ip,if,fp,seed,val_miou,status\n";
    for (const auto& a : arms) {
      const std::string prefix = a.arm.name + "," + (a.arm.toggles.ip_on ? "1" : "0") + "," +
                                 (a.arm.toggles.if_on ? "1" : "0") + "," +
                                 (a.arm.toggles.fp_on ? "1" : "0") + ",";
      for (const auto& r : a.runs)
        out += prefix + std::to_string(r.seed) + "," +
               (r.failed ? "nan" : fmt_g17(r.result.final_val_miou)) + "," +
               (r.failed ? "failed" : "ok") + "\n";
      out += prefix + "mean," + fmt_g17(a.mean_miou) + ",aggregate\n";
      out += prefix + "stddev," + fmt_g17(a.stddev_miou) + ",aggregate\n";
    }
    return out;
  }

  std::string table() const {
    std::string out;
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%-10s %-3s %-3s %-3s %12s %12s %6s\n", "arm", "ip", "if",
                  "fp", "mean mIoU", "stddev", "ok");
    out += buf;
    for (const auto& a : arms) {
      std::snprintf(buf, sizeof(buf), "%-10s %-3s %-3s %-3s %12.4f %12.4f %3d/%zu\n",
                    a.arm.name.c_str(), a.arm.toggles.ip_on ? "x" : "-",
                    a.arm.toggles.if_on ? "x" : "-", a.arm.toggles.fp_on ? "x" : "-", a.mean_miou,
                    a.stddev_miou, a.n_ok, a.runs.size());
      out += buf;
    }
    return out;
  }
};

/// Trains every arm x seed combination on one shared dataset and split; only
/// the toggles differ between arms. Runs are independent, so they execute on
/// a small thread pool. A run that throws is marked failed; the rest proceed.
template <typename S>
AblationReport<S> run_ablation(const ExperimentConfig& base,
                               const std::vector<std::uint64_t>& seeds,
                               const std::string& out_dir = "", int jobs = 0) {
  check(!seeds.empty(), "run_ablation: need at least one seed");
  base.validate();
  const Dataset data = generate_dataset(dataset_spec_from(base));
  const SplitManifest split = make_split(base.data.n_train, base.data.n_labeled, base.data.seed);

  const auto arms = ablation_arms();
  AblationReport<S> report;
  report.arms.resize(arms.size());
  for (std::size_t a = 0; a < arms.size(); ++a) {
    report.arms[a].arm = arms[a];
    report.arms[a].runs.resize(seeds.size());
  }

  struct Job {
    std::size_t arm;
    std::size_t run;
  };
  std::vector<Job> jobs_list;
  for (std::size_t a = 0; a < arms.size(); ++a)
    for (std::size_t r = 0; r < seeds.size(); ++r) jobs_list.push_back({a, r});

  if (jobs <= 0)
    jobs = static_cast<int>(std::max(1u, std::min(4u, std::thread::hardware_concurrency())));
  jobs = std::min<int>(jobs, static_cast<int>(jobs_list.size()));

  std::atomic<std::size_t> next{0};
  const auto worker = [&]() {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= jobs_list.size()) return;
      const Job job = jobs_list[i];
      AblationRun<S>& run = report.arms[job.arm].runs[job.run];
      run.seed = seeds[job.run];
      ExperimentConfig cfg = base;
      cfg.toggles = arms[job.arm].toggles;
      cfg.master_seed = run.seed;
      try {
        run.result = train_model<S>(cfg, data, split, run.seed);
      } catch (const std::exception& e) {
        run.failed = true;
        run.error = e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  namespace fs = std::filesystem;
  if (!out_dir.empty()) fs::create_directories(out_dir);
  for (auto& arm : report.arms) {
    double sum = 0, sq = 0;
    arm.n_ok = 0;
    for (auto& run : arm.runs) {
      if (run.failed) continue;
      sum += run.result.final_val_miou;
      sq += run.result.final_val_miou * run.result.final_val_miou;
      ++arm.n_ok;
      if (!out_dir.empty()) {
        const std::string tag = arm.arm.key + "_s" + std::to_string(run.seed);
        std::ofstream mf(fs::path(out_dir) / ("metrics_" + tag + ".csv"));
        mf << run.result.metrics_csv_text;
        save_checkpoint((fs::path(out_dir) / ("ckpt_" + tag + ".mckp")).string(),
                        Checkpoint<S>{config_hash(base), static_cast<std::uint32_t>(base.epochs),
                                      run.seed, run.result.params, run.result.bank});
      }
    }
    if (arm.n_ok > 0) {
      arm.mean_miou = sum / arm.n_ok;
      arm.stddev_miou = std::sqrt(std::max(0.0, sq / arm.n_ok - arm.mean_miou * arm.mean_miou));
    }
  }
  if (!out_dir.empty()) {
    std::ofstream rf(fs::path(out_dir) / "report.csv");
    rf << report.csv();
  }
  return report;
}

// ---------------------------------------------------------------------------
// Gradient-fidelity runner

struct GradcheckRow {
  std::string term;
  double max_rel_err = 0;
  bool pass = false;
};

struct GradcheckReport {
  double tolerance = 1e-4;
  double step = 1e-5;
  std::vector<GradcheckRow> rows;
  bool all_pass = false;
  double seconds = 0;

  std::string table() const {
    std::string out;
    char buf[96];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof(buf), "%-8s max_rel_err=%-12.3e %s\n", r.term.c_str(),
                    r.max_rel_err, r.pass ? "PASS" : "FAIL");
      out += buf;
    }
    std::snprintf(buf, sizeof(buf), "gradcheck %s (%.1fs)\n", all_pass ? "PASS" : "FAIL", seconds);
    out += buf;
    return out;
  }
};

/// Central-difference check of every loss term's tape gradient on a tiny
/// double-precision instance (8x8 images, Z=4, C=8, batch 1). The weak
/// branch is frozen at the base parameters, matching its stop-gradient role
/// in the objective. Loss hyperparameters come from `cfg`.
inline GradcheckReport run_gradcheck(const ExperimentConfig& cfg, std::uint64_t seed = 7) {
  const auto t0 = std::chrono::steady_clock::now();

  ExperimentConfig tiny = cfg;
  tiny.image_size = 8;
  tiny.num_classes = 4;
  tiny.feature_channels = 8;
  tiny.batch = 1;
  tiny.precision = "double";
  tiny.toggles = {true, true, true};
  // At random initialization max class probability barely exceeds 1/Z, so a
  // production threshold would leave no confident pixels and a vacuously
  // zero L_ip; a low tau keeps the pseudo-label CE path exercised.
  tiny.tau = 0.25;
  tiny.validate();

  DatasetSpec spec = dataset_spec_from(tiny);
  spec.n_train = 4;
  spec.n_val = 1;
  spec.shapes_min = 1;
  spec.shapes_max = 2;
  spec.seed = seed;
  const Dataset data = generate_dataset(spec);
  const std::vector<const Sample*> labeled{&data.train[0]};
  const std::vector<const Sample*> unlabeled{&data.train[1]};

  ArchConfig arch;
  arch.feature_channels = tiny.feature_channels;
  arch.num_classes = tiny.num_classes;
  const SegNetParams<double> base = init_params<double>(seed, 1.0, arch);

  // One warm-up pass seeds the prototype bank so the outlier loss has
  // initialized classes to select against.
  PrototypeBank<double> bank(tiny.num_classes, tiny.feature_channels, tiny.eta);
  {
    Tape<double> tape;
    SegNetVars<double> vars = register_params(tape, base);
    LossGraph<double> g =
        build_loss_graph(tape, vars, base, bank, labeled, unlabeled, tiny, seed, 0, 0);
    if (g.has_sets) update_prototypes(bank, g.merged);
  }

  const Tensor<double> flat = flatten_params(base);
  GradcheckReport report;

  struct TermSpec {
    const char* name;
    Toggles toggles;
    int pick;  // index into {l_s, l_ip, l_p2p, l_dt, l_m, l_n, total}
  };
  const TermSpec terms[] = {
      {"L_s", {false, false, false}, 0}, {"L_ip", {true, false, false}, 1},
      {"L_p2p", {false, true, false}, 2}, {"L_dt", {false, true, false}, 3},
      {"L_m", {false, false, true}, 4},  {"L_n", {false, false, true}, 5},
      {"L_total", {true, true, true}, 6}};

  for (const auto& term : terms) {
    ExperimentConfig term_cfg = tiny;
    term_cfg.toggles = term.toggles;
    const auto f = [&](Tape<double>& tape, Var<double> p) -> Var<double> {
      SegNetVars<double> vars = params_from_flat(p, base);
      LossGraph<double> g =
          build_loss_graph(tape, vars, base, bank, labeled, unlabeled, term_cfg, seed, 0, 1);
      const Var<double> picks[] = {g.l_s, g.l_ip, g.l_p2p, g.l_dt, g.l_m, g.l_n, g.total};
      return picks[term.pick];
    };
    GradcheckRow row;
    row.term = term.name;
    row.max_rel_err = grad_check<double>(f, flat, report.step);
    row.pass = row.max_rel_err <= report.tolerance;
    report.rows.push_back(row);
  }

  report.all_pass = true;
  for (const auto& r : report.rows) report.all_pass = report.all_pass && r.pass;
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace mccl
