#include "cli.hpp"

#include <filesystem>
#include <iostream>

#include "mccl/harness.hpp"

namespace mccl::cli {
namespace {
namespace fs = std::filesystem;

Json read_json(const std::string& path) {
  std::ifstream is(path);
  check(is.is_open(), "cannot open: " + path);
  Json j;
  is >> j;
  return j;
}

/// Dispatches f<double> or f<float> on a precision name / dtype tag.
template <typename F>
int with_precision(const std::string& precision, F&& f) {
  if (precision == "single") return f(float{});
  return f(double{});
}

std::string precision_of_tag(std::uint32_t tag) {
  check(tag == dtype_tag<float>() || tag == dtype_tag<double>(),
        "checkpoint: unknown precision tag");
  return tag == dtype_tag<float>() ? "single" : "double";
}

}  // namespace

int gen_data(const std::string& spec_path, const std::string& out_dir) {
  const Json j = read_json(spec_path);
  // Accept either a bare dataset spec or a full experiment config.
  const DatasetSpec spec =
      j.contains("toggles") || j.contains("data") ? dataset_spec_from(config_from_json(j))
                                                  : spec_from_json(j);
  const Dataset d = generate_dataset(spec);
  save_dataset(out_dir, d);
  std::cout << "wrote " << d.train.size() << " train + " << d.val.size() << " val samples to "
            << out_dir << "\n";
  return 0;
}

int train(const std::string& config_path, const std::string& out_dir,
          std::optional<std::uint64_t> seed) {
  ExperimentConfig cfg = load_config(config_path);
  if (seed) cfg.master_seed = *seed;
  fs::create_directories(out_dir);
  {
    std::ofstream os(fs::path(out_dir) / "config.json");
    os << to_json(cfg).dump(2) << "\n";
  }
  return with_precision(cfg.precision, [&](auto tag) {
    using S = decltype(tag);
    const Dataset data = generate_dataset(dataset_spec_from(cfg));
    const SplitManifest split = make_split(cfg.data.n_train, cfg.data.n_labeled, cfg.data.seed);
    const TrainResult<S> res = train_model<S>(cfg, data, split, cfg.master_seed, out_dir);
    {
      std::ofstream os(fs::path(out_dir) / "metrics.csv");
      os << res.metrics_csv_text;
    }
    std::cout << "final val_mIoU=" << fmt_g17(res.final_val_miou) << " after " << cfg.epochs
              << " epochs (seed " << cfg.master_seed << ")\n"
              << "metrics: " << (fs::path(out_dir) / "metrics.csv").string() << "\n";
    return 0;
  });
}

int eval(const std::string& ckpt_path, const std::string& data_dir, const std::string& split) {
  check(split == "val" || split == "train", "eval: split must be 'val' or 'train'");
  const CheckpointHeader header = peek_checkpoint_header(ckpt_path);
  const Dataset data = load_dataset(data_dir);
  const auto& samples = split == "val" ? data.val : data.train;
  return with_precision(precision_of_tag(header.precision_tag), [&](auto tag) {
    using S = decltype(tag);
    const Checkpoint<S> ckpt = load_checkpoint<S>(ckpt_path);
    const double m = evaluate_miou(ckpt.params, samples, data.spec.num_classes);
    Json out;
    out["split"] = split;
    out["samples"] = samples.size();
    out["miou"] = m;
    out["epoch"] = ckpt.epoch;
    std::cout << out.dump() << "\n";
    return 0;
  });
}

int ablate(const std::string& config_path, std::vector<std::uint64_t> seeds,
           const std::string& out_dir, int jobs) {
  const ExperimentConfig cfg = load_config(config_path);
  check(!seeds.empty(), "ablate: need --seeds");
  return with_precision(cfg.precision, [&](auto tag) {
    using S = decltype(tag);
    const AblationReport<S> report = run_ablation<S>(cfg, seeds, out_dir, jobs);
    std::cout << report.table();
    if (!out_dir.empty())
      std::cout << "report: " << (fs::path(out_dir) / "report.csv").string() << "\n";
    bool any_failed = false;
    for (const auto& arm : report.arms)
      for (const auto& run : arm.runs)
        if (run.failed) {
          any_failed = true;
          std::cerr << "arm '" << arm.arm.name << "' seed " << run.seed
                    << " failed: " << run.error << "\n";
        }
    return any_failed ? 3 : 0;
  });
}

int analyze(const std::string& ckpt_path, const std::string& data_dir, int bins,
            std::uint64_t seed) {
  const CheckpointHeader header = peek_checkpoint_header(ckpt_path);
  const Dataset data = load_dataset(data_dir);
  return with_precision(precision_of_tag(header.precision_tag), [&](auto tag) {
    using S = decltype(tag);
    const Checkpoint<S> ckpt = load_checkpoint<S>(ckpt_path);
    const SimilarityHistogram h = similarity_histogram(ckpt.params, data.val, bins, seed);
    std::cout << h.csv();
    std::cerr << "mean_S_p2p=" << fmt_g17(h.mean_s_p2p) << " over " << data.val.size()
              << " val samples\n";
    return 0;
  });
}

int gradcheck(const std::string& config_path) {
  const ExperimentConfig cfg = load_config(config_path);
  const GradcheckReport report = run_gradcheck(cfg);
  std::cout << report.table();
  return report.all_pass ? 0 : 1;
}

}  // namespace mccl::cli
