#include <CLI11.hpp>
#include <iostream>

#include "cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"MCCL: multi-constraint consistency learning on synthetic segmentation data"};
  app.require_subcommand(1);

  std::string spec_path, config_path, out_dir, ckpt_path, data_dir, split = "val";
  std::vector<std::uint64_t> seeds;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int bins = 10, jobs = 0;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset directory");
  gen->add_option("--spec", spec_path, "dataset spec or experiment config JSON")->required();
  gen->add_option("--out", out_dir, "output directory")->required();

  auto* train = app.add_subcommand("train", "train one model from a config");
  train->add_option("--config", config_path, "experiment config JSON")->required();
  train->add_option("--out", out_dir, "output directory")->required();
  train->add_option("--seed", seed, "override the master seed")->each([&](const std::string&) {
    seed_set = true;
  });

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset directory");
  eval->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  eval->add_option("--data", data_dir, "dataset directory")->required();
  eval->add_option("--split", split, "val|train (default val)");

  auto* ablate = app.add_subcommand("ablate", "train all consistency-constraint arms");
  ablate->add_option("--config", config_path, "experiment config JSON")->required();
  ablate->add_option("--seeds", seeds, "comma-separated run seeds")->required()->delimiter(',');
  ablate->add_option("--out", out_dir, "output directory")->required();
  ablate->add_option("--jobs", jobs, "worker threads (default min(4, cores))");

  auto* analyze = app.add_subcommand("analyze", "similarity/consistency histogram CSV");
  analyze->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  analyze->add_option("--data", data_dir, "dataset directory")->required();
  analyze->add_option("--bins", bins, "number of similarity bins (default 10)");
  analyze->add_option("--seed", seed, "view-sampling seed (default 0)");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of all loss terms");
  gradcheck->add_option("--config", config_path, "experiment config JSON")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return mccl::cli::gen_data(spec_path, out_dir);
    if (train->parsed())
      return mccl::cli::train(config_path, out_dir,
                              seed_set ? std::optional<std::uint64_t>(seed) : std::nullopt);
    if (eval->parsed()) return mccl::cli::eval(ckpt_path, data_dir, split);
    if (ablate->parsed()) return mccl::cli::ablate(config_path, seeds, out_dir, jobs);
    if (analyze->parsed()) return mccl::cli::analyze(ckpt_path, data_dir, bins, seed);
    if (gradcheck->parsed()) return mccl::cli::gradcheck(config_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
