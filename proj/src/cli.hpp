#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace mccl::cli {

int gen_data(const std::string& spec_path, const std::string& out_dir);
int train(const std::string& config_path, const std::string& out_dir,
          std::optional<std::uint64_t> seed);
int eval(const std::string& ckpt_path, const std::string& data_dir, const std::string& split);
int ablate(const std::string& config_path, std::vector<std::uint64_t> seeds,
           const std::string& out_dir, int jobs);
int analyze(const std::string& ckpt_path, const std::string& data_dir, int bins,
            std::uint64_t seed);
int gradcheck(const std::string& config_path);

}  // namespace mccl::cli
