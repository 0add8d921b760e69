#pragma once

#include <cstdint>
#include <fstream>
#include <string>

#include <json.hpp>

#include "mccl/common.hpp"

namespace mccl {

using Json = nlohmann::json;

struct Toggles {
  bool ip_on = true;
  bool if_on = true;
  bool fp_on = true;
};

/// Synthetic dataset parameters. The dataset (scenes and labeled/unlabeled
/// split) is a pure function of these fields, independent of the run seed,
/// so ablation arms and seeds always share identical data.
struct DataConfig {
  int n_train = 400;
  int n_labeled = 40;
  int n_val = 50;
  int shapes_min = 1;
  int shapes_max = 3;
  double noise = 0.08;
  std::uint64_t seed = 1234;
};

/// All hyperparameters in one serializable record.
struct ExperimentConfig {
  double lambda = 0.15;     // intervention scaling factor
  double eta = 0.99;        // prototype EMA momentum
  int n_r = 16;             // intra-cluster features kept per class
  int n_d = 256;            // outlier features kept per class
  double alpha = 0.1;       // point-to-point loss weight
  double omega = 0.01;      // outlier loss weight
  double beta = 0.01;       // intervention loss weight
  double tau = 0.95;        // pseudo-label confidence threshold
  double ip_weight = 1.0;   // prediction-consistency loss weight
  double lr = 0.1;
  double momentum = 0.9;
  int epochs = 60;
  int batch = 4;
  int image_size = 64;
  int feature_channels = 32;
  int num_classes = 4;
  Toggles toggles;
  int ckpt_every = 20;
  std::uint64_t master_seed = 1;
  std::string precision = "double";  // "double" | "single"
  DataConfig data;

  void validate() const {
    check(lambda > 0, "config: lambda must be > 0");
    check(eta >= 0 && eta < 1, "config: eta must be in [0,1)");
    check(n_r >= 0 && n_d >= 0, "config: n_r/n_d must be >= 0");
    check(alpha >= 0 && omega >= 0 && beta >= 0 && ip_weight >= 0,
          "config: loss weights must be >= 0");
    check(tau >= 0 && tau <= 1, "config: tau must be in [0,1]");
    check(lr > 0 && momentum >= 0 && momentum < 1, "config: bad lr/momentum");
    check(epochs >= 0 && batch >= 1, "config: bad epochs/batch");
    check(image_size >= 8 && image_size % 4 == 0, "config: image_size must be divisible by 4");
    check(feature_channels >= 1, "config: feature_channels must be >= 1");
    check(num_classes >= 2, "config: num_classes must be >= 2");
    check(ckpt_every >= 1, "config: ckpt_every must be >= 1");
    check(precision == "double" || precision == "single", "config: unknown precision");
    check(data.n_train >= 1 && data.n_labeled >= 1 && data.n_labeled <= data.n_train,
          "config: bad data counts");
    check(data.n_val >= 1, "config: n_val must be >= 1");
    check(data.shapes_min >= 0 && data.shapes_max >= data.shapes_min, "config: bad shape range");
    check(data.noise >= 0, "config: noise must be >= 0");
  }
};

inline Json to_json(const ExperimentConfig& c) {
  Json j;
  j["lambda"] = c.lambda;
  j["eta"] = c.eta;
  j["n_r"] = c.n_r;
  j["n_d"] = c.n_d;
  j["alpha"] = c.alpha;
  j["omega"] = c.omega;
  j["beta"] = c.beta;
  j["tau"] = c.tau;
  j["ip_weight"] = c.ip_weight;
  j["lr"] = c.lr;
  j["momentum"] = c.momentum;
  j["epochs"] = c.epochs;
  j["batch"] = c.batch;
  j["image_size"] = c.image_size;
  j["feature_channels"] = c.feature_channels;
  j["num_classes"] = c.num_classes;
  j["toggles"] = {{"ip", c.toggles.ip_on}, {"if", c.toggles.if_on}, {"fp", c.toggles.fp_on}};
  j["ckpt_every"] = c.ckpt_every;
  j["seeds"] = {{"master", c.master_seed}};
  j["precision"] = c.precision;
  j["data"] = {{"n_train", c.data.n_train},   {"n_labeled", c.data.n_labeled},
               {"n_val", c.data.n_val},       {"shapes_min", c.data.shapes_min},
               {"shapes_max", c.data.shapes_max}, {"noise", c.data.noise},
               {"seed", c.data.seed}};
  return j;
}

inline ExperimentConfig config_from_json(const Json& j) {
  ExperimentConfig c;
  const auto get = [&j](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("lambda", c.lambda);
  get("eta", c.eta);
  get("n_r", c.n_r);
  get("n_d", c.n_d);
  get("alpha", c.alpha);
  get("omega", c.omega);
  get("beta", c.beta);
  get("tau", c.tau);
  get("ip_weight", c.ip_weight);
  get("lr", c.lr);
  get("momentum", c.momentum);
  get("epochs", c.epochs);
  get("batch", c.batch);
  get("image_size", c.image_size);
  get("feature_channels", c.feature_channels);
  get("num_classes", c.num_classes);
  get("ckpt_every", c.ckpt_every);
  get("precision", c.precision);
  if (j.contains("toggles")) {
    const auto& t = j.at("toggles");
    if (t.contains("ip")) c.toggles.ip_on = t.at("ip").get<bool>();
    if (t.contains("if")) c.toggles.if_on = t.at("if").get<bool>();
    if (t.contains("fp")) c.toggles.fp_on = t.at("fp").get<bool>();
  }
  if (j.contains("seeds")) {
    const auto& s = j.at("seeds");
    if (s.is_number())
      c.master_seed = s.get<std::uint64_t>();
    else if (s.contains("master"))
      c.master_seed = s.at("master").get<std::uint64_t>();
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    const auto getd = [&d](const char* key, auto& field) {
      if (d.contains(key)) field = d.at(key).get<std::decay_t<decltype(field)>>();
    };
    getd("n_train", c.data.n_train);
    getd("n_labeled", c.data.n_labeled);
    getd("n_val", c.data.n_val);
    getd("shapes_min", c.data.shapes_min);
    getd("shapes_max", c.data.shapes_max);
    getd("noise", c.data.noise);
    getd("seed", c.data.seed);
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  check(is.is_open(), "cannot open config: " + path);
  Json j;
  is >> j;
  return config_from_json(j);
}

/// Stable hash of the canonical JSON form (nlohmann orders keys).
inline std::uint64_t config_hash(const ExperimentConfig& c) { return fnv1a(to_json(c).dump()); }

}  // namespace mccl
