#include <doctest.h>

#include <filesystem>

#include "mccl/trainer.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace mccl;

namespace {
ExperimentConfig tiny_cfg() {
  ExperimentConfig c;
  c.image_size = 16;
  c.num_classes = 4;
  c.feature_channels = 8;
  c.batch = 2;
  c.epochs = 1;
  c.lr = 0.05;
  c.tau = 0.25;  // random-init confidences hover just above 1/Z
  c.data.n_train = 8;
  c.data.n_labeled = 4;
  c.data.n_val = 2;
  c.data.shapes_min = 1;
  c.data.shapes_max = 2;
  c.data.seed = 42;
  return c;
}

struct Fixture {
  ExperimentConfig cfg = tiny_cfg();
  Dataset data = generate_dataset(dataset_spec_from(cfg));
  SplitManifest split = make_split(cfg.data.n_train, cfg.data.n_labeled, cfg.data.seed);

  std::vector<const Sample*> labeled_batch() const {
    return {&data.train[split.labeled[0]], &data.train[split.labeled[1]]};
  }
  std::vector<const Sample*> unlabeled_batch() const {
    return {&data.train[split.unlabeled[0]], &data.train[split.unlabeled[1]]};
  }
  TrainState<double> fresh_state(std::uint64_t seed = 1) const {
    ArchConfig arch;
    arch.feature_channels = cfg.feature_channels;
    arch.num_classes = cfg.num_classes;
    TrainState<double> st;
    st.params = init_params<double>(seed, 1.0, arch);
    st.bank = PrototypeBank<double>(cfg.num_classes, cfg.feature_channels, cfg.eta);
    st.init_velocity();
    return st;
  }
};

bool params_equal(const SegNetParams<double>& a, const SegNetParams<double>& b) {
  const auto la = param_list(a), lb = param_list(b);
  for (std::size_t i = 0; i < la.size(); ++i)
    if (!testutil::bitwise_equal(*la[i], *lb[i])) return false;
  return true;
}
}  // namespace

TEST_CASE("supervised loss closed forms") {
  SUBCASE("saturating logits vanish") {
    Tensor<double> logits({1, 2, 1, 2});
    logits[0] = 30.0;  // class 0 at pixel 0
    logits[3] = 30.0;  // class 1 at pixel 1
    Tensor<std::int32_t> y({1, 1, 2});
    y[1] = 1;
    CHECK(supervised_loss_value(logits, y) < 1e-3);
  }
  SUBCASE("uniform logits give ln Z") {
    const Tensor<double> logits({1, 4, 2, 2});
    const Tensor<std::int32_t> y({1, 2, 2});
    CHECK(supervised_loss_value(logits, y) == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  }
  SUBCASE("out-of-range labels are rejected") {
    Tensor<std::int32_t> y({1, 1, 1});
    y[0] = 7;
    CHECK_THROWS_AS(supervised_loss_value(Tensor<double>({1, 4, 1, 1}), y), ContractViolation);
  }
  SUBCASE("random batch matches the pixelwise reference") {
    Rng rng(1);
    for (int trial = 0; trial < 30; ++trial) {
      const Tensor<double> logits = testutil::random_tensor({2, 3, 4, 4}, rng, -2.0, 2.0);
      Tensor<std::int32_t> y({2, 4, 4});
      std::vector<std::int32_t> yv(y.size());
      for (std::int64_t i = 0; i < y.size(); ++i) {
        y[i] = static_cast<std::int32_t>(rng.uniform_int(0, 2));
        yv[i] = y[i];
      }
      const double ref = oracle::cross_entropy(testutil::to_vec(logits), yv, 2, 3, 16);
      CHECK(std::abs(supervised_loss_value(logits, y) - ref) <= 1e-10);
    }
  }
}

TEST_CASE("ip loss closed forms and oracle equivalence") {
  SUBCASE("perfect one-hot agreement gives zero") {
    Tensor<double> p({1, 2, 1, 2});
    p[0] = 1.0;  // class 0 at pixel 0
    p[3] = 1.0;  // class 1 at pixel 1
    CHECK(ip_loss_value(p, p, 0.95) == 0.0);
  }
  SUBCASE("threshold one with sub-one confidences selects nothing") {
    Rng rng(2);
    const Tensor<double> pw = testutil::random_prob_map(1, 3, 2, 2, rng);
    const Tensor<double> ps = testutil::random_prob_map(1, 3, 2, 2, rng);
    CHECK(ip_loss_value(ps, pw, 1.0) == 0.0);
  }
  SUBCASE("random instance matches the masked-pixel reference") {
    Rng rng(3);
    for (int trial = 0; trial < 30; ++trial) {
      const Tensor<double> pw = testutil::random_prob_map(2, 4, 3, 3, rng);
      const Tensor<double> ps = testutil::random_prob_map(2, 4, 3, 3, rng);
      const double tau = 0.3;
      const double ref = oracle::ip_loss(testutil::to_vec(ps), testutil::to_vec(pw), tau, 2, 4, 9);
      CHECK(std::abs(ip_loss_value(ps, pw, tau) - ref) <= 1e-10);
    }
  }
  SUBCASE("gradient matches finite differences") {
    Rng rng(4);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng local(seed + 10);
      const Tensor<double> pw = testutil::random_prob_map(1, 3, 2, 2, local);
      const Tensor<double> logits = testutil::random_tensor({1, 3, 2, 2}, local, -1.0, 1.0);
      const auto f = [&pw](Tape<double>& t, Var<double> p) {
        return ip_loss(softmax_channel(reshape(p, {1, 3, 2, 2})), pw, 0.3);
      };
      CHECK(grad_check<double>(f, logits.reshaped({12}), 1e-6) <= 1e-4);
    }
  }
}

TEST_CASE("unsup loss weighting and toggle contract") {
  const LossWeights w{0.1, 0.01, 0.01, 1.0, 0.95};
  CHECK(unsup_loss(0, 0, 0, 0, 0, w, {true, true, true}) == 0.0);
  CHECK(unsup_loss(1, 1, 1, 1, 1, w, {false, true, true}) ==
        doctest::Approx(0.13).epsilon(1e-12));
  // with the feature-alignment toggle off, the result ignores L_p2p and L_dt
  const double a = unsup_loss(123.0, -7.0, 1, 1, 1, w, {true, false, true});
  const double b = unsup_loss(0.5, 99.0, 1, 1, 1, w, {true, false, true});
  CHECK(a == b);
  CHECK_THROWS_AS(
      unsup_loss(std::numeric_limits<double>::infinity(), 0, 0, 0, 0, w, {true, true, true}),
      ContractViolation);
}

TEST_CASE("sgd update rules") {
  SUBCASE("zero momentum is plain gradient descent") {
    Tensor<double> p({2}, {1.0, 2.0});
    Tensor<double> v({2});
    sgd_update(p, Tensor<double>({2}, {0.5, -0.5}), v, 0.1, 0.0);
    CHECK(p[0] == doctest::Approx(0.95).epsilon(1e-15));
    CHECK(p[1] == doctest::Approx(2.05).epsilon(1e-15));
  }
  SUBCASE("zero gradient and zero velocity leave parameters unchanged") {
    Tensor<double> p({3}, {1, 2, 3});
    Tensor<double> v({3});
    const Tensor<double> before = p;
    sgd_update(p, Tensor<double>({3}), v, 0.5, 0.9);
    CHECK(testutil::bitwise_equal(p, before));
  }
  SUBCASE("velocity recursion") {
    Tensor<double> p({1}, {0.0});
    Tensor<double> v({1}, {2.0});
    sgd_update(p, Tensor<double>({1}, {1.0}), v, 0.1, 0.5);
    CHECK(v[0] == doctest::Approx(2.0).epsilon(1e-15));  // 0.5*2 + 1
    CHECK(p[0] == doctest::Approx(-0.2).epsilon(1e-15));
  }
  SUBCASE("quadratic bowl converges") {
    const Tensor<double> target({4}, {1.0, -2.0, 0.5, 3.0});
    Tensor<double> p({4});
    Tensor<double> v({4});
    for (int it = 0; it < 200; ++it) {
      Tensor<double> g(p.shape());
      g.array() = 2.0 * (p.array() - target.array());
      sgd_update(p, g, v, 0.05, 0.9);
    }
    for (std::int64_t i = 0; i < 4; ++i) CHECK(std::abs(p[i] - target[i]) <= 1e-6);
  }
  SUBCASE("contract violations") {
    Tensor<double> p({1}), v({1});
    CHECK_THROWS_AS(sgd_update(p, Tensor<double>({1}), v, 0.0, 0.5), ContractViolation);
    CHECK_THROWS_AS(sgd_update(p, Tensor<double>({1}), v, 0.1, 1.0), ContractViolation);
  }
}

TEST_CASE("train_step is bit-identical under identical seeds and inputs") {
  const Fixture fx;
  TrainState<double> a = fx.fresh_state();
  TrainState<double> b = fx.fresh_state();
  const auto ma = train_step(fx.labeled_batch(), fx.unlabeled_batch(), a, fx.cfg, 5, 0, 0);
  const auto mb = train_step(fx.labeled_batch(), fx.unlabeled_batch(), b, fx.cfg, 5, 0, 0);
  CHECK(params_equal(a.params, b.params));
  CHECK(testutil::bitwise_equal(a.bank.prototypes, b.bank.prototypes));
  CHECK(ma.l_total == mb.l_total);
}

TEST_CASE("repeated steps on one fixed batch reduce the total loss") {
  const Fixture fx;
  for (std::uint64_t seed : {11ULL, 22ULL, 33ULL}) {
    TrainState<double> st = fx.fresh_state(seed);
    double first = 0, last = 0;
    for (int it = 0; it < 50; ++it) {
      const auto m = train_step(fx.labeled_batch(), fx.unlabeled_batch(), st, fx.cfg, seed, 0, 0);
      if (it == 0) first = m.l_total;
      last = m.l_total;
    }
    CHECK(last < first);
  }
}

TEST_CASE("all toggles off reduces exactly to supervised training") {
  Fixture fx;
  fx.cfg.toggles = {false, false, false};

  TrainState<double> a = fx.fresh_state();
  const auto m = train_step(fx.labeled_batch(), fx.unlabeled_batch(), a, fx.cfg, 5, 0, 0);
  CHECK(m.l_total == m.l_s);
  CHECK(m.l_ip == 0.0);
  CHECK(!std::isfinite(m.mean_s_p2p));

  // the unlabeled batch has no effect at all
  TrainState<double> b = fx.fresh_state();
  std::vector<const Sample*> other{&fx.data.train[fx.split.unlabeled[2]],
                                   &fx.data.train[fx.split.unlabeled[3]]};
  train_step(fx.labeled_batch(), other, b, fx.cfg, 5, 0, 0);
  CHECK(params_equal(a.params, b.params));

  // and so does an empty one
  TrainState<double> c = fx.fresh_state();
  train_step(fx.labeled_batch(), {}, c, fx.cfg, 5, 0, 0);
  CHECK(params_equal(a.params, c.params));
  CHECK(c.bank.initialized[0] == 0);
}

TEST_CASE("toggle faithfulness: disabled branches cannot influence the update") {
  Fixture fx;

  SUBCASE("if_on=false makes the update independent of the prototype bank") {
    fx.cfg.toggles = {true, false, true};
    TrainState<double> a = fx.fresh_state();
    TrainState<double> b = fx.fresh_state();
    b.bank.prototypes.array().setConstant(1e6);
    for (auto& f : b.bank.initialized) f = 1;
    train_step(fx.labeled_batch(), fx.unlabeled_batch(), a, fx.cfg, 5, 0, 0);
    train_step(fx.labeled_batch(), fx.unlabeled_batch(), b, fx.cfg, 5, 0, 0);
    CHECK(params_equal(a.params, b.params));
    // and the bank itself is untouched
    CHECK(b.bank.prototypes[0] == 1e6);
  }

  SUBCASE("fp_on=false makes the update independent of lambda") {
    fx.cfg.toggles = {true, true, false};
    TrainState<double> a = fx.fresh_state();
    ExperimentConfig other = fx.cfg;
    other.lambda = 7.5;
    TrainState<double> b = fx.fresh_state();
    train_step(fx.labeled_batch(), fx.unlabeled_batch(), a, fx.cfg, 5, 0, 0);
    train_step(fx.labeled_batch(), fx.unlabeled_batch(), b, other, 5, 0, 0);
    CHECK(params_equal(a.params, b.params));
  }
}

TEST_CASE("reported total decomposes into weighted components") {
  const Fixture fx;
  TrainState<double> st = fx.fresh_state();
  // warm the bank so L_dt participates
  train_step(fx.labeled_batch(), fx.unlabeled_batch(), st, fx.cfg, 5, 0, 0);
  const auto m = train_step(fx.labeled_batch(), fx.unlabeled_batch(), st, fx.cfg, 5, 0, 1);
  const double recombined =
      m.l_s + unsup_loss(m.l_p2p, m.l_dt, m.l_m, m.l_n, m.l_ip, LossWeights::from(fx.cfg),
                         fx.cfg.toggles);
  CHECK(std::abs(m.l_total - recombined) <= 1e-12);
}

TEST_CASE("outlier loss uses the pre-update bank; the update lands afterwards") {
  Fixture fx;
  fx.cfg.toggles = {false, true, false};
  TrainState<double> st = fx.fresh_state();
  // seed the bank with one step, then snapshot
  train_step(fx.labeled_batch(), fx.unlabeled_batch(), st, fx.cfg, 5, 0, 0);
  const SegNetParams<double> params_before = st.params;
  const PrototypeBank<double> bank_before = st.bank;

  const auto m = train_step(fx.labeled_batch(), fx.unlabeled_batch(), st, fx.cfg, 5, 0, 1);

  // recompute the same graph against the snapshot: identical L_dt
  Tape<double> tape;
  SegNetParams<double> params_copy = params_before;
  SegNetVars<double> vars = register_params(tape, params_copy);
  const LossGraph<double> g = build_loss_graph(tape, vars, params_copy, bank_before,
                                               fx.labeled_batch(), fx.unlabeled_batch(), fx.cfg,
                                               5, 0, 1);
  CHECK(m.l_dt == g.l_dt.value().item());
  // and the bank moved after the step
  CHECK(!testutil::bitwise_equal(st.bank.prototypes, bank_before.prototypes));
}

TEST_CASE("non-finite losses abort with the component name") {
  const Fixture fx;
  TrainState<double> st = fx.fresh_state();
  st.params.enc.w1[0] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_WITH_AS(
      train_step(fx.labeled_batch(), fx.unlabeled_batch(), st, fx.cfg, 5, 0, 0),
      "train_step: non-finite L_s", NonFiniteError);
}

TEST_CASE("train_model loop: rows, checkpoints, degenerate epochs") {
  namespace fs = std::filesystem;
  Fixture fx;
  fx.cfg.epochs = 2;
  fx.cfg.ckpt_every = 1;
  const std::string dir = (fs::temp_directory_path() / "mccl_test_train").string();
  fs::remove_all(dir);
  fs::create_directories(dir);

  const TrainResult<double> res = train_model<double>(fx.cfg, fx.data, fx.split, 7, dir);
  CHECK(res.epochs.size() == 2);
  CHECK(res.metrics_csv_text.rfind(kMetricsCsvHeader, 0) == 0);
  CHECK(fs::exists(fs::path(dir) / "ckpt_epoch_0001.mckp"));
  CHECK(fs::exists(fs::path(dir) / "ckpt_epoch_0002.mckp"));
  CHECK(fs::exists(fs::path(dir) / "ckpt_final.mckp"));
  CHECK(res.final_val_miou == res.epochs.back().val_miou);

  // identical reruns produce byte-identical metrics
  const TrainResult<double> res2 = train_model<double>(fx.cfg, fx.data, fx.split, 7);
  CHECK(res.metrics_csv_text == res2.metrics_csv_text);

  // zero epochs: untrained evaluation only
  ExperimentConfig zero = fx.cfg;
  zero.epochs = 0;
  const TrainResult<double> rz = train_model<double>(zero, fx.data, fx.split, 7);
  CHECK(rz.epochs.empty());
  CHECK(rz.final_val_miou ==
        evaluate_miou(init_params<double>(7, 1.0, ArchConfig{fx.cfg.feature_channels,
                                                             fx.cfg.num_classes, 16, 32}),
                      fx.data.val, fx.cfg.num_classes));
  fs::remove_all(dir);
}

TEST_CASE("full objective gradient passes on a tiny instance") {
  Fixture fx;
  fx.cfg.image_size = 8;
  fx.cfg.data.n_train = 4;
  fx.cfg.data.n_labeled = 2;
  fx.cfg.data.n_val = 1;
  const Dataset data = generate_dataset(dataset_spec_from(fx.cfg));
  const SplitManifest split = make_split(4, 2, fx.cfg.data.seed);
  const std::vector<const Sample*> lb{&data.train[split.labeled[0]]};
  const std::vector<const Sample*> ub{&data.train[split.unlabeled[0]]};

  ArchConfig arch{fx.cfg.feature_channels, fx.cfg.num_classes, 16, 32};
  const SegNetParams<double> base = init_params<double>(3, 1.0, arch);
  PrototypeBank<double> bank(fx.cfg.num_classes, fx.cfg.feature_channels, fx.cfg.eta);
  {
    Tape<double> tape;
    SegNetVars<double> vars = register_params(tape, base);
    const auto g = build_loss_graph(tape, vars, base, bank, lb, ub, fx.cfg, 3, 0, 0);
    if (g.has_sets) update_prototypes(bank, g.merged);
  }
  const auto f = [&](Tape<double>& t, Var<double> p) {
    SegNetVars<double> vars = params_from_flat(p, base);
    return build_loss_graph(t, vars, base, bank, lb, ub, fx.cfg, 3, 0, 1).total;
  };
  CHECK(grad_check<double>(f, flatten_params(base), 1e-5) <= 1e-4);
}
