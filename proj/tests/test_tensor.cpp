#include <doctest.h>

#include <cstring>
#include <sstream>

#include "mccl/serialize.hpp"
#include "mccl/tape.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace mccl;

TEST_CASE("tensor shape and data invariants") {
  Tensor<double> t({2, 3});
  CHECK(t.size() == 6);
  CHECK_THROWS_AS(Tensor<double>({2, 3}, {1.0, 2.0}), ContractViolation);
  CHECK_THROWS_AS(Tensor<double>({0, 3}), ContractViolation);
  CHECK(Tensor<double>::scalar(5.0).item() == 5.0);
}

TEST_CASE("cosine similarity examples") {
  CHECK(cosine_similarity(Tensor<double>({2}, {1, 0}), Tensor<double>({2}, {0, 1})) == 0.0);
  CHECK(cosine_similarity(Tensor<double>({2}, {1, 2}), Tensor<double>({2}, {2, 4})) ==
        doctest::Approx(1.0).epsilon(1e-12));
  CHECK(cosine_similarity(Tensor<double>({2}, {1, 1}), Tensor<double>({2}, {1, -1})) ==
        doctest::Approx(0.0).epsilon(1e-12));
  // zero-norm operand contributes zero
  CHECK(cosine_similarity(Tensor<double>({2}, {0, 0}), Tensor<double>({2}, {1, 1})) == 0.0);
  CHECK_THROWS_AS(cosine_similarity(Tensor<double>({2}, {1, 0}), Tensor<double>({3}, {1, 0, 0})),
                  ContractViolation);
}

TEST_CASE("softmax closed forms and stability") {
  const Tensor<double> a = softmax(Tensor<double>({2}, {0, 0}), 0);
  CHECK(a[0] == doctest::Approx(0.5).epsilon(1e-12));
  const Tensor<double> b = softmax(Tensor<double>({2}, {std::log(2.0), 0}), 0);
  CHECK(b[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(b[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  const Tensor<double> c = softmax(Tensor<double>({2}, {1000, 0}), 0);
  CHECK(c.all_finite());
  CHECK(std::abs(c[0] - 1.0) <= 1e-9);
  CHECK(std::abs(c[1]) <= 1e-9);
}

TEST_CASE("softmax sums to one for any finite logits") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const double mag = trial % 2 == 0 ? 1.0 : 1e3;
    const Tensor<double> x = testutil::random_tensor({3, 4, 5}, rng, -mag, mag);
    const std::int64_t axis = trial % 3;
    const Tensor<double> p = softmax(x, axis);
    const auto& s = x.shape();
    std::int64_t outer = 1, inner = 1;
    for (std::int64_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::int64_t i = axis + 1; i < 3; ++i) inner *= s[i];
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t in = 0; in < inner; ++in) {
        double sum = 0;
        for (std::int64_t k = 0; k < s[axis]; ++k) sum += p[o * s[axis] * inner + k * inner + in];
        CHECK(std::abs(sum - 1.0) <= 1e-9);
      }
  }
}

TEST_CASE("relu and channel_mean examples") {
  const Tensor<double> r = relu(Tensor<double>({3}, {-1, 0, 2}));
  CHECK(r[0] == 0.0);
  CHECK(r[1] == 0.0);
  CHECK(r[2] == 2.0);

  Tensor<double> x({1, 2, 2, 2});
  for (std::int64_t i = 0; i < 4; ++i) {
    x[i] = 1.0;      // channel 0
    x[4 + i] = 3.0;  // channel 1
  }
  const Tensor<double> m = channel_mean(x);
  CHECK(m.shape() == Shape{1, 1, 2, 2});
  for (std::int64_t i = 0; i < 4; ++i) CHECK(m[i] == 2.0);
}

TEST_CASE("conv2d identity kernel preserves input") {
  Rng rng(3);
  const Tensor<double> x = testutil::random_tensor({1, 1, 5, 5}, rng);
  Tensor<double> w({1, 1, 3, 3});
  w[4] = 1.0;  // centre tap
  const Tensor<double> y = conv2d(x, w, Tensor<double>({1}), 1, 1);
  CHECK(testutil::bitwise_equal(x, y));
}

TEST_CASE("conv2d matches a direct five-loop reference") {
  Rng rng(17);
  const std::int64_t b = 2, cin = 3, h = 6, wd = 5, cout = 4, k = 3, stride = 2, pad = 1;
  const Tensor<double> x = testutil::random_tensor({b, cin, h, wd}, rng);
  const Tensor<double> w = testutil::random_tensor({cout, cin, k, k}, rng);
  const Tensor<double> bias = testutil::random_tensor({cout}, rng);
  const Tensor<double> y = conv2d(x, w, bias, stride, pad);

  const std::int64_t ho = conv_out_extent(h, k, stride, pad), wo = conv_out_extent(wd, k, stride, pad);
  REQUIRE(y.shape() == Shape{b, cout, ho, wo});
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t co = 0; co < cout; ++co)
      for (std::int64_t oy = 0; oy < ho; ++oy)
        for (std::int64_t ox = 0; ox < wo; ++ox) {
          double acc = bias[co];
          for (std::int64_t ci = 0; ci < cin; ++ci)
            for (std::int64_t dy = 0; dy < k; ++dy)
              for (std::int64_t dx = 0; dx < k; ++dx) {
                const std::int64_t iy = oy * stride + dy - pad, ix = ox * stride + dx - pad;
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                acc += x[offset4(x.shape(), bi, ci, iy, ix)] *
                       w[offset4(w.shape(), co, ci, dy, dx)];
              }
          CHECK(y[offset4(y.shape(), bi, co, oy, ox)] == doctest::Approx(acc).epsilon(1e-12));
        }
}

TEST_CASE("bilinear upsample hand case and constants") {
  // 1x2 input upsampled x2 along width: [a, 0.75a+0.25b, 0.25a+0.75b, b]
  const Tensor<double> x({1, 1, 1, 2}, {2.0, 6.0});
  const Tensor<double> y = bilinear_upsample(x, 2);
  REQUIRE(y.shape() == Shape{1, 1, 2, 4});
  CHECK(y[0] == doctest::Approx(2.0));
  CHECK(y[1] == doctest::Approx(3.0));
  CHECK(y[2] == doctest::Approx(5.0));
  CHECK(y[3] == doctest::Approx(6.0));

  const Tensor<double> c = bilinear_upsample(Tensor<double>::full({2, 3, 4, 4}, 1.25), 4);
  for (std::int64_t i = 0; i < c.size(); ++i) CHECK(c[i] == doctest::Approx(1.25).epsilon(1e-15));
}

TEST_CASE("primitives are pure") {
  Rng rng(5);
  const Tensor<double> x = testutil::random_tensor({1, 2, 6, 6}, rng);
  const Tensor<double> w = testutil::random_tensor({3, 2, 3, 3}, rng);
  const Tensor<double> b = testutil::random_tensor({3}, rng);
  CHECK(testutil::bitwise_equal(conv2d(x, w, b, 1, 1), conv2d(x, w, b, 1, 1)));
  CHECK(testutil::bitwise_equal(softmax(x, 1), softmax(x, 1)));
  CHECK(testutil::bitwise_equal(bilinear_upsample(x, 2), bilinear_upsample(x, 2)));
}

TEST_CASE("tensor serialization round-trip and wire format") {
  Rng rng(9);
  const Tensor<double> t = testutil::random_tensor({2, 3, 4}, rng);
  std::ostringstream os(std::ios::binary);
  write_tensor(os, t);
  const std::string bytes = os.str();

  CHECK(std::memcmp(bytes.data(), "MCCL", 4) == 0);
  std::uint32_t version, rank, tag;
  std::memcpy(&version, bytes.data() + 4, 4);
  std::memcpy(&rank, bytes.data() + 8, 4);
  CHECK(version == 1);
  CHECK(rank == 3);
  std::uint64_t e0;
  std::memcpy(&e0, bytes.data() + 12, 8);
  CHECK(e0 == 2);
  std::memcpy(&tag, bytes.data() + 12 + 24, 4);
  CHECK(tag == 2);  // f64
  CHECK(bytes.size() == 4 + 4 + 4 + 24 + 4 + 24 * sizeof(double));

  std::istringstream is(bytes, std::ios::binary);
  const Tensor<double> back = read_tensor<double>(is);
  CHECK(testutil::bitwise_equal(t, back));

  // element type tag is enforced
  std::istringstream is2(bytes, std::ios::binary);
  CHECK_THROWS_AS(read_tensor<float>(is2), ContractViolation);
}

TEST_CASE("tape replay is bit-for-bit reproducible") {
  Rng rng(23);
  const Tensor<double> x = testutil::random_tensor({1, 2, 4, 4}, rng);
  const Tensor<double> w = testutil::random_tensor({2, 2, 3, 3}, rng);
  const auto run = [&]() {
    Tape<double> t;
    Var<double> vx = t.input(x);
    Var<double> vw = t.input(w);
    Var<double> y = mean_all(relu(conv2d(vx, vw, t.constant(Tensor<double>({2})), 1, 1)));
    return y.value();
  };
  CHECK(testutil::bitwise_equal(run(), run()));
}

TEST_CASE("grad_check quadratic exactness") {
  const auto f = [](Tape<double>& t, Var<double> p) { return mean_all(mul(p, p)); };
  const double err = grad_check<double>(f, Tensor<double>({1}, {3.0}), 1e-5);
  CHECK(err <= 1e-10);
}

TEST_CASE("grad_check flags a corrupted gradient") {
  // custom primitive whose backward is deliberately wrong by 10%
  const auto f = [](Tape<double>& t, Var<double> p) {
    const auto pid = p.id;
    Tensor<double> v(p.value().shape());
    v.array() = p.value().array() * p.value().array();
    Var<double> sq = t.push(std::move(v), {pid}, "bad_square",
                            [pid](Tape<double>& tt, std::int32_t self) {
                              Tensor<double> g(tt.grad_value(self).shape());
                              g.array() =
                                  2.2 * tt.grad_value(self).array() * tt.value(pid).array();
                              tt.add_grad(pid, g);
                            });
    return mean_all(sq);
  };
  CHECK(grad_check<double>(f, Tensor<double>({1}, {3.0}), 1e-5) > 1e-4);
}

TEST_CASE("grad_check diagnoses non-finite intermediates") {
  const auto f = [](Tape<double>& t, Var<double> p) {
    Tensor<double> inf_t = Tensor<double>::full({1}, std::numeric_limits<double>::infinity());
    return mean_all(mul(p, t.constant(std::move(inf_t), "inf_const")));
  };
  CHECK_THROWS_AS(grad_check<double>(f, Tensor<double>({1}, {1.0}), 1e-5), NonFiniteError);
}

TEST_CASE("tape primitive gradients match finite differences") {
  Rng rng(31);
  SUBCASE("relu") {
    const Tensor<double> x = testutil::random_tensor({7}, rng);
    const auto f = [](Tape<double>& t, Var<double> p) { return mean_all(relu(p)); };
    CHECK(grad_check<double>(f, x, 1e-6) <= 1e-6);
  }
  SUBCASE("softmax_channel") {
    const Tensor<double> x = testutil::random_tensor({1, 4, 2, 2}, rng);
    const auto f = [](Tape<double>& t, Var<double> p) {
      Var<double> v = reshape(p, {1, 4, 2, 2});
      Var<double> sm = softmax_channel(v);
      return mean_all(mul(sm, sm));
    };
    CHECK(grad_check<double>(f, x.reshaped({16}), 1e-6) <= 1e-6);
  }
  SUBCASE("bilinear_upsample") {
    const Tensor<double> x = testutil::random_tensor({1, 2, 3, 3}, rng);
    const auto f = [](Tape<double>& t, Var<double> p) {
      return mean_all(bilinear_upsample(reshape(p, {1, 2, 3, 3}), 2));
    };
    CHECK(grad_check<double>(f, x.reshaped({18}), 1e-6) <= 1e-6);
  }
  SUBCASE("mse_against") {
    const Tensor<double> x = testutil::random_tensor({9}, rng);
    const Tensor<double> tgt = testutil::random_tensor({9}, rng);
    const auto f = [&tgt](Tape<double>& t, Var<double> p) { return mse_against(p, tgt); };
    CHECK(grad_check<double>(f, x, 1e-6) <= 1e-8);
  }
  SUBCASE("slice and reshape") {
    const Tensor<double> x = testutil::random_tensor({10}, rng);
    const auto f = [](Tape<double>& t, Var<double> p) {
      Var<double> a = slice(p, 2, {2, 3});
      return mean_all(mul(a, a));
    };
    CHECK(grad_check<double>(f, x, 1e-6) <= 1e-8);
  }
}

TEST_CASE("grad_check on a random conv net with cross-entropy") {
  Rng rng(41);
  const std::int64_t z = 3;
  const Tensor<double> img = testutil::random_tensor({1, 2, 6, 6}, rng, 0.0, 1.0);
  Tensor<std::int32_t> labels({1, 6, 6});
  for (std::int64_t i = 0; i < labels.size(); ++i)
    labels[i] = static_cast<std::int32_t>(rng.uniform_int(0, z - 1));

  // three conv layers packed into one flat parameter vector
  const Shape w1s{4, 2, 3, 3}, w2s{4, 4, 3, 3}, w3s{z, 4, 3, 3};
  const std::int64_t n1 = numel(w1s), n2 = numel(w2s), n3 = numel(w3s);
  Tensor<double> flat({n1 + 4 + n2 + 4 + n3 + z});
  for (std::int64_t i = 0; i < flat.size(); ++i) flat[i] = rng.uniform(-0.3, 0.3);

  const auto f = [&](Tape<double>& t, Var<double> p) {
    std::int64_t off = 0;
    const auto take = [&](const Shape& s) {
      Var<double> v = slice(p, off, s);
      off += numel(s);
      return v;
    };
    Var<double> w1 = take(w1s), b1 = take({4}), w2 = take(w2s), b2 = take({4}), w3 = take(w3s),
                b3 = take({z});
    Var<double> x = relu(conv2d(t.constant(img), w1, b1, 1, 1));
    x = relu(conv2d(x, w2, b2, 1, 1));
    Var<double> logits = conv2d(x, w3, b3, 1, 1);
    return cross_entropy_loss(logits, labels);
  };
  CHECK(grad_check<double>(f, flat, 1e-5) <= 1e-4);
}
