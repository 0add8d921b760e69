#include <doctest.h>

#include <filesystem>
#include <set>

#include "mccl/data.hpp"
#include "test_util.hpp"

using namespace mccl;

namespace {
DatasetSpec tiny_spec() {
  DatasetSpec s;
  s.height = 32;
  s.width = 32;
  s.num_classes = 4;
  s.shapes_min = 1;
  s.shapes_max = 3;
  s.noise = 0.05;
  s.n_train = 4;
  s.n_val = 2;
  s.seed = 77;
  s.fill_palette_if_empty();
  return s;
}
}  // namespace

TEST_CASE("empty scene is all background") {
  DatasetSpec s = tiny_spec();
  s.shapes_min = 0;
  s.shapes_max = 0;
  const Sample sc = generate_scene(123, s);
  for (std::int64_t i = 0; i < sc.labels.size(); ++i) CHECK(sc.labels[i] == 0);
}

TEST_CASE("scene generation is byte-identical per (seed, spec)") {
  const DatasetSpec s = tiny_spec();
  const Sample a = generate_scene(5, s);
  const Sample b = generate_scene(5, s);
  CHECK(testutil::bitwise_equal(a.image, b.image));
  CHECK(testutil::bitwise_equal(a.labels, b.labels));
  const Sample c = generate_scene(6, s);
  CHECK(!testutil::bitwise_equal(a.image, c.image));
}

TEST_CASE("scenes with shapes contain at least two classes") {
  DatasetSpec s = tiny_spec();
  s.shapes_min = 1;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Sample sc = generate_scene(seed, s);
    std::set<std::int32_t> classes;
    for (std::int64_t i = 0; i < sc.labels.size(); ++i) {
      CHECK(sc.labels[i] >= 0);
      CHECK(sc.labels[i] < s.num_classes);
      classes.insert(sc.labels[i]);
    }
    CHECK(classes.size() >= 2);
  }
}

TEST_CASE("split cardinality, disjointness and determinism") {
  const SplitManifest all = make_split(10, 10, 3);
  CHECK(all.labeled.size() == 10);
  CHECK(all.unlabeled.empty());

  const SplitManifest m = make_split(400, 40, 3);
  CHECK(m.labeled.size() == 40);
  CHECK(m.unlabeled.size() == 360);
  std::set<int> seen(m.labeled.begin(), m.labeled.end());
  for (int id : m.unlabeled) CHECK(seen.insert(id).second);
  CHECK(seen.size() == 400);

  const SplitManifest m2 = make_split(400, 40, 3);
  CHECK(m.labeled == m2.labeled);
  CHECK_THROWS_AS(make_split(5, 6, 0), ContractViolation);
}

TEST_CASE("different split seeds differ almost always") {
  int differing = 0;
  const SplitManifest base = make_split(100, 20, 1000);
  for (std::uint64_t s = 0; s < 100; ++s) {
    if (make_split(100, 20, 2000 + s).labeled != base.labeled) ++differing;
  }
  CHECK(differing >= 99);
}

TEST_CASE("weak view flip semantics") {
  Rng rng(2);
  const Tensor<double> img = testutil::random_tensor({8, 6, 3}, rng, 0.0, 1.0);
  CHECK(testutil::bitwise_equal(weak_view(img, {false, false}), img));
  const GeoTransform hf{true, false};
  CHECK(testutil::bitwise_equal(weak_view(weak_view(img, hf), hf), img));
  const Tensor<double> vf = weak_view(img, {false, true});
  for (int c = 0; c < 3; ++c) CHECK(vf[(7 * 6 + 0) * 3 + c] == img[c]);  // (0,0) -> (H-1,0)
}

TEST_CASE("strong view equals weak view when photometric ops are disabled") {
  Rng rng(4);
  const Tensor<double> img = testutil::random_tensor({8, 8, 3}, rng, 0.1, 0.9);
  const GeoTransform geo{true, false};
  const PhotometricParams identity{};
  CHECK(testutil::bitwise_equal(apply_photometric(weak_view(img, geo), identity),
                                weak_view(img, geo)));
}

TEST_CASE("graying equalizes channels") {
  Rng rng(6);
  const Tensor<double> img = testutil::random_tensor({5, 5, 3}, rng, 0.2, 0.8);
  PhotometricParams p;
  p.gray = true;
  const Tensor<double> g = apply_photometric(img, p);
  for (std::int64_t i = 0; i < 25; ++i) {
    CHECK(g[i * 3] == g[i * 3 + 1]);
    CHECK(g[i * 3 + 1] == g[i * 3 + 2]);
  }
}

TEST_CASE("gaussian blur preserves the global mean") {
  Rng rng(8);
  const Tensor<double> img = testutil::random_tensor({16, 12, 3}, rng, 0.2, 0.8);
  for (double sigma : {0.1, 0.7, 2.0}) {
    const Tensor<double> b = gaussian_blur(img, sigma);
    // direct summation oracle on both sides
    double before = 0, after = 0;
    for (std::int64_t i = 0; i < img.size(); ++i) {
      before += img[i];
      after += b[i];
    }
    CHECK(std::abs(before / img.size() - after / img.size()) <= 1e-6);
  }
}

TEST_CASE("view pair alignment: photometric ops never move pixels") {
  DatasetSpec s = tiny_spec();
  const Sample sc = generate_scene(9, s);
  const ViewPair vp = make_view_pair(sc.image, 111, 222);
  const Tensor<std::int32_t> flipped = flip_labels(sc.labels, vp.geo);
  // the strong view was produced from the weak view in place, so any pixel
  // where weak == strong bit-exactly must be the same spatial location; more
  // usefully, both views share shape and geo
  CHECK(vp.weak.shape() == vp.strong.shape());
  CHECK(flipped.size() == sc.labels.size());
  // the weak view is exactly the geo flip of the source
  CHECK(testutil::bitwise_equal(vp.weak, weak_view(sc.image, vp.geo)));
  // strong view derives from the weak view with the same geo
  CHECK(testutil::bitwise_equal(vp.strong, strong_view(sc.image, vp.geo, 222)));
}

TEST_CASE("strong view pixels stay in the valid range") {
  DatasetSpec s = tiny_spec();
  const Sample sc = generate_scene(10, s);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Tensor<double> sv = strong_view(sc.image, {seed % 2 == 0, seed % 3 == 0}, seed);
    for (std::int64_t i = 0; i < sv.size(); ++i) {
      CHECK(sv[i] >= 0.0);
      CHECK(sv[i] <= 1.0);
    }
  }
}

TEST_CASE("dataset generation is a pure function of the spec") {
  const DatasetSpec s = tiny_spec();
  const Dataset a = generate_dataset(s);
  const Dataset b = generate_dataset(s);
  REQUIRE(a.train.size() == b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    CHECK(testutil::bitwise_equal(a.train[i].image, b.train[i].image));
    CHECK(testutil::bitwise_equal(a.train[i].labels, b.train[i].labels));
  }
}

TEST_CASE("dataset directory round-trip") {
  namespace fs = std::filesystem;
  const DatasetSpec s = tiny_spec();
  const Dataset d = generate_dataset(s);
  const std::string dir = (fs::temp_directory_path() / "mccl_test_ds").string();
  fs::remove_all(dir);
  save_dataset(dir, d);
  CHECK(fs::exists(fs::path(dir) / "meta.json"));
  CHECK(fs::exists(fs::path(dir) / "img_000000"));
  CHECK(fs::exists(fs::path(dir) / "lbl_000005"));  // 4 train + 2 val

  const Dataset back = load_dataset(dir);
  REQUIRE(back.train.size() == d.train.size());
  REQUIRE(back.val.size() == d.val.size());
  for (std::size_t i = 0; i < d.train.size(); ++i) {
    CHECK(testutil::bitwise_equal(back.train[i].image, d.train[i].image));
    CHECK(testutil::bitwise_equal(back.train[i].labels, d.train[i].labels));
  }
  fs::remove_all(dir);
}
