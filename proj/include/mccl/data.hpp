#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "mccl/config.hpp"
#include "mccl/rng.hpp"
#include "mccl/serialize.hpp"
#include "mccl/tensor_ops.hpp"

namespace mccl {

// ---------------------------------------------------------------------------
// Dataset specification

struct DatasetSpec {
  std::int64_t height = 64;
  std::int64_t width = 64;
  int num_classes = 4;  // class 0 is background
  int shapes_min = 1;
  int shapes_max = 3;
  double noise = 0.08;  // additive gaussian pixel noise, sigma
  int n_train = 400;
  int n_val = 50;
  std::uint64_t seed = 1234;
  std::vector<std::array<double, 3>> palette;  // base colour per class

  static std::vector<std::array<double, 3>> default_palette(int num_classes) {
    std::vector<std::array<double, 3>> p;
    p.push_back({0.24, 0.24, 0.27});  // background
    for (int k = 1; k < num_classes; ++k) {
      const double hue = 2.0 * M_PI * (k - 1) / std::max(1, num_classes - 1);
      p.push_back({0.5 + 0.28 * std::cos(hue), 0.5 + 0.28 * std::cos(hue - 2.0 * M_PI / 3.0),
                   0.5 + 0.28 * std::cos(hue + 2.0 * M_PI / 3.0)});
    }
    return p;
  }

  void fill_palette_if_empty() {
    if (palette.empty()) palette = default_palette(num_classes);
  }
};

inline DatasetSpec dataset_spec_from(const ExperimentConfig& c) {
  DatasetSpec s;
  s.height = c.image_size;
  s.width = c.image_size;
  s.num_classes = c.num_classes;
  s.shapes_min = c.data.shapes_min;
  s.shapes_max = c.data.shapes_max;
  s.noise = c.data.noise;
  s.n_train = c.data.n_train;
  s.n_val = c.data.n_val;
  s.seed = c.data.seed;
  s.fill_palette_if_empty();
  return s;
}

// ---------------------------------------------------------------------------
// Scene generation

struct Sample {
  Tensor<double> image;        // {H,W,3}, values in [0,1]
  Tensor<std::int32_t> labels; // {H,W}, values in [0,Z)
};

namespace detail {

inline void paint(Tensor<double>& img, Tensor<std::int32_t>& lbl, std::int64_t y, std::int64_t x,
                  int k, const std::array<double, 3>& color) {
  const std::int64_t w = lbl.extent(1);
  lbl[y * w + x] = k;
  for (int c = 0; c < 3; ++c) img[(y * w + x) * 3 + c] = color[c];
}

inline double tri_side(double px, double py, double ax, double ay, double bx, double by) {
  return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
}

}  // namespace detail

/// Renders one synthetic scene: a background plus a few coloured shapes
/// (circle / rectangle / triangle, one geometry family per class). The label
/// map matches the rendered geometry exactly; pixel noise touches only the
/// image. Byte-identical output for identical (seed, spec).
inline Sample generate_scene(std::uint64_t seed, const DatasetSpec& spec) {
  check(spec.num_classes >= 2, "generate_scene: need at least 2 classes");
  check(static_cast<int>(spec.palette.size()) >= spec.num_classes,
        "generate_scene: palette smaller than class count");
  const std::int64_t h = spec.height, w = spec.width;
  Rng rng(mix64(seed, stream::kScene));

  Sample s{Tensor<double>({h, w, 3}), Tensor<std::int32_t>({h, w})};
  std::array<double, 3> bg = spec.palette[0];
  for (auto& c : bg) c = std::clamp(c + rng.uniform(-0.04, 0.04), 0.0, 1.0);
  for (std::int64_t p = 0; p < h * w; ++p)
    for (int c = 0; c < 3; ++c) s.image[p * 3 + c] = bg[c];

  const std::int64_t n_shapes = rng.uniform_int(spec.shapes_min, spec.shapes_max);
  const double max_r = std::max(5.0, static_cast<double>(std::min(h, w)) / 4.0);
  for (std::int64_t i = 0; i < n_shapes; ++i) {
    const int k = static_cast<int>(rng.uniform_int(1, spec.num_classes - 1));
    std::array<double, 3> color = spec.palette[k];
    for (auto& c : color) c = std::clamp(c + rng.uniform(-0.12, 0.12), 0.0, 1.0);
    const double r = rng.uniform(4.0, max_r);
    const double cy = rng.uniform(r, static_cast<double>(h - 1) - r);
    const double cx = rng.uniform(r, static_cast<double>(w - 1) - r);

    switch ((k - 1) % 3) {
      case 0: {  // circle
        for (std::int64_t y = 0; y < h; ++y)
          for (std::int64_t x = 0; x < w; ++x)
            if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r)
              detail::paint(s.image, s.labels, y, x, k, color);
        break;
      }
      case 1: {  // axis-aligned rectangle
        const double ry = rng.uniform(3.0, r);
        for (std::int64_t y = 0; y < h; ++y)
          for (std::int64_t x = 0; x < w; ++x)
            if (std::abs(y - cy) <= ry && std::abs(x - cx) <= r)
              detail::paint(s.image, s.labels, y, x, k, color);
        break;
      }
      default: {  // near-equilateral triangle
        const double base = rng.uniform(0.0, 2.0 * M_PI);
        double vx[3], vy[3];
        for (int v = 0; v < 3; ++v) {
          const double a = base + 2.0 * M_PI * v / 3.0 + rng.uniform(-0.35, 0.35);
          vy[v] = cy + r * std::sin(a);
          vx[v] = cx + r * std::cos(a);
        }
        for (std::int64_t y = 0; y < h; ++y)
          for (std::int64_t x = 0; x < w; ++x) {
            const double d0 = detail::tri_side(x, y, vx[0], vy[0], vx[1], vy[1]);
            const double d1 = detail::tri_side(x, y, vx[1], vy[1], vx[2], vy[2]);
            const double d2 = detail::tri_side(x, y, vx[2], vy[2], vx[0], vy[0]);
            const bool neg = d0 < 0 || d1 < 0 || d2 < 0;
            const bool pos = d0 > 0 || d1 > 0 || d2 > 0;
            if (!(neg && pos)) detail::paint(s.image, s.labels, y, x, k, color);
          }
        break;
      }
    }
  }

  if (spec.noise > 0)
    for (std::int64_t i = 0; i < s.image.size(); ++i)
      s.image[i] = std::clamp(s.image[i] + spec.noise * rng.normal(), 0.0, 1.0);
  return s;
}

// ---------------------------------------------------------------------------
// Labeled / unlabeled split

struct SplitManifest {
  std::vector<int> order;      // all training sample ids
  std::vector<int> labeled;    // S_l, sorted
  std::vector<int> unlabeled;  // S_u, sorted
  std::uint64_t seed = 0;
};

/// Uniform labeled subset without replacement (Fisher-Yates prefix).
inline SplitManifest make_split(int n_total, int n_labeled, std::uint64_t seed) {
  check(n_labeled > 0 && n_labeled <= n_total, "make_split: need 0 < n_labeled <= n_total");
  SplitManifest m;
  m.seed = seed;
  m.order.resize(n_total);
  for (int i = 0; i < n_total; ++i) m.order[i] = i;

  std::vector<int> ids = m.order;
  Rng rng(mix64(seed, stream::kSplit));
  for (int i = n_total - 1; i > 0; --i)
    std::swap(ids[i], ids[rng.uniform_int(0, i)]);
  m.labeled.assign(ids.begin(), ids.begin() + n_labeled);
  m.unlabeled.assign(ids.begin() + n_labeled, ids.end());
  std::sort(m.labeled.begin(), m.labeled.end());
  std::sort(m.unlabeled.begin(), m.unlabeled.end());
  return m;
}

// ---------------------------------------------------------------------------
// Views and augmentation

struct GeoTransform {
  bool hflip = false;
  bool vflip = false;
};

struct PhotometricParams {
  std::array<double, 3> scale{1.0, 1.0, 1.0};
  std::array<double, 3> shift{0.0, 0.0, 0.0};
  bool gray = false;
  bool blur = false;
  double sigma = 0.0;
};

/// One unlabeled image's spatially aligned views: pixel (i,j) of `weak`
/// corresponds to pixel (i,j) of `strong` because both share `geo` and the
/// photometric ops never move pixels.
struct ViewPair {
  Tensor<double> weak;
  Tensor<double> strong;
  GeoTransform geo;
  PhotometricParams photo;
};

inline GeoTransform sample_geo(Rng& rng) { return GeoTransform{rng.bernoulli(0.5), rng.bernoulli(0.5)}; }

inline PhotometricParams sample_photometric(Rng& rng) {
  PhotometricParams p;
  for (int c = 0; c < 3; ++c) p.scale[c] = rng.uniform(0.6, 1.4);
  for (int c = 0; c < 3; ++c) p.shift[c] = rng.uniform(-0.2, 0.2);
  p.gray = rng.bernoulli(0.2);
  p.blur = rng.bernoulli(0.5);
  p.sigma = p.blur ? rng.uniform(0.1, 2.0) : 0.0;
  return p;
}

template <typename T>
Tensor<T> flip_image(const Tensor<T>& img, const GeoTransform& geo) {
  check(img.rank() == 3 && img.extent(2) == 3, "flip_image: expected {H,W,3}");
  const std::int64_t h = img.extent(0), w = img.extent(1);
  Tensor<T> out(img.shape());
  for (std::int64_t y = 0; y < h; ++y) {
    const std::int64_t sy = geo.vflip ? h - 1 - y : y;
    for (std::int64_t x = 0; x < w; ++x) {
      const std::int64_t sx = geo.hflip ? w - 1 - x : x;
      for (int c = 0; c < 3; ++c) out[(y * w + x) * 3 + c] = img[(sy * w + sx) * 3 + c];
    }
  }
  return out;
}

inline Tensor<std::int32_t> flip_labels(const Tensor<std::int32_t>& lbl, const GeoTransform& geo) {
  check(lbl.rank() == 2, "flip_labels: expected {H,W}");
  const std::int64_t h = lbl.extent(0), w = lbl.extent(1);
  Tensor<std::int32_t> out(lbl.shape());
  for (std::int64_t y = 0; y < h; ++y) {
    const std::int64_t sy = geo.vflip ? h - 1 - y : y;
    for (std::int64_t x = 0; x < w; ++x)
      out[y * w + x] = lbl[sy * w + (geo.hflip ? w - 1 - x : x)];
  }
  return out;
}

/// Weak augmentation: flips only.
inline Tensor<double> weak_view(const Tensor<double>& image, const GeoTransform& geo) {
  return flip_image(image, geo);
}

/// Separable gaussian blur with duplicate-edge (symmetric) padding. This
/// padding preserves the global mean for any symmetric normalized kernel.
inline Tensor<double> gaussian_blur(const Tensor<double>& img, double sigma) {
  const std::int64_t radius = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double sum = 0;
  for (std::int64_t i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    sum += k[i + radius];
  }
  for (auto& v : k) v /= sum;

  const std::int64_t h = img.extent(0), w = img.extent(1);
  const auto mirror = [](std::int64_t i, std::int64_t n) {
    if (i < 0) i = -1 - i;
    if (i >= n) i = 2 * n - 1 - i;
    return i;
  };
  Tensor<double> tmp(img.shape()), out(img.shape());
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = 0;
        for (std::int64_t d = -radius; d <= radius; ++d)
          acc += k[d + radius] * img[(y * w + mirror(x + d, w)) * 3 + c];
        tmp[(y * w + x) * 3 + c] = acc;
      }
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = 0;
        for (std::int64_t d = -radius; d <= radius; ++d)
          acc += k[d + radius] * tmp[(mirror(y + d, h) * w + x) * 3 + c];
        out[(y * w + x) * 3 + c] = acc;
      }
  return out;
}

/// Photometric distortions: per-channel affine jitter, optional graying,
/// optional gaussian blur, then clamp to [0,1]. Never moves pixels.
inline Tensor<double> apply_photometric(const Tensor<double>& img, const PhotometricParams& p) {
  Tensor<double> out(img.shape());
  const std::int64_t n = img.size() / 3;
  for (std::int64_t i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) out[i * 3 + c] = img[i * 3 + c] * p.scale[c] + p.shift[c];
  if (p.gray) {
    for (std::int64_t i = 0; i < n; ++i) {
      const double m = (out[i * 3] + out[i * 3 + 1] + out[i * 3 + 2]) / 3.0;
      out[i * 3] = out[i * 3 + 1] = out[i * 3 + 2] = m;
    }
  }
  if (p.blur) out = gaussian_blur(out, p.sigma);
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = std::clamp(out[i], 0.0, 1.0);
  return out;
}

/// Strong augmentation: the SAME geometric transform as the weak view,
/// followed by seeded photometric distortions.
inline Tensor<double> strong_view(const Tensor<double>& image, const GeoTransform& geo,
                                  std::uint64_t seed) {
  Rng rng(seed);
  return apply_photometric(weak_view(image, geo), sample_photometric(rng));
}

inline ViewPair make_view_pair(const Tensor<double>& image, std::uint64_t geo_seed,
                               std::uint64_t photo_seed) {
  Rng grng(geo_seed);
  ViewPair vp;
  vp.geo = sample_geo(grng);
  vp.weak = weak_view(image, vp.geo);
  Rng prng(photo_seed);
  vp.photo = sample_photometric(prng);
  vp.strong = apply_photometric(vp.weak, vp.photo);
  return vp;
}

// ---------------------------------------------------------------------------
// Dataset assembly and directory layout

struct Dataset {
  DatasetSpec spec;
  std::vector<Sample> train;
  std::vector<Sample> val;
};

/// Train samples use scene seeds 0..n_train-1, validation continues after.
inline Dataset generate_dataset(const DatasetSpec& spec_in) {
  DatasetSpec spec = spec_in;
  spec.fill_palette_if_empty();
  Dataset d;
  d.spec = spec;
  d.train.reserve(spec.n_train);
  d.val.reserve(spec.n_val);
  for (int i = 0; i < spec.n_train; ++i) d.train.push_back(generate_scene(mix64(spec.seed, i), spec));
  for (int i = 0; i < spec.n_val; ++i)
    d.val.push_back(generate_scene(mix64(spec.seed, spec.n_train + i), spec));
  return d;
}

inline Json spec_to_json(const DatasetSpec& s) {
  Json j;
  j["height"] = s.height;
  j["width"] = s.width;
  j["num_classes"] = s.num_classes;
  j["shapes_min"] = s.shapes_min;
  j["shapes_max"] = s.shapes_max;
  j["noise"] = s.noise;
  j["n_train"] = s.n_train;
  j["n_val"] = s.n_val;
  j["seed"] = s.seed;
  j["palette"] = s.palette;
  Json names = Json::array();
  const char* kGeom[3] = {"circle", "rectangle", "triangle"};
  names.push_back("background");
  for (int k = 1; k < s.num_classes; ++k)
    names.push_back(std::string(kGeom[(k - 1) % 3]) + "_" + std::to_string(k));
  j["class_names"] = names;
  return j;
}

inline DatasetSpec spec_from_json(const Json& j) {
  DatasetSpec s;
  const auto get = [&j](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("height", s.height);
  get("width", s.width);
  if (j.contains("image_size")) {
    s.height = j.at("image_size").get<std::int64_t>();
    s.width = s.height;
  }
  get("num_classes", s.num_classes);
  get("shapes_min", s.shapes_min);
  get("shapes_max", s.shapes_max);
  get("noise", s.noise);
  get("n_train", s.n_train);
  get("n_val", s.n_val);
  get("seed", s.seed);
  if (j.contains("palette")) s.palette = j.at("palette").get<std::vector<std::array<double, 3>>>();
  s.fill_palette_if_empty();
  return s;
}

namespace detail {
inline std::string sample_name(const char* prefix, int idx) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s_%06d", prefix, idx);
  return buf;
}
}  // namespace detail

/// Directory layout: meta.json plus img_%06d / lbl_%06d tensor files;
/// train samples come first, validation samples follow.
inline void save_dataset(const std::string& dir, const Dataset& d) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  {
    std::ofstream os(fs::path(dir) / "meta.json");
    check(os.is_open(), "cannot write meta.json in " + dir);
    os << spec_to_json(d.spec).dump(2) << "\n";
  }
  const auto save_one = [&dir](const Sample& s, int idx) {
    save_tensor_file((fs::path(dir) / detail::sample_name("img", idx)).string(), s.image);
    save_tensor_file((fs::path(dir) / detail::sample_name("lbl", idx)).string(), s.labels);
  };
  int idx = 0;
  for (const auto& s : d.train) save_one(s, idx++);
  for (const auto& s : d.val) save_one(s, idx++);
}

inline Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream is(fs::path(dir) / "meta.json");
  check(is.is_open(), "cannot open meta.json in " + dir);
  Json j;
  is >> j;
  Dataset d;
  d.spec = spec_from_json(j);
  const auto load_one = [&dir](int idx) {
    Sample s;
    s.image = load_tensor_file<double>((fs::path(dir) / detail::sample_name("img", idx)).string());
    s.labels = load_tensor_file<std::int32_t>((fs::path(dir) / detail::sample_name("lbl", idx)).string());
    return s;
  };
  int idx = 0;
  for (int i = 0; i < d.spec.n_train; ++i) d.train.push_back(load_one(idx++));
  for (int i = 0; i < d.spec.n_val; ++i) d.val.push_back(load_one(idx++));
  return d;
}

/// {H,W,3} image in [0,1] -> {3,H,W} network layout at scalar type S.
template <typename S>
Tensor<S> chw_from_hwc(const Tensor<double>& img) {
  const std::int64_t h = img.extent(0), w = img.extent(1);
  Tensor<S> out({3, h, w});
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        out[(c * h + y) * w + x] = static_cast<S>(img[(y * w + x) * 3 + c]);
  return out;
}

}  // namespace mccl
