#pragma once

#include "mccl/rng.hpp"
#include "mccl/tape.hpp"

namespace mccl {

/// Toy segmentation network: three 3x3 conv + ReLU stages (strides 1,2,2)
/// into C feature channels, then a 1x1 conv to class logits upsampled x4.
/// The final encoder ReLU is load-bearing: downstream feature masking
/// thresholds channel means against a fraction of their maximum, which is
/// only well-posed for non-negative activations.
struct ArchConfig {
  int feature_channels = 32;
  int num_classes = 4;
  int hidden1 = 16;
  int hidden2 = 32;
};

template <typename S>
struct EncoderParams {
  Tensor<S> w1, b1;  // {h1,3,3,3}
  Tensor<S> w2, b2;  // {h2,h1,3,3}, stride 2
  Tensor<S> w3, b3;  // {C,h2,3,3}, stride 2
};

template <typename S>
struct DecoderParams {
  Tensor<S> w, b;  // {Z,C,1,1}
};

template <typename S>
struct SegNetParams {
  EncoderParams<S> enc;
  DecoderParams<S> dec;

  std::int64_t feature_channels() const { return enc.w3.extent(0); }
  std::int64_t num_classes() const { return dec.w.extent(0); }
};

/// Fixed parameter order used by checkpoints, SGD state and flattening.
template <typename S>
std::vector<Tensor<S>*> param_list(SegNetParams<S>& p) {
  return {&p.enc.w1, &p.enc.b1, &p.enc.w2, &p.enc.b2, &p.enc.w3, &p.enc.b3, &p.dec.w, &p.dec.b};
}

template <typename S>
std::vector<const Tensor<S>*> param_list(const SegNetParams<S>& p) {
  return {&p.enc.w1, &p.enc.b1, &p.enc.w2, &p.enc.b2, &p.enc.w3, &p.enc.b3, &p.dec.w, &p.dec.b};
}

/// Weights ~ uniform(-scale/sqrt(fan_in), +scale/sqrt(fan_in)), biases zero.
template <typename S>
SegNetParams<S> init_params(std::uint64_t seed, double scale, const ArchConfig& arch) {
  check(scale > 0, "init_params: scale must be > 0");
  Rng rng(mix64(seed, stream::kInit));
  const auto init_conv = [&rng, scale](std::int64_t cout, std::int64_t cin, std::int64_t k) {
    Tensor<S> w({cout, cin, k, k});
    const double bound = scale / std::sqrt(static_cast<double>(cin * k * k));
    for (std::int64_t i = 0; i < w.size(); ++i)
      w[i] = static_cast<S>(rng.uniform(-bound, bound));
    return w;
  };
  SegNetParams<S> p;
  p.enc.w1 = init_conv(arch.hidden1, 3, 3);
  p.enc.b1 = Tensor<S>({arch.hidden1});
  p.enc.w2 = init_conv(arch.hidden2, arch.hidden1, 3);
  p.enc.b2 = Tensor<S>({arch.hidden2});
  p.enc.w3 = init_conv(arch.feature_channels, arch.hidden2, 3);
  p.enc.b3 = Tensor<S>({arch.feature_channels});
  p.dec.w = init_conv(arch.num_classes, arch.feature_channels, 1);
  p.dec.b = Tensor<S>({arch.num_classes});
  return p;
}

namespace detail {
template <typename S>
void check_encode_input(const Tensor<S>& images) {
  check(images.rank() == 4 && images.extent(1) == 3, "encode: expected images {B,3,H,W}");
  check(images.extent(2) % 4 == 0 && images.extent(3) % 4 == 0,
        "encode: spatial extents must be divisible by 4");
}
}  // namespace detail

// Value-only forward (weak branch, evaluation).

template <typename S>
Tensor<S> encode(const Tensor<S>& images, const EncoderParams<S>& p) {
  detail::check_encode_input(images);
  Tensor<S> x = relu(conv2d(images, p.w1, p.b1, 1, 1));
  x = relu(conv2d(x, p.w2, p.b2, 2, 1));
  return relu(conv2d(x, p.w3, p.b3, 2, 1));
}

template <typename S>
Tensor<S> decode_logits(const Tensor<S>& features, const DecoderParams<S>& p) {
  return bilinear_upsample(conv2d(features, p.w, p.b, 1, 0), 4);
}

/// Per-pixel class probabilities over {B,Z,H,W}.
template <typename S>
Tensor<S> decode(const Tensor<S>& features, const DecoderParams<S>& p) {
  return softmax(decode_logits(features, p), 1);
}

// Tape forward (anything that receives gradients).

template <typename S>
struct SegNetVars {
  Var<S> w1, b1, w2, b2, w3, b3, dw, db;
};

template <typename S>
SegNetVars<S> register_params(Tape<S>& tape, const SegNetParams<S>& p) {
  return {tape.input(p.enc.w1, "enc.w1"), tape.input(p.enc.b1, "enc.b1"),
          tape.input(p.enc.w2, "enc.w2"), tape.input(p.enc.b2, "enc.b2"),
          tape.input(p.enc.w3, "enc.w3"), tape.input(p.enc.b3, "enc.b3"),
          tape.input(p.dec.w, "dec.w"),   tape.input(p.dec.b, "dec.b")};
}

template <typename S>
std::vector<Var<S>> var_list(const SegNetVars<S>& v) {
  return {v.w1, v.b1, v.w2, v.b2, v.w3, v.b3, v.dw, v.db};
}

template <typename S>
Var<S> encode(Var<S> images, const SegNetVars<S>& v) {
  detail::check_encode_input(images.value());
  Var<S> x = relu(conv2d(images, v.w1, v.b1, 1, 1));
  x = relu(conv2d(x, v.w2, v.b2, 2, 1));
  return relu(conv2d(x, v.w3, v.b3, 2, 1));
}

template <typename S>
Var<S> decode_logits(Var<S> features, const SegNetVars<S>& v) {
  return bilinear_upsample(conv2d(features, v.dw, v.db, 1, 0), 4);
}

template <typename S>
Var<S> decode(Var<S> features, const SegNetVars<S>& v) {
  return softmax_channel(decode_logits(features, v));
}

/// Rebuilds the parameter pack as slices of one flattened rank-1 Var, in
/// param_list order (gradient checking of whole objectives).
template <typename S>
SegNetVars<S> params_from_flat(Var<S> flat, const SegNetParams<S>& like) {
  const auto parts = param_list(like);
  std::vector<Var<S>> vars;
  std::int64_t off = 0;
  for (const auto* t : parts) {
    vars.push_back(slice(flat, off, t->shape()));
    off += t->size();
  }
  check(off == flat.value().size(), "params_from_flat: vector length mismatch");
  return {vars[0], vars[1], vars[2], vars[3], vars[4], vars[5], vars[6], vars[7]};
}

// Flattened parameter vector (gradient checking).

template <typename S>
Tensor<S> flatten_params(const SegNetParams<S>& p) {
  std::int64_t n = 0;
  for (const auto* t : param_list(p)) n += t->size();
  Tensor<S> flat({n});
  std::int64_t off = 0;
  for (const auto* t : param_list(p)) {
    std::copy(t->data(), t->data() + t->size(), flat.data() + off);
    off += t->size();
  }
  return flat;
}

/// Inverse of flatten_params; shapes are taken from `like`.
template <typename S>
SegNetParams<S> unflatten_params(const Tensor<S>& flat, const SegNetParams<S>& like) {
  SegNetParams<S> p = like;
  std::int64_t off = 0;
  for (auto* t : param_list(p)) {
    check(off + t->size() <= flat.size(), "unflatten_params: vector too short");
    std::copy(flat.data() + off, flat.data() + off + t->size(), t->data());
    off += t->size();
  }
  check(off == flat.size(), "unflatten_params: vector length mismatch");
  return p;
}

}  // namespace mccl
