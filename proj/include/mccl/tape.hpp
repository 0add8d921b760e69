#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "mccl/tensor_ops.hpp"

namespace mccl {

template <typename S>
class Tape;

/// Handle to a node on a tape. Cheap to copy; valid as long as the tape lives.
template <typename S>
struct Var {
  Tape<S>* tape = nullptr;
  std::int32_t id = -1;

  const Tensor<S>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
};

/// Reverse-mode gradient tape. Records primitive operations with parent
/// references; replaying a graph construction with identical inputs (and
/// identical seeds for any stochastic tensors fed in as constants)
/// reproduces identical forward values bit-for-bit.
///
/// Gradient accumulation for one tape is confined to a single thread.
/// Fused operations register themselves through push(); their backward
/// closure reads the upstream gradient with grad_value() and deposits into
/// parents with add_grad().
template <typename S>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::int32_t)>;

  Var<S> input(Tensor<S> v, const char* name = "input") {
    return emplace(std::move(v), {}, name, true, nullptr);
  }

  Var<S> constant(Tensor<S> v, const char* name = "const") {
    return emplace(std::move(v), {}, name, false, nullptr);
  }

  /// Stop-gradient: the value flows, the gradient does not.
  Var<S> detach(Var<S> v) { return constant(v.value(), "detach"); }

  /// Records a fused operation. needs_grad is inherited from the parents.
  Var<S> push(Tensor<S> value, std::vector<std::int32_t> parents, const char* name,
              BackwardFn back) {
    bool ng = false;
    for (auto p : parents) ng = ng || nodes_[p].needs_grad;
    return emplace(std::move(value), std::move(parents), name, ng, ng ? std::move(back) : nullptr);
  }

  const Tensor<S>& value(std::int32_t id) const { return nodes_[id].value; }
  bool needs_grad(std::int32_t id) const { return nodes_[id].needs_grad; }
  std::int64_t size() const { return static_cast<std::int64_t>(nodes_.size()); }

  /// Upstream gradient of a node during backward (empty tensor if none).
  const Tensor<S>& grad_value(std::int32_t id) const { return grads_[id]; }

  void add_grad(std::int32_t id, const Tensor<S>& g) {
    if (!nodes_[id].needs_grad) return;
    if (grads_[id].empty())
      grads_[id] = g;
    else
      grads_[id].array() += g.array();
  }

  void backward(Var<S> root) {
    check(root.value().size() == 1, "backward: root must be scalar");
    grads_.assign(nodes_.size(), Tensor<S>{});
    grads_[root.id] = Tensor<S>::ones(root.value().shape());
    for (std::int32_t i = root.id; i >= 0; --i) {
      if (grads_[i].empty() || !nodes_[i].back) continue;
      nodes_[i].back(*this, i);
    }
  }

  /// Gradient of `v` after backward(); zeros if no path reached it.
  Tensor<S> grad(Var<S> v) const {
    if (static_cast<std::size_t>(v.id) < grads_.size() && !grads_[v.id].empty())
      return grads_[v.id];
    return Tensor<S>(v.value().shape());
  }

  /// Diagnostic scan used by gradient checking.
  void throw_if_nonfinite() const {
    for (const auto& n : nodes_)
      if (!n.value.all_finite())
        throw NonFiniteError(std::string("non-finite value produced by primitive '") + n.name +
                             "'");
  }

 private:
  struct Node {
    Tensor<S> value;
    std::vector<std::int32_t> parents;
    const char* name;
    bool needs_grad;
    BackwardFn back;
  };

  Var<S> emplace(Tensor<S> value, std::vector<std::int32_t> parents, const char* name,
                 bool needs_grad, BackwardFn back) {
    nodes_.push_back(Node{std::move(value), std::move(parents), name, needs_grad, std::move(back)});
    grads_.emplace_back();
    return Var<S>{this, static_cast<std::int32_t>(nodes_.size() - 1)};
  }

  std::vector<Node> nodes_;
  std::vector<Tensor<S>> grads_;
};

// ---------------------------------------------------------------------------
// Primitive operations

namespace detail {
template <typename S>
void check_same_tape(Var<S> a, Var<S> b, const char* op) {
  check(a.tape == b.tape, std::string(op) + ": operands on different tapes");
}
}  // namespace detail

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  detail::check_same_tape(a, b, "add");
  check(a.value().same_shape(b.value()), "add: shape mismatch");
  Tensor<S> v(a.shape());
  v.array() = a.value().array() + b.value().array();
  const auto pa = a.id, pb = b.id;
  return a.tape->push(std::move(v), {pa, pb}, "add", [pa, pb](Tape<S>& t, std::int32_t self) {
    t.add_grad(pa, t.grad_value(self));
    t.add_grad(pb, t.grad_value(self));
  });
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  detail::check_same_tape(a, b, "sub");
  check(a.value().same_shape(b.value()), "sub: shape mismatch");
  Tensor<S> v(a.shape());
  v.array() = a.value().array() - b.value().array();
  const auto pa = a.id, pb = b.id;
  return a.tape->push(std::move(v), {pa, pb}, "sub", [pa, pb](Tape<S>& t, std::int32_t self) {
    const auto& g = t.grad_value(self);
    t.add_grad(pa, g);
    if (t.needs_grad(pb)) {
      Tensor<S> ng(g.shape());
      ng.array() = -g.array();
      t.add_grad(pb, ng);
    }
  });
}

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  detail::check_same_tape(a, b, "mul");
  check(a.value().same_shape(b.value()), "mul: shape mismatch");
  Tensor<S> v(a.shape());
  v.array() = a.value().array() * b.value().array();
  const auto pa = a.id, pb = b.id;
  return a.tape->push(std::move(v), {pa, pb}, "mul", [pa, pb](Tape<S>& t, std::int32_t self) {
    const auto& g = t.grad_value(self);
    if (t.needs_grad(pa)) {
      Tensor<S> ga(g.shape());
      ga.array() = g.array() * t.value(pb).array();
      t.add_grad(pa, ga);
    }
    if (t.needs_grad(pb)) {
      Tensor<S> gb(g.shape());
      gb.array() = g.array() * t.value(pa).array();
      t.add_grad(pb, gb);
    }
  });
}

template <typename S>
Var<S> scale(Var<S> a, double c) {
  Tensor<S> v(a.shape());
  v.array() = a.value().array() * static_cast<S>(c);
  const auto pa = a.id;
  return a.tape->push(std::move(v), {pa}, "scale", [pa, c](Tape<S>& t, std::int32_t self) {
    Tensor<S> g(t.grad_value(self).shape());
    g.array() = t.grad_value(self).array() * static_cast<S>(c);
    t.add_grad(pa, g);
  });
}

template <typename S>
Var<S> add_scalar(Var<S> a, double c) {
  Tensor<S> v(a.shape());
  v.array() = a.value().array() + static_cast<S>(c);
  const auto pa = a.id;
  return a.tape->push(std::move(v), {pa}, "add_scalar", [pa](Tape<S>& t, std::int32_t self) {
    t.add_grad(pa, t.grad_value(self));
  });
}

/// Contiguous sub-range of a rank-1 tensor, reshaped to `shape`; the
/// gradient scatters back into the range.
template <typename S>
Var<S> slice(Var<S> x, std::int64_t offset, Shape shape) {
  check(x.value().rank() == 1, "slice: expected a rank-1 tensor");
  const std::int64_t n = numel(shape);
  check(offset >= 0 && offset + n <= x.value().size(), "slice: range out of bounds");
  Tensor<S> v(shape);
  std::copy(x.value().data() + offset, x.value().data() + offset + n, v.data());
  const auto px = x.id;
  return x.tape->push(std::move(v), {px}, "slice",
                      [px, offset](Tape<S>& t, std::int32_t self) {
                        const Tensor<S>& g = t.grad_value(self);
                        Tensor<S> gx(t.value(px).shape());
                        std::copy(g.data(), g.data() + g.size(), gx.data() + offset);
                        t.add_grad(px, gx);
                      });
}

/// Shape-only view; gradients are reshaped back.
template <typename S>
Var<S> reshape(Var<S> x, Shape shape) {
  const auto px = x.id;
  const Shape in_shape = x.value().shape();
  return x.tape->push(x.value().reshaped(std::move(shape)), {px}, "reshape",
                      [px, in_shape](Tape<S>& t, std::int32_t self) {
                        t.add_grad(px, t.grad_value(self).reshaped(in_shape));
                      });
}

template <typename S>
Var<S> relu(Var<S> x) {
  const auto px = x.id;
  return x.tape->push(relu(x.value()), {px}, "relu", [px](Tape<S>& t, std::int32_t self) {
    const auto& g = t.grad_value(self);
    Tensor<S> gx(g.shape());
    gx.array() = (t.value(px).array() > S(0)).select(g.array(), S(0));
    t.add_grad(px, gx);
  });
}

template <typename S>
Var<S> mean_all(Var<S> x) {
  const auto px = x.id;
  const double inv_n = 1.0 / static_cast<double>(x.value().size());
  return x.tape->push(Tensor<S>::scalar(mean_all(x.value())), {px}, "mean_all",
                      [px, inv_n](Tape<S>& t, std::int32_t self) {
                        const S g = t.grad_value(self).item() * static_cast<S>(inv_n);
                        t.add_grad(px, Tensor<S>::full(t.value(px).shape(), g));
                      });
}

template <typename S>
Var<S> conv2d(Var<S> x, Var<S> w, Var<S> b, std::int64_t stride, std::int64_t pad) {
  detail::check_same_tape(x, w, "conv2d");
  detail::check_same_tape(x, b, "conv2d");
  Tensor<S> v = conv2d(x.value(), w.value(), b.value(), stride, pad);
  const auto px = x.id, pw = w.id, pb = b.id;
  return x.tape->push(std::move(v), {px, pw, pb}, "conv2d",
                      [px, pw, pb, stride, pad](Tape<S>& t, std::int32_t self) {
                        auto g = conv2d_backward(t.value(px), t.value(pw), t.grad_value(self),
                                                 stride, pad, t.needs_grad(px), t.needs_grad(pw));
                        if (t.needs_grad(px)) t.add_grad(px, g.gx);
                        if (t.needs_grad(pw)) t.add_grad(pw, g.gw);
                        if (t.needs_grad(pb)) t.add_grad(pb, g.gb);
                      });
}

template <typename S>
Var<S> bilinear_upsample(Var<S> x, std::int64_t factor) {
  const auto px = x.id;
  const std::int64_t h = x.value().extent(2), w = x.value().extent(3);
  return x.tape->push(bilinear_upsample(x.value(), factor), {px}, "bilinear_upsample",
                      [px, h, w, factor](Tape<S>& t, std::int32_t self) {
                        t.add_grad(px, bilinear_upsample_backward(t.grad_value(self), h, w, factor));
                      });
}

/// Softmax over the class axis of {B,Z,H,W}.
template <typename S>
Var<S> softmax_channel(Var<S> x) {
  check(x.value().rank() == 4, "softmax_channel: expected {B,Z,H,W}");
  const auto px = x.id;
  return x.tape->push(softmax(x.value(), 1), {px}, "softmax_channel",
                      [px](Tape<S>& t, std::int32_t self) {
                        const Tensor<S>& p = t.value(self);
                        const Tensor<S>& g = t.grad_value(self);
                        const auto& s = p.shape();
                        const std::int64_t bs = s[0], z = s[1], inner = s[2] * s[3];
                        Tensor<S> gx(p.shape());
                        for (std::int64_t i = 0; i < bs; ++i) {
                          for (std::int64_t pos = 0; pos < inner; ++pos) {
                            const std::int64_t base = i * z * inner + pos;
                            S dot = 0;
                            for (std::int64_t k = 0; k < z; ++k)
                              dot += g[base + k * inner] * p[base + k * inner];
                            for (std::int64_t k = 0; k < z; ++k)
                              gx[base + k * inner] =
                                  p[base + k * inner] * (g[base + k * inner] - dot);
                          }
                        }
                        t.add_grad(px, gx);
                      });
}

/// Mean over all entries of (x - target)^2 against a fixed target.
template <typename S>
Var<S> mse_against(Var<S> x, const Tensor<S>& target) {
  check(x.value().same_shape(target), "mse_against: shape mismatch");
  const auto px = x.id;
  Tensor<S> tgt = target;
  const double inv_n = 1.0 / static_cast<double>(target.size());
  Tensor<S> v = Tensor<S>::scalar(mean_squared_diff(x.value(), target));
  return x.tape->push(std::move(v), {px}, "mse",
                      [px, tgt = std::move(tgt), inv_n](Tape<S>& t, std::int32_t self) {
                        const S g = t.grad_value(self).item();
                        Tensor<S> gx(tgt.shape());
                        gx.array() =
                            (t.value(px).array() - tgt.array()) * (S(2) * g * static_cast<S>(inv_n));
                        t.add_grad(px, gx);
                      });
}

/// Mean cross-entropy of logits {B,Z,H,W} against integer labels {B,H,W},
/// computed through a stable log-sum-exp.
template <typename S>
Var<S> cross_entropy_loss(Var<S> logits, const Tensor<std::int32_t>& labels) {
  const Tensor<S>& x = logits.value();
  check(x.rank() == 4, "cross_entropy_loss: expected logits {B,Z,H,W}");
  const std::int64_t bs = x.extent(0), z = x.extent(1), inner = x.extent(2) * x.extent(3);
  check(labels.rank() == 3 && labels.extent(0) == bs &&
            labels.extent(1) * labels.extent(2) == inner,
        "cross_entropy_loss: label shape mismatch");
  for (std::int64_t i = 0; i < labels.size(); ++i)
    check(labels[i] >= 0 && labels[i] < z, "cross_entropy_loss: label out of range [0,Z)");

  const std::int64_t npix = bs * inner;
  double total = 0;
  for (std::int64_t i = 0; i < bs; ++i) {
    for (std::int64_t pos = 0; pos < inner; ++pos) {
      const std::int64_t base = i * z * inner + pos;
      S mx = x[base];
      for (std::int64_t k = 1; k < z; ++k) mx = std::max(mx, x[base + k * inner]);
      double sum = 0;
      for (std::int64_t k = 0; k < z; ++k)
        sum += std::exp(static_cast<double>(x[base + k * inner] - mx));
      const double lse = static_cast<double>(mx) + std::log(sum);
      total += lse - static_cast<double>(x[base + labels[i * inner + pos] * inner]);
    }
  }
  const auto px = logits.id;
  Tensor<std::int32_t> lbl = labels;
  return logits.tape->push(
      Tensor<S>::scalar(static_cast<S>(total / static_cast<double>(npix))), {px},
      "cross_entropy_loss", [px, lbl = std::move(lbl), npix](Tape<S>& t, std::int32_t self) {
        const S g = t.grad_value(self).item() / static_cast<S>(npix);
        const Tensor<S>& x = t.value(px);
        const std::int64_t bs = x.extent(0), z = x.extent(1), inner = x.extent(2) * x.extent(3);
        Tensor<S> p = softmax(x, 1);
        for (std::int64_t i = 0; i < bs; ++i)
          for (std::int64_t pos = 0; pos < inner; ++pos)
            p[(i * z + lbl[i * inner + pos]) * inner + pos] -= S(1);
        p.array() *= g;
        t.add_grad(px, p);
      });
}

// ---------------------------------------------------------------------------
// Gradient checking

/// Compares the tape gradient of f against central finite differences.
/// Returns max over coordinates of |analytic - central| / max(1, |central|).
/// Double precision is expected; see the test suite for tolerances.
template <typename S>
double grad_check(const std::function<Var<S>(Tape<S>&, Var<S>)>& f, const Tensor<S>& params,
                  double step) {
  Tape<S> tape;
  Var<S> p = tape.input(params, "params");
  Var<S> y = f(tape, p);
  check(y.value().size() == 1, "grad_check: f must be scalar-valued");
  tape.throw_if_nonfinite();
  tape.backward(y);
  const Tensor<S> analytic = tape.grad(p);

  const auto eval = [&f](const Tensor<S>& at) {
    Tape<S> t;
    Var<S> v = f(t, t.constant(at, "params"));
    t.throw_if_nonfinite();
    return static_cast<double>(v.value().item());
  };

  Tensor<S> work = params;
  double max_rel = 0;
  for (std::int64_t i = 0; i < params.size(); ++i) {
    const S orig = work[i];
    work[i] = orig + static_cast<S>(step);
    const double up = eval(work);
    work[i] = orig - static_cast<S>(step);
    const double down = eval(work);
    work[i] = orig;
    const double central = (up - down) / (2.0 * step);
    const double rel =
        std::abs(static_cast<double>(analytic[i]) - central) / std::max(1.0, std::abs(central));
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace mccl
