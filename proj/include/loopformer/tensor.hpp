#pragma once

// Dense tensors and a reverse-mode tape.
//
// A Tape records coarse operations (linear maps, layer norm, attention, ...)
// in execution order; backward() walks the record once in reverse. Parameters
// enter the tape as leaves that reference external storage, so a model can be
// read-only during the forward pass while its gradients live on the tape.
// All row-major storage; the last dimension is the "column" dimension and
// every leading dimension is flattened into rows.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>

#include "loopformer/error.hpp"

namespace loopformer {

// 64-byte aligned storage. Eigen peels unaligned leading elements into a
// scalar path with different rounding, so buffer alignment must not vary
// between runs.
template <typename T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

template <typename T>
struct Tensor {
  std::vector<std::int64_t> shape;
  Buffer<T> values;

  Tensor() = default;

  explicit Tensor(std::vector<std::int64_t> dims, T fill = T(0))
      : shape(std::move(dims)), values(static_cast<std::size_t>(count(shape)), fill) {}

  Tensor(std::vector<std::int64_t> dims, std::vector<T> data)
      : shape(std::move(dims)), values(data.begin(), data.end()) {
    LOOPFORMER_CHECK(static_cast<std::int64_t>(values.size()) == count(shape),
                     ErrorKind::kShapeMismatch, "tensor values do not match shape");
  }

  static std::int64_t count(const std::vector<std::int64_t>& dims) {
    return std::accumulate(dims.begin(), dims.end(), std::int64_t{1},
                           std::multiplies<std::int64_t>());
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(values.size()); }
  std::int64_t cols() const { return shape.empty() ? 1 : shape.back(); }
  std::int64_t rows() const { return cols() == 0 ? 0 : numel() / cols(); }

  T* data() { return values.data(); }
  const T* data() const { return values.data(); }
  T* row(std::int64_t r) { return values.data() + r * cols(); }
  const T* row(std::int64_t r) const { return values.data() + r * cols(); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.values.assign(values.begin(), values.end());
    return out;
  }

  bool operator==(const Tensor&) const = default;
};

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
Eigen::Map<RowMatrix<T>> as_matrix(T* data, std::int64_t rows, std::int64_t cols) {
  return {data, rows, cols};
}

template <typename T>
Eigen::Map<const RowMatrix<T>> as_matrix(const T* data, std::int64_t rows, std::int64_t cols) {
  return {data, rows, cols};
}

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <typename T>
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  // A value that never receives a gradient.
  Var constant(Tensor<T> value) { return push(std::move(value), false); }

  // A leaf that receives gradients; used for test inputs and gradient checks.
  Var variable(Tensor<T> value) { return push(std::move(value), grad_enabled_); }

  // A leaf that reads `p` in place. Repeated calls return the same leaf, so
  // every use of a shared parameter accumulates into one gradient buffer.
  // `p` must outlive the tape and stay unmodified while it is recorded.
  Var param(const Tensor<T>& p) {
    if (auto it = param_ids_.find(&p); it != param_ids_.end()) return {it->second};
    Node& n = nodes_.emplace_back();
    n.external = &p;
    n.needs_grad = grad_enabled_;
    const Var v{static_cast<int>(nodes_.size()) - 1};
    param_ids_.emplace(&p, v.id);
    return v;
  }

  const Tensor<T>& value(Var v) const { return node(v).value(); }
  Tensor<T>& mutable_value(Var v) { return node(v).owned; }
  const std::vector<std::int64_t>& shape(Var v) const { return value(v).shape; }
  bool needs_grad(Var v) const { return node(v).needs_grad; }

  // Records an op result. `backward` receives the result variable and runs
  // at most once, after every consumer of the result has propagated into its
  // gradient buffer.
  Var record(Tensor<T> value, bool needs_grad, std::function<void(Var)> backward) {
    needs_grad = needs_grad && grad_enabled_;
    const Var v = push(std::move(value), needs_grad);
    if (needs_grad) nodes_.back().backward = std::move(backward);
    return v;
  }

  // Gradient buffer of `v`, allocated (zero-filled) on first use.
  Buffer<T>& grad_buffer(Var v) {
    Node& n = node(v);
    if (n.grad.empty()) n.grad.assign(static_cast<std::size_t>(n.value().numel()), T(0));
    return n.grad;
  }

  // Gradient of `v`, or all zeros if nothing flowed into it.
  std::vector<T> grad(Var v) const {
    const Node& n = node(v);
    if (n.grad.empty()) return std::vector<T>(static_cast<std::size_t>(n.value().numel()), T(0));
    return std::vector<T>(n.grad.begin(), n.grad.end());
  }

  std::vector<T> grad_of(const Tensor<T>& p) const {
    if (auto it = param_ids_.find(&p); it != param_ids_.end()) return grad(Var{it->second});
    return std::vector<T>(p.values.size(), T(0));
  }

  void backward(Var loss) {
    LOOPFORMER_CHECK(grad_enabled_, ErrorKind::kInvalidConfig, "backward on a no-grad tape");
    LOOPFORMER_CHECK(value(loss).numel() == 1, ErrorKind::kShapeMismatch,
                     "backward requires a scalar loss");
    LOOPFORMER_CHECK(!backward_done_, ErrorKind::kInvalidConfig, "backward already ran on this tape");
    backward_done_ = true;
    grad_buffer(loss)[0] = T(1);
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.backward && !n.grad.empty()) n.backward(Var{i});
    }
  }

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* external = nullptr;
    Buffer<T> grad;
    bool needs_grad = false;
    std::function<void(Var)> backward;

    const Tensor<T>& value() const { return external ? *external : owned; }
  };

  Var push(Tensor<T> value, bool needs_grad) {
    Node& n = nodes_.emplace_back();
    n.owned = std::move(value);
    n.needs_grad = needs_grad;
    return {static_cast<int>(nodes_.size()) - 1};
  }

  Node& node(Var v) {
    LOOPFORMER_CHECK(v.id >= 0 && v.id < static_cast<int>(nodes_.size()), ErrorKind::kOutOfRange,
                     "invalid tape variable");
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    LOOPFORMER_CHECK(v.id >= 0 && v.id < static_cast<int>(nodes_.size()), ErrorKind::kOutOfRange,
                     "invalid tape variable");
    return nodes_[v.id];
  }

  bool grad_enabled_;
  bool backward_done_ = false;
  std::deque<Node> nodes_;
  std::unordered_map<const Tensor<T>*, int> param_ids_;
};

// ---------------------------------------------------------------------------
// Operations

namespace detail {

template <typename T>
void require_cols(const Tensor<T>& t, std::int64_t cols, const char* what) {
  LOOPFORMER_CHECK(t.cols() == cols, ErrorKind::kShapeMismatch,
                   std::string(what) + ": expected last dimension " + std::to_string(cols) +
                       ", got " + std::to_string(t.cols()));
}

template <typename T>
std::vector<std::int64_t> with_cols(std::vector<std::int64_t> shape, std::int64_t cols) {
  if (shape.empty()) shape.push_back(cols);
  else shape.back() = cols;
  return shape;
}

}  // namespace detail

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  const auto& va = tape.value(a);
  const auto& vb = tape.value(b);
  LOOPFORMER_CHECK(va.shape == vb.shape, ErrorKind::kShapeMismatch, "add: shape mismatch");
  Tensor<T> out(va.shape);
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = va.values[i] + vb.values[i];
  return tape.record(std::move(out), tape.needs_grad(a) || tape.needs_grad(b),
                     [&tape, a, b](Var y) {
                       const auto& gy = tape.grad_buffer(y);
                       for (Var x : {a, b}) {
                         if (!tape.needs_grad(x)) continue;
                         auto& gx = tape.grad_buffer(x);
                         for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
                       }
                     });
}

template <typename T>
Var mul(Tape<T>& tape, Var a, Var b) {
  const auto& va = tape.value(a);
  const auto& vb = tape.value(b);
  LOOPFORMER_CHECK(va.shape == vb.shape, ErrorKind::kShapeMismatch, "mul: shape mismatch");
  Tensor<T> out(va.shape);
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = va.values[i] * vb.values[i];
  return tape.record(std::move(out), tape.needs_grad(a) || tape.needs_grad(b),
                     [&tape, a, b](Var y) {
                       const auto& gy = tape.grad_buffer(y);
                       const auto& xa = tape.value(a).values;
                       const auto& xb = tape.value(b).values;
                       if (tape.needs_grad(a)) {
                         auto& ga = tape.grad_buffer(a);
                         for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * xb[i];
                       }
                       if (tape.needs_grad(b)) {
                         auto& gb = tape.grad_buffer(b);
                         for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * xa[i];
                       }
                     });
}

template <typename T>
Var sum(Tape<T>& tape, Var x) {
  const auto& vx = tape.value(x).values;
  Tensor<T> out({1});
  out.values[0] = std::accumulate(vx.begin(), vx.end(), T(0));
  return tape.record(std::move(out), tape.needs_grad(x), [&tape, x](Var y) {
    const T g = tape.grad_buffer(y)[0];
    for (auto& gx : tape.grad_buffer(x)) gx += g;
  });
}

// Row lookup: out[i] = table[ids[i]]. `out_shape` defaults to [ids.size(), d].
template <typename T>
Var embedding(Tape<T>& tape, Var table, std::span<const int> ids,
              std::vector<std::int64_t> out_shape = {}) {
  const auto& tab = tape.value(table);
  const std::int64_t d = tab.cols();
  if (out_shape.empty()) out_shape = {static_cast<std::int64_t>(ids.size()), d};
  LOOPFORMER_CHECK(Tensor<T>::count(out_shape) == static_cast<std::int64_t>(ids.size()) * d,
                   ErrorKind::kShapeMismatch, "embedding: output shape mismatch");
  Tensor<T> out(std::move(out_shape));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    LOOPFORMER_CHECK(ids[i] >= 0 && ids[i] < tab.rows(), ErrorKind::kOutOfRange,
                     "embedding: index " + std::to_string(ids[i]) + " out of range");
    std::copy_n(tab.row(ids[i]), d, out.row(static_cast<std::int64_t>(i)));
  }
  return tape.record(std::move(out), tape.needs_grad(table),
                     [&tape, table, idx = std::vector<int>(ids.begin(), ids.end()), d](Var y) {
                       const auto& gy = tape.grad_buffer(y);
                       auto& gt = tape.grad_buffer(table);
                       for (std::size_t i = 0; i < idx.size(); ++i) {
                         T* dst = gt.data() + static_cast<std::int64_t>(idx[i]) * d;
                         const T* src = gy.data() + static_cast<std::int64_t>(i) * d;
                         for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
                       }
                     });
}

// x: [..., in], w: [in, out], b: [out] (optional) -> [..., out]
template <typename T>
Var linear(Tape<T>& tape, Var x, Var w, Var b = {}) {
  const auto& vx = tape.value(x);
  const auto& vw = tape.value(w);
  LOOPFORMER_CHECK(vw.shape.size() == 2, ErrorKind::kShapeMismatch, "linear: weight must be 2-D");
  const std::int64_t in = vw.shape[0], out_dim = vw.shape[1], n = vx.rows();
  detail::require_cols(vx, in, "linear");
  if (b.valid()) detail::require_cols(tape.value(b), out_dim, "linear bias");
  Tensor<T> out(detail::with_cols<T>(vx.shape, out_dim));
  auto y = as_matrix(out.data(), n, out_dim);
  y.noalias() = as_matrix(vx.data(), n, in) * as_matrix(vw.data(), in, out_dim);
  if (b.valid()) {
    const auto bias = as_matrix(tape.value(b).data(), 1, out_dim);
    y.rowwise() += bias.row(0);
  }
  const bool needs = tape.needs_grad(x) || tape.needs_grad(w) || (b.valid() && tape.needs_grad(b));
  return tape.record(std::move(out), needs, [&tape, x, w, b, n, in, out_dim](Var yv) {
    const auto gy = as_matrix(tape.grad_buffer(yv).data(), n, out_dim);
    if (tape.needs_grad(x)) {
      as_matrix(tape.grad_buffer(x).data(), n, in).noalias() +=
          gy * as_matrix(tape.value(w).data(), in, out_dim).transpose();
    }
    if (tape.needs_grad(w)) {
      as_matrix(tape.grad_buffer(w).data(), in, out_dim).noalias() +=
          as_matrix(tape.value(x).data(), n, in).transpose() * gy;
    }
    if (b.valid() && tape.needs_grad(b)) {
      as_matrix(tape.grad_buffer(b).data(), 1, out_dim).row(0) += gy.colwise().sum();
    }
  });
}

// x: [..., d], table: [V, d] -> [..., V]; x times table transposed.
template <typename T>
Var matmul_nt(Tape<T>& tape, Var x, Var table) {
  const auto& vx = tape.value(x);
  const auto& vt = tape.value(table);
  LOOPFORMER_CHECK(vt.shape.size() == 2, ErrorKind::kShapeMismatch, "matmul_nt: table must be 2-D");
  const std::int64_t v = vt.shape[0], d = vt.shape[1], n = vx.rows();
  detail::require_cols(vx, d, "matmul_nt");
  Tensor<T> out(detail::with_cols<T>(vx.shape, v));
  as_matrix(out.data(), n, v).noalias() =
      as_matrix(vx.data(), n, d) * as_matrix(vt.data(), v, d).transpose();
  return tape.record(std::move(out), tape.needs_grad(x) || tape.needs_grad(table),
                     [&tape, x, table, n, v, d](Var y) {
                       const auto gy = as_matrix(tape.grad_buffer(y).data(), n, v);
                       if (tape.needs_grad(x)) {
                         as_matrix(tape.grad_buffer(x).data(), n, d).noalias() +=
                             gy * as_matrix(tape.value(table).data(), v, d);
                       }
                       if (tape.needs_grad(table)) {
                         as_matrix(tape.grad_buffer(table).data(), v, d).noalias() +=
                             gy.transpose() * as_matrix(tape.value(x).data(), n, d);
                       }
                     });
}

// Per-row normalization with population variance, then gain and bias.
template <typename T>
Var layer_norm(Tape<T>& tape, Var x, Var gain, Var bias, T eps = T(1e-5)) {
  const auto& vx = tape.value(x);
  const std::int64_t d = vx.cols(), n = vx.rows();
  detail::require_cols(tape.value(gain), d, "layer_norm gain");
  detail::require_cols(tape.value(bias), d, "layer_norm bias");
  const T* g = tape.value(gain).data();
  const T* b = tape.value(bias).data();
  Tensor<T> out(vx.shape);
  std::vector<T> mean(n), rstd(n);
  for (std::int64_t r = 0; r < n; ++r) {
    const T* xr = vx.row(r);
    T m = 0;
    for (std::int64_t j = 0; j < d; ++j) m += xr[j];
    m /= T(d);
    T var = 0;
    for (std::int64_t j = 0; j < d; ++j) var += (xr[j] - m) * (xr[j] - m);
    var /= T(d);
    const T rs = T(1) / std::sqrt(var + eps);
    mean[r] = m;
    rstd[r] = rs;
    T* yr = out.row(r);
    for (std::int64_t j = 0; j < d; ++j) yr[j] = (xr[j] - m) * rs * g[j] + b[j];
  }
  const bool needs = tape.needs_grad(x) || tape.needs_grad(gain) || tape.needs_grad(bias);
  return tape.record(
      std::move(out), needs,
      [&tape, x, gain, bias, n, d, mean = std::move(mean), rstd = std::move(rstd)](Var y) {
        const auto& gy = tape.grad_buffer(y);
        const auto& vx = tape.value(x);
        const T* g = tape.value(gain).data();
        T* gg = tape.needs_grad(gain) ? tape.grad_buffer(gain).data() : nullptr;
        T* gb = tape.needs_grad(bias) ? tape.grad_buffer(bias).data() : nullptr;
        T* gx = tape.needs_grad(x) ? tape.grad_buffer(x).data() : nullptr;
        std::vector<T> xhat(d), dxhat(d);
        for (std::int64_t r = 0; r < n; ++r) {
          const T* xr = vx.row(r);
          const T* gyr = gy.data() + r * d;
          T mean_dxhat = 0, mean_dxhat_xhat = 0;
          for (std::int64_t j = 0; j < d; ++j) {
            xhat[j] = (xr[j] - mean[r]) * rstd[r];
            dxhat[j] = gyr[j] * g[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xhat[j];
            if (gg) gg[j] += gyr[j] * xhat[j];
            if (gb) gb[j] += gyr[j];
          }
          if (!gx) continue;
          mean_dxhat /= T(d);
          mean_dxhat_xhat /= T(d);
          T* gxr = gx + r * d;
          for (std::int64_t j = 0; j < d; ++j) {
            gxr[j] += rstd[r] * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
          }
        }
      });
}

// Exact GELU: x * Phi(x).
template <typename T>
T gelu_value(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::sqrt(T(2))));
}

template <typename T>
T gelu_derivative(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::sqrt(T(2))));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * T(3.14159265358979323846));
  return cdf + x * pdf;
}

template <typename T>
using ArrayMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;

// Vectorized over the buffer with Eigen's erf.
template <typename T>
Var gelu(Tape<T>& tape, Var x) {
  const auto& vx = tape.value(x);
  Tensor<T> out(vx.shape);
  const auto n = vx.numel();
  const Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> ax(vx.data(), n);
  ArrayMap<T>(out.data(), n) = T(0.5) * ax * (T(1) + (ax * T(M_SQRT1_2)).erf());
  return tape.record(std::move(out), tape.needs_grad(x), [&tape, x, n](Var y) {
    const Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> gy(tape.grad_buffer(y).data(), n);
    const Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> ax(tape.value(x).data(), n);
    const T inv_sqrt_2pi = T(0.5 * M_2_SQRTPI * M_SQRT1_2);
    ArrayMap<T>(tape.grad_buffer(x).data(), n) +=
        gy * (T(0.5) * (T(1) + (ax * T(M_SQRT1_2)).erf()) + ax * inv_sqrt_2pi * (T(-0.5) * ax.square()).exp());
  });
}

// Attention mask over a right-padded [batch, seq] token grid: a query at
// position i sees key j iff j <= i and key j is a real token.
struct AttentionMask {
  std::int64_t batch = 0;
  std::int64_t seq = 0;
  std::vector<std::uint8_t> key_valid;  // [batch * seq]

  bool allowed(std::int64_t b, std::int64_t i, std::int64_t j) const {
    return j <= i && key_valid[static_cast<std::size_t>(b * seq + j)] != 0;
  }
};

// Scaled dot-product attention over fused projections.
// qkv: [batch, seq, 3d] laid out as [q | k | v]; returns [batch, seq, d]
// (the concatenated head outputs, before the output projection).
// `probs_out`, when given, receives the attention weights [batch, heads, seq, seq].
template <typename T>
Var attention(Tape<T>& tape, Var qkv, const AttentionMask& mask, int num_heads,
              std::vector<T>* probs_out = nullptr) {
  const auto& vq = tape.value(qkv);
  const std::int64_t B = mask.batch, S = mask.seq;
  LOOPFORMER_CHECK(vq.rows() == B * S && vq.cols() % 3 == 0, ErrorKind::kShapeMismatch,
                   "attention: qkv must be [batch, seq, 3d]");
  LOOPFORMER_CHECK(static_cast<std::int64_t>(mask.key_valid.size()) == B * S,
                   ErrorKind::kShapeMismatch, "attention: mask shape mismatch");
  const std::int64_t d = vq.cols() / 3;
  LOOPFORMER_CHECK(num_heads > 0 && d % num_heads == 0, ErrorKind::kShapeMismatch,
                   "attention: embedding dimension not divisible by head count");
  const std::int64_t hd = d / num_heads;
  const T scale = T(1) / std::sqrt(T(hd));
  std::vector<T> probs(static_cast<std::size_t>(B * num_heads * S * S), T(0));
  Tensor<T> out(detail::with_cols<T>(vq.shape, d));
  std::vector<T> scores(S);
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t h = 0; h < num_heads; ++h) {
      for (std::int64_t i = 0; i < S; ++i) {
        const T* q = vq.row(b * S + i) + h * hd;
        T max_score = -std::numeric_limits<T>::infinity();
        for (std::int64_t j = 0; j <= i; ++j) {
          if (!mask.allowed(b, i, j)) continue;
          const T* k = vq.row(b * S + j) + d + h * hd;
          T s = 0;
          for (std::int64_t t = 0; t < hd; ++t) s += q[t] * k[t];
          scores[j] = s * scale;
          max_score = std::max(max_score, scores[j]);
        }
        LOOPFORMER_CHECK(max_score > -std::numeric_limits<T>::infinity(),
                         ErrorKind::kShapeMismatch, "attention: fully masked query row");
        T* p = probs.data() + ((b * num_heads + h) * S + i) * S;
        T total = 0;
        for (std::int64_t j = 0; j <= i; ++j) {
          if (!mask.allowed(b, i, j)) continue;
          p[j] = std::exp(scores[j] - max_score);
          total += p[j];
        }
        T* o = out.row(b * S + i) + h * hd;
        for (std::int64_t j = 0; j <= i; ++j) {
          if (!mask.allowed(b, i, j)) continue;
          p[j] /= total;
          const T* v = vq.row(b * S + j) + 2 * d + h * hd;
          for (std::int64_t t = 0; t < hd; ++t) o[t] += p[j] * v[t];
        }
      }
    }
  }
  if (probs_out) *probs_out = probs;
  return tape.record(
      std::move(out), tape.needs_grad(qkv),
      [&tape, qkv, B, S, d, hd, num_heads, scale, probs = std::move(probs)](Var y) {
        const auto& gy = tape.grad_buffer(y);
        const auto& vq = tape.value(qkv);
        auto& gq = tape.grad_buffer(qkv);
        std::vector<T> dp(S);
        for (std::int64_t b = 0; b < B; ++b) {
          for (std::int64_t h = 0; h < num_heads; ++h) {
            for (std::int64_t i = 0; i < S; ++i) {
              const T* p = probs.data() + ((b * num_heads + h) * S + i) * S;
              const T* go = gy.data() + (b * S + i) * d + h * hd;
              T dot = 0;
              for (std::int64_t j = 0; j <= i; ++j) {
                dp[j] = 0;
                if (p[j] == T(0)) continue;
                const T* v = vq.row(b * S + j) + 2 * d + h * hd;
                T* gv = gq.data() + (b * S + j) * 3 * d + 2 * d + h * hd;
                for (std::int64_t t = 0; t < hd; ++t) {
                  dp[j] += go[t] * v[t];
                  gv[t] += p[j] * go[t];
                }
                dot += p[j] * dp[j];
              }
              const T* q = vq.row(b * S + i) + h * hd;
              T* gqi = gq.data() + (b * S + i) * 3 * d + h * hd;
              for (std::int64_t j = 0; j <= i; ++j) {
                if (p[j] == T(0)) continue;
                const T ds = p[j] * (dp[j] - dot) * scale;
                const T* k = vq.row(b * S + j) + d + h * hd;
                T* gk = gq.data() + (b * S + j) * 3 * d + d + h * hd;
                for (std::int64_t t = 0; t < hd; ++t) {
                  gqi[t] += ds * k[t];
                  gk[t] += ds * q[t];
                }
              }
            }
          }
        }
      });
}

// Selects rows of x (flattened over leading dimensions): out[i] = x[rows[i]].
template <typename T>
Var gather_rows(Tape<T>& tape, Var x, std::span<const std::int64_t> rows) {
  const auto& vx = tape.value(x);
  const std::int64_t d = vx.cols();
  Tensor<T> out({static_cast<std::int64_t>(rows.size()), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    LOOPFORMER_CHECK(rows[i] >= 0 && rows[i] < vx.rows(), ErrorKind::kOutOfRange,
                     "gather_rows: row out of range");
    std::copy_n(vx.row(rows[i]), d, out.row(static_cast<std::int64_t>(i)));
  }
  return tape.record(std::move(out), tape.needs_grad(x),
                     [&tape, x, d, idx = std::vector<std::int64_t>(rows.begin(), rows.end())](Var y) {
                       const auto& gy = tape.grad_buffer(y);
                       auto& gx = tape.grad_buffer(x);
                       for (std::size_t i = 0; i < idx.size(); ++i) {
                         for (std::int64_t j = 0; j < d; ++j) {
                           gx[idx[i] * d + j] += gy[static_cast<std::int64_t>(i) * d + j];
                         }
                       }
                     });
}

// Mean over rows of -log softmax(logits[i])[targets[i]]. logits: [M, V].
template <typename T>
Var cross_entropy(Tape<T>& tape, Var logits, std::span<const int> targets) {
  const auto& vl = tape.value(logits);
  const std::int64_t m = vl.rows(), v = vl.cols();
  LOOPFORMER_CHECK(static_cast<std::int64_t>(targets.size()) == m && m > 0,
                   ErrorKind::kShapeMismatch, "cross_entropy: one target per row required");
  std::vector<T> probs(static_cast<std::size_t>(m * v));
  T loss = 0;
  for (std::int64_t r = 0; r < m; ++r) {
    LOOPFORMER_CHECK(targets[r] >= 0 && targets[r] < v, ErrorKind::kOutOfRange,
                     "cross_entropy: target out of range");
    const T* lr = vl.row(r);
    const T mx = *std::max_element(lr, lr + v);
    T total = 0;
    for (std::int64_t j = 0; j < v; ++j) total += std::exp(lr[j] - mx);
    const T log_z = mx + std::log(total);
    for (std::int64_t j = 0; j < v; ++j) probs[r * v + j] = std::exp(lr[j] - log_z);
    loss += log_z - lr[targets[r]];
  }
  Tensor<T> out({1});
  out.values[0] = loss / T(m);
  return tape.record(std::move(out), tape.needs_grad(logits),
                     [&tape, logits, m, v, probs = std::move(probs),
                      tgt = std::vector<int>(targets.begin(), targets.end())](Var y) {
                       const T g = tape.grad_buffer(y)[0] / T(m);
                       auto& gl = tape.grad_buffer(logits);
                       for (std::int64_t r = 0; r < m; ++r) {
                         for (std::int64_t j = 0; j < v; ++j) gl[r * v + j] += g * probs[r * v + j];
                         gl[r * v + tgt[r]] -= g;
                       }
                     });
}

// Cross entropy of logits [B, T, V] at one position per batch row.
template <typename T>
Var cross_entropy_at(Tape<T>& tape, Var logits, std::span<const int> positions,
                     std::span<const int> targets) {
  const auto& shape = tape.shape(logits);
  LOOPFORMER_CHECK(shape.size() == 3, ErrorKind::kShapeMismatch,
                   "cross_entropy_at: logits must be [batch, seq, vocab]");
  const std::int64_t B = shape[0], S = shape[1];
  LOOPFORMER_CHECK(static_cast<std::int64_t>(positions.size()) == B, ErrorKind::kShapeMismatch,
                   "cross_entropy_at: one position per batch row required");
  std::vector<std::int64_t> rows(B);
  for (std::int64_t b = 0; b < B; ++b) {
    LOOPFORMER_CHECK(positions[b] >= 0 && positions[b] < S, ErrorKind::kOutOfRange,
                     "cross_entropy_at: position out of range");
    rows[b] = b * S + positions[b];
  }
  return cross_entropy(tape, gather_rows(tape, logits, rows), targets);
}

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheckResult {
  double max_relative_error = 0.0;
  double max_absolute_error = 0.0;
  std::size_t coordinates = 0;
};

// Compares tape gradients of `loss_fn` against central differences
// (f(p + h) - f(p - h)) / 2h on `num_coords` uniformly chosen coordinates
// across `params`. Relative error is |a - n| / max(|a|, |n|, floor); the
// floor keeps exactly-zero gradients from dividing by zero.
// `loss_fn(Tape<T>&) -> Var` must build the loss from the current values of
// `params` (registered via tape.param).
template <typename T, typename LossFn>
GradCheckResult finite_difference_check(LossFn&& loss_fn, std::span<Tensor<T>* const> params,
                                        T h, std::size_t num_coords, std::uint64_t seed,
                                        double floor = 1e-8) {
  std::vector<std::vector<T>> analytic;
  {
    Tape<T> tape(true);
    const Var loss = loss_fn(tape);
    tape.backward(loss);
    for (Tensor<T>* p : params) analytic.push_back(tape.grad_of(*p));
  }
  const auto eval = [&] {
    Tape<T> tape(false);
    return static_cast<double>(tape.value(loss_fn(tape)).values[0]);
  };
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (std::size_t j = 0; j < params[i]->values.size(); ++j) coords.emplace_back(i, j);
  }
  std::mt19937_64 rng(seed);
  if (num_coords < coords.size()) {
    // Partial Fisher-Yates for a sample without replacement.
    for (std::size_t i = 0; i < num_coords; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, coords.size() - 1);
      std::swap(coords[i], coords[pick(rng)]);
    }
    coords.resize(num_coords);
  }
  GradCheckResult result;
  for (const auto& [pi, j] : coords) {
    T& slot = params[pi]->values[j];
    const T saved = slot;
    slot = saved + h;
    const double plus = eval();
    slot = saved - h;
    const double minus = eval();
    slot = saved;
    const double numeric = (plus - minus) / (2.0 * static_cast<double>(h));
    const double a = static_cast<double>(analytic[pi][j]);
    const double abs_err = std::abs(a - numeric);
    const double denom = std::max({std::abs(a), std::abs(numeric), floor});
    result.max_absolute_error = std::max(result.max_absolute_error, abs_err);
    result.max_relative_error = std::max(result.max_relative_error, abs_err / denom);
    ++result.coordinates;
  }
  return result;
}

}  // namespace loopformer
