#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation.
//
// A TensorT<T> is a shared handle to a graph node holding the value and,
// when any input of the producing op required gradients, the parent links
// and a backward function. Graphs are per-forward-pass and acyclic;
// backward() walks them once in reverse topological order and returns a
// GradientMapT from leaf parameters to their gradients.
//
// Models run with T = float. grad_check instantiates everything with
// T = double (the "64-bit shadow"), because central finite differences are
// too noisy in 32-bit to verify analytic gradients.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "contraseq/errors.hpp"
#include "contraseq/rng.hpp"

namespace contraseq {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

// Thread-local switch for graph recording. Evaluation paths disable it so
// forward passes over parameters do not retain backward graphs.
struct autograd {
  static bool& enabled() {
    static thread_local bool on = true;
    return on;
  }
};

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(autograd::enabled()) { autograd::enabled() = false; }
  ~NoGradGuard() { autograd::enabled() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated lazily during backward
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  std::function<void(TensorNode<T>&)> backward_fn;  // empty for leaves

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

template <typename T>
class TensorT {
 public:
  TensorT() = default;

  TensorT(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<TensorNode<T>>()) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
      throw shape_error("tensor data size " + std::to_string(data.size()) +
                        " does not match shape " + shape_str(shape));
    for (int64_t d : shape)
      if (d <= 0) throw shape_error("non-positive dimension in shape " + shape_str(shape));
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static TensorT zeros(Shape shape, bool requires_grad = false) {
    std::vector<T> data(static_cast<size_t>(shape_numel(shape)), T(0));
    return TensorT(std::move(shape), std::move(data), requires_grad);
  }

  static TensorT full(Shape shape, T fill, bool requires_grad = false) {
    std::vector<T> data(static_cast<size_t>(shape_numel(shape)), fill);
    return TensorT(std::move(shape), std::move(data), requires_grad);
  }

  static TensorT scalar(T v) { return TensorT({1}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t dim(size_t i) const { return node_->shape[i]; }
  size_t rank() const { return node_->shape.size(); }
  int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool b) { node_->requires_grad = b; }

  const std::vector<T>& data() const { return node_->value; }
  std::vector<T>& mutable_data() { return node_->value; }

  T item() const {
    if (numel() != 1)
      throw contract_error("item() requires a scalar tensor, got shape " + shape_str(shape()));
    return node_->value[0];
  }

  TensorT detached_copy() const {
    return TensorT(node_->shape, node_->value, false);
  }

  TensorNode<T>* node() const { return node_.get(); }
  const std::shared_ptr<TensorNode<T>>& handle() const { return node_; }

  // Builds an op-result tensor. The backward function receives the result
  // node with .grad populated and must accumulate into the grads of those
  // parents that require gradients.
  static TensorT make_op(Shape shape, std::vector<T> value, std::vector<TensorT> parents,
                         std::function<void(TensorNode<T>&)> backward) {
    TensorT out(std::move(shape), std::move(value), false);
    bool track = false;
    if (autograd::enabled())
      for (const auto& p : parents) track = track || p.requires_grad();
    if (track) {
      out.node_->requires_grad = true;
      out.node_->parents.reserve(parents.size());
      for (auto& p : parents) out.node_->parents.push_back(p.handle());
      out.node_->backward_fn = std::move(backward);
    }
    return out;
  }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

using Tensor = TensorT<float>;

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename T>
ConstMatMap<T> as_matrix(const TensorNode<T>& n) {
  if (n.shape.size() != 2)
    throw shape_error("expected rank-2 tensor, got " + shape_str(n.shape));
  return ConstMatMap<T>(n.value.data(), n.shape[0], n.shape[1]);
}

template <typename T>
MatMap<T> grad_matrix(TensorNode<T>& n) {
  n.ensure_grad();
  return MatMap<T>(n.grad.data(), n.shape[0], n.shape[1]);
}

template <typename T>
ConstMatMap<T> grad_matrix_const(const TensorNode<T>& n) {
  return ConstMatMap<T>(n.grad.data(), n.shape[0], n.shape[1]);
}

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape() != b.shape())
    throw shape_error("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  std::vector<T> out(a.data());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] += b.data()[i];
  return TensorT<T>::make_op(a.shape(), std::move(out), {a, b}, [](TensorNode<T>& self) {
    for (int side = 0; side < 2; ++side) {
      auto& p = *self.parents[side];
      if (!p.requires_grad) continue;
      p.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
    }
  });
}

// The one permitted broadcast: a bias over the trailing axis.
template <typename T>
TensorT<T> add_bias(const TensorT<T>& a, const TensorT<T>& bias) {
  if (bias.rank() != 1 || bias.dim(0) != a.shape().back())
    throw shape_error("add_bias: bias " + shape_str(bias.shape()) +
                      " does not match trailing axis of " + shape_str(a.shape()));
  const int64_t d = bias.dim(0);
  const int64_t rows = a.numel() / d;
  std::vector<T> out(a.data());
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < d; ++c) out[r * d + c] += bias.data()[c];
  return TensorT<T>::make_op(a.shape(), std::move(out), {a, bias}, [d, rows](TensorNode<T>& self) {
    auto& pa = *self.parents[0];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    }
    auto& pb = *self.parents[1];
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < d; ++c) pb.grad[c] += self.grad[r * d + c];
    }
  });
}

template <typename T>
TensorT<T> scale(const TensorT<T>& a, T c) {
  std::vector<T> out(a.data());
  for (auto& v : out) v *= c;
  return TensorT<T>::make_op(a.shape(), std::move(out), {a}, [c](TensorNode<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += c * self.grad[i];
  });
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape() != b.shape())
    throw shape_error("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  std::vector<T> out(a.data());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] *= b.data()[i];
  return TensorT<T>::make_op(a.shape(), std::move(out), {a, b}, [](TensorNode<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i] * pa.value[i];
    }
  });
}

template <typename T>
TensorT<T> sigmoid(const TensorT<T>& a) {
  std::vector<T> out(a.data());
  for (auto& v : out) v = T(1) / (T(1) + std::exp(-v));
  return TensorT<T>::make_op(a.shape(), std::move(out), {a}, [](TensorNode<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      const T s = self.value[i];
      p.grad[i] += self.grad[i] * s * (T(1) - s);
    }
  });
}

template <typename T>
TensorT<T> tanh(const TensorT<T>& a) {
  std::vector<T> out(a.data());
  for (auto& v : out) v = std::tanh(v);
  return TensorT<T>::make_op(a.shape(), std::move(out), {a}, [](TensorNode<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      const T t = self.value[i];
      p.grad[i] += self.grad[i] * (T(1) - t * t);
    }
  });
}

template <typename T>
TensorT<T> relu(const TensorT<T>& a) {
  std::vector<T> out(a.data());
  for (auto& v : out) v = v > T(0) ? v : T(0);
  return TensorT<T>::make_op(a.shape(), std::move(out), {a}, [](TensorNode<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i)
      if (p.value[i] > T(0)) p.grad[i] += self.grad[i];
  });
}

template <typename T>
TensorT<T> sum(const TensorT<T>& a) {
  T s = 0;
  for (T v : a.data()) s += v;
  return TensorT<T>::make_op({1}, {s}, {a}, [](TensorNode<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const T g = self.grad[0];
    for (auto& v : p.grad) v += g;
  });
}

// Mean over rows of an [n x d] tensor, producing [1 x d].
template <typename T>
TensorT<T> mean_rows(const TensorT<T>& a) {
  if (a.rank() != 2) throw shape_error("mean_rows: expected rank-2, got " + shape_str(a.shape()));
  const int64_t n = a.dim(0), d = a.dim(1);
  std::vector<T> out(static_cast<size_t>(d), T(0));
  for (int64_t r = 0; r < n; ++r)
    for (int64_t c = 0; c < d; ++c) out[c] += a.data()[r * d + c];
  for (auto& v : out) v /= static_cast<T>(n);
  return TensorT<T>::make_op({1, d}, std::move(out), {a}, [n, d](TensorNode<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const T inv = T(1) / static_cast<T>(n);
    for (int64_t r = 0; r < n; ++r)
      for (int64_t c = 0; c < d; ++c) p.grad[r * d + c] += self.grad[c] * inv;
  });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw shape_error("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                      shape_str(b.shape()));
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(static_cast<size_t>(m * n));
  {
    MatMap<T> c(out.data(), m, n);
    c.noalias() = as_matrix(*a.node()) * as_matrix(*b.node());
  }
  return TensorT<T>::make_op({m, n}, std::move(out), {a, b}, [](TensorNode<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    auto g = grad_matrix_const(self);
    if (pa.requires_grad) grad_matrix(pa).noalias() += g * as_matrix(pb).transpose();
    if (pb.requires_grad) grad_matrix(pb).noalias() += as_matrix(pa).transpose() * g;
  });
}

template <typename T>
TensorT<T> transpose(const TensorT<T>& a) {
  if (a.rank() != 2) throw shape_error("transpose: expected rank-2, got " + shape_str(a.shape()));
  const int64_t m = a.dim(0), n = a.dim(1);
  std::vector<T> out(static_cast<size_t>(m * n));
  {
    MatMap<T> o(out.data(), n, m);
    o = as_matrix(*a.node()).transpose();
  }
  return TensorT<T>::make_op({n, m}, std::move(out), {a}, [](TensorNode<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    grad_matrix(p).noalias() += grad_matrix_const(self).transpose();
  });
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
void check_finite(const std::vector<T>& v, const char* who) {
  for (T x : v)
    if (!std::isfinite(x) && !(x == -std::numeric_limits<T>::infinity()))
      throw numeric_error(std::string(who) + ": non-finite input");
}

struct AxisSlices {
  int64_t outer, len, inner;
};

inline AxisSlices axis_slices(const Shape& shape, int axis) {
  if (axis < 0 || axis >= static_cast<int>(shape.size()))
    throw contract_error("invalid axis " + std::to_string(axis) + " for shape " +
                         shape_str(shape));
  AxisSlices s{1, shape[axis], 1};
  for (int i = 0; i < axis; ++i) s.outer *= shape[i];
  for (size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}
}  // namespace detail

// Max-subtracted softmax along `axis`. Entries equal to -inf come out as
// exact zeros (used by attention masking).
template <typename T>
TensorT<T> softmax(const TensorT<T>& a, int axis) {
  detail::check_finite(a.data(), "softmax");
  const auto s = detail::axis_slices(a.shape(), axis);
  std::vector<T> out(a.data().size());
  for (int64_t o = 0; o < s.outer; ++o) {
    for (int64_t i = 0; i < s.inner; ++i) {
      const int64_t base = o * s.len * s.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (int64_t j = 0; j < s.len; ++j) mx = std::max(mx, a.data()[base + j * s.inner]);
      if (mx == -std::numeric_limits<T>::infinity())
        throw contract_error("softmax: slice is fully masked (-inf everywhere)");
      T z = 0;
      for (int64_t j = 0; j < s.len; ++j) {
        const T e = std::exp(a.data()[base + j * s.inner] - mx);
        out[base + j * s.inner] = e;
        z += e;
      }
      const T inv = T(1) / z;
      for (int64_t j = 0; j < s.len; ++j) out[base + j * s.inner] *= inv;
    }
  }
  return TensorT<T>::make_op(a.shape(), std::move(out), {a}, [s](TensorNode<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int64_t o = 0; o < s.outer; ++o) {
      for (int64_t i = 0; i < s.inner; ++i) {
        const int64_t base = o * s.len * s.inner + i;
        T dot = 0;
        for (int64_t j = 0; j < s.len; ++j) {
          const int64_t ix = base + j * s.inner;
          dot += self.grad[ix] * self.value[ix];
        }
        for (int64_t j = 0; j < s.len; ++j) {
          const int64_t ix = base + j * s.inner;
          p.grad[ix] += self.value[ix] * (self.grad[ix] - dot);
        }
      }
    }
  });
}

template <typename T>
TensorT<T> log_softmax(const TensorT<T>& a, int axis) {
  detail::check_finite(a.data(), "log_softmax");
  const auto s = detail::axis_slices(a.shape(), axis);
  std::vector<T> out(a.data().size());
  for (int64_t o = 0; o < s.outer; ++o) {
    for (int64_t i = 0; i < s.inner; ++i) {
      const int64_t base = o * s.len * s.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (int64_t j = 0; j < s.len; ++j) mx = std::max(mx, a.data()[base + j * s.inner]);
      T z = 0;
      for (int64_t j = 0; j < s.len; ++j) z += std::exp(a.data()[base + j * s.inner] - mx);
      const T lse = mx + std::log(z);
      for (int64_t j = 0; j < s.len; ++j)
        out[base + j * s.inner] = a.data()[base + j * s.inner] - lse;
    }
  }
  return TensorT<T>::make_op(a.shape(), std::move(out), {a}, [s](TensorNode<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int64_t o = 0; o < s.outer; ++o) {
      for (int64_t i = 0; i < s.inner; ++i) {
        const int64_t base = o * s.len * s.inner + i;
        T gsum = 0;
        for (int64_t j = 0; j < s.len; ++j) gsum += self.grad[base + j * s.inner];
        for (int64_t j = 0; j < s.len; ++j) {
          const int64_t ix = base + j * s.inner;
          p.grad[ix] += self.grad[ix] - std::exp(self.value[ix]) * gsum;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Slicing, concatenation, gathering
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> slice_rows(const TensorT<T>& a, int64_t r0, int64_t r1) {
  if (a.rank() != 2 || r0 < 0 || r1 > a.dim(0) || r0 >= r1)
    throw shape_error("slice_rows: bad range [" + std::to_string(r0) + "," + std::to_string(r1) +
                      ") for " + shape_str(a.shape()));
  const int64_t d = a.dim(1);
  std::vector<T> out(a.data().begin() + r0 * d, a.data().begin() + r1 * d);
  return TensorT<T>::make_op({r1 - r0, d}, std::move(out), {a}, [r0, d](TensorNode<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) p.grad[r0 * d + i] += self.grad[i];
  });
}

template <typename T>
TensorT<T> slice_cols(const TensorT<T>& a, int64_t c0, int64_t c1) {
  if (a.rank() != 2 || c0 < 0 || c1 > a.dim(1) || c0 >= c1)
    throw shape_error("slice_cols: bad range [" + std::to_string(c0) + "," + std::to_string(c1) +
                      ") for " + shape_str(a.shape()));
  const int64_t n = a.dim(0), d = a.dim(1), w = c1 - c0;
  std::vector<T> out(static_cast<size_t>(n * w));
  for (int64_t r = 0; r < n; ++r)
    std::copy_n(a.data().begin() + r * d + c0, w, out.begin() + r * w);
  return TensorT<T>::make_op({n, w}, std::move(out), {a}, [n, d, c0, w](TensorNode<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int64_t r = 0; r < n; ++r)
      for (int64_t c = 0; c < w; ++c) p.grad[r * d + c0 + c] += self.grad[r * w + c];
  });
}

template <typename T>
TensorT<T> concat_rows(const std::vector<TensorT<T>>& parts) {
  if (parts.empty()) throw contract_error("concat_rows: no inputs");
  const int64_t d = parts[0].dim(1);
  int64_t n = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(1) != d)
      throw shape_error("concat_rows: column mismatch at " + shape_str(p.shape()));
    n += p.dim(0);
  }
  std::vector<T> out;
  out.reserve(static_cast<size_t>(n * d));
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return TensorT<T>::make_op({n, d}, std::move(out), parts, [](TensorNode<T>& self) {
    size_t offset = 0;
    for (auto& parent : self.parents) {
      const size_t len = parent->value.size();
      if (parent->requires_grad) {
        parent->ensure_grad();
        for (size_t i = 0; i < len; ++i) parent->grad[i] += self.grad[offset + i];
      }
      offset += len;
    }
  });
}

template <typename T>
TensorT<T> concat_cols(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0))
    throw shape_error("concat_cols: row mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  const int64_t n = a.dim(0), da = a.dim(1), db = b.dim(1);
  std::vector<T> out(static_cast<size_t>(n * (da + db)));
  for (int64_t r = 0; r < n; ++r) {
    std::copy_n(a.data().begin() + r * da, da, out.begin() + r * (da + db));
    std::copy_n(b.data().begin() + r * db, db, out.begin() + r * (da + db) + da);
  }
  return TensorT<T>::make_op({n, da + db}, std::move(out), {a, b},
                             [n, da, db](TensorNode<T>& self) {
                               auto& pa = *self.parents[0];
                               auto& pb = *self.parents[1];
                               if (pa.requires_grad) {
                                 pa.ensure_grad();
                                 for (int64_t r = 0; r < n; ++r)
                                   for (int64_t c = 0; c < da; ++c)
                                     pa.grad[r * da + c] += self.grad[r * (da + db) + c];
                               }
                               if (pb.requires_grad) {
                                 pb.ensure_grad();
                                 for (int64_t r = 0; r < n; ++r)
                                   for (int64_t c = 0; c < db; ++c)
                                     pb.grad[r * db + c] += self.grad[r * (da + db) + da + c];
                               }
                             });
}

template <typename T>
TensorT<T> concat_cols(const std::vector<TensorT<T>>& parts) {
  if (parts.empty()) throw contract_error("concat_cols: no inputs");
  const int64_t n = parts[0].dim(0);
  int64_t total = 0;
  std::vector<int64_t> widths;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != n)
      throw shape_error("concat_cols: row mismatch at " + shape_str(p.shape()));
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  std::vector<T> out(static_cast<size_t>(n * total));
  int64_t offset = 0;
  for (size_t k = 0; k < parts.size(); ++k) {
    const int64_t w = widths[k];
    for (int64_t r = 0; r < n; ++r)
      std::copy_n(parts[k].data().begin() + r * w, w, out.begin() + r * total + offset);
    offset += w;
  }
  return TensorT<T>::make_op({n, total}, std::move(out), parts,
                             [n, widths, total](TensorNode<T>& self) {
                               int64_t off = 0;
                               for (size_t k = 0; k < self.parents.size(); ++k) {
                                 const int64_t w = widths[k];
                                 auto& p = *self.parents[k];
                                 if (p.requires_grad) {
                                   p.ensure_grad();
                                   for (int64_t r = 0; r < n; ++r)
                                     for (int64_t c = 0; c < w; ++c)
                                       p.grad[r * w + c] += self.grad[r * total + off + c];
                                 }
                                 off += w;
                               }
                             });
}

// Embedding lookup: out.row(i) = table.row(ids[i]).
template <typename T>
TensorT<T> gather_rows(const TensorT<T>& table, const std::vector<int>& ids) {
  if (table.rank() != 2) throw shape_error("gather_rows: table must be rank-2");
  const int64_t v = table.dim(0), d = table.dim(1);
  const int64_t n = static_cast<int64_t>(ids.size());
  if (n == 0) throw contract_error("gather_rows: empty id sequence");
  for (int id : ids)
    if (id < 0 || id >= v)
      throw vocab_error("token id " + std::to_string(id) + " outside vocabulary of size " +
                        std::to_string(v));
  std::vector<T> out(static_cast<size_t>(n * d));
  for (int64_t i = 0; i < n; ++i)
    std::copy_n(table.data().begin() + static_cast<int64_t>(ids[i]) * d, d, out.begin() + i * d);
  return TensorT<T>::make_op({n, d}, std::move(out), {table}, [ids, d](TensorNode<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < ids.size(); ++i) {
      const int64_t dst = static_cast<int64_t>(ids[i]) * d;
      const int64_t src = static_cast<int64_t>(i) * d;
      for (int64_t c = 0; c < d; ++c) p.grad[dst + c] += self.grad[src + c];
    }
  });
}

// Sliding-window unfold of a sequence [n x d] into [n x k*d]. Out-of-range
// positions read as zero (the conv padding). Causal mode looks back k-1
// steps; symmetric mode looks floor(k/2) either side.
template <typename T>
TensorT<T> unfold_1d(const TensorT<T>& seq, int64_t k, bool causal) {
  if (seq.rank() != 2) throw shape_error("unfold_1d: expected rank-2, got " + shape_str(seq.shape()));
  if (k < 1) throw config_error("unfold_1d: kernel size must be >= 1, got " + std::to_string(k));
  const int64_t n = seq.dim(0), d = seq.dim(1);
  const int64_t back = causal ? k - 1 : k / 2;
  std::vector<T> out(static_cast<size_t>(n * k * d), T(0));
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < k; ++j) {
      const int64_t r = i - back + j;
      if (r < 0 || r >= n) continue;
      std::copy_n(seq.data().begin() + r * d, d, out.begin() + (i * k + j) * d);
    }
  }
  return TensorT<T>::make_op({n, k * d}, std::move(out), {seq},
                             [n, d, k, back](TensorNode<T>& self) {
                               auto& p = *self.parents[0];
                               if (!p.requires_grad) return;
                               p.ensure_grad();
                               for (int64_t i = 0; i < n; ++i) {
                                 for (int64_t j = 0; j < k; ++j) {
                                   const int64_t r = i - back + j;
                                   if (r < 0 || r >= n) continue;
                                   for (int64_t c = 0; c < d; ++c)
                                     p.grad[r * d + c] += self.grad[(i * k + j) * d + c];
                                 }
                               }
                             });
}

// Replaces masked entries (mask==0) with `fill`; gradients do not flow
// through masked entries.
template <typename T>
TensorT<T> masked_fill(const TensorT<T>& a, const std::vector<uint8_t>& keep, T fill) {
  if (static_cast<int64_t>(keep.size()) != a.numel())
    throw shape_error("masked_fill: mask size " + std::to_string(keep.size()) +
                      " does not match tensor " + shape_str(a.shape()));
  std::vector<T> out(a.data());
  for (size_t i = 0; i < keep.size(); ++i)
    if (!keep[i]) out[i] = fill;
  return TensorT<T>::make_op(a.shape(), std::move(out), {a}, [keep](TensorNode<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < keep.size(); ++i)
      if (keep[i]) p.grad[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

template <typename T>
class GradientMapT {
 public:
  void set(const TensorNode<T>* key, TensorT<T> grad) { entries_[key] = std::move(grad); }

  bool contains(const TensorT<T>& param) const { return entries_.count(param.node()) > 0; }

  // Null when the loss does not depend on the parameter (zero gradient).
  const TensorT<T>* find(const TensorT<T>& param) const {
    auto it = entries_.find(param.node());
    return it == entries_.end() ? nullptr : &it->second;
  }

  size_t size() const { return entries_.size(); }

  // Accumulates `other` scaled by `factor`. Missing entries are created.
  void add_scaled(const GradientMapT& other, T factor) {
    for (const auto& [key, grad] : other.entries_) {
      auto it = entries_.find(key);
      if (it == entries_.end()) {
        TensorT<T> copy(grad.shape(), grad.data(), false);
        for (auto& v : copy.mutable_data()) v *= factor;
        entries_.emplace(key, std::move(copy));
      } else {
        auto& dst = it->second.mutable_data();
        const auto& src = grad.data();
        for (size_t i = 0; i < dst.size(); ++i) dst[i] += factor * src[i];
      }
    }
  }

  double squared_norm() const {
    double total = 0;
    for (const auto& [key, grad] : entries_)
      for (T v : grad.data()) total += static_cast<double>(v) * static_cast<double>(v);
    return total;
  }

  void scale_all(T factor) {
    for (auto& [key, grad] : entries_)
      for (auto& v : grad.mutable_data()) v *= factor;
  }

  bool all_finite() const {
    for (const auto& [key, grad] : entries_)
      for (T v : grad.data())
        if (!std::isfinite(v)) return false;
    return true;
  }

  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::unordered_map<const TensorNode<T>*, TensorT<T>> entries_;
};

using GradientMap = GradientMapT<float>;

// Reverse-mode sweep from a scalar loss. Returns gradients for every
// requires_grad leaf the loss depends on; the transient graph grads are
// cleared afterwards so parameter tensors can be reused across sentences.
template <typename T>
GradientMapT<T> backward(const TensorT<T>& loss, T seed = T(1)) {
  if (loss.numel() != 1)
    throw contract_error("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  TensorNode<T>* root = loss.node();

  std::vector<TensorNode<T>*> order;
  if (root->requires_grad) {
    std::unordered_set<TensorNode<T>*> seen{root};
    std::vector<std::pair<TensorNode<T>*, size_t>> stack{{root, 0}};
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        TensorNode<T>* parent = node->parents[next++].get();
        if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }

  GradientMapT<T> grads;
  if (order.empty()) return grads;

  root->ensure_grad();
  root->grad[0] = seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode<T>* node = *it;
    node->ensure_grad();
    if (node->backward_fn) node->backward_fn(*node);
  }
  for (TensorNode<T>* node : order) {
    const bool leaf = !node->backward_fn;
    if (leaf && node->requires_grad)
      grads.set(node, TensorT<T>(node->shape, node->grad, false));
    node->grad.clear();
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Gradient checking (64-bit shadow)
// ---------------------------------------------------------------------------

// Compares analytic gradients against central finite differences. `f` must be
// a pure function of `inputs` returning a scalar TensorT<double>. Returns the
// max over coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
template <typename F>
double grad_check(F&& f, std::vector<TensorT<double>>& inputs, double eps = 1e-3) {
  for (auto& in : inputs) in.set_requires_grad(true);
  TensorT<double> loss = f(inputs);
  if (!std::isfinite(loss.item())) throw numeric_error("grad_check: non-finite loss");
  GradientMapT<double> analytic = backward(loss);

  double worst = 0.0;
  for (auto& in : inputs) {
    const TensorT<double>* g = analytic.find(in);
    auto& x = in.mutable_data();
    for (size_t c = 0; c < x.size(); ++c) {
      const double saved = x[c];
      x[c] = saved + eps;
      const double up = f(inputs).item();
      x[c] = saved - eps;
      const double down = f(inputs).item();
      x[c] = saved;
      if (!std::isfinite(up) || !std::isfinite(down))
        throw numeric_error("grad_check: non-finite perturbed loss");
      const double numeric = (up - down) / (2.0 * eps);
      const double a = g ? g->data()[c] : 0.0;
      const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

// Fills a tensor with uniform Xavier values in +-sqrt(6/(fan_in+fan_out)).
template <typename T>
void xavier_fill(TensorT<T>& t, RngStream& rng) {
  const auto& s = t.shape();
  const int64_t fan_in = s.size() >= 2 ? s[0] : s.back();
  const int64_t fan_out = s.back();
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& v : t.mutable_data()) v = static_cast<T>(rng.next_symmetric(bound));
}

}  // namespace contraseq
