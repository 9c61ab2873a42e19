#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace medeir {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

inline thread_local bool g_grad_enabled = true;
inline thread_local bool g_bf16_matmul = false;

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

}  // namespace detail

// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::g_grad_enabled) { detail::g_grad_enabled = false; }
  ~NoGradGuard() { detail::g_grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Rounds matmul inputs to bfloat16-representable values (round to nearest
// even) while active. Accumulation and gradients stay in the tensor type.
class Bf16MatmulGuard {
 public:
  explicit Bf16MatmulGuard(bool on = true) : prev_(detail::g_bf16_matmul) {
    detail::g_bf16_matmul = on;
  }
  ~Bf16MatmulGuard() { detail::g_bf16_matmul = prev_; }
  Bf16MatmulGuard(const Bf16MatmulGuard&) = delete;
  Bf16MatmulGuard& operator=(const Bf16MatmulGuard&) = delete;

 private:
  bool prev_;
};

inline float round_to_bf16(float x) {
  if (!std::isfinite(x)) return x;
  auto bits = std::bit_cast<std::uint32_t>(x);
  const std::uint32_t lsb = (bits >> 16) & 1u;
  bits += 0x7FFFu + lsb;
  bits &= 0xFFFF0000u;
  return std::bit_cast<float>(bits);
}

template <typename T>
class Tensor {
 public:
  using Node = detail::Node<T>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    if (data.size() != shape_numel(shape)) {
      throw ShapeError("tensor data size " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
  }

  template <typename Rng>
  static Tensor randn(Shape shape, T stddev, Rng& rng, bool requires_grad = false) {
    std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
    std::vector<T> data(shape_numel(shape));
    for (auto& x : data) x = static_cast<T>(dist(rng));
    return Tensor(std::move(shape), std::move(data), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  // Direct parameter access for initialisers and optimisers.
  std::span<T> mutable_data() { return node_->data; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  T at(std::size_t i) const { return node_->data.at(i); }
  T at(std::size_t r, std::size_t c) const {
    return node_->data.at(r * node_->shape.back() + c);
  }

  // Same values, no history.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  template <typename U>
  Tensor<U> cast(bool requires_grad = false) const {
    std::vector<U> out(node_->data.begin(), node_->data.end());
    return Tensor<U>(shape(), std::move(out), requires_grad);
  }

  // Reverse-mode sweep from a scalar. Every graph node is visited once, in
  // reverse topological order.
  void backward() const {
    if (numel() != 1) {
      throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(shape()));
    }
    if (!node_->requires_grad) return;
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        Node* p = n->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    node_->ensure_grad();
    node_->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = *it;
      if (n->backward && !n->grad.empty()) n->backward(*n);
    }
  }

  const std::shared_ptr<Node>& node() const { return node_; }

  // Builds an op result. History is recorded only when grad mode is on and
  // some parent requires grad.
  static Tensor make(Shape shape, std::vector<T> data, std::vector<Tensor> parents,
                     std::function<void(Node&)> backward) {
    Tensor out(std::move(shape), std::move(data));
    if (!detail::g_grad_enabled) return out;
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (!any) return out;
    out.node_->requires_grad = true;
    for (auto& p : parents) out.node_->parents.push_back(p.node_);
    out.node_->backward = std::move(backward);
    return out;
  }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

template <typename T>
void require(bool cond, const std::string& what) {
  if (!cond) throw ShapeError(what);
}

// Accumulates g into parent i's gradient if that parent participates.
template <typename T, typename F>
void with_parent_grad(Node<T>& self, std::size_t i, F&& f) {
  auto& p = *self.parents[i];
  if (!p.requires_grad) return;
  p.ensure_grad();
  f(p);
}

// C[m,n] (+)= A[m,k] * B[k,n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// (outer, n, inner) view of `shape` around `axis`.
inline void split_axis(const Shape& shape, std::size_t axis, std::size_t& outer, std::size_t& n,
                       std::size_t& inner) {
  if (axis >= shape.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
}

// True when `small` equals the trailing dims of `big`.
inline bool is_suffix(const Shape& big, const Shape& small) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Core ops

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require<T>(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
                     "matmul shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n, T(0));
  if constexpr (std::is_same_v<T, float>) {
    if (detail::g_bf16_matmul) {
      std::vector<float> ar(a.data().begin(), a.data().end()), br(b.data().begin(), b.data().end());
      for (auto& x : ar) x = round_to_bf16(x);
      for (auto& x : br) x = round_to_bf16(x);
      detail::gemm_nn(ar.data(), br.data(), out.data(), m, k, n);
      return Tensor<T>::make({m, n}, std::move(out), {a, b}, [m, k, n](auto& self) {
        const T* g = self.grad.data();
        detail::with_parent_grad(self, 0, [&](auto& pa) {
          detail::gemm_nt(g, self.parents[1]->data.data(), pa.grad.data(), m, n, k);
        });
        detail::with_parent_grad(self, 1, [&](auto& pb) {
          detail::gemm_tn(self.parents[0]->data.data(), g, pb.grad.data(), m, k, n);
        });
      });
    }
  }
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return Tensor<T>::make({m, n}, std::move(out), {a, b}, [m, k, n](auto& self) {
    const T* g = self.grad.data();
    detail::with_parent_grad(self, 0, [&](auto& pa) {
      detail::gemm_nt(g, self.parents[1]->data.data(), pa.grad.data(), m, n, k);
    });
    detail::with_parent_grad(self, 1, [&](auto& pb) {
      detail::gemm_tn(self.parents[0]->data.data(), g, pb.grad.data(), m, k, n);
    });
  });
}

// a[m,k] * b[n,k]^T without materialising the transpose.
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require<T>(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1),
                     "matmul_nt shape mismatch " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  std::vector<T> out(m * n, T(0));
  detail::gemm_nt(a.data().data(), b.data().data(), out.data(), m, k, n);
  return Tensor<T>::make({m, n}, std::move(out), {a, b}, [m, k, n](auto& self) {
    const T* g = self.grad.data();
    detail::with_parent_grad(self, 0, [&](auto& pa) {
      detail::gemm_nn(g, self.parents[1]->data.data(), pa.grad.data(), m, n, k);
    });
    detail::with_parent_grad(self, 1, [&](auto& pb) {
      detail::gemm_tn(g, self.parents[0]->data.data(), pb.grad.data(), m, n, k);
    });
  });
}

namespace detail {

template <typename T, typename Fwd, typename DA, typename DB>
Tensor<T> binary_suffix(const Tensor<T>& a, const Tensor<T>& b, const char* name, Fwd fwd,
                        DA da, DB db) {
  require<T>(is_suffix(a.shape(), b.shape()),
             std::string(name) + " shape mismatch " + shape_str(a.shape()) + " vs " +
                 shape_str(b.shape()));
  const std::size_t n = a.numel(), period = b.numel();
  std::vector<T> out(n);
  const T* x = a.data().data();
  const T* y = b.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(x[i], y[i % period]);
  return Tensor<T>::make(a.shape(), std::move(out), {a, b}, [n, period, da, db](auto& self) {
    const T* g = self.grad.data();
    const T* x = self.parents[0]->data.data();
    const T* y = self.parents[1]->data.data();
    with_parent_grad(self, 0, [&](auto& pa) {
      for (std::size_t i = 0; i < n; ++i) pa.grad[i] += da(g[i], x[i], y[i % period]);
    });
    with_parent_grad(self, 1, [&](auto& pb) {
      for (std::size_t i = 0; i < n; ++i) pb.grad[i % period] += db(g[i], x[i], y[i % period]);
    });
  });
}

}  // namespace detail

// Elementwise sum. `b` may be a trailing-dims suffix of `a` (bias broadcast
// over leading batch dimensions).
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_suffix(
      a, b, "add", [](T x, T y) { return x + y; }, [](T g, T, T) { return g; },
      [](T g, T, T) { return g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_suffix(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T g, T, T) { return g; },
      [](T g, T, T) { return -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_suffix(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T g, T, T y) { return g * y; },
      [](T g, T x, T) { return g * x; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& x : out) x *= s;
  return Tensor<T>::make(a.shape(), std::move(out), {a}, [s](auto& self) {
    detail::with_parent_grad(self, 0, [&](auto& p) {
      for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += s * self.grad[i];
    });
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require<T>(a.rank() == 2, "transpose needs rank 2, got " + shape_str(a.shape()));
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<T> out(r * c);
  const T* x = a.data().data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  return Tensor<T>::make({c, r}, std::move(out), {a}, [r, c](auto& self) {
    detail::with_parent_grad(self, 0, [&](auto& p) {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) p.grad[i * c + j] += self.grad[j * r + i];
    });
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  detail::require<T>(shape_numel(shape) == a.numel(),
                     "reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  std::vector<T> out(a.data().begin(), a.data().end());
  return Tensor<T>::make(std::move(shape), std::move(out), {a}, [](auto& self) {
    detail::with_parent_grad(self, 0, [&](auto& p) {
      for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += self.grad[i];
    });
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  detail::require<T>(!parts.empty(), "concat of zero tensors");
  const Shape& ref = parts[0].shape();
  detail::require<T>(axis < ref.size(), "concat axis out of range");
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    detail::require<T>(p.rank() == ref.size(), "concat rank mismatch");
    for (std::size_t d = 0; d < ref.size(); ++d) {
      if (d != axis) detail::require<T>(p.dim(d) == ref[d], "concat shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(ref));
    }
    out_shape[axis] += p.dim(axis);
  }
  std::size_t outer, n, inner;
  detail::split_axis(out_shape, axis, outer, n, inner);
  std::vector<T> out(shape_numel(out_shape));
  std::vector<std::size_t> widths;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(axis) * inner;
    const T* src = p.data().data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy(src + o * w, src + (o + 1) * w, out.data() + o * n * inner + offset);
    offset += w;
    widths.push_back(w);
  }
  return Tensor<T>::make(std::move(out_shape), std::move(out), parts,
                         [outer, n, inner, widths](auto& self) {
                           std::size_t offset = 0;
                           for (std::size_t i = 0; i < widths.size(); ++i) {
                             const std::size_t w = widths[i];
                             detail::with_parent_grad(self, i, [&](auto& p) {
                               for (std::size_t o = 0; o < outer; ++o)
                                 for (std::size_t j = 0; j < w; ++j)
                                   p.grad[o * w + j] += self.grad[o * n * inner + offset + j];
                             });
                             offset += w;
                           }
                         });
}

// Elements [begin, end) along `axis`.
template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t begin, std::size_t end) {
  detail::require<T>(axis < a.rank() && begin <= end && end <= a.dim(axis),
                     "slice [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                         std::to_string(axis) + " of " + shape_str(a.shape()));
  std::size_t outer, n, inner;
  detail::split_axis(a.shape(), axis, outer, n, inner);
  Shape out_shape = a.shape();
  out_shape[axis] = end - begin;
  const std::size_t w = (end - begin) * inner, off = begin * inner;
  std::vector<T> out(outer * w);
  const T* src = a.data().data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy(src + o * n * inner + off, src + o * n * inner + off + w, out.data() + o * w);
  return Tensor<T>::make(std::move(out_shape), std::move(out), {a},
                         [outer, n, inner, w, off](auto& self) {
                           detail::with_parent_grad(self, 0, [&](auto& p) {
                             for (std::size_t o = 0; o < outer; ++o)
                               for (std::size_t j = 0; j < w; ++j)
                                 p.grad[o * n * inner + off + j] += self.grad[o * w + j];
                           });
                         });
}

// [..., 1] -> [..., m] by repeating the last element.
template <typename T>
Tensor<T> repeat_last(const Tensor<T>& a, std::size_t m) {
  detail::require<T>(a.rank() >= 1 && a.shape().back() == 1,
                     "repeat_last needs trailing dim 1, got " + shape_str(a.shape()));
  Shape out_shape = a.shape();
  out_shape.back() = m;
  const std::size_t rows = a.numel();
  std::vector<T> out(rows * m);
  for (std::size_t r = 0; r < rows; ++r) std::fill_n(out.data() + r * m, m, a.data()[r]);
  return Tensor<T>::make(std::move(out_shape), std::move(out), {a}, [rows, m](auto& self) {
    detail::with_parent_grad(self, 0, [&](auto& p) {
      for (std::size_t r = 0; r < rows; ++r) {
        T acc = 0;
        for (std::size_t j = 0; j < m; ++j) acc += self.grad[r * m + j];
        p.grad[r] += acc;
      }
    });
  });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, std::size_t axis) {
  std::size_t outer, n, inner;
  detail::split_axis(a.shape(), axis, outer, n, inner);
  std::vector<T> out(a.numel());
  const T* x = a.data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, x[base + i * inner]);
      T z = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const T e = std::isinf(mx) && mx < 0 ? T(0) : std::exp(x[base + i * inner] - mx);
        out[base + i * inner] = e;
        z += e;
      }
      for (std::size_t i = 0; i < n; ++i) out[base + i * inner] = z > 0 ? out[base + i * inner] / z : T(0);
    }
  }
  return Tensor<T>::make(a.shape(), std::move(out), {a}, [outer, n, inner](auto& self) {
    detail::with_parent_grad(self, 0, [&](auto& p) {
      const T* y = self.data.data();
      const T* g = self.grad.data();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * n * inner + in;
          T dot = 0;
          for (std::size_t i = 0; i < n; ++i) dot += g[base + i * inner] * y[base + i * inner];
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t k = base + i * inner;
            p.grad[k] += y[k] * (g[k] - dot);
          }
        }
      }
    });
  });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& a, std::size_t axis) {
  std::size_t outer, n, inner;
  detail::split_axis(a.shape(), axis, outer, n, inner);
  std::vector<T> out(a.numel());
  const T* x = a.data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, x[base + i * inner]);
      T z = 0;
      for (std::size_t i = 0; i < n; ++i) z += std::exp(x[base + i * inner] - mx);
      const T lse = mx + std::log(z);
      for (std::size_t i = 0; i < n; ++i) out[base + i * inner] = x[base + i * inner] - lse;
    }
  }
  return Tensor<T>::make(a.shape(), std::move(out), {a}, [outer, n, inner](auto& self) {
    detail::with_parent_grad(self, 0, [&](auto& p) {
      const T* y = self.data.data();
      const T* g = self.grad.data();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * n * inner + in;
          T gsum = 0;
          for (std::size_t i = 0; i < n; ++i) gsum += g[base + i * inner];
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t k = base + i * inner;
            p.grad[k] += g[k] - std::exp(y[k]) * gsum;
          }
        }
      }
    });
  });
}

// Normalises over the last axis; `gamma`/`beta` of shape [last] are optional.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  detail::require<T>(x.rank() >= 1 && x.shape().back() > 0,
                     "layer_norm over zero-length axis in " + shape_str(x.shape()));
  const std::size_t d = x.shape().back(), rows = x.numel() / d;
  const bool affine = gamma.defined();
  if (affine) {
    detail::require<T>(gamma.shape() == Shape{d} && beta.defined() && beta.shape() == Shape{d},
                       "layer_norm affine params must be [" + std::to_string(d) + "]");
  }
  std::vector<T> xhat(x.numel()), out(x.numel()), rstd(rows);
  const T* xv = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv + r * d;
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<T>(d);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (row[j] - mean) * rstd[r];
      xhat[r * d + j] = h;
      out[r * d + j] = affine ? h * gamma.data()[j] + beta.data()[j] : h;
    }
  }
  std::vector<Tensor<T>> parents{x};
  if (affine) {
    parents.push_back(gamma);
    parents.push_back(beta);
  }
  return Tensor<T>::make(
      x.shape(), std::move(out), parents,
      [rows, d, affine, xhat = std::move(xhat), rstd = std::move(rstd)](auto& self) {
        const T* g = self.grad.data();
        const T* gam = affine ? self.parents[1]->data.data() : nullptr;
        detail::with_parent_grad(self, 0, [&](auto& px) {
          std::vector<T> gh(d);
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_gh = 0, mean_ghx = 0;
            for (std::size_t j = 0; j < d; ++j) {
              gh[j] = affine ? g[r * d + j] * gam[j] : g[r * d + j];
              mean_gh += gh[j];
              mean_ghx += gh[j] * xhat[r * d + j];
            }
            mean_gh /= static_cast<T>(d);
            mean_ghx /= static_cast<T>(d);
            for (std::size_t j = 0; j < d; ++j)
              px.grad[r * d + j] += rstd[r] * (gh[j] - mean_gh - xhat[r * d + j] * mean_ghx);
          }
        });
        if (!affine) return;
        detail::with_parent_grad(self, 1, [&](auto& pg) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) pg.grad[j] += g[r * d + j] * xhat[r * d + j];
        });
        detail::with_parent_grad(self, 2, [&](auto& pb) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) pb.grad[j] += g[r * d + j];
        });
      });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, T eps) {
  return layer_norm(x, Tensor<T>(), Tensor<T>(), eps);
}

namespace detail {

template <typename T, typename F, typename D>
Tensor<T> unary(const Tensor<T>& a, F f, D df) {
  std::vector<T> out(a.numel());
  const T* x = a.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return Tensor<T>::make(a.shape(), std::move(out), {a}, [df](auto& self) {
    with_parent_grad(self, 0, [&](auto& p) {
      const T* x = p.data.data();
      const T* y = self.data.data();
      for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += self.grad[i] * df(x[i], y[i]);
    });
  });
}

}  // namespace detail

// Tanh approximation of GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T k = T(0.044715);
  return detail::unary(
      a,
      [](T x) { return T(0.5) * x * (T(1) + std::tanh(c * (x + k * x * x * x))); },
      [](T x, T) {
        const T u = c * (x + k * x * x * x);
        const T t = std::tanh(u);
        const T du = c * (T(1) + T(3) * k * x * x);
        return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
      });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
  return detail::unary(
      a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return detail::unary(
      a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = 0;
  for (T x : a.data()) s += x;
  return Tensor<T>::make({}, {s}, {a}, [](auto& self) {
    detail::with_parent_grad(self, 0, [&](auto& p) {
      for (auto& g : p.grad) g += self.grad[0];
    });
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  detail::require<T>(a.numel() > 0, "mean of empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

// Positions with mask != 0 are set to `value` and receive no gradient.
template <typename T>
Tensor<T> masked_fill(const Tensor<T>& a, const std::vector<std::uint8_t>& mask, T value) {
  detail::require<T>(mask.size() == a.numel(), "masked_fill mask size mismatch");
  std::vector<T> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < out.size(); ++i)
    if (mask[i]) out[i] = value;
  return Tensor<T>::make(a.shape(), std::move(out), {a}, [mask](auto& self) {
    detail::with_parent_grad(self, 0, [&](auto& p) {
      for (std::size_t i = 0; i < p.grad.size(); ++i)
        if (!mask[i]) p.grad[i] += self.grad[i];
    });
  });
}

// Mean negative log-likelihood of `targets` under row-wise softmax(logits).
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<std::size_t>& targets) {
  detail::require<T>(logits.rank() == 2 && logits.dim(0) == targets.size() && !targets.empty(),
                     "cross_entropy expects [N,C] logits and N targets");
  const std::size_t rows = logits.dim(0), c = logits.dim(1);
  std::vector<T> probs(logits.numel());
  T loss = 0;
  const T* x = logits.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] >= c) throw std::out_of_range("cross_entropy target out of range");
    const T* row = x + r * c;
    T mx = *std::max_element(row, row + c);
    T z = 0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const T lse = mx + std::log(z);
    loss += lse - row[targets[r]];
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] = std::exp(row[j] - lse);
  }
  loss /= static_cast<T>(rows);
  return Tensor<T>::make({}, {loss}, {logits},
                         [rows, c, targets, probs = std::move(probs)](auto& self) {
                           detail::with_parent_grad(self, 0, [&](auto& p) {
                             const T g = self.grad[0] / static_cast<T>(rows);
                             for (std::size_t r = 0; r < rows; ++r) {
                               for (std::size_t j = 0; j < c; ++j)
                                 p.grad[r * c + j] += g * probs[r * c + j];
                               p.grad[r * c + targets[r]] -= g;
                             }
                           });
                         });
}

// x / max(||x||_2, eps) along `axis`.
template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& a, std::size_t axis, T eps = T(1e-12)) {
  std::size_t outer, n, inner;
  detail::split_axis(a.shape(), axis, outer, n, inner);
  std::vector<T> out(a.numel()), norms(outer * inner);
  const T* x = a.data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T ss = 0;
      for (std::size_t i = 0; i < n; ++i) ss += x[base + i * inner] * x[base + i * inner];
      const T nrm = std::max(std::sqrt(ss), eps);
      norms[o * inner + in] = nrm;
      for (std::size_t i = 0; i < n; ++i) out[base + i * inner] = x[base + i * inner] / nrm;
    }
  }
  return Tensor<T>::make(
      a.shape(), std::move(out), {a},
      [outer, n, inner, eps, norms = std::move(norms)](auto& self) {
        detail::with_parent_grad(self, 0, [&](auto& p) {
          const T* y = self.data.data();
          const T* g = self.grad.data();
          for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t in = 0; in < inner; ++in) {
              const std::size_t base = o * n * inner + in;
              const T nrm = norms[o * inner + in];
              if (nrm <= eps) {
                for (std::size_t i = 0; i < n; ++i) p.grad[base + i * inner] += g[base + i * inner] / nrm;
                continue;
              }
              T dot = 0;
              for (std::size_t i = 0; i < n; ++i) dot += g[base + i * inner] * y[base + i * inner];
              for (std::size_t i = 0; i < n; ++i) {
                const std::size_t k = base + i * inner;
                p.grad[k] += (g[k] - y[k] * dot) / nrm;
              }
            }
          }
        });
      });
}

// Rows of `table` [V,d] selected by `ids` -> [n,d].
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, const std::vector<std::int32_t>& ids) {
  detail::require<T>(table.rank() == 2, "gather_rows needs a [V,d] table");
  const std::size_t v = table.dim(0), d = table.dim(1);
  std::vector<T> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      throw std::out_of_range("token id " + std::to_string(ids[i]) + " outside vocabulary of " +
                              std::to_string(v));
    }
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  return Tensor<T>::make({ids.size(), d}, std::move(out), {table}, [ids, d](auto& self) {
    detail::with_parent_grad(self, 0, [&](auto& p) {
      for (std::size_t i = 0; i < ids.size(); ++i) {
        T* dst = p.grad.data() + static_cast<std::size_t>(ids[i]) * d;
        const T* src = self.grad.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  });
}

// Flat-index gather -> [n].
template <typename T>
Tensor<T> take(const Tensor<T>& a, const std::vector<std::size_t>& flat_indices) {
  std::vector<T> out(flat_indices.size());
  for (std::size_t i = 0; i < flat_indices.size(); ++i) {
    if (flat_indices[i] >= a.numel()) throw std::out_of_range("take index out of range");
    out[i] = a.data()[flat_indices[i]];
  }
  return Tensor<T>::make({flat_indices.size()}, std::move(out), {a}, [flat_indices](auto& self) {
    detail::with_parent_grad(self, 0, [&](auto& p) {
      for (std::size_t i = 0; i < flat_indices.size(); ++i) p.grad[flat_indices[i]] += self.grad[i];
    });
  });
}

}  // namespace medeir
