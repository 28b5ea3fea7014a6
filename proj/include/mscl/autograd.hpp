#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major tensors.
//
// A Var is a shared handle to a graph node. Ops build new nodes whose backward
// closures accumulate into their parents' gradients. Leaves that require
// gradients (parameters, or an input volume for attribution) accumulate across
// calls to backward() until zero_grad() is called; interior gradients are reset
// at the start of every backward().

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "mscl/error.hpp"

namespace mscl::ag {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<T>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  static Var leaf(Shape shape, std::vector<T> values, bool requires_grad = true) {
    if (numel(shape) != values.size())
      throw ConfigError("tensor shape " + to_string(shape) + " does not match " +
                        std::to_string(values.size()) + " values");
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }
  static Var constant(Shape shape, std::vector<T> values) {
    return leaf(std::move(shape), std::move(values), false);
  }
  static Var zeros(Shape shape, bool requires_grad = false) {
    std::vector<T> v(numel(shape), T(0));
    return leaf(std::move(shape), std::move(v), requires_grad);
  }
  static Var scalar(T v) { return constant({1}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::span<const T> value() const { return node_->value; }
  std::span<T> value_mut() { return node_->value; }
  std::span<const T> grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  T item() const {
    if (size() != 1) throw ConfigError("item() on tensor of shape " + to_string(shape()));
    return node_->value[0];
  }
  void zero_grad() { node_->grad.clear(); }
  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <class T>
Var<T> make_op(Shape shape, std::vector<T> value, std::vector<Var<T>> inputs,
               std::function<void(Node<T>&)> bw) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  for (const auto& in : inputs)
    if (in.defined() && in.requires_grad()) n->requires_grad = true;
  if (n->requires_grad) {
    for (auto& in : inputs)
      if (in.defined()) n->parents.push_back(in.ptr());
    n->backward = std::move(bw);
  }
  return Var<T>(std::move(n));
}

template <class T>
bool wants(const std::shared_ptr<Node<T>>& p) {
  return p && p->requires_grad;
}

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

}  // namespace detail

/// Runs reverse accumulation from `root`. A scalar root is seeded with 1; any
/// other root needs an explicit seed of matching size.
template <class T>
void backward(const Var<T>& root, std::span<const T> seed = {}) {
  if (!root.requires_grad()) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node(), 0}};
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<T>* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (Node<T>* n : order)
    if (n->backward) n->grad.clear();

  auto& g = root.node()->ensure_grad();
  if (seed.empty()) {
    detail::require(g.size() == 1, "backward() on non-scalar root needs a seed");
    g[0] += T(1);
  } else {
    detail::require(seed.size() == g.size(), "backward() seed size mismatch");
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise and reduction ops

template <class T, class F, class DF>
Var<T> unary(const Var<T>& a, F f, DF df) {
  std::vector<T> out(a.size());
  auto av = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  auto pa = a.ptr();
  return detail::make_op<T>(a.shape(), std::move(out), {a}, [pa, df](Node<T>& self) {
    auto& g = pa->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(pa->value[i], self.value[i]);
  });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require(a.size() == b.size(), "add: shape mismatch " + to_string(a.shape()) + " vs " +
                                            to_string(b.shape()));
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  auto pa = a.ptr(), pb = b.ptr();
  return detail::make_op<T>(a.shape(), std::move(out), {a, b}, [pa, pb](Node<T>& self) {
    for (auto* p : {pa.get(), pb.get()}) {
      if (!p->requires_grad) continue;
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require(a.size() == b.size(), "sub: shape mismatch " + to_string(a.shape()) + " vs " +
                                            to_string(b.shape()));
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  auto pa = a.ptr(), pb = b.ptr();
  return detail::make_op<T>(a.shape(), std::move(out), {a, b}, [pa, pb](Node<T>& self) {
    if (pa->requires_grad) {
      auto& g = pa->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require(a.size() == b.size(), "mul: shape mismatch");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  auto pa = a.ptr(), pb = b.ptr();
  return detail::make_op<T>(a.shape(), std::move(out), {a, b}, [pa, pb](Node<T>& self) {
    if (pa->requires_grad) {
      auto& g = pa->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T c) {
  return unary<T>(a, [c](T x) { return c * x; }, [c](T, T) { return c; });
}

template <class T>
Var<T> leaky_relu(const Var<T>& a, T slope) {
  return unary<T>(
      a, [slope](T x) { return x > T(0) ? x : slope * x; },
      [slope](T x, T) { return x > T(0) ? T(1) : slope; });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  return leaky_relu<T>(a, T(0));
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  return unary<T>(
      a, [](T x) { return T(1) / (T(1) + std::exp(-x)); }, [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Var<T> tanh(const Var<T>& a) {
  return unary<T>(a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

/// c * tanh(x / c): a smooth clip into (-c, c).
template <class T>
Var<T> soft_clip(const Var<T>& a, T c) {
  return unary<T>(
      a, [c](T x) { return c * std::tanh(x / c); },
      [c](T, T y) {
        const T t = y / c;
        return T(1) - t * t;
      });
}

template <class T>
Var<T> sum(const Var<T>& a) {
  T s = 0;
  for (T v : a.value()) s += v;
  auto pa = a.ptr();
  return detail::make_op<T>({1}, {s}, {a}, [pa](Node<T>& self) {
    auto& g = pa->ensure_grad();
    for (auto& gi : g) gi += self.grad[0];
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  return scale<T>(sum<T>(a), T(1) / static_cast<T>(a.size()));
}

template <class T>
Var<T> sum_squares(const Var<T>& a) {
  T s = 0;
  for (T v : a.value()) s += v * v;
  auto pa = a.ptr();
  return detail::make_op<T>({1}, {s}, {a}, [pa](Node<T>& self) {
    auto& g = pa->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += T(2) * pa->value[i] * self.grad[0];
  });
}

template <class T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  detail::require(numel(shape) == a.size(),
                  "reshape: " + to_string(a.shape()) + " -> " + to_string(shape));
  std::vector<T> out(a.value().begin(), a.value().end());
  auto pa = a.ptr();
  return detail::make_op<T>(std::move(shape), std::move(out), {a}, [pa](Node<T>& self) {
    auto& g = pa->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// [m,k] x [k,n] -> [m,n]
template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
                  "matmul: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n, T(0));
  auto av = a.value();
  auto bv = b.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = av[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * bv[p * n + j];
    }
  auto pa = a.ptr(), pb = b.ptr();
  return detail::make_op<T>({m, n}, std::move(out), {a, b}, [pa, pb, m, k, n](Node<T>& self) {
    const auto& g = self.grad;
    if (pa->requires_grad) {
      auto& ga = pa->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          T s = 0;
          for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * pb->value[p * n + j];
          ga[i * k + p] += s;
        }
    }
    if (pb->requires_grad) {
      auto& gb = pb->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const T aip = pa->value[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
        }
    }
  });
}

/// x [N,in] * W[out,in]^T + b[out] -> [N,out]. `b` may be undefined.
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  detail::require(x.rank() == 2 && w.rank() == 2 && x.dim(1) == w.dim(1),
                  "linear: input " + to_string(x.shape()) + " weight " + to_string(w.shape()));
  const std::size_t n = x.dim(0), in = x.dim(1), out_dim = w.dim(0);
  if (b.defined()) detail::require(b.size() == out_dim, "linear: bias size mismatch");
  std::vector<T> out(n * out_dim);
  auto xv = x.value();
  auto wv = w.value();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t o = 0; o < out_dim; ++o) {
      T s = b.defined() ? b.value()[o] : T(0);
      const T* xr = xv.data() + r * in;
      const T* wr = wv.data() + o * in;
      for (std::size_t i = 0; i < in; ++i) s += xr[i] * wr[i];
      out[r * out_dim + o] = s;
    }
  auto px = x.ptr(), pw = w.ptr();
  auto pb = b.defined() ? b.ptr() : nullptr;
  std::vector<Var<T>> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return detail::make_op<T>({n, out_dim}, std::move(out), std::move(inputs),
                            [px, pw, pb, n, in, out_dim](Node<T>& self) {
                              const auto& g = self.grad;
                              if (px->requires_grad) {
                                auto& gx = px->ensure_grad();
                                for (std::size_t r = 0; r < n; ++r)
                                  for (std::size_t o = 0; o < out_dim; ++o) {
                                    const T go = g[r * out_dim + o];
                                    if (go == T(0)) continue;
                                    const T* wr = pw->value.data() + o * in;
                                    T* gxr = gx.data() + r * in;
                                    for (std::size_t i = 0; i < in; ++i) gxr[i] += go * wr[i];
                                  }
                              }
                              if (pw->requires_grad) {
                                auto& gw = pw->ensure_grad();
                                for (std::size_t r = 0; r < n; ++r)
                                  for (std::size_t o = 0; o < out_dim; ++o) {
                                    const T go = g[r * out_dim + o];
                                    if (go == T(0)) continue;
                                    const T* xr = px->value.data() + r * in;
                                    T* gwr = gw.data() + o * in;
                                    for (std::size_t i = 0; i < in; ++i) gwr[i] += go * xr[i];
                                  }
                              }
                              if (detail::wants(pb)) {
                                auto& gb = pb->ensure_grad();
                                for (std::size_t r = 0; r < n; ++r)
                                  for (std::size_t o = 0; o < out_dim; ++o) gb[o] += g[r * out_dim + o];
                              }
                            });
}

// ---------------------------------------------------------------------------
// Volumetric convolution

namespace detail {

struct ConvGeom {
  int batch = 0, cin = 0, cout = 0, k = 0, stride = 1, pad = 0;
  int in[3]{}, out[3]{};
};

struct Range {
  int lo, hi;  // inclusive
};

// Output positions o with 0 <= o*stride - pad + kk < in_extent.
inline Range valid_range(int in_extent, int out_extent, int kk, int stride, int pad) {
  const int a = pad - kk;
  int lo = a <= 0 ? 0 : (a + stride - 1) / stride;
  const int b = in_extent - 1 + pad - kk;
  int hi = b < 0 ? -1 : std::min(out_extent - 1, b / stride);
  return {lo, hi};
}

// Shared loop nest for the three convolution kernels. `op(in_off, out_off, kernel_off)`
// is called per (input row, output row, tap) with the innermost x loop left to the caller.
template <class F>
void conv_loops(const ConvGeom& g, F&& inner) {
  const std::size_t in_vox = std::size_t(g.in[0]) * g.in[1] * g.in[2];
  const std::size_t out_vox = std::size_t(g.out[0]) * g.out[1] * g.out[2];
  const int k3 = g.k * g.k * g.k;
  std::vector<Range> rz(g.k), ry(g.k), rx(g.k);
  for (int kk = 0; kk < g.k; ++kk) {
    rz[kk] = valid_range(g.in[0], g.out[0], kk, g.stride, g.pad);
    ry[kk] = valid_range(g.in[1], g.out[1], kk, g.stride, g.pad);
    rx[kk] = valid_range(g.in[2], g.out[2], kk, g.stride, g.pad);
  }
  for (int b = 0; b < g.batch; ++b)
    for (int o = 0; o < g.cout; ++o)
      for (int c = 0; c < g.cin; ++c) {
        const std::size_t in_base = (std::size_t(b) * g.cin + c) * in_vox;
        const std::size_t out_base = (std::size_t(b) * g.cout + o) * out_vox;
        const std::size_t w_base = (std::size_t(o) * g.cin + c) * k3;
        for (int kz = 0; kz < g.k; ++kz)
          for (int ky = 0; ky < g.k; ++ky)
            for (int kx = 0; kx < g.k; ++kx) {
              const std::size_t w_idx = w_base + (std::size_t(kz) * g.k + ky) * g.k + kx;
              for (int oz = rz[kz].lo; oz <= rz[kz].hi; ++oz) {
                const int iz = oz * g.stride - g.pad + kz;
                for (int oy = ry[ky].lo; oy <= ry[ky].hi; ++oy) {
                  const int iy = oy * g.stride - g.pad + ky;
                  const std::size_t in_row = in_base + (std::size_t(iz) * g.in[1] + iy) * g.in[2];
                  const std::size_t out_row = out_base + (std::size_t(oz) * g.out[1] + oy) * g.out[2];
                  inner(in_row, out_row, w_idx, rx[kx].lo, rx[kx].hi, kx);
                }
              }
            }
      }
}

template <class T>
void conv_forward(const ConvGeom& g, const T* x, const T* w, T* y) {
  const int s = g.stride, p = g.pad;
  conv_loops(g, [&](std::size_t in_row, std::size_t out_row, std::size_t w_idx, int lo, int hi, int kx) {
    const T wv = w[w_idx];
    const T* xr = x + in_row;
    T* yr = y + out_row;
    for (int ox = lo; ox <= hi; ++ox) yr[ox] += wv * xr[ox * s - p + kx];
  });
}

template <class T>
void conv_backward_data(const ConvGeom& g, const T* gy, const T* w, T* gx) {
  const int s = g.stride, p = g.pad;
  conv_loops(g, [&](std::size_t in_row, std::size_t out_row, std::size_t w_idx, int lo, int hi, int kx) {
    const T wv = w[w_idx];
    T* gxr = gx + in_row;
    const T* gyr = gy + out_row;
    for (int ox = lo; ox <= hi; ++ox) gxr[ox * s - p + kx] += wv * gyr[ox];
  });
}

template <class T>
void conv_backward_weight(const ConvGeom& g, const T* gy, const T* x, T* gw) {
  const int s = g.stride, p = g.pad;
  conv_loops(g, [&](std::size_t in_row, std::size_t out_row, std::size_t w_idx, int lo, int hi, int kx) {
    const T* xr = x + in_row;
    const T* gyr = gy + out_row;
    T acc = 0;
    for (int ox = lo; ox <= hi; ++ox) acc += gyr[ox] * xr[ox * s - p + kx];
    gw[w_idx] += acc;
  });
}

inline int conv_out_extent(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }
inline int deconv_out_extent(int in, int k, int stride, int pad) { return (in - 1) * stride - 2 * pad + k; }

}  // namespace detail

/// x [B,Cin,D,H,W], w [Cout,Cin,k,k,k], b [Cout] (optional) -> [B,Cout,D',H',W'].
template <class T>
Var<T> conv3d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
  detail::require(x.rank() == 5 && w.rank() == 5 && x.dim(1) == w.dim(1),
                  "conv3d: input " + to_string(x.shape()) + " weight " + to_string(w.shape()));
  detail::ConvGeom g;
  g.batch = int(x.dim(0));
  g.cin = int(x.dim(1));
  g.cout = int(w.dim(0));
  g.k = int(w.dim(2));
  g.stride = stride;
  g.pad = pad;
  for (int a = 0; a < 3; ++a) {
    g.in[a] = int(x.dim(2 + a));
    g.out[a] = detail::conv_out_extent(g.in[a], g.k, stride, pad);
    detail::require(g.out[a] > 0, "conv3d: empty output for input " + to_string(x.shape()));
  }
  const std::size_t out_vox = std::size_t(g.out[0]) * g.out[1] * g.out[2];
  std::vector<T> out(std::size_t(g.batch) * g.cout * out_vox, T(0));
  if (b.defined())
    for (int bb = 0; bb < g.batch; ++bb)
      for (int o = 0; o < g.cout; ++o)
        std::fill_n(out.begin() + (std::size_t(bb) * g.cout + o) * out_vox, out_vox, b.value()[o]);
  detail::conv_forward(g, x.value().data(), w.value().data(), out.data());
  auto px = x.ptr(), pw = w.ptr();
  auto pb = b.defined() ? b.ptr() : nullptr;
  std::vector<Var<T>> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  Shape shape{std::size_t(g.batch), std::size_t(g.cout), std::size_t(g.out[0]), std::size_t(g.out[1]),
              std::size_t(g.out[2])};
  return detail::make_op<T>(std::move(shape), std::move(out), std::move(inputs),
                            [px, pw, pb, g, out_vox](Node<T>& self) {
                              if (px->requires_grad)
                                detail::conv_backward_data(g, self.grad.data(), pw->value.data(),
                                                           px->ensure_grad().data());
                              if (pw->requires_grad)
                                detail::conv_backward_weight(g, self.grad.data(), px->value.data(),
                                                             pw->ensure_grad().data());
                              if (detail::wants(pb)) {
                                auto& gb = pb->ensure_grad();
                                for (int bb = 0; bb < g.batch; ++bb)
                                  for (int o = 0; o < g.cout; ++o) {
                                    const T* gr = self.grad.data() + (std::size_t(bb) * g.cout + o) * out_vox;
                                    T s = 0;
                                    for (std::size_t v = 0; v < out_vox; ++v) s += gr[v];
                                    gb[o] += s;
                                  }
                              }
                            });
}

/// Transposed convolution, the adjoint of conv3d in its data argument.
/// x [B,Cin,D,H,W], w [Cin,Cout,k,k,k], b [Cout] -> [B,Cout,D',H',W'].
template <class T>
Var<T> conv_transpose3d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
  detail::require(x.rank() == 5 && w.rank() == 5 && x.dim(1) == w.dim(0),
                  "conv_transpose3d: input " + to_string(x.shape()) + " weight " + to_string(w.shape()));
  // Geometry of the forward convolution whose data-adjoint this is: it maps the
  // (larger) output back onto x.
  detail::ConvGeom g;
  g.batch = int(x.dim(0));
  g.cin = int(w.dim(1));
  g.cout = int(x.dim(1));
  g.k = int(w.dim(2));
  g.stride = stride;
  g.pad = pad;
  for (int a = 0; a < 3; ++a) {
    g.out[a] = int(x.dim(2 + a));
    g.in[a] = detail::deconv_out_extent(g.out[a], g.k, stride, pad);
  }
  const std::size_t vox = std::size_t(g.in[0]) * g.in[1] * g.in[2];
  std::vector<T> out(std::size_t(g.batch) * g.cin * vox, T(0));
  if (b.defined())
    for (int bb = 0; bb < g.batch; ++bb)
      for (int c = 0; c < g.cin; ++c)
        std::fill_n(out.begin() + (std::size_t(bb) * g.cin + c) * vox, vox, b.value()[c]);
  detail::conv_backward_data(g, x.value().data(), w.value().data(), out.data());
  auto px = x.ptr(), pw = w.ptr();
  auto pb = b.defined() ? b.ptr() : nullptr;
  std::vector<Var<T>> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  Shape shape{std::size_t(g.batch), std::size_t(g.cin), std::size_t(g.in[0]), std::size_t(g.in[1]),
              std::size_t(g.in[2])};
  return detail::make_op<T>(std::move(shape), std::move(out), std::move(inputs),
                            [px, pw, pb, g, vox](Node<T>& self) {
                              if (px->requires_grad)
                                detail::conv_forward(g, self.grad.data(), pw->value.data(),
                                                     px->ensure_grad().data());
                              if (pw->requires_grad)
                                detail::conv_backward_weight(g, px->value.data(), self.grad.data(),
                                                             pw->ensure_grad().data());
                              if (detail::wants(pb)) {
                                auto& gb = pb->ensure_grad();
                                for (int bb = 0; bb < g.batch; ++bb)
                                  for (int c = 0; c < g.cin; ++c) {
                                    const T* gr = self.grad.data() + (std::size_t(bb) * g.cin + c) * vox;
                                    T s = 0;
                                    for (std::size_t v = 0; v < vox; ++v) s += gr[v];
                                    gb[c] += s;
                                  }
                              }
                            });
}

/// [B,C,D,H,W] -> [B,S,C] with S = D*H*W.
template <class T>
Var<T> channels_last(const Var<T>& x) {
  detail::require(x.rank() == 5, "channels_last: expected rank-5 tensor, got " + to_string(x.shape()));
  const std::size_t batch = x.dim(0), ch = x.dim(1), s = x.dim(2) * x.dim(3) * x.dim(4);
  std::vector<T> out(x.size());
  auto xv = x.value();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t v = 0; v < s; ++v) out[(b * s + v) * ch + c] = xv[(b * ch + c) * s + v];
  auto px = x.ptr();
  return detail::make_op<T>({batch, s, ch}, std::move(out), {x}, [px, batch, ch, s](Node<T>& self) {
    auto& g = px->ensure_grad();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t c = 0; c < ch; ++c)
        for (std::size_t v = 0; v < s; ++v) g[(b * ch + c) * s + v] += self.grad[(b * s + v) * ch + c];
  });
}

// ---------------------------------------------------------------------------
// Contrastive building blocks

/// Scaled dot-product scores between every local of sample i and every global
/// of sample j: locals [B,S,d], globals [B,d] -> [S,B,B] with
/// out[s,i,j] = factor * <locals[i,s,:], globals[j,:]>.
template <class T>
Var<T> critic_scores(const Var<T>& locals, const Var<T>& globals, T factor) {
  detail::require(locals.rank() == 3 && globals.rank() == 2 && locals.dim(0) == globals.dim(0) &&
                      locals.dim(2) == globals.dim(1),
                  "critic_scores: locals " + to_string(locals.shape()) + " globals " +
                      to_string(globals.shape()));
  const std::size_t batch = locals.dim(0), s = locals.dim(1), d = locals.dim(2);
  std::vector<T> out(s * batch * batch);
  auto lv = locals.value();
  auto gv = globals.value();
  for (std::size_t loc = 0; loc < s; ++loc)
    for (std::size_t i = 0; i < batch; ++i) {
      const T* l = lv.data() + (i * s + loc) * d;
      for (std::size_t j = 0; j < batch; ++j) {
        const T* gj = gv.data() + j * d;
        T acc = 0;
        for (std::size_t c = 0; c < d; ++c) acc += l[c] * gj[c];
        out[(loc * batch + i) * batch + j] = factor * acc;
      }
    }
  auto pl = locals.ptr(), pg = globals.ptr();
  return detail::make_op<T>({s, batch, batch}, std::move(out), {locals, globals},
                            [pl, pg, batch, s, d, factor](Node<T>& self) {
                              T* gl = pl->requires_grad ? pl->ensure_grad().data() : nullptr;
                              T* gg = pg->requires_grad ? pg->ensure_grad().data() : nullptr;
                              for (std::size_t loc = 0; loc < s; ++loc)
                                for (std::size_t i = 0; i < batch; ++i)
                                  for (std::size_t j = 0; j < batch; ++j) {
                                    const T go = factor * self.grad[(loc * batch + i) * batch + j];
                                    if (go == T(0)) continue;
                                    const std::size_t lo = (i * s + loc) * d, go_off = j * d;
                                    for (std::size_t c = 0; c < d; ++c) {
                                      if (gl) gl[lo + c] += go * pg->value[go_off + c];
                                      if (gg) gg[go_off + c] += go * pl->value[lo + c];
                                    }
                                  }
                            });
}

/// locals [B,S,d] -> [B,d], row b taken from location index[b].
template <class T>
Var<T> gather_locations(const Var<T>& locals, std::vector<std::size_t> index) {
  detail::require(locals.rank() == 3 && index.size() == locals.dim(0), "gather_locations: bad index");
  const std::size_t batch = locals.dim(0), s = locals.dim(1), d = locals.dim(2);
  std::vector<T> out(batch * d);
  for (std::size_t b = 0; b < batch; ++b) {
    detail::require(index[b] < s, "gather_locations: location out of range");
    std::copy_n(locals.value().data() + (b * s + index[b]) * d, d, out.data() + b * d);
  }
  auto pl = locals.ptr();
  return detail::make_op<T>({batch, d}, std::move(out), {locals},
                            [pl, index = std::move(index), s, d](Node<T>& self) {
                              auto& g = pl->ensure_grad();
                              for (std::size_t b = 0; b < index.size(); ++b)
                                for (std::size_t c = 0; c < d; ++c)
                                  g[(b * s + index[b]) * d + c] += self.grad[b * d + c];
                            });
}

/// InfoNCE over G independent N x N score matrices [G,N,N], diagonal = positive:
/// mean over (g,i) of s_ii - log((1/N) sum_{j != i} exp(s_ij)).
template <class T>
Var<T> infonce(const Var<T>& scores) {
  detail::require(scores.rank() == 3 && scores.dim(1) == scores.dim(2),
                  "infonce: expected [G,N,N] scores, got " + to_string(scores.shape()));
  const std::size_t groups = scores.dim(0), n = scores.dim(1);
  if (n < 2) throw ConfigError("infonce: batch of " + std::to_string(n) + " has no negatives (need N >= 2)");
  const T log_n = std::log(static_cast<T>(n));
  auto sv = scores.value();
  T total = 0;
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t i = 0; i < n; ++i) {
      const T* row = sv.data() + (g * n + i) * n;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j)
        if (j != i) mx = std::max(mx, row[j]);
      T acc = 0;
      for (std::size_t j = 0; j < n; ++j)
        if (j != i) acc += std::exp(row[j] - mx);
      total += row[i] - (mx + std::log(acc)) + log_n;
    }
  const T inv = T(1) / static_cast<T>(groups * n);
  auto ps = scores.ptr();
  return detail::make_op<T>({1}, {total * inv}, {scores}, [ps, groups, n, inv](Node<T>& self) {
    auto& g = ps->ensure_grad();
    const T go = self.grad[0] * inv;
    for (std::size_t gr = 0; gr < groups; ++gr)
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t off = (gr * n + i) * n;
        const T* row = ps->value.data() + off;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < n; ++j)
          if (j != i) mx = std::max(mx, row[j]);
        T acc = 0;
        for (std::size_t j = 0; j < n; ++j)
          if (j != i) acc += std::exp(row[j] - mx);
        for (std::size_t j = 0; j < n; ++j)
          g[off + j] += j == i ? go : -go * std::exp(row[j] - mx) / acc;
      }
  });
}

/// Mean softmax cross-entropy; logits [B,K], labels in 0..K-1.
template <class T>
Var<T> cross_entropy(const Var<T>& logits, std::vector<int> labels) {
  detail::require(logits.rank() == 2 && logits.dim(0) == labels.size(), "cross_entropy: shape mismatch");
  const std::size_t batch = logits.dim(0), k = logits.dim(1);
  std::vector<T> prob(batch * k);
  T total = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] < 0 || std::size_t(labels[b]) >= k)
      throw DataError("cross_entropy: label " + std::to_string(labels[b]) + " outside 0.." +
                      std::to_string(k - 1));
    const T* row = logits.value().data() + b * k;
    const T mx = *std::max_element(row, row + k);
    T acc = 0;
    for (std::size_t c = 0; c < k; ++c) acc += std::exp(row[c] - mx);
    const T lse = mx + std::log(acc);
    for (std::size_t c = 0; c < k; ++c) prob[b * k + c] = std::exp(row[c] - lse);
    total += lse - row[labels[b]];
  }
  auto pl = logits.ptr();
  return detail::make_op<T>(
      {1}, {total / static_cast<T>(batch)}, {logits},
      [pl, prob = std::move(prob), labels = std::move(labels), batch, k](Node<T>& self) {
        auto& g = pl->ensure_grad();
        const T go = self.grad[0] / static_cast<T>(batch);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t c = 0; c < k; ++c)
            g[b * k + c] += go * (prob[b * k + c] - (int(c) == labels[b] ? T(1) : T(0)));
      });
}

/// Smooth CCA surrogate on two [B,d] batches: with ridge-regularized covariances
/// Saa, Sbb and cross-covariance Sab, returns -tr(Saa^-1 Sab Sbb^-1 Sba) / d,
/// i.e. minus the mean squared canonical correlation, in [-1, 0].
template <class T>
Var<T> soft_cca(const Var<T>& a, const Var<T>& b, T ridge) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  detail::require(a.rank() == 2 && a.shape() == b.shape(), "soft_cca: shape mismatch");
  const Eigen::Index n = Eigen::Index(a.dim(0)), d = Eigen::Index(a.dim(1));
  if (n < 2) throw ConfigError("soft_cca: needs a batch of at least 2");
  Mat za = Eigen::Map<const Mat>(a.value().data(), n, d);
  Mat zb = Eigen::Map<const Mat>(b.value().data(), n, d);
  za.rowwise() -= za.colwise().mean();
  zb.rowwise() -= zb.colwise().mean();
  const T denom = static_cast<T>(n - 1);
  const Mat eye = Mat::Identity(d, d);
  Mat saa = za.transpose() * za / denom + ridge * eye;
  Mat sbb = zb.transpose() * zb / denom + ridge * eye;
  Mat sab = za.transpose() * zb / denom;
  if (!saa.allFinite() || !sbb.allFinite() || !sab.allFinite())
    throw NumericError("soft_cca: non-finite covariance");
  Mat ainv = saa.ldlt().solve(eye);
  Mat binv = sbb.ldlt().solve(eye);
  Mat p = ainv * sab * binv;  // d x d
  const T loss = -(p * sab.transpose()).trace() / static_cast<T>(d);
  if (!std::isfinite(loss)) throw NumericError("soft_cca: non-finite loss");
  auto pa = a.ptr(), pb = b.ptr();
  return detail::make_op<T>({1}, {loss}, {a, b}, [pa, pb, za, zb, ainv, binv, p, sab, n, d, denom](Node<T>& self) {
    const T go = self.grad[0];
    const T invd = T(1) / static_cast<T>(d);
    Mat g_m = -T(2) * invd * p;
    Mat g_aa = invd * p * sab.transpose() * ainv;
    Mat g_bb = invd * binv * sab.transpose() * p;
    Mat ga = (T(2) * za * g_aa + zb * g_m.transpose()) / denom;
    Mat gb = (T(2) * zb * g_bb + za * g_m) / denom;
    ga.rowwise() -= ga.colwise().mean();
    gb.rowwise() -= gb.colwise().mean();
    if (pa->requires_grad) {
      auto& g = pa->ensure_grad();
      for (Eigen::Index i = 0; i < n * d; ++i) g[i] += go * ga.data()[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->ensure_grad();
      for (Eigen::Index i = 0; i < n * d; ++i) g[i] += go * gb.data()[i];
    }
  });
}

}  // namespace mscl::ag
