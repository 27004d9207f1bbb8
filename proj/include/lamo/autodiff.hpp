#pragma once

#include <functional>
#include <memory>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "lamo/tensor.hpp"

namespace lamo {

// Reverse-mode tape. Each forward op allocates a Node holding the cached
// forward value and a closure that scatters the node's adjoint into its
// inputs. The graph is a DAG of shared_ptrs; backward() walks it in reverse
// topological order exactly once.

template <class S>
struct Node;
template <class S>
using Var = std::shared_ptr<Node<S>>;

template <class S>
struct Node {
  Tensor<S> value;
  Tensor<S> grad;  // allocated lazily; shape equals value shape once touched
  const char* op = "leaf";
  bool requires_grad = false;
  bool backward_done = false;  // set on roots; repeated backward without reset is an error
  std::vector<Var<S>> inputs;
  std::function<void(Node<S>&)> backprop;

  void ensure_grad() {
    if (grad.size() != value.size() || grad.shape != value.shape) grad = Tensor<S>(value.shape);
  }
  void accumulate(const Tensor<S>& g) {
    if (!requires_grad) return;
    ensure_grad();
    arr_view(grad) += arr_view(g);
  }
  void zero_grad() {
    grad = Tensor<S>();
    backward_done = false;
  }
};

template <class S>
Var<S> leaf(Tensor<S> value, bool requires_grad = false) {
  auto n = std::make_shared<Node<S>>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return n;
}

template <class S>
Var<S> constant(Tensor<S> value) {
  return leaf(std::move(value), false);
}

namespace detail {

template <class S>
Var<S> make_node(const char* op, Tensor<S> value, std::vector<Var<S>> inputs,
                 std::function<void(Node<S>&)> backprop) {
  auto n = std::make_shared<Node<S>>();
  n->value = std::move(value);
  n->op = op;
  n->inputs = std::move(inputs);
  for (const auto& in : n->inputs) n->requires_grad = n->requires_grad || in->requires_grad;
  if (n->requires_grad) n->backprop = std::move(backprop);
  return n;
}

/// Reverse topological order (root first) via iterative DFS.
template <class S>
std::vector<Node<S>*> topo_order(Node<S>* root) {
  std::vector<Node<S>*> order;
  std::unordered_set<Node<S>*> done;
  std::vector<std::pair<Node<S>*, std::size_t>> stack{{root, 0}};
  std::unordered_set<Node<S>*> on_stack{root};
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<S>* child = node->inputs[next++].get();
      if (!done.count(child)) {
        // a DAG by construction: shared_ptr edges cannot form cycles
        if (on_stack.count(child)) throw ContractError("backward: cycle detected in tape");
        stack.push_back({child, 0});
        on_stack.insert(child);
      }
    } else {
      done.insert(node);
      on_stack.erase(node);
      order.push_back(node);
      stack.pop_back();
    }
  }
  std::reverse(order.begin(), order.end());
  return order;
}

}  // namespace detail

/// Populates adjoints of every node reachable from a scalar root.
template <class S>
void backward(const Var<S>& root) {
  if (root->value.size() != 1)
    throw ContractError("backward: root must be scalar, got " + shape_str(root->value.shape));
  if (root->backward_done) throw ContractError("backward: repeated call on the same root without reset");
  root->backward_done = true;
  if (!root->requires_grad) return;
  root->ensure_grad();
  root->grad[0] += S(1);
  for (Node<S>* n : detail::topo_order(root.get())) {
    if (n->backprop && n->requires_grad && n->grad.size() == n->value.size()) n->backprop(*n);
  }
}

// -------------------------------------------------------------------------
// Primitive ops
// -------------------------------------------------------------------------

template <class S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  return detail::make_node<S>("add", add(a->value, b->value), {a, b}, [](Node<S>& n) {
    n.inputs[0]->accumulate(n.grad);
    n.inputs[1]->accumulate(n.grad);
  });
}

template <class S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  return detail::make_node<S>("sub", sub(a->value, b->value), {a, b}, [](Node<S>& n) {
    n.inputs[0]->accumulate(n.grad);
    n.inputs[1]->accumulate(scale(n.grad, -1.0));
  });
}

template <class S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  return detail::make_node<S>("mul", mul(a->value, b->value), {a, b}, [](Node<S>& n) {
    n.inputs[0]->accumulate(mul(n.grad, n.inputs[1]->value));
    n.inputs[1]->accumulate(mul(n.grad, n.inputs[0]->value));
  });
}

template <class S>
Var<S> scale(const Var<S>& a, double s) {
  return detail::make_node<S>("scale", scale(a->value, s), {a},
                              [s](Node<S>& n) { n.inputs[0]->accumulate(scale(n.grad, s)); });
}

template <class S>
Var<S> add_bias(const Var<S>& x, const Var<S>& b) {
  return detail::make_node<S>("add_bias", add_bias(x->value, b->value), {x, b}, [](Node<S>& n) {
    n.inputs[0]->accumulate(n.grad);
    const Index d = n.inputs[1]->value.shape[0];
    Tensor<S> gb(Shape{d});
    const Index rows = n.grad.size() / d;
    for (Index r = 0; r < rows; ++r)
      for (Index j = 0; j < d; ++j) gb[j] += n.grad[r * d + j];
    n.inputs[1]->accumulate(gb);
  });
}

template <class S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  return detail::make_node<S>("matmul", matmul(a->value, b->value), {a, b}, [](Node<S>& n) {
    // da = g . b^T, db = a^T . g
    n.inputs[0]->accumulate(matmul(n.grad, transpose2d(n.inputs[1]->value)));
    n.inputs[1]->accumulate(matmul(transpose2d(n.inputs[0]->value), n.grad));
  });
}

template <class S>
Var<S> transpose(const Var<S>& a) {
  return detail::make_node<S>("transpose", transpose2d(a->value), {a},
                              [](Node<S>& n) { n.inputs[0]->accumulate(transpose2d(n.grad)); });
}

template <class S>
Var<S> sum_all(const Var<S>& x) {
  return detail::make_node<S>("sum", Tensor<S>::scalar(sum_all(x->value)), {x}, [](Node<S>& n) {
    n.inputs[0]->accumulate(Tensor<S>(n.inputs[0]->value.shape, n.grad[0]));
  });
}

template <class S>
Var<S> mean_all(const Var<S>& x) {
  const double inv = 1.0 / static_cast<double>(x->value.size());
  return detail::make_node<S>("mean", Tensor<S>::scalar(mean_all(x->value)), {x}, [inv](Node<S>& n) {
    n.inputs[0]->accumulate(Tensor<S>(n.inputs[0]->value.shape, static_cast<S>(n.grad[0] * inv)));
  });
}

template <class S>
Var<S> sqrt_elem(const Var<S>& x) {
  Tensor<S> y = map_elements(x->value, [](S v) { return std::sqrt(v); });
  return detail::make_node<S>("sqrt", std::move(y), {x}, [](Node<S>& n) {
    Tensor<S> g = n.grad;
    for (Index i = 0; i < g.size(); ++i) g[i] = static_cast<S>(0.5) * g[i] / n.value[i];
    n.inputs[0]->accumulate(g);
  });
}

template <class S>
Var<S> recip(const Var<S>& x) {
  Tensor<S> y = map_elements(x->value, [](S v) { return S(1) / v; });
  return detail::make_node<S>("recip", std::move(y), {x}, [](Node<S>& n) {
    Tensor<S> g = n.grad;
    for (Index i = 0; i < g.size(); ++i) g[i] = -g[i] * n.value[i] * n.value[i];
    n.inputs[0]->accumulate(g);
  });
}

template <class S>
Var<S> silu(const Var<S>& x) {
  return detail::make_node<S>("silu", silu(x->value), {x}, [](Node<S>& n) {
    const Tensor<S>& xv = n.inputs[0]->value;
    Tensor<S> g = n.grad;
    for (Index i = 0; i < g.size(); ++i) {
      const S s = sigmoid_scalar(xv[i]);
      g[i] *= s * (S(1) + xv[i] * (S(1) - s));
    }
    n.inputs[0]->accumulate(g);
  });
}

template <class S>
Var<S> softplus(const Var<S>& x) {
  return detail::make_node<S>("softplus", softplus(x->value), {x}, [](Node<S>& n) {
    const Tensor<S>& xv = n.inputs[0]->value;
    Tensor<S> g = n.grad;
    for (Index i = 0; i < g.size(); ++i) g[i] *= sigmoid_scalar(xv[i]);
    n.inputs[0]->accumulate(g);
  });
}

template <class S>
Var<S> softmax(const Var<S>& x, int axis) {
  return detail::make_node<S>("softmax", softmax(x->value, axis), {x}, [axis](Node<S>& n) {
    // dx = y * (g - sum(g * y, axis))
    const Tensor<S>& y = n.value;
    Index inner = 1, outer = 1;
    const Index len = y.dim(axis);
    for (int i = 0; i < axis; ++i) outer *= y.dim(i);
    for (int i = axis + 1; i < y.rank(); ++i) inner *= y.dim(i);
    Tensor<S> dx(y.shape);
    for (Index o = 0; o < outer; ++o)
      for (Index in = 0; in < inner; ++in) {
        const Index base = o * len * inner + in;
        S dot = S(0);
        for (Index k = 0; k < len; ++k) dot += n.grad[base + k * inner] * y[base + k * inner];
        for (Index k = 0; k < len; ++k)
          dx[base + k * inner] = y[base + k * inner] * (n.grad[base + k * inner] - dot);
      }
    n.inputs[0]->accumulate(dx);
  });
}

template <class S>
Var<S> layernorm(const Var<S>& x, const Var<S>& gain, const Var<S>& bias, double eps) {
  return detail::make_node<S>("layernorm", layernorm(x->value, gain->value, bias->value, eps), {x, gain, bias},
                              [eps](Node<S>& n) {
    const Tensor<S>& xv = n.inputs[0]->value;
    const Tensor<S>& g = n.inputs[1]->value;
    const Index d = xv.shape.back();
    const Index rows = xv.size() / d;
    Tensor<S> dx(xv.shape), dg(Shape{d}), db(Shape{d});
    for (Index r = 0; r < rows; ++r) {
      const S* xr = xv.ptr() + r * d;
      const S* go = n.grad.ptr() + r * d;
      S mean = S(0);
      for (Index j = 0; j < d; ++j) mean += xr[j];
      mean /= static_cast<S>(d);
      S var = S(0);
      for (Index j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
      var /= static_cast<S>(d);
      const S inv = S(1) / std::sqrt(var + static_cast<S>(eps));
      // dxhat = g_out * gain; then the two reduction terms of the layernorm adjoint
      S sum_dxh = S(0), sum_dxh_xh = S(0);
      for (Index j = 0; j < d; ++j) {
        const S xh = (xr[j] - mean) * inv;
        const S dxh = go[j] * g[j];
        sum_dxh += dxh;
        sum_dxh_xh += dxh * xh;
        dg[j] += go[j] * xh;
        db[j] += go[j];
      }
      for (Index j = 0; j < d; ++j) {
        const S xh = (xr[j] - mean) * inv;
        const S dxh = go[j] * g[j];
        dx[r * d + j] = inv * (dxh - sum_dxh / static_cast<S>(d) - xh * sum_dxh_xh / static_cast<S>(d));
      }
    }
    n.inputs[0]->accumulate(dx);
    n.inputs[1]->accumulate(dg);
    n.inputs[2]->accumulate(db);
  });
}

template <class S>
Var<S> gather_rows(const Var<S>& x, std::vector<Index> perm) {
  auto p = std::make_shared<std::vector<Index>>(std::move(perm));
  return detail::make_node<S>("gather_rows", gather_rows(x->value, *p), {x}, [p](Node<S>& n) {
    const Index cols = n.value.shape[1];
    Tensor<S> dx(n.inputs[0]->value.shape);
    for (Index i = 0; i < n.value.shape[0]; ++i) {
      const Index src = (*p)[static_cast<std::size_t>(i)];
      for (Index j = 0; j < cols; ++j) dx[src * cols + j] += n.grad[i * cols + j];
    }
    n.inputs[0]->accumulate(dx);
  });
}

template <class S>
Var<S> slice_cols(const Var<S>& x, Index c0, Index c1) {
  return detail::make_node<S>("slice_cols", slice_cols(x->value, c0, c1), {x}, [c0, c1](Node<S>& n) {
    const Index cols = n.inputs[0]->value.shape[1];
    Tensor<S> dx(n.inputs[0]->value.shape);
    const Index w = c1 - c0;
    for (Index i = 0; i < n.value.shape[0]; ++i)
      for (Index j = 0; j < w; ++j) dx[i * cols + c0 + j] = n.grad[i * w + j];
    n.inputs[0]->accumulate(dx);
  });
}

template <class S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
  std::vector<Tensor<S>> vals;
  vals.reserve(parts.size());
  for (const auto& p : parts) vals.push_back(p->value);
  return detail::make_node<S>("concat_cols", concat_cols(vals), parts, [](Node<S>& n) {
    const Index rows = n.value.shape[0];
    const Index cols = n.value.shape[1];
    Index off = 0;
    for (auto& in : n.inputs) {
      const Index w = in->value.shape[1];
      Tensor<S> gi(in->value.shape);
      for (Index i = 0; i < rows; ++i)
        for (Index j = 0; j < w; ++j) gi[i * w + j] = n.grad[i * cols + off + j];
      in->accumulate(gi);
      off += w;
    }
  });
}

/// Scales row j of z by r[j].
template <class S>
Var<S> scale_rows(const Var<S>& z, const Var<S>& r) {
  if (z->value.rank() != 2 || r->value.rank() != 1 || r->value.shape[0] != z->value.shape[0])
    throw ContractError("scale_rows: " + shape_str(z->value.shape) + " vs " + shape_str(r->value.shape));
  Tensor<S> y = z->value;
  const Index cols = y.shape[1];
  for (Index i = 0; i < y.shape[0]; ++i)
    for (Index j = 0; j < cols; ++j) y[i * cols + j] *= r->value[i];
  return detail::make_node<S>("scale_rows", std::move(y), {z, r}, [](Node<S>& n) {
    const Tensor<S>& zv = n.inputs[0]->value;
    const Tensor<S>& rv = n.inputs[1]->value;
    const Index cols = zv.shape[1];
    Tensor<S> dz(zv.shape), dr(rv.shape);
    for (Index i = 0; i < zv.shape[0]; ++i)
      for (Index j = 0; j < cols; ++j) {
        dz[i * cols + j] = n.grad[i * cols + j] * rv[i];
        dr[i] += n.grad[i * cols + j] * zv[i * cols + j];
      }
    n.inputs[0]->accumulate(dz);
    n.inputs[1]->accumulate(dr);
  });
}

template <class S>
Var<S> add_scalar(const Var<S>& x, double c) {
  Tensor<S> y = x->value;
  for (S& v : y.data) v += static_cast<S>(c);
  return detail::make_node<S>("add_scalar", std::move(y), {x},
                              [](Node<S>& n) { n.inputs[0]->accumulate(n.grad); });
}

template <class S>
Var<S> col_sums(const Var<S>& x) {
  return detail::make_node<S>("col_sums", col_sums(x->value), {x}, [](Node<S>& n) {
    const Index rows = n.inputs[0]->value.shape[0];
    const Index cols = n.inputs[0]->value.shape[1];
    Tensor<S> dx(n.inputs[0]->value.shape);
    for (Index i = 0; i < rows; ++i)
      for (Index j = 0; j < cols; ++j) dx[i * cols + j] = n.grad[j];
    n.inputs[0]->accumulate(dx);
  });
}

/// Depthwise causal convolution along the row (token) axis:
/// y[k,c] = b[c] + sum_j w[j,c] * x[k-j,c], zero padded on the left.
template <class S>
Var<S> depthwise_causal_conv(const Var<S>& x, const Var<S>& w, const Var<S>& b) {
  const Index L = x->value.shape[0], C = x->value.shape[1];
  const Index K = w->value.shape[0];
  if (w->value.rank() != 2 || w->value.shape[1] != C || b->value.shape != Shape{C})
    throw ContractError("depthwise_causal_conv: weight " + shape_str(w->value.shape) + " bias " +
                        shape_str(b->value.shape) + " vs input " + shape_str(x->value.shape));
  Tensor<S> y(Shape{L, C});
  for (Index k = 0; k < L; ++k)
    for (Index c = 0; c < C; ++c) {
      S acc = b->value[c];
      for (Index j = 0; j < K && j <= k; ++j) acc += w->value(j, c) * x->value(k - j, c);
      y(k, c) = acc;
    }
  return detail::make_node<S>("depthwise_causal_conv", std::move(y), {x, w, b}, [L, C, K](Node<S>& n) {
    const Tensor<S>& xv = n.inputs[0]->value;
    const Tensor<S>& wv = n.inputs[1]->value;
    Tensor<S> dx(xv.shape), dw(wv.shape), db(Shape{C});
    for (Index k = 0; k < L; ++k)
      for (Index c = 0; c < C; ++c) {
        const S g = n.grad(k, c);
        db[c] += g;
        for (Index j = 0; j < K && j <= k; ++j) {
          dw(j, c) += g * xv(k - j, c);
          dx(k - j, c) += g * wv(j, c);
        }
      }
    n.inputs[0]->accumulate(dx);
    n.inputs[1]->accumulate(dw);
    n.inputs[2]->accumulate(db);
  });
}

/// Group-indexed pointwise affine: y[i,:] = w[g[i]] . x[i,:] + b[g[i]],
/// one [C x C] map and bias per group.
template <class S>
Var<S> grouped_affine(const Var<S>& x, const Var<S>& w, const Var<S>& b, std::vector<Index> groups) {
  const Index N = x->value.shape[0], C = x->value.shape[1];
  const Index G = w->value.shape[0];
  if (w->value.shape != Shape{G, C, C} || b->value.shape != Shape{G, C} ||
      static_cast<Index>(groups.size()) != N)
    throw ContractError("grouped_affine: w " + shape_str(w->value.shape) + " b " + shape_str(b->value.shape) +
                        " vs x " + shape_str(x->value.shape));
  auto g = std::make_shared<std::vector<Index>>(std::move(groups));
  Tensor<S> y(Shape{N, C});
  for (Index i = 0; i < N; ++i) {
    const Index gi = (*g)[static_cast<std::size_t>(i)];
    const S* wi = w->value.ptr() + gi * C * C;
    const S* xi = x->value.ptr() + i * C;
    S* yi = y.ptr() + i * C;
    for (Index r = 0; r < C; ++r) {
      S acc = b->value(gi, r);
      for (Index c = 0; c < C; ++c) acc += wi[r * C + c] * xi[c];
      yi[r] = acc;
    }
  }
  return detail::make_node<S>("grouped_affine", std::move(y), {x, w, b}, [g, N, C](Node<S>& n) {
    const Tensor<S>& xv = n.inputs[0]->value;
    const Tensor<S>& wv = n.inputs[1]->value;
    Tensor<S> dx(xv.shape), dw(wv.shape), db(n.inputs[2]->value.shape);
    for (Index i = 0; i < N; ++i) {
      const Index gi = (*g)[static_cast<std::size_t>(i)];
      const S* wi = wv.ptr() + gi * C * C;
      const S* xi = xv.ptr() + i * C;
      const S* go = n.grad.ptr() + i * C;
      S* dwi = dw.ptr() + gi * C * C;
      S* dxi = dx.ptr() + i * C;
      for (Index r = 0; r < C; ++r) {
        db(gi, r) += go[r];
        for (Index c = 0; c < C; ++c) {
          dwi[r * C + c] += go[r] * xi[c];
          dxi[c] += go[r] * wi[r * C + c];
        }
      }
    }
    n.inputs[0]->accumulate(dx);
    n.inputs[1]->accumulate(dw);
    n.inputs[2]->accumulate(db);
  });
}

/// Central-difference spatial gradients of per-channel fields living on an
/// h x w grid (rows = h*w points). One-sided stencils at the boundary.
/// Output layout: [N x 2C] with d/dx in the first C columns, d/dy after.
template <class S>
Var<S> spatial_gradients(const Var<S>& x, Index h, Index w) {
  const Index N = x->value.shape[0], C = x->value.shape[1];
  if (h * w != N) throw ContractError("spatial_gradients: grid " + std::to_string(h) + "x" + std::to_string(w) +
                                      " does not cover " + std::to_string(N) + " points");
  auto dx_pair = [h, w](Index r, Index c) {  // columns along x
    Index lo = c > 0 ? c - 1 : c, hi = c < w - 1 ? c + 1 : c;
    return std::pair<Index, Index>{lo, hi};
  };
  Tensor<S> y(Shape{N, 2 * C});
  for (Index r = 0; r < h; ++r)
    for (Index c = 0; c < w; ++c) {
      const Index i = r * w + c;
      auto [clo, chi] = dx_pair(r, c);
      const S sx = S(1) / static_cast<S>(chi - clo);
      Index rlo = r > 0 ? r - 1 : r, rhi = r < h - 1 ? r + 1 : r;
      const S sy = S(1) / static_cast<S>(rhi - rlo);
      for (Index ch = 0; ch < C; ++ch) {
        y(i, ch) = (x->value(r * w + chi, ch) - x->value(r * w + clo, ch)) * sx;
        y(i, C + ch) = (x->value(rhi * w + c, ch) - x->value(rlo * w + c, ch)) * sy;
      }
    }
  return detail::make_node<S>("spatial_gradients", std::move(y), {x}, [h, w, C](Node<S>& n) {
    Tensor<S> dx(n.inputs[0]->value.shape);
    for (Index r = 0; r < h; ++r)
      for (Index c = 0; c < w; ++c) {
        const Index i = r * w + c;
        Index clo = c > 0 ? c - 1 : c, chi = c < w - 1 ? c + 1 : c;
        Index rlo = r > 0 ? r - 1 : r, rhi = r < h - 1 ? r + 1 : r;
        const S sx = S(1) / static_cast<S>(chi - clo);
        const S sy = S(1) / static_cast<S>(rhi - rlo);
        for (Index ch = 0; ch < C; ++ch) {
          const S gx = n.grad(i, ch) * sx;
          dx(r * w + chi, ch) += gx;
          dx(r * w + clo, ch) -= gx;
          const S gy = n.grad(i, C + ch) * sy;
          dx(rhi * w + c, ch) += gy;
          dx(rlo * w + c, ch) -= gy;
        }
      }
    n.inputs[0]->accumulate(dx);
  });
}

// -------------------------------------------------------------------------
// Finite-difference oracle
// -------------------------------------------------------------------------

/// Max over coordinates of |analytic - central difference| /
/// max(|analytic|, |cd|, 1e-8) for a scalar-valued map of one tensor.
template <class S>
double grad_check(const std::function<Var<S>(const Var<S>&)>& f, const Tensor<S>& x0, double step) {
  if (step <= 0) throw ContractError("grad_check: step must be positive");
  auto x = leaf(x0, true);
  auto y = f(x);
  if (y->value.size() != 1) throw ContractError("grad_check: f must be scalar-valued");
  if (!y->value.all_finite()) throw NumericError("grad_check: f(x) is not finite");
  backward(y);
  Tensor<S> analytic = x->grad.size() ? x->grad : Tensor<S>(x0.shape);

  double worst = 0.0;
  Tensor<S> xp = x0;
  for (Index i = 0; i < x0.size(); ++i) {
    const S saved = xp[i];
    xp[i] = saved + static_cast<S>(step);
    const double fp = static_cast<double>(f(leaf(xp))->value.item());
    xp[i] = saved - static_cast<S>(step);
    const double fm = static_cast<double>(f(leaf(xp))->value.item());
    xp[i] = saved;
    const double cd = (fp - fm) / (2.0 * step);
    const double an = static_cast<double>(analytic[i]);
    const double denom = std::max({std::abs(an), std::abs(cd), 1e-8});
    worst = std::max(worst, std::abs(an - cd) / denom);
  }
  return worst;
}

/// Same oracle for a map of several tensors; checks one selected input.
template <class S>
double grad_check_multi(const std::function<Var<S>(const std::vector<Var<S>>&)>& f,
                        const std::vector<Tensor<S>>& x0, std::size_t which, double step) {
  auto build = [&](const std::vector<Tensor<S>>& xs, bool with_grad) {
    std::vector<Var<S>> vars;
    vars.reserve(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) vars.push_back(leaf(xs[i], with_grad && i == which));
    return vars;
  };
  auto vars = build(x0, true);
  auto y = f(vars);
  if (y->value.size() != 1) throw ContractError("grad_check_multi: f must be scalar-valued");
  if (!y->value.all_finite()) throw NumericError("grad_check_multi: f(x) is not finite");
  backward(y);
  Tensor<S> analytic = vars[which]->grad.size() ? vars[which]->grad : Tensor<S>(x0[which].shape);

  double worst = 0.0;
  std::vector<Tensor<S>> xs = x0;
  for (Index i = 0; i < x0[which].size(); ++i) {
    const S saved = xs[which][i];
    xs[which][i] = saved + static_cast<S>(step);
    const double fp = static_cast<double>(f(build(xs, false))->value.item());
    xs[which][i] = saved - static_cast<S>(step);
    const double fm = static_cast<double>(f(build(xs, false))->value.item());
    xs[which][i] = saved;
    const double cd = (fp - fm) / (2.0 * step);
    const double an = static_cast<double>(analytic[i]);
    const double denom = std::max({std::abs(an), std::abs(cd), 1e-8});
    worst = std::max(worst, std::abs(an - cd) / denom);
  }
  return worst;
}

}  // namespace lamo
