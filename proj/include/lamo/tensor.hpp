#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace lamo {

using Index = std::int64_t;
using Shape = std::vector<Index>;

/// Contract violations: bad shapes, invalid arguments, misuse of an API.
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// File format / filesystem failures. Message carries a byte offset where known.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Numerical failures: solver non-convergence, non-finite loss.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline Index numel(const Shape& s) {
  Index n = 1;
  for (Index d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

/// Dense row-major n-dimensional array. Zero-rank tensors are scalars with
/// one element. Always contiguous; value semantics throughout.
template <class S>
struct Tensor {
  Shape shape;
  std::vector<S> data;

  Tensor() : shape{}, data{} {}
  explicit Tensor(Shape sh) : shape(std::move(sh)), data(static_cast<std::size_t>(numel(shape)), S(0)) {}
  Tensor(Shape sh, S fill) : shape(std::move(sh)), data(static_cast<std::size_t>(numel(shape)), fill) {}
  Tensor(Shape sh, std::vector<S> d) : shape(std::move(sh)), data(std::move(d)) {
    if (static_cast<Index>(data.size()) != numel(shape))
      throw ContractError("Tensor: data length " + std::to_string(data.size()) +
                          " does not match shape " + shape_str(shape));
  }

  static Tensor scalar(S v) {
    Tensor t;
    t.data = {v};
    return t;
  }
  static Tensor zeros(Shape sh) { return Tensor(std::move(sh)); }
  static Tensor ones(Shape sh) { return Tensor(std::move(sh), S(1)); }
  static Tensor full(Shape sh, S v) { return Tensor(std::move(sh), v); }

  Index size() const { return static_cast<Index>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  Index dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  bool empty() const { return data.empty() && shape.empty(); }

  S* ptr() { return data.data(); }
  const S* ptr() const { return data.data(); }

  S& operator[](Index i) { return data[static_cast<std::size_t>(i)]; }
  const S& operator[](Index i) const { return data[static_cast<std::size_t>(i)]; }

  S& operator()(Index i, Index j) { return data[static_cast<std::size_t>(i * shape[1] + j)]; }
  const S& operator()(Index i, Index j) const { return data[static_cast<std::size_t>(i * shape[1] + j)]; }

  S& operator()(Index i, Index j, Index k) {
    return data[static_cast<std::size_t>((i * shape[1] + j) * shape[2] + k)];
  }
  const S& operator()(Index i, Index j, Index k) const {
    return data[static_cast<std::size_t>((i * shape[1] + j) * shape[2] + k)];
  }

  /// Value of a scalar (one-element) tensor.
  S item() const {
    if (size() != 1) throw ContractError("item(): tensor has " + std::to_string(size()) + " elements");
    return data[0];
  }

  /// Same buffer reinterpreted under a new shape of equal element count.
  Tensor reshaped(Shape sh) const {
    if (numel(sh) != size())
      throw ContractError("reshape " + shape_str(shape) + " -> " + shape_str(sh) + ": element count differs");
    Tensor t;
    t.shape = std::move(sh);
    t.data = data;
    return t;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (S v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }
};

template <class S>
using MatrixRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MatMap = Eigen::Map<MatrixRM<S>>;
template <class S>
using ConstMatMap = Eigen::Map<const MatrixRM<S>>;
template <class S>
using ArrMap = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>;
template <class S>
using ConstArrMap = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>;

template <class S>
MatMap<S> mat_view(Tensor<S>& t, Index rows, Index cols) {
  return MatMap<S>(t.ptr(), rows, cols);
}
template <class S>
ConstMatMap<S> mat_view(const Tensor<S>& t, Index rows, Index cols) {
  return ConstMatMap<S>(t.ptr(), rows, cols);
}
template <class S>
ArrMap<S> arr_view(Tensor<S>& t) {
  return ArrMap<S>(t.ptr(), t.size());
}
template <class S>
ConstArrMap<S> arr_view(const Tensor<S>& t) {
  return ConstArrMap<S>(t.ptr(), t.size());
}

namespace detail {
template <class S>
void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (!a.same_shape(b))
    throw ContractError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}
}  // namespace detail

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape(a, b, "add");
  Tensor<S> y = a;
  arr_view(y) += arr_view(b);
  return y;
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape(a, b, "sub");
  Tensor<S> y = a;
  arr_view(y) -= arr_view(b);
  return y;
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape(a, b, "mul");
  Tensor<S> y = a;
  arr_view(y) *= arr_view(b);
  return y;
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, double s) {
  Tensor<S> y = a;
  arr_view(y) *= static_cast<S>(s);
  return y;
}

/// Trailing-axis broadcast add: x[... x D] + b[D].
template <class S>
Tensor<S> add_bias(const Tensor<S>& x, const Tensor<S>& b) {
  if (x.rank() < 1 || b.rank() != 1 || x.shape.back() != b.shape[0])
    throw ContractError("add_bias: " + shape_str(x.shape) + " vs bias " + shape_str(b.shape));
  Tensor<S> y = x;
  const Index d = b.shape[0];
  const Index rows = x.size() / d;
  for (Index r = 0; r < rows; ++r)
    for (Index j = 0; j < d; ++j) y[r * d + j] += b[j];
  return y;
}

/// 2-D matrix product via Eigen. Backward rules live in the autodiff layer.
template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0])
    throw ContractError("matmul: incompatible shapes " + shape_str(a.shape) + " and " + shape_str(b.shape));
  Tensor<S> y(Shape{a.shape[0], b.shape[1]});
  mat_view(y, a.shape[0], b.shape[1]).noalias() =
      mat_view(a, a.shape[0], a.shape[1]) * mat_view(b, b.shape[0], b.shape[1]);
  return y;
}

template <class S>
Tensor<S> transpose2d(const Tensor<S>& a) {
  if (a.rank() != 2) throw ContractError("transpose2d: rank " + std::to_string(a.rank()));
  Tensor<S> y(Shape{a.shape[1], a.shape[0]});
  mat_view(y, a.shape[1], a.shape[0]) = mat_view(a, a.shape[0], a.shape[1]).transpose();
  return y;
}

/// Numerically safe softmax along `axis` (max-subtracted).
template <class S>
Tensor<S> softmax(const Tensor<S>& x, int axis) {
  if (axis < 0 || axis >= x.rank()) throw ContractError("softmax: axis " + std::to_string(axis) + " out of range");
  Index inner = 1, outer = 1;
  const Index n = x.dim(axis);
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  Tensor<S> y(x.shape);
  for (Index o = 0; o < outer; ++o) {
    for (Index in = 0; in < inner; ++in) {
      const Index base = o * n * inner + in;
      S mx = x[base];
      for (Index k = 1; k < n; ++k) mx = std::max(mx, x[base + k * inner]);
      S sum = S(0);
      for (Index k = 0; k < n; ++k) {
        const S e = std::exp(x[base + k * inner] - mx);
        y[base + k * inner] = e;
        sum += e;
      }
      for (Index k = 0; k < n; ++k) y[base + k * inner] /= sum;
    }
  }
  return y;
}

template <class S>
S sigmoid_scalar(S x) {
  if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
  const S e = std::exp(x);
  return e / (S(1) + e);
}

template <class S>
S softplus_scalar(S x) {
  // max(x,0) + log1p(exp(-|x|)) avoids overflow on both tails
  return std::max(x, S(0)) + std::log1p(std::exp(-std::abs(x)));
}

template <class S>
Tensor<S> silu(const Tensor<S>& x) {
  Tensor<S> y = x;
  for (S& v : y.data) v = v * sigmoid_scalar(v);
  return y;
}

template <class S>
Tensor<S> softplus(const Tensor<S>& x) {
  Tensor<S> y = x;
  for (S& v : y.data) v = softplus_scalar(v);
  return y;
}

/// LayerNorm over the last axis with population variance.
template <class S>
Tensor<S> layernorm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias, double eps) {
  if (x.rank() < 1 || gain.rank() != 1 || bias.rank() != 1) throw ContractError("layernorm: bad ranks");
  const Index d = x.shape.back();
  if (gain.shape[0] != d || bias.shape[0] != d)
    throw ContractError("layernorm: channel mismatch " + shape_str(x.shape) + " vs " + shape_str(gain.shape));
  if (eps <= 0) throw ContractError("layernorm: eps must be positive");
  Tensor<S> y(x.shape);
  const Index rows = x.size() / d;
  for (Index r = 0; r < rows; ++r) {
    const S* xr = x.ptr() + r * d;
    S* yr = y.ptr() + r * d;
    S mean = S(0);
    for (Index j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<S>(d);
    S var = S(0);
    for (Index j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<S>(d);
    const S inv = S(1) / std::sqrt(var + static_cast<S>(eps));
    for (Index j = 0; j < d; ++j) yr[j] = gain[j] * ((xr[j] - mean) * inv) + bias[j];
  }
  return y;
}

template <class S>
S sum_all(const Tensor<S>& x) {
  return arr_view(x).sum();
}

template <class S>
S mean_all(const Tensor<S>& x) {
  return x.size() ? sum_all(x) / static_cast<S>(x.size()) : S(0);
}

template <class S>
S max_abs(const Tensor<S>& x) {
  return x.size() ? arr_view(x).abs().maxCoeff() : S(0);
}

template <class S>
S max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape(a, b, "max_abs_diff");
  return a.size() ? (arr_view(a) - arr_view(b)).abs().maxCoeff() : S(0);
}

template <class S>
S norm2(const Tensor<S>& x) {
  return std::sqrt(static_cast<S>(arr_view(x).square().sum()));
}

/// Column sums of a 2-D tensor (axis-0 reduction).
template <class S>
Tensor<S> col_sums(const Tensor<S>& x) {
  if (x.rank() != 2) throw ContractError("col_sums: rank " + std::to_string(x.rank()));
  Tensor<S> y(Shape{x.shape[1]});
  for (Index i = 0; i < x.shape[0]; ++i)
    for (Index j = 0; j < x.shape[1]; ++j) y[j] += x(i, j);
  return y;
}

template <class S>
Tensor<S> row_sums(const Tensor<S>& x) {
  if (x.rank() != 2) throw ContractError("row_sums: rank " + std::to_string(x.rank()));
  Tensor<S> y(Shape{x.shape[0]});
  for (Index i = 0; i < x.shape[0]; ++i)
    for (Index j = 0; j < x.shape[1]; ++j) y[i] += x(i, j);
  return y;
}

/// Row gather: y[i, :] = x[perm[i], :]. perm must be a valid index list.
template <class S>
Tensor<S> gather_rows(const Tensor<S>& x, const std::vector<Index>& perm) {
  if (x.rank() != 2) throw ContractError("gather_rows: rank " + std::to_string(x.rank()));
  if (static_cast<Index>(perm.size()) != x.shape[0])
    throw ContractError("gather_rows: permutation length " + std::to_string(perm.size()) + " vs rows " +
                        std::to_string(x.shape[0]));
  Tensor<S> y(x.shape);
  const Index c = x.shape[1];
  for (Index i = 0; i < x.shape[0]; ++i) {
    const Index src = perm[static_cast<std::size_t>(i)];
    if (src < 0 || src >= x.shape[0]) throw ContractError("gather_rows: index out of range");
    std::copy_n(x.ptr() + src * c, c, y.ptr() + i * c);
  }
  return y;
}

inline std::vector<Index> invert_permutation(const std::vector<Index>& perm) {
  std::vector<Index> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[static_cast<std::size_t>(perm[i])] = static_cast<Index>(i);
  return inv;
}

template <class S>
Tensor<S> slice_cols(const Tensor<S>& x, Index c0, Index c1) {
  if (x.rank() != 2 || c0 < 0 || c1 > x.shape[1] || c0 >= c1)
    throw ContractError("slice_cols: bad range [" + std::to_string(c0) + "," + std::to_string(c1) + ") on " +
                        shape_str(x.shape));
  Tensor<S> y(Shape{x.shape[0], c1 - c0});
  for (Index i = 0; i < x.shape[0]; ++i)
    std::copy_n(x.ptr() + i * x.shape[1] + c0, c1 - c0, y.ptr() + i * (c1 - c0));
  return y;
}

template <class S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: empty list");
  const Index rows = parts[0].shape[0];
  Index cols = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.shape[0] != rows) throw ContractError("concat_cols: row mismatch");
    cols += p.shape[1];
  }
  Tensor<S> y(Shape{rows, cols});
  Index off = 0;
  for (const auto& p : parts) {
    for (Index i = 0; i < rows; ++i) std::copy_n(p.ptr() + i * p.shape[1], p.shape[1], y.ptr() + i * cols + off);
    off += p.shape[1];
  }
  return y;
}

template <class S, class F>
Tensor<S> map_elements(const Tensor<S>& x, F&& f) {
  Tensor<S> y = x;
  for (S& v : y.data) v = f(v);
  return y;
}

template <class SDst, class SSrc>
Tensor<SDst> cast_tensor(const Tensor<SSrc>& x) {
  Tensor<SDst> y;
  y.shape = x.shape;
  y.data.resize(x.data.size());
  std::transform(x.data.begin(), x.data.end(), y.data.begin(),
                 [](SSrc v) { return static_cast<SDst>(v); });
  return y;
}

}  // namespace lamo
