#pragma once

#include <algorithm>
#include <string>

#include "lamo/io.hpp"
#include "lamo/rng.hpp"
#include "lamo/tensor.hpp"

namespace lamo {

// Synthetic PDE data. The Darcy solver below is the ground-truth oracle for
// training targets; it shares no code with the model stack.

enum class DatasetKind : std::uint8_t { Grid2d = 0, Seq1d = 1 };

template <class S>
struct Dataset {
  DatasetKind kind = DatasetKind::Grid2d;
  Index grid_h = 0, grid_w = 0;  // seq1d uses 1 x L
  Tensor<S> inputs;              // [n x N x d_a]
  Tensor<S> targets;             // [n x N x d_u]
  Tensor<S> coords;              // [N x d_coord]
  Tensor<S> in_mean, in_std;     // [d_a], train-split statistics
  Tensor<S> out_mean, out_std;   // [d_u]

  Index n() const { return inputs.shape[0]; }
  Index points() const { return inputs.shape[1]; }
  Index in_channels() const { return inputs.shape[2]; }
  Index out_channels() const { return targets.shape[2]; }
  Index coord_channels() const { return coords.shape[1]; }

  Tensor<S> input_sample(Index i) const { return slice_sample(inputs, i); }
  Tensor<S> target_sample(Index i) const { return slice_sample(targets, i); }

 private:
  static Tensor<S> slice_sample(const Tensor<S>& t, Index i) {
    const Index N = t.shape[1], C = t.shape[2];
    Tensor<S> out(Shape{N, C});
    std::copy_n(t.ptr() + i * N * C, N * C, out.ptr());
    return out;
  }
};

// -------------------------------------------------------------------------
// Darcy flow: -div(a grad u) = beta on the unit square, u = 0 on the boundary
// -------------------------------------------------------------------------

/// Two-level permeability field: white noise, K box-blur passes, median
/// threshold. Values land exactly on {lo, hi}.
template <class S>
Tensor<S> gen_coeff_field(Index h, Index w, Rng& rng, int blur_passes = 8, S lo = S(4), S hi = S(12)) {
  if (h < 8 || w < 8) throw ContractError("gen_coeff_field: grid must be at least 8x8");
  Tensor<S> f(Shape{h, w});
  rng.fill_normal(f);
  Tensor<S> tmp(Shape{h, w});
  for (int pass = 0; pass < blur_passes; ++pass) {
    for (Index i = 0; i < h; ++i)
      for (Index j = 0; j < w; ++j) {
        S acc = S(0);
        int cnt = 0;
        for (Index di = -1; di <= 1; ++di)
          for (Index dj = -1; dj <= 1; ++dj) {
            const Index ii = i + di, jj = j + dj;
            if (ii < 0 || ii >= h || jj < 0 || jj >= w) continue;
            acc += f(ii, jj);
            ++cnt;
          }
        tmp(i, j) = acc / static_cast<S>(cnt);
      }
    std::swap(f, tmp);
  }
  std::vector<S> sorted(f.data);
  std::nth_element(sorted.begin(), sorted.begin() + sorted.size() / 2, sorted.end());
  const S median = sorted[sorted.size() / 2];
  for (S& v : f.data) v = v >= median ? hi : lo;
  return f;
}

/// Relative discrete residual ||A_h u - f||_2 / ||f||_2 of the finite-volume
/// operator with harmonic-mean face coefficients over interior nodes.
template <class S>
double darcy_residual(const Tensor<S>& a, const Tensor<S>& u, double beta) {
  const Index h = a.shape[0], w = a.shape[1];
  const double hx = 1.0 / static_cast<double>(w - 1);
  const double hy = 1.0 / static_cast<double>(h - 1);
  auto harm = [](double p, double q) { return 2.0 * p * q / (p + q); };
  double rr = 0.0, bb = 0.0;
  for (Index i = 1; i < h - 1; ++i)
    for (Index j = 1; j < w - 1; ++j) {
      const double ac = a(i, j);
      const double te = harm(ac, a(i, j + 1)) / (hx * hx);
      const double tw = harm(ac, a(i, j - 1)) / (hx * hx);
      const double tn = harm(ac, a(i - 1, j)) / (hy * hy);
      const double ts = harm(ac, a(i + 1, j)) / (hy * hy);
      const double av = (te + tw + tn + ts) * u(i, j) - te * u(i, j + 1) - tw * u(i, j - 1) -
                        tn * u(i - 1, j) - ts * u(i + 1, j);
      const double r = av - beta;
      rr += r * r;
      bb += beta * beta;
    }
  return std::sqrt(rr) / std::sqrt(bb);
}

/// Matrix-free conjugate-gradient solve of the 5-point stencil system.
/// Boundary ring is exactly zero. Throws NumericError if CG stalls.
template <class S>
Tensor<S> solve_darcy(const Tensor<S>& a, double beta = 1.0) {
  const Index h = a.shape[0], w = a.shape[1];
  if (a.rank() != 2 || h < 3 || w < 3) throw ContractError("solve_darcy: grid " + shape_str(a.shape));
  for (S v : a.data)
    if (!(v > S(0))) throw ContractError("solve_darcy: coefficient field must be strictly positive");

  const double hx = 1.0 / static_cast<double>(w - 1);
  const double hy = 1.0 / static_cast<double>(h - 1);
  auto harm = [](double p, double q) { return 2.0 * p * q / (p + q); };
  // face transmissibilities, indexed by the lower-left node of each face
  Tensor<double> tx(Shape{h, w}), ty(Shape{h, w});
  for (Index i = 0; i < h; ++i)
    for (Index j = 0; j + 1 < w; ++j) tx(i, j) = harm(a(i, j), a(i, j + 1)) / (hx * hx);
  for (Index i = 0; i + 1 < h; ++i)
    for (Index j = 0; j < w; ++j) ty(i, j) = harm(a(i, j), a(i + 1, j)) / (hy * hy);

  auto apply = [&](const Tensor<double>& v, Tensor<double>& out) {
    for (Index i = 1; i < h - 1; ++i)
      for (Index j = 1; j < w - 1; ++j) {
        const double te = tx(i, j), tw = tx(i, j - 1), ts = ty(i, j), tn = ty(i - 1, j);
        out(i, j) = (te + tw + tn + ts) * v(i, j) - te * v(i, j + 1) - tw * v(i, j - 1) - tn * v(i - 1, j) -
                    ts * v(i + 1, j);
      }
  };
  auto dot = [&](const Tensor<double>& p, const Tensor<double>& q) {
    double acc = 0;
    for (Index i = 1; i < h - 1; ++i)
      for (Index j = 1; j < w - 1; ++j) acc += p(i, j) * q(i, j);
    return acc;
  };

  Tensor<double> u(Shape{h, w}), r(Shape{h, w}), p(Shape{h, w}), ap(Shape{h, w});
  for (Index i = 1; i < h - 1; ++i)
    for (Index j = 1; j < w - 1; ++j) r(i, j) = beta;  // r = b - A*0
  p = r;
  const double bnorm = std::sqrt(dot(r, r));
  double rs = bnorm * bnorm;
  const Index max_iter = 10 * h * w;
  bool converged = false;
  for (Index it = 0; it < max_iter; ++it) {
    apply(p, ap);
    const double alpha = rs / dot(p, ap);
    for (Index i = 1; i < h - 1; ++i)
      for (Index j = 1; j < w - 1; ++j) {
        u(i, j) += alpha * p(i, j);
        r(i, j) -= alpha * ap(i, j);
      }
    const double rs_new = dot(r, r);
    if (std::sqrt(rs_new) / bnorm < 1e-10) {
      converged = true;
      break;
    }
    const double beta_cg = rs_new / rs;
    rs = rs_new;
    for (Index i = 1; i < h - 1; ++i)
      for (Index j = 1; j < w - 1; ++j) p(i, j) = r(i, j) + beta_cg * p(i, j);
  }
  if (!converged)
    throw NumericError("solve_darcy: CG did not reach the residual tolerance within " +
                       std::to_string(max_iter) + " iterations");
  if constexpr (std::is_same_v<S, double>) return u;
  return cast_tensor<S>(u);
}

template <class S>
Tensor<S> unit_grid_coords(Index h, Index w) {
  Tensor<S> c(Shape{h * w, 2});
  for (Index i = 0; i < h; ++i)
    for (Index j = 0; j < w; ++j) {
      c(i * w + j, 0) = w > 1 ? static_cast<S>(j) / static_cast<S>(w - 1) : S(0);
      c(i * w + j, 1) = h > 1 ? static_cast<S>(i) / static_cast<S>(h - 1) : S(0);
    }
  return c;
}

// -------------------------------------------------------------------------
// 1-D sequence tasks on a periodic grid
// -------------------------------------------------------------------------

/// Smooth periodic field from a low-order random Fourier series.
template <class S>
Tensor<S> gen_smooth_periodic(Index L, Rng& rng, int max_mode = 6) {
  Tensor<S> u(Shape{L});
  std::vector<double> am(static_cast<std::size_t>(max_mode)), bm(static_cast<std::size_t>(max_mode));
  for (int m = 0; m < max_mode; ++m) {
    am[static_cast<std::size_t>(m)] = rng.normal() / double(m + 1);
    bm[static_cast<std::size_t>(m)] = rng.normal() / double(m + 1);
  }
  for (Index j = 0; j < L; ++j) {
    double acc = 0;
    for (int m = 0; m < max_mode; ++m) {
      const double t = 2.0 * M_PI * double(m + 1) * double(j) / double(L);
      acc += am[static_cast<std::size_t>(m)] * std::cos(t) + bm[static_cast<std::size_t>(m)] * std::sin(t);
    }
    u[j] = static_cast<S>(acc);
  }
  return u;
}

/// Explicit diffusion rollout, periodic boundary. r = nu dt / dx^2 <= 1/2.
template <class S>
Tensor<S> diffuse_rollout(const Tensor<S>& u0, double r, Index steps) {
  if (r <= 0 || r > 0.5) throw ContractError("diffuse_rollout: stability requires 0 < r <= 1/2");
  const Index L = u0.shape[0];
  Tensor<S> u = u0, next(Shape{L});
  for (Index s = 0; s < steps; ++s) {
    for (Index j = 0; j < L; ++j) {
      const Index jm = (j + L - 1) % L, jp = (j + 1) % L;
      next[j] = u[j] + static_cast<S>(r) * (u[jm] - S(2) * u[j] + u[jp]);
    }
    std::swap(u, next);
  }
  return u;
}

/// Upwind advection rollout, periodic boundary, 0 < cfl <= 1. Negative
/// `steps` advects the opposite way. At cfl = 1 each step is an exact shift.
template <class S>
Tensor<S> advect_rollout(const Tensor<S>& u0, double cfl, Index steps) {
  if (cfl <= 0 || cfl > 1.0) throw ContractError("advect_rollout: stability requires 0 < cfl <= 1");
  const Index L = u0.shape[0];
  const bool forward = steps >= 0;
  const Index nsteps = forward ? steps : -steps;
  Tensor<S> u = u0, next(Shape{L});
  for (Index s = 0; s < nsteps; ++s) {
    for (Index j = 0; j < L; ++j) {
      const Index up = forward ? (j + L - 1) % L : (j + 1) % L;
      next[j] = static_cast<S>(1.0 - cfl) * u[j] + static_cast<S>(cfl) * u[up];
    }
    std::swap(u, next);
  }
  return u;
}

// -------------------------------------------------------------------------
// Dataset assembly, normalization, persistence
// -------------------------------------------------------------------------

template <class S>
void compute_norm_stats(const Tensor<S>& data, Tensor<S>& mean, Tensor<S>& stddev) {
  const Index n = data.shape[0], N = data.shape[1], C = data.shape[2];
  mean = Tensor<S>(Shape{C});
  stddev = Tensor<S>(Shape{C});
  const double count = static_cast<double>(n * N);
  for (Index c = 0; c < C; ++c) {
    double acc = 0;
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < N; ++j) acc += data[(i * N + j) * C + c];
    const double mu = acc / count;
    double var = 0;
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < N; ++j) {
        const double d = data[(i * N + j) * C + c] - mu;
        var += d * d;
      }
    mean[c] = static_cast<S>(mu);
    stddev[c] = static_cast<S>(std::sqrt(var / count));
  }
}

/// Per-channel (x - mean) / (std + 1e-8) using the stats stored in ds.
template <class S>
Dataset<S> normalize(const Dataset<S>& ds) {
  Dataset<S> out = ds;
  auto apply = [](Tensor<S>& t, const Tensor<S>& mean, const Tensor<S>& stddev) {
    const Index C = t.shape[2];
    for (Index i = 0; i < t.size(); ++i) {
      const Index c = i % C;
      t[i] = (t[i] - mean[c]) / (stddev[c] + static_cast<S>(1e-8));
    }
  };
  apply(out.inputs, ds.in_mean, ds.in_std);
  apply(out.targets, ds.out_mean, ds.out_std);
  return out;
}

/// Undoes normalize() for one predicted sample [N x d_u].
template <class S>
Tensor<S> denormalize(const Tensor<S>& pred, const Tensor<S>& mean, const Tensor<S>& stddev) {
  Tensor<S> out = pred;
  const Index C = mean.shape[0];
  for (Index i = 0; i < out.size(); ++i) {
    const Index c = i % C;
    out[i] = out[i] * (stddev[c] + static_cast<S>(1e-8)) + mean[c];
  }
  return out;
}

/// Darcy samples with per-sample RNG streams: sample k uses (seed, offset+k),
/// so train/test splits and re-runs are reproducible byte for byte.
inline Dataset<double> make_darcy_dataset(Index h, Index w, Index n, std::uint64_t seed, Index stream_offset = 0,
                                          double beta = 1.0) {
  Dataset<double> ds;
  ds.kind = DatasetKind::Grid2d;
  ds.grid_h = h;
  ds.grid_w = w;
  const Index N = h * w;
  ds.inputs = Tensor<double>(Shape{n, N, 1});
  ds.targets = Tensor<double>(Shape{n, N, 1});
  ds.coords = unit_grid_coords<double>(h, w);
  for (Index k = 0; k < n; ++k) {
    Rng rng(seed, static_cast<std::uint64_t>(stream_offset + k));
    Tensor<double> a = gen_coeff_field<double>(h, w, rng);
    Tensor<double> u = solve_darcy(a, beta);
    std::copy_n(a.ptr(), N, ds.inputs.ptr() + k * N);
    std::copy_n(u.ptr(), N, ds.targets.ptr() + k * N);
  }
  compute_norm_stats(ds.inputs, ds.in_mean, ds.in_std);
  compute_norm_stats(ds.targets, ds.out_mean, ds.out_std);
  return ds;
}

enum class Seq1dKind { Diffusion, Advection };

/// 1-D rollout tasks. Diffusion: target is the diffused state after `steps`.
/// Advection: the target superposes the forward- and backward-advected state
/// (two counter-propagating streams), so recovering it requires information
/// from both sides of every token.
inline Dataset<double> make_seq1d_dataset(Seq1dKind kind, Index L, Index n, Index steps, std::uint64_t seed,
                                          Index stream_offset = 0) {
  Dataset<double> ds;
  ds.kind = DatasetKind::Seq1d;
  ds.grid_h = 1;
  ds.grid_w = L;
  ds.inputs = Tensor<double>(Shape{n, L, 1});
  ds.targets = Tensor<double>(Shape{n, L, 1});
  ds.coords = Tensor<double>(Shape{L, 1});
  for (Index j = 0; j < L; ++j) ds.coords(j, 0) = double(j) / double(L);
  for (Index k = 0; k < n; ++k) {
    Rng rng(seed, static_cast<std::uint64_t>(stream_offset + k));
    Tensor<double> u0 = gen_smooth_periodic<double>(L, rng);
    Tensor<double> ut;
    if (kind == Seq1dKind::Diffusion) {
      ut = diffuse_rollout(u0, 0.25, steps);
    } else {
      Tensor<double> fwd = advect_rollout(u0, 1.0, steps);
      Tensor<double> bwd = advect_rollout(u0, 1.0, -steps);
      ut = scale(add(fwd, bwd), 0.5);
    }
    std::copy_n(u0.ptr(), L, ds.inputs.ptr() + k * L);
    std::copy_n(ut.ptr(), L, ds.targets.ptr() + k * L);
  }
  compute_norm_stats(ds.inputs, ds.in_mean, ds.in_std);
  compute_norm_stats(ds.targets, ds.out_mean, ds.out_std);
  return ds;
}

template <class S>
void save_dataset(const std::string& path, const Dataset<S>& ds) {
  ByteWriter w;
  w.str("LDST");
  w.pod<std::uint32_t>(1);
  w.pod<std::uint8_t>(static_cast<std::uint8_t>(ds.kind));
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(ds.n()));
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(ds.grid_h));
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(ds.grid_w));
  write_ltns(w, ds.inputs);
  write_ltns(w, ds.targets);
  write_ltns(w, ds.coords);
  write_ltns(w, ds.in_mean);
  write_ltns(w, ds.in_std);
  write_ltns(w, ds.out_mean);
  write_ltns(w, ds.out_std);
  w.save(path);
}

template <class S>
Dataset<S> load_dataset(const std::string& path, bool allow_convert = true) {
  ByteReader r = ByteReader::from_file(path);
  r.expect_magic("LDST");
  const auto version = r.pod<std::uint32_t>();
  if (version != 1)
    throw IoError(path + ": unsupported LDST version " + std::to_string(version) + " at byte offset 4");
  Dataset<S> ds;
  const auto kind = r.pod<std::uint8_t>();
  if (kind > 1) throw IoError(path + ": bad dataset kind tag at byte offset 8");
  ds.kind = static_cast<DatasetKind>(kind);
  ds.grid_h = 0;
  const auto n = r.pod<std::uint32_t>();
  ds.grid_h = static_cast<Index>(r.pod<std::uint32_t>());
  ds.grid_w = static_cast<Index>(r.pod<std::uint32_t>());
  ds.inputs = read_ltns<S>(r, allow_convert);
  ds.targets = read_ltns<S>(r, allow_convert);
  ds.coords = read_ltns<S>(r, allow_convert);
  ds.in_mean = read_ltns<S>(r, allow_convert);
  ds.in_std = read_ltns<S>(r, allow_convert);
  ds.out_mean = read_ltns<S>(r, allow_convert);
  ds.out_std = read_ltns<S>(r, allow_convert);
  if (ds.inputs.shape[0] != static_cast<Index>(n))
    throw IoError(path + ": sample count mismatch between header and payload");
  return ds;
}

template <class SDst, class SSrc>
Dataset<SDst> cast_dataset(const Dataset<SSrc>& ds) {
  Dataset<SDst> out;
  out.kind = ds.kind;
  out.grid_h = ds.grid_h;
  out.grid_w = ds.grid_w;
  out.inputs = cast_tensor<SDst>(ds.inputs);
  out.targets = cast_tensor<SDst>(ds.targets);
  out.coords = cast_tensor<SDst>(ds.coords);
  out.in_mean = cast_tensor<SDst>(ds.in_mean);
  out.in_std = cast_tensor<SDst>(ds.in_std);
  out.out_mean = cast_tensor<SDst>(ds.out_mean);
  out.out_std = cast_tensor<SDst>(ds.out_std);
  return out;
}

}  // namespace lamo
