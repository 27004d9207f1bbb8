#pragma once

#include <functional>

#include "lamo/model.hpp"
#include "lamo/ssm.hpp"
#include "lamo/train.hpp"

namespace lamo {

// Property suites behind the `verify` subcommand. Everything runs in double
// precision with fixed seeds; each check reports the measured deviation so a
// failure is actionable.

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

namespace verify_detail {

inline CheckResult check(const std::string& name, bool pass, const std::string& detail) {
  return {name, pass, detail};
}

inline std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

struct ScanInstance {
  Tensor<double> delta, A, B, C, x;
};

inline ScanInstance random_scan_instance(Index L, Index Cn, Index P, Rng& rng, bool time_invariant) {
  ScanInstance r;
  r.delta = Tensor<double>(Shape{L, Cn});
  rng.fill_uniform(r.delta, 0.05, 0.8);
  r.A = Tensor<double>(Shape{Cn, P});
  rng.fill_uniform(r.A, -2.5, -0.05);
  r.B = Tensor<double>(Shape{L, P});
  rng.fill_normal(r.B);
  r.C = Tensor<double>(Shape{L, P});
  rng.fill_normal(r.C);
  r.x = Tensor<double>(Shape{L, Cn});
  rng.fill_normal(r.x);
  if (time_invariant)
    for (Index k = 1; k < L; ++k) {
      for (Index c = 0; c < Cn; ++c) r.delta(k, c) = r.delta(0, c);
      for (Index p = 0; p < P; ++p) {
        r.B(k, p) = r.B(0, p);
        r.C(k, p) = r.C(0, p);
      }
    }
  return r;
}

}  // namespace verify_detail

/// Scan three-form equivalence, parallel determinism, causality.
inline std::vector<CheckResult> verify_scan(int threads = 4) {
  using namespace verify_detail;
  std::vector<CheckResult> out;
  Rng rng(2024, 1);

  const std::vector<Index> lengths{1, 2, 3, 17, 64, 255};
  const std::vector<Index> states{1, 4, 16};
  double worst_pair = 0, worst_lti = 0;
  bool bitwise_ok = true;
  int instances = 0;
  while (instances < 50) {
    for (Index L : lengths)
      for (Index P : states) {
        if (instances >= 50) break;
        ++instances;
        const Index Cn = 1 + static_cast<Index>(rng.below(3));
        const bool lti = instances % 2 == 0;
        auto inst = random_scan_instance(L, Cn, P, rng, lti);
        auto d = discretize_values(inst.delta, inst.A, inst.B, inst.C, inst.x, ZohMode::Exact);
        auto seq = scan_sequential(d);
        auto par = scan_parallel(d, {}, nullptr, nullptr, threads);
        auto par1 = scan_parallel(d, {}, nullptr, nullptr, 1);
        worst_pair = std::max(worst_pair, double(max_abs_diff(seq.y, par.y)));
        for (Index i = 0; i < par.y.size(); ++i) bitwise_ok = bitwise_ok && par.y[i] == par1.y[i];
        if (L <= 512) {
          auto M = materialize_matrix(d);
          double dev = 0;
          for (Index c = 0; c < Cn; ++c)
            for (Index i = 0; i < L; ++i) {
              double acc = 0;
              for (Index j = 0; j <= i; ++j) acc += M(c, i, j) * inst.x(j, c);
              dev = std::max(dev, std::abs(acc - seq.y(i, c)));
            }
          worst_pair = std::max(worst_pair, dev);
          for (Index c = 0; c < Cn; ++c)
            for (Index i = 0; i < L; ++i)
              for (Index j = i + 1; j < L; ++j)
                if (M(c, i, j) != 0.0) bitwise_ok = false;
        }
        if (lti) {
          for (Index c = 0; c < Cn; ++c) {
            Tensor<double> ka, kb, kc;
            lti_from_step(d, c, ka, kb, kc);
            auto K = lti_kernel(ka, kb, kc, L);
            Tensor<double> xc(Shape{L});
            for (Index k = 0; k < L; ++k) xc[k] = inst.x(k, c);
            auto yc = lti_apply(xc, K);
            for (Index k = 0; k < L; ++k) worst_lti = std::max(worst_lti, std::abs(yc[k] - seq.y(k, c)));
          }
        }
      }
  }
  out.push_back(check("scan/three-form-equivalence", worst_pair < 1e-10,
                      "max pairwise dev " + sci(worst_pair) + " over 50 instances (tol 1e-10)"));
  out.push_back(check("scan/lti-convolution", worst_lti < 1e-10,
                      "max conv-vs-scan dev " + sci(worst_lti) + " (tol 1e-10)"));
  out.push_back(check("scan/bitwise-across-threads-and-causality", bitwise_ok,
                      bitwise_ok ? "parallel scan bit-identical for 1 vs " + std::to_string(threads) +
                                       " threads; M strictly causal"
                                 : "bitwise or causality violation"));

  // pseudo-linearity of the frozen step, skip off
  Rng prng(2024, 2);
  double worst_lin = 0;
  for (int t = 0; t < 20; ++t) {
    auto inst = random_scan_instance(48, 2, 4, prng, false);
    auto d = discretize_values(inst.delta, inst.A, inst.B, inst.C, inst.x, ZohMode::Exact);
    Tensor<double> u(Shape{48, 2}), v(Shape{48, 2});
    prng.fill_normal(u);
    prng.fill_normal(v);
    const double alpha = prng.uniform(-2, 2), beta = prng.uniform(-2, 2);
    auto lhs = apply_frozen(d, add(scale(u, alpha), scale(v, beta)));
    auto rhs = add(scale(apply_frozen(d, u), alpha), scale(apply_frozen(d, v), beta));
    worst_lin = std::max(worst_lin, double(max_abs_diff(lhs, rhs)));
  }
  out.push_back(check("scan/pseudo-linearity", worst_lin < 1e-10,
                      "max |f(au+bv) - af(u) - bf(v)| = " + sci(worst_lin) + " over 20 draws (tol 1e-10)"));
  return out;
}

/// ZOH discretization against a long-double closed form, Euler order,
/// stability of the discrete spectrum.
inline std::vector<CheckResult> verify_zoh() {
  using namespace verify_detail;
  std::vector<CheckResult> out;

  double worst_rel = 0, worst_simpl = 0;
  bool stable = true;
  const double a_grid[] = {-10, -5, -2, -1, -0.5, -0.1, -0.05, -0.01};
  const double b_grid[] = {1.0, -0.7, 2.3};
  for (double a : a_grid)
    for (int i = 0; i <= 40; ++i) {
      const double dt = std::pow(10.0, -4.0 + 4.0 * i / 40.0);  // [1e-4, 1]
      for (double b : b_grid) {
        Tensor<double> delta(Shape{1, 1}, {dt});
        Tensor<double> A(Shape{1, 1}, {a});
        Tensor<double> B(Shape{1, 1}, {b});
        Tensor<double> C(Shape{1, 1}, {1.0});
        Tensor<double> x(Shape{1, 1}, {1.0});
        auto ex = discretize_values(delta, A, B, C, x, ZohMode::Exact);
        const long double ref =
            std::expm1l(static_cast<long double>(dt) * static_cast<long double>(a)) / static_cast<long double>(a) *
            static_cast<long double>(b);
        const double rel = std::abs(double((static_cast<long double>(ex.b_bar[0]) - ref) /
                                           std::max(std::abs(ref), 1e-300L)));
        worst_rel = std::max(worst_rel, rel);
        const double abar_ref = std::exp(dt * a);
        worst_rel = std::max(worst_rel, std::abs(ex.a_bar[0] - abar_ref) / abar_ref);
        stable = stable && ex.a_bar[0] > 0.0 && ex.a_bar[0] < 1.0;
        auto si = discretize_values(delta, A, B, C, x, ZohMode::Simplified);
        worst_simpl = std::max(worst_simpl, std::abs(si.b_bar[0] - dt * b));
      }
    }
  out.push_back(check("zoh/exact-closed-form", worst_rel < 1e-12,
                      "max rel err vs long-double form " + sci(worst_rel) + " (tol 1e-12)"));
  out.push_back(
      check("zoh/simplified-is-delta-B", worst_simpl == 0.0, "max |Bbar - delta B| = " + sci(worst_simpl)));
  out.push_back(check("zoh/stability", stable, "Abar in (0,1) across the sampled (A, delta) range"));

  double rmin = 1e9, rmax = -1e9;
  for (double z = -0.5; z <= -0.01; z += 0.005) {
    const double e_full = std::abs(std::exp(z) - (1.0 + z));
    const double e_half = std::abs(std::exp(z / 2) - (1.0 + z / 2));
    const double r = e_half / e_full;
    rmin = std::min(rmin, r);
    rmax = std::max(rmax, r);
  }
  out.push_back(check("zoh/euler-remainder-order", rmin > 0.2 && rmax < 0.3,
                      "halving ratio in [" + sci(rmin) + ", " + sci(rmax) + "] (want within [0.2, 0.3])"));
  return out;
}

namespace verify_detail {

inline Tensor<double> randn(Shape sh, Rng& rng, double stddev = 1.0) {
  Tensor<double> t(std::move(sh));
  rng.fill_normal(t, 0.0, stddev);
  return t;
}

/// Per-coordinate central differences with a step sweep (loss-ulp noise vs
/// truncation have opposite step preferences).
template <class LossFn>
double model_param_grad_err(LamoModel<double>& m, const Var<double>& p, LossFn&& loss_value) {
  m.zero_grads();
  auto loss = loss_value();
  backward(loss);
  Tensor<double> analytic = p->grad.size() ? p->grad : Tensor<double>(p->value.shape);
  double worst = 0;
  for (Index i = 0; i < p->value.size(); ++i) {
    double best = 1e300;
    for (double step : {1e-5, 1e-4, 1e-3}) {
      const double saved = p->value[i];
      p->value[i] = saved + step;
      const double fp = loss_value()->value.item();
      p->value[i] = saved - step;
      const double fm = loss_value()->value.item();
      p->value[i] = saved;
      const double cd = (fp - fm) / (2 * step);
      const double denom = std::max({std::abs(analytic[i]), std::abs(cd), 1e-8});
      best = std::min(best, std::abs(analytic[i] - cd) / denom);
    }
    worst = std::max(worst, best);
  }
  return worst;
}

}  // namespace verify_detail

/// Gradient oracle over every registered op (10 random shapes each) and the
/// full model on a 4x4 grid, every parameter group.
inline std::vector<CheckResult> verify_grad() {
  using namespace verify_detail;
  std::vector<CheckResult> out;
  using F1 = std::function<Var<double>(const Var<double>&)>;

  Rng rng(77, 0);
  auto shape2 = [&rng]() {
    return Shape{1 + static_cast<Index>(rng.below(5)), 1 + static_cast<Index>(rng.below(5))};
  };

  struct OpCase {
    std::string name;
    std::function<double(Rng&)> run;  // one random instance, returns grad_check error
  };
  std::vector<OpCase> cases;
  auto wrap = [](Var<double> y) { return sum_all(mul(y, y)); };

  cases.push_back({"matmul", [&](Rng& r) {
    const Index m = 1 + Index(r.below(4)), k = 1 + Index(r.below(4)), n = 1 + Index(r.below(4));
    std::function<Var<double>(const std::vector<Var<double>>&)> f =
        [&](const std::vector<Var<double>>& v) { return wrap(matmul(v[0], v[1])); };
    std::vector<Tensor<double>> in{randn({m, k}, r), randn({k, n}, r)};
    return std::max(grad_check_multi<double>(f, in, 0, 1e-5), grad_check_multi<double>(f, in, 1, 1e-5));
  }});
  cases.push_back({"add", [&](Rng& r) {
    auto sh = shape2();
    const Tensor<double> c = randn(sh, r);
    F1 f = [c, &wrap](const Var<double>& v) { return wrap(add(v, constant(c))); };
    return grad_check<double>(f, randn(sh, r), 1e-5);
  }});
  cases.push_back({"sub", [&](Rng& r) {
    auto sh = shape2();
    const Tensor<double> c = randn(sh, r);
    F1 f = [c, &wrap](const Var<double>& v) { return wrap(sub(v, constant(c))); };
    return grad_check<double>(f, randn(sh, r), 1e-5);
  }});
  cases.push_back({"mul", [&](Rng& r) {
    auto sh = shape2();
    const Tensor<double> c = randn(sh, r);
    F1 f = [c, &wrap](const Var<double>& v) { return wrap(mul(v, constant(c))); };
    return grad_check<double>(f, randn(sh, r), 1e-5);
  }});
  cases.push_back({"scale", [&](Rng& r) {
    F1 f = [&wrap](const Var<double>& v) { return wrap(scale(v, -1.7)); };
    return grad_check<double>(f, randn(shape2(), r), 1e-5);
  }});
  cases.push_back({"add_bias", [&](Rng& r) {
    auto sh = shape2();
    std::function<Var<double>(const std::vector<Var<double>>&)> f =
        [&](const std::vector<Var<double>>& v) { return wrap(add_bias(v[0], v[1])); };
    std::vector<Tensor<double>> in{randn(sh, r), randn({sh[1]}, r)};
    return std::max(grad_check_multi<double>(f, in, 0, 1e-5), grad_check_multi<double>(f, in, 1, 1e-5));
  }});
  cases.push_back({"add_scalar", [&](Rng& r) {
    F1 f = [&wrap](const Var<double>& v) { return wrap(add_scalar(v, 0.4)); };
    return grad_check<double>(f, randn(shape2(), r), 1e-5);
  }});
  cases.push_back({"transpose", [&](Rng& r) {
    F1 f = [&wrap](const Var<double>& v) { return wrap(transpose(v)); };
    return grad_check<double>(f, randn(shape2(), r), 1e-5);
  }});
  cases.push_back({"sum", [&](Rng& r) {
    F1 f = [](const Var<double>& v) { return sum_all(mul(v, v)); };
    return grad_check<double>(f, randn(shape2(), r), 1e-5);
  }});
  cases.push_back({"mean", [&](Rng& r) {
    F1 f = [](const Var<double>& v) { return mean_all(mul(v, v)); };
    return grad_check<double>(f, randn(shape2(), r), 1e-5);
  }});
  cases.push_back({"sqrt", [&](Rng& r) {
    F1 f = [](const Var<double>& v) { return sum_all(sqrt_elem(v)); };
    return grad_check<double>(f, map_elements(randn(shape2(), r), [](double z) { return z * z + 0.5; }), 1e-5);
  }});
  cases.push_back({"recip", [&](Rng& r) {
    F1 f = [](const Var<double>& v) { return sum_all(recip(v)); };
    return grad_check<double>(f, map_elements(randn(shape2(), r), [](double z) { return z * z + 1.0; }), 1e-5);
  }});
  cases.push_back({"silu", [&](Rng& r) {
    F1 f = [](const Var<double>& v) { return sum_all(silu(v)); };
    return grad_check<double>(f, randn(shape2(), r), 1e-5);
  }});
  cases.push_back({"softplus", [&](Rng& r) {
    F1 f = [&wrap](const Var<double>& v) { return wrap(softplus(v)); };
    return grad_check<double>(f, randn(shape2(), r), 1e-5);
  }});
  cases.push_back({"softmax", [&](Rng& r) {
    auto sh = shape2();
    const int axis = static_cast<int>(r.below(2));
    F1 f = [axis, &wrap](const Var<double>& v) { return wrap(softmax(v, axis)); };
    return grad_check<double>(f, randn(sh, r), 1e-5);
  }});
  cases.push_back({"layernorm", [&](Rng& r) {
    const Index d = 2 + Index(r.below(5));
    std::function<Var<double>(const std::vector<Var<double>>&)> f =
        [&](const std::vector<Var<double>>& v) { return wrap(layernorm(v[0], v[1], v[2], 1e-5)); };
    std::vector<Tensor<double>> in{randn({3, d}, r), randn({d}, r), randn({d}, r)};
    double worst = 0;
    for (std::size_t i = 0; i < 3; ++i) worst = std::max(worst, grad_check_multi<double>(f, in, i, 1e-5));
    return worst;
  }});
  cases.push_back({"gather_rows", [&](Rng& r) {
    auto sh = shape2();
    std::vector<Index> perm(static_cast<std::size_t>(sh[0]));
    for (Index i = 0; i < sh[0]; ++i) perm[static_cast<std::size_t>(i)] = i;
    shuffle(perm, r);
    F1 f = [perm, &wrap](const Var<double>& v) { return wrap(gather_rows(v, perm)); };
    return grad_check<double>(f, randn(sh, r), 1e-5);
  }});
  cases.push_back({"slice_concat_cols", [&](Rng& r) {
    const Index rows = 1 + Index(r.below(4)), cols = 2 + Index(r.below(4));
    const Index cut = 1 + Index(r.below(static_cast<std::uint64_t>(cols - 1)));
    F1 f = [cut, cols, &wrap](const Var<double>& v) {
      return wrap(concat_cols<double>({slice_cols(v, cut, cols), slice_cols(v, 0, cut)}));
    };
    return grad_check<double>(f, randn({rows, cols}, r), 1e-5);
  }});
  cases.push_back({"scale_rows", [&](Rng& r) {
    auto sh = shape2();
    std::function<Var<double>(const std::vector<Var<double>>&)> f =
        [&](const std::vector<Var<double>>& v) { return wrap(scale_rows(v[0], v[1])); };
    std::vector<Tensor<double>> in{randn(sh, r), randn({sh[0]}, r)};
    return std::max(grad_check_multi<double>(f, in, 0, 1e-5), grad_check_multi<double>(f, in, 1, 1e-5));
  }});
  cases.push_back({"col_sums", [&](Rng& r) {
    F1 f = [&wrap](const Var<double>& v) { return wrap(col_sums(v)); };
    return grad_check<double>(f, randn(shape2(), r), 1e-5);
  }});
  cases.push_back({"depthwise_causal_conv", [&](Rng& r) {
    const Index L = 3 + Index(r.below(5)), C = 1 + Index(r.below(3)), K = 1 + Index(r.below(3));
    std::function<Var<double>(const std::vector<Var<double>>&)> f =
        [&](const std::vector<Var<double>>& v) { return wrap(depthwise_causal_conv(v[0], v[1], v[2])); };
    std::vector<Tensor<double>> in{randn({L, C}, r), randn({K, C}, r), randn({C}, r)};
    double worst = 0;
    for (std::size_t i = 0; i < 3; ++i) worst = std::max(worst, grad_check_multi<double>(f, in, i, 1e-5));
    return worst;
  }});
  cases.push_back({"grouped_affine", [&](Rng& r) {
    const Index N = 2 + Index(r.below(5)), C = 1 + Index(r.below(3)), G = 1 + Index(r.below(3));
    std::vector<Index> groups(static_cast<std::size_t>(N));
    for (auto& g : groups) g = Index(r.below(static_cast<std::uint64_t>(G)));
    std::function<Var<double>(const std::vector<Var<double>>&)> f =
        [&](const std::vector<Var<double>>& v) { return wrap(grouped_affine(v[0], v[1], v[2], groups)); };
    std::vector<Tensor<double>> in{randn({N, C}, r), randn({G, C, C}, r), randn({G, C}, r)};
    double worst = 0;
    for (std::size_t i = 0; i < 3; ++i) worst = std::max(worst, grad_check_multi<double>(f, in, i, 1e-5));
    return worst;
  }});
  cases.push_back({"spatial_gradients", [&](Rng& r) {
    const Index h = 2 + Index(r.below(4)), w = 2 + Index(r.below(4)), C = 1 + Index(r.below(2));
    F1 f = [h, w, &wrap](const Var<double>& v) { return wrap(spatial_gradients(v, h, w)); };
    return grad_check<double>(f, randn({h * w, C}, r), 1e-5);
  }});
  for (ZohMode mode : {ZohMode::Exact, ZohMode::Simplified}) {
    cases.push_back({std::string("selective_scan_") + (mode == ZohMode::Exact ? "exact" : "simplified"),
                     [mode, &randn](Rng& r) {
      const Index L = 2 + Index(r.below(20)), Cn = 1 + Index(r.below(3)), P = 1 + Index(r.below(4));
      Tensor<double> delta(Shape{L, Cn});
      r.fill_uniform(delta, 0.05, 0.6);
      Tensor<double> w(Shape{L, Cn});
      r.fill_normal(w);
      std::function<Var<double>(const std::vector<Var<double>>&)> f =
          [mode, w](const std::vector<Var<double>>& v) {
            return sum_all(mul(selective_scan(v[0], v[1], v[2], v[3], v[4], v[5], mode), constant(w)));
          };
      std::vector<Tensor<double>> in{delta,           randn({Cn, P}, r), randn({L, P}, r),
                                     randn({L, P}, r), randn({L, Cn}, r), randn({Cn}, r)};
      double worst = 0;
      for (std::size_t i = 0; i < in.size(); ++i) worst = std::max(worst, grad_check_multi<double>(f, in, i, 1e-5));
      return worst;
    }});
  }

  for (auto& c : cases) {
    Rng op_rng(4242, std::hash<std::string>{}(c.name));
    double worst = 0;
    for (int rep = 0; rep < 10; ++rep) worst = std::max(worst, c.run(op_rng));
    out.push_back(verify_detail::check("grad/op/" + c.name, worst < 1e-4,
                                       "max rel err " + verify_detail::sci(worst) + " over 10 shapes (tol 1e-4)"));
  }

  // full model on a 4x4 grid: every parameter group
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.embed_dim = 8;
  cfg.latent_tokens = 4;
  cfg.state_dim = 4;
  cfg.heads = 2;
  cfg.expand = 2;
  cfg.directions = Directions::Multi4;
  cfg.conv_width = 3;
  cfg.coder_mode = CoderMode::Patchify;
  cfg.grid_h = 4;
  cfg.grid_w = 4;
  cfg.seed = 7;
  LamoModel<double> model(cfg);
  Rng drng(501, 0);
  Tensor<double> x = verify_detail::randn({16, 1}, drng);
  Tensor<double> coords = unit_grid_coords<double>(4, 4);
  Tensor<double> target = verify_detail::randn({16, 1}, drng);
  auto loss_value = [&]() { return rel_l2_loss(model.forward(x, coords), target); };
  double worst_model = 0;
  std::string worst_name;
  for (const auto& [name, p] : model.params()) {
    const double err = verify_detail::model_param_grad_err(model, p, loss_value);
    if (err > worst_model) {
      worst_model = err;
      worst_name = name;
    }
  }
  out.push_back(verify_detail::check(
      "grad/full-model-4x4", worst_model < 1e-4,
      "max rel err " + verify_detail::sci(worst_model) + " (worst group: " + worst_name + ", tol 1e-4)"));
  return out;
}

/// Coder assignments, patch equivalence, residual identity, directions.
inline std::vector<CheckResult> verify_coder() {
  using namespace verify_detail;
  std::vector<CheckResult> out;
  Rng rng(88, 0);

  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.embed_dim = 8;
  cfg.latent_tokens = 4;
  cfg.state_dim = 4;
  cfg.heads = 1;
  cfg.directions = Directions::Multi4;
  cfg.coder_mode = CoderMode::Learned;
  cfg.grid_h = 4;
  cfg.grid_w = 4;
  cfg.fixed_points = 16;
  cfg.seed = 3;
  LamoModel<double> m(cfg);

  auto X = constant(randn({16, 8}, rng));
  auto W = m.encoder_weights(X)->value;
  double worst_row = 0;
  for (Index i = 0; i < 16; ++i) {
    double s = 0;
    for (Index j = 0; j < 4; ++j) s += W(i, j);
    worst_row = std::max(worst_row, std::abs(s - 1.0));
  }
  auto Wd = m.decoder_weights(constant(randn({4, 8}, rng)))->value;
  double worst_col = 0;
  for (Index i = 0; i < 16; ++i) {
    double s = 0;
    for (Index j = 0; j < 4; ++j) s += Wd(j, i);
    worst_col = std::max(worst_col, std::abs(s - 1.0));
  }
  out.push_back(check("coder/assignment-probability-sums", worst_row < 1e-6 && worst_col < 1e-6,
                      "encoder row dev " + sci(worst_row) + ", decoder column dev " + sci(worst_col) +
                          " (tol 1e-6)"));

  // one-hot-by-patch logits with normalization reproduce patch means
  const Index h = 4, w = 4, ph = 2, pw = 2;
  Tensor<double> Xp = randn({16, 3}, rng);
  LatentGrid g{h / ph, w / pw, ph, pw};
  Tensor<double> logits(Shape{16, 4}, -80.0);
  for (Index i = 0; i < 16; ++i) logits(i, patch_of_point(i, w, g)) = 80.0;
  auto Z = encode_from_logits(constant(Xp), constant(logits), true)->value;
  const double patch_dev = max_abs_diff(Z, patchify_mean(Xp, h, w, ph, pw));
  out.push_back(
      check("coder/one-hot-equals-patchify", patch_dev < 1e-6, "max dev " + sci(patch_dev) + " (tol 1e-6)"));

  // patch round trip is the per-patch mean projection, idempotent
  auto once = unpatchify(patchify_mean(Xp, h, w, ph, pw), h, w, ph, pw);
  auto twice = unpatchify(patchify_mean(once, h, w, ph, pw), h, w, ph, pw);
  const double idem = max_abs_diff(once, twice);
  out.push_back(check("coder/patch-idempotence", idem < 1e-12, "second application moves by " + sci(idem)));

  // residual identity with zeroed sub-layer outputs, exact
  ModelConfig rcfg = cfg;
  rcfg.coder_mode = CoderMode::Patchify;
  LamoModel<double> rm(rcfg);
  for (const auto& [name, p] : rm.params())
    if (name.find("out.") != std::string::npos || name.find("mlp2") != std::string::npos)
      arr_view(p->value).setZero();
  Tensor<double> Zr = randn({4, 8}, rng);
  const double res_dev = max_abs_diff(rm.latent_block(0, constant(Zr))->value, Zr);
  out.push_back(check("coder/residual-identity", res_dev == 0.0, "max dev " + sci(res_dev) + " (want exactly 0)"));

  // direction orders are bijections and pair into reversals
  bool dirs_ok = true;
  for (int d = 0; d < 4; ++d) {
    auto o = direction_order(3, 5, d);
    auto s = o;
    std::sort(s.begin(), s.end());
    for (Index k = 0; k < 15; ++k) dirs_ok = dirs_ok && s[static_cast<std::size_t>(k)] == k;
  }
  auto d0 = direction_order(3, 5, 0);
  std::reverse(d0.begin(), d0.end());
  dirs_ok = dirs_ok && d0 == direction_order(3, 5, 1);
  dirs_ok = dirs_ok && direction_order(2, 2, 2) == std::vector<Index>{1, 0, 3, 2};
  out.push_back(check("coder/direction-orders", dirs_ok, "bijectivity and reversal pairing on 3x5 and 2x2"));
  return out;
}

inline std::vector<CheckResult> run_suite(const std::string& suite, int threads = 4) {
  std::vector<CheckResult> all;
  auto append = [&all](std::vector<CheckResult> v) { all.insert(all.end(), v.begin(), v.end()); };
  if (suite == "all" || suite == "scan") append(verify_scan(threads));
  if (suite == "all" || suite == "zoh") append(verify_zoh());
  if (suite == "all" || suite == "grad") append(verify_grad());
  if (suite == "all" || suite == "coder") append(verify_coder());
  if (all.empty()) throw ContractError("unknown verify suite '" + suite + "' (all|scan|grad|coder|zoh)");
  return all;
}

}  // namespace lamo
