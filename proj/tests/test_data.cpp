#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <set>

#include "lamo/data.hpp"

using namespace lamo;

TEST_CASE("coefficient fields: deterministic, two-level, balanced") {
  Rng r1(42, 3), r2(42, 3);
  auto f1 = gen_coeff_field<double>(64, 64, r1);
  auto f2 = gen_coeff_field<double>(64, 64, r2);
  for (Index i = 0; i < f1.size(); ++i) CHECK(f1[i] == f2[i]);  // bitwise

  std::set<double> values(f1.data.begin(), f1.data.end());
  CHECK(values.size() == 2);
  CHECK(values.count(4.0) == 1);
  CHECK(values.count(12.0) == 1);

  const auto hi = std::count(f1.data.begin(), f1.data.end(), 12.0);
  const double frac = double(hi) / double(f1.size());
  CHECK(frac > 0.48);
  CHECK(frac < 0.52);

  Rng r3(1);
  CHECK_THROWS_AS(gen_coeff_field<double>(7, 7, r3), ContractError);
}

TEST_CASE("darcy solve: boundary, symmetry, residual") {
  Tensor<double> a(Shape{17, 17}, 1.0);
  auto u = solve_darcy(a, 1.0);

  for (Index j = 0; j < 17; ++j) {
    CHECK(u(0, j) == 0.0);
    CHECK(u(16, j) == 0.0);
    CHECK(u(j, 0) == 0.0);
    CHECK(u(j, 16) == 0.0);
  }

  // 4-fold symmetry of operator + forcing
  double asym = 0;
  for (Index i = 0; i < 17; ++i)
    for (Index j = 0; j < 17; ++j) {
      asym = std::max(asym, std::abs(u(i, j) - u(j, i)));
      asym = std::max(asym, std::abs(u(i, j) - u(16 - i, j)));
      asym = std::max(asym, std::abs(u(i, j) - u(i, 16 - j)));
    }
  CHECK(asym < 1e-10);

  CHECK(darcy_residual(a, u, 1.0) < 1e-8);

  // interior is positive for positive forcing with this sign convention
  CHECK(u(8, 8) > 0.0);

  Tensor<double> bad(Shape{9, 9}, 1.0);
  bad(4, 4) = 0.0;
  CHECK_THROWS_AS(solve_darcy(bad, 1.0), ContractError);
}

TEST_CASE("darcy solve on a rough two-level field still meets the residual") {
  Rng rng(7, 11);
  auto a = gen_coeff_field<double>(32, 32, rng);
  auto u = solve_darcy(a, 1.0);
  CHECK(darcy_residual(a, u, 1.0) < 1e-8);
  CHECK(u.all_finite());
}

TEST_CASE("grid refinement sanity for a = 1") {
  Tensor<double> a17(Shape{17, 17}, 1.0), a33(Shape{33, 33}, 1.0);
  auto u17 = solve_darcy(a17, 1.0);
  auto u33 = solve_darcy(a33, 1.0);
  double num = 0, den = 0;
  for (Index i = 0; i < 17; ++i)
    for (Index j = 0; j < 17; ++j) {
      const double d = u17(i, j) - u33(2 * i, 2 * j);
      num += d * d;
      den += u33(2 * i, 2 * j) * u33(2 * i, 2 * j);
    }
  CHECK(std::sqrt(num / den) < 0.02);
}

TEST_CASE("diffusion: conservation and maximum principle") {
  const Index L = 64;
  Tensor<double> delta(Shape{L});
  delta[L / 2] = 1.0;
  auto out = diffuse_rollout(delta, 0.25, 50);
  CHECK(std::abs(sum_all(out) - 1.0) < 1e-12);  // periodic scheme conserves mass

  Rng rng(5, 2);
  auto u = gen_smooth_periodic<double>(L, rng);
  double prev_max = max_abs(u);
  for (int s = 0; s < 10; ++s) {
    u = diffuse_rollout(u, 0.25, 5);
    const double cur = max_abs(u);
    CHECK(cur <= prev_max + 1e-14);
    prev_max = cur;
  }

  CHECK_THROWS_AS(diffuse_rollout(delta, 0.6, 1), ContractError);
}

TEST_CASE("advection at unit CFL is an exact shift") {
  Rng rng(9, 4);
  auto u = gen_smooth_periodic<double>(32, rng);
  auto fwd = advect_rollout(u, 1.0, 3);
  auto bwd = advect_rollout(u, 1.0, -3);
  for (Index j = 0; j < 32; ++j) {
    CHECK(fwd[j] == u[(j + 32 - 3) % 32]);
    CHECK(bwd[j] == u[(j + 3) % 32]);
  }
  CHECK_THROWS_AS(advect_rollout(u, 1.5, 1), ContractError);
}

TEST_CASE("normalization statistics and round trip") {
  auto ds = make_seq1d_dataset(Seq1dKind::Diffusion, 32, 24, 10, 77);
  auto norm = normalize(ds);

  // train-split statistics: post-normalization mean ~ 0, std ~ 1
  Tensor<double> m, s;
  compute_norm_stats(norm.inputs, m, s);
  CHECK(std::abs(m[0]) < 1e-6);
  CHECK(std::abs(s[0] - 1.0) < 1e-3);

  // round trip in single precision
  auto dsf = cast_dataset<float>(ds);
  auto normf = normalize(dsf);
  for (Index i = 0; i < 4; ++i) {
    auto pred = normf.target_sample(i);
    auto back = denormalize(pred, normf.out_mean, normf.out_std);
    auto raw = dsf.target_sample(i);
    CHECK(max_abs_diff(back, raw) < 1e-6);
  }

  // constant channel normalizes to zeros
  Dataset<double> cds = ds;
  for (Index i = 0; i < cds.inputs.size(); ++i) cds.inputs[i] = 5.5;
  compute_norm_stats(cds.inputs, cds.in_mean, cds.in_std);
  auto cn = normalize(cds);
  CHECK(max_abs(cn.inputs) < 1e-6);
}

TEST_CASE("dataset persistence is bitwise and deterministic") {
  auto ds = make_darcy_dataset(8, 8, 3, 123);
  const auto dir = std::filesystem::temp_directory_path();
  const auto p1 = (dir / "lamo_ds1.ldst").string();
  const auto p2 = (dir / "lamo_ds2.ldst").string();
  save_dataset(p1, ds);
  auto ds2 = make_darcy_dataset(8, 8, 3, 123);
  save_dataset(p2, ds2);

  auto b1 = ByteReader::from_file(p1);
  auto b2 = ByteReader::from_file(p2);
  REQUIRE(b1.size() == b2.size());
  CHECK(std::equal(b1.base(), b1.base() + b1.size(), b2.base()));  // (seed, config) fixes the bytes

  auto back = load_dataset<double>(p1);
  CHECK(back.kind == DatasetKind::Grid2d);
  CHECK(back.grid_h == 8);
  for (Index i = 0; i < ds.inputs.size(); ++i) CHECK(back.inputs[i] == ds.inputs[i]);
  for (Index i = 0; i < ds.targets.size(); ++i) CHECK(back.targets[i] == ds.targets[i]);

  // truncation reports an offset
  std::vector<std::uint8_t> head(b1.base(), b1.base() + 40);
  std::ofstream f(p2, std::ios::binary | std::ios::trunc);
  f.write(reinterpret_cast<const char*>(head.data()), 40);
  f.close();
  CHECK_THROWS_WITH_AS(load_dataset<double>(p2), doctest::Contains("truncated"), IoError);
  std::filesystem::remove(p1);
  std::filesystem::remove(p2);
}

TEST_CASE("seq1d advection dataset needs both directions") {
  auto ds = make_seq1d_dataset(Seq1dKind::Advection, 32, 2, 4, 5);
  // target is the average of the two opposite shifts
  for (Index k = 0; k < 2; ++k) {
    Rng rng(5, k);
    auto u0 = gen_smooth_periodic<double>(32, rng);
    for (Index j = 0; j < 32; ++j) {
      const double want = 0.5 * (u0[(j + 32 - 4) % 32] + u0[(j + 4) % 32]);
      CHECK(ds.targets[(k * 32 + j)] == doctest::Approx(want).epsilon(1e-12));
    }
  }
}
