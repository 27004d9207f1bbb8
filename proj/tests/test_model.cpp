#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "lamo/model.hpp"

using namespace lamo;

namespace {

Tensor<double> randn(Shape sh, Rng& rng, double stddev = 1.0) {
  Tensor<double> t(std::move(sh));
  rng.fill_normal(t, 0.0, stddev);
  return t;
}

ModelConfig toy_grid_config() {
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
  cfg.in_channels = 1;
  cfg.out_channels = 1;
  cfg.coord_channels = 2;
  cfg.seed = 99;
  return cfg;
}

Tensor<double> grid_coords(Index h, Index w) {
  Tensor<double> c(Shape{h * w, 2});
  for (Index r = 0; r < h; ++r)
    for (Index j = 0; j < w; ++j) {
      c(r * w + j, 0) = w > 1 ? double(j) / double(w - 1) : 0.0;
      c(r * w + j, 1) = h > 1 ? double(r) / double(h - 1) : 0.0;
    }
  return c;
}

template <class S>
const Var<S>& param(const LamoModel<S>& m, const std::string& name) {
  for (const auto& [n, v] : m.params())
    if (n == name) return v;
  throw std::runtime_error("no parameter " + name);
}

}  // namespace

TEST_CASE("direction orders on a 2x2 grid") {
  CHECK(direction_order(2, 2, 0) == std::vector<Index>{0, 1, 2, 3});
  CHECK(direction_order(2, 2, 1) == std::vector<Index>{3, 2, 1, 0});
  CHECK(direction_order(2, 2, 2) == std::vector<Index>{1, 0, 3, 2});
  CHECK(direction_order(2, 2, 3) == std::vector<Index>{2, 3, 0, 1});

  for (int d = 0; d < 4; ++d) {
    auto o = direction_order(3, 5, d);
    auto sorted = o;
    std::sort(sorted.begin(), sorted.end());
    for (Index k = 0; k < 15; ++k) CHECK(sorted[static_cast<std::size_t>(k)] == k);  // bijection
  }
  auto d0 = direction_order(3, 5, 0);
  auto d1 = direction_order(3, 5, 1);
  std::reverse(d0.begin(), d0.end());
  CHECK(d0 == d1);
  auto d2 = direction_order(3, 5, 2);
  auto d3 = direction_order(3, 5, 3);
  std::reverse(d2.begin(), d2.end());
  CHECK(d2 == d3);
}

TEST_CASE("patchify and unpatchify") {
  // 1x1 patches: latents are the field itself, row-major
  Tensor<double> f(Shape{4, 1}, {1, 2, 3, 4});
  auto z = patchify_mean(f, 2, 2, 1, 1);
  for (Index i = 0; i < 4; ++i) CHECK(z[i] == f[i]);

  // constant field: every latent equals the constant
  Tensor<double> c(Shape{16, 1}, 3.75);
  auto zc = patchify_mean(c, 4, 4, 2, 2);
  CHECK(zc.shape == Shape{4, 1});
  for (Index i = 0; i < 4; ++i) CHECK(zc[i] == doctest::Approx(3.75));

  // round trip equals per-patch mean projection and is idempotent
  Rng rng(3);
  Tensor<double> x = randn({16, 2}, rng);
  auto once = unpatchify(patchify_mean(x, 4, 4, 2, 2), 4, 4, 2, 2);
  auto twice = unpatchify(patchify_mean(once, 4, 4, 2, 2), 4, 4, 2, 2);
  CHECK(max_abs_diff(once, twice) < 1e-14);
  for (Index i = 0; i < 16; ++i) {
    // projection property: re-encoding the projected field changes nothing
    CHECK(once(i, 0) == doctest::Approx(twice(i, 0)));
  }

  CHECK_THROWS_AS(patchify_mean(x, 4, 4, 3, 2), ContractError);  // divisibility
}

TEST_CASE("encoder: identity assignment, one-hot mean, probability rows") {
  // one-hot rows W = I2 -> Z = X under either normalization
  Tensor<double> X(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor<double> logits_eye(Shape{2, 2}, {50, -50, -50, 50});
  for (bool norm : {false, true}) {
    // the 1e-8 mass guard shifts the normalized branch at the same order
    auto Z = encode_from_logits(constant(X), constant(logits_eye), norm)->value;
    CHECK(max_abs_diff(Z, X) < 1e-6);
  }

  // both rows one-hot on latent 0, normalize on -> Z0 = mean, Z1 ~ 0
  Tensor<double> X2(Shape{2, 1}, {2, 4});
  Tensor<double> logits_first(Shape{2, 2}, {60, -60, 60, -60});
  auto Z2 = encode_from_logits(constant(X2), constant(logits_first), true)->value;
  CHECK(Z2(0, 0) == doctest::Approx(3.0).epsilon(1e-7));
  CHECK(std::abs(Z2(1, 0)) < 1e-6);

  // softmax rows of the learned encoder sum to one
  ModelConfig cfg = toy_grid_config();
  cfg.coder_mode = CoderMode::Learned;
  cfg.fixed_points = 16;
  LamoModel<double> m(cfg);
  Rng rng(5);
  auto W = m.encoder_weights(constant(randn({16, 8}, rng)))->value;
  for (Index i = 0; i < 16; ++i) {
    double s = 0;
    for (Index j = 0; j < 4; ++j) s += W(i, j);
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
}

TEST_CASE("one-hot-by-patch encoding with normalization equals patchify") {
  Rng rng(7);
  const Index h = 4, w = 4, ph = 2, pw = 2, M = 4;
  Tensor<double> X = randn({h * w, 3}, rng);
  LatentGrid g{h / ph, w / pw, ph, pw};
  Tensor<double> logits(Shape{h * w, M}, -80.0);
  for (Index i = 0; i < h * w; ++i) logits(i, patch_of_point(i, w, g)) = 80.0;
  auto Z = encode_from_logits(constant(X), constant(logits), true)->value;
  auto want = patchify_mean(X, h, w, ph, pw);
  CHECK(max_abs_diff(Z, want) < 1e-6);
}

TEST_CASE("decoder: convexity over latents") {
  // M = 1: every output point equals the single latent
  Tensor<double> Z1(Shape{1, 3}, {1.5, -2.0, 0.25});
  Tensor<double> logits1(Shape{1, 5}, 0.3);
  auto Y1 = decode_from_logits(constant(Z1), constant(logits1))->value;
  CHECK(Y1.shape == Shape{5, 3});
  for (Index i = 0; i < 5; ++i)
    for (Index c = 0; c < 3; ++c) CHECK(Y1(i, c) == doctest::Approx(Z1(0, c)));

  // identical latents: every output equals that latent regardless of weights
  Rng rng(11);
  Tensor<double> z(Shape{4, 2});
  for (Index j = 0; j < 4; ++j) {
    z(j, 0) = 0.7;
    z(j, 1) = -1.2;
  }
  auto Y = decode_from_logits(constant(z), constant(randn({4, 6}, rng)))->value;
  for (Index i = 0; i < 6; ++i) {
    CHECK(Y(i, 0) == doctest::Approx(0.7));
    CHECK(Y(i, 1) == doctest::Approx(-1.2));
  }

  // decoder weights are probability vectors per physical point
  ModelConfig cfg = toy_grid_config();
  cfg.coder_mode = CoderMode::Learned;
  cfg.fixed_points = 16;
  LamoModel<double> m(cfg);
  auto W = m.decoder_weights(constant(randn({4, 8}, rng)))->value;  // [M x N]
  for (Index i = 0; i < 16; ++i) {
    double s = 0;
    for (Index j = 0; j < 4; ++j) s += W(j, i);
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
}

TEST_CASE("lift is pointwise: permutation equivariant, bias-only maps to bias") {
  LamoModel<double> m(toy_grid_config());
  Rng rng(13);
  Tensor<double> xc = concat_cols<double>({randn({16, 1}, rng), grid_coords(4, 4)});
  auto y = m.lift(constant(xc))->value;

  std::vector<Index> perm(16);
  for (Index i = 0; i < 16; ++i) perm[static_cast<std::size_t>(i)] = (i * 7) % 16;
  auto y_perm = m.lift(constant(gather_rows(xc, perm)))->value;
  CHECK(max_abs_diff(y_perm, gather_rows(y, perm)) == 0.0);

  // zero weights: every row equals the output-layer bias
  LamoModel<double> mz(toy_grid_config());
  arr_view(param(mz, "lift1.w")->value).setZero();
  arr_view(param(mz, "lift2.w")->value).setZero();
  auto& b2 = param(mz, "lift2.b")->value;
  for (Index j = 0; j < 8; ++j) b2[j] = 0.1 * double(j + 1);
  auto yb = mz.lift(constant(xc))->value;
  for (Index i = 0; i < 16; ++i)
    for (Index j = 0; j < 8; ++j) CHECK(yb(i, j) == doctest::Approx(b2[j]));
}

TEST_CASE("latent block is the identity when sub-layer outputs are zeroed") {
  LamoModel<double> m(toy_grid_config());
  for (int l = 0; l < 2; ++l) {
    const std::string bp = "block" + std::to_string(l) + ".";
    arr_view(param(m, bp + "out.w")->value).setZero();
    arr_view(param(m, bp + "out.b")->value).setZero();
    arr_view(param(m, bp + "mlp2.w")->value).setZero();
    arr_view(param(m, bp + "mlp2.b")->value).setZero();
  }
  Rng rng(17);
  Tensor<double> Z = randn({4, 8}, rng);
  auto out = m.latent_block(0, constant(Z))->value;
  CHECK(max_abs_diff(out, Z) == 0.0);  // exact residual identity
  auto out2 = m.latent_block(1, constant(out))->value;
  CHECK(max_abs_diff(out2, Z) == 0.0);
}

TEST_CASE("latent ssm on a single token matches direct evaluation") {
  ModelConfig cfg = toy_grid_config();
  cfg.latent_tokens = 1;
  cfg.grid_h = 2;
  cfg.grid_w = 2;
  cfg.directions = Directions::Uni;
  cfg.heads = 1;
  cfg.conv_width = 0;
  cfg.n_layers = 1;
  LamoModel<double> m(cfg);
  Rng rng(19);
  Tensor<double> Z = randn({1, 8}, rng);

  auto got = m.latent_ssm(0, constant(Z))->value;

  // direct single-step evaluation from the registered parameter values
  auto A = [&](const std::string& n) { return param(m, n)->value; };
  Tensor<double> xh = add_bias(matmul(Z, A("block0.in_x.w")), A("block0.in_x.b"));
  Tensor<double> gate = add_bias(matmul(Z, A("block0.in_z.w")), A("block0.in_z.b"));
  Tensor<double> delta =
      softplus(add_bias(add_bias(matmul(xh, A("block0.dir0.head0.delta.w")), A("block0.dir0.head0.delta.b")),
                        A("block0.dir0.head0.delta_bias")));
  Tensor<double> B = add_bias(matmul(xh, A("block0.dir0.head0.b.w")), A("block0.dir0.head0.b.b"));
  Tensor<double> C = add_bias(matmul(xh, A("block0.dir0.head0.c.w")), A("block0.dir0.head0.c.b"));
  Tensor<double> a_log = A("block0.dir0.head0.a_log");
  Tensor<double> skip = A("block0.dir0.head0.skip");
  const Index E = 16, P = 4;
  Tensor<double> y(Shape{1, E});
  for (Index c = 0; c < E; ++c) {
    double acc = 0;
    for (Index p = 0; p < P; ++p) {
      const double a = -std::exp(a_log(c, p));
      const double z = delta(0, c) * a;
      const double h = (std::expm1(z) / a) * B(0, p) * xh(0, c);  // h0 = 0, single step
      acc += C(0, p) * h;
    }
    y(0, c) = acc + skip[c] * xh(0, c);
  }
  Tensor<double> gated = mul(y, silu(gate));
  Tensor<double> want = add_bias(matmul(gated, A("block0.out.w")), A("block0.out.b"));
  CHECK(max_abs_diff(got, want) < 1e-12);
}

TEST_CASE("bi mode with dead backward branch equals uni mode exactly") {
  ModelConfig bi_cfg = toy_grid_config();
  bi_cfg.directions = Directions::Bi;
  bi_cfg.n_layers = 1;
  LamoModel<double> bi(bi_cfg);
  ModelConfig uni_cfg = bi_cfg;
  uni_cfg.directions = Directions::Uni;
  LamoModel<double> uni(uni_cfg);

  // share every parameter the two models have in common
  for (const auto& [name, v] : uni.params()) v->value = param(bi, name)->value;
  // kill the backward branch: zero readout and skip
  for (int hh = 0; hh < 2; ++hh) {
    const std::string hp = "block0.dir1.head" + std::to_string(hh) + ".";
    arr_view(param(bi, hp + "c.w")->value).setZero();
    arr_view(param(bi, hp + "c.b")->value).setZero();
    arr_view(param(bi, hp + "skip")->value).setZero();
  }
  Rng rng(23);
  Tensor<double> Z = randn({4, 8}, rng);
  auto ybi = bi.latent_ssm(0, constant(Z))->value;
  auto yuni = uni.latent_ssm(0, constant(Z))->value;
  for (Index i = 0; i < ybi.size(); ++i) CHECK(ybi[i] == yuni[i]);  // bit-identical
}

TEST_CASE("multihead bookkeeping") {
  ModelConfig cfg;
  cfg.embed_dim = 128;
  cfg.heads = 4;
  cfg.expand = 2;
  cfg.grid_h = 8;
  cfg.grid_w = 8;
  cfg.latent_tokens = 16;
  CHECK(cfg.head_dim() == 64);  // 32 * e per head

  cfg.embed_dim = 10;
  cfg.heads = 4;
  CHECK_THROWS_AS(cfg.validate(), ContractError);  // divisibility

  // identical parameters + identical inputs give identical per-head outputs
  Rng rng(29);
  Tensor<double> delta(Shape{6, 4});
  rng.fill_uniform(delta, 0.05, 0.5);
  Tensor<double> a_log = randn({4, 3}, rng), B = randn({6, 3}, rng), C = randn({6, 3}, rng);
  Tensor<double> x = randn({6, 4}, rng), skip = randn({4}, rng);
  auto y1 = selective_scan_forward(delta, a_log, B, C, x, skip, ZohMode::Exact);
  auto y2 = selective_scan_forward(delta, a_log, B, C, x, skip, ZohMode::Exact);
  for (Index i = 0; i < y1.size(); ++i) CHECK(y1[i] == y2[i]);
}

TEST_CASE("direction plumbing in isolation: skip-only scan returns input order") {
  // C = 0 and skip = 1 make the scan an exact pass-through, so
  // permute -> scan -> inverse-permute must be the identity, exactly.
  Rng rng(31);
  const Index h = 3, w = 4, Cn = 2;
  Tensor<double> x(Shape{h * w, Cn});
  rng.fill_normal(x);
  Tensor<double> skip(Shape{Cn}, 1.0);
  for (int d = 0; d < 4; ++d) {
    auto order = direction_order(h, w, d);
    auto xp = gather_rows(x, order);
    DiscreteStep<double> step;
    step.a_bar = Tensor<double>(Shape{h * w, Cn, 1}, 0.5);
    step.b_bar = Tensor<double>(Shape{h * w, Cn, 1}, 0.25);
    step.b_bar_x = Tensor<double>(Shape{h * w, Cn, 1});
    for (Index k = 0; k < h * w; ++k)
      for (Index c = 0; c < Cn; ++c) step.b_bar_x(k, c, 0) = 0.25 * xp(k, c);
    step.c = Tensor<double>(Shape{h * w, Cn, 1});  // dead readout
    auto y = scan_sequential(step, {}, &xp, &skip).y;
    auto back = gather_rows(y, invert_permutation(order));
    for (Index i = 0; i < x.size(); ++i) CHECK(back[i] == x[i]);
  }
}

TEST_CASE("forward gives finite outputs of the right shape in all modes") {
  Rng rng(37);
  Tensor<double> x = randn({16, 1}, rng);
  Tensor<double> coords = grid_coords(4, 4);

  ModelConfig grid_cfg = toy_grid_config();
  LamoModel<double> grid(grid_cfg);
  auto y1 = grid.forward(x, coords)->value;
  CHECK(y1.shape == Shape{16, 1});
  CHECK(y1.all_finite());

  ModelConfig learned = toy_grid_config();
  learned.coder_mode = CoderMode::Learned;
  learned.fixed_points = 16;
  LamoModel<double> lm(learned);
  auto y2 = lm.forward(x, coords)->value;
  CHECK(y2.shape == Shape{16, 1});
  CHECK(y2.all_finite());

  ModelConfig shared = toy_grid_config();
  shared.share_coders = true;
  LamoModel<double> sm(shared);
  auto y3 = sm.forward(x, coords)->value;
  CHECK(y3.shape == Shape{16, 1});
  CHECK(y3.all_finite());

  Tensor<double> wrong = randn({15, 1}, rng);
  CHECK_THROWS_AS(grid.forward(wrong, coords), ContractError);
}

TEST_CASE("deep stacks stay bounded") {
  ModelConfig cfg = toy_grid_config();
  cfg.n_layers = 8;
  cfg.embed_dim = 16;
  cfg.heads = 2;
  cfg.latent_tokens = 16;
  cfg.grid_h = 8;
  cfg.grid_w = 8;
  LamoModel<double> m(cfg);
  Rng rng(41);
  Tensor<double> Z(Shape{16, 16});
  rng.fill_normal(Z);
  auto cur = constant(Z);
  for (int l = 0; l < 8; ++l) cur = m.latent_block(l, cur);
  CHECK(cur->value.all_finite());
  CHECK(max_abs(cur->value) < 1e3);
}

TEST_CASE("fixed seed gives bitwise-identical builds and forwards") {
  LamoModel<double> a(toy_grid_config());
  LamoModel<double> b(toy_grid_config());
  REQUIRE(a.params().size() == b.params().size());
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    const auto& [an, av] = a.params()[i];
    const auto& [bn, bv] = b.params()[i];
    CHECK(an == bn);
    for (Index j = 0; j < av->value.size(); ++j) CHECK(av->value[j] == bv->value[j]);
  }
  Rng rng(43);
  Tensor<double> x = randn({16, 1}, rng);
  auto ya = a.forward(x, grid_coords(4, 4))->value;
  auto yb = b.forward(x, grid_coords(4, 4))->value;
  for (Index i = 0; i < ya.size(); ++i) CHECK(ya[i] == yb[i]);
}

TEST_CASE("model gradcheck on selected parameter groups") {
  ModelConfig cfg = toy_grid_config();
  cfg.n_layers = 1;
  LamoModel<double> m(cfg);
  Rng rng(47);
  Tensor<double> x = randn({16, 1}, rng);
  Tensor<double> coords = grid_coords(4, 4);
  Tensor<double> target = randn({16, 1}, rng);

  auto loss_value = [&]() {
    auto pred = m.forward(x, coords);
    auto diff = sub(pred, constant(target));
    return sqrt_elem(sum_all(mul(diff, diff)));
  };

  for (const std::string name : {"lift1.w", "block0.in_x.w", "block0.dir0.head0.a_log",
                                 "block0.dir0.head0.delta_bias", "block0.dir2.conv.w", "block0.norm1.g",
                                 "proj2.w"}) {
    auto p = param(m, name);
    m.zero_grads();
    auto loss = loss_value();
    backward(loss);
    Tensor<double> analytic = p->grad;
    REQUIRE(analytic.size() == p->value.size());
    // per-coordinate step sweep: deep parameters carry ~1e-11 gradients where
    // a 1e-5 step is below the loss ulp, shallow ones need the small step
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
    INFO(name);
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("checkpoint round trip with CRC") {
  LamoModel<double> m(toy_grid_config());
  Rng rng(53);
  Tensor<double> x = randn({16, 1}, rng);
  auto y0 = m.forward(x, grid_coords(4, 4))->value;

  const auto path = (std::filesystem::temp_directory_path() / "lamo_test_model.ckpt").string();
  save_model(path, m);
  auto loaded = load_model<double>(path);
  auto y1 = loaded.forward(x, grid_coords(4, 4))->value;
  for (Index i = 0; i < y0.size(); ++i) CHECK(y0[i] == y1[i]);

  CHECK_THROWS_AS(load_model<float>(path), IoError);  // precision mismatch

  // corrupt one payload byte: CRC must catch it
  auto bytes = ByteReader::from_file(path);
  std::vector<std::uint8_t> raw(bytes.base(), bytes.base() + bytes.size());
  raw[raw.size() / 2] ^= 0xFF;
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  f.close();
  CHECK_THROWS_AS(load_model<double>(path), IoError);
  std::filesystem::remove(path);
}

TEST_CASE("config echo round trip") {
  ModelConfig cfg = toy_grid_config();
  cfg.directions = Directions::Bi;
  cfg.zoh_mode = ZohMode::Simplified;
  cfg.share_coders = true;
  auto kv = parse_kv_text(config_echo(cfg));
  ModelConfig back = config_from_kv(kv);
  CHECK(config_echo(back) == config_echo(cfg));
  CHECK_THROWS_WITH_AS(config_from_kv({{"bogus_key", "1"}}), doctest::Contains("bogus_key"), ContractError);
}
