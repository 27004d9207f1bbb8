#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "lamo/io.hpp"
#include "lamo/rng.hpp"
#include "lamo/tensor.hpp"

using namespace lamo;

TEST_CASE("tensor basics and invariants") {
  Tensor<double> t(Shape{2, 3});
  CHECK(t.size() == 6);
  CHECK(t.rank() == 2);
  t(1, 2) = 5.0;
  CHECK(t[5] == 5.0);

  // zero-dim tensors are scalars with one element
  auto s = Tensor<double>::scalar(3.5);
  CHECK(s.rank() == 0);
  CHECK(s.size() == 1);
  CHECK(s.item() == 3.5);

  CHECK_THROWS_AS(Tensor<double>(Shape{2, 2}, std::vector<double>{1.0}), ContractError);
  CHECK_THROWS_AS(t.reshaped(Shape{5}), ContractError);
  CHECK(t.reshaped(Shape{6}).shape == Shape{6});
}

TEST_CASE("matmul identity and hand cases") {
  Tensor<double> eye(Shape{2, 2}, {1, 0, 0, 1});
  Tensor<double> v(Shape{2, 1}, {3, 4});
  auto y = matmul(eye, v);
  CHECK(y(0, 0) == 3.0);
  CHECK(y(1, 0) == 4.0);

  Tensor<double> a(Shape{1, 2}, {1, 2});
  auto z = matmul(a, v);
  CHECK(z(0, 0) == doctest::Approx(11.0));

  Tensor<double> bad(Shape{3, 1});
  CHECK_THROWS_WITH_AS(matmul(a, bad) /* names both shapes */, doctest::Contains("[1x2]"), ContractError);
}

TEST_CASE("matmul associativity within tolerance") {
  Rng rng(11);
  Tensor<double> a(Shape{12, 9}), b(Shape{9, 14}), c(Shape{14, 7});
  rng.fill_normal(a);
  rng.fill_normal(b);
  rng.fill_normal(c);
  auto lhs = matmul(matmul(a, b), c);
  auto rhs = matmul(a, matmul(b, c));
  const double bound = 1e-10 * norm2(a) * norm2(b) * norm2(c);
  CHECK(max_abs_diff(lhs, rhs) < bound);
}

TEST_CASE("softmax values and properties") {
  Tensor<double> x0(Shape{2}, {0, 0});
  auto y0 = softmax(x0, 0);
  CHECK(y0[0] == doctest::Approx(0.5));
  CHECK(y0[1] == doctest::Approx(0.5));

  Tensor<double> x1(Shape{2}, {1000, 0});
  auto y1 = softmax(x1, 0);
  CHECK(y1[0] == doctest::Approx(1.0));
  CHECK(y1[1] == doctest::Approx(0.0));
  CHECK(y1.all_finite());

  Tensor<double> x2(Shape{3}, {1, 2, 3});
  auto y2 = softmax(x2, 0);
  CHECK(y2[0] == doctest::Approx(0.09003057).epsilon(1e-7));
  CHECK(y2[1] == doctest::Approx(0.24472847).epsilon(1e-7));
  CHECK(y2[2] == doctest::Approx(0.66524096).epsilon(1e-7));

  // rows are probability vectors
  Rng rng(3);
  Tensor<double> m(Shape{5, 7});
  rng.fill_normal(m, 0.0, 3.0);
  auto p = softmax(m, 1);
  for (Index i = 0; i < 5; ++i) {
    double sum = 0;
    for (Index j = 0; j < 7; ++j) {
      CHECK(p(i, j) >= 0.0);
      sum += p(i, j);
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK_THROWS_AS(softmax(m, 2), ContractError);
}

TEST_CASE("layernorm statistics") {
  Tensor<double> gain(Shape{4}, {1, 1, 1, 1});
  Tensor<double> bias(Shape{4}, {0, 0, 0, 0});

  Tensor<double> flat(Shape{1, 4}, {2, 2, 2, 2});
  auto y = layernorm(flat, gain, bias, 1e-5);
  for (double v : y.data) CHECK(v == doctest::Approx(0.0));

  Tensor<double> two(Shape{1, 2}, {1, 3});
  Tensor<double> g2(Shape{2}, {1, 1}), b2(Shape{2}, {0, 0});
  auto y2 = layernorm(two, g2, b2, 1e-14);
  CHECK(y2[0] == doctest::Approx(-1.0).epsilon(1e-6));
  CHECK(y2[1] == doctest::Approx(1.0).epsilon(1e-6));

  Rng rng(5);
  Tensor<double> x(Shape{1, 64});
  rng.fill_normal(x, 1.5, 2.0);
  Tensor<double> g(Shape{64}, 1.0), b(Shape{64}, 0.0);
  auto z = layernorm(x, g, b, 1e-5);
  double mean = mean_all(z);
  double var = 0;
  for (double v : z.data) var += (v - mean) * (v - mean);
  var /= 64.0;
  CHECK(std::abs(mean) < 1e-7);
  CHECK(std::abs(var - 1.0) < 1e-5);
}

TEST_CASE("silu values") {
  Tensor<double> x(Shape{3}, {0.0, 1.0, 30.0});
  auto y = silu(x);
  CHECK(y[0] == 0.0);
  CHECK(y[1] == doctest::Approx(0.7310586).epsilon(1e-7));
  CHECK(y[2] == doctest::Approx(30.0).epsilon(1e-9));  // large x asymptote
}

TEST_CASE("gather/slice/concat plumbing") {
  Tensor<double> x(Shape{3, 2}, {1, 2, 3, 4, 5, 6});
  std::vector<Index> perm{2, 0, 1};
  auto g = gather_rows(x, perm);
  CHECK(g(0, 0) == 5.0);
  CHECK(g(2, 1) == 4.0);
  auto inv = invert_permutation(perm);
  CHECK(max_abs_diff(gather_rows(g, inv), x) == 0.0);

  auto sc = slice_cols(x, 1, 2);
  CHECK(sc.shape == Shape{3, 1});
  CHECK(sc(1, 0) == 4.0);
  auto cc = concat_cols<double>({slice_cols(x, 0, 1), slice_cols(x, 1, 2)});
  CHECK(max_abs_diff(cc, x) == 0.0);
}

TEST_CASE("rng determinism and stream independence") {
  Rng a(42, 0), b(42, 0), c(42, 1);
  for (int i = 0; i < 100; ++i) {
    auto va = a.next_u64();
    CHECK(va == b.next_u64());
    CHECK(va != c.next_u64());
  }

  // rough uniformity sanity
  Rng r(7);
  double acc = 0;
  for (int i = 0; i < 10000; ++i) acc += r.next_double();
  CHECK(acc / 10000.0 == doctest::Approx(0.5).epsilon(0.02));

  // normal moments
  Rng rn(9);
  double m1 = 0, m2 = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    double z = rn.normal();
    m1 += z;
    m2 += z * z;
  }
  CHECK(m1 / n == doctest::Approx(0.0).epsilon(0.05));
  CHECK(m2 / n == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("LTNS round trip is bitwise") {
  Rng rng(123);
  Tensor<double> t(Shape{3, 4, 2});
  rng.fill_normal(t);
  const auto path = (std::filesystem::temp_directory_path() / "lamo_test_tensor.ltns").string();
  save_tensor(path, t);
  auto back = load_tensor<double>(path);
  REQUIRE(back.shape == t.shape);
  for (Index i = 0; i < t.size(); ++i) CHECK(back[i] == t[i]);

  // scalar tensor round trip (ndim = 0)
  save_tensor(path, Tensor<float>::scalar(2.5f));
  auto s = load_tensor<float>(path);
  CHECK(s.rank() == 0);
  CHECK(s.item() == 2.5f);

  // dtype mismatch is an error unless conversion is requested
  save_tensor(path, t);
  CHECK_THROWS_AS(load_tensor<float>(path), IoError);
  auto conv = load_tensor<float>(path, true);
  CHECK(conv.shape == t.shape);
  CHECK(conv[0] == doctest::Approx(static_cast<float>(t[0])));
  std::filesystem::remove(path);
}

TEST_CASE("LTNS bad magic and truncation report offsets") {
  ByteWriter w;
  write_ltns(w, Tensor<double>(Shape{2, 2}, {1, 2, 3, 4}));
  auto bytes = w.bytes();

  auto corrupt = bytes;
  corrupt[0] = 'X';
  ByteReader r1(corrupt, "corrupt");
  CHECK_THROWS_WITH_AS(read_ltns<double>(r1), doctest::Contains("byte offset 0"), IoError);

  std::vector<std::uint8_t> trunc(bytes.begin(), bytes.begin() + 20);
  ByteReader r2(trunc, "trunc");
  CHECK_THROWS_WITH_AS(read_ltns<double>(r2), doctest::Contains("truncated"), IoError);
}

TEST_CASE("crc32 known vector") {
  const std::string s = "123456789";
  CHECK(crc32_bytes(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()) == 0xCBF43926u);
}
