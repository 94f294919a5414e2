#include <cmath>

#include "doctest.h"
#include "dialm/rng.hpp"
#include "dialm/tensor.hpp"
#include "support.hpp"

using namespace dialm;
using dialm::testing::random_matrix;

namespace {

Matrix naive_product(const Matrix& a, bool ta, const Matrix& b, bool tb) {
  const std::size_t m = ta ? a.cols() : a.rows();
  const std::size_t k = ta ? a.rows() : a.cols();
  const std::size_t n = tb ? b.rows() : b.cols();
  Matrix c(m, n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += (ta ? a(p, i) : a(i, p)) * (tb ? b(j, p) : b(p, j));
      c(i, j) = s;
    }
  return c;
}

}  // namespace

TEST_CASE("gemm matches a naive triple loop for all transpose combinations") {
  for (int ta = 0; ta < 2; ++ta) {
    for (int tb = 0; tb < 2; ++tb) {
      const Matrix a = ta ? random_matrix(5, 3, 1) : random_matrix(3, 5, 1);
      const Matrix b = tb ? random_matrix(4, 5, 2) : random_matrix(5, 4, 2);
      Matrix c = random_matrix(3, 4, 3);
      const Matrix c0 = c;
      gemm(a, ta, b, tb, c, 2.0, 0.5);
      const Matrix ref = naive_product(a, ta, b, tb);
      for (std::size_t i = 0; i < c.size(); ++i) CHECK(c[i] == doctest::Approx(2.0 * ref[i] + 0.5 * c0[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("cosine similarity values") {
  const std::vector<double> u{1.0, 0.0}, v{1.0, 1.0}, w{0.0, 3.0}, z{0.0, 0.0};
  CHECK(cosine(u, v) == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));
  CHECK(cosine(u, w) == 0.0);
  CHECK(cosine(v, v) == doctest::Approx(1.0));
  CHECK(cosine(u, z) == 0.0);
}

TEST_CASE("cosine gradient agrees with central differences") {
  std::vector<double> a{0.3, -1.2, 0.7}, b{1.1, 0.4, -0.5};
  std::vector<double> g(3, 0.0);
  cosine_grad_accumulate(a, b, 1.0, g);
  for (std::size_t i = 0; i < 3; ++i) {
    const double keep = a[i];
    a[i] = keep + 1e-6;
    const double up = cosine(a, b);
    a[i] = keep - 1e-6;
    const double down = cosine(a, b);
    a[i] = keep;
    CHECK(g[i] == doctest::Approx((up - down) / 2e-6).epsilon(1e-7));
  }
}

TEST_CASE("softmax is normalized, shift invariant and handles masked rows") {
  std::vector<double> r{1.0, 2.0, 3.0};
  std::vector<double> s{101.0, 102.0, 103.0};
  softmax_inplace(r);
  softmax_inplace(s);
  double sum = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    sum += r[i];
    CHECK(r[i] == doctest::Approx(s[i]).epsilon(1e-12));
  }
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> m{-inf, -inf};
  softmax_inplace(m);
  CHECK(m[0] == 0.0);
  CHECK(m[1] == 0.0);
}

TEST_CASE("rng streams are reproducible and within range") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng r(7);
  for (int i = 0; i < 1000; ++i) {
    const double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    CHECK(r.below(13) < 13u);
    const double t = r.truncated_normal(0.02);
    CHECK(std::abs(t) <= 0.04);
  }
  CHECK(mix_seed({1, 2}) != mix_seed({2, 1}));
  CHECK(hash_uniform(5, 9) == hash_uniform(5, 9));
}

TEST_CASE("below is close to uniform") {
  Rng r(3);
  std::vector<int> counts(10, 0);
  for (int i = 0; i < 100000; ++i) ++counts[r.below(10)];
  for (int c : counts) CHECK(std::abs(c - 10000) < 500);
}
