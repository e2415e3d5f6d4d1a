#include <gtest/gtest.h>
#include <omp.h>

#include <vector>

#include "tapt/kernels.hpp"
#include "test_util.hpp"

namespace tapt {
namespace {

using testing::random_matrix;

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

std::vector<double> vec(const Matrix& m) { return m.storage(); }

TEST(Kernels, MatmulMatchesReference) {
  for (auto [n, k, m] : {std::tuple{1, 1, 1}, {5, 7, 3}, {130, 64, 192}, {37, 128, 64}}) {
    const Matrix a = random_matrix(n, k, 1), b = random_matrix(k, m, 2);
    std::vector<double> c(n * m, 0.5), r(n * m, 0.5);
    kernels::matmul(a.data(), b.data(), c.data(), n, k, m, true);
    kernels::ref::matmul(a.data(), b.data(), r.data(), n, k, m, true);
    EXPECT_LT(max_abs_diff(c, r), 1e-12) << n << "x" << k << "x" << m;
    kernels::matmul(a.data(), b.data(), c.data(), n, k, m, false);
    kernels::ref::matmul(a.data(), b.data(), r.data(), n, k, m, false);
    EXPECT_LT(max_abs_diff(c, r), 1e-12);
  }
}

TEST(Kernels, TransposedProductsMatchReference) {
  const std::size_t n = 45, k = 33, m = 70;
  const Matrix a = random_matrix(n, m, 3), b = random_matrix(k, m, 4);
  std::vector<double> c(n * k), r(n * k);
  kernels::matmul_nt(a.data(), b.data(), c.data(), n, m, k);
  kernels::ref::matmul_nt(a.data(), b.data(), r.data(), n, m, k);
  EXPECT_LT(max_abs_diff(c, r), 1e-12);

  const Matrix x = random_matrix(n, k, 5), y = random_matrix(n, m, 6);
  std::vector<double> d(k * m), s(k * m);
  kernels::matmul_tn(x.data(), y.data(), d.data(), n, k, m);
  kernels::ref::matmul_tn(x.data(), y.data(), s.data(), n, k, m);
  EXPECT_LT(max_abs_diff(d, s), 1e-12);
}

TEST(Kernels, LayerNormMatchesReference) {
  const std::size_t rows = 300, cols = 64;
  const Matrix x = random_matrix(rows, cols, 7), g = random_matrix(1, cols, 8), b = random_matrix(1, cols, 9);
  const Matrix dy = random_matrix(rows, cols, 10);
  std::vector<double> y1(rows * cols), h1(rows * cols), r1(rows), y2 = y1, h2 = h1, r2 = r1;
  kernels::layer_norm_forward(x.data(), g.data(), b.data(), y1.data(), h1.data(), r1.data(), rows, cols, 1e-5);
  kernels::ref::layer_norm_forward(x.data(), g.data(), b.data(), y2.data(), h2.data(), r2.data(), rows, cols, 1e-5);
  EXPECT_LT(max_abs_diff(y1, y2), 1e-12);
  std::vector<double> dx1(rows * cols), dg1(cols), db1(cols), dx2 = dx1, dg2 = dg1, db2 = db1;
  kernels::layer_norm_backward(dy.data(), h1.data(), r1.data(), g.data(), dx1.data(), dg1.data(), db1.data(), rows, cols);
  kernels::ref::layer_norm_backward(dy.data(), h2.data(), r2.data(), g.data(), dx2.data(), dg2.data(), db2.data(), rows, cols);
  EXPECT_LT(max_abs_diff(dx1, dx2), 1e-12);
  EXPECT_LT(max_abs_diff(dg1, dg2), 1e-10);
  EXPECT_LT(max_abs_diff(db1, db2), 1e-10);
}

TEST(Kernels, GeluMatchesReference) {
  const Matrix x = random_matrix(1, 5000, 11, -4, 4), dy = random_matrix(1, 5000, 12);
  std::vector<double> y1(5000), y2(5000), d1(5000), d2(5000);
  kernels::gelu_forward(x.data(), y1.data(), 5000);
  kernels::ref::gelu_forward(x.data(), y2.data(), 5000);
  kernels::gelu_backward(x.data(), dy.data(), d1.data(), 5000);
  kernels::ref::gelu_backward(x.data(), dy.data(), d2.data(), 5000);
  EXPECT_LT(max_abs_diff(y1, y2), 1e-14);
  EXPECT_LT(max_abs_diff(d1, d2), 1e-14);
}

TEST(Kernels, AttentionMatchesReference) {
  const kernels::AttentionShape s{6, 21, 4, 8};
  const std::size_t rows = s.batch * s.seq;
  const Matrix qkv = random_matrix(rows, 3 * s.width(), 13), dout = random_matrix(rows, s.width(), 14);
  std::vector<double> o1(rows * s.width()), o2 = o1, p1(s.batch * s.heads * s.seq * s.seq), p2 = p1;
  kernels::attention_forward(qkv.data(), o1.data(), p1.data(), s);
  kernels::ref::attention_forward(qkv.data(), o2.data(), p2.data(), s);
  EXPECT_LT(max_abs_diff(o1, o2), 1e-12);
  EXPECT_LT(max_abs_diff(p1, p2), 1e-12);
  std::vector<double> g1(rows * 3 * s.width()), g2 = g1;
  kernels::attention_backward(qkv.data(), p1.data(), dout.data(), g1.data(), s);
  kernels::ref::attention_backward(qkv.data(), p2.data(), dout.data(), g2.data(), s);
  EXPECT_LT(max_abs_diff(g1, g2), 1e-12);
}

TEST(Kernels, ResultsDoNotDependOnThreadCount) {
  const std::size_t n = 256, k = 64, m = 192;
  const Matrix a = random_matrix(n, k, 15), b = random_matrix(k, m, 16);
  const kernels::AttentionShape s{16, 21, 4, 16};
  const Matrix qkv = random_matrix(s.batch * s.seq, 3 * s.width(), 17);
  auto run = [&](int threads) {
    omp_set_num_threads(threads);
    std::vector<double> c(n * m), o(s.batch * s.seq * s.width()), p(s.batch * s.heads * s.seq * s.seq);
    kernels::matmul(a.data(), b.data(), c.data(), n, k, m, false);
    kernels::attention_forward(qkv.data(), o.data(), p.data(), s);
    c.insert(c.end(), o.begin(), o.end());
    return c;
  };
  const int max_threads = omp_get_max_threads();
  const auto one = run(1);
  const auto four = run(4);
  omp_set_num_threads(max_threads);
  EXPECT_EQ(one, four);
}

}  // namespace
}  // namespace tapt
