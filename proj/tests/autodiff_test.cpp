#include <gtest/gtest.h>

#include <functional>
#include <vector>

#include "tapt/autodiff.hpp"
#include "test_util.hpp"

namespace tapt {
namespace {

using testing::numeric_grad;
using testing::random_matrix;
using testing::rel_error;

using Build = std::function<ad::Var(ad::Tape&, std::vector<ad::Var>&)>;

// Reduces the op output against a fixed random projection so every output
// entry contributes to the scalar being differentiated.
double project(ad::Tape& tape, ad::Var out, ad::Var& scalar) {
  const Matrix w = random_matrix(out.rows(), out.cols(), 99);
  scalar = ad::sum(ad::mul(out, tape.constant(w)));
  return scalar.scalar();
}

void check_gradients(std::vector<Matrix> inputs, const Build& build, double tol = 1e-6) {
  ad::Tape tape;
  std::vector<ad::Var> vars;
  for (const Matrix& m : inputs) vars.push_back(tape.parameter(m));
  ad::Var scalar;
  project(tape, build(tape, vars), scalar);
  tape.backward(scalar);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Matrix analytic = tape.grad(vars[i].id);
    const Matrix numeric = numeric_grad(inputs[i], [&] {
      ad::Tape t2(false);
      std::vector<ad::Var> v2;
      for (const Matrix& m : inputs) v2.push_back(t2.constant_ref(m));
      ad::Var s;
      return project(t2, build(t2, v2), s);
    });
    EXPECT_LT(rel_error(analytic, numeric), tol) << "input " << i;
  }
}

TEST(Autodiff, Matmul) {
  check_gradients({random_matrix(4, 3, 1), random_matrix(3, 5, 2)},
                  [](ad::Tape&, auto& v) { return ad::matmul(v[0], v[1]); });
  check_gradients({random_matrix(4, 3, 3), random_matrix(6, 3, 4)},
                  [](ad::Tape&, auto& v) { return ad::matmul_nt(v[0], v[1]); });
}

TEST(Autodiff, Elementwise) {
  check_gradients({random_matrix(3, 4, 5), random_matrix(3, 4, 6)}, [](ad::Tape&, auto& v) {
    return ad::add(ad::mul(v[0], v[1]), ad::scale(ad::sub(v[0], v[1]), 0.3));
  });
  check_gradients({random_matrix(6, 4, 7), random_matrix(1, 4, 8)},
                  [](ad::Tape&, auto& v) { return ad::add_row(v[0], v[1]); });
  check_gradients({random_matrix(6, 4, 9), random_matrix(2, 4, 10)},
                  [](ad::Tape&, auto& v) { return ad::add_tiled(v[0], v[1]); });
  check_gradients({random_matrix(3, 7, 11, -3, 3)}, [](ad::Tape&, auto& v) { return ad::gelu(v[0]); });
}

TEST(Autodiff, Normalizations) {
  check_gradients({random_matrix(5, 8, 12), random_matrix(1, 8, 13), random_matrix(1, 8, 14)},
                  [](ad::Tape&, auto& v) { return ad::layer_norm(v[0], v[1], v[2]); });
  check_gradients({random_matrix(4, 6, 15)}, [](ad::Tape&, auto& v) { return ad::softmax_rows(v[0]); });
  check_gradients({random_matrix(4, 6, 16)}, [](ad::Tape&, auto& v) { return ad::normalize_rows(v[0]); });
}

TEST(Autodiff, Attention) {
  const kernels::AttentionShape s{2, 5, 2, 3};
  check_gradients({random_matrix(s.batch * s.seq, 3 * s.width(), 17)},
                  [s](ad::Tape&, auto& v) { return ad::attention(v[0], s); });
}

TEST(Autodiff, ShapePlumbing) {
  check_gradients({random_matrix(1, 4, 18), random_matrix(6, 4, 19), random_matrix(2, 4, 20)},
                  [](ad::Tape&, auto& v) { return ad::stack_sequences(v[0], v[1], v[2], 3); });
  check_gradients({random_matrix(6, 4, 21)},
                  [](ad::Tape&, auto& v) { return ad::stack_sequences(ad::Var{}, v[0], ad::Var{}, 2); });
  check_gradients({random_matrix(12, 3, 22)}, [](ad::Tape&, auto& v) { return ad::segment_mean(v[0], 4, 1, 2); });
  const std::vector<int> ids = {2, 0, 2, 1};
  check_gradients({random_matrix(3, 4, 23)}, [&](ad::Tape&, auto& v) { return ad::gather_rows(v[0], ids); });
  const std::vector<std::size_t> rows = {1, 1, 0};
  check_gradients({random_matrix(3, 4, 24)}, [&](ad::Tape&, auto& v) { return ad::select_rows(v[0], rows); });
  check_gradients({random_matrix(3, 6, 25)}, [](ad::Tape&, auto& v) { return ad::slice_cols(v[0], 2, 3); });
  check_gradients({random_matrix(2, 3 * 8 * 8, 26)},
                  [](ad::Tape&, auto& v) { return ad::patchify(v[0], 3, 8, 4); });
}

TEST(Autodiff, SparseMaps) {
  ad::SparseMap m;
  m.in_dim = 4;
  m.out_dim = 4;
  m.dst = {0, 0, 1, 3, 2};
  m.src = {1, 2, 1, 0, 3};
  m.weight = {0.5, 0.25, -1.0, 2.0, 0.75};
  check_gradients({random_matrix(3, 4, 27)}, [&](ad::Tape&, auto& v) { return ad::sparse_map(v[0], m); });
  auto shared = std::make_shared<const ad::SparseMap>(m);
  check_gradients({random_matrix(3, 4, 28)},
                  [&](ad::Tape&, auto& v) { return ad::sparse_map_rows(v[0], {shared, nullptr, shared}); });
}

TEST(Autodiff, Reductions) {
  check_gradients({random_matrix(5, 3, 29)}, [](ad::Tape&, auto& v) { return ad::mean_rows(v[0]); });
  check_gradients({random_matrix(5, 3, 30)}, [](ad::Tape&, auto& v) { return ad::variance_rows(v[0]); });
  const Matrix target = random_matrix(5, 3, 31);
  check_gradients({random_matrix(5, 3, 32)}, [&](ad::Tape&, auto& v) { return ad::l1_distance(v[0], target); });
  check_gradients({random_matrix(3, 4, 33)},
                  [](ad::Tape&, auto& v) { return ad::entropy_rows(ad::softmax_rows(v[0])); });
  const std::vector<int> labels = {0, 3, 1};
  check_gradients({random_matrix(3, 4, 34)}, [&](ad::Tape&, auto& v) { return ad::cross_entropy(v[0], labels); });
  check_gradients({random_matrix(1, 1, 35), random_matrix(1, 1, 36)}, [](ad::Tape&, auto& v) {
    return ad::add_scalars({{0.25, v[0]}, {-2.0, v[1]}});
  });
}

TEST(Autodiff, VarianceOfOneRowIsZero) {
  ad::Tape tape;
  ad::Var v = ad::variance_rows(tape.constant(Matrix(1, 3, std::vector<double>{1, 2, 3})));
  for (double x : v.value().flat()) EXPECT_EQ(x, 0.0);
}

TEST(Autodiff, NonRecordingTapeHasNoGradients) {
  ad::Tape tape(false);
  const Matrix a = random_matrix(2, 2, 37);
  ad::Var x = tape.parameter(a);
  ad::Var y = ad::sum(ad::mul(x, x));
  EXPECT_NEAR(y.scalar(), a[0] * a[0] + a[1] * a[1] + a[2] * a[2] + a[3] * a[3], 1e-15);
  EXPECT_FALSE(tape.has_grad(x.id));
}

}  // namespace
}  // namespace tapt
