#pragma once

#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "tapt/kernels.hpp"
#include "tapt/matrix.hpp"

// Reverse-mode automatic differentiation over row-major matrices.
//
// A Tape records every op applied to its Vars. Ops only keep a backward
// closure when at least one input requires a gradient, so an inference
// pass on a recording tape costs the same as one on a non-recording tape.

namespace tapt::ad {

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Matrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  double scalar() const { return value()[0]; }
  bool valid() const { return tape != nullptr; }
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  /// Borrows `value`; it must outlive the tape.
  Var constant_ref(const Matrix& value);
  /// Borrowed leaf whose gradient is collected by backward().
  Var parameter(const Matrix& value);
  Var leaf(Matrix value, bool requires_grad);

  void backward(Var scalar_output);

  const Matrix& value(int id) const;
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  /// Gradient buffer, zero-allocated on first use.
  Matrix& grad(int id);
  bool has_grad(int id) const { return !nodes_[id].grad.empty(); }
  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  /// Registers an op result. `fn` is dropped unless an input needs gradients.
  Var push(Matrix value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var push(Matrix value, std::span<const Var> inputs, BackwardFn fn);

 private:
  struct Node {
    Matrix owned;
    const Matrix* borrowed = nullptr;
    Matrix grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  bool record_;
  std::deque<Node> nodes_;
};

// ---- Linear algebra -------------------------------------------------------

Var matmul(Var a, Var b);     // [n x k] * [k x m]
Var matmul_nt(Var a, Var b);  // [n x m] * [k x m]^T
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise
Var scale(Var a, double s);
Var add_row(Var a, Var row);      // broadcast a 1 x m row over all rows
Var add_tiled(Var a, Var block);  // add an n x m block to every n-row group of a

// ---- Nonlinearities ---------------------------------------------------------

Var gelu(Var x);
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
Var attention(Var qkv, const kernels::AttentionShape& shape);
Var softmax_rows(Var x);
Var normalize_rows(Var x);

// ---- Shape plumbing ---------------------------------------------------------

/// Builds `batch` sequences [head; body_b; tail] where body holds batch
/// consecutive groups of rows. Either head or tail may be invalid (absent).
Var stack_sequences(Var head, Var body, Var tail, std::size_t batch);
/// Mean of rows [start, start+count) inside each seq-row group -> batch x cols.
Var segment_mean(Var x, std::size_t seq, std::size_t start, std::size_t count);
Var gather_rows(Var table, std::span<const int> ids);
Var select_rows(Var x, std::span<const std::size_t> rows);
Var slice_cols(Var x, std::size_t start, std::size_t count);

/// Row-wise sparse linear map y = M x with M given as (dst, src, weight) triplets.
struct SparseMap {
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  std::vector<std::size_t> dst;
  std::vector<std::size_t> src;
  std::vector<double> weight;
  void apply(std::span<const double> in, std::span<double> out) const;
};
Var sparse_map(Var x, const SparseMap& map);
/// Applies maps[r] to row r; a null entry passes the row through unchanged.
Var sparse_map_rows(Var x, std::vector<std::shared_ptr<const SparseMap>> maps);
/// [batch x C*H*W] channel-major images -> [batch*patches x C*p*p] patch rows.
Var patchify(Var images, std::size_t channels, std::size_t side, std::size_t patch);

// ---- Reductions and losses --------------------------------------------------

Var sum(Var x);        // 1 x 1
Var mean_rows(Var x);  // 1 x cols
/// Unbiased per-column variance over rows (n-1 denominator); zero when n == 1.
Var variance_rows(Var x);
/// sum |x - target|
Var l1_distance(Var x, const Matrix& target);
/// Shannon entropy -sum p log p of every row, returned as rows x 1.
Var entropy_rows(Var p);
/// Mean cross-entropy of row-wise logits against integer labels.
Var cross_entropy(Var logits, std::span<const int> labels);
Var add_scalars(std::initializer_list<std::pair<double, Var>> terms);

}  // namespace tapt::ad
