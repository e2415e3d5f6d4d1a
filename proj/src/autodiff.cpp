#include "tapt/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

namespace tapt::ad {

const Matrix& Var::value() const { return tape->value(id); }

Var Tape::constant(Matrix value) { return leaf(std::move(value), false); }

Var Tape::constant_ref(const Matrix& value) {
  Node n;
  n.borrowed = &value;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::parameter(const Matrix& value) {
  Node n;
  n.borrowed = &value;
  n.requires_grad = record_;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::leaf(Matrix value, bool requires_grad) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = record_ && requires_grad;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

const Matrix& Tape::value(int id) const {
  const Node& n = nodes_[id];
  return n.borrowed != nullptr ? *n.borrowed : n.owned;
}

Matrix& Tape::grad(int id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) {
    const Matrix& v = value(id);
    n.grad = Matrix(v.rows(), v.cols());
  }
  return n.grad;
}

Var Tape::push(Matrix value, std::initializer_list<Var> inputs, BackwardFn fn) {
  return push(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
              std::move(fn));
}

Var Tape::push(Matrix value, std::span<const Var> inputs, BackwardFn fn) {
  Node n;
  n.owned = std::move(value);
  if (record_) {
    for (const Var& v : inputs)
      if (v.valid() && nodes_[v.id].requires_grad) n.requires_grad = true;
    if (n.requires_grad) n.backward = std::move(fn);
  }
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

void Tape::backward(Var out) {
  if (out.tape != this) throw std::invalid_argument("backward: var from another tape");
  if (value(out.id).size() != 1) throw std::invalid_argument("backward: output must be scalar");
  if (!nodes_[out.id].requires_grad) return;
  grad(out.id)[0] += 1.0;
  for (int i = out.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.backward && !n.grad.empty()) n.backward(*this, i);
  }
}

namespace {

bool needs(const Tape& t, Var v) { return v.valid() && t.requires_grad(v.id); }

void check_same(const Matrix& a, const Matrix& b, const char* op) {
  if (!a.same_shape(b)) throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = *a.tape;
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  const std::size_t n = av.rows(), k = av.cols(), m = bv.cols();
  Matrix c(n, m);
  kernels::matmul(av.data(), bv.data(), c.data(), n, k, m, false);
  return t.push(std::move(c), {a, b}, [a, b, n, k, m](Tape& tp, int self) {
    const Matrix& dc = tp.grad(self);
    if (needs(tp, a)) kernels::matmul_nt(dc.data(), b.value().data(), tp.grad(a.id).data(), n, m, k);
    if (needs(tp, b)) kernels::matmul_tn(a.value().data(), dc.data(), tp.grad(b.id).data(), n, k, m);
  });
}

Var matmul_nt(Var a, Var b) {
  Tape& t = *a.tape;
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.cols()) throw std::invalid_argument("matmul_nt: width mismatch");
  const std::size_t n = av.rows(), m = av.cols(), k = bv.rows();
  Matrix c(n, k);
  kernels::matmul_nt(av.data(), bv.data(), c.data(), n, m, k);
  return t.push(std::move(c), {a, b}, [a, b, n, m, k](Tape& tp, int self) {
    const Matrix& dc = tp.grad(self);
    if (needs(tp, a)) kernels::matmul(dc.data(), b.value().data(), tp.grad(a.id).data(), n, k, m, true);
    if (needs(tp, b)) kernels::matmul_tn(dc.data(), a.value().data(), tp.grad(b.id).data(), n, k, m);
  });
}

Var add(Var a, Var b) {
  check_same(a.value(), b.value(), "add");
  Matrix c = a.value();
  const Matrix& bv = b.value();
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += bv[i];
  return a.tape->push(std::move(c), {a, b}, [a, b](Tape& tp, int self) {
    const Matrix& dc = tp.grad(self);
    for (Var v : {a, b}) {
      if (!needs(tp, v)) continue;
      Matrix& g = tp.grad(v.id);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dc[i];
    }
  });
}

Var sub(Var a, Var b) {
  check_same(a.value(), b.value(), "sub");
  Matrix c = a.value();
  const Matrix& bv = b.value();
  for (std::size_t i = 0; i < c.size(); ++i) c[i] -= bv[i];
  return a.tape->push(std::move(c), {a, b}, [a, b](Tape& tp, int self) {
    const Matrix& dc = tp.grad(self);
    if (needs(tp, a)) {
      Matrix& g = tp.grad(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dc[i];
    }
    if (needs(tp, b)) {
      Matrix& g = tp.grad(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= dc[i];
    }
  });
}

Var mul(Var a, Var b) {
  check_same(a.value(), b.value(), "mul");
  Matrix c = a.value();
  const Matrix& bv = b.value();
  for (std::size_t i = 0; i < c.size(); ++i) c[i] *= bv[i];
  return a.tape->push(std::move(c), {a, b}, [a, b](Tape& tp, int self) {
    const Matrix& dc = tp.grad(self);
    if (needs(tp, a)) {
      Matrix& g = tp.grad(a.id);
      const Matrix& o = b.value();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dc[i] * o[i];
    }
    if (needs(tp, b)) {
      Matrix& g = tp.grad(b.id);
      const Matrix& o = a.value();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dc[i] * o[i];
    }
  });
}

Var scale(Var a, double s) {
  Matrix c = a.value();
  for (double& v : c.storage()) v *= s;
  return a.tape->push(std::move(c), {a}, [a, s](Tape& tp, int self) {
    const Matrix& dc = tp.grad(self);
    Matrix& g = tp.grad(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * dc[i];
  });
}

Var add_row(Var a, Var row) {
  const Matrix& rv = row.value();
  Matrix c = a.value();
  if (rv.rows() != 1 || rv.cols() != c.cols()) throw std::invalid_argument("add_row: shape mismatch");
  for (std::size_t r = 0; r < c.rows(); ++r)
    for (std::size_t j = 0; j < c.cols(); ++j) c(r, j) += rv[j];
  return a.tape->push(std::move(c), {a, row}, [a, row](Tape& tp, int self) {
    const Matrix& dc = tp.grad(self);
    if (needs(tp, a)) {
      Matrix& g = tp.grad(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dc[i];
    }
    if (needs(tp, row)) {
      Matrix& g = tp.grad(row.id);
      for (std::size_t r = 0; r < dc.rows(); ++r)
        for (std::size_t j = 0; j < dc.cols(); ++j) g[j] += dc(r, j);
    }
  });
}

Var add_tiled(Var a, Var block) {
  const Matrix& bv = block.value();
  Matrix c = a.value();
  if (bv.cols() != c.cols() || bv.rows() == 0 || c.rows() % bv.rows() != 0)
    throw std::invalid_argument("add_tiled: shape mismatch");
  const std::size_t n = bv.rows();
  for (std::size_t r = 0; r < c.rows(); ++r)
    for (std::size_t j = 0; j < c.cols(); ++j) c(r, j) += bv(r % n, j);
  return a.tape->push(std::move(c), {a, block}, [a, block, n](Tape& tp, int self) {
    const Matrix& dc = tp.grad(self);
    if (needs(tp, a)) {
      Matrix& g = tp.grad(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dc[i];
    }
    if (needs(tp, block)) {
      Matrix& g = tp.grad(block.id);
      for (std::size_t r = 0; r < dc.rows(); ++r)
        for (std::size_t j = 0; j < dc.cols(); ++j) g(r % n, j) += dc(r, j);
    }
  });
}

Var gelu(Var x) {
  const Matrix& xv = x.value();
  Matrix y(xv.rows(), xv.cols());
  kernels::gelu_forward(xv.data(), y.data(), xv.size());
  return x.tape->push(std::move(y), {x}, [x](Tape& tp, int self) {
    const Matrix& xv = x.value();
    kernels::gelu_backward(xv.data(), tp.grad(self).data(), tp.grad(x.id).data(), xv.size());
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Matrix& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  if (gamma.value().size() != cols || beta.value().size() != cols)
    throw std::invalid_argument("layer_norm: parameter width mismatch");
  Matrix y(rows, cols);
  auto xhat = std::make_shared<Matrix>(rows, cols);
  auto rstd = std::make_shared<std::vector<double>>(rows);
  kernels::layer_norm_forward(xv.data(), gamma.value().data(), beta.value().data(), y.data(),
                              xhat->data(), rstd->data(), rows, cols, eps);
  return x.tape->push(std::move(y), {x, gamma, beta},
                      [x, gamma, beta, xhat, rstd, rows, cols](Tape& tp, int self) {
                        kernels::layer_norm_backward(
                            tp.grad(self).data(), xhat->data(), rstd->data(),
                            gamma.value().data(), needs(tp, x) ? tp.grad(x.id).data() : nullptr,
                            needs(tp, gamma) ? tp.grad(gamma.id).data() : nullptr,
                            needs(tp, beta) ? tp.grad(beta.id).data() : nullptr, rows, cols);
                      });
}

Var attention(Var qkv, const kernels::AttentionShape& shape) {
  const Matrix& qv = qkv.value();
  if (qv.rows() != shape.batch * shape.seq || qv.cols() != 3 * shape.width())
    throw std::invalid_argument("attention: qkv shape mismatch");
  Matrix out(qv.rows(), shape.width());
  auto probs = std::make_shared<std::vector<double>>(shape.batch * shape.heads * shape.seq * shape.seq);
  kernels::attention_forward(qv.data(), out.data(), probs->data(), shape);
  return qkv.tape->push(std::move(out), {qkv}, [qkv, probs, shape](Tape& tp, int self) {
    kernels::attention_backward(qkv.value().data(), probs->data(), tp.grad(self).data(),
                                tp.grad(qkv.id).data(), shape);
  });
}

Var softmax_rows(Var x) {
  Matrix y = x.value();
  for (std::size_t r = 0; r < y.rows(); ++r) {
    auto row = y.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      z += v;
    }
    for (double& v : row) v /= z;
  }
  return x.tape->push(std::move(y), {x}, [x](Tape& tp, int self) {
    const Matrix& yv = tp.value(self);
    const Matrix& dy = tp.grad(self);
    Matrix& dx = tp.grad(x.id);
    for (std::size_t r = 0; r < yv.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < yv.cols(); ++j) dot += dy(r, j) * yv(r, j);
      for (std::size_t j = 0; j < yv.cols(); ++j) dx(r, j) += yv(r, j) * (dy(r, j) - dot);
    }
  });
}

Var normalize_rows(Var x) {
  Matrix y = x.value();
  auto norms = std::make_shared<std::vector<double>>(y.rows());
  for (std::size_t r = 0; r < y.rows(); ++r) {
    double ss = 0.0;
    for (double v : y.row(r)) ss += v * v;
    const double n = std::sqrt(ss);
    if (n == 0.0) throw std::domain_error("normalize_rows: zero vector");
    (*norms)[r] = n;
    for (double& v : y.row(r)) v /= n;
  }
  return x.tape->push(std::move(y), {x}, [x, norms](Tape& tp, int self) {
    const Matrix& yv = tp.value(self);
    const Matrix& dy = tp.grad(self);
    Matrix& dx = tp.grad(x.id);
    for (std::size_t r = 0; r < yv.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < yv.cols(); ++j) dot += dy(r, j) * yv(r, j);
      for (std::size_t j = 0; j < yv.cols(); ++j)
        dx(r, j) += (dy(r, j) - yv(r, j) * dot) / (*norms)[r];
    }
  });
}

Var stack_sequences(Var head, Var body, Var tail, std::size_t batch) {
  const Matrix& bv = body.value();
  const std::size_t h = head.valid() ? head.rows() : 0;
  const std::size_t t = tail.valid() ? tail.rows() : 0;
  const std::size_t cols = bv.cols();
  if (batch == 0 || bv.rows() % batch != 0) throw std::invalid_argument("stack_sequences: bad batch");
  if ((h > 0 && head.cols() != cols) || (t > 0 && tail.cols() != cols))
    throw std::invalid_argument("stack_sequences: width mismatch");
  const std::size_t n = bv.rows() / batch;
  const std::size_t seq = h + n + t;
  Matrix out(batch * seq, cols);
  for (std::size_t b = 0; b < batch; ++b) {
    double* dst = out.data() + b * seq * cols;
    if (h > 0) std::copy_n(head.value().data(), h * cols, dst);
    std::copy_n(bv.data() + b * n * cols, n * cols, dst + h * cols);
    if (t > 0) std::copy_n(tail.value().data(), t * cols, dst + (h + n) * cols);
  }
  return body.tape->push(std::move(out), {head, body, tail},
                         [head, body, tail, batch, h, n, t, cols](Tape& tp, int self) {
                           const Matrix& g = tp.grad(self);
                           const std::size_t seq = h + n + t;
                           for (std::size_t b = 0; b < batch; ++b) {
                             const double* src = g.data() + b * seq * cols;
                             if (h > 0 && needs(tp, head)) {
                               double* d = tp.grad(head.id).data();
                               for (std::size_t i = 0; i < h * cols; ++i) d[i] += src[i];
                             }
                             if (needs(tp, body)) {
                               double* d = tp.grad(body.id).data() + b * n * cols;
                               for (std::size_t i = 0; i < n * cols; ++i) d[i] += src[h * cols + i];
                             }
                             if (t > 0 && needs(tp, tail)) {
                               double* d = tp.grad(tail.id).data();
                               for (std::size_t i = 0; i < t * cols; ++i) d[i] += src[(h + n) * cols + i];
                             }
                           }
                         });
}

Var segment_mean(Var x, std::size_t seq, std::size_t start, std::size_t count) {
  const Matrix& xv = x.value();
  if (seq == 0 || xv.rows() % seq != 0 || count == 0 || start + count > seq)
    throw std::invalid_argument("segment_mean: bad segment");
  const std::size_t batch = xv.rows() / seq, cols = xv.cols();
  Matrix out(batch, cols);
  const double inv = 1.0 / static_cast<double>(count);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t r = 0; r < count; ++r)
      for (std::size_t j = 0; j < cols; ++j) out(b, j) += xv(b * seq + start + r, j);
    for (std::size_t j = 0; j < cols; ++j) out(b, j) *= inv;
  }
  return x.tape->push(std::move(out), {x}, [x, seq, start, count, batch, cols, inv](Tape& tp, int self) {
    const Matrix& g = tp.grad(self);
    Matrix& dx = tp.grad(x.id);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t r = 0; r < count; ++r)
        for (std::size_t j = 0; j < cols; ++j) dx(b * seq + start + r, j) += g(b, j) * inv;
  });
}

Var gather_rows(Var table, std::span<const int> ids) {
  const Matrix& tv = table.value();
  Matrix out(ids.size(), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tv.rows())
      throw std::out_of_range("gather_rows: id out of range");
    std::copy_n(tv.data() + ids[i] * tv.cols(), tv.cols(), out.data() + i * tv.cols());
  }
  std::vector<int> keep(ids.begin(), ids.end());
  return table.tape->push(std::move(out), {table}, [table, keep](Tape& tp, int self) {
    const Matrix& g = tp.grad(self);
    Matrix& dt = tp.grad(table.id);
    for (std::size_t i = 0; i < keep.size(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) dt(keep[i], j) += g(i, j);
  });
}

Var select_rows(Var x, std::span<const std::size_t> rows) {
  const Matrix& xv = x.value();
  Matrix out(rows.size(), xv.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= xv.rows()) throw std::out_of_range("select_rows: row out of range");
    std::copy_n(xv.data() + rows[i] * xv.cols(), xv.cols(), out.data() + i * xv.cols());
  }
  std::vector<std::size_t> keep(rows.begin(), rows.end());
  return x.tape->push(std::move(out), {x}, [x, keep](Tape& tp, int self) {
    const Matrix& g = tp.grad(self);
    Matrix& dx = tp.grad(x.id);
    for (std::size_t i = 0; i < keep.size(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) dx(keep[i], j) += g(i, j);
  });
}

Var slice_cols(Var x, std::size_t start, std::size_t count) {
  const Matrix& xv = x.value();
  if (start + count > xv.cols()) throw std::out_of_range("slice_cols: range");
  Matrix out(xv.rows(), count);
  for (std::size_t r = 0; r < xv.rows(); ++r)
    std::copy_n(xv.data() + r * xv.cols() + start, count, out.data() + r * count);
  return x.tape->push(std::move(out), {x}, [x, start, count](Tape& tp, int self) {
    const Matrix& g = tp.grad(self);
    Matrix& dx = tp.grad(x.id);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t j = 0; j < count; ++j) dx(r, start + j) += g(r, j);
  });
}

void SparseMap::apply(std::span<const double> in, std::span<double> out) const {
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t i = 0; i < weight.size(); ++i) out[dst[i]] += weight[i] * in[src[i]];
}

Var sparse_map(Var x, const SparseMap& map) {
  const Matrix& xv = x.value();
  if (xv.cols() != map.in_dim) throw std::invalid_argument("sparse_map: input width mismatch");
  Matrix out(xv.rows(), map.out_dim);
  for (std::size_t r = 0; r < xv.rows(); ++r) map.apply(xv.row(r), out.row(r));
  auto m = std::make_shared<SparseMap>(map);
  return x.tape->push(std::move(out), {x}, [x, m](Tape& tp, int self) {
    const Matrix& g = tp.grad(self);
    Matrix& dx = tp.grad(x.id);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t i = 0; i < m->weight.size(); ++i)
        dx(r, m->src[i]) += m->weight[i] * g(r, m->dst[i]);
  });
}

Var sparse_map_rows(Var x, std::vector<std::shared_ptr<const SparseMap>> maps) {
  const Matrix& xv = x.value();
  if (maps.size() != xv.rows()) throw std::invalid_argument("sparse_map_rows: one map per row");
  Matrix out = xv;
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    if (!maps[r]) continue;
    if (maps[r]->in_dim != xv.cols() || maps[r]->out_dim != xv.cols())
      throw std::invalid_argument("sparse_map_rows: maps must preserve the row width");
    maps[r]->apply(xv.row(r), out.row(r));
  }
  return x.tape->push(std::move(out), {x}, [x, maps = std::move(maps)](Tape& tp, int self) {
    const Matrix& g = tp.grad(self);
    Matrix& dx = tp.grad(x.id);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      const SparseMap* m = maps[r].get();
      if (m == nullptr) {
        for (std::size_t j = 0; j < g.cols(); ++j) dx(r, j) += g(r, j);
        continue;
      }
      for (std::size_t i = 0; i < m->weight.size(); ++i) dx(r, m->src[i]) += m->weight[i] * g(r, m->dst[i]);
    }
  });
}

Var patchify(Var images, std::size_t channels, std::size_t side, std::size_t patch) {
  const Matrix& iv = images.value();
  if (iv.cols() != channels * side * side || side % patch != 0)
    throw std::invalid_argument("patchify: geometry mismatch");
  const std::size_t per_side = side / patch;
  const std::size_t patches = per_side * per_side;
  const std::size_t width = channels * patch * patch;
  const std::size_t batch = iv.rows();
  // index[o] = source pixel of output column o for patch p, flattened.
  auto index = std::make_shared<std::vector<std::size_t>>(patches * width);
  for (std::size_t p = 0; p < patches; ++p) {
    const std::size_t pr = p / per_side, pc = p % per_side;
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t dy = 0; dy < patch; ++dy)
        for (std::size_t dx = 0; dx < patch; ++dx)
          (*index)[p * width + c * patch * patch + dy * patch + dx] =
              c * side * side + (pr * patch + dy) * side + pc * patch + dx;
  }
  Matrix out(batch * patches, width);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* src = iv.data() + b * iv.cols();
    double* dst = out.data() + b * patches * width;
    for (std::size_t i = 0; i < patches * width; ++i) dst[i] = src[(*index)[i]];
  }
  return images.tape->push(std::move(out), {images}, [images, index, batch, patches, width](Tape& tp, int self) {
    const Matrix& g = tp.grad(self);
    Matrix& di = tp.grad(images.id);
    for (std::size_t b = 0; b < batch; ++b) {
      const double* src = g.data() + b * patches * width;
      double* dst = di.data() + b * di.cols();
      for (std::size_t i = 0; i < patches * width; ++i) dst[(*index)[i]] += src[i];
    }
  });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().flat()) s += v;
  return x.tape->push(Matrix(1, 1, s), {x}, [x](Tape& tp, int self) {
    const double g = tp.grad(self)[0];
    for (double& v : tp.grad(x.id).storage()) v += g;
  });
}

Var mean_rows(Var x) {
  const Matrix& xv = x.value();
  if (xv.rows() == 0) throw std::invalid_argument("mean_rows: empty");
  Matrix out(1, xv.cols());
  for (std::size_t r = 0; r < xv.rows(); ++r)
    for (std::size_t j = 0; j < xv.cols(); ++j) out[j] += xv(r, j);
  const double inv = 1.0 / static_cast<double>(xv.rows());
  for (double& v : out.storage()) v *= inv;
  return x.tape->push(std::move(out), {x}, [x, inv](Tape& tp, int self) {
    const Matrix& g = tp.grad(self);
    Matrix& dx = tp.grad(x.id);
    for (std::size_t r = 0; r < dx.rows(); ++r)
      for (std::size_t j = 0; j < dx.cols(); ++j) dx(r, j) += g[j] * inv;
  });
}

Var variance_rows(Var x) {
  const Matrix& xv = x.value();
  const std::size_t n = xv.rows();
  if (n == 0) throw std::invalid_argument("variance_rows: empty");
  auto mean = std::make_shared<std::vector<double>>(xv.cols(), 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < xv.cols(); ++j) (*mean)[j] += xv(r, j);
  for (double& m : *mean) m /= static_cast<double>(n);
  Matrix out(1, xv.cols());
  if (n > 1) {
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < xv.cols(); ++j) {
        const double d = xv(r, j) - (*mean)[j];
        out[j] += d * d;
      }
    for (double& v : out.storage()) v /= static_cast<double>(n - 1);
  }
  return x.tape->push(std::move(out), {x}, [x, mean, n](Tape& tp, int self) {
    if (n < 2) return;
    const Matrix& g = tp.grad(self);
    const Matrix& xv = x.value();
    Matrix& dx = tp.grad(x.id);
    const double c = 2.0 / static_cast<double>(n - 1);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < xv.cols(); ++j) dx(r, j) += g[j] * c * (xv(r, j) - (*mean)[j]);
  });
}

Var l1_distance(Var x, const Matrix& target) {
  check_same(x.value(), target, "l1_distance");
  const Matrix& xv = x.value();
  double s = 0.0;
  auto sign = std::make_shared<std::vector<double>>(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double d = xv[i] - target[i];
    s += std::abs(d);
    (*sign)[i] = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
  }
  return x.tape->push(Matrix(1, 1, s), {x}, [x, sign](Tape& tp, int self) {
    const double g = tp.grad(self)[0];
    Matrix& dx = tp.grad(x.id);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g * (*sign)[i];
  });
}

Var entropy_rows(Var p) {
  const Matrix& pv = p.value();
  Matrix out(pv.rows(), 1);
  for (std::size_t r = 0; r < pv.rows(); ++r)
    for (double v : pv.row(r))
      if (v > 0.0) out[r] -= v * std::log(v);
  return p.tape->push(std::move(out), {p}, [p](Tape& tp, int self) {
    const Matrix& g = tp.grad(self);
    const Matrix& pv = p.value();
    Matrix& dp = tp.grad(p.id);
    for (std::size_t r = 0; r < pv.rows(); ++r)
      for (std::size_t j = 0; j < pv.cols(); ++j)
        if (pv(r, j) > 0.0) dp(r, j) -= g[r] * (std::log(pv(r, j)) + 1.0);
  });
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  const Matrix& lv = logits.value();
  if (labels.size() != lv.rows()) throw std::invalid_argument("cross_entropy: label count");
  auto probs = std::make_shared<Matrix>(lv.rows(), lv.cols());
  double loss = 0.0;
  for (std::size_t r = 0; r < lv.rows(); ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= lv.cols())
      throw std::out_of_range("cross_entropy: label out of range");
    auto row = lv.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    const double lse = mx + std::log(z);
    loss += lse - row[labels[r]];
    for (std::size_t j = 0; j < lv.cols(); ++j) (*probs)(r, j) = std::exp(row[j] - lse);
  }
  const double inv = 1.0 / static_cast<double>(lv.rows());
  std::vector<int> keep(labels.begin(), labels.end());
  return logits.tape->push(Matrix(1, 1, loss * inv), {logits}, [logits, probs, keep, inv](Tape& tp, int self) {
    const double g = tp.grad(self)[0] * inv;
    Matrix& dl = tp.grad(logits.id);
    for (std::size_t r = 0; r < probs->rows(); ++r)
      for (std::size_t j = 0; j < probs->cols(); ++j)
        dl(r, j) += g * ((*probs)(r, j) - (static_cast<int>(j) == keep[r] ? 1.0 : 0.0));
  });
}

Var add_scalars(std::initializer_list<std::pair<double, Var>> terms) {
  if (terms.size() == 0) throw std::invalid_argument("add_scalars: no terms");
  Tape* t = terms.begin()->second.tape;
  double s = 0.0;
  std::vector<Var> inputs;
  std::vector<std::pair<double, Var>> keep(terms);
  for (const auto& [w, v] : terms) {
    s += w * v.scalar();
    inputs.push_back(v);
  }
  return t->push(Matrix(1, 1, s), inputs, [keep](Tape& tp, int self) {
    const double g = tp.grad(self)[0];
    for (const auto& [w, v] : keep)
      if (needs(tp, v)) tp.grad(v.id)[0] += w * g;
  });
}

}  // namespace tapt::ad
