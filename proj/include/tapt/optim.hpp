#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "tapt/matrix.hpp"

namespace tapt::optim {

/// Decoupled-weight-decay Adam. State is positional: the i-th parameter of
/// every step() call must be the same tensor.
class AdamW {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
  };

  AdamW() = default;
  explicit AdamW(Options o) : opt_(o) {}

  void step(std::span<Matrix* const> params, std::span<const Matrix* const> grads, double lr);
  std::size_t steps_taken() const { return t_; }
  void reset() {
    t_ = 0;
    m_.clear();
    v_.clear();
  }

 private:
  Options opt_;
  std::size_t t_ = 0;
  std::vector<Matrix> m_, v_;
};

/// SGD with heavy-ball momentum.
class Sgd {
 public:
  explicit Sgd(double momentum = 0.9, double weight_decay = 0.0)
      : momentum_(momentum), weight_decay_(weight_decay) {}
  void step(std::span<Matrix* const> params, std::span<const Matrix* const> grads, double lr);

 private:
  double momentum_;
  double weight_decay_;
  std::vector<Matrix> velocity_;
};

/// Linear warmup then cosine decay from base to 0 over `total` steps.
double cosine_lr(double base, std::size_t step, std::size_t total, std::size_t warmup = 0);

}  // namespace tapt::optim
