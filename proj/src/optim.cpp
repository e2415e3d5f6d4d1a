#include "tapt/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace tapt::optim {

void AdamW::step(std::span<Matrix* const> params, std::span<const Matrix* const> grads, double lr) {
  if (params.size() != grads.size()) throw std::invalid_argument("AdamW: params/grads mismatch");
  if (m_.empty()) {
    for (const Matrix* p : params) {
      m_.emplace_back(p->rows(), p->cols());
      v_.emplace_back(p->rows(), p->cols());
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Matrix& p = *params[k];
    Matrix& m = m_[k];
    Matrix& v = v_[k];
    const Matrix* g = grads[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g != nullptr ? (*g)[i] : 0.0;
      m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * gi;
      v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * gi * gi;
      p[i] -= lr * opt_.weight_decay * p[i];
      p[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + opt_.eps);
    }
  }
}

void Sgd::step(std::span<Matrix* const> params, std::span<const Matrix* const> grads, double lr) {
  if (params.size() != grads.size()) throw std::invalid_argument("Sgd: params/grads mismatch");
  if (velocity_.empty())
    for (const Matrix* p : params) velocity_.emplace_back(p->rows(), p->cols());
  for (std::size_t k = 0; k < params.size(); ++k) {
    Matrix& p = *params[k];
    Matrix& vel = velocity_[k];
    const Matrix* g = grads[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = (g != nullptr ? (*g)[i] : 0.0) + weight_decay_ * p[i];
      vel[i] = momentum_ * vel[i] + gi;
      p[i] -= lr * vel[i];
    }
  }
}

double cosine_lr(double base, std::size_t step, std::size_t total, std::size_t warmup) {
  if (total == 0) return base;
  if (step < warmup) return base * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const double span = static_cast<double>(total - warmup);
  const double t = span > 0 ? static_cast<double>(step - warmup) / span : 1.0;
  return 0.5 * base * (1.0 + std::cos(M_PI * std::min(t, 1.0)));
}

}  // namespace tapt::optim
