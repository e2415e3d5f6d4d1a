// Serial reference kernels. Written for clarity; tests hold the parallel
// kernels to these.

#include <cmath>
#include <vector>

#include "tapt/kernels.hpp"

namespace tapt::kernels::ref {

void matmul(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
            std::size_t m, bool accumulate) {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double acc = accumulate ? c[i * m + j] : 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * m + j];
      c[i * m + j] = acc;
    }
}

void matmul_nt(const double* a, const double* b, double* c, std::size_t n, std::size_t m,
               std::size_t k) {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t r = 0; r < k; ++r) {
      double acc = c[i * k + r];
      for (std::size_t q = 0; q < m; ++q) acc += a[i * m + q] * b[r * m + q];
      c[i * k + r] = acc;
    }
}

void matmul_tn(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
               std::size_t m) {
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < m; ++j) {
      double acc = c[p * m + j];
      for (std::size_t i = 0; i < n; ++i) acc += a[i * k + p] * b[i * m + j];
      c[p * m + j] = acc;
    }
}

void layer_norm_forward(const double* x, const double* gamma, const double* beta, double* y,
                        double* xhat, double* rstd, std::size_t rows, std::size_t cols,
                        double eps) {
  for (std::size_t r = 0; r < rows; ++r) {
    double mean = 0.0;
    for (std::size_t j = 0; j < cols; ++j) mean += x[r * cols + j];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      const double d = x[r * cols + j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < cols; ++j) {
      xhat[r * cols + j] = (x[r * cols + j] - mean) * rstd[r];
      y[r * cols + j] = xhat[r * cols + j] * gamma[j] + beta[j];
    }
  }
}

void layer_norm_backward(const double* dy, const double* xhat, const double* rstd,
                         const double* gamma, double* dx, double* dgamma, double* dbeta,
                         std::size_t rows, std::size_t cols) {
  const double n = static_cast<double>(cols);
  for (std::size_t r = 0; r < rows; ++r) {
    double sum_g = 0.0;
    double sum_gh = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      sum_g += dy[r * cols + j] * gamma[j];
      sum_gh += dy[r * cols + j] * gamma[j] * xhat[r * cols + j];
    }
    for (std::size_t j = 0; j < cols; ++j) {
      const double g = dy[r * cols + j] * gamma[j];
      if (dx != nullptr)
        dx[r * cols + j] += rstd[r] * (g - sum_g / n - xhat[r * cols + j] * (sum_gh / n));
      if (dgamma != nullptr) dgamma[j] += dy[r * cols + j] * xhat[r * cols + j];
      if (dbeta != nullptr) dbeta[j] += dy[r * cols + j];
    }
  }
}

void gelu_forward(const double* x, double* y, std::size_t n) {
  const double c = std::sqrt(2.0 / M_PI);
  for (std::size_t i = 0; i < n; ++i)
    y[i] = 0.5 * x[i] * (1.0 + std::tanh(c * (x[i] + 0.044715 * std::pow(x[i], 3))));
}

void gelu_backward(const double* x, const double* dy, double* dx, std::size_t n) {
  const double c = std::sqrt(2.0 / M_PI);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = c * (x[i] + 0.044715 * std::pow(x[i], 3));
    const double t = std::tanh(u);
    const double du = c * (1.0 + 3.0 * 0.044715 * x[i] * x[i]);
    dx[i] += dy[i] * (0.5 * (1.0 + t) + 0.5 * x[i] * (1.0 - t * t) * du);
  }
}

void attention_forward(const double* qkv, double* out, double* probs, const AttentionShape& s) {
  const std::size_t w = s.width();
  const double scale = 1.0 / std::sqrt(static_cast<double>(s.head_dim));
  auto at = [&](std::size_t b, std::size_t t, std::size_t part, std::size_t h, std::size_t d) {
    return qkv[(b * s.seq + t) * 3 * w + part * w + h * s.head_dim + d];
  };
  for (std::size_t b = 0; b < s.batch; ++b)
    for (std::size_t h = 0; h < s.heads; ++h) {
      double* p = probs + (b * s.heads + h) * s.seq * s.seq;
      for (std::size_t i = 0; i < s.seq; ++i) {
        std::vector<double> sc(s.seq);
        double mx = -INFINITY;
        for (std::size_t j = 0; j < s.seq; ++j) {
          double acc = 0.0;
          for (std::size_t d = 0; d < s.head_dim; ++d) acc += at(b, i, 0, h, d) * at(b, j, 1, h, d);
          sc[j] = acc * scale;
          mx = std::max(mx, sc[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < s.seq; ++j) z += std::exp(sc[j] - mx);
        for (std::size_t j = 0; j < s.seq; ++j) p[i * s.seq + j] = std::exp(sc[j] - mx) / z;
        for (std::size_t d = 0; d < s.head_dim; ++d) {
          double acc = 0.0;
          for (std::size_t j = 0; j < s.seq; ++j) acc += p[i * s.seq + j] * at(b, j, 2, h, d);
          out[(b * s.seq + i) * w + h * s.head_dim + d] = acc;
        }
      }
    }
}

void attention_backward(const double* qkv, const double* probs, const double* dout,
                        double* dqkv, const AttentionShape& s) {
  const std::size_t w = s.width();
  const double scale = 1.0 / std::sqrt(static_cast<double>(s.head_dim));
  auto idx = [&](std::size_t b, std::size_t t, std::size_t part, std::size_t h, std::size_t d) {
    return (b * s.seq + t) * 3 * w + part * w + h * s.head_dim + d;
  };
  for (std::size_t b = 0; b < s.batch; ++b)
    for (std::size_t h = 0; h < s.heads; ++h) {
      const double* p = probs + (b * s.heads + h) * s.seq * s.seq;
      for (std::size_t i = 0; i < s.seq; ++i) {
        const double* doi = dout + (b * s.seq + i) * w + h * s.head_dim;
        std::vector<double> dp(s.seq, 0.0);
        for (std::size_t j = 0; j < s.seq; ++j)
          for (std::size_t d = 0; d < s.head_dim; ++d) {
            dp[j] += doi[d] * qkv[idx(b, j, 2, h, d)];
            dqkv[idx(b, j, 2, h, d)] += p[i * s.seq + j] * doi[d];
          }
        double dot = 0.0;
        for (std::size_t j = 0; j < s.seq; ++j) dot += p[i * s.seq + j] * dp[j];
        for (std::size_t j = 0; j < s.seq; ++j) {
          const double ds = p[i * s.seq + j] * (dp[j] - dot) * scale;
          for (std::size_t d = 0; d < s.head_dim; ++d) {
            dqkv[idx(b, i, 0, h, d)] += ds * qkv[idx(b, j, 1, h, d)];
            dqkv[idx(b, j, 1, h, d)] += ds * qkv[idx(b, i, 0, h, d)];
          }
        }
      }
    }
}

}  // namespace tapt::kernels::ref
