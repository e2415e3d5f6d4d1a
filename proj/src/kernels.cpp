#include "tapt/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <vector>

namespace tapt::kernels {
namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

// Below this many multiply-adds the fork/join costs more than it saves.
constexpr std::size_t kParallelWork = 1 << 15;

bool go_parallel(std::size_t work) {
  return work >= kParallelWork && !omp_in_parallel() && omp_get_max_threads() > 1;
}

}  // namespace

void matmul(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
            std::size_t m, bool accumulate) {
  // Rows are processed in groups of four so every B row loaded feeds four
  // accumulating C rows. Each C element still sums over p in order.
  const std::size_t groups = (n + 3) / 4;
  const bool par = go_parallel(n * k * m);
#pragma omp parallel for if (par) schedule(static)
  for (std::ptrdiff_t gi = 0; gi < static_cast<std::ptrdiff_t>(groups); ++gi) {
    const std::size_t i0 = gi * 4;
    const std::size_t rows = std::min<std::size_t>(4, n - i0);
    if (!accumulate) std::fill(c + i0 * m, c + (i0 + rows) * m, 0.0);
    if (rows == 4) {
      double* c0 = c + i0 * m;
      double* c1 = c0 + m;
      double* c2 = c1 + m;
      double* c3 = c2 + m;
      const double* a0 = a + i0 * k;
      for (std::size_t p = 0; p < k; ++p) {
        const double v0 = a0[p], v1 = a0[k + p], v2 = a0[2 * k + p], v3 = a0[3 * k + p];
        const double* brow = b + p * m;
#pragma omp simd
        for (std::size_t j = 0; j < m; ++j) {
          const double bv = brow[j];
          c0[j] += v0 * bv;
          c1[j] += v1 * bv;
          c2[j] += v2 * bv;
          c3[j] += v3 * bv;
        }
      }
    } else {
      for (std::size_t i = i0; i < i0 + rows; ++i) {
        double* crow = c + i * m;
        const double* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
          const double av = arow[p];
          const double* brow = b + p * m;
#pragma omp simd
          for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
      }
    }
  }
}

void matmul_nt(const double* a, const double* b, double* c, std::size_t n, std::size_t m,
               std::size_t k) {
  // Transpose B once so the inner loop is contiguous.
  std::vector<double> bt(m * k);
  for (std::size_t r = 0; r < k; ++r)
    for (std::size_t q = 0; q < m; ++q) bt[q * k + r] = b[r * m + q];
  matmul(a, bt.data(), c, n, m, k, /*accumulate=*/true);
}

void matmul_tn(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
               std::size_t m) {
  const bool par = go_parallel(n * k * m);
#pragma omp parallel for if (par) schedule(static)
  for (std::ptrdiff_t p = 0; p < static_cast<std::ptrdiff_t>(k); ++p) {
    double* crow = c + p * m;
    for (std::size_t i = 0; i < n; ++i) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + i * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

void layer_norm_forward(const double* x, const double* gamma, const double* beta, double* y,
                        double* xhat, double* rstd, std::size_t rows, std::size_t cols,
                        double eps) {
  const bool par = go_parallel(rows * cols * 8);
#pragma omp parallel for if (par) schedule(static)
  for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(rows); ++r) {
    const double* xr = x + r * cols;
    double mean = 0.0;
    for (std::size_t j = 0; j < cols; ++j) mean += xr[j];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      const double d = xr[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[r] = rs;
    double* hr = xhat + r * cols;
    double* yr = y + r * cols;
    for (std::size_t j = 0; j < cols; ++j) {
      hr[j] = (xr[j] - mean) * rs;
      yr[j] = hr[j] * gamma[j] + beta[j];
    }
  }
}

void layer_norm_backward(const double* dy, const double* xhat, const double* rstd,
                         const double* gamma, double* dx, double* dgamma, double* dbeta,
                         std::size_t rows, std::size_t cols) {
  if (dx != nullptr) {
    const bool par = go_parallel(rows * cols * 8);
#pragma omp parallel for if (par) schedule(static)
    for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(rows); ++r) {
      const double* dyr = dy + r * cols;
      const double* hr = xhat + r * cols;
      double m1 = 0.0;
      double m2 = 0.0;
      for (std::size_t j = 0; j < cols; ++j) {
        const double g = dyr[j] * gamma[j];
        m1 += g;
        m2 += g * hr[j];
      }
      m1 /= static_cast<double>(cols);
      m2 /= static_cast<double>(cols);
      double* dxr = dx + r * cols;
      for (std::size_t j = 0; j < cols; ++j)
        dxr[j] += rstd[r] * (dyr[j] * gamma[j] - m1 - hr[j] * m2);
    }
  }
  // Parameter reductions run in row order on one thread.
  for (std::size_t r = 0; r < rows; ++r) {
    const double* dyr = dy + r * cols;
    const double* hr = xhat + r * cols;
    if (dgamma != nullptr)
      for (std::size_t j = 0; j < cols; ++j) dgamma[j] += dyr[j] * hr[j];
    if (dbeta != nullptr)
      for (std::size_t j = 0; j < cols; ++j) dbeta[j] += dyr[j];
  }
}

void gelu_forward(const double* x, double* y, std::size_t n) {
  const bool par = go_parallel(n * 16);
#pragma omp parallel for if (par) schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
    const double v = x[i];
    y[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  }
}

void gelu_backward(const double* x, const double* dy, double* dx, std::size_t n) {
  const bool par = go_parallel(n * 16);
#pragma omp parallel for if (par) schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
    const double v = x[i];
    const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
    const double dt = (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
    dx[i] += dy[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
  }
}

void attention_forward(const double* qkv, double* out, double* probs, const AttentionShape& s) {
  const std::size_t width = s.width();
  const std::size_t stride = 3 * width;
  const double scale = 1.0 / std::sqrt(static_cast<double>(s.head_dim));
  const std::size_t blocks = s.batch * s.heads;
  const bool par = go_parallel(blocks * s.seq * s.seq * s.head_dim * 2);
#pragma omp parallel for if (par) schedule(static)
  for (std::ptrdiff_t blk = 0; blk < static_cast<std::ptrdiff_t>(blocks); ++blk) {
    const std::size_t b = blk / s.heads;
    const std::size_t h = blk % s.heads;
    const double* base = qkv + b * s.seq * stride;
    const std::size_t qo = h * s.head_dim;
    const std::size_t ko = width + qo;
    const std::size_t vo = 2 * width + qo;
    double* p = probs + blk * s.seq * s.seq;
    for (std::size_t i = 0; i < s.seq; ++i) {
      const double* qi = base + i * stride + qo;
      double* pi = p + i * s.seq;
      double mx = -INFINITY;
      for (std::size_t j = 0; j < s.seq; ++j) {
        const double* kj = base + j * stride + ko;
        double acc = 0.0;
        for (std::size_t d = 0; d < s.head_dim; ++d) acc += qi[d] * kj[d];
        pi[j] = acc * scale;
        mx = std::max(mx, pi[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < s.seq; ++j) {
        pi[j] = std::exp(pi[j] - mx);
        z += pi[j];
      }
      for (std::size_t j = 0; j < s.seq; ++j) pi[j] /= z;
      double* oi = out + (b * s.seq + i) * width + qo;
      std::fill(oi, oi + s.head_dim, 0.0);
      for (std::size_t j = 0; j < s.seq; ++j) {
        const double* vj = base + j * stride + vo;
        for (std::size_t d = 0; d < s.head_dim; ++d) oi[d] += pi[j] * vj[d];
      }
    }
  }
}

void attention_backward(const double* qkv, const double* probs, const double* dout,
                        double* dqkv, const AttentionShape& s) {
  const std::size_t width = s.width();
  const std::size_t stride = 3 * width;
  const double scale = 1.0 / std::sqrt(static_cast<double>(s.head_dim));
  const std::size_t blocks = s.batch * s.heads;
  const bool par = go_parallel(blocks * s.seq * s.seq * s.head_dim * 4);
#pragma omp parallel for if (par) schedule(static)
  for (std::ptrdiff_t blk = 0; blk < static_cast<std::ptrdiff_t>(blocks); ++blk) {
    const std::size_t b = blk / s.heads;
    const std::size_t h = blk % s.heads;
    const double* base = qkv + b * s.seq * stride;
    double* dbase = dqkv + b * s.seq * stride;
    const std::size_t qo = h * s.head_dim;
    const std::size_t ko = width + qo;
    const std::size_t vo = 2 * width + qo;
    const double* p = probs + blk * s.seq * s.seq;
    std::vector<double> dp(s.seq);
    for (std::size_t i = 0; i < s.seq; ++i) {
      const double* doi = dout + (b * s.seq + i) * width + qo;
      const double* pi = p + i * s.seq;
      double dot = 0.0;
      for (std::size_t j = 0; j < s.seq; ++j) {
        const double* vj = base + j * stride + vo;
        double* dvj = dbase + j * stride + vo;
        double acc = 0.0;
        for (std::size_t d = 0; d < s.head_dim; ++d) {
          acc += doi[d] * vj[d];
          dvj[d] += pi[j] * doi[d];
        }
        dp[j] = acc;
        dot += pi[j] * acc;
      }
      const double* qi = base + i * stride + qo;
      double* dqi = dbase + i * stride + qo;
      for (std::size_t j = 0; j < s.seq; ++j) {
        const double ds = pi[j] * (dp[j] - dot) * scale;
        if (ds == 0.0) continue;
        const double* kj = base + j * stride + ko;
        double* dkj = dbase + j * stride + ko;
        for (std::size_t d = 0; d < s.head_dim; ++d) {
          dqi[d] += ds * kj[d];
          dkj[d] += ds * qi[d];
        }
      }
    }
  }
}

}  // namespace tapt::kernels
