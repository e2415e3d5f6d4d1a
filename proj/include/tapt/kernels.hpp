#pragma once

#include <cstddef>

// Dense numeric kernels used by the autodiff tape.
//
// Two implementations share every signature:
//   tapt::kernels::      OpenMP-parallel over independent output rows/blocks
//   tapt::kernels::ref:: straightforward serial loops kept as the reference
//
// The parallel kernels partition work only across outputs, never across a
// reduction, so their results do not depend on the thread count. Nested
// calls from inside an OpenMP region run on the calling thread.

namespace tapt::kernels {

struct AttentionShape {
  std::size_t batch = 0;  // sequences
  std::size_t seq = 0;    // tokens per sequence
  std::size_t heads = 0;
  std::size_t head_dim = 0;
  std::size_t width() const { return heads * head_dim; }
};

// C[n x m] (+)= A[n x k] * B[k x m]
void matmul(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
            std::size_t m, bool accumulate);
// C[n x k] += A[n x m] * B[k x m]^T
void matmul_nt(const double* a, const double* b, double* c, std::size_t n, std::size_t m,
               std::size_t k);
// C[k x m] += A[n x k]^T * B[n x m]
void matmul_tn(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
               std::size_t m);

// Row-wise layer norm. xhat and rstd are saved for the backward pass.
void layer_norm_forward(const double* x, const double* gamma, const double* beta, double* y,
                        double* xhat, double* rstd, std::size_t rows, std::size_t cols,
                        double eps);
// Accumulates into dx, dgamma, dbeta (any of which may be null).
void layer_norm_backward(const double* dy, const double* xhat, const double* rstd,
                         const double* gamma, double* dx, double* dgamma, double* dbeta,
                         std::size_t rows, std::size_t cols);

void gelu_forward(const double* x, double* y, std::size_t n);
void gelu_backward(const double* x, const double* dy, double* dx, std::size_t n);

// qkv is [batch*seq x 3*width] laid out as [Q | K | V]; out is [batch*seq x width].
// probs receives batch*heads*seq*seq softmax weights.
void attention_forward(const double* qkv, double* out, double* probs, const AttentionShape& s);
void attention_backward(const double* qkv, const double* probs, const double* dout,
                        double* dqkv, const AttentionShape& s);

namespace ref {
void matmul(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
            std::size_t m, bool accumulate);
void matmul_nt(const double* a, const double* b, double* c, std::size_t n, std::size_t m,
               std::size_t k);
void matmul_tn(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
               std::size_t m);
void layer_norm_forward(const double* x, const double* gamma, const double* beta, double* y,
                        double* xhat, double* rstd, std::size_t rows, std::size_t cols,
                        double eps);
void layer_norm_backward(const double* dy, const double* xhat, const double* rstd,
                         const double* gamma, double* dx, double* dgamma, double* dbeta,
                         std::size_t rows, std::size_t cols);
void gelu_forward(const double* x, double* y, std::size_t n);
void gelu_backward(const double* x, const double* dy, double* dx, std::size_t n);
void attention_forward(const double* qkv, double* out, double* probs, const AttentionShape& s);
void attention_backward(const double* qkv, const double* probs, const double* dout,
                        double* dqkv, const AttentionShape& s);
}  // namespace ref

}  // namespace tapt::kernels
