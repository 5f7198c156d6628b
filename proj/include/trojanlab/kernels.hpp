#pragma once

#include <cstddef>

// Dense kernels backing the tensor ops. Every kernel has a serial and an
// OpenMP variant that share the same per-row / per-element helper, so the
// two produce bit-identical output and the parallel path can be validated
// against the serial one by exact comparison.

namespace trojanlab::kernels {

enum class Backend { serial, openmp };

Backend backend();
void set_backend(Backend b);
int max_threads();

// C = A(MxK) @ B(KxN), row-major. acc=true accumulates into C.
void matmul(const double* A, const double* B, double* C, int M, int K, int N, bool acc = false);
// C = A(MxD) @ B(NxD)^T
void matmul_nt(const double* A, const double* B, double* C, int M, int D, int N, bool acc = false);
// C = A(PxM)^T @ B(PxN)
void matmul_tn(const double* A, const double* B, double* C, int P, int M, int N, bool acc = false);

void add(const double* a, const double* b, double* out, std::size_t n);
void mul(const double* a, const double* b, double* out, std::size_t n);
void scale(const double* a, double c, double* out, std::size_t n);
void axpy(double c, const double* x, double* y, std::size_t n);  // y += c*x

void gelu(const double* x, double* y, std::size_t n);
void gelu_grad(const double* x, const double* dy, double* dx, std::size_t n);  // dx += dgelu

void softmax_rows(const double* x, double* y, int rows, int cols);
void log_softmax_rows(const double* x, double* y, int rows, int cols);
// dx += J_softmax^T dy, given y = softmax_rows(x)
void softmax_rows_grad(const double* y, const double* dy, double* dx, int rows, int cols);
// dx += J_logsoftmax^T dy, given y = log_softmax_rows(x)
void log_softmax_rows_grad(const double* y, const double* dy, double* dx, int rows, int cols);

// y = (x - mean) / sqrt(var + eps) * g + b per row; stats[2*r] = mean,
// stats[2*r+1] = 1/sqrt(var+eps).
void layernorm_rows(const double* x, const double* g, const double* b, double* y, double* stats,
                    int rows, int cols, double eps);
void layernorm_rows_grad(const double* x, const double* g, const double* stats, const double* dy,
                         double* dx, double* dg, double* db, int rows, int cols);

// Serial twins, exposed for tests and the kernel benchmark.
namespace serial {
void matmul(const double* A, const double* B, double* C, int M, int K, int N, bool acc = false);
void matmul_nt(const double* A, const double* B, double* C, int M, int D, int N, bool acc = false);
void matmul_tn(const double* A, const double* B, double* C, int P, int M, int N, bool acc = false);
void gelu(const double* x, double* y, std::size_t n);
void softmax_rows(const double* x, double* y, int rows, int cols);
void log_softmax_rows(const double* x, double* y, int rows, int cols);
void layernorm_rows(const double* x, const double* g, const double* b, double* y, double* stats,
                    int rows, int cols, double eps);
}  // namespace serial

namespace openmp {
void matmul(const double* A, const double* B, double* C, int M, int K, int N, bool acc = false);
void matmul_nt(const double* A, const double* B, double* C, int M, int D, int N, bool acc = false);
void matmul_tn(const double* A, const double* B, double* C, int P, int M, int N, bool acc = false);
void gelu(const double* x, double* y, std::size_t n);
void softmax_rows(const double* x, double* y, int rows, int cols);
void log_softmax_rows(const double* x, double* y, int rows, int cols);
void layernorm_rows(const double* x, const double* g, const double* b, double* y, double* stats,
                    int rows, int cols, double eps);
}  // namespace openmp

}  // namespace trojanlab::kernels
