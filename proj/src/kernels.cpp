#include "trojanlab/kernels.hpp"

#include <omp.h>

#include <cmath>

namespace trojanlab::kernels {

namespace {

Backend g_backend = Backend::openmp;

// Per-row bodies shared by the serial and OpenMP variants. Keeping one body
// per row guarantees the accumulation order of every output element is the
// same no matter how rows are scheduled across threads.

inline void matmul_row(const double* a, const double* B, double* c, int K, int N, bool acc) {
  if (!acc) {
    for (int j = 0; j < N; ++j) c[j] = 0.0;
  }
  for (int k = 0; k < K; ++k) {
    const double av = a[k];
    const double* b = B + static_cast<std::size_t>(k) * N;
    for (int j = 0; j < N; ++j) c[j] += av * b[j];
  }
}

inline void matmul_nt_row(const double* a, const double* B, double* c, int D, int N, bool acc) {
  for (int j = 0; j < N; ++j) {
    const double* b = B + static_cast<std::size_t>(j) * D;
    double s = 0.0;
    for (int k = 0; k < D; ++k) s += a[k] * b[k];
    c[j] = acc ? c[j] + s : s;
  }
}

inline void matmul_tn_row(const double* A, const double* B, double* c, int P, int M, int N,
                          int i, bool acc) {
  if (!acc) {
    for (int j = 0; j < N; ++j) c[j] = 0.0;
  }
  for (int p = 0; p < P; ++p) {
    const double av = A[static_cast<std::size_t>(p) * M + i];
    const double* b = B + static_cast<std::size_t>(p) * N;
    for (int j = 0; j < N; ++j) c[j] += av * b[j];
  }
}

constexpr double kGeluCoef = 0.044715;
const double kSqrt2OverPi = std::sqrt(2.0 / 3.141592653589793);

inline double gelu_one(double x) {
  const double u = kSqrt2OverPi * (x + kGeluCoef * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_grad_one(double x) {
  const double u = kSqrt2OverPi * (x + kGeluCoef * x * x * x);
  const double t = std::tanh(u);
  const double du = kSqrt2OverPi * (1.0 + 3.0 * kGeluCoef * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

inline void softmax_row(const double* x, double* y, int cols) {
  double mx = x[0];
  for (int j = 1; j < cols; ++j) mx = x[j] > mx ? x[j] : mx;
  double sum = 0.0;
  for (int j = 0; j < cols; ++j) {
    y[j] = std::exp(x[j] - mx);
    sum += y[j];
  }
  const double inv = 1.0 / sum;
  for (int j = 0; j < cols; ++j) y[j] *= inv;
}

inline void log_softmax_row(const double* x, double* y, int cols) {
  double mx = x[0];
  for (int j = 1; j < cols; ++j) mx = x[j] > mx ? x[j] : mx;
  double sum = 0.0;
  for (int j = 0; j < cols; ++j) sum += std::exp(x[j] - mx);
  const double lse = mx + std::log(sum);
  for (int j = 0; j < cols; ++j) y[j] = x[j] - lse;
}

inline void layernorm_row(const double* x, const double* g, const double* b, double* y,
                          double* stats, int cols, double eps) {
  double mean = 0.0;
  for (int j = 0; j < cols; ++j) mean += x[j];
  mean /= cols;
  double var = 0.0;
  for (int j = 0; j < cols; ++j) {
    const double d = x[j] - mean;
    var += d * d;
  }
  var /= cols;
  const double rstd = 1.0 / std::sqrt(var + eps);
  stats[0] = mean;
  stats[1] = rstd;
  for (int j = 0; j < cols; ++j) y[j] = (x[j] - mean) * rstd * g[j] + b[j];
}

}  // namespace

Backend backend() { return g_backend; }
void set_backend(Backend b) { g_backend = b; }
int max_threads() { return omp_get_max_threads(); }

namespace serial {

void matmul(const double* A, const double* B, double* C, int M, int K, int N, bool acc) {
  for (int i = 0; i < M; ++i)
    matmul_row(A + static_cast<std::size_t>(i) * K, B, C + static_cast<std::size_t>(i) * N, K, N,
               acc);
}

void matmul_nt(const double* A, const double* B, double* C, int M, int D, int N, bool acc) {
  for (int i = 0; i < M; ++i)
    matmul_nt_row(A + static_cast<std::size_t>(i) * D, B, C + static_cast<std::size_t>(i) * N, D,
                  N, acc);
}

void matmul_tn(const double* A, const double* B, double* C, int P, int M, int N, bool acc) {
  for (int i = 0; i < M; ++i)
    matmul_tn_row(A, B, C + static_cast<std::size_t>(i) * N, P, M, N, i, acc);
}

void gelu(const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = gelu_one(x[i]);
}

void softmax_rows(const double* x, double* y, int rows, int cols) {
  for (int r = 0; r < rows; ++r)
    softmax_row(x + static_cast<std::size_t>(r) * cols, y + static_cast<std::size_t>(r) * cols,
                cols);
}

void log_softmax_rows(const double* x, double* y, int rows, int cols) {
  for (int r = 0; r < rows; ++r)
    log_softmax_row(x + static_cast<std::size_t>(r) * cols, y + static_cast<std::size_t>(r) * cols,
                    cols);
}

void layernorm_rows(const double* x, const double* g, const double* b, double* y, double* stats,
                    int rows, int cols, double eps) {
  for (int r = 0; r < rows; ++r)
    layernorm_row(x + static_cast<std::size_t>(r) * cols, g, b,
                  y + static_cast<std::size_t>(r) * cols, stats + 2 * r, cols, eps);
}

}  // namespace serial

namespace openmp {

void matmul(const double* A, const double* B, double* C, int M, int K, int N, bool acc) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < M; ++i)
    matmul_row(A + static_cast<std::size_t>(i) * K, B, C + static_cast<std::size_t>(i) * N, K, N,
               acc);
}

void matmul_nt(const double* A, const double* B, double* C, int M, int D, int N, bool acc) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < M; ++i)
    matmul_nt_row(A + static_cast<std::size_t>(i) * D, B, C + static_cast<std::size_t>(i) * N, D,
                  N, acc);
}

void matmul_tn(const double* A, const double* B, double* C, int P, int M, int N, bool acc) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < M; ++i)
    matmul_tn_row(A, B, C + static_cast<std::size_t>(i) * N, P, M, N, i, acc);
}

void gelu(const double* x, double* y, std::size_t n) {
#pragma omp parallel for schedule(static)
  for (long long i = 0; i < static_cast<long long>(n); ++i)
    y[i] = gelu_one(x[i]);
}

void softmax_rows(const double* x, double* y, int rows, int cols) {
#pragma omp parallel for schedule(static)
  for (int r = 0; r < rows; ++r)
    softmax_row(x + static_cast<std::size_t>(r) * cols, y + static_cast<std::size_t>(r) * cols,
                cols);
}

void log_softmax_rows(const double* x, double* y, int rows, int cols) {
#pragma omp parallel for schedule(static)
  for (int r = 0; r < rows; ++r)
    log_softmax_row(x + static_cast<std::size_t>(r) * cols, y + static_cast<std::size_t>(r) * cols,
                    cols);
}

void layernorm_rows(const double* x, const double* g, const double* b, double* y, double* stats,
                    int rows, int cols, double eps) {
#pragma omp parallel for schedule(static)
  for (int r = 0; r < rows; ++r)
    layernorm_row(x + static_cast<std::size_t>(r) * cols, g, b,
                  y + static_cast<std::size_t>(r) * cols, stats + 2 * r, cols, eps);
}

}  // namespace openmp

void matmul(const double* A, const double* B, double* C, int M, int K, int N, bool acc) {
  if (g_backend == Backend::openmp)
    openmp::matmul(A, B, C, M, K, N, acc);
  else
    serial::matmul(A, B, C, M, K, N, acc);
}

void matmul_nt(const double* A, const double* B, double* C, int M, int D, int N, bool acc) {
  if (g_backend == Backend::openmp)
    openmp::matmul_nt(A, B, C, M, D, N, acc);
  else
    serial::matmul_nt(A, B, C, M, D, N, acc);
}

void matmul_tn(const double* A, const double* B, double* C, int P, int M, int N, bool acc) {
  if (g_backend == Backend::openmp)
    openmp::matmul_tn(A, B, C, P, M, N, acc);
  else
    serial::matmul_tn(A, B, C, P, M, N, acc);
}

void add(const double* a, const double* b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void mul(const double* a, const double* b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

void scale(const double* a, double c, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * c;
}

void axpy(double c, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += c * x[i];
}

void gelu(const double* x, double* y, std::size_t n) {
  if (g_backend == Backend::openmp)
    openmp::gelu(x, y, n);
  else
    serial::gelu(x, y, n);
}

void gelu_grad(const double* x, const double* dy, double* dx, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) dx[i] += dy[i] * gelu_grad_one(x[i]);
}

void softmax_rows(const double* x, double* y, int rows, int cols) {
  if (g_backend == Backend::openmp)
    openmp::softmax_rows(x, y, rows, cols);
  else
    serial::softmax_rows(x, y, rows, cols);
}

void log_softmax_rows(const double* x, double* y, int rows, int cols) {
  if (g_backend == Backend::openmp)
    openmp::log_softmax_rows(x, y, rows, cols);
  else
    serial::log_softmax_rows(x, y, rows, cols);
}

void softmax_rows_grad(const double* y, const double* dy, double* dx, int rows, int cols) {
  for (int r = 0; r < rows; ++r) {
    const double* yr = y + static_cast<std::size_t>(r) * cols;
    const double* dyr = dy + static_cast<std::size_t>(r) * cols;
    double* dxr = dx + static_cast<std::size_t>(r) * cols;
    double dot = 0.0;
    for (int j = 0; j < cols; ++j) dot += yr[j] * dyr[j];
    for (int j = 0; j < cols; ++j) dxr[j] += yr[j] * (dyr[j] - dot);
  }
}

void log_softmax_rows_grad(const double* y, const double* dy, double* dx, int rows, int cols) {
  for (int r = 0; r < rows; ++r) {
    const double* yr = y + static_cast<std::size_t>(r) * cols;
    const double* dyr = dy + static_cast<std::size_t>(r) * cols;
    double* dxr = dx + static_cast<std::size_t>(r) * cols;
    double sum = 0.0;
    for (int j = 0; j < cols; ++j) sum += dyr[j];
    for (int j = 0; j < cols; ++j) dxr[j] += dyr[j] - std::exp(yr[j]) * sum;
  }
}

void layernorm_rows(const double* x, const double* g, const double* b, double* y, double* stats,
                    int rows, int cols, double eps) {
  if (g_backend == Backend::openmp)
    openmp::layernorm_rows(x, g, b, y, stats, rows, cols, eps);
  else
    serial::layernorm_rows(x, g, b, y, stats, rows, cols, eps);
}

void layernorm_rows_grad(const double* x, const double* g, const double* stats, const double* dy,
                         double* dx, double* dg, double* db, int rows, int cols) {
  for (int r = 0; r < rows; ++r) {
    const double* xr = x + static_cast<std::size_t>(r) * cols;
    const double* dyr = dy + static_cast<std::size_t>(r) * cols;
    double* dxr = dx + static_cast<std::size_t>(r) * cols;
    const double mean = stats[2 * r];
    const double rstd = stats[2 * r + 1];
    double sum_dxhat = 0.0;
    double sum_dxhat_xhat = 0.0;
    for (int j = 0; j < cols; ++j) {
      const double xhat = (xr[j] - mean) * rstd;
      const double dxhat = dyr[j] * g[j];
      sum_dxhat += dxhat;
      sum_dxhat_xhat += dxhat * xhat;
      dg[j] += dyr[j] * xhat;
      db[j] += dyr[j];
    }
    const double inv_n = 1.0 / cols;
    for (int j = 0; j < cols; ++j) {
      const double xhat = (xr[j] - mean) * rstd;
      const double dxhat = dyr[j] * g[j];
      dxr[j] += rstd * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
    }
  }
}

}  // namespace trojanlab::kernels
