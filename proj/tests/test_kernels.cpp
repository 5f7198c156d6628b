#include <cstring>
#include <vector>

#include <doctest.h>

#include "trojanlab/kernels.hpp"
#include "trojanlab/rng.hpp"

using namespace trojanlab;
namespace K = trojanlab::kernels;

namespace {

std::vector<double> random_vec(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

bool bit_equal(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

// Runs op once per backend into fresh buffers and compares bitwise.
template <typename Op>
void check_backends(std::size_t out_size, Op op) {
  std::vector<double> serial(out_size), omp(out_size);
  K::set_backend(K::Backend::serial);
  op(serial);
  K::set_backend(K::Backend::openmp);
  op(omp);
  CHECK(bit_equal(serial, omp));
}

struct BackendGuard {
  K::Backend saved = K::backend();
  ~BackendGuard() { K::set_backend(saved); }
};

}  // namespace

TEST_SUITE("kernels") {

TEST_CASE("matmul matches a hand-computed 2x2") {
  BackendGuard guard;
  const std::vector<double> A{1, 2, 3, 4}, B{5, 6, 7, 8};
  std::vector<double> C(4);
  K::matmul(A.data(), B.data(), C.data(), 2, 2, 2);
  CHECK(C == std::vector<double>{19, 22, 43, 50});

  K::matmul(A.data(), B.data(), C.data(), 2, 2, 2, true);
  CHECK(C == std::vector<double>{38, 44, 86, 100});
}

TEST_CASE("matmul_nt and matmul_tn agree with explicit transposition") {
  BackendGuard guard;
  Rng rng(1);
  const int M = 5, D = 7, N = 3;
  const auto A = random_vec(static_cast<std::size_t>(M) * D, rng);
  const auto B = random_vec(static_cast<std::size_t>(N) * D, rng);

  std::vector<double> Bt(static_cast<std::size_t>(D) * N);
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < D; ++j) Bt[static_cast<std::size_t>(j) * N + i] = B[static_cast<std::size_t>(i) * D + j];

  std::vector<double> via_nt(static_cast<std::size_t>(M) * N), via_mm(via_nt.size());
  K::matmul_nt(A.data(), B.data(), via_nt.data(), M, D, N);
  K::matmul(A.data(), Bt.data(), via_mm.data(), M, D, N);
  for (std::size_t i = 0; i < via_nt.size(); ++i) CHECK(via_nt[i] == doctest::Approx(via_mm[i]).epsilon(1e-12));

  // A^T @ A via tn vs building the transpose
  std::vector<double> At(static_cast<std::size_t>(D) * M);
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < D; ++j) At[static_cast<std::size_t>(j) * M + i] = A[static_cast<std::size_t>(i) * D + j];
  std::vector<double> via_tn(static_cast<std::size_t>(D) * D), direct(via_tn.size());
  K::matmul_tn(A.data(), A.data(), via_tn.data(), M, D, D);
  K::matmul(At.data(), A.data(), direct.data(), D, M, D);
  for (std::size_t i = 0; i < via_tn.size(); ++i) CHECK(via_tn[i] == doctest::Approx(direct[i]).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one and log variant is its log") {
  BackendGuard guard;
  Rng rng(2);
  const int rows = 6, cols = 17;
  const auto x = random_vec(static_cast<std::size_t>(rows) * cols, rng);
  std::vector<double> sm(x.size()), lsm(x.size());
  K::softmax_rows(x.data(), sm.data(), rows, cols);
  K::log_softmax_rows(x.data(), lsm.data(), rows, cols);
  for (int r = 0; r < rows; ++r) {
    double s = 0.0;
    for (int c = 0; c < cols; ++c) s += sm[static_cast<std::size_t>(r) * cols + c];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  for (std::size_t i = 0; i < x.size(); ++i)
    CHECK(std::log(sm[i]) == doctest::Approx(lsm[i]).epsilon(1e-9));
}

TEST_CASE("layernorm rows have zero mean and unit variance pre-affine") {
  BackendGuard guard;
  Rng rng(3);
  const int rows = 4, cols = 32;
  const auto x = random_vec(static_cast<std::size_t>(rows) * cols, rng);
  std::vector<double> g(static_cast<std::size_t>(cols), 1.0), b(static_cast<std::size_t>(cols), 0.0);
  std::vector<double> y(x.size()), stats(static_cast<std::size_t>(rows) * 2);
  K::layernorm_rows(x.data(), g.data(), b.data(), y.data(), stats.data(), rows, cols, 1e-5);
  for (int r = 0; r < rows; ++r) {
    double mean = 0.0, var = 0.0;
    for (int c = 0; c < cols; ++c) mean += y[static_cast<std::size_t>(r) * cols + c];
    mean /= cols;
    for (int c = 0; c < cols; ++c) {
      const double d = y[static_cast<std::size_t>(r) * cols + c] - mean;
      var += d * d;
    }
    var /= cols;
    CHECK(mean == doctest::Approx(0.0).epsilon(1e-10));
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("serial and openmp backends are bit-identical") {
  BackendGuard guard;
  Rng rng(4);
  const int M = 33, D2 = 48, N = 21;
  const auto A = random_vec(static_cast<std::size_t>(M) * D2, rng);
  const auto B = random_vec(static_cast<std::size_t>(D2) * N, rng);
  const auto Bn = random_vec(static_cast<std::size_t>(N) * D2, rng);
  const auto x = random_vec(static_cast<std::size_t>(M) * N, rng);
  const auto y = random_vec(x.size(), rng);

  check_backends(static_cast<std::size_t>(M) * N, [&](std::vector<double>& out) {
    K::matmul(A.data(), B.data(), out.data(), M, D2, N);
  });
  check_backends(static_cast<std::size_t>(M) * N, [&](std::vector<double>& out) {
    K::matmul_nt(A.data(), Bn.data(), out.data(), M, D2, N);
  });
  check_backends(static_cast<std::size_t>(D2) * N, [&](std::vector<double>& out) {
    K::matmul_tn(A.data(), x.data(), out.data(), M, D2, N);
  });
  check_backends(x.size(), [&](std::vector<double>& out) {
    K::softmax_rows(x.data(), out.data(), M, N);
  });
  check_backends(x.size(), [&](std::vector<double>& out) {
    K::log_softmax_rows(x.data(), out.data(), M, N);
  });
  check_backends(x.size(), [&](std::vector<double>& out) { K::gelu(x.data(), out.data(), x.size()); });
  check_backends(x.size(), [&](std::vector<double>& out) {
    std::fill(out.begin(), out.end(), 0.0);
    K::gelu_grad(x.data(), y.data(), out.data(), x.size());
  });
  check_backends(x.size(), [&](std::vector<double>& out) {
    K::add(x.data(), y.data(), out.data(), x.size());
  });
  check_backends(x.size(), [&](std::vector<double>& out) {
    K::mul(x.data(), y.data(), out.data(), x.size());
  });
  check_backends(x.size(), [&](std::vector<double>& out) {
    K::scale(x.data(), 1.7, out.data(), x.size());
  });
}

TEST_CASE("gelu matches reference values") {
  BackendGuard guard;
  // tanh-approximation values, frozen from an independent evaluation
  const std::vector<double> xs{-2.0, -1.0, 0.0, 0.5, 1.0, 3.0};
  const std::vector<double> expect{-0.0454023059, -0.1588080094, 0.0, 0.3457140098,
                                   0.8411919906,  2.9963626079};
  std::vector<double> y(xs.size());
  K::gelu(xs.data(), y.data(), xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i)
    CHECK(y[i] == doctest::Approx(expect[i]).epsilon(1e-9));
}

}  // TEST_SUITE
