#include <cmath>
#include <vector>

#include <doctest.h>

#include "trojanlab/rng.hpp"
#include "trojanlab/tape.hpp"

using namespace trojanlab;

namespace {

Tensor random_tensor(int rows, int cols, Rng& rng, double scale = 1.0) {
  Tensor t(rows, cols);
  for (double& x : t.data) x = rng.normal() * scale;
  return t;
}

// Reduce an arbitrary node to a scalar so every op can be FD-checked through
// the same harness: loss = sum of softplus-free square mapping sum(v*v).
int to_scalar(Tape& tape, int node) {
  const int sq = tape.mul(node, node);
  const Tensor& v = tape.value(sq);
  Tensor ones_t(v.cols, 1);
  for (double& x : ones_t.data) x = 1.0;
  const int ones = tape.leaf(std::move(ones_t));
  const int colsum = tape.matmul(sq, ones);  // rows x 1
  Tensor onesr_t(1, v.rows);
  for (double& x : onesr_t.data) x = 1.0;
  const int onesr = tape.leaf(std::move(onesr_t));
  return tape.matmul(onesr, colsum);  // 1x1
}

void expect_ok(const FdCheckResult& r, double tol = 1e-6) {
  CHECK(r.n_checked > 0);
  CHECK(r.max_rel_err < tol);
}

}  // namespace

TEST_SUITE("tape") {

TEST_CASE("every primitive passes a finite difference check") {
  Rng rng(11);

  SUBCASE("matmul") {
    expect_ok(finite_diff_check(
        {random_tensor(3, 4, rng), random_tensor(4, 5, rng)},
        [](Tape& t, const std::vector<Tensor>& vs) {
          const int a = t.leaf(vs[0], true), b = t.leaf(vs[1], true);
          return std::make_pair(to_scalar(t, t.matmul(a, b)), std::vector<int>{a, b});
        }));
  }
  SUBCASE("matmul_nt") {
    expect_ok(finite_diff_check(
        {random_tensor(3, 4, rng), random_tensor(5, 4, rng)},
        [](Tape& t, const std::vector<Tensor>& vs) {
          const int a = t.leaf(vs[0], true), b = t.leaf(vs[1], true);
          return std::make_pair(to_scalar(t, t.matmul_nt(a, b)), std::vector<int>{a, b});
        }));
  }
  SUBCASE("add and mul and scale") {
    expect_ok(finite_diff_check(
        {random_tensor(4, 6, rng), random_tensor(4, 6, rng)},
        [](Tape& t, const std::vector<Tensor>& vs) {
          const int a = t.leaf(vs[0], true), b = t.leaf(vs[1], true);
          const int s = t.scale(t.mul(t.add(a, b), b), 0.7);
          return std::make_pair(to_scalar(t, s), std::vector<int>{a, b});
        }));
  }
  SUBCASE("add_bias") {
    expect_ok(finite_diff_check(
        {random_tensor(4, 6, rng), random_tensor(1, 6, rng)},
        [](Tape& t, const std::vector<Tensor>& vs) {
          const int a = t.leaf(vs[0], true), b = t.leaf(vs[1], true);
          return std::make_pair(to_scalar(t, t.add_bias(a, b)), std::vector<int>{a, b});
        }));
  }
  SUBCASE("softmax_rows") {
    expect_ok(finite_diff_check(
        {random_tensor(3, 7, rng)}, [](Tape& t, const std::vector<Tensor>& vs) {
          const int a = t.leaf(vs[0], true);
          return std::make_pair(to_scalar(t, t.softmax_rows(a)), std::vector<int>{a});
        }));
  }
  SUBCASE("log_softmax_rows") {
    expect_ok(finite_diff_check(
        {random_tensor(3, 7, rng)}, [](Tape& t, const std::vector<Tensor>& vs) {
          const int a = t.leaf(vs[0], true);
          return std::make_pair(to_scalar(t, t.log_softmax_rows(a)), std::vector<int>{a});
        }));
  }
  SUBCASE("layernorm_rows") {
    expect_ok(finite_diff_check(
        {random_tensor(3, 8, rng), random_tensor(1, 8, rng), random_tensor(1, 8, rng)},
        [](Tape& t, const std::vector<Tensor>& vs) {
          const int x = t.leaf(vs[0], true);
          const int g = t.leaf(vs[1], true);
          const int b = t.leaf(vs[2], true);
          return std::make_pair(to_scalar(t, t.layernorm_rows(x, g, b, 1e-5)),
                                std::vector<int>{x, g, b});
        }));
  }
  SUBCASE("gelu") {
    expect_ok(finite_diff_check(
        {random_tensor(4, 5, rng)}, [](Tape& t, const std::vector<Tensor>& vs) {
          const int a = t.leaf(vs[0], true);
          return std::make_pair(to_scalar(t, t.gelu(a)), std::vector<int>{a});
        }));
  }
  SUBCASE("embedding_gather") {
    expect_ok(finite_diff_check(
        {random_tensor(6, 4, rng)}, [](Tape& t, const std::vector<Tensor>& vs) {
          const int table = t.leaf(vs[0], true);
          const int g = t.embedding_gather(table, {1, 3, 3, 0, 5});
          return std::make_pair(to_scalar(t, g), std::vector<int>{table});
        }));
  }
  SUBCASE("concat_rows") {
    expect_ok(finite_diff_check(
        {random_tensor(2, 5, rng), random_tensor(3, 5, rng)},
        [](Tape& t, const std::vector<Tensor>& vs) {
          const int a = t.leaf(vs[0], true), b = t.leaf(vs[1], true);
          return std::make_pair(to_scalar(t, t.concat_rows({a, b})), std::vector<int>{a, b});
        }));
  }
  SUBCASE("cross_entropy") {
    expect_ok(finite_diff_check(
        {random_tensor(4, 9, rng)}, [](Tape& t, const std::vector<Tensor>& vs) {
          const int logits = t.leaf(vs[0], true);
          const int loss = t.cross_entropy(logits, {{0, 2}, {1, 7}, {3, 0}});
          return std::make_pair(loss, std::vector<int>{logits});
        }));
  }
  SUBCASE("soft_cross_entropy both inputs") {
    Rng local(12);
    Tensor logits = random_tensor(3, 6, local);
    Tensor targets(3, 6);
    for (int r = 0; r < 3; ++r) {
      double s = 0.0;
      for (int c = 0; c < 6; ++c) {
        targets.at(r, c) = std::abs(local.normal()) + 0.1;
        s += targets.at(r, c);
      }
      for (int c = 0; c < 6; ++c) targets.at(r, c) /= s;
    }
    expect_ok(finite_diff_check(
        {logits, targets}, [](Tape& t, const std::vector<Tensor>& vs) {
          const int l = t.leaf(vs[0], true), p = t.leaf(vs[1], true);
          return std::make_pair(t.soft_cross_entropy(l, p), std::vector<int>{l, p});
        }));
  }
}

TEST_CASE("cross-entropy gradient at uniform logits is p - onehot") {
  // 1x4 zero logits, label 0: softmax is 0.25 everywhere, so the gradient
  // must be [-0.75, 0.25, 0.25, 0.25].
  Tape tape;
  const int logits = tape.leaf(Tensor(1, 4), true);
  const int loss = tape.cross_entropy(logits, {{0, 0}});
  CHECK(tape.value(loss).data[0] == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  const auto adj = tape.backward(loss);
  const Tensor& g = adj[static_cast<std::size_t>(logits)];
  CHECK(g.at(0, 0) == doctest::Approx(-0.75).epsilon(1e-12));
  CHECK(g.at(0, 1) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(g.at(0, 2) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(g.at(0, 3) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("gradients accumulate across fan-out") {
  // loss = sum((a + a) * a): d/da = 4a elementwise via product and fan-out.
  Tape tape;
  Tensor init(1, 3);
  init.data = {1.0, -2.0, 0.5};
  const int a = tape.leaf(init, true);
  const int s = tape.mul(tape.add(a, a), a);
  Tensor ones(3, 1);
  for (double& x : ones.data) x = 1.0;
  const int loss = tape.matmul(s, tape.leaf(std::move(ones)));
  const auto adj = tape.backward(loss);
  const Tensor& g = adj[static_cast<std::size_t>(a)];
  for (int c = 0; c < 3; ++c)
    CHECK(g.at(0, c) == doctest::Approx(4.0 * init.at(0, c)).epsilon(1e-12));
}

TEST_CASE("backward skips subgraphs that do not require grad") {
  Tape tape;
  Tensor a_val(1, 2);
  a_val.data = {2.0, 3.0};
  const int a = tape.leaf(a_val, false);
  const int b = tape.leaf(a_val, true);
  const int prod = tape.mul(a, b);
  Tensor ones(2, 1);
  for (double& x : ones.data) x = 1.0;
  const int loss = tape.matmul(prod, tape.leaf(std::move(ones)));
  const auto adj = tape.backward(loss);
  CHECK(adj[static_cast<std::size_t>(a)].data.empty());
  CHECK(adj[static_cast<std::size_t>(b)].data.size() == 2);
}

TEST_CASE("finite_diff_check_fn accepts a correct gradient and rejects a wrong one") {
  // f(x) = sum(x^2), grad = 2x
  Tensor point(1, 5);
  Rng rng(7);
  for (double& x : point.data) x = rng.normal();
  const auto f = [](const Tensor& t) {
    double s = 0.0;
    for (double x : t.data) s += x * x;
    return s;
  };
  Tensor good(1, 5), bad(1, 5);
  for (int i = 0; i < 5; ++i) {
    good.data[static_cast<std::size_t>(i)] = 2.0 * point.data[static_cast<std::size_t>(i)];
    bad.data[static_cast<std::size_t>(i)] = 2.0 * point.data[static_cast<std::size_t>(i)] + 0.3;
  }
  CHECK(finite_diff_check_fn(f, good, point).max_rel_err < 1e-6);
  CHECK(finite_diff_check_fn(f, bad, point).max_rel_err > 1e-2);
}

}  // TEST_SUITE
