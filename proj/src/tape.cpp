#include "trojanlab/tape.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>

#include "trojanlab/kernels.hpp"
#include "trojanlab/rng.hpp"

namespace trojanlab {

namespace K = kernels;

int Tape::check(int id) const {
  if (id < 0 || id >= static_cast<int>(nodes_.size()))
    throw std::out_of_range("Tape: bad node id " + std::to_string(id));
  return id;
}

int Tape::push(Node n) {
  for (int in : n.inputs) n.requires_grad = n.requires_grad || nodes_[check(in)].requires_grad;
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

int Tape::leaf(Tensor t, bool requires_grad) {
  Node n;
  n.kind = OpKind::leaf;
  n.requires_grad = requires_grad;
  n.value = std::move(t);
  return push(std::move(n));
}

int Tape::matmul(int a, int b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (A.cols != B.rows) throw std::invalid_argument("matmul: inner dims differ");
  Node n;
  n.kind = OpKind::matmul;
  n.inputs = {a, b};
  n.value = Tensor(A.rows, B.cols);
  K::matmul(A.data.data(), B.data.data(), n.value.data.data(), A.rows, A.cols, B.cols);
  return push(std::move(n));
}

int Tape::matmul_nt(int a, int b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (A.cols != B.cols) throw std::invalid_argument("matmul_nt: inner dims differ");
  Node n;
  n.kind = OpKind::matmul_nt;
  n.inputs = {a, b};
  n.value = Tensor(A.rows, B.rows);
  K::matmul_nt(A.data.data(), B.data.data(), n.value.data.data(), A.rows, A.cols, B.rows);
  return push(std::move(n));
}

int Tape::add(int a, int b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (!A.same_shape(B)) throw std::invalid_argument("add: shape mismatch");
  Node n;
  n.kind = OpKind::add;
  n.inputs = {a, b};
  n.value = Tensor(A.rows, A.cols);
  K::add(A.data.data(), B.data.data(), n.value.data.data(), A.numel());
  return push(std::move(n));
}

int Tape::add_bias(int a, int bias) {
  const Tensor& A = value(a);
  const Tensor& B = value(bias);
  if (B.rows != 1 || B.cols != A.cols) throw std::invalid_argument("add_bias: bias must be 1xN");
  Node n;
  n.kind = OpKind::add_bias;
  n.inputs = {a, bias};
  n.value = Tensor(A.rows, A.cols);
  for (int r = 0; r < A.rows; ++r)
    K::add(A.row_ptr(r), B.data.data(), n.value.row_ptr(r), static_cast<std::size_t>(A.cols));
  return push(std::move(n));
}

int Tape::mul(int a, int b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (!A.same_shape(B)) throw std::invalid_argument("mul: shape mismatch");
  Node n;
  n.kind = OpKind::mul;
  n.inputs = {a, b};
  n.value = Tensor(A.rows, A.cols);
  K::mul(A.data.data(), B.data.data(), n.value.data.data(), A.numel());
  return push(std::move(n));
}

int Tape::scale(int a, double c) {
  const Tensor& A = value(a);
  Node n;
  n.kind = OpKind::scale;
  n.inputs = {a};
  n.scalar = c;
  n.value = Tensor(A.rows, A.cols);
  K::scale(A.data.data(), c, n.value.data.data(), A.numel());
  return push(std::move(n));
}

int Tape::softmax_rows(int a) {
  const Tensor& A = value(a);
  Node n;
  n.kind = OpKind::softmax_rows;
  n.inputs = {a};
  n.value = Tensor(A.rows, A.cols);
  K::softmax_rows(A.data.data(), n.value.data.data(), A.rows, A.cols);
  return push(std::move(n));
}

int Tape::log_softmax_rows(int a) {
  const Tensor& A = value(a);
  Node n;
  n.kind = OpKind::log_softmax_rows;
  n.inputs = {a};
  n.value = Tensor(A.rows, A.cols);
  K::log_softmax_rows(A.data.data(), n.value.data.data(), A.rows, A.cols);
  return push(std::move(n));
}

int Tape::layernorm_rows(int x, int gain, int bias, double eps) {
  const Tensor& X = value(x);
  const Tensor& G = value(gain);
  const Tensor& B = value(bias);
  if (G.rows != 1 || G.cols != X.cols || B.rows != 1 || B.cols != X.cols)
    throw std::invalid_argument("layernorm_rows: gain/bias must be 1xN");
  Node n;
  n.kind = OpKind::layernorm_rows;
  n.inputs = {x, gain, bias};
  n.scalar = eps;
  n.value = Tensor(X.rows, X.cols);
  n.stats = Tensor(X.rows, 2);
  K::layernorm_rows(X.data.data(), G.data.data(), B.data.data(), n.value.data.data(),
                    n.stats.data.data(), X.rows, X.cols, eps);
  return push(std::move(n));
}

int Tape::gelu(int a) {
  const Tensor& A = value(a);
  Node n;
  n.kind = OpKind::gelu;
  n.inputs = {a};
  n.value = Tensor(A.rows, A.cols);
  K::gelu(A.data.data(), n.value.data.data(), A.numel());
  return push(std::move(n));
}

int Tape::embedding_gather(int table, const std::vector<int>& ids) {
  const Tensor& T = value(table);
  Node n;
  n.kind = OpKind::embedding_gather;
  n.inputs = {table};
  n.idata = ids;
  n.value = Tensor(static_cast<int>(ids.size()), T.cols);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    const int id = ids[r];
    if (id < 0 || id >= T.rows)
      throw std::out_of_range("embedding_gather: id " + std::to_string(id) + " out of range");
    std::memcpy(n.value.row_ptr(static_cast<int>(r)), T.row_ptr(id),
                sizeof(double) * static_cast<std::size_t>(T.cols));
  }
  return push(std::move(n));
}

int Tape::concat_rows(const std::vector<int>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  int rows = 0;
  const int cols = value(parts[0]).cols;
  for (int p : parts) {
    if (value(p).cols != cols) throw std::invalid_argument("concat_rows: column mismatch");
    rows += value(p).rows;
  }
  Node n;
  n.kind = OpKind::concat_rows;
  n.inputs = parts;
  n.value = Tensor(rows, cols);
  int at = 0;
  for (int p : parts) {
    const Tensor& P = value(p);
    std::memcpy(n.value.row_ptr(at), P.data.data(), sizeof(double) * P.numel());
    at += P.rows;
  }
  return push(std::move(n));
}

int Tape::cross_entropy(int logits, const std::vector<std::pair<int, int>>& slots) {
  const Tensor& L = value(logits);
  Node n;
  n.kind = OpKind::cross_entropy;
  n.inputs = {logits};
  n.stats = Tensor(L.rows, L.cols);
  K::log_softmax_rows(L.data.data(), n.stats.data.data(), L.rows, L.cols);
  double total = 0.0;
  n.idata.reserve(slots.size() * 2);
  for (auto [row, id] : slots) {
    if (row < 0 || row >= L.rows || id < 0 || id >= L.cols)
      throw std::out_of_range("cross_entropy: slot out of range");
    total -= n.stats.at(row, id);
    n.idata.push_back(row);
    n.idata.push_back(id);
  }
  n.value = Tensor::scalar(total);
  return push(std::move(n));
}

int Tape::soft_cross_entropy(int logits, int targets) {
  const Tensor& L = value(logits);
  const Tensor& T = value(targets);
  if (!L.same_shape(T)) throw std::invalid_argument("soft_cross_entropy: shape mismatch");
  Node n;
  n.kind = OpKind::soft_cross_entropy;
  n.inputs = {logits, targets};
  n.stats = Tensor(L.rows, L.cols);
  K::log_softmax_rows(L.data.data(), n.stats.data.data(), L.rows, L.cols);
  double total = 0.0;
  for (std::size_t i = 0; i < L.numel(); ++i) total -= T.data[i] * n.stats.data[i];
  n.value = Tensor::scalar(total);
  return push(std::move(n));
}

std::vector<Tensor> Tape::backward(int loss) const {
  check(loss);
  const Tensor& lv = nodes_[loss].value;
  if (lv.rows != 1 || lv.cols != 1) throw std::invalid_argument("backward: loss must be 1x1");
  std::vector<Tensor> adj(nodes_.size());
  adj[loss] = Tensor::scalar(1.0);

  auto grad_of = [&](int id) -> Tensor& {
    if (adj[id].numel() == 0) adj[id] = Tensor(nodes_[id].value.rows, nodes_[id].value.cols);
    return adj[id];
  };
  auto wants = [&](int id) { return nodes_[id].requires_grad; };

  for (int i = loss; i >= 0; --i) {
    const Node& n = nodes_[i];
    if (adj[i].numel() == 0 || !n.requires_grad || n.kind == OpKind::leaf) continue;
    const Tensor& dy = adj[i];
    switch (n.kind) {
      case OpKind::matmul: {
        const int a = n.inputs[0], b = n.inputs[1];
        const Tensor& A = nodes_[a].value;
        const Tensor& B = nodes_[b].value;
        if (wants(a))
          K::matmul_nt(dy.data.data(), B.data.data(), grad_of(a).data.data(), A.rows, B.cols,
                       B.rows, true);
        if (wants(b))
          K::matmul_tn(A.data.data(), dy.data.data(), grad_of(b).data.data(), A.rows, A.cols,
                       B.cols, true);
        break;
      }
      case OpKind::matmul_nt: {
        const int a = n.inputs[0], b = n.inputs[1];
        const Tensor& A = nodes_[a].value;
        const Tensor& B = nodes_[b].value;
        if (wants(a))
          K::matmul(dy.data.data(), B.data.data(), grad_of(a).data.data(), A.rows, B.rows, B.cols,
                    true);
        if (wants(b))
          K::matmul_tn(dy.data.data(), A.data.data(), grad_of(b).data.data(), A.rows, B.rows,
                       A.cols, true);
        break;
      }
      case OpKind::add: {
        for (int in : n.inputs)
          if (wants(in)) K::axpy(1.0, dy.data.data(), grad_of(in).data.data(), dy.numel());
        break;
      }
      case OpKind::add_bias: {
        const int a = n.inputs[0], b = n.inputs[1];
        if (wants(a)) K::axpy(1.0, dy.data.data(), grad_of(a).data.data(), dy.numel());
        if (wants(b)) {
          Tensor& db = grad_of(b);
          for (int r = 0; r < dy.rows; ++r)
            K::axpy(1.0, dy.row_ptr(r), db.data.data(), static_cast<std::size_t>(dy.cols));
        }
        break;
      }
      case OpKind::mul: {
        const int a = n.inputs[0], b = n.inputs[1];
        const Tensor& A = nodes_[a].value;
        const Tensor& B = nodes_[b].value;
        if (wants(a)) {
          Tensor& da = grad_of(a);
          for (std::size_t k = 0; k < dy.numel(); ++k) da.data[k] += dy.data[k] * B.data[k];
        }
        if (wants(b)) {
          Tensor& db = grad_of(b);
          for (std::size_t k = 0; k < dy.numel(); ++k) db.data[k] += dy.data[k] * A.data[k];
        }
        break;
      }
      case OpKind::scale: {
        const int a = n.inputs[0];
        if (wants(a)) K::axpy(n.scalar, dy.data.data(), grad_of(a).data.data(), dy.numel());
        break;
      }
      case OpKind::softmax_rows: {
        const int a = n.inputs[0];
        if (wants(a))
          K::softmax_rows_grad(n.value.data.data(), dy.data.data(), grad_of(a).data.data(),
                               dy.rows, dy.cols);
        break;
      }
      case OpKind::log_softmax_rows: {
        const int a = n.inputs[0];
        if (wants(a))
          K::log_softmax_rows_grad(n.value.data.data(), dy.data.data(), grad_of(a).data.data(),
                                   dy.rows, dy.cols);
        break;
      }
      case OpKind::layernorm_rows: {
        const int x = n.inputs[0], g = n.inputs[1], b = n.inputs[2];
        const Tensor& X = nodes_[x].value;
        const Tensor& G = nodes_[g].value;
        Tensor dx_scratch, dg_scratch, db_scratch;
        double* dxp;
        if (wants(x)) {
          dxp = grad_of(x).data.data();
        } else {
          dx_scratch = Tensor(X.rows, X.cols);
          dxp = dx_scratch.data.data();
        }
        double* dgp;
        if (wants(g)) {
          dgp = grad_of(g).data.data();
        } else {
          dg_scratch = Tensor(1, X.cols);
          dgp = dg_scratch.data.data();
        }
        double* dbp;
        if (wants(b)) {
          dbp = grad_of(b).data.data();
        } else {
          db_scratch = Tensor(1, X.cols);
          dbp = db_scratch.data.data();
        }
        K::layernorm_rows_grad(X.data.data(), G.data.data(), n.stats.data.data(), dy.data.data(),
                               dxp, dgp, dbp, X.rows, X.cols);
        break;
      }
      case OpKind::gelu: {
        const int a = n.inputs[0];
        if (wants(a))
          K::gelu_grad(nodes_[a].value.data.data(), dy.data.data(), grad_of(a).data.data(),
                       dy.numel());
        break;
      }
      case OpKind::embedding_gather: {
        const int t = n.inputs[0];
        if (wants(t)) {
          Tensor& dt = grad_of(t);
          for (std::size_t r = 0; r < n.idata.size(); ++r)
            K::axpy(1.0, dy.row_ptr(static_cast<int>(r)), dt.row_ptr(n.idata[r]),
                    static_cast<std::size_t>(dy.cols));
        }
        break;
      }
      case OpKind::concat_rows: {
        int at = 0;
        for (int p : n.inputs) {
          const Tensor& P = nodes_[p].value;
          if (wants(p))
            K::axpy(1.0, dy.row_ptr(at), grad_of(p).data.data(), P.numel());
          at += P.rows;
        }
        break;
      }
      case OpKind::cross_entropy: {
        const int l = n.inputs[0];
        if (wants(l)) {
          Tensor& dl = grad_of(l);
          const double d = dy.data[0];
          for (std::size_t s = 0; s + 1 < n.idata.size(); s += 2) {
            const int row = n.idata[s];
            const int id = n.idata[s + 1];
            double* dr = dl.row_ptr(row);
            const double* ls = n.stats.row_ptr(row);
            for (int j = 0; j < dl.cols; ++j) dr[j] += d * std::exp(ls[j]);
            dr[id] -= d;
          }
        }
        break;
      }
      case OpKind::soft_cross_entropy: {
        const int l = n.inputs[0], t = n.inputs[1];
        const Tensor& T = nodes_[t].value;
        const double d = dy.data[0];
        if (wants(l)) {
          Tensor& dl = grad_of(l);
          for (int r = 0; r < T.rows; ++r) {
            const double* tr = T.row_ptr(r);
            const double* ls = n.stats.row_ptr(r);
            double* dr = dl.row_ptr(r);
            double tsum = 0.0;
            for (int j = 0; j < T.cols; ++j) tsum += tr[j];
            for (int j = 0; j < T.cols; ++j) dr[j] += d * (std::exp(ls[j]) * tsum - tr[j]);
          }
        }
        if (wants(t)) {
          Tensor& dt = grad_of(t);
          for (std::size_t k = 0; k < T.numel(); ++k)
            dt.data[k] -= d * n.stats.data[k];
        }
        break;
      }
      case OpKind::leaf:
        break;
    }
  }
  return adj;
}

namespace {

std::vector<std::size_t> pick_coords(std::size_t n, std::size_t want, Rng& rng) {
  std::vector<std::size_t> coords;
  if (want == 0 || want >= n) {
    coords.resize(n);
    for (std::size_t k = 0; k < n; ++k) coords[k] = k;
  } else {
    auto picked = rng.sample_without_replacement(static_cast<int>(n), static_cast<int>(want));
    coords.assign(picked.begin(), picked.end());
  }
  return coords;
}

void fd_accumulate(const std::function<double(std::size_t, double)>& eval_with,
                   const Tensor& point, const Tensor& grad,
                   const std::vector<std::size_t>& coords, double h, FdCheckResult& res) {
  for (std::size_t k : coords) {
    const double x0 = point.data[k];
    const double step = h * (1.0 + std::fabs(x0));
    const double fp = eval_with(k, x0 + step);
    const double fm = eval_with(k, x0 - step);
    const double fd = (fp - fm) / (2.0 * step);
    const double an = grad.data[k];
    const double abs_err = std::fabs(fd - an);
    const double rel = abs_err / std::max(1e-8, std::fabs(fd));
    res.max_abs_err = std::max(res.max_abs_err, abs_err);
    res.max_rel_err = std::max(res.max_rel_err, rel);
    ++res.n_checked;
  }
}

}  // namespace

FdCheckResult finite_diff_check(const std::vector<Tensor>& inits, const GraphBuilder& build,
                                std::size_t max_coords_per_leaf, double h, std::uint64_t seed) {
  Tape tape;
  auto [loss, leaf_ids] = build(tape, inits);
  auto adj = tape.backward(loss);

  FdCheckResult res;
  Rng rng(seed);
  for (std::size_t li = 0; li < inits.size(); ++li) {
    const Tensor& g = adj[leaf_ids[li]];
    if (g.numel() == 0) continue;
    auto coords = pick_coords(inits[li].numel(), max_coords_per_leaf, rng);
    auto eval_with = [&](std::size_t k, double v) {
      std::vector<Tensor> pt = inits;
      pt[li].data[k] = v;
      Tape t2;
      auto [l2, ids2] = build(t2, pt);
      (void)ids2;
      return t2.value(l2).data[0];
    };
    fd_accumulate(eval_with, inits[li], g, coords, h, res);
  }
  return res;
}

FdCheckResult finite_diff_check_fn(const std::function<double(const Tensor&)>& f,
                                   const Tensor& analytic_grad, const Tensor& point,
                                   std::size_t max_coords, double h, std::uint64_t seed) {
  FdCheckResult res;
  Rng rng(seed);
  auto coords = pick_coords(point.numel(), max_coords, rng);
  auto eval_with = [&](std::size_t k, double v) {
    Tensor pt = point;
    pt.data[k] = v;
    return f(pt);
  };
  fd_accumulate(eval_with, point, analytic_grad, coords, h, res);
  return res;
}

}  // namespace trojanlab
