#include "spongelab/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <unordered_map>

#include "spongelab/error.hpp"

namespace spongelab::ad {

const Tensor& Expr::value() const { return node_->value; }
const Shape& Expr::shape() const { return node_->value.shape(); }
bool Expr::requires_grad() const { return node_->requires_grad; }
bool Expr::is_leaf() const { return node_->parents.empty(); }
std::string_view Expr::op() const { return node_->op; }

namespace {

const std::shared_ptr<Node>& handle(const Expr& e) {
  if (!e) throw Error("use of an empty expression");
  return e.shared();
}

Expr make(std::string_view op, std::vector<Expr> parents, std::vector<double> data, Shape shape,
          BackwardFn backward) {
  auto node = std::make_shared<Node>();
  node->op = op;
  node->value = Tensor(std::move(shape), std::move(data));
  if (!node->value.all_finite()) {
    throw NumericError("non-finite result in " + std::string(op));
  }
  for (const auto& p : parents) {
    node->parents.push_back(handle(p));
    node->requires_grad = node->requires_grad || p.requires_grad();
  }
  if (node->requires_grad) node->backward = std::move(backward);
  return Expr(std::move(node));
}

void require_rank(const Expr& a, std::size_t rank, std::string_view op) {
  if (a.value().rank() != rank) {
    throw ShapeError(std::string(op) + " expects rank " + std::to_string(rank) + ", got " +
                     shape_to_string(a.shape()));
  }
}

void require_same(const Expr& a, const Expr& b, std::string_view op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + " shape mismatch " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
}

// c[m,n] += a[m,k] * b[k,n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c[m,n] += a[m,k] * b[n,k]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  // Transposing b turns the dot products into row updates the compiler can
  // vectorize; each sum still accumulates over p in ascending order from zero.
  std::vector<double> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  std::vector<double> s(n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    std::fill(s.begin(), s.end(), 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = bt.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) s[j] += av * bp[j];
    }
    double* ci = c + i * n;
    for (std::size_t j = 0; j < n; ++j) ci[j] += s[j];
  }
}

// c[k,n] += a[m,k]^T * b[m,n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      double* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

std::pair<std::size_t, std::size_t> rows_cols(const Expr& a) {
  const auto& s = a.shape();
  if (s.size() == 2) return {s[0], s[1]};
  if (s.size() == 1) return {1, s[0]};
  throw ShapeError("expected a vector or matrix, got " + shape_to_string(s));
}

}  // namespace

Expr constant(Tensor value) {
  if (!value.all_finite()) throw NumericError("non-finite constant");
  auto node = std::make_shared<Node>();
  node->op = "constant";
  node->value = std::move(value);
  return Expr(std::move(node));
}

Expr variable(Tensor value) {
  if (!value.all_finite()) throw NumericError("non-finite variable");
  auto node = std::make_shared<Node>();
  node->op = "variable";
  node->value = std::move(value);
  node->requires_grad = true;
  return Expr(std::move(node));
}

Tensor evaluate(const Expr& root) {
  const Tensor& v = handle(root)->value;
  if (!v.all_finite()) throw NumericError("non-finite value at " + std::string(root.op()));
  return v;
}

std::vector<Tensor> gradient(const Expr& loss, std::span<const Expr> wrt) {
  const Node* root = handle(loss).get();
  if (root->value.size() != 1) {
    throw ShapeError("gradient requires a scalar loss, got " + shape_to_string(loss.shape()));
  }
  if (!root->value.all_finite()) throw NumericError("non-finite loss");
  for (const auto& w : wrt) {
    if (!w.is_leaf() || !w.requires_grad()) {
      throw ValidationError("gradient target must be a variable leaf");
    }
  }

  // Iterative DFS post-order over nodes that require grad; grey marks detect cycles.
  enum class Mark { grey, black };
  std::unordered_map<const Node*, Mark> marks;
  std::vector<const Node*> order;
  std::vector<std::pair<const Node*, std::size_t>> stack;
  if (root->requires_grad) {
    stack.emplace_back(root, 0);
    marks[root] = Mark::grey;
  }
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      const Node* parent = node->parents[next++].get();
      if (!parent->requires_grad) continue;
      auto it = marks.find(parent);
      if (it == marks.end()) {
        marks[parent] = Mark::grey;
        stack.emplace_back(parent, 0);
      } else if (it->second == Mark::grey) {
        throw Error("cycle detected in expression graph");
      }
    } else {
      marks[node] = Mark::black;
      order.push_back(node);
      stack.pop_back();
    }
  }

  std::unordered_map<const Node*, std::vector<double>> grads;
  grads.reserve(order.size());
  if (root->requires_grad) grads[root] = {1.0};

  std::vector<double*> parent_bufs;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const Node* node = *it;
    if (!node->backward) continue;
    if (!grads.contains(node)) continue;
    parent_bufs.assign(node->parents.size(), nullptr);
    for (std::size_t i = 0; i < node->parents.size(); ++i) {
      const Node* p = node->parents[i].get();
      if (!p->requires_grad) continue;
      auto& buf = grads[p];
      if (buf.empty()) buf.assign(p->value.size(), 0.0);
      parent_bufs[i] = buf.data();
    }
    const auto& gout = grads.at(node);
    node->backward(gout, parent_bufs);
  }

  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (const auto& w : wrt) {
    auto it = grads.find(w.node());
    if (it == grads.end() || it->second.empty()) {
      out.push_back(Tensor::zeros(w.shape()));
    } else {
      Tensor g(w.shape(), it->second);
      if (!g.all_finite()) throw NumericError("non-finite gradient");
      out.push_back(std::move(g));
    }
  }
  return out;
}

Tensor gradient(const Expr& loss, const Expr& wrt) {
  return std::move(gradient(loss, std::span<const Expr>(&wrt, 1)).front());
}

Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                                  double h) {
  if (!(h > 0.0)) throw ValidationError("finite-difference step must be positive");
  std::vector<double> probe = x.to_vector();
  std::vector<double> g(probe.size());
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(Tensor(x.shape(), probe));
    probe[i] = orig - h;
    const double fm = f(Tensor(x.shape(), probe));
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("non-finite function value at probe " + std::to_string(i));
    }
    g[i] = (fp - fm) / (2.0 * h);
  }
  return Tensor(x.shape(), std::move(g));
}

double max_relative_error(const Tensor& a, const Tensor& b, double floor) {
  if (a.shape() != b.shape()) throw ShapeError("max_relative_error shape mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

// ---- primitives -----------------------------------------------------------

Expr matmul(const Expr& a, const Expr& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ShapeError("matmul inner dimension mismatch " + shape_to_string(a.shape()) + " x " +
                     shape_to_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  gemm_nn(a.value().data().data(), b.value().data().data(), out.data(), m, k, n);
  Tensor av = a.value(), bv = b.value();
  return make("matmul", {a, b}, std::move(out), {m, n},
              [av, bv, m, k, n](std::span<const double> g, std::span<double* const> gi) {
                if (gi[0]) gemm_nt(g.data(), bv.data().data(), gi[0], m, n, k);
                if (gi[1]) gemm_tn(av.data().data(), g.data(), gi[1], m, k, n);
              });
}

Expr matmul_nt(const Expr& a, const Expr& b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  if (b.shape()[1] != k) {
    throw ShapeError("matmul_nt inner dimension mismatch " + shape_to_string(a.shape()) +
                     " x " + shape_to_string(b.shape()) + "^T");
  }
  std::vector<double> out(m * n, 0.0);
  gemm_nt(a.value().data().data(), b.value().data().data(), out.data(), m, k, n);
  Tensor av = a.value(), bv = b.value();
  return make("matmul_nt", {a, b}, std::move(out), {m, n},
              [av, bv, m, k, n](std::span<const double> g, std::span<double* const> gi) {
                if (gi[0]) gemm_nn(g.data(), bv.data().data(), gi[0], m, n, k);
                if (gi[1]) gemm_tn(g.data(), av.data().data(), gi[1], m, n, k);
              });
}

Expr add(const Expr& a, const Expr& b) {
  require_same(a, b, "add");
  const auto x = a.value().data(), y = b.value().data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return make("add", {a, b}, std::move(out), a.shape(),
              [](std::span<const double> g, std::span<double* const> gi) {
                for (double* buf : gi) {
                  if (!buf) continue;
                  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
                }
              });
}

Expr add_row(const Expr& a, const Expr& row) {
  const auto [m, n] = rows_cols(a);
  if (row.value().size() != n || row.value().rank() != 1) {
    throw ShapeError("add_row expects a row of length " + std::to_string(n) + ", got " +
                     shape_to_string(row.shape()));
  }
  const auto x = a.value().data(), r = row.value().data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] + r[j];
  return make("add_row", {a, row}, std::move(out), a.shape(),
              [m, n](std::span<const double> g, std::span<double* const> gi) {
                if (gi[0])
                  for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
                if (gi[1])
                  for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) gi[1][j] += g[i * n + j];
              });
}

Expr mul(const Expr& a, const Expr& b) {
  require_same(a, b, "mul");
  Tensor av = a.value(), bv = b.value();
  const auto x = av.data(), y = bv.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make("mul", {a, b}, std::move(out), a.shape(),
              [av, bv](std::span<const double> g, std::span<double* const> gi) {
                const auto x = av.data(), y = bv.data();
                if (gi[0])
                  for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] * y[i];
                if (gi[1])
                  for (std::size_t i = 0; i < g.size(); ++i) gi[1][i] += g[i] * x[i];
              });
}

Expr mul_row(const Expr& a, const Expr& row) {
  const auto [m, n] = rows_cols(a);
  if (row.value().size() != n || row.value().rank() != 1) {
    throw ShapeError("mul_row expects a row of length " + std::to_string(n));
  }
  Tensor av = a.value(), rv = row.value();
  const auto x = av.data(), r = rv.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] * r[j];
  return make("mul_row", {a, row}, std::move(out), a.shape(),
              [av, rv, m, n](std::span<const double> g, std::span<double* const> gi) {
                const auto x = av.data(), r = rv.data();
                for (std::size_t i = 0; i < m; ++i)
                  for (std::size_t j = 0; j < n; ++j) {
                    const double gv = g[i * n + j];
                    if (gi[0]) gi[0][i * n + j] += gv * r[j];
                    if (gi[1]) gi[1][j] += gv * x[i * n + j];
                  }
              });
}

Expr scale(const Expr& a, double s) { return affine(a, s, 0.0); }

Expr affine(const Expr& a, double s, double shift) {
  const auto x = a.value().data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * x[i] + shift;
  return make(shift == 0.0 ? "scale" : "affine", {a}, std::move(out), a.shape(),
              [s](std::span<const double> g, std::span<double* const> gi) {
                for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += s * g[i];
              });
}

Expr embedding(const Expr& table, std::span<const int> ids) {
  require_rank(table, 2, "embedding");
  const std::size_t vocab = table.shape()[0], d = table.shape()[1];
  std::vector<int> idx(ids.begin(), ids.end());
  std::vector<double> out(idx.size() * d);
  const auto t = table.value().data();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= vocab) {
      throw ValidationError("unknown token id " + std::to_string(idx[r]));
    }
    std::copy_n(t.begin() + static_cast<std::ptrdiff_t>(idx[r] * d), d, out.begin() + r * d);
  }
  return make("embedding", {table}, std::move(out), {idx.size(), d},
              [idx, d](std::span<const double> g, std::span<double* const> gi) {
                for (std::size_t r = 0; r < idx.size(); ++r)
                  for (std::size_t j = 0; j < d; ++j)
                    gi[0][static_cast<std::size_t>(idx[r]) * d + j] += g[r * d + j];
              });
}

Expr softmax_rows(const Expr& a) {
  const auto [m, n] = rows_cols(a);
  const auto x = a.value().data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = x.data() + i * n;
    double* oi = out.data() + i * n;
    const double mx = *std::max_element(xi, xi + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (oi[j] = std::exp(xi[j] - mx));
    for (std::size_t j = 0; j < n; ++j) oi[j] /= z;
  }
  Tensor pv(a.shape(), out);
  return make("softmax", {a}, std::move(out), a.shape(),
              [pv, m, n](std::span<const double> g, std::span<double* const> gi) {
                const auto p = pv.data();
                for (std::size_t i = 0; i < m; ++i) {
                  double dot = 0.0;
                  for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * p[i * n + j];
                  for (std::size_t j = 0; j < n; ++j)
                    gi[0][i * n + j] += p[i * n + j] * (g[i * n + j] - dot);
                }
              });
}

Expr layer_norm_rows(const Expr& a, double eps) {
  const auto [m, n] = rows_cols(a);
  const auto x = a.value().data();
  std::vector<double> out(m * n);
  std::vector<double> inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = x.data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xi[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = (xi[j] - mu) * inv_std[i];
  }
  Tensor yv(a.shape(), out);
  return make("layer_norm", {a}, std::move(out), a.shape(),
              [yv, inv_std, m, n](std::span<const double> g, std::span<double* const> gi) {
                const auto y = yv.data();
                const double dn = static_cast<double>(n);
                for (std::size_t i = 0; i < m; ++i) {
                  double gsum = 0.0, gy = 0.0;
                  for (std::size_t j = 0; j < n; ++j) {
                    gsum += g[i * n + j];
                    gy += g[i * n + j] * y[i * n + j];
                  }
                  for (std::size_t j = 0; j < n; ++j) {
                    gi[0][i * n + j] +=
                        inv_std[i] * (g[i * n + j] - gsum / dn - y[i * n + j] * gy / dn);
                  }
                }
              });
}

Expr gelu(const Expr& a) {
  const auto x = a.value().data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] / std::numbers::sqrt2));
  }
  Tensor xv = a.value();
  return make("gelu", {a}, std::move(out), a.shape(),
              [xv](std::span<const double> g, std::span<double* const> gi) {
                const auto x = xv.data();
                constexpr double inv_sqrt_2pi = 0.3989422804014327;
                for (std::size_t i = 0; i < g.size(); ++i) {
                  const double cdf = 0.5 * (1.0 + std::erf(x[i] / std::numbers::sqrt2));
                  const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x[i] * x[i]);
                  gi[0][i] += g[i] * (cdf + x[i] * pdf);
                }
              });
}

Expr cross_entropy_rows(const Expr& logits, std::span<const int> targets) {
  const auto [m, n] = rows_cols(logits);
  if (targets.size() != m) {
    throw ShapeError("cross_entropy_rows: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(m) + " rows");
  }
  std::vector<int> tgt(targets.begin(), targets.end());
  const auto x = logits.value().data();
  std::vector<double> probs(m * n), out(m);
  for (std::size_t i = 0; i < m; ++i) {
    if (tgt[i] < 0 || static_cast<std::size_t>(tgt[i]) >= n) {
      throw ValidationError("cross-entropy target out of range");
    }
    const double* xi = x.data() + i * n;
    const double mx = *std::max_element(xi, xi + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (probs[i * n + j] = std::exp(xi[j] - mx));
    for (std::size_t j = 0; j < n; ++j) probs[i * n + j] /= z;
    out[i] = std::log(z) + mx - xi[tgt[i]];
  }
  return make("cross_entropy", {logits}, std::move(out), {m},
              [probs = std::move(probs), tgt, n](std::span<const double> g,
                                                 std::span<double* const> gi) {
                for (std::size_t i = 0; i < tgt.size(); ++i) {
                  for (std::size_t j = 0; j < n; ++j) gi[0][i * n + j] += g[i] * probs[i * n + j];
                  gi[0][i * n + static_cast<std::size_t>(tgt[i])] -= g[i];
                }
              });
}

Expr sum(const Expr& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const std::size_t n = a.value().size();
  return make("sum", {a}, {s}, {},
              [n](std::span<const double> g, std::span<double* const> gi) {
                for (std::size_t i = 0; i < n; ++i) gi[0][i] += g[0];
              });
}

Expr mean(const Expr& a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Expr log(const Expr& a, double floor) {
  Tensor xv = a.value();
  const auto x = xv.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(std::max(x[i], floor));
  return make("log", {a}, std::move(out), a.shape(),
              [xv, floor](std::span<const double> g, std::span<double* const> gi) {
                const auto x = xv.data();
                for (std::size_t i = 0; i < g.size(); ++i)
                  if (x[i] > floor) gi[0][i] += g[i] / x[i];
              });
}

Expr clamp(const Expr& a, double lo, double hi) {
  Tensor xv = a.value();
  const auto x = xv.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(x[i], lo, hi);
  return make("clamp", {a}, std::move(out), a.shape(),
              [xv, lo, hi](std::span<const double> g, std::span<double* const> gi) {
                const auto x = xv.data();
                for (std::size_t i = 0; i < g.size(); ++i)
                  if (x[i] >= lo && x[i] <= hi) gi[0][i] += g[i];
              });
}

Expr slice_rows(const Expr& a, std::size_t begin, std::size_t end) {
  require_rank(a, 2, "slice_rows");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  if (begin > end || end > m) throw ShapeError("slice_rows range out of bounds");
  const auto x = a.value().data();
  std::vector<double> out(x.begin() + static_cast<std::ptrdiff_t>(begin * n),
                          x.begin() + static_cast<std::ptrdiff_t>(end * n));
  return make("slice_rows", {a}, std::move(out), {end - begin, n},
              [begin, n](std::span<const double> g, std::span<double* const> gi) {
                for (std::size_t i = 0; i < g.size(); ++i) gi[0][begin * n + i] += g[i];
              });
}

Expr slice_cols(const Expr& a, std::size_t begin, std::size_t end) {
  require_rank(a, 2, "slice_cols");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  if (begin > end || end > n) throw ShapeError("slice_cols range out of bounds");
  const std::size_t w = end - begin;
  const auto x = a.value().data();
  std::vector<double> out(m * w);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = x[i * n + begin + j];
  return make("slice_cols", {a}, std::move(out), {m, w},
              [m, n, w, begin](std::span<const double> g, std::span<double* const> gi) {
                for (std::size_t i = 0; i < m; ++i)
                  for (std::size_t j = 0; j < w; ++j) gi[0][i * n + begin + j] += g[i * w + j];
              });
}

Expr concat_rows(std::span<const Expr> parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  const std::size_t n = parts[0].shape().at(1);
  std::vector<Expr> parents;
  std::vector<std::size_t> offsets;
  std::vector<double> out;
  std::size_t rows = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_rows");
    if (p.shape()[1] != n) throw ShapeError("concat_rows column mismatch");
    offsets.push_back(out.size());
    const auto x = p.value().data();
    out.insert(out.end(), x.begin(), x.end());
    rows += p.shape()[0];
    parents.push_back(p);
  }
  offsets.push_back(out.size());
  return make("concat_rows", std::move(parents), std::move(out), {rows, n},
              [offsets](std::span<const double> g, std::span<double* const> gi) {
                for (std::size_t k = 0; k < gi.size(); ++k) {
                  if (!gi[k]) continue;
                  for (std::size_t i = offsets[k]; i < offsets[k + 1]; ++i)
                    gi[k][i - offsets[k]] += g[i];
                }
              });
}

Expr concat_cols(std::span<const Expr> parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  const std::size_t m = parts[0].shape().at(0);
  std::vector<std::size_t> widths, starts;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_cols");
    if (p.shape()[0] != m) throw ShapeError("concat_cols row mismatch");
    starts.push_back(total);
    widths.push_back(p.shape()[1]);
    total += p.shape()[1];
  }
  std::vector<double> out(m * total);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto x = parts[k].value().data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j)
        out[i * total + starts[k] + j] = x[i * widths[k] + j];
  }
  std::vector<Expr> parents(parts.begin(), parts.end());
  return make("concat_cols", std::move(parents), std::move(out), {m, total},
              [m, total, widths, starts](std::span<const double> g, std::span<double* const> gi) {
                for (std::size_t k = 0; k < gi.size(); ++k) {
                  if (!gi[k]) continue;
                  for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < widths[k]; ++j)
                      gi[k][i * widths[k] + j] += g[i * total + starts[k] + j];
                }
              });
}

Expr reshape(const Expr& a, Shape shape) {
  if (shape_size(shape) != a.value().size()) {
    throw ShapeError("cannot reshape " + shape_to_string(a.shape()) + " to " +
                     shape_to_string(shape));
  }
  return make("reshape", {a}, a.value().to_vector(), std::move(shape),
              [](std::span<const double> g, std::span<double* const> gi) {
                for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
              });
}

Expr gather(const Expr& a, std::span<const std::size_t> indices, Shape out_shape) {
  if (shape_size(out_shape) != indices.size()) {
    throw ShapeError("gather: index count does not match output shape");
  }
  const auto x = a.value().data();
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  std::vector<double> out(idx.size());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] >= x.size()) throw ShapeError("gather index out of range");
    out[k] = x[idx[k]];
  }
  return make("gather", {a}, std::move(out), std::move(out_shape),
              [idx](std::span<const double> g, std::span<double* const> gi) {
                for (std::size_t k = 0; k < idx.size(); ++k) gi[0][idx[k]] += g[k];
              });
}

Expr linear_map(const Expr& a, Shape out_shape, std::span<const MapEntry> entries) {
  const std::size_t n_out = shape_size(out_shape);
  const std::size_t n_in = a.value().size();
  auto map = std::make_shared<const std::vector<MapEntry>>(entries.begin(), entries.end());
  const auto x = a.value().data();
  std::vector<double> out(n_out, 0.0);
  for (const auto& e : *map) {
    if (e.out >= n_out || e.in >= n_in) throw ShapeError("linear_map entry out of range");
    out[e.out] += e.weight * x[e.in];
  }
  return make("linear_map", {a}, std::move(out), std::move(out_shape),
              [map](std::span<const double> g, std::span<double* const> gi) {
                for (const auto& e : *map) gi[0][e.in] += e.weight * g[e.out];
              });
}

}  // namespace spongelab::ad
