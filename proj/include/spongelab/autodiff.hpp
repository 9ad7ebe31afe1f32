#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

#include "spongelab/tensor.hpp"

/// Define-by-run reverse-mode differentiation over dense 2-D (and scalar/vector)
/// tensors. Forward values are computed eagerly when an expression is built;
/// `gradient` walks the recorded graph once in reverse topological order.
namespace spongelab::ad {

struct Node;

/// Handle to a node in an expression graph. Copies share the node.
class Expr {
 public:
  Expr() = default;
  explicit Expr(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Tensor& value() const;
  const Shape& shape() const;
  bool requires_grad() const;
  bool is_leaf() const;
  std::string_view op() const;
  const Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

/// Backward rule: receives the gradient of the node's output and one
/// accumulation buffer per parent (null when that parent needs no gradient).
using BackwardFn =
    std::function<void(std::span<const double> grad_out, std::span<double* const> grad_in)>;

struct Node {
  std::string_view op;
  std::vector<std::shared_ptr<Node>> parents;
  Tensor value;
  bool requires_grad = false;
  BackwardFn backward;
};

/// Leaf that never receives gradients.
Expr constant(Tensor value);
/// Differentiable leaf.
Expr variable(Tensor value);

/// Forward value of `root`, after checking it is finite.
Tensor evaluate(const Expr& root);

/// Gradients of a scalar `loss` with respect to each leaf in `wrt`, in order.
/// Leaves that do not influence the loss get zeros.
std::vector<Tensor> gradient(const Expr& loss, std::span<const Expr> wrt);
Tensor gradient(const Expr& loss, const Expr& wrt);

/// Central-difference estimate (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate.
Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f,
                                  const Tensor& x, double h);

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)
double max_relative_error(const Tensor& a, const Tensor& b, double floor = 1e-8);

// ---- primitives -----------------------------------------------------------

Expr matmul(const Expr& a, const Expr& b);     // [m,k] x [k,n]
Expr matmul_nt(const Expr& a, const Expr& b);  // [m,k] x [n,k]^T
Expr add(const Expr& a, const Expr& b);
Expr add_row(const Expr& a, const Expr& row);  // [m,n] + [n]
Expr mul(const Expr& a, const Expr& b);
Expr mul_row(const Expr& a, const Expr& row);  // [m,n] * [n]
Expr scale(const Expr& a, double s);
Expr affine(const Expr& a, double s, double shift);  // s*a + shift
Expr embedding(const Expr& table, std::span<const int> ids);
Expr softmax_rows(const Expr& a);
Expr layer_norm_rows(const Expr& a, double eps = 1e-8);
Expr gelu(const Expr& a);
Expr cross_entropy_rows(const Expr& logits, std::span<const int> targets);
Expr sum(const Expr& a);
Expr mean(const Expr& a);
/// log(max(a, floor)); the gradient is zero where the floor is active.
Expr log(const Expr& a, double floor = 0.0);
/// Clamp to [lo, hi]; gradient passes only where lo <= a <= hi.
Expr clamp(const Expr& a, double lo, double hi);

Expr slice_rows(const Expr& a, std::size_t begin, std::size_t end);
Expr slice_cols(const Expr& a, std::size_t begin, std::size_t end);
Expr concat_rows(std::span<const Expr> parts);
Expr concat_cols(std::span<const Expr> parts);
Expr reshape(const Expr& a, Shape shape);
/// out.flat[k] = a.flat[indices[k]]
Expr gather(const Expr& a, std::span<const std::size_t> indices, Shape out_shape);

struct MapEntry {
  std::size_t out;
  std::size_t in;
  double weight;
};
/// Sparse linear map: out.flat[e.out] += e.weight * a.flat[e.in] for each entry.
Expr linear_map(const Expr& a, Shape out_shape, std::span<const MapEntry> entries);

}  // namespace spongelab::ad
