#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "pointcmp/tensor.hpp"

namespace pointcmp::ad {

// Reverse-mode tape over dense 2-D tensors. Graphs are built per batch and
// freed when the last Var goes out of scope; parameters are long-lived leaf
// nodes whose grads the optimizer consumes and zeroes.
struct Node {
  Tensor val;
  Tensor grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backfn;  // pulls this->grad, pushes into parents
  std::string name;

  void ensure_grad() {
    if (grad.numel() != val.numel()) grad = Tensor::zeros(val.rows(), val.cols());
  }
};

using Var = std::shared_ptr<Node>;

Var leaf(Tensor value, bool requires_grad = true, std::string name = "");
Var constant(Tensor value);

// Elementwise, same shape.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);

Var scale(const Var& a, double s);
Var add_const(const Var& a, double c);

Var matmul(const Var& a, const Var& b);     // a(m,k) * b(k,n)
Var matmul_nt(const Var& a, const Var& b);  // a(m,k) * b(n,k)^T

Var relu(const Var& a);
Var vexp(const Var& a);
Var vlog(const Var& a);
Var vsqrt(const Var& a);
Var square(const Var& a);
Var reciprocal(const Var& a);

Var sum_all(const Var& a);   // -> 1x1
Var mean_all(const Var& a);  // -> 1x1
Var sum_axis0(const Var& a); // (m,n) -> (1,n)
Var sum_axis1(const Var& a); // (m,n) -> (m,1)
Var max_axis0(const Var& a); // (m,n) -> (1,n), argmax routing
Var group_max_rows(const Var& a, int64_t group);  // (G*g,n) -> (G,n)

Var softmax_rows(const Var& a);
Var logsumexp_rows(const Var& a);  // (m,n) -> (m,1), shift-stable
Var take_diag(const Var& a);       // (n,n) -> (n,1)

Var gather_rows(const Var& a, std::vector<int64_t> idx);
Var slice_cols(const Var& a, int64_t j0, int64_t width);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);

Var add_rowvec(const Var& x, const Var& v);  // x(m,n) + v(1,n)
Var mul_rowvec(const Var& x, const Var& v);  // x(m,n) .* v(1,n)
Var add_colvec(const Var& x, const Var& v);  // x(m,n) + v(m,1)
Var mul_colvec(const Var& x, const Var& v);  // x(m,n) .* v(m,1)
Var mul_scalar_var(const Var& x, const Var& s);  // x .* s(1,1)

Var reshape(const Var& a, int64_t r, int64_t c);

Var layernorm_rows(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

// Rows of x scaled to unit L2 norm; eps added under the square root.
Var l2_normalize_rows(const Var& x, double eps = 1e-12);

// Inverse-squared-distance feature interpolation, differentiable in both
// src_pos and src_feat. Neighbor indices are precomputed on values (discrete
// structure held fixed); queries whose nearest source lies within 1e-8 copy
// that source's feature row exactly.
Var idw_interpolate(const Var& src_pos, const Var& src_feat, const Tensor& query_pos,
                    const std::vector<std::vector<int64_t>>& neighbor_idx);

// Seeds grad at root (scalar roots get 1.0) and back-propagates through the
// reachable subgraph in reverse topological order.
void backward(const Var& root);

}  // namespace pointcmp::ad
