#include "pointcmp/autograd.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace pointcmp::ad {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

namespace {

Var make_node(Tensor val, std::vector<Var> parents) {
  auto n = std::make_shared<Node>();
  n->val = std::move(val);
  n->parents = std::move(parents);
  for (const auto& p : n->parents) {
    if (p->requires_grad) {
      n->requires_grad = true;
      break;
    }
  }
  return n;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a->val.same_shape(b->val)) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

}  // namespace

Var leaf(Tensor value, bool requires_grad, std::string name) {
  auto n = std::make_shared<Node>();
  n->val = std::move(value);
  n->requires_grad = requires_grad;
  n->name = std::move(name);
  return n;
}

Var constant(Tensor value) { return leaf(std::move(value), false); }

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tensor out = a->val;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += b->val[i];
  auto n = make_node(std::move(out), {a, b});
  if (n->requires_grad) {
    n->backfn = [](Node& self) {
      for (int s = 0; s < 2; ++s) {
        Node& p = *self.parents[static_cast<size_t>(s)];
        if (!p.requires_grad) continue;
        p.ensure_grad();
        for (int64_t i = 0; i < p.grad.numel(); ++i) p.grad[i] += self.grad[i];
      }
    };
  }
  return n;
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tensor out = a->val;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b->val[i];
  auto n = make_node(std::move(out), {a, b});
  if (n->requires_grad) {
    n->backfn = [](Node& self) {
      Node& pa = *self.parents[0];
      Node& pb = *self.parents[1];
      if (pa.requires_grad) {
        pa.ensure_grad();
        for (int64_t i = 0; i < pa.grad.numel(); ++i) pa.grad[i] += self.grad[i];
      }
      if (pb.requires_grad) {
        pb.ensure_grad();
        for (int64_t i = 0; i < pb.grad.numel(); ++i) pb.grad[i] -= self.grad[i];
      }
    };
  }
  return n;
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Tensor out = a->val;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b->val[i];
  auto n = make_node(std::move(out), {a, b});
  if (n->requires_grad) {
    n->backfn = [](Node& self) {
      Node& pa = *self.parents[0];
      Node& pb = *self.parents[1];
      if (pa.requires_grad) {
        pa.ensure_grad();
        for (int64_t i = 0; i < pa.grad.numel(); ++i) pa.grad[i] += self.grad[i] * pb.val[i];
      }
      if (pb.requires_grad) {
        pb.ensure_grad();
        for (int64_t i = 0; i < pb.grad.numel(); ++i) pb.grad[i] += self.grad[i] * pa.val[i];
      }
    };
  }
  return n;
}

Var div(const Var& a, const Var& b) {
  check_same_shape(a, b, "div");
  Tensor out = a->val;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] /= b->val[i];
  auto n = make_node(std::move(out), {a, b});
  if (n->requires_grad) {
    n->backfn = [](Node& self) {
      Node& pa = *self.parents[0];
      Node& pb = *self.parents[1];
      if (pa.requires_grad) {
        pa.ensure_grad();
        for (int64_t i = 0; i < pa.grad.numel(); ++i) pa.grad[i] += self.grad[i] / pb.val[i];
      }
      if (pb.requires_grad) {
        pb.ensure_grad();
        for (int64_t i = 0; i < pb.grad.numel(); ++i) {
          pb.grad[i] -= self.grad[i] * pa.val[i] / (pb.val[i] * pb.val[i]);
        }
      }
    };
  }
  return n;
}

Var scale(const Var& a, double s) {
  Tensor out = a->val;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= s;
  auto n = make_node(std::move(out), {a});
  if (n->requires_grad) {
    n->backfn = [s](Node& self) {
      Node& p = *self.parents[0];
      p.ensure_grad();
      for (int64_t i = 0; i < p.grad.numel(); ++i) p.grad[i] += s * self.grad[i];
    };
  }
  return n;
}

Var add_const(const Var& a, double c) {
  Tensor out = a->val;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += c;
  auto n = make_node(std::move(out), {a});
  if (n->requires_grad) {
    n->backfn = [](Node& self) {
      Node& p = *self.parents[0];
      p.ensure_grad();
      for (int64_t i = 0; i < p.grad.numel(); ++i) p.grad[i] += self.grad[i];
    };
  }
  return n;
}

Var matmul(const Var& a, const Var& b) {
  if (a->val.cols() != b->val.rows()) throw std::invalid_argument("matmul: inner dim mismatch");
  const int64_t m = a->val.rows(), k = a->val.cols(), n2 = b->val.cols();
  Tensor out(m, n2);
  {
    CMapMat A(a->val.data(), m, k), B(b->val.data(), k, n2);
    MapMat O(out.data(), m, n2);
    O.noalias() = A * B;
  }
  auto n = make_node(std::move(out), {a, b});
  if (n->requires_grad) {
    n->backfn = [m, k, n2](Node& self) {
      Node& pa = *self.parents[0];
      Node& pb = *self.parents[1];
      CMapMat G(self.grad.data(), m, n2);
      if (pa.requires_grad) {
        pa.ensure_grad();
        CMapMat B(pb.val.data(), k, n2);
        MapMat dA(pa.grad.data(), m, k);
        dA.noalias() += G * B.transpose();
      }
      if (pb.requires_grad) {
        pb.ensure_grad();
        CMapMat A(pa.val.data(), m, k);
        MapMat dB(pb.grad.data(), k, n2);
        dB.noalias() += A.transpose() * G;
      }
    };
  }
  return n;
}

Var matmul_nt(const Var& a, const Var& b) {
  if (a->val.cols() != b->val.cols()) throw std::invalid_argument("matmul_nt: inner dim mismatch");
  const int64_t m = a->val.rows(), k = a->val.cols(), n2 = b->val.rows();
  Tensor out(m, n2);
  {
    CMapMat A(a->val.data(), m, k), B(b->val.data(), n2, k);
    MapMat O(out.data(), m, n2);
    O.noalias() = A * B.transpose();
  }
  auto n = make_node(std::move(out), {a, b});
  if (n->requires_grad) {
    n->backfn = [m, k, n2](Node& self) {
      Node& pa = *self.parents[0];
      Node& pb = *self.parents[1];
      CMapMat G(self.grad.data(), m, n2);
      if (pa.requires_grad) {
        pa.ensure_grad();
        CMapMat B(pb.val.data(), n2, k);
        MapMat dA(pa.grad.data(), m, k);
        dA.noalias() += G * B;
      }
      if (pb.requires_grad) {
        pb.ensure_grad();
        CMapMat A(pa.val.data(), m, k);
        MapMat dB(pb.grad.data(), n2, k);
        dB.noalias() += G.transpose() * A;
      }
    };
  }
  return n;
}

Var relu(const Var& a) {
  Tensor out = a->val;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
  auto n = make_node(std::move(out), {a});
  if (n->requires_grad) {
    n->backfn = [](Node& self) {
      Node& p = *self.parents[0];
      p.ensure_grad();
      for (int64_t i = 0; i < p.grad.numel(); ++i) {
        if (p.val[i] > 0.0) p.grad[i] += self.grad[i];
      }
    };
  }
  return n;
}

Var vexp(const Var& a) {
  Tensor out = a->val;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::exp(out[i]);
  auto n = make_node(std::move(out), {a});
  if (n->requires_grad) {
    n->backfn = [](Node& self) {
      Node& p = *self.parents[0];
      p.ensure_grad();
      for (int64_t i = 0; i < p.grad.numel(); ++i) p.grad[i] += self.grad[i] * self.val[i];
    };
  }
  return n;
}

Var vlog(const Var& a) {
  Tensor out = a->val;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::log(out[i]);
  auto n = make_node(std::move(out), {a});
  if (n->requires_grad) {
    n->backfn = [](Node& self) {
      Node& p = *self.parents[0];
      p.ensure_grad();
      for (int64_t i = 0; i < p.grad.numel(); ++i) p.grad[i] += self.grad[i] / p.val[i];
    };
  }
  return n;
}

Var vsqrt(const Var& a) {
  Tensor out = a->val;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::sqrt(out[i]);
  auto n = make_node(std::move(out), {a});
  if (n->requires_grad) {
    n->backfn = [](Node& self) {
      Node& p = *self.parents[0];
      p.ensure_grad();
      for (int64_t i = 0; i < p.grad.numel(); ++i) {
        p.grad[i] += self.grad[i] * 0.5 / self.val[i];
      }
    };
  }
  return n;
}

Var square(const Var& a) {
  Tensor out = a->val;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= out[i];
  auto n = make_node(std::move(out), {a});
  if (n->requires_grad) {
    n->backfn = [](Node& self) {
      Node& p = *self.parents[0];
      p.ensure_grad();
      for (int64_t i = 0; i < p.grad.numel(); ++i) p.grad[i] += self.grad[i] * 2.0 * p.val[i];
    };
  }
  return n;
}

Var reciprocal(const Var& a) {
  Tensor out = a->val;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = 1.0 / out[i];
  auto n = make_node(std::move(out), {a});
  if (n->requires_grad) {
    n->backfn = [](Node& self) {
      Node& p = *self.parents[0];
      p.ensure_grad();
      for (int64_t i = 0; i < p.grad.numel(); ++i) {
        p.grad[i] -= self.grad[i] * self.val[i] * self.val[i];
      }
    };
  }
  return n;
}

Var sum_all(const Var& a) {
  double s = 0.0;
  for (int64_t i = 0; i < a->val.numel(); ++i) s += a->val[i];
  auto n = make_node(Tensor::scalar(s), {a});
  if (n->requires_grad) {
    n->backfn = [](Node& self) {
      Node& p = *self.parents[0];
      p.ensure_grad();
      const double g = self.grad[0];
      for (int64_t i = 0; i < p.grad.numel(); ++i) p.grad[i] += g;
    };
  }
  return n;
}

Var mean_all(const Var& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a->val.numel())); }

Var sum_axis0(const Var& a) {
  const int64_t m = a->val.rows(), c = a->val.cols();
  Tensor out(1, c);
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < c; ++j) out[j] += a->val(i, j);
  auto n = make_node(std::move(out), {a});
  if (n->requires_grad) {
    n->backfn = [m, c](Node& self) {
      Node& p = *self.parents[0];
      p.ensure_grad();
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < c; ++j) p.grad(i, j) += self.grad[j];
    };
  }
  return n;
}

Var sum_axis1(const Var& a) {
  const int64_t m = a->val.rows(), c = a->val.cols();
  Tensor out(m, 1);
  for (int64_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < c; ++j) s += a->val(i, j);
    out[i] = s;
  }
  auto n = make_node(std::move(out), {a});
  if (n->requires_grad) {
    n->backfn = [m, c](Node& self) {
      Node& p = *self.parents[0];
      p.ensure_grad();
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < c; ++j) p.grad(i, j) += self.grad[i];
    };
  }
  return n;
}

Var group_max_rows(const Var& a, int64_t group) {
  const int64_t m = a->val.rows(), c = a->val.cols();
  if (group <= 0 || m % group != 0) throw std::invalid_argument("group_max_rows: bad group size");
  const int64_t g = m / group;
  Tensor out(g, c);
  std::vector<int64_t> arg(static_cast<size_t>(g * c));
  for (int64_t b = 0; b < g; ++b) {
    for (int64_t j = 0; j < c; ++j) {
      int64_t best = b * group;
      double bv = a->val(best, j);
      for (int64_t r = b * group + 1; r < (b + 1) * group; ++r) {
        if (a->val(r, j) > bv) {
          bv = a->val(r, j);
          best = r;
        }
      }
      out(b, j) = bv;
      arg[static_cast<size_t>(b * c + j)] = best;
    }
  }
  auto n = make_node(std::move(out), {a});
  if (n->requires_grad) {
    n->backfn = [g, c, arg = std::move(arg)](Node& self) {
      Node& p = *self.parents[0];
      p.ensure_grad();
      for (int64_t b = 0; b < g; ++b)
        for (int64_t j = 0; j < c; ++j)
          p.grad(arg[static_cast<size_t>(b * c + j)], j) += self.grad(b, j);
    };
  }
  return n;
}

Var max_axis0(const Var& a) { return group_max_rows(a, a->val.rows()); }

Var softmax_rows(const Var& a) {
  const int64_t m = a->val.rows(), c = a->val.cols();
  Tensor out(m, c);
  for (int64_t i = 0; i < m; ++i) {
    double mx = a->val(i, 0);
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, a->val(i, j));
    double s = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      out(i, j) = std::exp(a->val(i, j) - mx);
      s += out(i, j);
    }
    for (int64_t j = 0; j < c; ++j) out(i, j) /= s;
  }
  auto n = make_node(std::move(out), {a});
  if (n->requires_grad) {
    n->backfn = [m, c](Node& self) {
      Node& p = *self.parents[0];
      p.ensure_grad();
      for (int64_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (int64_t j = 0; j < c; ++j) dot += self.grad(i, j) * self.val(i, j);
        for (int64_t j = 0; j < c; ++j) {
          p.grad(i, j) += (self.grad(i, j) - dot) * self.val(i, j);
        }
      }
    };
  }
  return n;
}

Var logsumexp_rows(const Var& a) {
  const int64_t m = a->val.rows(), c = a->val.cols();
  Tensor out(m, 1);
  for (int64_t i = 0; i < m; ++i) {
    double mx = a->val(i, 0);
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, a->val(i, j));
    double s = 0.0;
    for (int64_t j = 0; j < c; ++j) s += std::exp(a->val(i, j) - mx);
    out[i] = mx + std::log(s);
  }
  auto n = make_node(std::move(out), {a});
  if (n->requires_grad) {
    n->backfn = [m, c](Node& self) {
      Node& p = *self.parents[0];
      p.ensure_grad();
      for (int64_t i = 0; i < m; ++i) {
        const double lse = self.val[i];
        const double g = self.grad[i];
        for (int64_t j = 0; j < c; ++j) {
          p.grad(i, j) += g * std::exp(p.val(i, j) - lse);
        }
      }
    };
  }
  return n;
}

Var take_diag(const Var& a) {
  const int64_t m = a->val.rows();
  if (a->val.cols() != m) throw std::invalid_argument("take_diag: square input required");
  Tensor out(m, 1);
  for (int64_t i = 0; i < m; ++i) out[i] = a->val(i, i);
  auto n = make_node(std::move(out), {a});
  if (n->requires_grad) {
    n->backfn = [m](Node& self) {
      Node& p = *self.parents[0];
      p.ensure_grad();
      for (int64_t i = 0; i < m; ++i) p.grad(i, i) += self.grad[i];
    };
  }
  return n;
}

Var gather_rows(const Var& a, std::vector<int64_t> idx) {
  const int64_t c = a->val.cols();
  Tensor out(static_cast<int64_t>(idx.size()), c);
  for (size_t i = 0; i < idx.size(); ++i) {
    for (int64_t j = 0; j < c; ++j) out(static_cast<int64_t>(i), j) = a->val(idx[i], j);
  }
  auto n = make_node(std::move(out), {a});
  if (n->requires_grad) {
    n->backfn = [c, idx = std::move(idx)](Node& self) {
      Node& p = *self.parents[0];
      p.ensure_grad();
      for (size_t i = 0; i < idx.size(); ++i)
        for (int64_t j = 0; j < c; ++j) p.grad(idx[i], j) += self.grad(static_cast<int64_t>(i), j);
    };
  }
  return n;
}

Var slice_cols(const Var& a, int64_t j0, int64_t width) {
  const int64_t m = a->val.rows();
  if (j0 < 0 || j0 + width > a->val.cols()) throw std::invalid_argument("slice_cols: out of range");
  Tensor out(m, width);
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < width; ++j) out(i, j) = a->val(i, j0 + j);
  auto n = make_node(std::move(out), {a});
  if (n->requires_grad) {
    n->backfn = [m, j0, width](Node& self) {
      Node& p = *self.parents[0];
      p.ensure_grad();
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < width; ++j) p.grad(i, j0 + j) += self.grad(i, j);
    };
  }
  return n;
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
  const int64_t c = parts[0]->val.cols();
  int64_t m = 0;
  for (const auto& p : parts) {
    if (p->val.cols() != c) throw std::invalid_argument("concat_rows: col mismatch");
    m += p->val.rows();
  }
  Tensor out(m, c);
  int64_t r = 0;
  for (const auto& p : parts) {
    for (int64_t i = 0; i < p->val.rows(); ++i, ++r)
      for (int64_t j = 0; j < c; ++j) out(r, j) = p->val(i, j);
  }
  auto n = make_node(std::move(out), parts);
  if (n->requires_grad) {
    n->backfn = [c](Node& self) {
      int64_t r = 0;
      for (auto& pp : self.parents) {
        Node& p = *pp;
        const int64_t pr = p.val.rows();
        if (p.requires_grad) {
          p.ensure_grad();
          for (int64_t i = 0; i < pr; ++i)
            for (int64_t j = 0; j < c; ++j) p.grad(i, j) += self.grad(r + i, j);
        }
        r += pr;
      }
    };
  }
  return n;
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
  const int64_t m = parts[0]->val.rows();
  int64_t c = 0;
  for (const auto& p : parts) {
    if (p->val.rows() != m) throw std::invalid_argument("concat_cols: row mismatch");
    c += p->val.cols();
  }
  Tensor out(m, c);
  int64_t off = 0;
  for (const auto& p : parts) {
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < p->val.cols(); ++j) out(i, off + j) = p->val(i, j);
    off += p->val.cols();
  }
  auto n = make_node(std::move(out), parts);
  if (n->requires_grad) {
    n->backfn = [m](Node& self) {
      int64_t off = 0;
      for (auto& pp : self.parents) {
        Node& p = *pp;
        const int64_t pc = p.val.cols();
        if (p.requires_grad) {
          p.ensure_grad();
          for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < pc; ++j) p.grad(i, j) += self.grad(i, off + j);
        }
        off += pc;
      }
    };
  }
  return n;
}

Var add_rowvec(const Var& x, const Var& v) {
  const int64_t m = x->val.rows(), c = x->val.cols();
  if (v->val.rows() != 1 || v->val.cols() != c) throw std::invalid_argument("add_rowvec: bad v");
  Tensor out = x->val;
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < c; ++j) out(i, j) += v->val[j];
  auto n = make_node(std::move(out), {x, v});
  if (n->requires_grad) {
    n->backfn = [m, c](Node& self) {
      Node& px = *self.parents[0];
      Node& pv = *self.parents[1];
      if (px.requires_grad) {
        px.ensure_grad();
        for (int64_t i = 0; i < m * c; ++i) px.grad[i] += self.grad[i];
      }
      if (pv.requires_grad) {
        pv.ensure_grad();
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < c; ++j) pv.grad[j] += self.grad(i, j);
      }
    };
  }
  return n;
}

Var mul_rowvec(const Var& x, const Var& v) {
  const int64_t m = x->val.rows(), c = x->val.cols();
  if (v->val.rows() != 1 || v->val.cols() != c) throw std::invalid_argument("mul_rowvec: bad v");
  Tensor out = x->val;
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < c; ++j) out(i, j) *= v->val[j];
  auto n = make_node(std::move(out), {x, v});
  if (n->requires_grad) {
    n->backfn = [m, c](Node& self) {
      Node& px = *self.parents[0];
      Node& pv = *self.parents[1];
      if (px.requires_grad) {
        px.ensure_grad();
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < c; ++j) px.grad(i, j) += self.grad(i, j) * pv.val[j];
      }
      if (pv.requires_grad) {
        pv.ensure_grad();
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < c; ++j) pv.grad[j] += self.grad(i, j) * px.val(i, j);
      }
    };
  }
  return n;
}

Var add_colvec(const Var& x, const Var& v) {
  const int64_t m = x->val.rows(), c = x->val.cols();
  if (v->val.cols() != 1 || v->val.rows() != m) throw std::invalid_argument("add_colvec: bad v");
  Tensor out = x->val;
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < c; ++j) out(i, j) += v->val[i];
  auto n = make_node(std::move(out), {x, v});
  if (n->requires_grad) {
    n->backfn = [m, c](Node& self) {
      Node& px = *self.parents[0];
      Node& pv = *self.parents[1];
      if (px.requires_grad) {
        px.ensure_grad();
        for (int64_t i = 0; i < m * c; ++i) px.grad[i] += self.grad[i];
      }
      if (pv.requires_grad) {
        pv.ensure_grad();
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < c; ++j) pv.grad[i] += self.grad(i, j);
      }
    };
  }
  return n;
}

Var mul_colvec(const Var& x, const Var& v) {
  const int64_t m = x->val.rows(), c = x->val.cols();
  if (v->val.cols() != 1 || v->val.rows() != m) throw std::invalid_argument("mul_colvec: bad v");
  Tensor out = x->val;
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < c; ++j) out(i, j) *= v->val[i];
  auto n = make_node(std::move(out), {x, v});
  if (n->requires_grad) {
    n->backfn = [m, c](Node& self) {
      Node& px = *self.parents[0];
      Node& pv = *self.parents[1];
      if (px.requires_grad) {
        px.ensure_grad();
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < c; ++j) px.grad(i, j) += self.grad(i, j) * pv.val[i];
      }
      if (pv.requires_grad) {
        pv.ensure_grad();
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < c; ++j) pv.grad[i] += self.grad(i, j) * px.val(i, j);
      }
    };
  }
  return n;
}

Var mul_scalar_var(const Var& x, const Var& s) {
  if (s->val.numel() != 1) throw std::invalid_argument("mul_scalar_var: s must be 1x1");
  const double sv = s->val[0];
  Tensor out = x->val;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= sv;
  auto n = make_node(std::move(out), {x, s});
  if (n->requires_grad) {
    n->backfn = [](Node& self) {
      Node& px = *self.parents[0];
      Node& ps = *self.parents[1];
      if (px.requires_grad) {
        px.ensure_grad();
        const double sv = ps.val[0];
        for (int64_t i = 0; i < px.grad.numel(); ++i) px.grad[i] += self.grad[i] * sv;
      }
      if (ps.requires_grad) {
        ps.ensure_grad();
        double acc = 0.0;
        for (int64_t i = 0; i < px.val.numel(); ++i) acc += self.grad[i] * px.val[i];
        ps.grad[0] += acc;
      }
    };
  }
  return n;
}

Var reshape(const Var& a, int64_t r, int64_t c) {
  Tensor out = a->val.reshaped(r, c);
  auto n = make_node(std::move(out), {a});
  if (n->requires_grad) {
    n->backfn = [](Node& self) {
      Node& p = *self.parents[0];
      p.ensure_grad();
      for (int64_t i = 0; i < p.grad.numel(); ++i) p.grad[i] += self.grad[i];
    };
  }
  return n;
}

Var layernorm_rows(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const int64_t m = x->val.rows(), c = x->val.cols();
  if (gamma->val.cols() != c || beta->val.cols() != c) {
    throw std::invalid_argument("layernorm_rows: bad gamma/beta");
  }
  Tensor out(m, c);
  for (int64_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (int64_t j = 0; j < c; ++j) mu += x->val(i, j);
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      const double d = x->val(i, j) - mu;
      var += d * d;
    }
    var /= static_cast<double>(c);
    const double rstd = 1.0 / std::sqrt(var + eps);
    for (int64_t j = 0; j < c; ++j) {
      out(i, j) = (x->val(i, j) - mu) * rstd * gamma->val[j] + beta->val[j];
    }
  }
  auto n = make_node(std::move(out), {x, gamma, beta});
  if (n->requires_grad) {
    n->backfn = [m, c, eps](Node& self) {
      Node& px = *self.parents[0];
      Node& pg = *self.parents[1];
      Node& pb = *self.parents[2];
      if (px.requires_grad) px.ensure_grad();
      if (pg.requires_grad) pg.ensure_grad();
      if (pb.requires_grad) pb.ensure_grad();
      std::vector<double> xhat(static_cast<size_t>(c));
      for (int64_t i = 0; i < m; ++i) {
        double mu = 0.0;
        for (int64_t j = 0; j < c; ++j) mu += px.val(i, j);
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (int64_t j = 0; j < c; ++j) {
          const double d = px.val(i, j) - mu;
          var += d * d;
        }
        var /= static_cast<double>(c);
        const double rstd = 1.0 / std::sqrt(var + eps);
        double m1 = 0.0, m2 = 0.0;  // mean(dxhat), mean(dxhat*xhat)
        for (int64_t j = 0; j < c; ++j) {
          xhat[static_cast<size_t>(j)] = (px.val(i, j) - mu) * rstd;
          const double dxh = self.grad(i, j) * pg.val[j];
          m1 += dxh;
          m2 += dxh * xhat[static_cast<size_t>(j)];
        }
        m1 /= static_cast<double>(c);
        m2 /= static_cast<double>(c);
        for (int64_t j = 0; j < c; ++j) {
          const double dxh = self.grad(i, j) * pg.val[j];
          if (px.requires_grad) {
            px.grad(i, j) += rstd * (dxh - m1 - xhat[static_cast<size_t>(j)] * m2);
          }
          if (pg.requires_grad) pg.grad[j] += self.grad(i, j) * xhat[static_cast<size_t>(j)];
          if (pb.requires_grad) pb.grad[j] += self.grad(i, j);
        }
      }
    };
  }
  return n;
}

Var l2_normalize_rows(const Var& x, double eps) {
  Var nrm = vsqrt(add_const(sum_axis1(square(x)), eps));
  return mul_colvec(x, reciprocal(nrm));
}

Var idw_interpolate(const Var& src_pos, const Var& src_feat, const Tensor& query_pos,
                    const std::vector<std::vector<int64_t>>& neighbor_idx) {
  const int64_t q = query_pos.rows();
  const int64_t c = src_feat->val.cols();
  if (src_pos->val.rows() != src_feat->val.rows()) {
    throw std::invalid_argument("idw_interpolate: src size mismatch");
  }
  if (static_cast<int64_t>(neighbor_idx.size()) != q) {
    throw std::invalid_argument("idw_interpolate: neighbor list size mismatch");
  }
  constexpr double kCoincidentSq = 1e-16;  // (1e-8)^2
  Tensor out(q, c);
  for (int64_t i = 0; i < q; ++i) {
    const auto& nb = neighbor_idx[static_cast<size_t>(i)];
    // Coincidence: copy the exact feature row of a source sitting on the query.
    int64_t hit = -1;
    double w_sum = 0.0;
    std::vector<double> u(nb.size());
    for (size_t t = 0; t < nb.size(); ++t) {
      double d2 = 0.0;
      for (int64_t d = 0; d < 3; ++d) {
        const double dd = src_pos->val(nb[t], d) - query_pos(i, d);
        d2 += dd * dd;
      }
      if (d2 < kCoincidentSq && hit < 0) hit = nb[t];
      u[t] = 1.0 / d2;
      w_sum += u[t];
    }
    if (hit >= 0) {
      for (int64_t j = 0; j < c; ++j) out(i, j) = src_feat->val(hit, j);
    } else {
      for (int64_t j = 0; j < c; ++j) {
        double acc = 0.0;
        for (size_t t = 0; t < nb.size(); ++t) acc += u[t] * src_feat->val(nb[t], j);
        out(i, j) = acc / w_sum;
      }
    }
  }
  auto n = make_node(std::move(out), {src_pos, src_feat});
  if (n->requires_grad) {
    n->backfn = [q, c, query_pos, neighbor_idx](Node& self) {
      Node& pp = *self.parents[0];
      Node& pf = *self.parents[1];
      if (pp.requires_grad) pp.ensure_grad();
      if (pf.requires_grad) pf.ensure_grad();
      for (int64_t i = 0; i < q; ++i) {
        const auto& nb = neighbor_idx[static_cast<size_t>(i)];
        int64_t hit = -1;
        double w_sum = 0.0;
        std::vector<double> u(nb.size());
        for (size_t t = 0; t < nb.size(); ++t) {
          double d2 = 0.0;
          for (int64_t d = 0; d < 3; ++d) {
            const double dd = pp.val(nb[t], d) - query_pos(i, d);
            d2 += dd * dd;
          }
          if (d2 < kCoincidentSq && hit < 0) hit = nb[t];
          u[t] = 1.0 / d2;
          w_sum += u[t];
        }
        if (hit >= 0) {
          // Exact copy: gradient reaches only the copied feature row.
          if (pf.requires_grad) {
            for (int64_t j = 0; j < c; ++j) pf.grad(hit, j) += self.grad(i, j);
          }
          continue;
        }
        for (size_t t = 0; t < nb.size(); ++t) {
          const double w = u[t] / w_sum;
          // d(out)/d(u_t) = (f_t - out)/w_sum; chain through u = 1/d2.
          double s_t = 0.0;
          for (int64_t j = 0; j < c; ++j) {
            if (pf.requires_grad) pf.grad(nb[t], j) += w * self.grad(i, j);
            s_t += self.grad(i, j) * (pf.val(nb[t], j) - self.val(i, j));
          }
          s_t /= w_sum;
          if (pp.requires_grad) {
            const double du_dd2 = -u[t] * u[t];
            for (int64_t d = 0; d < 3; ++d) {
              const double dd = pp.val(nb[t], d) - query_pos(i, d);
              pp.grad(nb[t], d) += s_t * du_dd2 * 2.0 * dd;
            }
          }
        }
      }
    };
  }
  return n;
}

void backward(const Var& root) {
  if (!root->requires_grad) return;
  root->ensure_grad();
  for (int64_t i = 0; i < root->grad.numel(); ++i) root->grad[i] = 1.0;

  // Iterative post-order DFS; visit each node once, prune constant subtrees.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto [node, next] = stack.back();
    if (next < node->parents.size()) {
      ++stack.back().second;
      Node* p = node->parents[next].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backfn && node->grad.numel() == node->val.numel()) node->backfn(*node);
  }
}

}  // namespace pointcmp::ad
