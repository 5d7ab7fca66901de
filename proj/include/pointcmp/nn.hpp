#pragma once

#include <string>
#include <utility>
#include <vector>

#include "pointcmp/autograd.hpp"
#include "pointcmp/common.hpp"

namespace pointcmp::nn {

// Ordered, named registry of trainable leaves; the optimizer and checkpoint
// writer both iterate it in registration order.
struct ParamMap {
  std::vector<std::pair<std::string, ad::Var>> entries;

  void add(const std::string& name, const ad::Var& v) { entries.emplace_back(name, v); }

  std::vector<ad::Var> vars() const {
    std::vector<ad::Var> out;
    out.reserve(entries.size());
    for (const auto& [_, v] : entries) out.push_back(v);
    return out;
  }

  int64_t total_scalars() const {
    int64_t n = 0;
    for (const auto& [_, v] : entries) n += v->val.numel();
    return n;
  }
};

Tensor xavier_uniform(int64_t in, int64_t out, Rng& rng);

struct Linear {
  ad::Var W;  // (in x out)
  ad::Var b;  // (1 x out)

  Linear() = default;
  Linear(int64_t in, int64_t out, Rng& rng);

  ad::Var operator()(const ad::Var& x) const { return ad::add_rowvec(ad::matmul(x, W), b); }
  void collect(ParamMap& pm, const std::string& prefix) const {
    pm.add(prefix + ".W", W);
    pm.add(prefix + ".b", b);
  }
  int64_t num_scalars() const { return W->val.numel() + b->val.numel(); }
};

struct LayerNorm {
  ad::Var gamma, beta;  // (1 x c)

  LayerNorm() = default;
  explicit LayerNorm(int64_t c);

  ad::Var operator()(const ad::Var& x) const { return ad::layernorm_rows(x, gamma, beta); }
  void collect(ParamMap& pm, const std::string& prefix) const {
    pm.add(prefix + ".gamma", gamma);
    pm.add(prefix + ".beta", beta);
  }
};

// Pre-norm block: x + MHSA(LN(x)), then x + FFN(LN(x)). Feed-forward widens to 2C.
struct TransformerBlock {
  LayerNorm ln1, ln2;
  Linear wq, wk, wv, wo;
  Linear ff1, ff2;
  int heads = 4;

  TransformerBlock() = default;
  TransformerBlock(int64_t width, int heads, Rng& rng);

  ad::Var operator()(const ad::Var& x) const;
  void collect(ParamMap& pm, const std::string& prefix) const;
};

// Adam with decoupled weight decay. Moment buffers align with the param list
// passed at construction (registration order).
struct AdamW {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  int64_t t = 0;

  std::vector<ad::Var> params;
  std::vector<Tensor> m, v;

  explicit AdamW(std::vector<ad::Var> ps, double weight_decay = 1e-4);

  void zero_grad();
  void step(double lr);
};

// lr(step): linear 0 -> lr_max across warmup steps (hits lr_max exactly on the
// last warmup step), then cosine to 0 on the final step.
double lr_at_step(int64_t step, int64_t total_steps, int64_t warmup_steps, double lr_max);

}  // namespace pointcmp::nn
