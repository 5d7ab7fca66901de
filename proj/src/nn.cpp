#include "pointcmp/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace pointcmp::nn {

using namespace pointcmp::ad;

Tensor xavier_uniform(int64_t in, int64_t out, Rng& rng) {
  Tensor w(in, out);
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  for (int64_t i = 0; i < w.numel(); ++i) w[i] = rng.uniform(-limit, limit);
  return w;
}

Linear::Linear(int64_t in, int64_t out, Rng& rng) {
  W = leaf(xavier_uniform(in, out, rng));
  // Small random bias keeps pre-activations off the exact relu kink (all-zero
  // input rows are structural in the encoder's offset features).
  Tensor bias(1, out);
  for (int64_t i = 0; i < out; ++i) bias[i] = rng.uniform(-0.01, 0.01);
  b = leaf(std::move(bias));
}

LayerNorm::LayerNorm(int64_t c) {
  gamma = leaf(Tensor(1, c, 1.0));
  beta = leaf(Tensor::zeros(1, c));
}

TransformerBlock::TransformerBlock(int64_t width, int heads_, Rng& rng)
    : ln1(width),
      ln2(width),
      wq(width, width, rng),
      wk(width, width, rng),
      wv(width, width, rng),
      wo(width, width, rng),
      ff1(width, 2 * width, rng),
      ff2(2 * width, width, rng),
      heads(heads_) {
  if (width % heads_ != 0) throw std::invalid_argument("TransformerBlock: heads must divide width");
}

Var TransformerBlock::operator()(const Var& x) const {
  const int64_t c = x->val.cols();
  const int64_t d = c / heads;
  Var h = ln1(x);
  Var q = wq(h), k = wk(h), v = wv(h);
  std::vector<Var> head_outs;
  head_outs.reserve(static_cast<size_t>(heads));
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  for (int i = 0; i < heads; ++i) {
    Var qh = slice_cols(q, i * d, d);
    Var kh = slice_cols(k, i * d, d);
    Var vh = slice_cols(v, i * d, d);
    Var att = softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt_d));
    head_outs.push_back(matmul(att, vh));
  }
  Var attn = wo(concat_cols(head_outs));
  Var x1 = add(x, attn);
  Var f = ff2(relu(ff1(ln2(x1))));
  return add(x1, f);
}

void TransformerBlock::collect(ParamMap& pm, const std::string& prefix) const {
  ln1.collect(pm, prefix + ".ln1");
  ln2.collect(pm, prefix + ".ln2");
  wq.collect(pm, prefix + ".wq");
  wk.collect(pm, prefix + ".wk");
  wv.collect(pm, prefix + ".wv");
  wo.collect(pm, prefix + ".wo");
  ff1.collect(pm, prefix + ".ff1");
  ff2.collect(pm, prefix + ".ff2");
}

AdamW::AdamW(std::vector<ad::Var> ps, double wd) : weight_decay(wd), params(std::move(ps)) {
  m.reserve(params.size());
  v.reserve(params.size());
  for (const auto& p : params) {
    m.push_back(Tensor::zeros(p->val.rows(), p->val.cols()));
    v.push_back(Tensor::zeros(p->val.rows(), p->val.cols()));
  }
}

void AdamW::zero_grad() {
  for (auto& p : params) {
    p->ensure_grad();
    for (int64_t i = 0; i < p->grad.numel(); ++i) p->grad[i] = 0.0;
  }
}

void AdamW::step(double lr) {
  ++t;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    if (p->grad.numel() != p->val.numel()) continue;  // unused param this step
    Tensor& mi = m[pi];
    Tensor& vi = v[pi];
    for (int64_t i = 0; i < p->val.numel(); ++i) {
      const double g = p->grad[i];
      mi[i] = beta1 * mi[i] + (1.0 - beta1) * g;
      vi[i] = beta2 * vi[i] + (1.0 - beta2) * g * g;
      const double mhat = mi[i] / bc1;
      const double vhat = vi[i] / bc2;
      p->val[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * p->val[i]);
    }
  }
}

double lr_at_step(int64_t step, int64_t total_steps, int64_t warmup_steps, double lr_max) {
  if (step < warmup_steps) {
    return lr_max * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  }
  const int64_t decay_steps = total_steps - warmup_steps;
  if (decay_steps <= 0) return lr_max;
  const double progress =
      static_cast<double>(step + 1 - warmup_steps) / static_cast<double>(decay_steps);
  constexpr double pi = 3.14159265358979323846;
  return lr_max * 0.5 * (1.0 + std::cos(pi * progress));
}

}  // namespace pointcmp::nn
