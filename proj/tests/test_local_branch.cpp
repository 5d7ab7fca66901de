#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fd_check.hpp"
#include "pointcmp/geometry.hpp"
#include "pointcmp/local_branch.hpp"

using namespace pointcmp;
using namespace pointcmp::local;
using pointcmp::ad::Var;

namespace {

enc::TokenGrid make_grid(int L, int N, int C, uint64_t seed) {
  Rng rng(seed);
  enc::TokenGrid grid;
  grid.L = L;
  grid.N = N;
  grid.C = C;
  grid.feat = ad::leaf(fdcheck::random_tensor(static_cast<int64_t>(L) * N, C, rng));
  grid.anchors = Tensor(static_cast<int64_t>(L) * N, 4);
  for (int64_t i = 0; i < grid.anchors.rows(); ++i) {
    for (int d = 0; d < 3; ++d) grid.anchors(i, d) = rng.normal();
    grid.anchors(i, 3) = static_cast<double>(i / N) / std::max(1, L - 1);
  }
  return grid;
}

aug::MaskSpec mask_first_segments(int L, int N, int lm) {
  std::vector<uint8_t> dom(static_cast<size_t>(L) * N, 0);
  for (int l = 0; l < lm; ++l) {
    for (int n = 0; n < N; ++n) dom[static_cast<size_t>(l) * N + n] = 1;
  }
  return aug::select_masked_segments(dom, L, N, lm);
}

}  // namespace

TEST_CASE("positional embedding is a per-anchor affine map") {
  Rng rng(1);
  RegressorParams params(8, 4, rng);
  // zero weights, bias b: every embedding equals b
  for (int64_t i = 0; i < params.pos_embed.W->val.numel(); ++i) params.pos_embed.W->val[i] = 0;
  for (int64_t i = 0; i < 8; ++i) params.pos_embed.b->val[i] = 0.5 * static_cast<double>(i);
  Tensor anchors(6, 4);
  for (int64_t i = 0; i < anchors.numel(); ++i) anchors[i] = rng.normal();
  auto pe = positional_embed(anchors, params);
  CHECK(pe->val.rows() == 6);
  CHECK(pe->val.cols() == 8);
  for (int64_t i = 0; i < 6; ++i) {
    for (int64_t c = 0; c < 8; ++c) CHECK(pe->val(i, c) == params.pos_embed.b->val[c]);
  }

  // identical anchors -> identical embeddings
  Rng rng2(2);
  RegressorParams p2(8, 4, rng2);
  Tensor same(2, 4);
  for (int d = 0; d < 4; ++d) same(0, d) = same(1, d) = 0.3 * d;
  auto pe2 = positional_embed(same, p2);
  for (int64_t c = 0; c < 8; ++c) CHECK(pe2->val(0, c) == pe2->val(1, c));
}

TEST_CASE("regress_masked shapes and mask-token gradient") {
  Rng rng(3);
  RegressorParams params(16, 4, rng);
  auto grid = make_grid(4, 8, 16, 4);
  auto mask = mask_first_segments(4, 8, 1);
  auto layout = masked_layout(mask);
  CHECK(layout.count() == 8);

  Var z_pre = regress_masked(grid, mask, params, layout);
  CHECK(z_pre->val.rows() == 8);
  CHECK(z_pre->val.cols() == 16);

  ad::backward(ad::sum_all(z_pre));
  double mt_norm = 0;
  for (int64_t i = 0; i < params.mask_token->grad.numel(); ++i) {
    mt_norm += std::abs(params.mask_token->grad[i]);
  }
  CHECK(mt_norm > 1e-8);
}

TEST_CASE("regressor rejects degenerate masks") {
  Rng rng(5);
  RegressorParams params(8, 4, rng);
  auto grid = make_grid(2, 4, 8, 6);
  aug::MaskSpec all_masked;
  all_masked.L = 2;
  all_masked.N = 4;
  all_masked.masked.assign(8, 1);
  CHECK_THROWS_AS(regress_all(grid, all_masked, params), ConfigError);
  aug::MaskSpec none;
  none.L = 2;
  none.N = 4;
  none.masked.assign(8, 0);
  CHECK_THROWS_AS(regress_all(grid, none, params), ConfigError);
}

TEST_CASE("self-attention stack is permutation-equivariant") {
  Rng rng(7);
  RegressorParams params(8, 4, rng);
  Tensor seq = fdcheck::random_tensor(10, 8, rng);
  Var out_a = run_regressor(ad::constant(seq), params);

  std::vector<int64_t> perm = {3, 1, 4, 0, 9, 2, 7, 5, 8, 6};
  Tensor shuffled(10, 8);
  for (int64_t i = 0; i < 10; ++i) {
    for (int64_t c = 0; c < 8; ++c) shuffled(perm[static_cast<size_t>(i)], c) = seq(i, c);
  }
  Var out_b = run_regressor(ad::constant(shuffled), params);
  for (int64_t i = 0; i < 10; ++i) {
    for (int64_t c = 0; c < 8; ++c) {
      CHECK(out_b->val(perm[static_cast<size_t>(i)], c) ==
            doctest::Approx(out_a->val(i, c)).epsilon(1e-9));
    }
  }
}

TEST_CASE("folding decoder shapes and seed dependence") {
  Rng rng(8);
  const int C = 16, N = 8;
  MatchingParams params(C, N, rng);
  CHECK(params.grid_seeds.rows() == N);
  for (int64_t i = 0; i < params.grid_seeds.numel(); ++i) {
    CHECK(params.grid_seeds[i] >= -1.0);
    CHECK(params.grid_seeds[i] <= 1.0);
  }

  auto mask = mask_first_segments(2, N, 1);
  auto layout = masked_layout(mask);
  // identical token features with distinct grid seeds decode to distinct points
  Tensor same_rows(N, C);
  Rng r2(9);
  Tensor one_row = fdcheck::random_tensor(1, C, r2);
  for (int64_t i = 0; i < N; ++i) {
    for (int64_t c = 0; c < C; ++c) same_rows(i, c) = one_row[c];
  }
  Var p = matching_decode(ad::leaf(same_rows), layout, params);
  CHECK(p->val.rows() == N);
  CHECK(p->val.cols() == 3);
  double spread = 0;
  for (int64_t i = 1; i < N; ++i) {
    for (int d = 0; d < 3; ++d) spread += std::abs(p->val(i, d) - p->val(0, d));
  }
  CHECK(spread > 1e-9);
}

TEST_CASE("local InfoNCE closed forms") {
  const double tau = 1.0;
  // identity rows: positive similarity 1, negatives 0
  {
    const int m = 32;
    Tensor eye(m, m);
    for (int i = 0; i < m; ++i) eye(i, i) = 1.0;
    auto rep = local_contrast_direct(ad::constant(eye), ad::constant(eye), tau);
    const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 31.0));
    CHECK(rep.loss->val[0] == doctest::Approx(expected).epsilon(1e-9));
    CHECK(rep.mean_positive_rank == doctest::Approx(1.0));
  }
  // all candidates identical: ln(K+1)
  for (int m : {2, 8, 32}) {
    Rng rng(10);
    Tensor queries = fdcheck::random_tensor(m, 16, rng);
    Tensor gt(m, 16);
    Tensor row = fdcheck::random_tensor(1, 16, rng);
    for (int64_t i = 0; i < m; ++i) {
      for (int64_t c = 0; c < 16; ++c) gt(i, c) = row[c];
    }
    auto rep = local_contrast_direct(ad::constant(queries), ad::constant(gt), 0.01);
    CHECK(rep.loss->val[0] == doctest::Approx(std::log(static_cast<double>(m))).epsilon(1e-9));
  }
  CHECK_THROWS_AS(local_contrast_direct(ad::constant(Tensor(2, 4)), ad::constant(Tensor(2, 4)), 0.0),
                  ConfigError);
}

TEST_CASE("local_contrast matches a naive 64-bit oracle on a random instance") {
  Rng rng(11);
  const int m = 8, c = 16;
  auto mask = mask_first_segments(4, m, 1);
  auto layout = masked_layout(mask);
  Var z_pre = ad::leaf(fdcheck::random_tensor(m, c, rng));
  Var p_pre = ad::leaf(fdcheck::random_tensor(m, 3, rng));
  Var z_gt = ad::leaf(fdcheck::random_tensor(m, c, rng));
  Tensor p_gt = fdcheck::random_tensor(m, 3, rng);
  const double tau = 0.01;

  auto rep = local_contrast(z_pre, p_pre, z_gt, p_gt, layout, tau);

  // oracle: value-level interpolation + naive loop loss
  Tensor z_hat = geo::interpolate_features(p_pre->val, z_pre->val, p_gt, 3);
  auto normalize = [](Tensor t) {
    for (int64_t i = 0; i < t.rows(); ++i) {
      double n = 0;
      for (int64_t j = 0; j < t.cols(); ++j) n += t(i, j) * t(i, j);
      n = std::sqrt(n + 1e-12);
      for (int64_t j = 0; j < t.cols(); ++j) t(i, j) /= n;
    }
    return t;
  };
  Tensor zh = normalize(z_hat);
  Tensor zg = normalize(z_gt->val);
  double loss = 0;
  for (int64_t i = 0; i < m; ++i) {
    std::vector<double> sims(m);
    double mx = -1e300;
    for (int64_t j = 0; j < m; ++j) {
      double s = 0;
      for (int64_t k = 0; k < c; ++k) s += zh(i, k) * zg(j, k);
      sims[static_cast<size_t>(j)] = s / tau;
      mx = std::max(mx, sims[static_cast<size_t>(j)]);
    }
    double denom = 0;
    for (double s : sims) denom += std::exp(s - mx);
    loss += -(sims[static_cast<size_t>(i)] - mx - std::log(denom));
  }
  loss /= static_cast<double>(m);
  CHECK(rep.loss->val[0] == doctest::Approx(loss).epsilon(1e-6));
}

TEST_CASE("no coordinate loss: gradients reach predicted positions only via weights") {
  Rng rng(12);
  const int m = 8, c = 8;
  auto mask = mask_first_segments(2, m, 1);
  auto layout = masked_layout(mask);
  Var z_pre = ad::leaf(fdcheck::random_tensor(m, c, rng));
  Var p_pre = ad::leaf(fdcheck::random_tensor(m, 3, rng));
  Var z_gt = ad::leaf(fdcheck::random_tensor(m, c, rng));
  Tensor p_gt = fdcheck::random_tensor(m, 3, rng);

  auto rep = local_contrast(z_pre, p_pre, z_gt, p_gt, layout, 0.1);
  ad::backward(rep.loss);
  double pp_grad = 0;
  for (int64_t i = 0; i < p_pre->grad.numel(); ++i) pp_grad += std::abs(p_pre->grad[i]);
  CHECK(pp_grad > 1e-10);

  // common rigid translation of both position sets leaves the loss unchanged
  Tensor p_pre_shifted = p_pre->val;
  Tensor p_gt_shifted = p_gt;
  const double v[3] = {0.7, -1.3, 2.1};
  for (int64_t i = 0; i < m; ++i) {
    for (int d = 0; d < 3; ++d) {
      p_pre_shifted(i, d) += v[d];
      p_gt_shifted(i, d) += v[d];
    }
  }
  auto rep2 = local_contrast(z_pre, ad::leaf(p_pre_shifted), z_gt, p_gt_shifted, layout, 0.1);
  CHECK(rep2.loss->val[0] == doctest::Approx(rep.loss->val[0]).epsilon(1e-9));
}

TEST_CASE("the loss is learnable on a fixed tiny instance") {
  Rng rng(13);
  const int m = 8, c = 8;
  auto mask = mask_first_segments(2, m, 1);
  auto layout = masked_layout(mask);
  Var z_pre = ad::leaf(fdcheck::random_tensor(m, c, rng));
  Var p_pre = ad::leaf(fdcheck::random_tensor(m, 3, rng));
  Var z_gt = ad::constant(fdcheck::random_tensor(m, c, rng));
  Tensor p_gt = fdcheck::random_tensor(m, 3, rng);
  const double tau = 0.1;

  nn::AdamW opt({z_pre, p_pre}, 0.0);
  double last = 0;
  for (int step = 0; step < 50; ++step) {
    opt.zero_grad();
    auto rep = local_contrast(z_pre, p_pre, z_gt, p_gt, layout, tau);
    last = rep.loss->val[0];
    ad::backward(rep.loss);
    opt.step(0.05);
  }
  CHECK(last < std::log(static_cast<double>(m)));
}

TEST_CASE("regressor and matching gradients match finite differences") {
  Rng rng(14);
  const int C = 8, N = 4, L = 2;
  RegressorParams reg(C, 4, rng);
  MatchingParams match(C, N, rng);
  auto grid = make_grid(L, N, C, 15);
  grid.feat->requires_grad = false;  // parameters only
  auto mask = mask_first_segments(L, N, 1);
  auto layout = masked_layout(mask);
  Tensor p_gt(layout.count(), 3);
  for (int64_t i = 0; i < layout.count(); ++i) {
    for (int d = 0; d < 3; ++d) p_gt(i, d) = grid.anchors(layout.grid_rows[static_cast<size_t>(i)], d);
  }
  Tensor z_gt_vals = fdcheck::random_tensor(layout.count(), C, rng);

  nn::ParamMap pm;
  reg.collect(pm, "reg");
  match.collect(pm, "match");
  auto loss_fn = [&] {
    Var z_pre = regress_masked(grid, mask, reg, layout);
    Var p_pre = matching_decode(z_pre, layout, match);
    auto rep = local_contrast(z_pre, p_pre, ad::constant(z_gt_vals), p_gt, layout, 0.5);
    return rep.loss;
  };
  CHECK(fdcheck::max_rel_error(loss_fn, pm.vars(), 1e-5) < 1e-4);
}
