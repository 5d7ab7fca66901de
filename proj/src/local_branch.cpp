#include "pointcmp/local_branch.hpp"

#include <cmath>
#include <stdexcept>

#include "pointcmp/geometry.hpp"

namespace pointcmp::local {

using namespace pointcmp::ad;

MaskedLayout masked_layout(const aug::MaskSpec& mask) {
  MaskedLayout layout;
  for (int l = 0; l < mask.L; ++l) {
    const int begin = static_cast<int>(layout.grid_rows.size());
    for (int n = 0; n < mask.N; ++n) {
      if (mask.masked[static_cast<size_t>(l) * mask.N + n]) {
        layout.grid_rows.push_back(static_cast<int64_t>(l) * mask.N + n);
        layout.token_in_segment.push_back(n);
      }
    }
    const int end = static_cast<int>(layout.grid_rows.size());
    if (end > begin) layout.segment_ranges.emplace_back(begin, end);
  }
  return layout;
}

RegressorParams::RegressorParams(int C, int heads, Rng& rng)
    : pos_embed(4, C, rng), final_ln(C), out_proj(C, C, rng) {
  Tensor mt(1, C);
  for (int64_t i = 0; i < mt.numel(); ++i) mt[i] = 0.02 * rng.normal();
  mask_token = leaf(std::move(mt));
  for (int b = 0; b < 3; ++b) blocks.emplace_back(C, heads, rng);
}

void RegressorParams::collect(nn::ParamMap& pm, const std::string& prefix) const {
  pos_embed.collect(pm, prefix + ".pos_embed");
  pm.add(prefix + ".mask_token", mask_token);
  for (size_t b = 0; b < blocks.size(); ++b) {
    blocks[b].collect(pm, prefix + ".block" + std::to_string(b));
  }
  final_ln.collect(pm, prefix + ".final_ln");
  out_proj.collect(pm, prefix + ".out_proj");
}

Tensor make_grid_seeds(int n) {
  // First n cells of the smallest square grid covering [-1,1]^2, row-major.
  int g = 1;
  while (g * g < n) ++g;
  Tensor seeds(n, 2);
  int idx = 0;
  for (int r = 0; r < g && idx < n; ++r) {
    for (int c = 0; c < g && idx < n; ++c, ++idx) {
      seeds(idx, 0) = g == 1 ? 0.0 : -1.0 + 2.0 * static_cast<double>(c) / static_cast<double>(g - 1);
      seeds(idx, 1) = g == 1 ? 0.0 : -1.0 + 2.0 * static_cast<double>(r) / static_cast<double>(g - 1);
    }
  }
  return seeds;
}

MatchingParams::MatchingParams(int C, int N, Rng& rng)
    : grid_seeds(make_grid_seeds(N)),
      fold1_hidden(C + 2, C, rng),
      fold1_out(C, 3, rng),
      fold2_hidden(C + 3, C, rng),
      fold2_out(C, 3, rng) {}

void MatchingParams::collect(nn::ParamMap& pm, const std::string& prefix) const {
  fold1_hidden.collect(pm, prefix + ".fold1_hidden");
  fold1_out.collect(pm, prefix + ".fold1_out");
  fold2_hidden.collect(pm, prefix + ".fold2_hidden");
  fold2_out.collect(pm, prefix + ".fold2_out");
}

ad::Var positional_embed(const Tensor& anchors, const RegressorParams& params) {
  if (!all_finite(anchors)) throw std::invalid_argument("positional_embed: non-finite anchors");
  return params.pos_embed(constant(anchors));
}

ad::Var run_regressor(const ad::Var& sequence, const RegressorParams& params) {
  Var x = sequence;
  for (const auto& block : params.blocks) x = block(x);
  return params.out_proj(params.final_ln(x));
}

ad::Var regress_all(const enc::TokenGrid& grid, const aug::MaskSpec& mask,
                    const RegressorParams& params) {
  const int64_t total = static_cast<int64_t>(grid.L) * grid.N;
  if (static_cast<int64_t>(mask.masked.size()) != total) {
    throw ConfigError("regress_all: mask does not match grid");
  }
  int64_t masked_count = 0;
  Tensor visible01(total, 1), masked01(total, 1);
  for (int64_t i = 0; i < total; ++i) {
    const bool m = mask.masked[static_cast<size_t>(i)] != 0;
    masked_count += m;
    masked01(i, 0) = m ? 1.0 : 0.0;
    visible01(i, 0) = m ? 0.0 : 1.0;
  }
  if (masked_count == total) throw ConfigError("regress_all: all tokens masked");
  if (masked_count == 0) throw ConfigError("regress_all: no tokens masked");

  Var pos = positional_embed(grid.anchors, params);
  Var visible_part = mul_colvec(grid.feat, constant(visible01));
  Var masked_part = matmul(constant(masked01), params.mask_token);  // broadcast mask token
  Var seq = add(add(visible_part, masked_part), pos);
  return run_regressor(seq, params);
}

ad::Var regress_masked(const enc::TokenGrid& grid, const aug::MaskSpec& mask,
                       const RegressorParams& params, const MaskedLayout& layout) {
  return gather_rows(regress_all(grid, mask, params), layout.grid_rows);
}

ad::Var matching_decode(const ad::Var& z_pre, const MaskedLayout& layout,
                        const MatchingParams& params) {
  if (layout.count() < 1) throw ConfigError("matching_decode: no masked tokens");
  std::vector<Var> outs;
  outs.reserve(layout.segment_ranges.size());
  for (const auto& [begin, end] : layout.segment_ranges) {
    std::vector<int64_t> rows;
    for (int i = begin; i < end; ++i) rows.push_back(i);
    Var tok = gather_rows(z_pre, rows);
    Var pooled = max_axis0(tok);             // 1 x C segment summary
    Var tok2 = add_rowvec(tok, pooled);      // broadcast-add
    Tensor seeds(end - begin, 2);
    for (int i = begin; i < end; ++i) {
      const int n = layout.token_in_segment[static_cast<size_t>(i)];
      seeds(i - begin, 0) = params.grid_seeds(n, 0);
      seeds(i - begin, 1) = params.grid_seeds(n, 1);
    }
    Var p1 = params.fold1_out(relu(params.fold1_hidden(concat_cols({tok2, constant(seeds)}))));
    Var p2 = params.fold2_out(relu(params.fold2_hidden(concat_cols({tok2, p1}))));
    outs.push_back(p2);
  }
  return concat_rows(outs);
}

namespace {

LocalLossReport infonce_from_candidates(const Var& queries_norm, const Var& gt_norm, double tau) {
  const int64_t m = queries_norm->val.rows();
  Var sims = matmul_nt(queries_norm, gt_norm);  // (M x M), positives on the diagonal
  Var scaled = scale(sims, 1.0 / tau);
  Var loss = mean_all(sub(logsumexp_rows(scaled), take_diag(scaled)));

  LocalLossReport report;
  report.loss = loss;
  report.num_queries = m;
  double rank_sum = 0.0;
  for (int64_t i = 0; i < m; ++i) {
    int64_t rank = 1;
    for (int64_t j = 0; j < m; ++j) {
      if (j != i && sims->val(i, j) > sims->val(i, i)) ++rank;
    }
    rank_sum += static_cast<double>(rank);
  }
  report.mean_positive_rank = rank_sum / static_cast<double>(m);
  return report;
}

}  // namespace

LocalLossReport local_contrast(const ad::Var& z_pre, const ad::Var& p_pre, const ad::Var& z_gt,
                               const Tensor& p_gt, const MaskedLayout& layout, double tau) {
  if (tau <= 0.0) throw ConfigError("local_contrast: tau must be positive");
  const int64_t m = layout.count();
  if (m < 2) throw ConfigError("local_contrast: need at least two masked tokens");
  if (z_pre->val.rows() != m || p_pre->val.rows() != m || z_gt->val.rows() != m ||
      p_gt.rows() != m) {
    throw std::invalid_argument("local_contrast: row count mismatch");
  }

  // Queries of segment l interpolate only from predictions of segment l.
  std::vector<Var> hat_parts;
  hat_parts.reserve(layout.segment_ranges.size());
  for (const auto& [begin, end] : layout.segment_ranges) {
    const int64_t seg_size = end - begin;
    std::vector<int64_t> rows;
    for (int i = begin; i < end; ++i) rows.push_back(i);
    Var seg_pos = gather_rows(p_pre, rows);
    Var seg_feat = gather_rows(z_pre, rows);
    Tensor seg_query(seg_size, 3);
    for (int64_t i = 0; i < seg_size; ++i) {
      for (int d = 0; d < 3; ++d) seg_query(i, d) = p_gt(begin + i, d);
    }
    const int64_t k_eff = std::min<int64_t>(3, seg_size);
    const auto nb = geo::knn(seg_query, seg_pos->val, k_eff);
    std::vector<std::vector<int64_t>> neighbor_idx(nb.indices.begin(), nb.indices.end());
    hat_parts.push_back(idw_interpolate(seg_pos, seg_feat, seg_query, neighbor_idx));
  }
  Var z_hat = concat_rows(hat_parts);
  return infonce_from_candidates(l2_normalize_rows(z_hat), l2_normalize_rows(z_gt), tau);
}

LocalLossReport local_contrast_direct(const ad::Var& z_pre, const ad::Var& z_gt, double tau) {
  if (tau <= 0.0) throw ConfigError("local_contrast_direct: tau must be positive");
  if (z_pre->val.rows() < 2) throw ConfigError("local_contrast_direct: need at least two tokens");
  if (z_pre->val.rows() != z_gt->val.rows()) {
    throw std::invalid_argument("local_contrast_direct: row count mismatch");
  }
  return infonce_from_candidates(l2_normalize_rows(z_pre), l2_normalize_rows(z_gt), tau);
}

}  // namespace pointcmp::local
