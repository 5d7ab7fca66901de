#include "pointcmp/global_branch.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace pointcmp::global {

using namespace pointcmp::ad;

GlobalSamples build_global_samples(const ad::Var& grid_feat, const ad::Var& global_token,
                                   const ad::Var& regressor_out, const ad::Var& hard_grid,
                                   const std::vector<ad::Var>& batch_other_grids) {
  if (!hard_grid && batch_other_grids.empty()) {
    throw ConfigError("build_global_samples: need a hard negative or batch size >= 2");
  }
  GlobalSamples s;
  s.query = global_token;
  if (regressor_out) {
    if (regressor_out->val.rows() < 1) {
      throw ConfigError("build_global_samples: empty regressor output");
    }
    s.positive = max_axis0(regressor_out);
  } else {
    s.positive = max_axis0(grid_feat);
  }
  if (hard_grid) s.hard_negative = max_axis0(hard_grid);
  s.batch_negatives.reserve(batch_other_grids.size());
  for (const auto& other : batch_other_grids) s.batch_negatives.push_back(max_axis0(other));
  return s;
}

GlobalLossReport global_contrast(const std::vector<GlobalSamples>& batch,
                                 const ProjectionParams& proj, double tau) {
  if (tau <= 0.0) throw ConfigError("global_contrast: tau must be positive");
  if (batch.empty()) throw ConfigError("global_contrast: empty batch");

  GlobalLossReport report;
  report.batch_size = static_cast<int>(batch.size());
  std::vector<Var> losses;
  losses.reserve(batch.size());
  double sim_pos_sum = 0.0, sim_hard_sum = 0.0;
  int hard_count = 0;

  for (const auto& s : batch) {
    if (!s.hard_negative && s.batch_negatives.empty()) {
      throw ConfigError("global_contrast: sample has no negatives");
    }
    Var qn = l2_normalize_rows(proj(s.query));
    Var pn = l2_normalize_rows(proj(s.positive));
    // Denominator candidates: hard negative, batch negatives, and the positive.
    std::vector<Var> cands;
    if (s.hard_negative) cands.push_back(l2_normalize_rows(proj(s.hard_negative)));
    for (const auto& bn : s.batch_negatives) cands.push_back(l2_normalize_rows(proj(bn)));
    cands.push_back(pn);
    Var cand_mat = concat_rows(cands);                       // (K+1) x D
    Var sims = reshape(matmul_nt(qn, cand_mat), 1,
                       static_cast<int64_t>(cands.size()));  // 1 x (K+1)
    Var pos_sim = matmul_nt(qn, pn);                         // 1 x 1
    Var loss = sub(logsumexp_rows(scale(sims, 1.0 / tau)), scale(pos_sim, 1.0 / tau));
    losses.push_back(loss);

    sim_pos_sum += pos_sim->val[0];
    if (s.hard_negative) {
      sim_hard_sum += sims->val[0];  // hard negative is the first candidate
      ++hard_count;
    }
  }
  report.loss = mean_all(concat_rows(losses));
  report.sim_positive = sim_pos_sum / static_cast<double>(batch.size());
  report.sim_hard = hard_count > 0 ? sim_hard_sum / static_cast<double>(hard_count)
                                   : std::numeric_limits<double>::quiet_NaN();
  return report;
}

ad::Var total_loss(const ad::Var& local_loss, const ad::Var& global_loss) {
  if (!std::isfinite(local_loss->val[0]) || !std::isfinite(global_loss->val[0])) {
    throw std::invalid_argument("total_loss: non-finite branch loss");
  }
  return add(local_loss, global_loss);
}

}  // namespace pointcmp::global
