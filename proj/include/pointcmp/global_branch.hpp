#pragma once

#include <string>
#include <vector>

#include "pointcmp/encoder.hpp"
#include "pointcmp/nn.hpp"

namespace pointcmp::global {

// Two-layer projection head shared by query, positive, and all negatives.
struct ProjectionParams {
  nn::Linear l1;  // C -> C
  nn::Linear l2;  // C -> D_proj

  ProjectionParams() = default;
  ProjectionParams(int C, int d_proj, Rng& rng) : l1(C, C, rng), l2(C, d_proj, rng) {}
  ad::Var operator()(const ad::Var& x) const { return l2(ad::relu(l1(x))); }
  void collect(nn::ParamMap& pm, const std::string& prefix = "projection") const {
    l1.collect(pm, prefix + ".l1");
    l2.collect(pm, prefix + ".l2");
  }
};

struct GlobalSamples {
  ad::Var query;          // 1 x C (the sample's global token)
  ad::Var positive;       // 1 x C (pooled regressor outputs)
  ad::Var hard_negative;  // 1 x C or null (pooled channel-erased grid)
  std::vector<ad::Var> batch_negatives;  // pooled grids of the other samples
};

// Pools the contrastive roles for one sample. regressor_out covers all L*N
// regressor output tokens; pass null to fall back to pooling the encoder grid
// (the global-only ablation, which runs no regressor). hard_grid may be null
// when hard negatives are disabled.
GlobalSamples build_global_samples(const ad::Var& grid_feat, const ad::Var& global_token,
                                   const ad::Var& regressor_out, const ad::Var& hard_grid,
                                   const std::vector<ad::Var>& batch_other_grids);

struct GlobalLossReport {
  ad::Var loss;             // 1 x 1, batch mean
  double sim_positive = 0;  // mean cosine(query, positive) in projected space
  double sim_hard = 0;      // mean cosine(query, hard negative); NaN if absent
  int batch_size = 0;
};

// Projected, L2-normalized InfoNCE with the positive inside the denominator
// sum alongside the batch negatives, plus the hard-negative term when present.
GlobalLossReport global_contrast(const std::vector<GlobalSamples>& batch,
                                 const ProjectionParams& proj, double tau = 0.1);

// Unweighted sum of the two branch losses; rejects non-finite inputs.
ad::Var total_loss(const ad::Var& local_loss, const ad::Var& global_loss);

}  // namespace pointcmp::global
