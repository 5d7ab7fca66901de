#pragma once

#include <string>
#include <vector>

#include "pointcmp/augment.hpp"
#include "pointcmp/encoder.hpp"
#include "pointcmp/nn.hpp"

namespace pointcmp::local {

// Flattened bookkeeping for the masked token set, ordered segment-major.
struct MaskedLayout {
  std::vector<int64_t> grid_rows;       // row in the L*N grid per masked token
  std::vector<int> token_in_segment;    // within-segment token index (seed binding)
  std::vector<std::pair<int, int>> segment_ranges;  // [begin, end) per segment with masked tokens

  int64_t count() const { return static_cast<int64_t>(grid_rows.size()); }
};

MaskedLayout masked_layout(const aug::MaskSpec& mask);

// Linear positional embedding over (x, y, z, t), a learnable mask token, and
// three self-attention blocks with a final projection.
struct RegressorParams {
  nn::Linear pos_embed;  // 4 -> C
  ad::Var mask_token;    // 1 x C
  std::vector<nn::TransformerBlock> blocks;
  nn::LayerNorm final_ln;
  nn::Linear out_proj;  // C -> C

  RegressorParams(int C, int heads, Rng& rng);
  void collect(nn::ParamMap& pm, const std::string& prefix = "regressor") const;
};

// Folding decoder: fixed 2-D grid seeds, two fold MLPs.
struct MatchingParams {
  Tensor grid_seeds;  // N x 2, non-trainable, near-uniform over [-1,1]^2
  nn::Linear fold1_hidden, fold1_out;  // (C+2) -> C -> 3
  nn::Linear fold2_hidden, fold2_out;  // (C+3) -> C -> 3

  MatchingParams(int C, int N, Rng& rng);
  void collect(nn::ParamMap& pm, const std::string& prefix = "matching") const;
};

Tensor make_grid_seeds(int n);

ad::Var positional_embed(const Tensor& anchors, const RegressorParams& params);

// Transformer over an already assembled (S x C) sequence; exposed so tests can
// probe permutation equivariance directly.
ad::Var run_regressor(const ad::Var& sequence, const RegressorParams& params);

// Full regressor outputs at every grid position: visible rows carry
// token + positional embedding, masked rows mask-token + positional embedding.
ad::Var regress_all(const enc::TokenGrid& grid, const aug::MaskSpec& mask,
                    const RegressorParams& params);

// Outputs gathered at masked positions, segment-major.
ad::Var regress_masked(const enc::TokenGrid& grid, const aug::MaskSpec& mask,
                       const RegressorParams& params, const MaskedLayout& layout);

// Pool-add per masked segment, then fold each token through the grid seeds to
// a predicted xyz.
ad::Var matching_decode(const ad::Var& z_pre, const MaskedLayout& layout,
                        const MatchingParams& params);

struct LocalLossReport {
  ad::Var loss;                   // 1 x 1
  double mean_positive_rank = 0;  // 1 = best
  int64_t num_queries = 0;
};

// Interpolates predicted features at the ground-truth anchors (per segment),
// then token-level InfoNCE against the encoder's masked-token features.
// Candidates for query i are all masked ground-truth tokens of the sample;
// the positive is the one at the same (segment, token) slot.
LocalLossReport local_contrast(const ad::Var& z_pre, const ad::Var& p_pre, const ad::Var& z_gt,
                               const Tensor& p_gt, const MaskedLayout& layout, double tau = 0.01);

// The matching-module-off route: InfoNCE directly between regressor outputs
// and ground-truth tokens via index correspondence (the leakage path).
LocalLossReport local_contrast_direct(const ad::Var& z_pre, const ad::Var& z_gt, double tau = 0.01);

}  // namespace pointcmp::local
