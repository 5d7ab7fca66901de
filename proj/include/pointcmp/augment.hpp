#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "pointcmp/common.hpp"
#include "pointcmp/tensor.hpp"

namespace pointcmp::aug {

// Which tokens are masked. `masked` is the source of truth; masked_segments
// lists segments whose tokens are all masked (the whole set under segment
// granularity, possibly empty under token granularity).
struct MaskSpec {
  int L = 0, N = 0;
  std::vector<uint8_t> masked;    // L*N flags
  std::vector<uint8_t> dominant;  // L*N flags (empty for random specs)
  Tensor similarity;              // (L*N) x 1 (empty for random specs)
  std::vector<int> masked_segments;

  int64_t masked_count() const {
    int64_t c = 0;
    for (uint8_t m : masked) c += m;
    return c;
  }
};

struct EraseSpec {
  std::vector<int> erased_channels;  // ascending
  Tensor rank_sum;                   // 1 x C (empty for random specs)
};

// Per-token cosine similarity with the global token; norms are guarded by
// eps = 1e-12 added to each norm.
Tensor token_global_similarity(const Tensor& feat, const Tensor& g);

// Marks exactly floor(fraction * L * N) tokens with the highest similarity,
// ties resolved by ascending (segment, token) index.
std::vector<uint8_t> select_dominant(const Tensor& similarity, int L, int N,
                                     double fraction = 0.4);

// The L_m segments holding the most dominant tokens (ties to the smaller
// segment id), all their tokens masked.
MaskSpec select_masked_segments(const std::vector<uint8_t>& dominant, int L, int N, int L_m);

// Eq-style per-token per-channel correlation with the global token.
Tensor channel_correlation(const Tensor& feat, const Tensor& g);  // (L*N) x C

// Within each token, channels are ranked ascending by correlation (rank 1 =
// smallest, ties by channel id); returns the rank sums across tokens, so a
// large entry means persistently high correlation.
Tensor rank_sum_channels(const Tensor& corr);  // 1 x C

// Zeroes the floor(fraction * C) channels with the largest rank sums across
// all tokens; the input grid is left untouched.
std::pair<Tensor, EraseSpec> erase_principal_channels(const Tensor& feat, const Tensor& rank_sum,
                                                      double fraction = 0.2);

// Random counterparts with identical cardinalities, deterministic per seed.
MaskSpec random_mask_segments(int L, int N, int L_m, Rng& rng);
MaskSpec random_mask_tokens(int L, int N, double token_fraction, Rng& rng);
EraseSpec random_erase_spec(int channels, double fraction, Rng& rng);

// Token-granularity similarity masking: masks the floor(fraction * L * N)
// highest-similarity tokens directly.
MaskSpec similarity_mask_tokens(const Tensor& similarity, int L, int N, double token_fraction);

// Similarity + segment granularity pipeline entry (the default path).
MaskSpec build_mask_spec(const Tensor& feat, const Tensor& g, int L, int N,
                         double dominant_fraction, int L_m);

std::string describe_mask(const MaskSpec& spec);
std::string describe_erase(const EraseSpec& spec);

}  // namespace pointcmp::aug
