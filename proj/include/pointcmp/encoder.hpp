#pragma once

#include <string>
#include <utility>

#include "pointcmp/autograd.hpp"
#include "pointcmp/data.hpp"
#include "pointcmp/geometry.hpp"
#include "pointcmp/nn.hpp"

namespace pointcmp::enc {

struct EncoderConfig {
  int N = 32;          // token anchors per segment
  int C = 128;         // token channels
  double radius = 0.5; // ball query radius
  int k_ball = 9;
  int frames_per_segment = 4;  // clip length / L, fixed per run
};

// The token grid Z: features live in the graph, anchors are plain values.
// Row l*N + n holds segment l's n-th token; anchors carry (x, y, z, t) with t
// the segment's normalized mid-frame time.
struct TokenGrid {
  ad::Var feat;    // (L*N) x C
  Tensor anchors;  // (L*N) x 4
  int L = 0, N = 0, C = 0;

  int64_t row(int segment, int token) const { return static_cast<int64_t>(segment) * N + token; }
};

struct GlobalToken {
  ad::Var feat;  // 1 x C
};

// Two-stage stand-in for a spatio-temporal point encoder: shared spatial MLP
// over ball-query neighborhoods max-pooled per frame, learned per-frame
// weighting across the segment, then a per-token head. A two-layer MLP over
// the channel-wise max of all tokens yields the global token.
struct EncoderParams {
  EncoderConfig cfg;
  nn::Linear spatial1;  // 4 -> C on (dx, dy, dz, dt)
  nn::Linear spatial2;  // C -> C
  ad::Var temporal_w;   // (F x 1)
  ad::Var temporal_b;   // (1 x 1)
  nn::Linear token_head;  // C -> C
  nn::Linear global1;     // C -> C
  nn::Linear global2;     // C -> C

  EncoderParams(const EncoderConfig& cfg, Rng& rng);
  void collect(nn::ParamMap& pm, const std::string& prefix = "encoder") const;
  int64_t count_params() const;
};

// Features (N x C) and anchors (N x 4) for one segment.
std::pair<ad::Var, Tensor> encode_segment(const data::SegmentedClip& clip, int segment,
                                          const EncoderParams& params);

std::pair<TokenGrid, GlobalToken> encode(const data::SegmentedClip& clip,
                                         const EncoderParams& params);

// Global head applied to an externally supplied token grid; lets tests
// recompute the global token independently.
ad::Var global_head(const ad::Var& grid_feat, const EncoderParams& params);

}  // namespace pointcmp::enc
