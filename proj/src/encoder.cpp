#include "pointcmp/encoder.hpp"

#include <cmath>
#include <stdexcept>

namespace pointcmp::enc {

using namespace pointcmp::ad;

EncoderParams::EncoderParams(const EncoderConfig& cfg_, Rng& rng)
    : cfg(cfg_),
      spatial1(4, cfg_.C, rng),
      spatial2(cfg_.C, cfg_.C, rng),
      token_head(cfg_.C, cfg_.C, rng),
      global1(cfg_.C, cfg_.C, rng),
      global2(cfg_.C, cfg_.C, rng) {
  // Start near a temporal average so early training sees every frame.
  Tensor tw(cfg_.frames_per_segment, 1, 1.0 / static_cast<double>(cfg_.frames_per_segment));
  for (int64_t i = 0; i < tw.numel(); ++i) tw[i] += 0.02 * rng.normal();
  temporal_w = leaf(std::move(tw));
  temporal_b = leaf(Tensor::zeros(1, 1));
}

void EncoderParams::collect(nn::ParamMap& pm, const std::string& prefix) const {
  spatial1.collect(pm, prefix + ".spatial1");
  spatial2.collect(pm, prefix + ".spatial2");
  pm.add(prefix + ".temporal_w", temporal_w);
  pm.add(prefix + ".temporal_b", temporal_b);
  token_head.collect(pm, prefix + ".token_head");
  global1.collect(pm, prefix + ".global1");
  global2.collect(pm, prefix + ".global2");
}

int64_t EncoderParams::count_params() const {
  return spatial1.num_scalars() + spatial2.num_scalars() + temporal_w->val.numel() +
         temporal_b->val.numel() + token_head.num_scalars() + global1.num_scalars() +
         global2.num_scalars();
}

std::pair<ad::Var, Tensor> encode_segment(const data::SegmentedClip& clip, int segment,
                                          const EncoderParams& params) {
  const EncoderConfig& cfg = params.cfg;
  const int f_per_seg = clip.frames_per_segment;
  if (f_per_seg != cfg.frames_per_segment) {
    throw ConfigError("encode_segment: clip segmentation does not match encoder config");
  }
  const int t_total = clip.num_frames();
  const int begin = clip.segment_begin(segment);
  const int mid = begin + f_per_seg / 2;
  const Tensor& mid_frame = clip.frames[static_cast<size_t>(mid)];
  if (cfg.N > mid_frame.rows()) {
    throw ConfigError("encode_segment: N exceeds points in the anchor frame");
  }

  // Deterministic FPS start: the point farthest from the frame centroid.
  double cx = 0, cy = 0, cz = 0;
  for (int64_t i = 0; i < mid_frame.rows(); ++i) {
    cx += mid_frame(i, 0);
    cy += mid_frame(i, 1);
    cz += mid_frame(i, 2);
  }
  const double inv_p = 1.0 / static_cast<double>(mid_frame.rows());
  cx *= inv_p;
  cy *= inv_p;
  cz *= inv_p;
  int64_t start = 0;
  double best_d2 = -1.0;
  for (int64_t i = 0; i < mid_frame.rows(); ++i) {
    const double dx = mid_frame(i, 0) - cx, dy = mid_frame(i, 1) - cy, dz = mid_frame(i, 2) - cz;
    const double d2 = dx * dx + dy * dy + dz * dz;
    if (d2 > best_d2) {
      best_d2 = d2;
      start = i;
    }
  }
  const auto anchor_idx = geo::farthest_point_sample(mid_frame, cfg.N, start);

  Tensor anchor_xyz(cfg.N, 3);
  for (int n = 0; n < cfg.N; ++n) {
    for (int d = 0; d < 3; ++d) anchor_xyz(n, d) = mid_frame(anchor_idx[static_cast<size_t>(n)], d);
  }
  const double time_denom = t_total > 1 ? static_cast<double>(t_total - 1) : 1.0;
  const double t_anchor = static_cast<double>(mid) / time_denom;
  Tensor anchors(cfg.N, 4);
  for (int n = 0; n < cfg.N; ++n) {
    for (int d = 0; d < 3; ++d) anchors(n, d) = anchor_xyz(n, d);
    anchors(n, 3) = t_anchor;
  }

  // Per-frame neighborhood descriptors, then a learned combination over frames.
  std::vector<Var> per_frame;
  per_frame.reserve(static_cast<size_t>(f_per_seg));
  for (int f = 0; f < f_per_seg; ++f) {
    const int fc = begin + f;
    const Tensor& frame = clip.frames[static_cast<size_t>(fc)];
    const auto table = geo::ball_query(anchor_xyz, frame, cfg.radius, cfg.k_ball);
    const double dt = (static_cast<double>(fc) - static_cast<double>(mid)) / time_denom;
    Tensor offsets(static_cast<int64_t>(cfg.N) * cfg.k_ball, 4);
    for (int n = 0; n < cfg.N; ++n) {
      const auto& nbr = table.indices[static_cast<size_t>(n)];
      for (int k = 0; k < cfg.k_ball; ++k) {
        const int64_t r = static_cast<int64_t>(n) * cfg.k_ball + k;
        for (int d = 0; d < 3; ++d) offsets(r, d) = frame(nbr[static_cast<size_t>(k)], d) - anchor_xyz(n, d);
        offsets(r, 3) = dt;
      }
    }
    Var h = params.spatial2(relu(params.spatial1(constant(std::move(offsets)))));
    per_frame.push_back(group_max_rows(h, cfg.k_ball));  // (N x C)
  }

  Var fused;
  for (int f = 0; f < f_per_seg; ++f) {
    Var wf = gather_rows(params.temporal_w, {static_cast<int64_t>(f)});  // (1 x 1)
    Var term = mul_scalar_var(per_frame[static_cast<size_t>(f)], wf);
    fused = f == 0 ? term : add(fused, term);
  }
  Var bias_col = mul_scalar_var(constant(Tensor(cfg.N, 1, 1.0)), params.temporal_b);
  fused = add_colvec(fused, bias_col);

  Var token_feat = params.token_head(relu(fused));  // (N x C)
  return {token_feat, anchors};
}

std::pair<TokenGrid, GlobalToken> encode(const data::SegmentedClip& clip,
                                         const EncoderParams& params) {
  if (clip.L <= 0) throw ConfigError("encode: clip is not segmented");
  std::vector<Var> feats;
  feats.reserve(static_cast<size_t>(clip.L));
  Tensor anchors(static_cast<int64_t>(clip.L) * params.cfg.N, 4);
  for (int l = 0; l < clip.L; ++l) {
    auto [feat, seg_anchors] = encode_segment(clip, l, params);
    feats.push_back(feat);
    for (int n = 0; n < params.cfg.N; ++n) {
      for (int d = 0; d < 4; ++d) {
        anchors(static_cast<int64_t>(l) * params.cfg.N + n, d) = seg_anchors(n, d);
      }
    }
  }
  TokenGrid grid;
  grid.feat = concat_rows(feats);
  grid.anchors = std::move(anchors);
  grid.L = clip.L;
  grid.N = params.cfg.N;
  grid.C = params.cfg.C;
  GlobalToken g{global_head(grid.feat, params)};
  return {grid, g};
}

ad::Var global_head(const ad::Var& grid_feat, const EncoderParams& params) {
  Var pooled = max_axis0(grid_feat);  // 1 x C
  return params.global2(relu(params.global1(pooled)));
}

}  // namespace pointcmp::enc
