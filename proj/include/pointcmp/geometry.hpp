#pragma once

#include <cstdint>
#include <vector>

#include "pointcmp/tensor.hpp"

namespace pointcmp::geo {

// Fixed-width neighbor lists. Padded slots repeat the first valid neighbor so
// downstream max-pools are insensitive to padding.
struct NeighborTable {
  std::vector<std::vector<int64_t>> indices;  // M x K
  std::vector<int64_t> valid_count;           // M, each in [1, K]
};

// Greedy max-min selection over points (P x 3). First pick is start_index;
// each later pick maximizes distance to the selected set, ties to the
// smallest index.
std::vector<int64_t> farthest_point_sample(const Tensor& points, int64_t n, int64_t start_index);

// Up to k nearest points within radius of each center, reported in source
// index order. A center with an empty ball falls back to the single globally
// nearest point.
NeighborTable ball_query(const Tensor& centers, const Tensor& points, double radius, int64_t k);

// k nearest by Euclidean distance, nearest first, ties to the smallest index.
NeighborTable knn(const Tensor& query, const Tensor& points, int64_t k);

// Inverse-squared-distance interpolation over the k nearest sources. A query
// within 1e-8 of a source copies that source's feature row exactly.
Tensor interpolate_features(const Tensor& src_pos, const Tensor& src_feat, const Tensor& query_pos,
                            int64_t k = 3);

}  // namespace pointcmp::geo
