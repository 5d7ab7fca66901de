#include "pointcmp/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace pointcmp::geo {

namespace {

double dist2(const Tensor& a, int64_t i, const Tensor& b, int64_t j) {
  double s = 0.0;
  for (int64_t d = 0; d < 3; ++d) {
    const double dd = a(i, d) - b(j, d);
    s += dd * dd;
  }
  return s;
}

}  // namespace

std::vector<int64_t> farthest_point_sample(const Tensor& points, int64_t n, int64_t start_index) {
  const int64_t p = points.rows();
  if (n < 1 || n > p) throw std::invalid_argument("farthest_point_sample: n out of range");
  if (start_index < 0 || start_index >= p) {
    throw std::invalid_argument("farthest_point_sample: bad start index");
  }
  std::vector<int64_t> picked;
  picked.reserve(static_cast<size_t>(n));
  picked.push_back(start_index);
  std::vector<double> min_d2(static_cast<size_t>(p), std::numeric_limits<double>::infinity());
  for (int64_t step = 1; step < n; ++step) {
    const int64_t last = picked.back();
    int64_t best = -1;
    double best_d2 = -1.0;
    for (int64_t i = 0; i < p; ++i) {
      const double d2 = dist2(points, i, points, last);
      if (d2 < min_d2[static_cast<size_t>(i)]) min_d2[static_cast<size_t>(i)] = d2;
      if (min_d2[static_cast<size_t>(i)] > best_d2) {
        best_d2 = min_d2[static_cast<size_t>(i)];
        best = i;
      }
    }
    picked.push_back(best);
    min_d2[static_cast<size_t>(best)] = -1.0;  // never re-picked
  }
  return picked;
}

NeighborTable ball_query(const Tensor& centers, const Tensor& points, double radius, int64_t k) {
  if (points.rows() == 0) throw std::invalid_argument("ball_query: empty point set");
  if (radius <= 0.0) throw std::invalid_argument("ball_query: radius must be positive");
  if (k < 1) throw std::invalid_argument("ball_query: k must be >= 1");
  const int64_t m = centers.rows(), p = points.rows();
  const double r2 = radius * radius;
  NeighborTable table;
  table.indices.assign(static_cast<size_t>(m), {});
  table.valid_count.assign(static_cast<size_t>(m), 0);
  std::vector<std::pair<double, int64_t>> in_ball;
  for (int64_t i = 0; i < m; ++i) {
    in_ball.clear();
    int64_t nearest = 0;
    double nearest_d2 = std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < p; ++j) {
      const double d2 = dist2(centers, i, points, j);
      if (d2 <= r2) in_ball.emplace_back(d2, j);
      if (d2 < nearest_d2) {
        nearest_d2 = d2;
        nearest = j;
      }
    }
    std::vector<int64_t> sel;
    if (in_ball.empty()) {
      sel.push_back(nearest);
    } else if (static_cast<int64_t>(in_ball.size()) <= k) {
      for (const auto& [_, j] : in_ball) sel.push_back(j);
    } else {
      // Keep the k nearest so the choice depends on geometry, not input order.
      std::sort(in_ball.begin(), in_ball.end());
      sel.reserve(static_cast<size_t>(k));
      for (int64_t t = 0; t < k; ++t) sel.push_back(in_ball[static_cast<size_t>(t)].second);
      std::sort(sel.begin(), sel.end());
    }
    const int64_t valid = static_cast<int64_t>(sel.size());
    sel.reserve(static_cast<size_t>(k));
    while (static_cast<int64_t>(sel.size()) < k) sel.push_back(sel[0]);
    table.indices[static_cast<size_t>(i)] = std::move(sel);
    table.valid_count[static_cast<size_t>(i)] = valid;
  }
  return table;
}

NeighborTable knn(const Tensor& query, const Tensor& points, int64_t k) {
  const int64_t q = query.rows(), p = points.rows();
  if (k < 1 || k > p) throw std::invalid_argument("knn: k out of range");
  NeighborTable table;
  table.indices.assign(static_cast<size_t>(q), {});
  table.valid_count.assign(static_cast<size_t>(q), k);
  std::vector<std::pair<double, int64_t>> all(static_cast<size_t>(p));
  for (int64_t i = 0; i < q; ++i) {
    for (int64_t j = 0; j < p; ++j) all[static_cast<size_t>(j)] = {dist2(query, i, points, j), j};
    std::partial_sort(all.begin(), all.begin() + k, all.end());
    auto& row = table.indices[static_cast<size_t>(i)];
    row.resize(static_cast<size_t>(k));
    for (int64_t t = 0; t < k; ++t) row[static_cast<size_t>(t)] = all[static_cast<size_t>(t)].second;
  }
  return table;
}

Tensor interpolate_features(const Tensor& src_pos, const Tensor& src_feat, const Tensor& query_pos,
                            int64_t k) {
  if (src_pos.rows() < 1) throw std::invalid_argument("interpolate_features: no sources");
  if (k < 1) throw std::invalid_argument("interpolate_features: k must be >= 1");
  if (!all_finite(src_pos) || !all_finite(query_pos)) {
    throw std::invalid_argument("interpolate_features: non-finite positions");
  }
  const int64_t k_eff = std::min<int64_t>(k, src_pos.rows());
  const NeighborTable nb = knn(query_pos, src_pos, k_eff);
  const int64_t q = query_pos.rows(), c = src_feat.cols();
  Tensor out(q, c);
  for (int64_t i = 0; i < q; ++i) {
    const auto& row = nb.indices[static_cast<size_t>(i)];
    const int64_t j0 = row[0];
    const double d2_near = dist2(query_pos, i, src_pos, j0);
    if (d2_near < 1e-16) {  // distance < 1e-8: exact copy
      for (int64_t cc = 0; cc < c; ++cc) out(i, cc) = src_feat(j0, cc);
      continue;
    }
    double wsum = 0.0;
    std::vector<double> w(row.size());
    for (size_t t = 0; t < row.size(); ++t) {
      w[t] = 1.0 / dist2(query_pos, i, src_pos, row[t]);
      wsum += w[t];
    }
    for (int64_t cc = 0; cc < c; ++cc) {
      double acc = 0.0;
      for (size_t t = 0; t < row.size(); ++t) acc += w[t] * src_feat(row[t], cc);
      out(i, cc) = acc / wsum;
    }
  }
  return out;
}

}  // namespace pointcmp::geo
