#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "pointcmp/common.hpp"
#include "pointcmp/geometry.hpp"

using namespace pointcmp;
using namespace pointcmp::geo;

namespace {

Tensor random_cloud(int64_t n, Rng& rng, double scale = 1.0) {
  Tensor t(n, 3);
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = scale * rng.normal();
  return t;
}

double d2(const Tensor& a, int64_t i, const Tensor& b, int64_t j) {
  double s = 0;
  for (int64_t d = 0; d < 3; ++d) {
    const double dd = a(i, d) - b(j, d);
    s += dd * dd;
  }
  return s;
}

// Oracle: recompute distance-to-selected-set from scratch at every pick.
std::vector<int64_t> fps_oracle(const Tensor& pts, int64_t n, int64_t start) {
  std::vector<int64_t> picked{start};
  while (static_cast<int64_t>(picked.size()) < n) {
    int64_t best = -1;
    double best_d = -1;
    for (int64_t i = 0; i < pts.rows(); ++i) {
      if (std::find(picked.begin(), picked.end(), i) != picked.end()) continue;
      double dmin = 1e300;
      for (int64_t p : picked) dmin = std::min(dmin, d2(pts, i, pts, p));
      if (dmin > best_d) {
        best_d = dmin;
        best = i;
      }
    }
    picked.push_back(best);
  }
  return picked;
}

NeighborTable ball_oracle(const Tensor& centers, const Tensor& pts, double radius, int64_t k) {
  NeighborTable t;
  const double r2 = radius * radius;
  for (int64_t i = 0; i < centers.rows(); ++i) {
    std::vector<std::pair<double, int64_t>> cand;
    for (int64_t j = 0; j < pts.rows(); ++j) {
      const double d = d2(centers, i, pts, j);
      if (d <= r2) cand.emplace_back(d, j);
    }
    std::vector<int64_t> sel;
    if (cand.empty()) {
      int64_t best = 0;
      double bd = 1e300;
      for (int64_t j = 0; j < pts.rows(); ++j) {
        const double d = d2(centers, i, pts, j);
        if (d < bd) {
          bd = d;
          best = j;
        }
      }
      sel.push_back(best);
    } else {
      std::sort(cand.begin(), cand.end());
      if (static_cast<int64_t>(cand.size()) > k) cand.resize(static_cast<size_t>(k));
      for (auto& [_, j] : cand) sel.push_back(j);
      std::sort(sel.begin(), sel.end());
    }
    const int64_t valid = static_cast<int64_t>(sel.size());
    while (static_cast<int64_t>(sel.size()) < k) sel.push_back(sel[0]);
    t.indices.push_back(sel);
    t.valid_count.push_back(valid);
  }
  return t;
}

NeighborTable knn_oracle(const Tensor& query, const Tensor& pts, int64_t k) {
  NeighborTable t;
  for (int64_t i = 0; i < query.rows(); ++i) {
    std::vector<std::pair<double, int64_t>> cand;
    for (int64_t j = 0; j < pts.rows(); ++j) cand.emplace_back(d2(query, i, pts, j), j);
    std::stable_sort(cand.begin(), cand.end());
    std::vector<int64_t> sel;
    for (int64_t s = 0; s < k; ++s) sel.push_back(cand[static_cast<size_t>(s)].second);
    t.indices.push_back(sel);
    t.valid_count.push_back(k);
  }
  return t;
}

Tensor interp_oracle(const Tensor& sp, const Tensor& sf, const Tensor& qp, int64_t k) {
  const int64_t keff = std::min<int64_t>(k, sp.rows());
  auto nb = knn_oracle(qp, sp, keff);
  Tensor out(qp.rows(), sf.cols());
  for (int64_t i = 0; i < qp.rows(); ++i) {
    const auto& row = nb.indices[static_cast<size_t>(i)];
    if (d2(qp, i, sp, row[0]) < 1e-16) {
      for (int64_t c = 0; c < sf.cols(); ++c) out(i, c) = sf(row[0], c);
      continue;
    }
    double wsum = 0;
    std::vector<double> w(row.size());
    for (size_t t2 = 0; t2 < row.size(); ++t2) {
      w[t2] = 1.0 / d2(qp, i, sp, row[t2]);
      wsum += w[t2];
    }
    for (int64_t c = 0; c < sf.cols(); ++c) {
      double acc = 0;
      for (size_t t2 = 0; t2 < row.size(); ++t2) acc += w[t2] * sf(row[t2], c);
      out(i, c) = acc / wsum;
    }
  }
  return out;
}

bool tables_equal(const NeighborTable& a, const NeighborTable& b) {
  if (a.indices.size() != b.indices.size()) return false;
  if (a.valid_count != b.valid_count) return false;
  for (size_t i = 0; i < a.indices.size(); ++i) {
    if (a.indices[i] != b.indices[i]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("fps: collinear endpoints and exhaustion") {
  Tensor pts(4, 3);
  for (int i = 0; i < 4; ++i) pts(i, 0) = i;  // x = 0,1,2,3
  auto two = farthest_point_sample(pts, 2, 0);
  CHECK(two == std::vector<int64_t>{0, 3});

  auto all = farthest_point_sample(pts, 4, 0);
  std::vector<int64_t> sorted = all;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == std::vector<int64_t>{0, 1, 2, 3});

  CHECK_THROWS(farthest_point_sample(pts, 5, 0));
  CHECK_THROWS(farthest_point_sample(pts, 2, 9));
}

TEST_CASE("fps matches the exhaustive greedy oracle") {
  Rng rng(101);
  for (int trial = 0; trial < 60; ++trial) {
    const int64_t p = 16 + static_cast<int64_t>(rng.next_below(48));
    Tensor pts = random_cloud(p, rng);
    const int64_t n = 2 + static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(p - 2)));
    const int64_t start = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(p)));
    CHECK(farthest_point_sample(pts, n, start) == fps_oracle(pts, n, start));
  }
}

TEST_CASE("ball query: radius cut, padding, and inclusion") {
  Tensor center(1, 3);  // origin
  Tensor pts(2, 3);
  pts(0, 0) = 0.05;
  pts(1, 0) = 0.2;
  auto t = ball_query(center, pts, 0.1, 9);
  CHECK(t.valid_count[0] == 1);
  for (int64_t k = 0; k < 9; ++k) CHECK(t.indices[0][static_cast<size_t>(k)] == 0);

  Rng rng(102);
  Tensor cloud = random_cloud(12, rng);
  auto all = ball_query(cloud, cloud, 100.0, 12);
  for (int64_t i = 0; i < 12; ++i) {
    CHECK(all.valid_count[static_cast<size_t>(i)] == 12);
  }

  CHECK_THROWS(ball_query(center, Tensor(0, 3), 0.1, 4));
  CHECK_THROWS(ball_query(center, pts, -1.0, 4));
}

TEST_CASE("ball query matches the exhaustive oracle") {
  Rng rng(103);
  for (int trial = 0; trial < 60; ++trial) {
    Tensor pts = random_cloud(128, rng);
    Tensor centers = random_cloud(16, rng);
    auto mine = ball_query(centers, pts, 0.3, 9);
    auto oracle = ball_oracle(centers, pts, 0.3, 9);
    CHECK(tables_equal(mine, oracle));
  }
}

TEST_CASE("knn basics and oracle") {
  Tensor pts(4, 3);
  for (int i = 0; i < 4; ++i) pts(i, 0) = i;
  Tensor q(1, 3);
  q(0, 0) = -5.0;
  auto t = knn(q, pts, 4);
  CHECK(t.indices[0] == std::vector<int64_t>{0, 1, 2, 3});

  Tensor q2(1, 3);
  q2(0, 0) = 2.0;
  CHECK(knn(q2, pts, 1).indices[0][0] == 2);
  CHECK_THROWS(knn(q, pts, 5));

  Rng rng(104);
  for (int trial = 0; trial < 60; ++trial) {
    Tensor cloud = random_cloud(64, rng);
    Tensor queries = random_cloud(8, rng);
    auto mine = knn(queries, cloud, 5);
    auto oracle = knn_oracle(queries, cloud, 5);
    CHECK(tables_equal(mine, oracle));
  }
}

TEST_CASE("interpolation: coincidence, symmetry, oracle") {
  Rng rng(105);
  Tensor sp = random_cloud(20, rng);
  Tensor sf = random_cloud(20, rng).reshaped(20, 3);

  Tensor q(1, 3);
  for (int d = 0; d < 3; ++d) q(0, d) = sp(7, d);
  Tensor out = interpolate_features(sp, sf, q, 3);
  for (int64_t c = 0; c < 3; ++c) CHECK(out(0, c) == sf(7, c));

  // midpoint of two sources, k = 2 effective
  Tensor sp2(2, 3);
  sp2(0, 0) = -1;
  sp2(1, 0) = 1;
  Tensor sf2(2, 2);
  sf2(0, 0) = 2;
  sf2(0, 1) = 0;
  sf2(1, 0) = 4;
  sf2(1, 1) = 6;
  Tensor mid(1, 3);
  Tensor got = interpolate_features(sp2, sf2, mid, 3);
  CHECK(got(0, 0) == doctest::Approx(3.0));
  CHECK(got(0, 1) == doctest::Approx(3.0));

  for (int trial = 0; trial < 60; ++trial) {
    Tensor spr = random_cloud(20, rng);
    Tensor sfr(20, 8);
    for (int64_t i = 0; i < sfr.numel(); ++i) sfr[i] = rng.normal();
    Tensor qr = random_cloud(5, rng);
    Tensor mine = interpolate_features(spr, sfr, qr, 3);
    Tensor oracle = interp_oracle(spr, sfr, qr, 3);
    for (int64_t i = 0; i < mine.numel(); ++i) CHECK(mine[i] == doctest::Approx(oracle[i]).epsilon(1e-6));
  }

  Tensor bad = random_cloud(3, rng);
  bad(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS(interpolate_features(bad, sf2, mid, 2));
}

TEST_CASE("permutation robustness: same geometric selections") {
  Rng rng(106);
  Tensor pts = random_cloud(40, rng);
  Tensor centers = random_cloud(6, rng);

  std::vector<int64_t> perm(40);
  std::iota(perm.begin(), perm.end(), 0);
  for (size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.next_below(i)]);
  Tensor shuffled(40, 3);
  for (int64_t i = 0; i < 40; ++i) {
    for (int64_t d = 0; d < 3; ++d) shuffled(perm[static_cast<size_t>(i)], d) = pts(i, d);
  }

  auto ball_a = ball_query(centers, pts, 0.6, 5);
  auto ball_b = ball_query(centers, shuffled, 0.6, 5);
  for (size_t i = 0; i < ball_a.indices.size(); ++i) {
    CHECK(ball_a.valid_count[i] == ball_b.valid_count[i]);
    std::vector<int64_t> remapped;
    for (int64_t j : ball_a.indices[i]) remapped.push_back(perm[static_cast<size_t>(j)]);
    std::sort(remapped.begin(), remapped.end());
    std::vector<int64_t> got = ball_b.indices[i];
    std::sort(got.begin(), got.end());
    CHECK(remapped == got);
  }

  auto knn_a = knn(centers, pts, 4);
  auto knn_b = knn(centers, shuffled, 4);
  for (size_t i = 0; i < knn_a.indices.size(); ++i) {
    for (size_t t = 0; t < 4; ++t) {
      CHECK(perm[static_cast<size_t>(knn_a.indices[i][t])] == knn_b.indices[i][t]);
    }
  }
}

TEST_CASE("interpolation is translation-equivariant and linear in features") {
  Rng rng(107);
  Tensor sp = random_cloud(15, rng);
  Tensor sf(15, 4);
  for (int64_t i = 0; i < sf.numel(); ++i) sf[i] = rng.normal();
  Tensor q = random_cloud(6, rng);

  Tensor sp_t = sp, q_t = q;
  const double shift[3] = {1.5, -2.0, 0.7};
  for (int64_t i = 0; i < sp.rows(); ++i)
    for (int64_t d = 0; d < 3; ++d) sp_t(i, d) += shift[d];
  for (int64_t i = 0; i < q.rows(); ++i)
    for (int64_t d = 0; d < 3; ++d) q_t(i, d) += shift[d];

  Tensor a = interpolate_features(sp, sf, q, 3);
  Tensor b = interpolate_features(sp_t, sf, q_t, 3);
  for (int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-9));

  // linearity: interp(2f + g) = 2 interp(f) + interp(g)
  Tensor sf2(15, 4), combo(15, 4);
  for (int64_t i = 0; i < sf2.numel(); ++i) sf2[i] = rng.normal();
  for (int64_t i = 0; i < combo.numel(); ++i) combo[i] = 2.0 * sf[i] + sf2[i];
  Tensor lhs = interpolate_features(sp, combo, q, 3);
  Tensor rhs_a = interpolate_features(sp, sf, q, 3);
  Tensor rhs_b = interpolate_features(sp, sf2, q, 3);
  for (int64_t i = 0; i < lhs.numel(); ++i) {
    CHECK(lhs[i] == doctest::Approx(2.0 * rhs_a[i] + rhs_b[i]).epsilon(1e-9));
  }
}

TEST_CASE("ball query is invariant to uniform scaling with the radius") {
  Rng rng(108);
  Tensor pts = random_cloud(50, rng);
  Tensor centers = random_cloud(7, rng);
  const double s = 3.7;
  Tensor pts_s = pts, centers_s = centers;
  for (int64_t i = 0; i < pts.numel(); ++i) pts_s[i] = pts[i] * s;
  for (int64_t i = 0; i < centers.numel(); ++i) centers_s[i] = centers[i] * s;
  auto a = ball_query(centers, pts, 0.4, 6);
  auto b = ball_query(centers_s, pts_s, 0.4 * s, 6);
  CHECK(tables_equal(a, b));
}
