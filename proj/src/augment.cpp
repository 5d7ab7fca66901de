#include "pointcmp/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace pointcmp::aug {

namespace {

constexpr double kNormEps = 1e-12;

void check_finite(const Tensor& t, const char* what) {
  if (!all_finite(t)) throw std::invalid_argument(std::string(what) + ": non-finite input");
}

std::vector<double> row_norms(const Tensor& feat) {
  std::vector<double> norms(static_cast<size_t>(feat.rows()));
  for (int64_t i = 0; i < feat.rows(); ++i) {
    double s = 0.0;
    for (int64_t c = 0; c < feat.cols(); ++c) s += feat(i, c) * feat(i, c);
    norms[static_cast<size_t>(i)] = std::sqrt(s) + kNormEps;
  }
  return norms;
}

double global_norm(const Tensor& g) {
  double s = 0.0;
  for (int64_t c = 0; c < g.numel(); ++c) s += g[c] * g[c];
  return std::sqrt(s) + kNormEps;
}

// Indices of the `count` largest scores, ties to the smaller index.
std::vector<int64_t> top_indices(const std::vector<double>& score, int64_t count) {
  std::vector<int64_t> order(score.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    if (score[static_cast<size_t>(a)] != score[static_cast<size_t>(b)]) {
      return score[static_cast<size_t>(a)] > score[static_cast<size_t>(b)];
    }
    return a < b;
  });
  order.resize(static_cast<size_t>(count));
  return order;
}

}  // namespace

Tensor token_global_similarity(const Tensor& feat, const Tensor& g) {
  check_finite(feat, "token_global_similarity");
  check_finite(g, "token_global_similarity");
  if (feat.cols() != g.numel()) throw std::invalid_argument("token_global_similarity: dim mismatch");
  const auto norms = row_norms(feat);
  const double gn = global_norm(g);
  Tensor sim(feat.rows(), 1);
  for (int64_t i = 0; i < feat.rows(); ++i) {
    double dot = 0.0;
    for (int64_t c = 0; c < feat.cols(); ++c) dot += feat(i, c) * g[c];
    sim[i] = dot / (norms[static_cast<size_t>(i)] * gn);
  }
  return sim;
}

std::vector<uint8_t> select_dominant(const Tensor& similarity, int L, int N, double fraction) {
  if (fraction <= 0.0 || fraction >= 1.0) {
    throw std::invalid_argument("select_dominant: fraction must be in (0, 1)");
  }
  const int64_t total = static_cast<int64_t>(L) * N;
  if (similarity.numel() != total) throw std::invalid_argument("select_dominant: size mismatch");
  const int64_t count = static_cast<int64_t>(fraction * static_cast<double>(total));
  std::vector<double> score(static_cast<size_t>(total));
  for (int64_t i = 0; i < total; ++i) score[static_cast<size_t>(i)] = similarity[i];
  std::vector<uint8_t> dominant(static_cast<size_t>(total), 0);
  for (int64_t idx : top_indices(score, count)) dominant[static_cast<size_t>(idx)] = 1;
  return dominant;
}

MaskSpec select_masked_segments(const std::vector<uint8_t>& dominant, int L, int N, int L_m) {
  if (L_m < 1 || L_m >= L) {
    throw ConfigError("select_masked_segments: require 1 <= L_m < L (a visible segment must remain)");
  }
  if (dominant.size() != static_cast<size_t>(L) * static_cast<size_t>(N)) {
    throw std::invalid_argument("select_masked_segments: dominant size mismatch");
  }
  std::vector<double> counts(static_cast<size_t>(L), 0.0);
  for (int l = 0; l < L; ++l) {
    for (int n = 0; n < N; ++n) {
      counts[static_cast<size_t>(l)] += dominant[static_cast<size_t>(l) * N + n];
    }
  }
  MaskSpec spec;
  spec.L = L;
  spec.N = N;
  spec.dominant = dominant;
  spec.masked.assign(static_cast<size_t>(L) * N, 0);
  for (int64_t l : top_indices(counts, L_m)) spec.masked_segments.push_back(static_cast<int>(l));
  std::sort(spec.masked_segments.begin(), spec.masked_segments.end());
  for (int l : spec.masked_segments) {
    for (int n = 0; n < N; ++n) spec.masked[static_cast<size_t>(l) * N + n] = 1;
  }
  return spec;
}

Tensor channel_correlation(const Tensor& feat, const Tensor& g) {
  check_finite(feat, "channel_correlation");
  check_finite(g, "channel_correlation");
  if (feat.cols() != g.numel()) throw std::invalid_argument("channel_correlation: dim mismatch");
  const auto norms = row_norms(feat);
  const double gn = global_norm(g);
  Tensor corr(feat.rows(), feat.cols());
  for (int64_t i = 0; i < feat.rows(); ++i) {
    for (int64_t c = 0; c < feat.cols(); ++c) {
      corr(i, c) = (feat(i, c) / norms[static_cast<size_t>(i)]) * (g[c] / gn);
    }
  }
  return corr;
}

Tensor rank_sum_channels(const Tensor& corr) {
  check_finite(corr, "rank_sum_channels");
  const int64_t tokens = corr.rows(), channels = corr.cols();
  Tensor rank_sum(1, channels);
  std::vector<int64_t> order(static_cast<size_t>(channels));
  for (int64_t i = 0; i < tokens; ++i) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
      if (corr(i, a) != corr(i, b)) return corr(i, a) < corr(i, b);
      return a < b;
    });
    for (int64_t pos = 0; pos < channels; ++pos) {
      rank_sum[order[static_cast<size_t>(pos)]] += static_cast<double>(pos + 1);
    }
  }
  return rank_sum;
}

std::pair<Tensor, EraseSpec> erase_principal_channels(const Tensor& feat, const Tensor& rank_sum,
                                                      double fraction) {
  if (fraction <= 0.0 || fraction >= 1.0) {
    throw std::invalid_argument("erase_principal_channels: fraction must be in (0, 1)");
  }
  const int64_t channels = feat.cols();
  if (rank_sum.numel() != channels) {
    throw std::invalid_argument("erase_principal_channels: rank_sum size mismatch");
  }
  const int64_t count = static_cast<int64_t>(fraction * static_cast<double>(channels));
  std::vector<double> score(static_cast<size_t>(channels));
  for (int64_t c = 0; c < channels; ++c) score[static_cast<size_t>(c)] = rank_sum[c];
  EraseSpec spec;
  spec.rank_sum = rank_sum;
  for (int64_t c : top_indices(score, count)) spec.erased_channels.push_back(static_cast<int>(c));
  std::sort(spec.erased_channels.begin(), spec.erased_channels.end());
  Tensor erased = feat;
  for (int c : spec.erased_channels) {
    for (int64_t i = 0; i < feat.rows(); ++i) erased(i, c) = 0.0;
  }
  return {std::move(erased), std::move(spec)};
}

MaskSpec random_mask_segments(int L, int N, int L_m, Rng& rng) {
  if (L_m < 1 || L_m >= L) {
    throw ConfigError("random_mask_segments: require 1 <= L_m < L");
  }
  MaskSpec spec;
  spec.L = L;
  spec.N = N;
  spec.masked.assign(static_cast<size_t>(L) * N, 0);
  auto segs = rng.sample_without_replacement(L, L_m);
  std::sort(segs.begin(), segs.end());
  spec.masked_segments = segs;
  for (int l : segs) {
    for (int n = 0; n < N; ++n) spec.masked[static_cast<size_t>(l) * N + n] = 1;
  }
  return spec;
}

MaskSpec random_mask_tokens(int L, int N, double token_fraction, Rng& rng) {
  if (token_fraction <= 0.0 || token_fraction >= 1.0) {
    throw ConfigError("random_mask_tokens: fraction must be in (0, 1)");
  }
  const int64_t total = static_cast<int64_t>(L) * N;
  const int64_t count = static_cast<int64_t>(token_fraction * static_cast<double>(total));
  if (count < 1) throw ConfigError("random_mask_tokens: fraction masks zero tokens");
  MaskSpec spec;
  spec.L = L;
  spec.N = N;
  spec.masked.assign(static_cast<size_t>(total), 0);
  for (int idx : rng.sample_without_replacement(static_cast<int>(total), static_cast<int>(count))) {
    spec.masked[static_cast<size_t>(idx)] = 1;
  }
  // Segments that happen to be fully masked.
  for (int l = 0; l < L; ++l) {
    bool full = true;
    for (int n = 0; n < N && full; ++n) full = spec.masked[static_cast<size_t>(l) * N + n] != 0;
    if (full) spec.masked_segments.push_back(l);
  }
  return spec;
}

EraseSpec random_erase_spec(int channels, double fraction, Rng& rng) {
  if (fraction <= 0.0 || fraction >= 1.0) {
    throw ConfigError("random_erase_spec: fraction must be in (0, 1)");
  }
  const int count = static_cast<int>(fraction * static_cast<double>(channels));
  EraseSpec spec;
  spec.erased_channels = rng.sample_without_replacement(channels, count);
  std::sort(spec.erased_channels.begin(), spec.erased_channels.end());
  return spec;
}

MaskSpec similarity_mask_tokens(const Tensor& similarity, int L, int N, double token_fraction) {
  if (token_fraction <= 0.0 || token_fraction >= 1.0) {
    throw ConfigError("similarity_mask_tokens: fraction must be in (0, 1)");
  }
  const int64_t total = static_cast<int64_t>(L) * N;
  const int64_t count = static_cast<int64_t>(token_fraction * static_cast<double>(total));
  if (count < 1) throw ConfigError("similarity_mask_tokens: fraction masks zero tokens");
  MaskSpec spec;
  spec.L = L;
  spec.N = N;
  spec.similarity = similarity;
  spec.masked.assign(static_cast<size_t>(total), 0);
  std::vector<double> score(static_cast<size_t>(total));
  for (int64_t i = 0; i < total; ++i) score[static_cast<size_t>(i)] = similarity[i];
  for (int64_t idx : top_indices(score, count)) spec.masked[static_cast<size_t>(idx)] = 1;
  for (int l = 0; l < L; ++l) {
    bool full = true;
    for (int n = 0; n < N && full; ++n) full = spec.masked[static_cast<size_t>(l) * N + n] != 0;
    if (full) spec.masked_segments.push_back(l);
  }
  return spec;
}

MaskSpec build_mask_spec(const Tensor& feat, const Tensor& g, int L, int N,
                         double dominant_fraction, int L_m) {
  Tensor sim = token_global_similarity(feat, g);
  auto dominant = select_dominant(sim, L, N, dominant_fraction);
  MaskSpec spec = select_masked_segments(dominant, L, N, L_m);
  spec.similarity = std::move(sim);
  return spec;
}

std::string describe_mask(const MaskSpec& spec) {
  std::ostringstream os;
  os << "masked_segments=";
  for (size_t i = 0; i < spec.masked_segments.size(); ++i) {
    if (i) os << ",";
    os << spec.masked_segments[i];
  }
  os << " masked_tokens=" << spec.masked_count();
  return os.str();
}

std::string describe_erase(const EraseSpec& spec) {
  std::ostringstream os;
  os << "erased_channels=";
  for (size_t i = 0; i < spec.erased_channels.size(); ++i) {
    if (i) os << ",";
    os << spec.erased_channels[i];
  }
  return os.str();
}

}  // namespace pointcmp::aug
