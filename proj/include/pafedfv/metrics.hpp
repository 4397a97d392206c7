#pragma once

// Open-set verification scoring: pairwise cosine scores, EER and TAR@FAR.
//
// Conventions: a pair is accepted when score >= threshold. FAR(t) is the
// fraction of impostor scores >= t, FRR(t) the fraction of genuine scores < t.
// Thresholds range over the observed scores plus +infinity.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "pafedfv/errors.hpp"
#include "pafedfv/random.hpp"
#include "pafedfv/text_io.hpp"

namespace pafedfv {

struct ScoreSet {
  std::vector<double> genuine;
  std::vector<double> impostor;
};

inline constexpr std::size_t kDefaultImpostorCap = 50'000;

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("cosine_similarity: length mismatch");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) throw DomainError("cosine_similarity: zero-norm embedding");
  return ab / (std::sqrt(aa) * std::sqrt(bb));
}

// All same-label pairs are genuine, all cross-label pairs impostor. When there
// are more impostor pairs than `impostor_cap`, a seeded subset is kept (in
// enumeration order).
inline ScoreSet score_pairs(std::span<const std::vector<double>> embeddings, std::span<const std::size_t> labels,
                            std::size_t impostor_cap = kDefaultImpostorCap, std::uint64_t seed = 0) {
  if (embeddings.size() != labels.size()) throw ShapeError("score_pairs: embeddings and labels differ in length");
  ScoreSet s;
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    for (std::size_t j = i + 1; j < embeddings.size(); ++j) {
      const double c = cosine_similarity(embeddings[i], embeddings[j]);
      (labels[i] == labels[j] ? s.genuine : s.impostor).push_back(c);
    }
  }
  if (s.genuine.empty()) throw DomainError("score_pairs: no genuine pairs (need an identity with >= 2 samples)");
  if (s.impostor.empty()) throw DomainError("score_pairs: no impostor pairs (need >= 2 identities)");
  if (s.impostor.size() > impostor_cap) {
    std::vector<std::size_t> idx(s.impostor.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng(mix_seed(seed, 0x5C));
    for (std::size_t i = 0; i < impostor_cap; ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
    idx.resize(impostor_cap);
    std::sort(idx.begin(), idx.end());
    std::vector<double> kept;
    kept.reserve(impostor_cap);
    for (auto i : idx) kept.push_back(s.impostor[i]);
    s.impostor = std::move(kept);
  }
  return s;
}

namespace detail {

inline void check_scores(const ScoreSet& s) {
  if (s.genuine.empty() || s.impostor.empty()) throw DomainError("metrics need non-empty genuine and impostor scores");
  for (const auto* v : {&s.genuine, &s.impostor}) {
    for (double x : *v) {
      if (!std::isfinite(x)) throw DomainError("metrics: non-finite score");
    }
  }
}

struct OperatingPoint {
  double far;
  double frr;
};

// Operating points at every distinct observed score in increasing order, then +inf.
inline std::vector<OperatingPoint> sweep(const ScoreSet& s) {
  std::vector<double> g = s.genuine, im = s.impostor;
  std::sort(g.begin(), g.end());
  std::sort(im.begin(), im.end());
  std::vector<double> all = g;
  all.insert(all.end(), im.begin(), im.end());
  std::sort(all.begin(), all.end());
  all.erase(std::unique(all.begin(), all.end()), all.end());

  const double ng = static_cast<double>(g.size());
  const double ni = static_cast<double>(im.size());
  std::vector<OperatingPoint> pts;
  pts.reserve(all.size() + 1);
  std::size_t gi = 0, ii = 0;  // counts strictly below the threshold
  for (double t : all) {
    while (gi < g.size() && g[gi] < t) ++gi;
    while (ii < im.size() && im[ii] < t) ++ii;
    pts.push_back({static_cast<double>(im.size() - ii) / ni, static_cast<double>(gi) / ng});
  }
  pts.push_back({0.0, 1.0});
  return pts;
}

}  // namespace detail

// Error rate where FAR = FRR, linearly interpolated between the two adjacent
// operating points at which FAR - FRR changes sign.
inline double eer(const ScoreSet& s) {
  detail::check_scores(s);
  const auto pts = detail::sweep(s);
  for (std::size_t k = 0; k + 1 < pts.size(); ++k) {
    const double da = pts[k].far - pts[k].frr;
    const double db = pts[k + 1].far - pts[k + 1].frr;
    if (da == 0.0) return pts[k].far;
    if (da > 0.0 && db <= 0.0) {
      if (db == 0.0) return pts[k + 1].far;
      const double a = da / (da - db);
      return pts[k].far + a * (pts[k + 1].far - pts[k].far);
    }
  }
  return pts.back().far;  // unreachable: the last point has FAR - FRR = -1
}

// TAR at the lowest threshold whose empirical FAR <= far_target; no interpolation.
inline double tar_at_far(const ScoreSet& s, double far_target = 0.01) {
  detail::check_scores(s);
  if (!(far_target > 0.0 && far_target < 1.0)) throw DomainError("tar_at_far: target must lie in (0, 1)");
  const auto pts = detail::sweep(s);
  for (const auto& p : pts) {
    if (p.far <= far_target) return 1.0 - p.frr;
  }
  return 0.0;
}

struct MetricsRecord {
  std::size_t client_id = 0;
  std::size_t round = 0;
  double eer = 0.0;
  double tar_at_far01 = 0.0;
  std::size_t n_genuine = 0;
  std::size_t n_impostor = 0;
};

inline MetricsRecord evaluate_scores(std::size_t client_id, std::size_t round, const ScoreSet& s) {
  return {client_id, round, eer(s), tar_at_far(s, 0.01), s.genuine.size(), s.impostor.size()};
}

inline constexpr const char* kMetricsCsvHeader = "client_id,round,eer,tar_at_far01,n_genuine,n_impostor";

inline std::string to_csv(std::span<const MetricsRecord> rows) {
  std::ostringstream os;
  os << kMetricsCsvHeader << '\n';
  for (const auto& r : rows) {
    os << r.client_id << ',' << r.round << ',' << format_double(r.eer) << ',' << format_double(r.tar_at_far01) << ','
       << r.n_genuine << ',' << r.n_impostor << '\n';
  }
  return os.str();
}

}  // namespace pafedfv
