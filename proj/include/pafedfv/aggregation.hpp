#pragma once

// Server-side model mixing: probe-set correlation between federated channels
// and the per-client personalized aggregate, plus plain weighted averaging.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "pafedfv/errors.hpp"
#include "pafedfv/nn.hpp"

namespace pafedfv {

// Server-held inputs used only to compare models.
class ProbeSet {
public:
  ProbeSet() = default;

  explicit ProbeSet(std::vector<std::vector<double>> items) : items_(std::move(items)) {
    if (items_.empty()) throw ConfigError("ProbeSet needs at least one item");
    for (const auto& it : items_) {
      detail::require_same_length(it.size(), items_.front().size(), "ProbeSet item");
      if (!detail::all_finite(it)) throw DomainError("ProbeSet item has non-finite entries");
    }
  }

  std::size_t size() const noexcept { return items_.size(); }
  std::size_t dim() const { return items_.front().size(); }
  const std::vector<std::vector<double>>& items() const noexcept { return items_; }

  friend bool operator==(const ProbeSet&, const ProbeSet&) = default;

private:
  std::vector<std::vector<double>> items_;
};

struct AggregationConfig {
  double gamma = 0.5;            // weight on the others' correlation-weighted mean
  double clamp_epsilon = 1e-6;   // floor applied to raw correlation entries

  void validate() const {
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("aggregation gamma must lie in [0, 1]");
    if (!(clamp_epsilon > 0.0) || !std::isfinite(clamp_epsilon)) {
      throw ConfigError("aggregation clamp_epsilon must be finite and > 0");
    }
  }
};

// Symmetric N x N correlation degrees; the diagonal is unused.
class CorrelationMatrix {
public:
  CorrelationMatrix() = default;

  explicit CorrelationMatrix(std::size_t n) : n_(n), entries_(n * n, 0.0) {
    if (n < 2) throw ConfigError("CorrelationMatrix needs at least two clients");
  }

  std::size_t size() const noexcept { return n_; }

  double at(std::size_t n, std::size_t u) const {
    check(n, u);
    return entries_[n * n_ + u];
  }

  void set(std::size_t n, std::size_t u, double v) {
    check(n, u);
    if (!std::isfinite(v)) throw DomainError("CorrelationMatrix entry must be finite");
    entries_[n * n_ + u] = v;
    entries_[u * n_ + n] = v;
  }

  // Sum of row n over the other clients.
  double row_sum(std::size_t n) const {
    double s = 0.0;
    for (std::size_t u = 0; u < n_; ++u) {
      if (u != n) s += at(n, u);
    }
    return s;
  }

  // Uniform matrix with every off-diagonal entry equal to `value`.
  static CorrelationMatrix uniform(std::size_t n, double value) {
    CorrelationMatrix r(n);
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = a + 1; b < n; ++b) r.set(a, b, value);
    return r;
  }

private:
  void check(std::size_t n, std::size_t u) const {
    if (n >= n_ || u >= n_) throw ShapeError("CorrelationMatrix index out of range");
    if (n == u) throw DomainError("CorrelationMatrix diagonal is undefined");
  }

  std::size_t n_ = 0;
  std::vector<double> entries_;
};

// Sum over probe items of the cosine similarity between paired embeddings.
inline double correlation_degree(std::span<const std::vector<double>> emb_n,
                                 std::span<const std::vector<double>> emb_u) {
  detail::require_same_length(emb_n.size(), emb_u.size(), "correlation_degree");
  double r = 0.0;
  for (std::size_t t = 0; t < emb_n.size(); ++t) {
    const auto& a = emb_n[t];
    const auto& b = emb_u[t];
    detail::require_same_length(a.size(), b.size(), "correlation_degree embedding");
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t d = 0; d < a.size(); ++d) {
      ab += a[d] * b[d];
      aa += a[d] * a[d];
      bb += b[d] * b[d];
    }
    if (aa == 0.0 || bb == 0.0) throw DomainError("correlation_degree: zero-norm embedding");
    r += ab / (std::sqrt(aa) * std::sqrt(bb));
  }
  return r;
}

// Embeds every probe item with one model.
inline std::vector<std::vector<double>> embed_probes(const ChannelModel& model, const ProbeSet& probes) {
  std::vector<std::vector<double>> out;
  out.reserve(probes.size());
  for (const auto& item : probes.items()) out.push_back(forward(model, item));
  return out;
}

// Correlation from per-model probe embeddings, clamped to max(R, epsilon).
inline CorrelationMatrix correlation_from_embeddings(std::span<const std::vector<std::vector<double>>> embeddings,
                                                     const AggregationConfig& cfg) {
  cfg.validate();
  CorrelationMatrix r(embeddings.size());
  for (std::size_t n = 0; n < embeddings.size(); ++n) {
    for (std::size_t u = n + 1; u < embeddings.size(); ++u) {
      const double raw = correlation_degree(embeddings[n], embeddings[u]);
      r.set(n, u, std::max(raw, cfg.clamp_epsilon));
    }
  }
  return r;
}

// Each model embeds the probes once; all N rows reuse those embeddings.
inline CorrelationMatrix build_correlation_matrix(std::span<const ChannelModel> models, const ProbeSet& probes,
                                                  const AggregationConfig& cfg) {
  if (models.size() < 2) throw ConfigError("build_correlation_matrix needs at least two models");
  for (const auto& m : models) {
    if (!(m.arch() == models.front().arch())) throw ShapeError("build_correlation_matrix: architectures differ");
  }
  std::vector<std::vector<std::vector<double>>> emb;
  emb.reserve(models.size());
  for (const auto& m : models) emb.push_back(embed_probes(m, probes));
  return correlation_from_embeddings(emb, cfg);
}

// Effective mixing weight of every model in client n's aggregate. Sums to 1.
inline std::vector<double> personalized_weights(const CorrelationMatrix& r, const AggregationConfig& cfg,
                                                std::size_t n) {
  cfg.validate();
  if (n >= r.size()) throw ShapeError("personalized_weights: client index out of range");
  const double sum = r.row_sum(n);
  if (!(sum > 0.0)) throw DomainError("personalized_weights: correlation row sum must be > 0");
  std::vector<double> w(r.size(), 0.0);
  for (std::size_t u = 0; u < r.size(); ++u) {
    w[u] = u == n ? 1.0 - cfg.gamma : cfg.gamma * (r.at(n, u) / sum);
  }
  return w;
}

// gamma * sum_u (R[n][u] / sum_k R[n][k]) * models[u] + (1 - gamma) * models[n].
inline ParamVector personalized_aggregate(std::span<const ParamVector> models, const CorrelationMatrix& r,
                                          const AggregationConfig& cfg, std::size_t n) {
  detail::require_same_length(models.size(), r.size(), "personalized_aggregate models");
  for (const auto& m : models) detail::require_same_length(m.size(), models.front().size(), "personalized_aggregate");
  cfg.validate();
  if (cfg.gamma == 0.0) return models[n];

  const double sum = r.row_sum(n);
  if (!(sum > 0.0)) throw DomainError("personalized_aggregate: correlation row sum must be > 0");
  const std::size_t len = models.front().size();
  std::vector<double> mixed(len, 0.0);
  for (std::size_t u = 0; u < models.size(); ++u) {
    if (u == n) continue;
    const double w = r.at(n, u) / sum;
    const auto& p = models[u];
    for (std::size_t i = 0; i < len; ++i) mixed[i] += w * p[i];
  }
  const auto& own = models[n];
  for (std::size_t i = 0; i < len; ++i) mixed[i] = cfg.gamma * mixed[i] + (1.0 - cfg.gamma) * own[i];
  return ParamVector(std::move(mixed));
}

// Element-wise weighted mean; weights must be >= 0 and sum to 1.
inline ParamVector fedavg_aggregate(std::span<const ParamVector> models, std::span<const double> weights) {
  if (models.empty()) throw ShapeError("fedavg_aggregate: no models");
  detail::require_same_length(models.size(), weights.size(), "fedavg_aggregate weights");
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw DomainError("fedavg_aggregate: weights must be finite and >= 0");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) throw DomainError("fedavg_aggregate: weights must sum to 1");
  const std::size_t len = models.front().size();
  std::vector<double> out(len, 0.0);
  for (std::size_t k = 0; k < models.size(); ++k) {
    detail::require_same_length(models[k].size(), len, "fedavg_aggregate");
    for (std::size_t i = 0; i < len; ++i) out[i] += weights[k] * models[k][i];
  }
  return ParamVector(std::move(out));
}

}  // namespace pafedfv
