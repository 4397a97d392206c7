#pragma once

// Client-side objectives: the two cross-entropy terms, center loss, the
// channel-alignment cosine loss, and their weighted total.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "pafedfv/errors.hpp"
#include "pafedfv/nn.hpp"

namespace pafedfv {

// Weights of the alignment, fused cross-entropy, and center terms in the total loss.
struct LossWeights {
  double alpha1 = 0.5;   // fv_cos
  double alpha2 = 1.0;   // cross-entropy on fused logits
  double alpha3 = 0.01;  // center

  void validate() const {
    for (double a : {alpha1, alpha2, alpha3}) {
      if (!(a >= 0.0) || !std::isfinite(a)) throw ConfigError("loss weights must be finite and >= 0");
    }
    if (alpha1 == 0.0 && alpha2 == 0.0 && alpha3 == 0.0) throw ConfigError("at least one loss weight must be > 0");
  }

  // Plain cross-entropy training, the baseline the total loss replaces.
  static LossWeights cross_entropy_only() { return {0.0, 1.0, 0.0}; }
};

namespace detail {

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline std::size_t hot_index(std::span<const double> onehot) {
  std::size_t hot = onehot.size();
  for (std::size_t i = 0; i < onehot.size(); ++i) {
    if (onehot[i] == 1.0) {
      if (hot != onehot.size()) throw DomainError("cross_entropy: label has several hot indices");
      hot = i;
    } else if (onehot[i] != 0.0) {
      throw DomainError("cross_entropy: label entries must be 0 or 1");
    }
  }
  if (hot == onehot.size()) throw DomainError("cross_entropy: label has no hot index");
  return hot;
}

inline double log_sum_exp(std::span<const double> f) {
  const double m = *std::max_element(f.begin(), f.end());
  double s = 0.0;
  for (double x : f) s += std::exp(x - m);
  return m + std::log(s);
}

}  // namespace detail

// -log softmax(logits)[label], stabilized by log-sum-exp.
inline double cross_entropy(std::span<const double> logits, std::size_t label) {
  if (logits.size() < 2) throw ShapeError("cross_entropy: need at least 2 classes");
  if (label >= logits.size()) throw DomainError("cross_entropy: label out of range");
  return std::max(0.0, detail::log_sum_exp(logits) - logits[label]);
}

inline double cross_entropy(std::span<const double> logits, std::span<const double> label_onehot) {
  detail::require_same_length(logits.size(), label_onehot.size(), "cross_entropy");
  return cross_entropy(logits, detail::hot_index(label_onehot));
}

// d/dlogits: softmax(logits) - onehot(label).
inline std::vector<double> cross_entropy_grad(std::span<const double> logits, std::size_t label) {
  if (label >= logits.size()) throw DomainError("cross_entropy_grad: label out of range");
  const double lse = detail::log_sum_exp(logits);
  std::vector<double> g(logits.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = std::exp(logits[i] - lse);
  g[label] -= 1.0;
  return g;
}

// |cos(F_p, F_g) - 1|. Zero-norm inputs are rejected.
inline double fv_cos_loss(std::span<const double> fp, std::span<const double> fg) {
  detail::require_same_length(fp.size(), fg.size(), "fv_cos_loss");
  const double np = detail::norm(fp);
  const double ng = detail::norm(fg);
  if (np == 0.0 || ng == 0.0) throw DomainError("fv_cos_loss: zero-norm representation");
  return std::abs(detail::dot(fp, fg) / (np * ng) - 1.0);
}

struct PairGradient {
  std::vector<double> first;
  std::vector<double> second;
};

// Gradient of fv_cos_loss w.r.t. both inputs. Since cos <= 1 the loss is 1 - cos.
inline PairGradient fv_cos_grad(std::span<const double> fp, std::span<const double> fg) {
  detail::require_same_length(fp.size(), fg.size(), "fv_cos_grad");
  const double np = detail::norm(fp);
  const double ng = detail::norm(fg);
  if (np == 0.0 || ng == 0.0) throw DomainError("fv_cos_grad: zero-norm representation");
  const double c = detail::dot(fp, fg) / (np * ng);
  PairGradient g{std::vector<double>(fp.size()), std::vector<double>(fg.size())};
  for (std::size_t i = 0; i < fp.size(); ++i) {
    g.first[i] = -(fg[i] / (np * ng) - c * fp[i] / (np * np));
    g.second[i] = -(fp[i] / (np * ng) - c * fg[i] / (ng * ng));
  }
  return g;
}

// Per-class embedding centers, owned by one client. Labels are dense 0..K-1.
class CenterBank {
public:
  CenterBank() = default;

  CenterBank(std::size_t num_classes, std::size_t dim, double center_lr)
      : centers_(num_classes, std::vector<double>(dim, 0.0)), dim_(dim), lr_(center_lr) {
    if (!(center_lr >= 0.0 && center_lr <= 1.0)) throw ConfigError("center learning rate must lie in [0, 1]");
  }

  CenterBank(std::vector<std::vector<double>> centers, double center_lr)
      : centers_(std::move(centers)), dim_(centers_.empty() ? 0 : centers_.front().size()), lr_(center_lr) {
    if (!(center_lr >= 0.0 && center_lr <= 1.0)) throw ConfigError("center learning rate must lie in [0, 1]");
    for (const auto& c : centers_) {
      detail::require_same_length(c.size(), dim_, "CenterBank center");
      if (!detail::all_finite(c)) throw DomainError("CenterBank: non-finite center");
    }
  }

  std::size_t num_classes() const noexcept { return centers_.size(); }
  std::size_t dim() const noexcept { return dim_; }
  double learning_rate() const noexcept { return lr_; }

  const std::vector<double>& center(std::size_t label) const {
    if (label >= centers_.size()) throw LookupError("CenterBank: no center for label " + std::to_string(label));
    return centers_[label];
  }

  void set_center(std::size_t label, std::vector<double> c) {
    if (label >= centers_.size()) throw LookupError("CenterBank: no center for label " + std::to_string(label));
    detail::require_same_length(c.size(), dim_, "CenterBank::set_center");
    centers_[label] = std::move(c);
  }

  friend bool operator==(const CenterBank&, const CenterBank&) = default;

private:
  std::vector<std::vector<double>> centers_;
  std::size_t dim_ = 0;
  double lr_ = 0.5;
};

// 1/2 * sum_i ||x_i - c_{y_i}||^2.
inline double center_loss(std::span<const std::vector<double>> embeddings, std::span<const std::size_t> labels,
                          const CenterBank& bank) {
  detail::require_same_length(embeddings.size(), labels.size(), "center_loss");
  double s = 0.0;
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    const auto& c = bank.center(labels[i]);
    detail::require_same_length(embeddings[i].size(), c.size(), "center_loss embedding");
    for (std::size_t d = 0; d < c.size(); ++d) {
      const double diff = embeddings[i][d] - c[d];
      s += diff * diff;
    }
  }
  return 0.5 * s;
}

// Each class seen in the batch moves its center toward the class batch mean:
// c <- c + lr * (mean - c). Classes absent from the batch are untouched.
inline CenterBank update_centers(const CenterBank& bank, std::span<const std::vector<double>> embeddings,
                                 std::span<const std::size_t> labels) {
  detail::require_same_length(embeddings.size(), labels.size(), "update_centers");
  CenterBank next = bank;
  std::vector<std::vector<double>> sums(bank.num_classes());
  std::vector<std::size_t> counts(bank.num_classes(), 0);
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    const auto& c = bank.center(labels[i]);
    detail::require_same_length(embeddings[i].size(), c.size(), "update_centers embedding");
    auto& s = sums[labels[i]];
    if (s.empty()) s.assign(c.size(), 0.0);
    for (std::size_t d = 0; d < c.size(); ++d) s[d] += embeddings[i][d];
    ++counts[labels[i]];
  }
  const double lr = bank.learning_rate();
  for (std::size_t k = 0; k < counts.size(); ++k) {
    if (counts[k] == 0) continue;
    std::vector<double> c = bank.center(k);
    for (std::size_t d = 0; d < c.size(); ++d) {
      const double mean = sums[k][d] / static_cast<double>(counts[k]);
      c[d] += lr * (mean - c[d]);
    }
    next.set_center(k, std::move(c));
  }
  return next;
}

inline double total_loss(double fv, double ce2, double cen, const LossWeights& w) {
  return w.alpha1 * fv + w.alpha2 * ce2 + w.alpha3 * cen;
}

// The four trainable pieces that produce fused logits.
struct FusedPipeline {
  const ChannelModel& local;
  const ChannelModel& fed;
  const Head& fusion;
  const Head& classifier;

  void check() const {
    if (local.in_dim() != fed.in_dim()) throw ShapeError("channels must share an input dimension");
    detail::require_same_length(local.out_dim() + fed.out_dim(), fusion.in_dim(), "fusion input");
    detail::require_same_length(fusion.out_dim(), classifier.in_dim(), "classifier input");
  }
};

inline std::vector<double> concat(std::span<const double> a, std::span<const double> b) {
  std::vector<double> out(a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

// fusion(concat[local(x), fed(x)]), the representation used for matching.
inline std::vector<double> fused_embedding(const ChannelModel& local, const ChannelModel& fed, const Head& fusion,
                                           std::span<const double> input) {
  if (local.in_dim() != fed.in_dim()) throw ShapeError("channels must share an input dimension");
  detail::require_same_length(local.out_dim() + fed.out_dim(), fusion.in_dim(), "fusion input");
  return forward(fusion, concat(forward(local, input), forward(fed, input)));
}

inline std::vector<double> fused_logits(const ChannelModel& local, const ChannelModel& fed, const Head& fusion,
                                        const Head& classifier, std::span<const double> input) {
  FusedPipeline{local, fed, fusion, classifier}.check();
  return forward(classifier, fused_embedding(local, fed, fusion, input));
}

struct TotalLossTerms {
  double fv_cos = 0.0;
  double cross2 = 0.0;
  double center = 0.0;
  double total = 0.0;
};

struct TotalLossResult {
  TotalLossTerms terms;  // batch means
  GradientRecord local;
  GradientRecord fed;
  GradientRecord fusion;
  GradientRecord classifier;
  std::vector<std::vector<double>> embeddings;  // fused, one per sample
};

// Batch-mean total loss and its exact gradient w.r.t. every pipeline parameter.
// The center term is 1/2 ||e - c_y||^2 on the fused embedding; centers are constants here.
inline TotalLossResult total_loss_batch(const FusedPipeline& p, std::span<const std::vector<double>> inputs,
                                        std::span<const std::size_t> labels, const CenterBank& bank,
                                        const LossWeights& w) {
  p.check();
  detail::require_same_length(inputs.size(), labels.size(), "total_loss_batch");
  if (inputs.empty()) throw ShapeError("total_loss_batch: empty batch");
  const double inv_n = 1.0 / static_cast<double>(inputs.size());

  GradientAccumulator g_local(p.local.params().size());
  GradientAccumulator g_fed(p.fed.params().size());
  GradientAccumulator g_fusion(p.fusion.params().size());
  GradientAccumulator g_clf(p.classifier.params().size());
  TotalLossResult r;
  r.embeddings.reserve(inputs.size());

  const std::size_t dl = p.local.out_dim();
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto& x = inputs[i];
    const auto fl = forward(p.local, x);
    const auto fg = forward(p.fed, x);
    const auto joined = concat(fl, fg);
    auto emb = forward(p.fusion, joined);
    const auto logits = forward(p.classifier, emb);

    const double ce = cross_entropy(logits, labels[i]);
    const double fv = fv_cos_loss(fl, fg);
    const auto& c = bank.center(labels[i]);
    detail::require_same_length(emb.size(), c.size(), "center dimension");
    double cen = 0.0;
    std::vector<double> d_emb_center(emb.size());
    for (std::size_t d = 0; d < emb.size(); ++d) {
      const double diff = emb[d] - c[d];
      cen += 0.5 * diff * diff;
      d_emb_center[d] = diff;
    }
    r.terms.cross2 += ce * inv_n;
    r.terms.fv_cos += fv * inv_n;
    r.terms.center += cen * inv_n;

    // Reverse sweep: classifier -> fusion -> both channels.
    auto d_logits = cross_entropy_grad(logits, labels[i]);
    for (double& v : d_logits) v *= w.alpha2;
    std::vector<double> d_emb = g_clf.add_backward(p.classifier, emb, d_logits, inv_n);
    for (std::size_t d = 0; d < d_emb.size(); ++d) d_emb[d] += w.alpha3 * d_emb_center[d];
    const auto d_joined = g_fusion.add_backward(p.fusion, joined, d_emb, inv_n);

    std::vector<double> d_fl(d_joined.begin(), d_joined.begin() + static_cast<std::ptrdiff_t>(dl));
    std::vector<double> d_fg(d_joined.begin() + static_cast<std::ptrdiff_t>(dl), d_joined.end());
    if (w.alpha1 != 0.0) {
      const auto gcos = fv_cos_grad(fl, fg);
      for (std::size_t d = 0; d < d_fl.size(); ++d) d_fl[d] += w.alpha1 * gcos.first[d];
      for (std::size_t d = 0; d < d_fg.size(); ++d) d_fg[d] += w.alpha1 * gcos.second[d];
    }
    g_local.add_backward(p.local, x, d_fl, inv_n);
    g_fed.add_backward(p.fed, x, d_fg, inv_n);
    r.embeddings.push_back(std::move(emb));
  }
  r.terms.total = total_loss(r.terms.fv_cos, r.terms.cross2, r.terms.center, w);
  r.local = g_local.result();
  r.fed = g_fed.result();
  r.fusion = g_fusion.result();
  r.classifier = g_clf.result();
  return r;
}

struct LocalCrossEntropyResult {
  double loss = 0.0;  // batch mean
  GradientRecord local;
  GradientRecord classifier;
};

// Batch-mean cross-entropy of classifier(local(x)) with gradients for both.
inline LocalCrossEntropyResult local_cross_entropy_batch(const ChannelModel& local, const Head& classifier,
                                                         std::span<const std::vector<double>> inputs,
                                                         std::span<const std::size_t> labels) {
  detail::require_same_length(local.out_dim(), classifier.in_dim(), "local classifier input");
  detail::require_same_length(inputs.size(), labels.size(), "local_cross_entropy_batch");
  if (inputs.empty()) throw ShapeError("local_cross_entropy_batch: empty batch");
  const double inv_n = 1.0 / static_cast<double>(inputs.size());
  GradientAccumulator g_local(local.params().size());
  GradientAccumulator g_clf(classifier.params().size());
  LocalCrossEntropyResult r;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto f = forward(local, inputs[i]);
    const auto logits = forward(classifier, f);
    r.loss += cross_entropy(logits, labels[i]) * inv_n;
    const auto d_f = g_clf.add_backward(classifier, f, cross_entropy_grad(logits, labels[i]), inv_n);
    g_local.add_backward(local, inputs[i], d_f, inv_n);
  }
  r.local = g_local.result();
  r.classifier = g_clf.result();
  return r;
}

}  // namespace pafedfv
