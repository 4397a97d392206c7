#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "oracles.hpp"
#include "pafedfv/aggregation.hpp"

using namespace pafedfv;

namespace {

using Emb = std::vector<std::vector<double>>;

std::vector<double> random_vector(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

std::vector<ParamVector> random_models(Rng& rng, std::size_t n, std::size_t len) {
  std::vector<ParamVector> out;
  for (std::size_t k = 0; k < n; ++k) out.emplace_back(random_vector(rng, len));
  return out;
}

CorrelationMatrix random_matrix(Rng& rng, std::size_t n) {
  CorrelationMatrix r(n);
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = a + 1; b < n; ++b) r.set(a, b, rng.uniform(1e-6, 10.0));
  return r;
}

}  // namespace

TEST(CorrelationDegree, IdenticalSequences) {
  Rng rng(1);
  Emb e;
  for (int t = 0; t < 5; ++t) e.push_back(random_vector(rng, 4));
  EXPECT_NEAR(correlation_degree(e, e), 5.0, 1e-14);
}

TEST(CorrelationDegree, HandCosineSums) {
  const Emb n{{1, 0}, {0, 1}};
  const Emb u{{1, 0}, {1, 0}};
  EXPECT_EQ(correlation_degree(n, u), 1.0);
}

TEST(CorrelationDegree, Negated) {
  Rng rng(2);
  Emb n, u;
  for (int t = 0; t < 3; ++t) {
    n.push_back(random_vector(rng, 3));
    u.push_back(n.back());
    for (double& v : u.back()) v = -v;
  }
  EXPECT_NEAR(correlation_degree(n, u), -3.0, 1e-14);
}

TEST(CorrelationDegree, SymmetricAndBounded) {
  Rng rng(3);
  for (int c = 0; c < 100; ++c) {
    Emb n, u;
    const std::size_t T = 1 + rng.below(10);
    for (std::size_t t = 0; t < T; ++t) {
      n.push_back(random_vector(rng, 4));
      u.push_back(random_vector(rng, 4));
    }
    const double a = correlation_degree(n, u);
    EXPECT_EQ(a, correlation_degree(u, n));
    EXPECT_LE(std::abs(a), static_cast<double>(T));
  }
}

TEST(CorrelationDegree, ZeroNorm) {
  const Emb n{{0, 0}};
  const Emb u{{1, 0}};
  EXPECT_THROW(correlation_degree(n, u), DomainError);
}

TEST(BuildCorrelation, IdenticalModelsGiveT) {
  Rng rng(4);
  const auto m = ChannelModel::init({{3, 4, 2}, Activation::Tanh}, rng);
  std::vector<std::vector<double>> items;
  for (int t = 0; t < 7; ++t) items.push_back(random_vector(rng, 3));
  const std::vector<ChannelModel> models{m, m};
  const auto r = build_correlation_matrix(models, ProbeSet(items), {});
  EXPECT_NEAR(r.at(0, 1), 7.0, 1e-13);
  EXPECT_EQ(r.at(0, 1), r.at(1, 0));
}

TEST(BuildCorrelation, MatchesDoubleLoopRecomputation) {
  Rng rng(5);
  const ChannelArch arch{{3, 5, 4}, Activation::Tanh};
  std::vector<ChannelModel> models;
  for (int k = 0; k < 3; ++k) models.push_back(ChannelModel::init(arch, rng));
  std::vector<std::vector<double>> items;
  for (int t = 0; t < 9; ++t) items.push_back(random_vector(rng, 3));
  const AggregationConfig cfg;
  const auto r = build_correlation_matrix(models, ProbeSet(items), cfg);
  for (std::size_t n = 0; n < 3; ++n) {
    for (std::size_t u = 0; u < 3; ++u) {
      if (n == u) continue;
      double s = 0.0;
      for (const auto& p : items) {
        s += oracle::cosine(oracle::mlp_forward(arch.widths, models[n].params().values(), p),
                            oracle::mlp_forward(arch.widths, models[u].params().values(), p));
      }
      EXPECT_NEAR(r.at(n, u), std::max(s, cfg.clamp_epsilon), 1e-12);
      EXPECT_EQ(r.at(n, u), r.at(u, n));
    }
  }
}

TEST(BuildCorrelation, NegativeCorrelationClamped) {
  // Single affine layer with no hidden unit: negating the weights negates the embedding.
  const ChannelArch arch{{2, 2}, Activation::Identity};
  const ChannelModel a(arch, ParamVector({1, 0.5, -0.2, 1, 0, 0}));
  const ChannelModel b(arch, ParamVector({-1, -0.5, 0.2, -1, 0, 0}));
  const std::vector<ChannelModel> models{a, b};
  const ProbeSet probes({{1, 2}, {-0.5, 3}});
  const AggregationConfig cfg{0.5, 1e-6};
  const auto r = build_correlation_matrix(models, probes, cfg);
  EXPECT_EQ(r.at(0, 1), 1e-6);
  EXPECT_EQ(r.at(1, 0), 1e-6);
}

TEST(BuildCorrelation, NeedsTwoModels) {
  Rng rng(1);
  const std::vector<ChannelModel> one{ChannelModel::init({{2, 2}}, rng)};
  EXPECT_THROW(build_correlation_matrix(one, ProbeSet({{1, 1}}), {}), ConfigError);
}

TEST(PersonalizedAggregate, GammaZeroIsOwnModelBitExact) {
  Rng rng(6);
  const auto models = random_models(rng, 4, 10);
  const auto r = random_matrix(rng, 4);
  for (std::size_t n = 0; n < 4; ++n) EXPECT_EQ(personalized_aggregate(models, r, {0.0, 1e-6}, n), models[n]);
}

TEST(PersonalizedAggregate, TwoClientsGammaOneReturnsOther) {
  Rng rng(7);
  const auto models = random_models(rng, 2, 6);
  const auto r = random_matrix(rng, 2);
  EXPECT_EQ(personalized_aggregate(models, r, {1.0, 1e-6}, 0), models[1]);
  EXPECT_EQ(personalized_aggregate(models, r, {1.0, 1e-6}, 1), models[0]);
}

TEST(PersonalizedAggregate, HandComputedScalarCase) {
  const std::vector<ParamVector> models{ParamVector({0.0}), ParamVector({4.0}), ParamVector({8.0})};
  CorrelationMatrix r(3);
  r.set(0, 1, 3.0);
  r.set(0, 2, 1.0);
  r.set(1, 2, 2.0);
  EXPECT_EQ(personalized_aggregate(models, r, {0.5, 1e-6}, 0)[0], 2.5);
}

TEST(PersonalizedAggregate, IdenticalInputsReturnThatVector) {
  Rng rng(8);
  const ParamVector m(random_vector(rng, 12));
  const std::vector<ParamVector> models(5, m);
  for (int c = 0; c < 50; ++c) {
    const auto r = random_matrix(rng, 5);
    const AggregationConfig cfg{rng.uniform(), 1e-6};
    for (std::size_t n = 0; n < 5; ++n) {
      const auto out = personalized_aggregate(models, r, cfg, n);
      for (std::size_t i = 0; i < m.size(); ++i) EXPECT_NEAR(out[i], m[i], 1e-12);
    }
  }
}

TEST(PersonalizedAggregate, WeightsSumToOne) {
  Rng rng(9);
  for (int c = 0; c < 1000; ++c) {
    const std::size_t n = 2 + rng.below(8);
    const auto r = random_matrix(rng, n);
    const AggregationConfig cfg{rng.uniform(), 1e-6};
    for (std::size_t k = 0; k < n; ++k) {
      const auto w = personalized_weights(r, cfg, k);
      EXPECT_NEAR(std::accumulate(w.begin(), w.end(), 0.0), 1.0, 1e-12);
    }
  }
}

TEST(PersonalizedAggregate, ConvexHullElementwise) {
  Rng rng(10);
  for (int c = 0; c < 200; ++c) {
    const std::size_t n = 2 + rng.below(6);
    const auto models = random_models(rng, n, 8);
    const auto r = random_matrix(rng, n);
    const AggregationConfig cfg{rng.uniform(), 1e-6};
    const std::size_t k = rng.below(n);
    const auto out = personalized_aggregate(models, r, cfg, k);
    for (std::size_t i = 0; i < 8; ++i) {
      double lo = INFINITY, hi = -INFINITY;
      for (const auto& m : models) {
        lo = std::min(lo, m[i]);
        hi = std::max(hi, m[i]);
      }
      EXPECT_GE(out[i], lo - 1e-12);
      EXPECT_LE(out[i], hi + 1e-12);
    }
  }
}

TEST(PersonalizedAggregate, PermutationEquivariantOverOthers) {
  Rng rng(11);
  const std::size_t n = 5;
  for (int c = 0; c < 50; ++c) {
    const auto models = random_models(rng, n, 6);
    const auto r = random_matrix(rng, n);
    const AggregationConfig cfg{rng.uniform(), 1e-6};
    // Relabel clients 1..4; client 0 keeps its index.
    std::vector<std::size_t> perm{0, 1, 2, 3, 4};
    rng.shuffle(perm);
    std::swap(*std::find(perm.begin(), perm.end(), 0), perm[0]);
    std::vector<ParamVector> pm(n);
    CorrelationMatrix pr(n);
    for (std::size_t a = 0; a < n; ++a) {
      pm[perm[a]] = models[a];
      for (std::size_t b = a + 1; b < n; ++b) pr.set(perm[a], perm[b], r.at(a, b));
    }
    const auto x = personalized_aggregate(models, r, cfg, 0);
    const auto y = personalized_aggregate(pm, pr, cfg, 0);
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(x[i], y[i], 1e-12);
  }
}

TEST(PersonalizedAggregate, UniformCorrelationMatchesFedAvgOfOthers) {
  Rng rng(12);
  const std::size_t n = 4;
  const auto models = random_models(rng, n, 7);
  const auto r = CorrelationMatrix::uniform(n, 2.75);
  for (std::size_t k = 0; k < n; ++k) {
    std::vector<ParamVector> others;
    for (std::size_t u = 0; u < n; ++u) {
      if (u != k) others.push_back(models[u]);
    }
    const std::vector<double> w(n - 1, 1.0 / static_cast<double>(n - 1));
    const auto a = personalized_aggregate(models, r, {1.0, 1e-6}, k);
    const auto b = fedavg_aggregate(others, w);
    for (std::size_t i = 0; i < 7; ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
  }
}

TEST(PersonalizedAggregate, LengthMismatch) {
  const std::vector<ParamVector> models{ParamVector({1.0, 2.0}), ParamVector({1.0})};
  EXPECT_THROW(personalized_aggregate(models, CorrelationMatrix::uniform(2, 1.0), {}, 0), ShapeError);
}

TEST(FedAvg, IdenticalModels) {
  const ParamVector m({1.5, -2.0, 3.0});
  const std::vector<ParamVector> models(3, m);
  const std::vector<double> w{0.2, 0.3, 0.5};
  const auto out = fedavg_aggregate(models, w);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(out[i], m[i], 1e-15);
}

TEST(FedAvg, ScalarMean) {
  const std::vector<ParamVector> models{ParamVector({0.0}), ParamVector({2.0})};
  const std::vector<double> w{0.5, 0.5};
  EXPECT_EQ(fedavg_aggregate(models, w)[0], 1.0);
}

TEST(FedAvg, SeededMatchesElementwiseMean) {
  Rng rng(13);
  const auto models = random_models(rng, 4, 9);
  std::vector<double> w{rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform()};
  const double s = w[0] + w[1] + w[2] + w[3];
  for (double& v : w) v /= s;
  const auto out = fedavg_aggregate(models, w);
  for (std::size_t i = 0; i < 9; ++i) {
    double e = 0.0;
    for (std::size_t k = 0; k < 4; ++k) e += w[k] * models[k].values()[i];
    EXPECT_NEAR(out[i], e, 1e-14);
  }
}

TEST(FedAvg, WeightErrors) {
  const std::vector<ParamVector> models{ParamVector({0.0}), ParamVector({2.0})};
  EXPECT_THROW(fedavg_aggregate(models, std::vector<double>{0.5, 0.4}), DomainError);
  EXPECT_THROW(fedavg_aggregate(models, std::vector<double>{1.5, -0.5}), DomainError);
  EXPECT_THROW(fedavg_aggregate(models, std::vector<double>{1.0}), ShapeError);
  const std::vector<ParamVector> mixed{ParamVector({0.0}), ParamVector({2.0, 1.0})};
  EXPECT_THROW(fedavg_aggregate(mixed, std::vector<double>{0.5, 0.5}), ShapeError);
}

TEST(AggregationConfigTest, Validation) {
  EXPECT_THROW((AggregationConfig{1.5, 1e-6}.validate()), ConfigError);
  EXPECT_THROW((AggregationConfig{-0.1, 1e-6}.validate()), ConfigError);
  EXPECT_THROW((AggregationConfig{0.5, 0.0}.validate()), ConfigError);
}

TEST(CorrelationMatrixTest, DiagonalUndefined) {
  CorrelationMatrix r(3);
  EXPECT_THROW(r.at(1, 1), DomainError);
  EXPECT_THROW(r.set(0, 5, 1.0), ShapeError);
}
