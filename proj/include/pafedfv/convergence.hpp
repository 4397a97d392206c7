#pragma once

// Synthetic strongly convex federated problems for checking the aggregation
// weights and the O(1/T) decay of FedAvg-style local SGD.
//
// Client k minimizes F_k(w) = 1/2 (w - b_k)^T A_k (w - b_k) with A_k symmetric
// positive definite; the global objective is F = sum_k p_k F_k.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "pafedfv/aggregation.hpp"
#include "pafedfv/errors.hpp"
#include "pafedfv/random.hpp"
#include "pafedfv/text_io.hpp"

namespace pafedfv {

struct ConvexProblem {
  std::vector<Eigen::MatrixXd> a;
  std::vector<Eigen::VectorXd> b;
  std::vector<double> p;  // client weights, sum to 1

  double smoothness = 0.0;  // L: largest eigenvalue over all A_k
  double strong_convexity = 0.0;  // mu: smallest eigenvalue over all A_k
  Eigen::VectorXd w_star;
  double f_star = 0.0;

  std::size_t n_clients() const { return a.size(); }
  std::size_t dim() const { return static_cast<std::size_t>(b.front().size()); }
  double condition_number() const { return smoothness / strong_convexity; }

  double local_objective(std::size_t k, const Eigen::VectorXd& w) const {
    const Eigen::VectorXd d = w - b[k];
    return 0.5 * d.dot(a[k] * d);
  }

  double objective(const Eigen::VectorXd& w) const {
    double f = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) f += p[k] * local_objective(k, w);
    return f;
  }

  Eigen::VectorXd local_gradient(std::size_t k, const Eigen::VectorXd& w) const { return a[k] * (w - b[k]); }

  // L, mu, w* and F* from the parts; w* solves sum p_k A_k w = sum p_k A_k b_k.
  static ConvexProblem from_parts(std::vector<Eigen::MatrixXd> a, std::vector<Eigen::VectorXd> b, std::vector<double> p) {
    if (a.empty() || a.size() != b.size() || a.size() != p.size()) throw ShapeError("ConvexProblem: part counts differ");
    const auto dim = b.front().size();
    double psum = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
      if (a[k].rows() != dim || a[k].cols() != dim || b[k].size() != dim) throw ShapeError("ConvexProblem: dimension mismatch");
      if (!(p[k] >= 0.0)) throw DomainError("ConvexProblem: client weights must be >= 0");
      psum += p[k];
    }
    if (std::abs(psum - 1.0) > 1e-12) throw DomainError("ConvexProblem: client weights must sum to 1");

    ConvexProblem pr;
    pr.smoothness = 0.0;
    pr.strong_convexity = std::numeric_limits<double>::infinity();
    for (const auto& m : a) {
      if (!m.isApprox(m.transpose(), 1e-12)) throw DomainError("ConvexProblem: A_k must be symmetric");
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
      const double lo = es.eigenvalues().minCoeff();
      const double hi = es.eigenvalues().maxCoeff();
      if (!(lo > 0.0)) throw DomainError("ConvexProblem: A_k must be positive definite");
      pr.smoothness = std::max(pr.smoothness, hi);
      pr.strong_convexity = std::min(pr.strong_convexity, lo);
    }
    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(dim, dim);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(dim);
    for (std::size_t k = 0; k < a.size(); ++k) {
      h += p[k] * a[k];
      rhs += p[k] * (a[k] * b[k]);
    }
    pr.a = std::move(a);
    pr.b = std::move(b);
    pr.p = std::move(p);
    pr.w_star = h.ldlt().solve(rhs);
    pr.f_star = pr.objective(pr.w_star);
    return pr;
  }
};

struct ProblemShape {
  double eig_lo = 0.5;
  double eig_hi = 4.0;
};

// Seeded A_k = Q diag(lambda) Q^T with lambda in [eig_lo, eig_hi], b_k drawn
// with spread `heterogeneity`, and positive weights p_k normalized to 1.
inline ConvexProblem make_problem(std::size_t n_clients, std::size_t dim, std::uint64_t seed, double heterogeneity,
                                  ProblemShape shape = {}) {
  if (dim == 0 || n_clients == 0) throw ConfigError("make_problem: dim and n_clients must be >= 1");
  Rng rng(mix_seed(seed, 0xC0));
  const auto d = static_cast<Eigen::Index>(dim);
  std::vector<Eigen::MatrixXd> a;
  std::vector<Eigen::VectorXd> b;
  std::vector<double> p;
  double psum = 0.0;
  for (std::size_t k = 0; k < n_clients; ++k) {
    Eigen::MatrixXd g(d, d);
    for (Eigen::Index i = 0; i < d; ++i)
      for (Eigen::Index j = 0; j < d; ++j) g(i, j) = rng.normal();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    const Eigen::MatrixXd q = qr.householderQ();
    Eigen::VectorXd lam(d);
    for (Eigen::Index i = 0; i < d; ++i) lam(i) = rng.uniform(shape.eig_lo, shape.eig_hi);
    Eigen::MatrixXd ak = q * lam.asDiagonal() * q.transpose();
    ak = 0.5 * (ak + ak.transpose());
    a.push_back(std::move(ak));
    Eigen::VectorXd bk(d);
    for (Eigen::Index i = 0; i < d; ++i) bk(i) = heterogeneity * rng.normal();
    b.push_back(std::move(bk));
    p.push_back(rng.uniform(0.5, 1.5));
    psum += p.back();
  }
  for (double& v : p) v /= psum;
  double check = 0.0;
  for (double v : p) check += v;
  p.back() += 1.0 - check;  // absorb rounding so the weights sum to exactly 1
  return ConvexProblem::from_parts(std::move(a), std::move(b), std::move(p));
}

// lr_t = scale / (t + offset), t counting every local step.
struct StepSchedule {
  double scale = 1.0;
  double offset = 10.0;

  double at(std::size_t t) const { return scale / (static_cast<double>(t) + offset); }
};

struct ConvergenceOptions {
  std::size_t rounds = 200;
  std::size_t local_steps = 1;  // E
  StepSchedule schedule;
  double noise = 0.0;           // stddev of additive gradient noise per coordinate
  std::uint64_t seed = 0;
  std::size_t replicates = 1;
  std::optional<Eigen::VectorXd> w0;  // zero vector when unset
};

struct TracePoint {
  std::size_t round = 0;
  double mean_gap = 0.0;
  double std_gap = 0.0;
};

using ConvergenceTrace = std::vector<TracePoint>;

inline constexpr double kDivergenceGap = 1e6;

// Weighted-average local SGD. Entry t of the trace is F(w_t) - F* after t
// rounds, averaged over seeded replicates.
inline ConvergenceTrace run_fedavg_convergence(const ConvexProblem& pr, const ConvergenceOptions& opt) {
  if (opt.replicates == 0) throw ConfigError("convergence: replicates must be >= 1");
  if (opt.local_steps == 0) throw ConfigError("convergence: local_steps must be >= 1");
  const auto d = static_cast<Eigen::Index>(pr.dim());
  std::vector<std::vector<double>> gaps(opt.rounds + 1, std::vector<double>(opt.replicates));
  for (std::size_t rep = 0; rep < opt.replicates; ++rep) {
    Rng rng(mix_seed(opt.seed, rep));
    Eigen::VectorXd w = opt.w0.value_or(Eigen::VectorXd::Zero(d));
    gaps[0][rep] = pr.objective(w) - pr.f_star;
    std::size_t t = 0;
    for (std::size_t r = 1; r <= opt.rounds; ++r) {
      Eigen::VectorXd next = Eigen::VectorXd::Zero(d);
      for (std::size_t k = 0; k < pr.n_clients(); ++k) {
        Eigen::VectorXd wk = w;
        for (std::size_t e = 0; e < opt.local_steps; ++e) {
          Eigen::VectorXd g = pr.local_gradient(k, wk);
          if (opt.noise > 0.0) {
            for (Eigen::Index i = 0; i < d; ++i) g(i) += opt.noise * rng.normal();
          }
          wk -= opt.schedule.at(t + e) * g;
        }
        next += pr.p[k] * wk;
      }
      t += opt.local_steps;
      w = std::move(next);
      const double gap = pr.objective(w) - pr.f_star;
      if (!(gap <= kDivergenceGap)) {
        throw InstabilityError("convergence: gap " + format_double(gap) + " at round " + std::to_string(r));
      }
      gaps[r][rep] = gap;
    }
  }
  ConvergenceTrace trace;
  trace.reserve(gaps.size());
  for (std::size_t r = 0; r < gaps.size(); ++r) {
    double mean = 0.0;
    for (double g : gaps[r]) mean += g;
    mean /= static_cast<double>(opt.replicates);
    double var = 0.0;
    for (double g : gaps[r]) var += (g - mean) * (g - mean);
    var = opt.replicates > 1 ? var / static_cast<double>(opt.replicates - 1) : 0.0;
    trace.push_back({r, mean, std::sqrt(var)});
  }
  return trace;
}

// Observational only: each client mixes the round's local iterates with the
// personalized weights, correlations taken from a diagonal linear model
// diag(w) x over seeded probe inputs. Entry t is sum_k p_k (F_k(w_k) - F_k*).
inline ConvergenceTrace run_personalized_trace(const ConvexProblem& pr, const ConvergenceOptions& opt,
                                               const AggregationConfig& agg, std::size_t probe_count = 16) {
  if (pr.n_clients() < 2) throw ConfigError("personalized trace needs >= 2 clients");
  const auto d = static_cast<Eigen::Index>(pr.dim());
  Rng probe_rng(mix_seed(opt.seed, 0x77));
  std::vector<std::vector<double>> probes(probe_count, std::vector<double>(pr.dim()));
  for (auto& pv : probes)
    for (double& v : pv) v = probe_rng.normal();

  std::vector<std::vector<double>> gaps(opt.rounds + 1, std::vector<double>(opt.replicates));
  for (std::size_t rep = 0; rep < opt.replicates; ++rep) {
    Rng rng(mix_seed(opt.seed, rep));
    std::vector<Eigen::VectorXd> ws(pr.n_clients(), opt.w0.value_or(Eigen::VectorXd::Zero(d)));
    auto personal_gap = [&] {
      double s = 0.0;
      for (std::size_t k = 0; k < ws.size(); ++k) s += pr.p[k] * pr.local_objective(k, ws[k]);
      return s;
    };
    gaps[0][rep] = personal_gap();
    std::size_t t = 0;
    for (std::size_t r = 1; r <= opt.rounds; ++r) {
      std::vector<ParamVector> params;
      std::vector<std::vector<std::vector<double>>> emb;
      for (std::size_t k = 0; k < ws.size(); ++k) {
        for (std::size_t e = 0; e < opt.local_steps; ++e) {
          Eigen::VectorXd g = pr.local_gradient(k, ws[k]);
          if (opt.noise > 0.0) {
            for (Eigen::Index i = 0; i < d; ++i) g(i) += opt.noise * rng.normal();
          }
          ws[k] -= opt.schedule.at(t + e) * g;
        }
        params.emplace_back(std::vector<double>(ws[k].data(), ws[k].data() + d));
        std::vector<std::vector<double>> ek;
        for (const auto& pv : probes) {
          std::vector<double> y(pr.dim());
          for (std::size_t i = 0; i < pr.dim(); ++i) y[i] = ws[k](static_cast<Eigen::Index>(i)) * pv[i];
          ek.push_back(std::move(y));
        }
        emb.push_back(std::move(ek));
      }
      t += opt.local_steps;
      const auto corr = correlation_from_embeddings(emb, agg);
      for (std::size_t k = 0; k < ws.size(); ++k) {
        const auto mixed = personalized_aggregate(params, corr, agg, k);
        ws[k] = Eigen::Map<const Eigen::VectorXd>(mixed.values().data(), d);
      }
      gaps[r][rep] = personal_gap();
    }
  }
  ConvergenceTrace trace;
  for (std::size_t r = 0; r < gaps.size(); ++r) {
    double mean = 0.0;
    for (double g : gaps[r]) mean += g;
    mean /= static_cast<double>(opt.replicates);
    trace.push_back({r, mean, 0.0});
  }
  return trace;
}

inline constexpr const char* kTraceCsvHeader = "round,mean_gap,std_gap";

inline std::string to_csv(const ConvergenceTrace& trace) {
  std::ostringstream os;
  os << kTraceCsvHeader << '\n';
  for (const auto& p : trace) os << p.round << ',' << format_double(p.mean_gap) << ',' << format_double(p.std_gap) << '\n';
  return os.str();
}

// One row of the correlation matrix (entries for the other clients) plus gamma.
struct SimplexSample {
  std::vector<double> row;
  double gamma = 0.0;
};

struct SimplexReport {
  std::size_t samples = 0;
  std::size_t violations = 0;
  double max_abs_error = 0.0;
  std::optional<SimplexSample> first_violation;

  bool ok() const { return violations == 0; }
};

inline constexpr double kSimplexTolerance = 1e-12;

// Feeds every sample through the aggregation weights of client 0 and checks
// that gamma * sum_u R_u / sum R + (1 - gamma) equals 1.
inline SimplexReport verify_simplex(std::span<const SimplexSample> samples, double clamp_epsilon = 1e-6) {
  SimplexReport rep;
  for (const auto& s : samples) {
    if (s.row.empty()) throw ShapeError("verify_simplex: empty correlation row");
    const std::size_t n = s.row.size() + 1;
    CorrelationMatrix r = CorrelationMatrix::uniform(n, clamp_epsilon);
    for (std::size_t u = 1; u < n; ++u) {
      if (!(s.row[u - 1] > 0.0)) throw DomainError("verify_simplex: correlation entries must be clamped > 0");
      r.set(0, u, s.row[u - 1]);
    }
    const auto w = personalized_weights(r, AggregationConfig{s.gamma, clamp_epsilon}, 0);
    double sum = 0.0;
    for (double v : w) sum += v;
    const double err = std::abs(sum - 1.0);
    ++rep.samples;
    rep.max_abs_error = std::max(rep.max_abs_error, err);
    if (!(err < kSimplexTolerance)) {
      if (!rep.first_violation) rep.first_violation = s;
      ++rep.violations;
    }
  }
  return rep;
}

// Seeded rows of 1..9 entries in [epsilon, 64] (about a tenth pinned at
// epsilon, as clamping would leave them) and gammas in [0, 1] including both
// endpoints.
inline std::vector<SimplexSample> random_simplex_samples(std::size_t count, std::uint64_t seed,
                                                         double clamp_epsilon = 1e-6) {
  Rng rng(mix_seed(seed, 0x51A));
  std::vector<SimplexSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    SimplexSample s;
    const std::size_t others = 1 + rng.below(9);
    for (std::size_t u = 0; u < others; ++u) {
      s.row.push_back(rng.uniform() < 0.1 ? clamp_epsilon : rng.uniform(clamp_epsilon, 64.0));
    }
    const auto pick = rng.below(20);
    s.gamma = pick == 0 ? 0.0 : pick == 1 ? 1.0 : rng.uniform();
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace pafedfv
