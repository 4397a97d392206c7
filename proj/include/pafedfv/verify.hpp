#pragma once

// Runtime self-checks behind the `verify` verb. Each check is small enough to
// run in a few seconds and reports a one-line detail.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "pafedfv/aggregation.hpp"
#include "pafedfv/client.hpp"
#include "pafedfv/convergence.hpp"
#include "pafedfv/experiment.hpp"
#include "pafedfv/losses.hpp"
#include "pafedfv/metrics.hpp"
#include "pafedfv/server.hpp"
#include "pafedfv/sim.hpp"

namespace pafedfv {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

namespace verify_detail {

inline std::vector<double> random_vector(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

// Largest relative error between `analytic` and central differences of `f`
// over `probes` randomly chosen coordinates of `params`.
inline double fd_max_rel_error(const ParamVector& params, const GradientRecord& analytic,
                               const std::function<double(const ParamVector&)>& f, Rng& rng, std::size_t probes) {
  constexpr double h = 1e-5;
  double worst = 0.0;
  for (std::size_t j = 0; j < probes; ++j) {
    const std::size_t i = rng.below(params.size());
    auto plus = params.values();
    auto minus = params.values();
    plus[i] += h;
    minus[i] -= h;
    const double num = (f(ParamVector(plus)) - f(ParamVector(minus))) / (2 * h);
    const double denom = std::max({std::abs(num), std::abs(analytic[i]), 1e-6});
    worst = std::max(worst, std::abs(num - analytic[i]) / denom);
  }
  return worst;
}

inline ExperimentConfig small_experiment(std::uint64_t seed) {
  ExperimentConfig c;
  c.seed = seed;
  c.clients = 3;
  c.classes = {6};
  c.samples_per_class = {4};
  c.rotation_deg = {0.0, 30.0, 60.0};
  c.offset = {0.0, 0.5, 1.0};
  c.noise_scale = {1.0};
  c.rounds = 3;
  c.epochs = 1;
  c.probe_count = 8;
  c.probe_pool = 16;
  return c;
}

}  // namespace verify_detail

inline CheckResult check_simplex() {
  const auto samples = random_simplex_samples(10'000, 2024);
  const auto rep = verify_simplex(samples);
  return {"aggregation.simplex", rep.ok(),
          std::to_string(rep.samples) + " samples, " + std::to_string(rep.violations) +
              " violations, max |sum-1| = " + format_double(rep.max_abs_error)};
}

inline CheckResult check_aggregation_degenerate() {
  Rng rng(11);
  std::vector<ParamVector> models;
  for (int k = 0; k < 4; ++k) models.emplace_back(verify_detail::random_vector(rng, 20));
  CorrelationMatrix r(4);
  for (std::size_t a = 0; a < 4; ++a)
    for (std::size_t b = a + 1; b < 4; ++b) r.set(a, b, rng.uniform(0.1, 5.0));
  bool ok = true;
  for (std::size_t n = 0; n < 4; ++n) ok = ok && personalized_aggregate(models, r, {0.0, 1e-6}, n) == models[n];

  std::vector<ParamVector> same(4, models[0]);
  double worst = 0.0;
  for (double g : {0.1, 0.5, 0.9, 1.0}) {
    for (std::size_t n = 0; n < 4; ++n) {
      const auto m = personalized_aggregate(same, r, {g, 1e-6}, n);
      for (std::size_t i = 0; i < m.size(); ++i) worst = std::max(worst, std::abs(m[i] - models[0][i]));
    }
  }
  ok = ok && worst <= 1e-12;

  std::vector<ParamVector> scalars{ParamVector({0.0}), ParamVector({4.0}), ParamVector({8.0})};
  CorrelationMatrix r3(3);
  r3.set(0, 1, 3.0);
  r3.set(0, 2, 1.0);
  r3.set(1, 2, 1.0);
  const double hand = personalized_aggregate(scalars, r3, {0.5, 1e-6}, 0)[0];
  ok = ok && hand == 2.5;
  return {"aggregation.degenerate", ok, "identical-upload drift " + format_double(worst) + ", scalar case " + format_double(hand)};
}

inline CheckResult check_loss_gradients() {
  Rng rng(5);
  const ClientModelConfig mc{6, 5, 4, 3};
  const std::size_t classes = 4;
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    auto local = ChannelModel::init(mc.local_arch(), rng);
    auto fed = ChannelModel::init(mc.fed_arch(), rng);
    auto fusion = Head::init(HeadKind::Fusion, 2 * mc.embedding_dim, mc.embedding_dim, rng);
    auto clf = Head::init(HeadKind::Classifier, mc.embedding_dim, classes, rng);
    std::vector<std::vector<double>> centers(classes);
    for (auto& c : centers) c = verify_detail::random_vector(rng, mc.embedding_dim, 0.3);
    const CenterBank bank(centers, 0.5);
    std::vector<std::vector<double>> xs;
    std::vector<std::size_t> ys;
    for (int i = 0; i < 5; ++i) {
      xs.push_back(verify_detail::random_vector(rng, mc.input_dim));
      ys.push_back(rng.below(classes));
    }
    const LossWeights w{0.5, 1.0, 0.01};
    const auto r = total_loss_batch({local, fed, fusion, clf}, xs, ys, bank, w);
    auto loss_with = [&](int part) {
      return [&, part](const ParamVector& p) {
        auto l = local;
        auto g = fed;
        auto f = fusion;
        auto c = clf;
        if (part == 0) l.set_params(p);
        if (part == 1) g.set_params(p);
        if (part == 2) f.set_params(p);
        if (part == 3) c.set_params(p);
        return total_loss_batch({l, g, f, c}, xs, ys, bank, w).terms.total;
      };
    };
    worst = std::max(worst, verify_detail::fd_max_rel_error(local.params(), r.local, loss_with(0), rng, 6));
    worst = std::max(worst, verify_detail::fd_max_rel_error(fed.params(), r.fed, loss_with(1), rng, 6));
    worst = std::max(worst, verify_detail::fd_max_rel_error(fusion.params(), r.fusion, loss_with(2), rng, 6));
    worst = std::max(worst, verify_detail::fd_max_rel_error(clf.params(), r.classifier, loss_with(3), rng, 6));

    const auto lc = local_cross_entropy_batch(local, clf, xs, ys);
    worst = std::max(worst, verify_detail::fd_max_rel_error(
                                local.params(), lc.local,
                                [&](const ParamVector& p) {
                                  auto l = local;
                                  l.set_params(p);
                                  return local_cross_entropy_batch(l, clf, xs, ys).loss;
                                },
                                rng, 6));
  }
  return {"losses.gradients", worst < 1e-4, "max relative error " + format_double(worst)};
}

inline CheckResult check_fv_cos_algebra() {
  const std::vector<double> a{1.0, 2.0, -3.0};
  const std::vector<double> b{2.0, 4.0, -6.0};
  const std::vector<double> neg{-1.0, -2.0, 3.0};
  const std::vector<double> e0{1.0, 0.0, 0.0};
  const std::vector<double> e1{0.0, 1.0, 0.0};
  bool ok = fv_cos_loss(e0, e0) == 0.0 && fv_cos_loss(e0, e1) == 1.0 && fv_cos_loss(e0, std::vector<double>{-1.0, 0.0, 0.0}) == 2.0;
  ok = ok && std::abs(fv_cos_loss(a, b)) < 1e-12 && std::abs(fv_cos_loss(a, neg) - 2.0) < 1e-12;
  Rng rng(3);
  double drift = 0.0;
  for (int i = 0; i < 100; ++i) {
    const auto x = verify_detail::random_vector(rng, 8);
    const auto y = verify_detail::random_vector(rng, 8);
    auto xs = x;
    const double s = std::exp(rng.uniform(-5.0, 5.0));
    for (double& v : xs) v *= s;
    drift = std::max(drift, std::abs(fv_cos_loss(xs, y) - fv_cos_loss(x, y)));
  }
  ok = ok && drift < 1e-12;
  return {"losses.fv_cos", ok, "scale drift " + format_double(drift)};
}

inline CheckResult check_metrics_invariance() {
  Rng rng(17);
  bool ok = true;
  for (int t = 0; t < 20; ++t) {
    ScoreSet s;
    for (int i = 0; i < 60; ++i) s.genuine.push_back(rng.normal(0.6, 0.3));
    for (int i = 0; i < 200; ++i) s.impostor.push_back(rng.normal(0.0, 0.3));
    ScoreSet m;
    for (double v : s.genuine) m.genuine.push_back(std::exp(3.0 * v));
    for (double v : s.impostor) m.impostor.push_back(std::exp(3.0 * v));
    ScoreSet sw;
    for (double v : s.impostor) sw.genuine.push_back(-v);
    for (double v : s.genuine) sw.impostor.push_back(-v);
    ok = ok && eer(s) == eer(m) && tar_at_far(s) == tar_at_far(m);
    ok = ok && std::abs(eer(s) - eer(sw)) < 1e-12;
    ok = ok && tar_at_far(s, 0.01) <= tar_at_far(s, 0.05) && tar_at_far(s, 0.05) <= tar_at_far(s, 0.2);
  }
  ok = ok && eer({{0.9, 0.8}, {0.1, 0.2}}) == 0.0 && eer({{0.3, 0.7}, {0.3, 0.7}}) == 0.5;
  return {"metrics.invariance", ok, "monotone transform, swap symmetry, TAR monotone in FAR"};
}

inline CheckResult check_schedule() {
  auto run = [](Ticks up, Ticks down, Ticks server, Ticks step) {
    auto cfg = verify_detail::small_experiment(4);
    cfg.clients = 1;
    cfg.rotation_deg = {0.0};
    cfg.offset = {0.0};
    cfg.upload_latency = {up};
    cfg.download_latency = {down};
    cfg.server_compute_time = server;
    cfg.async_step_duration = step;
    cfg.async = Toggle::On;
    return run_experiment(cfg);
  };
  bool ok = true;
  std::string detail;
  const auto five = run(2, 2, 1, 1);
  for (const auto& a : five.sim->accounts) ok = ok && a.wait_time == 5 && a.async_steps == 5;
  const auto zero = run(0, 0, 0, 1);
  for (const auto& a : zero.sim->accounts) ok = ok && a.async_steps == 0;
  std::size_t rounds = 0;
  for (const auto* r : {&five, &zero}) {
    for (const auto& a : r->sim->accounts) {
      ok = ok && a.local_time + static_cast<Ticks>(a.async_steps) * a.async_step_duration + a.idle == a.adopted_at - a.round_start;
      ++rounds;
    }
  }
  detail = std::to_string(rounds) + " rounds checked";
  return {"sim.schedule", ok, detail};
}

inline CheckResult check_isolation() {
  auto cfg = verify_detail::small_experiment(9);
  cfg.async = Toggle::On;
  const auto r = run_experiment(cfg);
  bool ok = r.sim->isolation_violations == 0;
  for (const auto& u : r.sim->uploads) ok = ok && u.sent_checksum == u.received_checksum;
  std::size_t steps = 0;
  for (const auto& a : r.sim->accounts) steps += a.async_steps;
  ok = ok && steps > 0;
  return {"sim.isolation", ok,
          std::to_string(steps) + " async steps, " + std::to_string(r.sim->uploads.size()) + " uploads audited"};
}

inline CheckResult check_fedavg_anchor() {
  const auto pr = make_problem(4, 5, 31, 1.0);
  ConvergenceOptions opt;
  opt.rounds = 50;
  opt.local_steps = 1;
  const auto trace = run_fedavg_convergence(pr, opt);
  Eigen::VectorXd w = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(pr.dim()));
  double worst = 0.0;
  for (std::size_t t = 0; t < opt.rounds; ++t) {
    Eigen::VectorXd g = Eigen::VectorXd::Zero(w.size());
    for (std::size_t k = 0; k < pr.n_clients(); ++k) g += pr.p[k] * pr.local_gradient(k, w);
    w -= opt.schedule.at(t) * g;
    worst = std::max(worst, std::abs(pr.objective(w) - pr.f_star - trace[t + 1].mean_gap));
  }
  return {"convergence.gd_anchor", worst < 1e-10, "max gap difference " + format_double(worst)};
}

inline CheckResult check_determinism() {
  const auto cfg = verify_detail::small_experiment(21);
  const auto a = run_experiment(cfg);
  const auto b = run_experiment(cfg);
  const bool ok = to_csv(a.metrics) == to_csv(b.metrics) && a.sim->log.to_ndjson() == b.sim->log.to_ndjson();
  return {"experiment.determinism", ok, std::to_string(a.metrics.size()) + " metric rows compared"};
}

inline std::vector<std::function<CheckResult()>> verify_suite() {
  return {check_simplex,    check_aggregation_degenerate, check_loss_gradients, check_fv_cos_algebra,
          check_metrics_invariance, check_schedule,     check_isolation,      check_fedavg_anchor,
          check_determinism};
}

}  // namespace pafedfv
