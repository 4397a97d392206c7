#pragma once

// Experiment driver: wires data, clients, server and simulator from an
// ExperimentConfig and writes the run directory
//
//   <out>/<run-id>/manifest.json
//                 /metrics.csv
//                 /timeline.log
//                 /traces/{losses,correlation,convergence}.csv
//
// with run-id = s<seed>-<mode>-<8 hex digits of the config hash>.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pafedfv/config.hpp"
#include "pafedfv/metrics.hpp"
#include "pafedfv/server.hpp"
#include "pafedfv/sim.hpp"
#include "pafedfv/synth.hpp"

namespace pafedfv {

inline constexpr const char* kVersion = "pafedfv 0.1.0";

enum class RunStatus { Ok, Diverged };

inline const char* to_string(RunStatus s) { return s == RunStatus::Ok ? "ok" : "diverged"; }

struct LossRecord {
  std::size_t client_id = 0;
  std::size_t round = 0;
  double total = 0.0;
  double fv_cos = 0.0;
  double cross2 = 0.0;
  double center = 0.0;
  double local_cross1 = 0.0;
};

struct CorrelationRecord {
  std::size_t round = 0;
  std::size_t client = 0;
  std::size_t other = 0;
  double value = 0.0;
};

struct ExperimentResult {
  ExperimentConfig config;
  std::string run_id;
  RunStatus status = RunStatus::Ok;
  std::string error;
  std::optional<std::size_t> error_round;
  std::optional<std::size_t> error_batch;
  std::vector<std::size_t> participants;  // generated client indices, in sim order
  std::vector<MetricsRecord> metrics;     // one row per client per round
  std::vector<LossRecord> losses;
  std::vector<CorrelationRecord> correlations;
  std::optional<SimResult> sim;

  // Last recorded row per participant, in participant order.
  std::vector<MetricsRecord> final_metrics() const {
    std::vector<MetricsRecord> out;
    for (std::size_t id : participants) {
      const MetricsRecord* last = nullptr;
      for (const auto& m : metrics) {
        if (m.client_id == id) last = &m;
      }
      if (last) out.push_back(*last);
    }
    return out;
  }

  double mean_final_eer() const {
    const auto f = final_metrics();
    if (f.empty()) return std::numeric_limits<double>::quiet_NaN();
    double s = 0.0;
    for (const auto& m : f) s += m.eer;
    return s / static_cast<double>(f.size());
  }
};

inline std::string run_id(const ExperimentConfig& cfg) {
  ExperimentConfig c = cfg;
  c.output_dir = "-";  // where a run is written does not change what it is
  char hex[9];
  std::snprintf(hex, sizeof hex, "%08x", static_cast<unsigned>(fnv1a(echo_config(c)) & 0xffffffffu));
  return "s" + std::to_string(cfg.seed) + "-" + to_string(cfg.mode) + "-" + hex;
}

namespace detail {

template <typename T>
T pick(const std::vector<T>& v, std::size_t k) {
  return v.size() == 1 ? v.front() : v.at(k);
}

inline SynthSpec synth_spec(const ExperimentConfig& cfg) {
  SynthSpec s;
  s.input_dim = cfg.model.input_dim;
  s.open_set_split = cfg.split;
  s.identity_dim = cfg.identity_dim;
  s.prototype_scale = cfg.prototype_scale;
  s.identity_noise = cfg.identity_noise;
  s.nuisance_noise = cfg.nuisance_noise;
  s.structure_seed = mix_seed(cfg.seed, 1);
  s.probe_pool_size = cfg.probe_pool;
  s.probe_seed = mix_seed(cfg.seed, 2);
  for (std::size_t k = 0; k < cfg.clients; ++k) {
    ClientSynthSpec c;
    c.num_classes = pick(cfg.classes, k);
    c.samples_per_class = pick(cfg.samples_per_class, k);
    c.rotation_deg = pick(cfg.rotation_deg, k);
    c.offset = pick(cfg.offset, k);
    c.noise_scale = pick(cfg.noise_scale, k);
    c.seed = mix_seed(cfg.seed, 100 + k);
    s.clients.push_back(c);
  }
  return s;
}

inline std::vector<Ticks> select(const std::vector<Ticks>& v, const std::vector<std::size_t>& idx) {
  if (v.size() == 1) return v;
  std::vector<Ticks> out;
  for (std::size_t i : idx) out.push_back(v.at(i));
  return out;
}

inline SimConfig sim_config(const ExperimentConfig& cfg, const std::vector<std::size_t>& part) {
  SimConfig s;
  s.n_clients = part.size();
  s.rounds = cfg.rounds;
  s.local_step_duration = select(cfg.local_step_duration, part);
  s.upload_latency = select(cfg.upload_latency, part);
  s.download_latency = select(cfg.download_latency, part);
  s.server_compute_time = cfg.server_compute_time;
  s.async_step_duration = cfg.async_step_duration;
  s.latency_jitter = cfg.latency_jitter;
  s.async_enabled = cfg.async_on();
  s.seed = mix_seed(cfg.seed, 3);
  return s;
}

inline MetricsRecord evaluate_client(const ClientState& s, const LabeledDataset& test, std::size_t reported_id,
                                     std::size_t round, std::uint64_t seed) {
  std::vector<std::vector<double>> emb;
  emb.reserve(test.size());
  for (const auto& x : test.inputs) emb.push_back(extract_embedding(s, x));
  const auto scores = score_pairs(emb, test.labels, kDefaultImpostorCap, mix_seed(seed, 400 + reported_id));
  return evaluate_scores(reported_id, round, scores);
}

}  // namespace detail

// Runs one experiment in memory. A training divergence is reported in the
// result rather than thrown; configuration errors are thrown.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  ExperimentResult res;
  res.config = cfg;
  res.run_id = run_id(cfg);
  res.participants = cfg.participants();
  const auto& part = res.participants;

  const auto data = generate(detail::synth_spec(cfg));

  TrainingConfig tc;
  tc.lr = cfg.lr;
  tc.batch_size = cfg.batch;
  tc.local_epochs = cfg.epochs;
  tc.center_lr = cfg.center_lr;
  tc.loss_weights = cfg.effective_loss_weights();

  // Every client starts from the same federated channel, as if the server had
  // broadcast an initial model.
  Rng shared_init(mix_seed(cfg.seed, 5));
  const auto fed_init = ChannelModel::init(cfg.model.fed_arch(), shared_init);

  std::vector<ClientState> clients;
  std::vector<double> sample_weights;
  double total_samples = 0.0;
  for (std::size_t k = 0; k < part.size(); ++k) {
    const auto& cd = data.clients.at(part[k]);
    auto c = make_client(k, cfg.model, tc, cd.train, mix_seed(cfg.seed, 200 + part[k]));
    c.fed_channel = fed_init;
    sample_weights.push_back(static_cast<double>(cd.train.size()));
    total_samples += static_cast<double>(cd.train.size());
    clients.push_back(std::move(c));
  }
  for (double& w : sample_weights) w /= total_samples;

  SimObserver obs;
  obs.on_local_round = [&](const ClientState& s, std::size_t round) {
    const std::size_t id = part[s.client_id];
    res.metrics.push_back(detail::evaluate_client(s, data.clients[id].test, id, round, cfg.seed));
    const auto t = dataset_total_loss(s);
    res.losses.push_back({id, round, t.total, t.fv_cos, t.cross2, t.center, dataset_local_cross_entropy(s)});
  };
  obs.on_aggregation = [&](const AggregationOutcome& o) {
    if (!o.correlation) return;
    const std::size_t round = o.state.round - 1;
    for (std::size_t a = 0; a < part.size(); ++a) {
      for (std::size_t b = 0; b < part.size(); ++b) {
        if (a != b) res.correlations.push_back({round, part[a], part[b], o.correlation->at(a, b)});
      }
    }
  };

  const auto sc = detail::sim_config(cfg, part);
  try {
    if (cfg.mode == ExperimentMode::Solo) {
      res.sim = run_solo(sc, std::move(clients), obs);
    } else {
      const auto probes = load_probe_set(data.probe_pool, cfg.probe_count, mix_seed(cfg.seed, 4));
      const auto strategy = cfg.personalized_on() ? AggregationStrategy::Personalized : AggregationStrategy::FedAvg;
      std::vector<double> weights;
      if (cfg.fedavg_weighting == FedAvgWeighting::Samples) weights = sample_weights;
      auto server = make_server(part.size(), probes, cfg.model.fed_arch(), AggregationConfig{cfg.gamma, cfg.clamp_epsilon},
                                strategy, weights);
      res.sim = run_simulation(sc, std::move(clients), std::move(server), obs);
    }
  } catch (const DivergenceError& e) {
    res.status = RunStatus::Diverged;
    res.error = e.what();
    res.error_round = e.round();
    res.error_batch = e.batch();
  }
  return res;
}

// CSV renderings of the traces.

inline std::string losses_csv(const std::vector<LossRecord>& rows) {
  std::string s = "client_id,round,total,fv_cos,cross2,center,local_cross1\n";
  for (const auto& r : rows) {
    s += std::to_string(r.client_id) + ',' + std::to_string(r.round) + ',' + format_double(r.total) + ',' +
         format_double(r.fv_cos) + ',' + format_double(r.cross2) + ',' + format_double(r.center) + ',' +
         format_double(r.local_cross1) + '\n';
  }
  return s;
}

inline std::string correlation_csv(const std::vector<CorrelationRecord>& rows) {
  std::string s = "round,client,other,value\n";
  for (const auto& r : rows) {
    s += std::to_string(r.round) + ',' + std::to_string(r.client) + ',' + std::to_string(r.other) + ',' +
         format_double(r.value) + '\n';
  }
  return s;
}

// Per round: mean training loss and mean test EER over the participants.
inline std::string run_convergence_csv(const ExperimentResult& r) {
  std::map<std::size_t, std::pair<double, double>> sums;
  std::map<std::size_t, std::size_t> counts;
  for (const auto& l : r.losses) sums[l.round].first += l.total;
  for (const auto& m : r.metrics) {
    sums[m.round].second += m.eer;
    ++counts[m.round];
  }
  std::string s = "round,mean_train_loss,mean_eer\n";
  for (const auto& [round, v] : sums) {
    const double n = static_cast<double>(counts[round]);
    s += std::to_string(round) + ',' + format_double(v.first / n) + ',' + format_double(v.second / n) + '\n';
  }
  return s;
}

inline nlohmann::ordered_json config_json(const ExperimentConfig& cfg) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& k : config_schema()) j[k.section][k.key] = k.get(cfg);
  return j;
}

inline nlohmann::ordered_json manifest_json(const ExperimentResult& r, const std::vector<std::string>& files) {
  nlohmann::ordered_json j;
  j["run_id"] = r.run_id;
  j["status"] = to_string(r.status);
  j["version"] = kVersion;
  j["mode"] = to_string(r.config.mode);
  j["seed"] = r.config.seed;
  j["toggles"] = {{"async", r.config.async_on()},
                  {"total_loss", r.config.total_loss_on()},
                  {"personalized", r.config.mode != ExperimentMode::Solo && r.config.personalized_on()}};
  if (r.status != RunStatus::Ok) {
    j["error"] = {{"message", r.error}};
    if (r.error_round) j["error"]["round"] = *r.error_round;
    if (r.error_batch) j["error"]["batch"] = *r.error_batch;
  }
  j["config"] = config_json(r.config);
  nlohmann::ordered_json fm = nlohmann::ordered_json::array();
  for (const auto& m : r.final_metrics()) {
    fm.push_back({{"client_id", m.client_id},
                  {"round", m.round},
                  {"eer", m.eer},
                  {"tar_at_far01", m.tar_at_far01},
                  {"n_genuine", m.n_genuine},
                  {"n_impostor", m.n_impostor}});
  }
  j["final_metrics"] = fm;
  j["files"] = files;
  return j;
}

namespace detail {

inline void write_file(const std::filesystem::path& p, const std::string& content) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write " + p.string());
  f << content;
  if (!f.flush()) throw Error("cannot write " + p.string());
}

// Written beside the target, then renamed into place.
inline void write_atomic(const std::filesystem::path& p, const std::string& content) {
  auto tmp = p;
  tmp += ".tmp";
  write_file(tmp, content);
  std::filesystem::rename(tmp, p);
}

}  // namespace detail

struct RunOutput {
  ExperimentResult result;
  std::filesystem::path dir;
};

// Runs the experiment and writes its directory under `out_root`. The manifest
// goes last, so its presence marks a finished run.
inline RunOutput run_to_directory(const ExperimentConfig& cfg, const std::filesystem::path& out_root) {
  RunOutput out{run_experiment(cfg), {}};
  const auto& r = out.result;
  out.dir = out_root / r.run_id;
  std::filesystem::create_directories(out.dir / "traces");
  std::vector<std::string> files;
  auto emit = [&](const std::string& rel, const std::string& content) {
    detail::write_file(out.dir / rel, content);
    files.push_back(rel);
  };
  emit("metrics.csv", to_csv(r.metrics));
  if (r.sim) emit("timeline.log", r.sim->log.to_ndjson());
  emit("traces/losses.csv", losses_csv(r.losses));
  emit("traces/correlation.csv", correlation_csv(r.correlations));
  emit("traces/convergence.csv", run_convergence_csv(r));
  emit("config.ini", echo_config(r.config));
  detail::write_atomic(out.dir / "manifest.json", manifest_json(r, files).dump(2) + "\n");
  return out;
}

// Sweeps.

struct SweepAxis {
  std::string key;  // section.key
  std::vector<std::string> values;
};

struct SweepPoint {
  std::vector<std::pair<std::string, std::string>> assignments;
  std::string label() const {
    std::string s;
    for (const auto& [k, v] : assignments) {
      if (!s.empty()) s += ';';
      s += k + '=' + v;
    }
    return s;
  }
};

// Parses "section.key=v1|v2|v3".
inline SweepAxis parse_axis(std::string_view spec) {
  const auto eq = spec.find('=');
  if (eq == std::string_view::npos) throw ConfigError("grid axis '" + std::string(spec) + "' is not key=v1|v2");
  SweepAxis a;
  a.key = std::string(trim(spec.substr(0, eq)));
  (void)find_config_key(a.key);
  for (auto v : split(spec.substr(eq + 1), '|')) a.values.emplace_back(v);
  if (a.values.empty()) throw ConfigError("grid axis " + a.key + " has no values");
  return a;
}

// Every k-element subset of {0..n-1}, in lexicographic order.
inline std::vector<std::vector<std::size_t>> combinations(std::size_t n, std::size_t k) {
  std::vector<std::vector<std::size_t>> out;
  if (k == 0 || k > n) return out;
  std::vector<std::size_t> c(k);
  for (std::size_t i = 0; i < k; ++i) c[i] = i;
  while (true) {
    out.push_back(c);
    std::size_t i = k;
    while (i > 0 && c[i - 1] == n - k + i - 1) --i;
    if (i == 0) break;
    ++c[i - 1];
    for (std::size_t j = i; j < k; ++j) c[j] = c[j - 1] + 1;
  }
  return out;
}

// Cartesian product of the axes, then of the client subsets of each listed
// size. With no axes and no subset sizes the grid is empty.
inline std::vector<SweepPoint> expand_grid(const std::vector<SweepAxis>& axes, const std::vector<std::size_t>& subset_sizes,
                                           std::size_t n_clients) {
  std::vector<SweepPoint> points;
  if (axes.empty() && subset_sizes.empty()) return points;
  points.push_back({});
  for (const auto& a : axes) {
    std::vector<SweepPoint> next;
    for (const auto& p : points) {
      for (const auto& v : a.values) {
        auto q = p;
        q.assignments.emplace_back(a.key, v);
        next.push_back(std::move(q));
      }
    }
    points = std::move(next);
  }
  if (!subset_sizes.empty()) {
    std::vector<SweepPoint> next;
    for (const auto& p : points) {
      for (std::size_t k : subset_sizes) {
        if (k == 0 || k > n_clients) throw ConfigError("subset size " + std::to_string(k) + " out of range");
        for (const auto& c : combinations(n_clients, k)) {
          auto q = p;
          std::string v;
          for (std::size_t i = 0; i < c.size(); ++i) v += (i ? ", " : "") + std::to_string(c[i]);
          q.assignments.emplace_back("data.client_subset", v);
          next.push_back(std::move(q));
        }
      }
    }
    points = std::move(next);
  }
  return points;
}

// The grid point's config. Unless the point sets the seed itself, the seed is
// derived from the base seed and the point's assignments, so equal points
// get equal seeds.
inline ExperimentConfig point_config(const ExperimentConfig& base, const SweepPoint& p) {
  ExperimentConfig c = base;
  bool seeded = false;
  for (const auto& [k, v] : p.assignments) {
    apply_override(c, k + "=" + v);
    seeded = seeded || k == "experiment.seed";
  }
  if (!seeded) c.seed = mix_seed(base.seed, fnv1a(p.label())) % 1'000'000'007ull;
  c.validate();
  return c;
}

inline constexpr const char* kSweepHeader = "point,assignments,run_id,status,clients,mean_eer,mean_tar_at_far01,eer,tar_at_far01";

struct SweepRow {
  std::size_t point = 0;
  std::string assignments;
  std::string run_id;
  RunStatus status = RunStatus::Ok;
  std::vector<MetricsRecord> final_metrics;
};

inline std::string sweep_row_csv(const SweepRow& r) {
  auto cell = [](const std::string& s) {
    std::string out;
    for (char ch : s) {
      if (ch == ',') ch = ' ';
      if (ch == ' ' && !out.empty() && out.back() == ' ') continue;
      out += ch;
    }
    return out;
  };
  std::string clients, eers, tars;
  double me = 0.0, mt = 0.0;
  for (std::size_t i = 0; i < r.final_metrics.size(); ++i) {
    const auto& m = r.final_metrics[i];
    const char* sep = i ? " " : "";
    clients += sep + std::to_string(m.client_id);
    eers += sep + format_double(m.eer);
    tars += sep + format_double(m.tar_at_far01);
    me += m.eer;
    mt += m.tar_at_far01;
  }
  const double n = static_cast<double>(r.final_metrics.size());
  const std::string mean_e = n > 0 ? format_double(me / n) : "";
  const std::string mean_t = n > 0 ? format_double(mt / n) : "";
  return std::to_string(r.point) + ',' + cell(r.assignments) + ',' + r.run_id + ',' + to_string(r.status) + ',' + clients +
         ',' + mean_e + ',' + mean_t + ',' + eers + ',' + tars + '\n';
}

struct SweepOutput {
  std::vector<SweepRow> rows;
  std::string summary_csv;
  bool any_diverged = false;
};

// Runs every point into `out_root` and writes `out_root/summary.csv`.
inline SweepOutput run_sweep(const ExperimentConfig& base, const std::vector<SweepPoint>& points,
                             const std::filesystem::path& out_root) {
  std::vector<ExperimentConfig> cfgs;
  for (const auto& p : points) cfgs.push_back(point_config(base, p));  // validate the whole grid first
  SweepOutput out;
  out.summary_csv = std::string(kSweepHeader) + "\n";
  std::filesystem::create_directories(out_root);
  for (std::size_t i = 0; i < points.size(); ++i) {
    auto run = run_to_directory(cfgs[i], out_root);
    SweepRow row{i, points[i].label(), run.result.run_id, run.result.status, run.result.final_metrics()};
    out.any_diverged = out.any_diverged || row.status != RunStatus::Ok;
    out.summary_csv += sweep_row_csv(row);
    out.rows.push_back(std::move(row));
  }
  detail::write_atomic(out_root / "summary.csv", out.summary_csv);
  return out;
}

}  // namespace pafedfv
