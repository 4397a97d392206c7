#pragma once

// Deterministic discrete-event simulation of the federated protocol.
//
// Time is integer ticks. A client trains locally for (SGD steps x step
// duration), uploads, then waits for its dispatch. While waiting it takes one
// async step per `async_step_duration` ticks, but only steps that finish no
// later than the dispatch arrival. The server aggregates once the last upload
// of the round has arrived.

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <queue>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "json.hpp"
#include "pafedfv/client.hpp"
#include "pafedfv/errors.hpp"
#include "pafedfv/random.hpp"
#include "pafedfv/server.hpp"

namespace pafedfv {

using Ticks = std::int64_t;
inline constexpr Ticks kNeverTicks = std::numeric_limits<Ticks>::max();

struct SimConfig {
  std::size_t n_clients = 4;
  std::size_t rounds = 10;
  // Per-client values; a single entry applies to every client.
  std::vector<Ticks> local_step_duration{1};
  std::vector<Ticks> upload_latency{10};
  std::vector<Ticks> download_latency{10};
  Ticks server_compute_time = 5;
  Ticks async_step_duration = 2;  // kNeverTicks: no step ever fits in a wait
  Ticks latency_jitter = 0;       // seeded extra in [0, jitter] on every transfer
  bool async_enabled = true;
  std::uint64_t seed = 0;

  Ticks per_client(const std::vector<Ticks>& v, std::size_t k) const { return v.size() == 1 ? v.front() : v.at(k); }

  void validate() const {
    if (n_clients == 0) throw ConfigError("sim: n_clients must be >= 1");
    if (rounds == 0) throw ConfigError("sim: rounds must be >= 1");
    for (const auto* v : {&local_step_duration, &upload_latency, &download_latency}) {
      if (v->size() != 1 && v->size() != n_clients) throw ConfigError("sim: per-client durations need 1 or n_clients entries");
      for (Ticks t : *v) {
        if (t < 0) throw ConfigError("sim: durations must be >= 0");
      }
    }
    if (server_compute_time < 0 || latency_jitter < 0) throw ConfigError("sim: durations must be >= 0");
    if (async_enabled && async_step_duration <= 0) throw ConfigError("sim: async_step_duration must be > 0");
  }
};

// Declaration order is the tie-break rank at equal timestamps: server events
// first, and an async step finishing exactly when the dispatch arrives counts.
enum class EventKind { UploadArrived, AggregationDone, AsyncStepDue, ModelReturned, LocalRoundDone, ExperimentEnd };

inline const char* to_string(EventKind k) {
  switch (k) {
    case EventKind::UploadArrived: return "UploadArrived";
    case EventKind::AggregationDone: return "AggregationDone";
    case EventKind::AsyncStepDue: return "AsyncStepDue";
    case EventKind::ModelReturned: return "ModelReturned";
    case EventKind::LocalRoundDone: return "LocalRoundDone";
    case EventKind::ExperimentEnd: return "ExperimentEnd";
  }
  return "?";
}

inline bool is_server_event(EventKind k) { return k == EventKind::UploadArrived || k == EventKind::AggregationDone; }

inline constexpr std::size_t kServerSubject = std::numeric_limits<std::size_t>::max();

struct SimEvent {
  Ticks t = 0;
  EventKind kind = EventKind::ExperimentEnd;
  std::size_t subject = 0;  // client id, or kServerSubject
  std::size_t round = 0;
  std::uint64_t seq = 0;    // insertion order, last tie-break
  std::uint64_t token = 0;  // wait-window id for AsyncStepDue

  auto key() const {
    const std::size_t subj = subject == kServerSubject ? 0 : subject + 1;
    return std::make_tuple(t, static_cast<int>(kind), subj, seq);
  }
};

struct TimelineRecord {
  Ticks t = 0;
  EventKind kind = EventKind::ExperimentEnd;
  std::string subject;
  std::size_t round = 0;
  std::vector<std::pair<std::string, std::int64_t>> counters;

  friend bool operator==(const TimelineRecord&, const TimelineRecord&) = default;
};

class TimelineLog {
public:
  void append(TimelineRecord r) {
    if (!records_.empty() && r.t < records_.back().t) throw Error("TimelineLog: timestamps must be nondecreasing");
    records_.push_back(std::move(r));
  }

  const std::vector<TimelineRecord>& records() const noexcept { return records_; }

  // One JSON object per line: t, kind, subject, round, counters.
  std::string to_ndjson() const {
    std::string out;
    for (const auto& r : records_) {
      nlohmann::ordered_json j;
      j["t"] = r.t;
      j["kind"] = to_string(r.kind);
      j["subject"] = r.subject;
      j["round"] = r.round;
      nlohmann::ordered_json c = nlohmann::ordered_json::object();
      for (const auto& [k, v] : r.counters) c[k] = v;
      j["counters"] = std::move(c);
      out += j.dump();
      out += '\n';
    }
    return out;
  }

  friend bool operator==(const TimelineLog&, const TimelineLog&) = default;

private:
  std::vector<TimelineRecord> records_;
};

inline std::string subject_name(std::size_t subject) {
  return subject == kServerSubject ? "server" : "client-" + std::to_string(subject);
}

// Per client and round: how the span from round start to adoption was spent.
struct RoundAccount {
  std::size_t client = 0;
  std::size_t round = 0;
  Ticks round_start = 0;
  Ticks local_time = 0;
  Ticks wait_time = 0;
  std::size_t async_steps = 0;
  Ticks async_step_duration = 0;
  Ticks idle = 0;
  Ticks adopted_at = 0;
};

struct UploadAudit {
  std::size_t client = 0;
  std::size_t round = 0;
  std::uint64_t sent_checksum = 0;
  std::uint64_t received_checksum = 0;
};

struct SimObserver {
  // After each local round, before the upload leaves.
  std::function<void(const ClientState&, std::size_t round)> on_local_round;
  std::function<void(const AggregationOutcome&)> on_aggregation;
};

struct SimResult {
  TimelineLog log;
  std::vector<ClientState> clients;
  ServerState server;
  std::vector<RoundAccount> accounts;
  std::vector<UploadAudit> uploads;
  std::size_t isolation_violations = 0;  // async steps that touched frozen parts
  Ticks end_time = 0;
};

namespace detail {

inline std::uint64_t frozen_checksum(const ClientState& s) {
  std::uint64_t h = s.fed_channel.params().checksum();
  h = mix_seed(h, s.fused_classifier.params().checksum());
  return mix_seed(h, s.fusion.params().checksum());
}

class EventQueue {
public:
  void push(SimEvent e) {
    e.seq = next_seq_++;
    heap_.push(std::move(e));
  }
  bool empty() const { return heap_.empty(); }
  SimEvent pop() {
    SimEvent e = heap_.top();
    heap_.pop();
    return e;
  }

private:
  struct Later {
    bool operator()(const SimEvent& a, const SimEvent& b) const { return a.key() > b.key(); }
  };
  std::priority_queue<SimEvent, std::vector<SimEvent>, Later> heap_;
  std::uint64_t next_seq_ = 0;
};

}  // namespace detail

inline SimResult run_simulation(const SimConfig& cfg, std::vector<ClientState> clients, ServerState server,
                                const SimObserver& observer = {}) {
  cfg.validate();
  if (clients.size() != cfg.n_clients || server.expected_clients != cfg.n_clients) {
    throw ConfigError("sim: client count does not match configuration");
  }
  for (std::size_t k = 0; k < clients.size(); ++k) {
    if (clients[k].client_id != k) throw ConfigError("sim: client ids must be 0..N-1 in order");
  }

  Rng jitter_rng(mix_seed(cfg.seed, 0x51));
  auto jitter = [&]() -> Ticks {
    return cfg.latency_jitter == 0 ? 0 : static_cast<Ticks>(jitter_rng.below(static_cast<std::size_t>(cfg.latency_jitter) + 1));
  };
  const bool async_on = cfg.async_enabled && cfg.async_step_duration != kNeverTicks;

  SimResult res;
  detail::EventQueue q;
  std::vector<RoundAccount> open(cfg.n_clients);
  std::vector<std::uint64_t> wait_token(cfg.n_clients, 0);
  std::vector<std::uint64_t> sent_checksum(cfg.n_clients, 0);
  std::vector<UploadMessage> in_flight(cfg.n_clients);
  std::vector<DispatchMessage> pending_dispatch;
  std::size_t finished = 0;

  auto start_round = [&](std::size_t k, Ticks now) {
    const std::size_t epochs = clients[k].training.local_epochs;
    auto r = local_train_round(std::move(clients[k]), epochs);
    clients[k] = std::move(r.state);
    in_flight[k] = std::move(r.upload);
    auto& acc = open[k];
    acc = RoundAccount{};
    acc.client = k;
    acc.round = clients[k].fed_round;
    acc.round_start = now;
    acc.local_time = static_cast<Ticks>(r.steps) * cfg.per_client(cfg.local_step_duration, k);
    acc.async_step_duration = async_on ? cfg.async_step_duration : 0;
    q.push({now + acc.local_time, EventKind::LocalRoundDone, k, acc.round});
  };

  for (std::size_t k = 0; k < cfg.n_clients; ++k) start_round(k, 0);

  while (!q.empty()) {
    const SimEvent ev = q.pop();
    TimelineRecord rec{ev.t, ev.kind, subject_name(ev.subject), ev.round, {}};
    switch (ev.kind) {
      case EventKind::LocalRoundDone: {
        const std::size_t k = ev.subject;
        if (observer.on_local_round) observer.on_local_round(clients[k], ev.round);
        sent_checksum[k] = in_flight[k].params.checksum();
        q.push({ev.t + cfg.per_client(cfg.upload_latency, k) + jitter(), EventKind::UploadArrived, kServerSubject,
                ev.round, 0, k});
        ++wait_token[k];
        if (async_on) {
          q.push({ev.t + cfg.async_step_duration, EventKind::AsyncStepDue, k, ev.round, 0, wait_token[k]});
        }
        rec.counters = {{"local_time", open[k].local_time}};
        break;
      }
      case EventKind::UploadArrived: {
        // The token field carries the sender id for upload events.
        const std::size_t k = static_cast<std::size_t>(ev.token);
        res.uploads.push_back({k, ev.round, sent_checksum[k], 0});
        server = handle_upload(std::move(server), std::move(in_flight[k]));
        res.uploads.back().received_checksum = server.received.at(k).params.checksum();
        rec.counters = {{"from", static_cast<std::int64_t>(k)},
                        {"received", static_cast<std::int64_t>(server.received.size())}};
        if (aggregation_ready(server)) q.push({ev.t + cfg.server_compute_time, EventKind::AggregationDone, kServerSubject, ev.round});
        break;
      }
      case EventKind::AggregationDone: {
        auto outcome = run_aggregation(std::move(server));
        if (observer.on_aggregation) observer.on_aggregation(outcome);
        server = std::move(outcome.state);
        pending_dispatch = std::move(outcome.dispatches);
        for (std::size_t k = 0; k < cfg.n_clients; ++k) {
          q.push({ev.t + cfg.per_client(cfg.download_latency, k) + jitter(), EventKind::ModelReturned, k, ev.round});
        }
        rec.counters = {{"dispatched", static_cast<std::int64_t>(cfg.n_clients)}};
        break;
      }
      case EventKind::AsyncStepDue: {
        const std::size_t k = ev.subject;
        if (ev.token != wait_token[k] || clients[k].phase != ClientPhase::Waiting) continue;  // wait already over
        const auto before = detail::frozen_checksum(clients[k]);
        clients[k] = async_train_step(std::move(clients[k]));
        if (detail::frozen_checksum(clients[k]) != before) ++res.isolation_violations;
        ++open[k].async_steps;
        q.push({ev.t + cfg.async_step_duration, EventKind::AsyncStepDue, k, ev.round, 0, wait_token[k]});
        rec.counters = {{"async_steps", static_cast<std::int64_t>(open[k].async_steps)}};
        break;
      }
      case EventKind::ModelReturned: {
        const std::size_t k = ev.subject;
        ++wait_token[k];  // cancels pending async steps
        auto& acc = open[k];
        acc.adopted_at = ev.t;
        acc.wait_time = ev.t - (acc.round_start + acc.local_time);
        acc.idle = acc.wait_time - static_cast<Ticks>(acc.async_steps) * acc.async_step_duration;
        clients[k] = adopt_global(std::move(clients[k]), pending_dispatch.at(k).params);
        res.accounts.push_back(acc);
        rec.counters = {{"async_steps", static_cast<std::int64_t>(acc.async_steps)},
                        {"idle", acc.idle},
                        {"wait", acc.wait_time}};
        if (clients[k].fed_round < cfg.rounds) {
          start_round(k, ev.t);
        } else {
          clients[k] = mark_idle(std::move(clients[k]));
          if (++finished == cfg.n_clients) q.push({ev.t, EventKind::ExperimentEnd, kServerSubject, cfg.rounds});
        }
        break;
      }
      case EventKind::ExperimentEnd:
        res.end_time = ev.t;
        rec.subject = "sim";
        break;
    }
    res.log.append(std::move(rec));
  }

  res.clients = std::move(clients);
  res.server = std::move(server);
  return res;
}

// The same protocol with every wait spent idle.
inline SimResult synchronous_reference(SimConfig cfg, std::vector<ClientState> clients, ServerState server,
                                       const SimObserver& observer = {}) {
  cfg.async_enabled = false;
  return run_simulation(cfg, std::move(clients), std::move(server), observer);
}

// Clients train alone: no uploads, no server, no waiting.
inline SimResult run_solo(const SimConfig& cfg, std::vector<ClientState> clients, const SimObserver& observer = {}) {
  cfg.validate();
  if (clients.size() != cfg.n_clients) throw ConfigError("sim: client count does not match configuration");
  SimResult res;
  detail::EventQueue q;
  std::vector<RoundAccount> open(cfg.n_clients);
  std::vector<UploadMessage> own(cfg.n_clients);
  std::size_t finished = 0;

  auto start_round = [&](std::size_t k, Ticks now) {
    const std::size_t epochs = clients[k].training.local_epochs;
    auto r = local_train_round(std::move(clients[k]), epochs);
    clients[k] = std::move(r.state);
    own[k] = std::move(r.upload);
    open[k] = RoundAccount{};
    open[k].client = k;
    open[k].round = clients[k].fed_round;
    open[k].round_start = now;
    open[k].local_time = static_cast<Ticks>(r.steps) * cfg.per_client(cfg.local_step_duration, k);
    q.push({now + open[k].local_time, EventKind::LocalRoundDone, k, open[k].round});
  };
  for (std::size_t k = 0; k < cfg.n_clients; ++k) start_round(k, 0);

  while (!q.empty()) {
    const SimEvent ev = q.pop();
    TimelineRecord rec{ev.t, ev.kind, subject_name(ev.subject), ev.round, {}};
    if (ev.kind == EventKind::LocalRoundDone) {
      const std::size_t k = ev.subject;
      if (observer.on_local_round) observer.on_local_round(clients[k], ev.round);
      rec.counters = {{"local_time", open[k].local_time}};
      open[k].adopted_at = ev.t;
      res.accounts.push_back(open[k]);
      clients[k] = adopt_global(std::move(clients[k]), std::move(own[k].params));
      if (clients[k].fed_round < cfg.rounds) {
        start_round(k, ev.t);
      } else {
        clients[k] = mark_idle(std::move(clients[k]));
        if (++finished == cfg.n_clients) q.push({ev.t, EventKind::ExperimentEnd, kServerSubject, cfg.rounds});
      }
    } else {
      res.end_time = ev.t;
      rec.subject = "sim";
    }
    res.log.append(std::move(rec));
  }
  res.clients = std::move(clients);
  return res;
}

}  // namespace pafedfv
