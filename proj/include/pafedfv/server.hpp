#pragma once

// Server runtime: a full-participation barrier over uploads, then one
// personalized (or averaged) federated channel per client.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pafedfv/aggregation.hpp"
#include "pafedfv/client.hpp"
#include "pafedfv/errors.hpp"
#include "pafedfv/random.hpp"

namespace pafedfv {

enum class AggregationStrategy { Personalized, FedAvg };

inline const char* to_string(AggregationStrategy s) {
  return s == AggregationStrategy::Personalized ? "personalized" : "fedavg";
}

struct ServerState {
  std::size_t round = 0;
  std::size_t expected_clients = 0;
  std::map<std::size_t, UploadMessage> received;
  ProbeSet probes;
  ChannelArch fed_arch;  // architecture of the uploaded federated channels
  AggregationConfig agg;
  AggregationStrategy strategy = AggregationStrategy::Personalized;
  std::vector<double> fedavg_weights;  // empty means uniform
};

struct DispatchMessage {
  std::size_t client_id = 0;
  std::size_t round = 0;
  ParamVector params;
};

inline ServerState make_server(std::size_t n_clients, ProbeSet probes, ChannelArch fed_arch, AggregationConfig agg,
                               AggregationStrategy strategy, std::vector<double> fedavg_weights = {}) {
  if (n_clients == 0) throw ConfigError("server needs at least one client");
  agg.validate();
  if (!fedavg_weights.empty() && fedavg_weights.size() != n_clients) {
    throw ConfigError("server: fedavg weights must have one entry per client");
  }
  if (probes.dim() != fed_arch.widths.front()) throw ConfigError("server: probe dimension does not match the channel input");
  ServerState s;
  s.expected_clients = n_clients;
  s.probes = std::move(probes);
  s.fed_arch = std::move(fed_arch);
  s.agg = agg;
  s.strategy = strategy;
  s.fedavg_weights = std::move(fedavg_weights);
  return s;
}

inline bool aggregation_ready(const ServerState& s) { return s.received.size() == s.expected_clients; }

inline ServerState handle_upload(ServerState s, UploadMessage msg) {
  if (msg.client_id >= s.expected_clients) {
    throw ProtocolError("upload from unknown client " + std::to_string(msg.client_id));
  }
  if (msg.fed_round != s.round) {
    throw StaleMessageError("upload for round " + std::to_string(msg.fed_round) + " while server is in round " +
                            std::to_string(s.round));
  }
  if (s.received.contains(msg.client_id)) {
    throw ProtocolError("duplicate upload from client " + std::to_string(msg.client_id) + " in round " +
                        std::to_string(s.round));
  }
  const auto id = msg.client_id;
  s.received.emplace(id, std::move(msg));
  return s;
}

struct AggregationOutcome {
  ServerState state;
  std::vector<DispatchMessage> dispatches;            // ordered by client id
  std::optional<CorrelationMatrix> correlation;       // personalized strategy with N >= 2
};

inline AggregationOutcome run_aggregation(ServerState s) {
  if (!aggregation_ready(s)) {
    throw ProtocolError("run_aggregation: " + std::to_string(s.received.size()) + " of " +
                        std::to_string(s.expected_clients) + " uploads present");
  }
  const std::size_t n = s.expected_clients;
  std::vector<ParamVector> params;
  params.reserve(n);
  for (const auto& [id, msg] : s.received) params.push_back(msg.params);

  AggregationOutcome out;
  out.dispatches.reserve(n);
  if (n == 1) {
    // No other clients to mix with.
    out.dispatches.push_back({0, s.round, params.front()});
  } else if (s.strategy == AggregationStrategy::Personalized) {
    std::vector<std::vector<std::vector<double>>> emb;
    emb.reserve(n);
    for (const auto& p : params) emb.push_back(embed_probes(ChannelModel(s.fed_arch, p), s.probes));
    auto r = correlation_from_embeddings(emb, s.agg);
    for (std::size_t k = 0; k < n; ++k) out.dispatches.push_back({k, s.round, personalized_aggregate(params, r, s.agg, k)});
    out.correlation = std::move(r);
  } else {
    std::vector<double> w = s.fedavg_weights;
    if (w.empty()) w.assign(n, 1.0 / static_cast<double>(n));
    const auto avg = fedavg_aggregate(params, w);
    for (std::size_t k = 0; k < n; ++k) out.dispatches.push_back({k, s.round, avg});
  }
  s.received.clear();
  ++s.round;
  out.state = std::move(s);
  return out;
}

// Seeded sample of T distinct items from the source pool.
inline ProbeSet load_probe_set(std::span<const std::vector<double>> source, std::size_t count, std::uint64_t seed) {
  if (count == 0) throw ConfigError("probe set size must be >= 1");
  if (source.size() < count) {
    throw ConfigError("probe source has " + std::to_string(source.size()) + " items, " + std::to_string(count) +
                      " requested");
  }
  std::vector<std::size_t> idx(source.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(mix_seed(seed, 0x9B));
  for (std::size_t i = 0; i < count; ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
  std::vector<std::vector<double>> items;
  items.reserve(count);
  for (std::size_t i = 0; i < count; ++i) items.push_back(source[idx[i]]);
  return ProbeSet(std::move(items));
}

}  // namespace pafedfv
