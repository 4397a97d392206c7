#pragma once

// One client's lifecycle: local training of the full dual-channel model,
// upload of the federated channel, local-channel training while waiting, and
// adoption of the personalized federated channel the server returns.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pafedfv/errors.hpp"
#include "pafedfv/losses.hpp"
#include "pafedfv/nn.hpp"
#include "pafedfv/random.hpp"
#include "pafedfv/synth.hpp"

namespace pafedfv {

struct ClientModelConfig {
  std::size_t input_dim = 32;
  std::size_t local_hidden = 64;
  std::size_t fed_hidden = 32;
  std::size_t embedding_dim = 16;

  ChannelArch local_arch() const { return {{input_dim, local_hidden, embedding_dim}, Activation::Tanh}; }
  ChannelArch fed_arch() const { return {{input_dim, fed_hidden, embedding_dim}, Activation::Tanh}; }
};

struct TrainingConfig {
  double lr = 0.01;
  std::size_t batch_size = 16;
  std::size_t local_epochs = 3;
  double center_lr = 0.5;
  LossWeights loss_weights;

  void validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("training lr must be finite and >= 0");
    if (batch_size == 0) throw ConfigError("training batch_size must be >= 1");
    if (!(center_lr >= 0.0 && center_lr <= 1.0)) throw ConfigError("training center_lr must lie in [0, 1]");
    loss_weights.validate();
  }
};

enum class ClientPhase { LocalTraining, Waiting, Idle };

inline const char* to_string(ClientPhase p) {
  switch (p) {
    case ClientPhase::LocalTraining: return "local-training";
    case ClientPhase::Waiting: return "waiting";
    case ClientPhase::Idle: return "idle";
  }
  return "?";
}

struct ClientState {
  std::size_t client_id = 0;
  ChannelModel local_channel;
  ChannelModel fed_channel;
  Head local_classifier;  // trained only while waiting
  Head fused_classifier;  // trained only in local rounds
  Head fusion;            // trained only in local rounds
  CenterBank centers;
  LabeledDataset dataset;
  TrainingConfig training;
  std::size_t fed_round = 0;
  ClientPhase phase = ClientPhase::LocalTraining;

  Rng shuffle_rng{0};
  Rng async_rng{0};
  std::vector<std::size_t> async_order;
  std::size_t async_cursor = 0;
  std::size_t async_steps_taken = 0;  // over the whole lifetime
};

struct UploadMessage {
  std::size_t client_id = 0;
  std::size_t fed_round = 0;
  ParamVector params;
};

inline ClientState make_client(std::size_t id, const ClientModelConfig& model, const TrainingConfig& training,
                               LabeledDataset train, std::uint64_t seed) {
  training.validate();
  if (train.size() == 0) throw ConfigError("client " + std::to_string(id) + " has no training data");
  if (train.num_classes < 2) throw ConfigError("client " + std::to_string(id) + " needs >= 2 training classes");
  Rng init(mix_seed(seed, 10));
  ClientState s;
  s.client_id = id;
  s.local_channel = ChannelModel::init(model.local_arch(), init);
  s.fed_channel = ChannelModel::init(model.fed_arch(), init);
  s.fusion = Head::init(HeadKind::Fusion, 2 * model.embedding_dim, model.embedding_dim, init);
  s.fused_classifier = Head::init(HeadKind::Classifier, model.embedding_dim, train.num_classes, init);
  s.local_classifier = Head::init(HeadKind::Classifier, model.embedding_dim, train.num_classes, init);
  s.centers = CenterBank(train.num_classes, model.embedding_dim, training.center_lr);
  s.dataset = std::move(train);
  s.training = training;
  s.shuffle_rng = Rng(mix_seed(seed, 11));
  s.async_rng = Rng(mix_seed(seed, 12));
  return s;
}

namespace detail {

struct Batch {
  std::vector<std::vector<double>> inputs;
  std::vector<std::size_t> labels;
};

inline Batch gather(const LabeledDataset& ds, std::span<const std::size_t> idx) {
  Batch b;
  b.inputs.reserve(idx.size());
  b.labels.reserve(idx.size());
  for (auto i : idx) {
    b.inputs.push_back(ds.inputs[i]);
    b.labels.push_back(ds.labels[i]);
  }
  return b;
}

inline std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

inline void require_phase(const ClientState& s, ClientPhase want, const char* op) {
  if (s.phase != want) {
    throw ProtocolError(std::string(op) + ": client " + std::to_string(s.client_id) + " is " + to_string(s.phase) +
                        ", expected " + to_string(want));
  }
}

}  // namespace detail

// Minibatches per epoch for a dataset of n samples.
inline std::size_t batches_per_epoch(std::size_t n, std::size_t batch_size) { return (n + batch_size - 1) / batch_size; }

struct LocalRoundResult {
  ClientState state;
  UploadMessage upload;
  std::size_t steps = 0;  // SGD steps taken
};

// `epochs` passes of seeded-shuffle minibatch SGD on the total loss over the
// local channel, federated channel, fusion layer and fused classifier.
inline LocalRoundResult local_train_round(ClientState state, std::size_t epochs) {
  detail::require_phase(state, ClientPhase::LocalTraining, "local_train_round");
  const auto& tc = state.training;
  std::size_t steps = 0;
  for (std::size_t e = 0; e < epochs; ++e) {
    auto order = detail::iota(state.dataset.size());
    state.shuffle_rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
      const std::size_t end = std::min(order.size(), start + tc.batch_size);
      const auto batch = detail::gather(state.dataset, std::span(order).subspan(start, end - start));
      const FusedPipeline pipe{state.local_channel, state.fed_channel, state.fusion, state.fused_classifier};
      TotalLossResult r;
      try {
        r = total_loss_batch(pipe, batch.inputs, batch.labels, state.centers, tc.loss_weights);
      } catch (const DomainError& err) {
        // Overflowing activations or a collapsed representation.
        throw DivergenceError("client " + std::to_string(state.client_id) + ": " + err.what(), state.fed_round, steps);
      }
      if (!std::isfinite(r.terms.total)) {
        throw DivergenceError("client " + std::to_string(state.client_id) + ": non-finite total loss",
                              state.fed_round, steps);
      }
      try {
        state.local_channel.set_params(sgd_step(state.local_channel.params(), r.local, tc.lr));
        state.fed_channel.set_params(sgd_step(state.fed_channel.params(), r.fed, tc.lr));
        state.fusion.set_params(sgd_step(state.fusion.params(), r.fusion, tc.lr));
        state.fused_classifier.set_params(sgd_step(state.fused_classifier.params(), r.classifier, tc.lr));
      } catch (const DomainError& err) {
        throw DivergenceError("client " + std::to_string(state.client_id) + ": " + err.what(), state.fed_round, steps);
      }
      state.centers = update_centers(state.centers, r.embeddings, batch.labels);
      ++steps;
    }
  }
  state.phase = ClientPhase::Waiting;
  UploadMessage up{state.client_id, state.fed_round, state.fed_channel.params()};
  return {std::move(state), std::move(up), steps};
}

// One minibatch of local cross-entropy on the local channel and its classifier.
// Nothing else in the state changes.
inline ClientState async_train_step(ClientState state) {
  detail::require_phase(state, ClientPhase::Waiting, "async_train_step");
  const auto& tc = state.training;
  const std::size_t n = state.dataset.size();
  if (state.async_cursor >= state.async_order.size()) {
    state.async_order = detail::iota(n);
    state.async_rng.shuffle(state.async_order);
    state.async_cursor = 0;
  }
  const std::size_t end = std::min(n, state.async_cursor + tc.batch_size);
  const auto batch =
      detail::gather(state.dataset, std::span(state.async_order).subspan(state.async_cursor, end - state.async_cursor));
  state.async_cursor = end;

  LocalCrossEntropyResult r;
  try {
    r = local_cross_entropy_batch(state.local_channel, state.local_classifier, batch.inputs, batch.labels);
  } catch (const DomainError& err) {
    throw DivergenceError("client " + std::to_string(state.client_id) + ": " + err.what(), state.fed_round,
                          state.async_steps_taken);
  }
  if (!std::isfinite(r.loss)) {
    throw DivergenceError("client " + std::to_string(state.client_id) + ": non-finite local cross-entropy",
                          state.fed_round, state.async_steps_taken);
  }
  try {
    state.local_channel.set_params(sgd_step(state.local_channel.params(), r.local, tc.lr));
    state.local_classifier.set_params(sgd_step(state.local_classifier.params(), r.classifier, tc.lr));
  } catch (const DomainError& err) {
    throw DivergenceError("client " + std::to_string(state.client_id) + ": " + err.what(), state.fed_round,
                          state.async_steps_taken);
  }
  ++state.async_steps_taken;
  return state;
}

// Installs the returned federated channel. The local channel keeps whatever
// it learned while waiting.
inline ClientState adopt_global(ClientState state, ParamVector new_fed_params) {
  detail::require_phase(state, ClientPhase::Waiting, "adopt_global");
  state.fed_channel.set_params(std::move(new_fed_params));
  ++state.fed_round;
  state.phase = ClientPhase::LocalTraining;
  return state;
}

inline ClientState mark_idle(ClientState state) {
  state.phase = ClientPhase::Idle;
  return state;
}

inline std::vector<double> extract_embedding(const ClientState& s, std::span<const double> input) {
  return fused_embedding(s.local_channel, s.fed_channel, s.fusion, input);
}

// Full-dataset diagnostics.

inline TotalLossTerms dataset_total_loss(const ClientState& s) {
  const FusedPipeline pipe{s.local_channel, s.fed_channel, s.fusion, s.fused_classifier};
  return total_loss_batch(pipe, s.dataset.inputs, s.dataset.labels, s.centers, s.training.loss_weights).terms;
}

inline double dataset_local_cross_entropy(const ClientState& s) {
  return local_cross_entropy_batch(s.local_channel, s.local_classifier, s.dataset.inputs, s.dataset.labels).loss;
}

inline double dataset_mean_fv_cos(const ClientState& s) {
  double sum = 0.0;
  for (const auto& x : s.dataset.inputs) sum += fv_cos_loss(forward(s.local_channel, x), forward(s.fed_channel, x));
  return sum / static_cast<double>(s.dataset.size());
}

}  // namespace pafedfv
