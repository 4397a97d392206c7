#include <gtest/gtest.h>

#include "pafedfv/aggregation.hpp"
#include "pafedfv/client.hpp"
#include "pafedfv/synth.hpp"

using namespace pafedfv;

namespace {

SynthSpec small_spec(std::uint64_t seed) {
  SynthSpec s;
  s.structure_seed = mix_seed(seed, 1);
  s.probe_pool_size = 4;
  for (std::size_t k = 0; k < 2; ++k) {
    ClientSynthSpec c;
    c.num_classes = 10;
    c.samples_per_class = 8;
    c.rotation_deg = 30.0 * static_cast<double>(k);
    c.offset = 0.5 * static_cast<double>(k);
    c.seed = mix_seed(seed, 100 + k);
    s.clients.push_back(c);
  }
  return s;
}

ClientState client_for(std::uint64_t seed, std::size_t which = 0, TrainingConfig tc = {}) {
  const auto data = generate(small_spec(seed));
  return make_client(which, ClientModelConfig{}, tc, data.clients[which].train, mix_seed(seed, 200 + which));
}

void expect_same_params(const ClientState& a, const ClientState& b) {
  EXPECT_EQ(a.local_channel.params(), b.local_channel.params());
  EXPECT_EQ(a.fed_channel.params(), b.fed_channel.params());
  EXPECT_EQ(a.fusion.params(), b.fusion.params());
  EXPECT_EQ(a.fused_classifier.params(), b.fused_classifier.params());
  EXPECT_EQ(a.local_classifier.params(), b.local_classifier.params());
}

}  // namespace

TEST(LocalTrainRound, ZeroEpochsIsNoOp) {
  const auto s = client_for(1);
  const auto r = local_train_round(s, 0);
  expect_same_params(s, r.state);
  EXPECT_EQ(r.state.centers, s.centers);
  EXPECT_EQ(r.state.phase, ClientPhase::Waiting);
  EXPECT_EQ(r.upload.params, s.fed_channel.params());
  EXPECT_EQ(r.upload.fed_round, 0u);
  EXPECT_EQ(r.steps, 0u);
}

TEST(LocalTrainRound, ZeroLearningRateKeepsParameters) {
  TrainingConfig tc;
  tc.lr = 0.0;
  const auto s = client_for(2, 0, tc);
  const auto r = local_train_round(s, 3);
  expect_same_params(s, r.state);
  EXPECT_EQ(r.steps, 3 * batches_per_epoch(s.dataset.size(), tc.batch_size));
}

TEST(LocalTrainRound, UploadCarriesNewFederatedChannel) {
  const auto s = client_for(3);
  const auto r = local_train_round(s, 1);
  EXPECT_EQ(r.upload.params, r.state.fed_channel.params());
  EXPECT_FALSE(r.upload.params == s.fed_channel.params());
  EXPECT_EQ(r.upload.client_id, s.client_id);
}

TEST(LocalTrainRound, OneEpochDecreasesTrainingLoss) {
  int decreased = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto s = client_for(seed);
    const double before = dataset_total_loss(s).total;
    const auto r = local_train_round(s, 1);
    const double after = dataset_total_loss(r.state).total;
    decreased += after < before;
  }
  EXPECT_GE(decreased, 18);
}

TEST(LocalTrainRound, WrongPhase) {
  auto s = client_for(4);
  s.phase = ClientPhase::Waiting;
  EXPECT_THROW(local_train_round(s, 1), ProtocolError);
}

TEST(LocalTrainRound, DivergenceCarriesContext) {
  TrainingConfig tc;
  tc.lr = 1e308;
  const auto s = client_for(5, 0, tc);
  try {
    local_train_round(s, 2);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.round(), 0u);
    EXPECT_NE(std::string(e.what()).find("round 0"), std::string::npos);
  }
}

TEST(AsyncTrainStep, FederatedPartsFrozen) {
  auto s = local_train_round(client_for(6), 1).state;
  const auto fed = s.fed_channel.params().checksum();
  const auto fusion = s.fusion.params().checksum();
  const auto clf2 = s.fused_classifier.params().checksum();
  const auto local = s.local_channel.params().checksum();
  for (int i = 0; i < 25; ++i) s = async_train_step(std::move(s));
  EXPECT_EQ(s.fed_channel.params().checksum(), fed);
  EXPECT_EQ(s.fusion.params().checksum(), fusion);
  EXPECT_EQ(s.fused_classifier.params().checksum(), clf2);
  EXPECT_NE(s.local_channel.params().checksum(), local);
  EXPECT_EQ(s.async_steps_taken, 25u);
}

TEST(AsyncTrainStep, ZeroLearningRateKeepsState) {
  TrainingConfig tc;
  tc.lr = 0.0;
  const auto s = local_train_round(client_for(7, 0, tc), 1).state;
  auto t = s;
  for (int i = 0; i < 5; ++i) t = async_train_step(std::move(t));
  expect_same_params(s, t);
  EXPECT_EQ(s.centers, t.centers);
  EXPECT_EQ(t.phase, ClientPhase::Waiting);
}

TEST(AsyncTrainStep, FiftyStepsDecreaseLocalCrossEntropy) {
  int decreased = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    auto s = local_train_round(client_for(seed), 1).state;
    const double before = dataset_local_cross_entropy(s);
    for (int i = 0; i < 50; ++i) s = async_train_step(std::move(s));
    decreased += dataset_local_cross_entropy(s) < before;
  }
  EXPECT_GE(decreased, 18);
}

TEST(AsyncTrainStep, WrongPhase) { EXPECT_THROW(async_train_step(client_for(8)), ProtocolError); }

TEST(AdoptGlobal, OwnUploadRoundTrip) {
  const auto r = local_train_round(client_for(9), 1);
  const auto pre = r.state.fed_channel.params();
  auto s = r.state;
  for (int i = 0; i < 3; ++i) s = async_train_step(std::move(s));
  const auto local_after_async = s.local_channel.params();
  const auto adopted = adopt_global(s, r.upload.params);
  EXPECT_EQ(adopted.fed_channel.params(), pre);
  EXPECT_EQ(adopted.fed_round, r.state.fed_round + 1);
  EXPECT_EQ(adopted.phase, ClientPhase::LocalTraining);
  EXPECT_EQ(adopted.local_channel.params(), local_after_async);  // not rolled back
}

TEST(AdoptGlobal, ShapeAndPhaseErrors) {
  auto s = local_train_round(client_for(10), 0).state;
  EXPECT_THROW(adopt_global(s, ParamVector({1.0, 2.0})), ShapeError);
  s.phase = ClientPhase::LocalTraining;
  EXPECT_THROW(adopt_global(s, s.fed_channel.params()), ProtocolError);
}

TEST(AdoptGlobal, NextRoundReducesChannelMisalignment) {
  // Client 0 adopts a 50/50 mix with client 1's federated channel, which
  // misaligns its channels; the next local round should pull them back.
  int decreased = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto data = generate(small_spec(seed));
    auto a = make_client(0, {}, {}, data.clients[0].train, mix_seed(seed, 200));
    auto b = make_client(1, {}, {}, data.clients[1].train, mix_seed(seed, 201));
    auto ra = local_train_round(a, 3);
    auto rb = local_train_round(b, 3);
    const std::vector<ParamVector> ups{ra.upload.params, rb.upload.params};
    const auto mixed = personalized_aggregate(ups, CorrelationMatrix::uniform(2, 1.0), {0.5, 1e-6}, 0);
    auto s = adopt_global(ra.state, mixed);
    const double before = dataset_mean_fv_cos(s);
    const auto next = local_train_round(s, 3);
    decreased += dataset_mean_fv_cos(next.state) < before;
  }
  EXPECT_GE(decreased, 16);
}

TEST(ExtractEmbedding, Deterministic) {
  const auto s = client_for(11);
  const auto& x = s.dataset.inputs.front();
  EXPECT_EQ(extract_embedding(s, x), extract_embedding(s, x));
  EXPECT_EQ(extract_embedding(s, x).size(), ClientModelConfig{}.embedding_dim);
}

TEST(ExtractEmbedding, ZeroParametersGiveZero) {
  auto s = client_for(12);
  s.local_channel.set_params(ParamVector::zeros(s.local_channel.params().size()));
  s.fed_channel.set_params(ParamVector::zeros(s.fed_channel.params().size()));
  s.fusion.set_params(ParamVector::zeros(s.fusion.params().size()));
  EXPECT_EQ(extract_embedding(s, s.dataset.inputs.front()), std::vector<double>(16, 0.0));
}

TEST(ExtractEmbedding, SeededGolden) {
  // Pinned from a one-off numpy evaluation of the client's parameters.
  LabeledDataset ds;
  ds.inputs = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  ds.labels = {0, 1, 0};
  ds.num_classes = 2;
  const auto s = make_client(0, ClientModelConfig{3, 5, 4, 2}, TrainingConfig{}, ds, 77);
  const auto e = extract_embedding(s, std::vector<double>{0.5, -0.25, 2.0});
  ASSERT_EQ(e.size(), 2u);
  EXPECT_NEAR(e[0], 0.03194009338571015, 1e-14);
  EXPECT_NEAR(e[1], -0.16655306739481274, 1e-14);
}

TEST(MakeClient, Validation) {
  LabeledDataset one_class;
  one_class.inputs = {{1, 2}};
  one_class.labels = {0};
  one_class.num_classes = 1;
  EXPECT_THROW(make_client(0, ClientModelConfig{2, 3, 3, 2}, {}, one_class, 1), ConfigError);
  EXPECT_THROW(make_client(0, {}, {}, LabeledDataset{}, 1), ConfigError);
}

TEST(ClientDeterminism, SameSeedSameTrajectory) {
  auto a = client_for(13), b = client_for(13);
  for (int round = 0; round < 2; ++round) {
    auto ra = local_train_round(std::move(a), 2);
    auto rb = local_train_round(std::move(b), 2);
    a = ra.state;
    b = rb.state;
    for (int i = 0; i < 7; ++i) {
      a = async_train_step(std::move(a));
      b = async_train_step(std::move(b));
    }
    a = adopt_global(std::move(a), ra.upload.params);
    b = adopt_global(std::move(b), rb.upload.params);
  }
  expect_same_params(a, b);
  EXPECT_EQ(a.centers, b.centers);
}
