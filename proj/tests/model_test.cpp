#include <gtest/gtest.h>

#include <filesystem>

#include "support/oracles.hpp"

using namespace dstgcnt;

namespace {

std::vector<LabeledSample> corpus(std::size_t count, std::size_t t_lo, std::size_t t_span, std::uint64_t seed) {
  std::vector<LabeledSample> s;
  for (std::size_t i = 0; i < count; ++i)
    s.push_back(synthesize_exercise(i % 2 ? ExerciseKind::squat : ExerciseKind::arm_lift, 0.2 + 0.05 * i,
                                    t_lo + (i * 7) % (t_span + 1), substream_seed(seed, "m", i)));
  return preprocess(s, true);
}

}  // namespace

TEST(ModelConfig, JsonRoundTripAndValidation) {
  ModelConfig c = ModelConfig::tiny();
  c.hops = {1};
  c.gru_update = GruUpdate::standard;
  c.readout = ReadoutMode::last_token;
  c.positional_encoding = false;
  const ModelConfig back = model_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_THROW(model_config_from_json({{"blocs", 2}}), Error);
  EXPECT_THROW(model_config_from_json({{"augment_kernel", 4}}), Error);
  EXPECT_THROW(model_config_from_json({{"precision", 16}}), Error);
  EXPECT_THROW(model_config_from_json({{"preset", "tiny"}, {"feedback_block", 2}}), Error);
  EXPECT_EQ(model_config_from_json({{"preset", "tiny"}}).model_dim, 8u);
}

TEST(Model, ForwardShapes) {
  const auto model = Model<float>::create(ModelConfig::tiny(), 1);
  const Batch b = make_batch(corpus(3, 10, 5, 1));
  const auto out = model.forward(b);
  EXPECT_EQ(out.scores.shape(), (Shape{3}));
  ASSERT_EQ(out.attention_maps.size(), 2u);
  EXPECT_EQ(out.attention_maps[0].shape(), (Shape{3, b.max_frames, 25, 25}));
}

TEST(Model, WrongJointCountIsAConfigError) {
  const auto model = Model<double>::create(ModelConfig::tiny(), 1);
  try {
    model.forward(constant<double>({1, 4, 20, 3}, std::vector<double>(240, 0.0)), {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::config);
  }
}

TEST(Model, SameSeedSameParameters) {
  const auto a = Model<float>::create(ModelConfig::tiny(), 9), b = Model<float>::create(ModelConfig::tiny(), 9);
  const auto c = Model<float>::create(ModelConfig::tiny(), 10);
  EXPECT_EQ(checkpoint_json(a), checkpoint_json(b));
  EXPECT_NE(checkpoint_json(a), checkpoint_json(c));
}

TEST(Model, PaddedScoreEqualsAloneScore) {
  const auto model = Model<float>::create(ModelConfig::tiny(), 2);
  const auto samples = corpus(5, 12, 20, 2);
  const auto together = model.predict(samples, 5);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto alone = model.predict({samples[i]}, 1);
    EXPECT_NEAR(alone[0], together[i], 1e-6);
  }
}

TEST(Model, CheckpointRoundTripPreservesPredictions) {
  const auto model = Model<float>::create(ModelConfig::tiny(), 3);
  const auto path = std::filesystem::temp_directory_path() / "dstgcnt_model_test_ck.json";
  save_checkpoint(path, model);
  EXPECT_EQ(checkpoint_precision(path), 32);
  const auto back = load_checkpoint<float>(path);
  const auto s = corpus(3, 10, 6, 3);
  EXPECT_EQ(back.predict(s), model.predict(s));
  std::filesystem::remove(path);
}

TEST(Model, CheckpointMissingParameterIsAFormatError) {
  auto j = checkpoint_json(Model<float>::create(ModelConfig::tiny(), 3));
  j["params"].erase(j["params"].begin() + 3);
  try {
    model_from_checkpoint_json<float>(j);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::format);
  }
}

TEST(Model, PrecisionCastAgreesClosely) {
  const auto m64 = Model<double>::create(ModelConfig::tiny(), 4);
  const Model<float> m32(m64.config(), m64.graph(), m64.params().cast<float>(m64.config(), 25));
  const auto s = corpus(2, 15, 5, 4);
  const auto a = m64.predict(s), b = m32.predict(s);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-4);
}

TEST(Model, PositionalEncodingTogglesParameterFreeTerm) {
  ModelConfig c = ModelConfig::tiny();
  const auto with = Model<double>::create(c, 5);
  c.positional_encoding = false;
  const auto without = Model<double>::create(c, 5);
  EXPECT_EQ(with.params().count(), without.params().count());
  const auto s = corpus(1, 12, 0, 5);
  EXPECT_NE(with.predict(s)[0], without.predict(s)[0]);
}

TEST(Model, HopListSetsGraphOperatorCount) {
  ModelConfig c = ModelConfig::tiny();
  c.hops = {1};
  EXPECT_EQ(Model<float>::create(c, 0).params().blocks[0].graph_weights.size(), 2u);
  c.hops = {1, 2};
  EXPECT_EQ(Model<float>::create(c, 0).params().blocks[0].graph_weights.size(), 3u);
}
