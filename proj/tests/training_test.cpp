#include <gtest/gtest.h>

#include <numeric>

#include "support/oracles.hpp"

using namespace dstgcnt;

namespace {

double loss_of(LossKind kind, double e, double delta = 0.1) {
  const auto pred = constant<double>({1}, {0.0});
  return compute_loss(pred, {e}, {kind, delta, HuberForm::standard}).item();
}

std::vector<LabeledSample> arm_lifts(std::size_t count, std::uint64_t seed) {
  std::vector<LabeledSample> s;
  Rng q(substream_seed(seed, "quality"));
  for (std::size_t i = 0; i < count; ++i)
    s.push_back(synthesize_exercise(ExerciseKind::arm_lift, q.uniform(0.5, 1.0), 20 + i % 10, substream_seed(seed, "sample", i),
                                    {uiprmd_range, 0.002}));
  return s;
}

TrainConfig tiny_training(std::size_t epochs) {
  TrainConfig tc;
  tc.epochs = epochs;
  tc.batch_size = 4;
  tc.runs = 1;
  tc.test_fraction = 0.0;
  tc.val_fraction = 0.0;
  return tc;
}

}  // namespace

TEST(Loss, HuberIsContinuousAndSmoothAtDelta) {
  for (double delta : {0.1, 1.0, 3.0}) {
    const double below = huber_value(delta * (1 - 1e-12), delta), above = huber_value(delta * (1 + 1e-12), delta);
    EXPECT_NEAR(below, above, 1e-9);
    EXPECT_NEAR(0.5 * delta * delta, delta * (delta - 0.5 * delta), 1e-15);
    EXPECT_NEAR(huber_slope(delta * (1 - 1e-12), delta), huber_slope(delta * (1 + 1e-12), delta), 1e-9);
    EXPECT_NEAR(huber_slope(-delta * (1 + 1e-12), delta), -delta, 0.0);
  }
}

TEST(Loss, PaperLiteralHuberJumpsUnlessDeltaIsOne) {
  EXPECT_GT(std::abs(huber_value(0.1 + 1e-12, 0.1, HuberForm::paper_literal) - huber_value(0.1, 0.1, HuberForm::paper_literal)), 1e-3);
  EXPECT_NEAR(huber_value(1.0 + 1e-12, 1.0, HuberForm::paper_literal), huber_value(1.0, 1.0, HuberForm::paper_literal), 1e-9);
}

TEST(Loss, LogCoshStaysFiniteForHugeErrors) {
  for (double e : {1000.0, -1000.0, 1e300}) {
    const double v = logcosh_value(e);
    EXPECT_TRUE(std::isfinite(v));
    if (std::abs(e) == 1000.0) EXPECT_NEAR(v, 1000.0 - std::log(2.0), 1e-9);
  }
  EXPECT_NEAR(logcosh_value(0.3), std::log(std::cosh(0.3)), 1e-15);
}

TEST(Loss, ZeroExactlyWhenPredictionIsExact) {
  for (auto kind : {LossKind::mse, LossKind::huber, LossKind::logcosh}) {
    EXPECT_EQ(loss_of(kind, 0.0), 0.0) << to_string(kind);
    for (double e : {1e-6, -1e-3, 0.5, -40.0}) EXPECT_GT(loss_of(kind, e), 0.0) << to_string(kind) << " " << e;
  }
}

TEST(Loss, HuberApproachesHalfMseForLargeDelta) {
  Rng rng(3);
  std::vector<double> y(20);
  for (auto& v : y) v = rng.uniform(-1, 1);
  const auto pred = constant<double>({20}, std::vector<double>(20, 0.0));
  EXPECT_NEAR(huber_loss(pred, y, 10.0).item(), 0.5 * mse_loss(pred, y).item(), 1e-15);
}

TEST(Loss, SmallDeltaRanksLikeAbsoluteError) {
  const double delta = 1e-4;
  double previous = 0.0;
  for (double e : {0.01, 0.02, 0.5, 1.5}) {
    const double v = huber_value(e, delta) / delta;
    EXPECT_GT(v, previous);
    EXPECT_NEAR(v, e, delta);
    previous = v;
  }
}

TEST(Loss, GradientsMatchFiniteDifferences) {
  Rng rng(4);
  std::vector<double> y(6), p(6);
  for (auto& v : y) v = rng.uniform(-1, 1);
  for (auto& v : p) v = rng.uniform(-1, 1);
  for (auto kind : {LossKind::mse, LossKind::huber, LossKind::logcosh}) {
    auto pred = parameter<double>({6}, p);
    const auto r = gradcheck([&] { return compute_loss(pred, y, {kind, 0.3, HuberForm::standard}); }, {{"pred", pred}},
                             {1e-6, 1e-6, 1e-8});
    EXPECT_TRUE(r.passed) << to_string(kind) << " " << r.max_rel_error;
  }
}

TEST(Metrics, MatchScalarOracles) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng.index(30);
    std::vector<double> y(n), yh(n);
    for (auto& v : y) v = rng.uniform(0.5, 50.0);
    for (auto& v : yh) v = rng.uniform(0.0, 50.0);
    double mad = 0, mse = 0, mape = 0;
    for (std::size_t i = 0; i < n; ++i) {
      mad += std::abs(y[i] - yh[i]);
      mse += (y[i] - yh[i]) * (y[i] - yh[i]);
      mape += std::abs((y[i] - yh[i]) / y[i]);
    }
    const auto m = compute_metrics(y, yh);
    EXPECT_NEAR(m.mad, mad / n, 1e-12);
    EXPECT_NEAR(m.mse, mse / n, 1e-12);
    EXPECT_NEAR(m.rmse, std::sqrt(mse / n), 1e-12);
    EXPECT_NEAR(*m.mape, 100.0 * mape / n, 1e-12);
  }
}

TEST(Metrics, ClosedFormExample) {
  const auto m = compute_metrics({2.0}, {1.0});
  EXPECT_EQ(m.mad, 1.0);
  EXPECT_EQ(m.mse, 1.0);
  EXPECT_EQ(m.rmse, 1.0);
  EXPECT_EQ(*m.mape, 50.0);
  const auto z = compute_metrics({1.0, 2.0}, {1.0, 2.0});
  EXPECT_EQ(z.mad + z.mse + z.rmse + *z.mape, 0.0);
}

TEST(Metrics, MedianAbsoluteDeviationOption) {
  const auto m = compute_metrics({0, 0, 0, 0, 0}, {1, 2, 3, 4, 100}, {false, MadKind::median});
  EXPECT_EQ(m.mad, 1.0);  // errors -1..-4,-100: median -3, deviations 2,1,0,1,97
  EXPECT_FALSE(m.mape.has_value());
}

TEST(Metrics, MapeOnZeroTargetIsAnError) {
  try {
    compute_metrics({1.0, 0.0}, {1.0, 1.0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::metric);
  }
  EXPECT_FALSE(metric_options_for({1.0, 0.0}).mape);
}

TEST(Adam, FirstStepMovesEachWeightByLearningRate) {
  auto w = parameter<double>({3}, {1.0, -2.0, 0.5});
  Adam<double> adam({{"w", w}}, {0.01, 0.9, 0.999, 1e-8});
  backward(sum(mul(w, constant<double>({3}, {3.0, -0.5, 0.0}))));
  adam.step();
  // Bias-corrected first step is lr * g / (|g| + eps).
  EXPECT_NEAR(w.value()[0], 1.0 - 0.01, 1e-9);
  EXPECT_NEAR(w.value()[1], -2.0 + 0.01, 1e-9);
  EXPECT_EQ(w.value()[2], 0.5);
}

TEST(TrainConfig, Validation) {
  EXPECT_THROW(train_config_from_json({{"delta", 0.0}}), Error);
  EXPECT_THROW(train_config_from_json({{"batch", 0}}), Error);
  EXPECT_THROW(train_config_from_json({{"test_fraction", 1.0}}), Error);
  EXPECT_THROW(train_config_from_json({{"loss", "l1"}}), Error);
  const auto tc = train_config_from_json({{"loss", "logcosh"}, {"epochs", 7}});
  EXPECT_EQ(tc.loss.kind, LossKind::logcosh);
  EXPECT_EQ(train_config_from_json(to_json(tc)).epochs, 7u);
}

TEST(Training, ZeroLearningRateLeavesParametersUnchanged) {
  auto tc = tiny_training(3);
  tc.adam.lr = 0.0;
  tc.init_readout_bias = false;
  const auto data = preprocess(arm_lifts(4, 1), true);
  const auto trained = train_run<float>(ModelConfig::tiny(), tc, data, {}, 7);
  EXPECT_EQ(checkpoint_json(trained.model), checkpoint_json(Model<float>::create(ModelConfig::tiny(), 7)));
}

TEST(Training, LossDecreasesOverFirstTenEpochs) {
  // Full batch, small step, and the loss measured on the training set without dropout,
  // so the curve reflects the optimiser rather than sampling noise.
  std::size_t decreasing = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto data = preprocess(arm_lifts(16, 100 + seed), true);
    auto tc = tiny_training(10);
    tc.batch_size = 16;
    tc.adam.lr = 2e-5;
    tc.init_readout_bias = false;
    tc.loss = {LossKind::mse, 0.1, HuberForm::standard};
    std::vector<double> curve{evaluate_loss(Model<float>::create(ModelConfig::tiny(), seed), data, tc.loss)};
    train_run<float>(ModelConfig::tiny(), tc, data, {}, seed, [&](const Model<float>& m, const EpochStats&) {
      curve.push_back(evaluate_loss(m, data, tc.loss));
      return false;
    });
    ASSERT_EQ(curve.size(), 11u);
    bool ok = true;
    for (std::size_t e = 1; e < curve.size(); ++e) ok = ok && curve[e] < curve[e - 1];
    decreasing += ok;
  }
  EXPECT_GE(decreasing, 8u);
}

TEST(Training, StopCallbackEndsEarly) {
  const auto data = preprocess(arm_lifts(4, 2), true);
  const auto r = train_run<float>(ModelConfig::tiny(), tiny_training(50), data, {}, 1,
                                  [](const Model<float>&, const EpochStats& e) { return e.epoch == 2; });
  EXPECT_EQ(r.history.size(), 3u);
}

TEST(Training, ValidationSelectsBestEpoch) {
  const auto data = preprocess(arm_lifts(8, 3), true);
  const auto val = preprocess(arm_lifts(3, 4), true);
  auto tc = tiny_training(6);
  tc.adam.lr = 1e-3;
  const auto r = train_run<double>(ModelConfig::tiny(), tc, data, val, 2);
  std::size_t best = 0;
  for (std::size_t e = 0; e < r.history.size(); ++e)
    if (*r.history[e].val_loss < *r.history[best].val_loss) best = e;
  EXPECT_EQ(r.best_epoch, best);
  EXPECT_NEAR(evaluate_loss(r.model, val, tc.loss), *r.history[best].val_loss, 1e-12);
}

TEST(Training, DivergenceIsANumericError) {
  auto data = preprocess(arm_lifts(2, 5), true);
  data[0].score = std::numeric_limits<double>::infinity();
  try {
    train_run<float>(ModelConfig::tiny(), tiny_training(1), data, {}, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::numeric);
  }
}

TEST(MultiRun, AverageIsTheMeanOfStoredRunsAndRepeatable) {
  auto tc = tiny_training(2);
  tc.runs = 3;
  tc.test_fraction = 0.25;
  const auto data = arm_lifts(8, 6);
  const auto a = multi_run<float>(ModelConfig::tiny(), tc, data, 11);
  ASSERT_EQ(a.runs.size(), 3u);
  double rmse = 0.0;
  for (const auto& r : a.runs) {
    rmse += r.metrics.rmse;
    EXPECT_EQ(r.test_size, 2u);
  }
  EXPECT_NEAR(a.average.rmse, rmse / 3.0, 1e-12);
  const auto b = multi_run<float>(ModelConfig::tiny(), tc, data, 11);
  EXPECT_EQ(report_json(ModelConfig::tiny(), tc, 11, a), report_json(ModelConfig::tiny(), tc, 11, b));
  tc.runs = 1;
  const auto one = multi_run<float>(ModelConfig::tiny(), tc, data, 11);
  EXPECT_EQ(one.average.rmse, one.runs[0].metrics.rmse);
}

TEST(Gradcheck, TinyModelPassesAndCorruptionFails) {
  GradcheckOptions opt;
  opt.max_entries_per_param = 4;
  const auto ok = check_model_gradients(ModelConfig::tiny(), 3, 10, 2, opt);
  EXPECT_TRUE(ok.passed) << ok.max_rel_error;
  detail::corrupt_matmul_backward = true;
  const auto bad = check_model_gradients(ModelConfig::tiny(), 3, 10, 2, opt);
  detail::corrupt_matmul_backward = false;
  EXPECT_FALSE(bad.passed);
  const auto groups = group_report(ok);
  EXPECT_TRUE(std::any_of(groups.begin(), groups.end(), [](const auto& g) { return g.name == "block1.gru"; }));
}
