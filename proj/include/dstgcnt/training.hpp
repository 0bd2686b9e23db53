#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <json.hpp>

#include "data.hpp"
#include "gradcheck.hpp"
#include "model.hpp"
#include "tensor.hpp"

namespace dstgcnt {

// ---------------------------------------------------------------------------
// Losses

enum class LossKind { mse, huber, logcosh };
enum class HuberForm {
  standard,      ///< delta * (|e| - delta / 2) outside the quadratic zone
  paper_literal  ///< delta * |e| - delta / 2; continuous only when delta == 1
};

inline LossKind parse_loss_kind(const std::string& s) {
  if (s == "mse") return LossKind::mse;
  if (s == "huber") return LossKind::huber;
  if (s == "logcosh") return LossKind::logcosh;
  fail(ErrorKind::config, "unknown loss '" + s + "' (expected mse, huber or logcosh)");
}

inline const char* to_string(LossKind k) {
  switch (k) {
    case LossKind::mse: return "mse";
    case LossKind::huber: return "huber";
    case LossKind::logcosh: return "logcosh";
  }
  return "?";
}

inline HuberForm parse_huber_form(const std::string& s) {
  if (s == "standard") return HuberForm::standard;
  if (s == "paper_literal") return HuberForm::paper_literal;
  fail(ErrorKind::config, "unknown huber_form '" + s + "'");
}

inline const char* to_string(HuberForm f) { return f == HuberForm::standard ? "standard" : "paper_literal"; }

struct LossConfig {
  LossKind kind = LossKind::huber;
  double delta = 0.1;
  HuberForm huber_form = HuberForm::standard;
};

inline double huber_value(double e, double delta, HuberForm form = HuberForm::standard) {
  const double a = std::abs(e);
  if (a <= delta) return 0.5 * e * e;
  return form == HuberForm::standard ? delta * (a - 0.5 * delta) : delta * a - 0.5 * delta;
}

/// d huber / d e
inline double huber_slope(double e, double delta) {
  return std::abs(e) <= delta ? e : (e > 0 ? delta : -delta);
}

/// log(cosh(e)) = |e| + log(1 + exp(-2|e|)) - log 2, finite for any finite e.
inline double logcosh_value(double e) {
  const double a = std::abs(e);
  return a + std::log1p(std::exp(-2.0 * a)) - std::log(2.0);
}

namespace detail {
/// Builds a scalar loss from per-sample terms of e = y - y_hat. `slope` is d term / d e.
template <class T, class Term, class Slope>
Var<T> pointwise_loss(const Var<T>& pred, const std::vector<double>& target, double scale_factor, Term term, Slope slope) {
  if (pred.numel() != target.size()) {
    fail(ErrorKind::shape, "loss: " + std::to_string(pred.numel()) + " predictions for " + std::to_string(target.size()) + " targets");
  }
  if (target.empty()) fail(ErrorKind::contract, "loss over zero samples");
  double total = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) total += term(target[i] - static_cast<double>(pred.value()[i]));
  return make_op<T>({}, {static_cast<T>(total * scale_factor)}, {pred}, [pred, target, scale_factor, slope](const std::vector<T>& g) {
    if (T* gp = grad_of(pred)) {
      for (std::size_t i = 0; i < target.size(); ++i) {
        const double e = target[i] - static_cast<double>(pred.value()[i]);
        gp[i] += static_cast<T>(-static_cast<double>(g[0]) * scale_factor * slope(e));
      }
    }
  });
}
}  // namespace detail

/// (1/n) sum (y - y_hat)^2
template <class T>
Var<T> mse_loss(const Var<T>& pred, const std::vector<double>& target) {
  return detail::pointwise_loss(pred, target, 1.0 / static_cast<double>(std::max<std::size_t>(target.size(), 1)),
                                [](double e) { return e * e; }, [](double e) { return 2.0 * e; });
}

/// Mean Huber penalty.
template <class T>
Var<T> huber_loss(const Var<T>& pred, const std::vector<double>& target, double delta,
                  HuberForm form = HuberForm::standard) {
  if (!(delta > 0.0)) fail(ErrorKind::config, "huber delta must be positive");
  return detail::pointwise_loss(pred, target, 1.0 / static_cast<double>(std::max<std::size_t>(target.size(), 1)),
                                [delta, form](double e) { return huber_value(e, delta, form); },
                                [delta](double e) { return huber_slope(e, delta); });
}

/// Summed log-cosh penalty.
template <class T>
Var<T> logcosh_loss(const Var<T>& pred, const std::vector<double>& target) {
  return detail::pointwise_loss(pred, target, 1.0, [](double e) { return logcosh_value(e); },
                                [](double e) { return std::tanh(e); });
}

template <class T>
Var<T> compute_loss(const Var<T>& pred, const std::vector<double>& target, const LossConfig& cfg) {
  switch (cfg.kind) {
    case LossKind::mse: return mse_loss(pred, target);
    case LossKind::huber: return huber_loss(pred, target, cfg.delta, cfg.huber_form);
    case LossKind::logcosh: return logcosh_loss(pred, target);
  }
  fail(ErrorKind::config, "unknown loss");
}

// ---------------------------------------------------------------------------
// Metrics

enum class MadKind {
  mean,   ///< (1/n) sum |e|
  median  ///< median(|e - median(e)|)
};

struct Metrics {
  double mad = 0.0;
  double mse = 0.0;
  double rmse = 0.0;
  std::optional<double> mape;
};

struct MetricOptions {
  bool mape = true;
  MadKind mad = MadKind::mean;
};

inline double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline Metrics compute_metrics(const std::vector<double>& y, const std::vector<double>& y_hat, const MetricOptions& opt = {}) {
  if (y.size() != y_hat.size() || y.empty()) fail(ErrorKind::contract, "metrics need equal, non-empty vectors");
  const double n = static_cast<double>(y.size());
  Metrics m;
  std::vector<double> e(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) e[i] = y[i] - y_hat[i];
  if (opt.mad == MadKind::mean) {
    for (double v : e) m.mad += std::abs(v);
    m.mad /= n;
  } else {
    const double med = median_of(e);
    std::vector<double> dev(e.size());
    for (std::size_t i = 0; i < e.size(); ++i) dev[i] = std::abs(e[i] - med);
    m.mad = median_of(dev);
  }
  for (double v : e) m.mse += v * v;
  m.mse /= n;
  m.rmse = std::sqrt(m.mse);
  if (opt.mape) {
    std::string bad;
    double total = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (y[i] == 0.0) {
        bad += (bad.empty() ? "" : ",") + std::to_string(i);
        continue;
      }
      total += std::abs(e[i] / y[i]);
    }
    if (!bad.empty()) fail(ErrorKind::metric, "MAPE undefined for zero targets at indices " + bad);
    m.mape = 100.0 * total / n;
  }
  return m;
}

inline nlohmann::json to_json(const Metrics& m) {
  nlohmann::json j{{"MAD", m.mad}, {"MSE", m.mse}, {"RMSE", m.rmse}};
  j["MAPE"] = m.mape ? nlohmann::json(*m.mape) : nlohmann::json(nullptr);
  return j;
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adaptive moment estimation with bias correction.
template <class T>
class Adam {
 public:
  Adam(std::vector<std::pair<std::string, Var<T>>> params, AdamOptions opt) : params_(std::move(params)), opt_(opt) {
    for (const auto& [name, v] : params_) {
      m_.emplace_back(v.numel(), 0.0);
      v_.emplace_back(v.numel(), 0.0);
    }
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t p = 0; p < params_.size(); ++p) {
      Var<T>& var = params_[p].second;
      if (!var.has_grad()) continue;
      auto& value = var.mutable_value();
      const auto& g = var.grad();
      for (std::size_t i = 0; i < value.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        m_[p][i] = opt_.beta1 * m_[p][i] + (1.0 - opt_.beta1) * gi;
        v_[p][i] = opt_.beta2 * v_[p][i] + (1.0 - opt_.beta2) * gi * gi;
        const double update = opt_.lr * (m_[p][i] / c1) / (std::sqrt(v_[p][i] / c2) + opt_.eps);
        value[i] = static_cast<T>(static_cast<double>(value[i]) - update);
      }
    }
  }

  void zero_grad() {
    for (auto& [name, v] : params_) v.zero_grad();
  }

  std::size_t steps() const { return t_; }

 private:
  std::vector<std::pair<std::string, Var<T>>> params_;
  AdamOptions opt_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
  LossConfig loss;
  AdamOptions adam;
  std::size_t epochs = 500;
  std::size_t batch_size = 10;
  std::size_t runs = 10;
  double test_fraction = 0.2;
  /// Fraction of each run's training split held out for checkpoint selection.
  double val_fraction = 0.2;
  /// Start the readout bias at the mean training score.
  bool init_readout_bias = true;
  /// Root-centre and torso-scale every sequence before training/inference.
  bool normalize = true;

  void validate() const {
    if (!(loss.delta > 0.0)) fail(ErrorKind::config, "delta must be positive");
    if (!(adam.lr >= 0.0)) fail(ErrorKind::config, "lr must be non-negative");
    if (batch_size == 0) fail(ErrorKind::config, "batch must be at least 1");
    if (runs == 0) fail(ErrorKind::config, "runs must be at least 1");
    // 0 means no held-out split: metrics are then computed on the training data.
    if (!(test_fraction >= 0.0 && test_fraction < 1.0)) fail(ErrorKind::config, "test_fraction must lie in [0, 1)");
    if (!(val_fraction >= 0.0 && val_fraction < 1.0)) fail(ErrorKind::config, "val_fraction must lie in [0, 1)");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"loss", to_string(c.loss.kind)},
          {"delta", c.loss.delta},
          {"huber_form", to_string(c.loss.huber_form)},
          {"lr", c.adam.lr},
          {"beta1", c.adam.beta1},
          {"beta2", c.adam.beta2},
          {"adam_eps", c.adam.eps},
          {"epochs", c.epochs},
          {"batch", c.batch_size},
          {"runs", c.runs},
          {"test_fraction", c.test_fraction},
          {"val_fraction", c.val_fraction},
          {"init_readout_bias", c.init_readout_bias},
          {"normalize", c.normalize}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  try {
    if (j.contains("loss")) c.loss.kind = parse_loss_kind(j.at("loss").get<std::string>());
    if (j.contains("delta")) c.loss.delta = j.at("delta").get<double>();
    if (j.contains("huber_form")) c.loss.huber_form = parse_huber_form(j.at("huber_form").get<std::string>());
    if (j.contains("lr")) c.adam.lr = j.at("lr").get<double>();
    if (j.contains("beta1")) c.adam.beta1 = j.at("beta1").get<double>();
    if (j.contains("beta2")) c.adam.beta2 = j.at("beta2").get<double>();
    if (j.contains("adam_eps")) c.adam.eps = j.at("adam_eps").get<double>();
    if (j.contains("epochs")) c.epochs = j.at("epochs").get<std::size_t>();
    if (j.contains("batch")) c.batch_size = j.at("batch").get<std::size_t>();
    if (j.contains("runs")) c.runs = j.at("runs").get<std::size_t>();
    if (j.contains("test_fraction")) c.test_fraction = j.at("test_fraction").get<double>();
    if (j.contains("val_fraction")) c.val_fraction = j.at("val_fraction").get<double>();
    if (j.contains("init_readout_bias")) c.init_readout_bias = j.at("init_readout_bias").get<bool>();
    if (j.contains("normalize")) c.normalize = j.at("normalize").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config, std::string("training config: ") + e.what());
  }
  c.validate();
  return c;
}

inline std::vector<LabeledSample> preprocess(const std::vector<LabeledSample>& samples, bool normalize) {
  if (!normalize) return samples;
  std::vector<LabeledSample> out = samples;
  for (auto& s : out) s.sequence = normalize_sequence(s.sequence);
  return out;
}

inline std::vector<double> scores_of(const std::vector<LabeledSample>& samples) {
  std::vector<double> y;
  for (const auto& s : samples) y.push_back(s.score);
  return y;
}

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  std::optional<double> val_loss;
};

template <class T>
struct TrainResult {
  Model<T> model;
  std::vector<EpochStats> history;
  std::size_t best_epoch = 0;
  double seconds = 0.0;
};

template <class T>
double evaluate_loss(const Model<T>& model, const std::vector<LabeledSample>& samples, const LossConfig& loss) {
  NoGradGuard no_grad;
  const std::vector<double> pred = model.predict(samples);
  Var<T> p = constant<T>({pred.size()}, std::vector<T>(pred.begin(), pred.end()));
  return static_cast<double>(compute_loss(p, scores_of(samples), loss).item());
}

/// Trains a freshly initialized model. Samples must already be preprocessed.
/// With a validation set the returned model holds the parameters of the epoch
/// with the lowest validation loss; without one, the final parameters. `stop`, if set, is
/// asked after every epoch and ends training early by returning true.
template <class T>
TrainResult<T> train_run(const ModelConfig& model_config, const TrainConfig& cfg, const std::vector<LabeledSample>& train,
                         const std::vector<LabeledSample>& val, std::uint64_t seed,
                         const std::function<bool(const Model<T>&, const EpochStats&)>& stop = {}) {
  if (train.empty()) fail(ErrorKind::data, "train_run needs at least one training sample");
  const auto start = std::chrono::steady_clock::now();
  Model<T> model = Model<T>::create(model_config, seed);
  if (cfg.init_readout_bias) {
    const auto y = scores_of(train);
    model.params().readout_b.mutable_value()[0] = static_cast<T>(std::accumulate(y.begin(), y.end(), 0.0) / y.size());
  }
  auto named = model.params().named();
  Adam<T> adam(named, cfg.adam);

  TrainResult<T> result{model, {}, 0, 0.0};
  std::vector<std::vector<T>> best;
  double best_loss = std::numeric_limits<double>::infinity();
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double total = 0.0;
    for (const Batch& batch : make_batches(train, cfg.batch_size, substream_seed(seed, "shuffle", epoch))) {
      adam.zero_grad();
      const auto out = model.forward(batch, {true, substream_seed(seed, "dropout", step++)});
      const Var<T> loss = compute_loss(out.scores, scores_of(batch.samples), cfg.loss);
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value)) {
        fail(ErrorKind::numeric, "loss diverged at epoch " + std::to_string(epoch) + " (value " + std::to_string(value) + ")");
      }
      backward(loss);
      adam.step();
      total += value * static_cast<double>(batch.size());
    }
    EpochStats stats{epoch, total / static_cast<double>(train.size()), std::nullopt};
    if (!val.empty()) stats.val_loss = evaluate_loss(model, val, cfg.loss);
    result.history.push_back(stats);
    if (val.empty()) result.best_epoch = epoch;
    if (stats.val_loss && *stats.val_loss < best_loss) {
      best_loss = *stats.val_loss;
      result.best_epoch = epoch;
      best.clear();
      for (const auto& [name, v] : named) best.push_back(v.value());
    }
    if (stop && stop(model, stats)) break;
  }
  adam.zero_grad();
  for (std::size_t i = 0; i < best.size(); ++i) named[i].second.mutable_value() = best[i];
  result.model = model;
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

struct RunRecord {
  std::uint64_t seed = 0;
  Metrics metrics;
  std::vector<EpochStats> history;
  std::size_t best_epoch = 0;
  std::size_t train_size = 0;
  std::size_t test_size = 0;
  double train_seconds = 0.0;
  double test_seconds = 0.0;
};

struct RunResult {
  std::vector<RunRecord> runs;
  Metrics average;
};

inline Metrics average_metrics(const std::vector<RunRecord>& runs) {
  Metrics avg;
  bool all_mape = !runs.empty();
  for (const auto& r : runs) {
    avg.mad += r.metrics.mad;
    avg.mse += r.metrics.mse;
    avg.rmse += r.metrics.rmse;
    all_mape = all_mape && r.metrics.mape.has_value();
  }
  const double n = static_cast<double>(runs.size());
  avg.mad /= n;
  avg.mse /= n;
  avg.rmse /= n;
  if (all_mape) {
    double m = 0.0;
    for (const auto& r : runs) m += *r.metrics.mape;
    avg.mape = m / n;
  }
  return avg;
}

/// MAPE is requested only when no target is zero.
inline MetricOptions metric_options_for(const std::vector<double>& y) {
  MetricOptions o;
  o.mape = std::none_of(y.begin(), y.end(), [](double v) { return v == 0.0; });
  return o;
}

/// k independently seeded train/test runs; metrics on each run's test split,
/// then averaged. `on_model` (optional) sees each trained model.
template <class T, class OnModel = std::nullptr_t>
RunResult multi_run(const ModelConfig& model_config, const TrainConfig& cfg, const std::vector<LabeledSample>& raw,
                    std::uint64_t root_seed, OnModel on_model = nullptr) {
  if (cfg.runs == 0) fail(ErrorKind::config, "runs must be at least 1");
  const std::vector<LabeledSample> samples = preprocess(raw, cfg.normalize);
  RunResult result;
  for (std::size_t r = 0; r < cfg.runs; ++r) {
    const std::uint64_t seed = substream_seed(root_seed, "run", r);
    std::vector<LabeledSample> train = samples, test = samples;
    if (cfg.test_fraction > 0.0) std::tie(train, test) = train_test_split(samples, cfg.test_fraction, substream_seed(seed, "split"));
    std::vector<LabeledSample> val;
    if (cfg.val_fraction > 0.0 && train.size() >= 4) {
      auto [fit, held] = train_test_split(train, cfg.val_fraction, substream_seed(seed, "validation"));
      train = std::move(fit);
      val = std::move(held);
    }
    TrainResult<T> trained = train_run<T>(model_config, cfg, train, val, seed);
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<double> pred = trained.model.predict(test);
    const double test_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const std::vector<double> y = scores_of(test);
    RunRecord rec;
    rec.seed = seed;
    rec.metrics = compute_metrics(y, pred, metric_options_for(y));
    rec.history = std::move(trained.history);
    rec.best_epoch = trained.best_epoch;
    rec.train_size = train.size();
    rec.test_size = test.size();
    rec.train_seconds = trained.seconds;
    rec.test_seconds = test_seconds;
    if constexpr (!std::is_same_v<OnModel, std::nullptr_t>) on_model(r, trained.model);
    result.runs.push_back(std::move(rec));
  }
  result.average = average_metrics(result.runs);
  return result;
}

/// Deterministic part of the training report. Wall-clock times are kept
/// separately (timing_json) so that reports from identical seeds compare equal.
inline nlohmann::json report_json(const ModelConfig& mc, const TrainConfig& tc, std::uint64_t seed, const RunResult& r) {
  nlohmann::json j;
  j["config"] = {{"model", to_json(mc)}, {"training", to_json(tc)}, {"seed", seed}};
  j["runs"] = nlohmann::json::array();
  for (const auto& run : r.runs) {
    nlohmann::json h = nlohmann::json::array();
    for (const auto& e : run.history) {
      h.push_back({{"epoch", e.epoch},
                   {"train_loss", e.train_loss},
                   {"val_loss", e.val_loss ? nlohmann::json(*e.val_loss) : nlohmann::json(nullptr)}});
    }
    j["runs"].push_back({{"seed", run.seed},
                         {"train_size", run.train_size},
                         {"test_size", run.test_size},
                         {"best_epoch", run.best_epoch},
                         {"metrics", to_json(run.metrics)},
                         {"history", std::move(h)}});
  }
  j["average"] = to_json(r.average);
  return j;
}

inline nlohmann::json timing_json(const RunResult& r) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& run : r.runs) j.push_back({{"train_seconds", run.train_seconds}, {"test_seconds", run.test_seconds}});
  return {{"runs", j}};
}

/// Gradient check of a whole model in 64-bit: a batch of `batch` synthetic
/// sequences (the second one shorter, so masking is exercised), MSE against
/// fixed targets, dropout active with a fixed seed.
inline GradcheckReport check_model_gradients(const ModelConfig& config, std::uint64_t seed, std::size_t frames = 12,
                                             std::size_t batch = 2, const GradcheckOptions& options = {}) {
  Model<double> model = Model<double>::create(config, seed);
  // Biases start at 0 and gains at 1; a relu fed only by a zero bias (the root
  // joint after centring) would sit exactly on its kink.
  Rng jitter(substream_seed(seed, "gradcheck_jitter"));
  for (auto& [name, p] : model.params().named()) {
    if (p.rank() != 1) continue;
    for (double& v : p.mutable_value()) v += jitter.uniform(-0.1, 0.1);
  }
  std::vector<LabeledSample> samples;
  for (std::size_t i = 0; i < batch; ++i) {
    const std::size_t len = std::max<std::size_t>(8, frames - (i % 2) * (frames / 4));
    samples.push_back(synthesize_exercise(i % 2 ? ExerciseKind::squat : ExerciseKind::arm_lift, 0.3 + 0.5 * i / batch, len,
                                          substream_seed(seed, "gradcheck_data", i), {uiprmd_range, 0.002}));
  }
  const Batch b = make_batch(preprocess(samples, true));
  const Var<double> input = Model<double>::batch_input<double>(b);
  const std::vector<double> mask = Model<double>::batch_mask<double>(b);
  const std::vector<double> y = scores_of(b.samples);
  const std::uint64_t dropout_seed = substream_seed(seed, "dropout");
  auto loss = [&]() { return mse_loss(model.forward(input, mask, {true, dropout_seed}).scores, y); };
  return gradcheck(loss, model.params().named(), options);
}

}  // namespace dstgcnt
