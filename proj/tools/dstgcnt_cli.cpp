// dstgcnt: synth | train | evaluate | feedback | gradcheck

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include <dstgcnt/dstgcnt.hpp>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dstgcnt;

namespace {

constexpr int exit_ok = 0;
constexpr int exit_usage = 1;
constexpr int exit_data = 2;
constexpr int exit_numeric = 3;

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config:
      return exit_usage;  // bad flag values or config keys
    case ErrorKind::numeric:
    case ErrorKind::contract:
    case ErrorKind::metric:
      return exit_numeric;
    default:
      return exit_data;
  }
}

json read_json(const fs::path& path, ErrorKind kind) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail(kind, path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorKind::io, "cannot create " + dir.string() + ": " + ec.message());
}

std::string metrics_line(const Metrics& m) {
  std::ostringstream s;
  s << "MAD " << m.mad << "  MSE " << m.mse << "  RMSE " << m.rmse;
  if (m.mape) s << "  MAPE " << *m.mape << "%";
  return s.str();
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string kind = "arm_lift";
  std::size_t count = 16;
  std::vector<double> quality{0.0, 1.0};
  std::vector<std::size_t> frames{60, 100};
  std::string dataset = "kimore";
  double noise = 0.002;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_synth(const SynthArgs& a) {
  if (a.count == 0) fail(ErrorKind::config, "--count must be at least 1");
  const double q_lo = a.quality.at(0), q_hi = a.quality.at(1);
  if (!(0.0 <= q_lo && q_lo <= q_hi && q_hi <= 1.0)) fail(ErrorKind::config, "--quality must satisfy 0 <= lo <= hi <= 1");
  const std::size_t t_lo = a.frames.at(0), t_hi = a.frames.at(1);
  if (t_lo > t_hi) fail(ErrorKind::config, "--frames lo must not exceed hi");
  ScoreRange range = kimore_range;
  if (a.dataset == "uiprmd") {
    range = uiprmd_range;
  } else if (a.dataset != "kimore") {
    fail(ErrorKind::config, "--dataset must be kimore or uiprmd");
  }
  const ExerciseKind kind = parse_exercise_kind(a.kind);
  std::vector<LabeledSample> samples;
  for (std::size_t i = 0; i < a.count; ++i) {
    Rng pick(substream_seed(a.seed, "synth", i));
    const double quality = q_lo == q_hi ? q_lo : pick.uniform(q_lo, q_hi);
    const std::size_t frames = t_lo + pick.index(t_hi - t_lo + 1);
    LabeledSample s = synthesize_exercise(kind, quality, frames, substream_seed(a.seed, "sample", i), {range, a.noise});
    char id[64];
    std::snprintf(id, sizeof(id), "%s_%04zu", to_string(kind), i);
    s.sequence.id = id;
    samples.push_back(std::move(s));
  }
  write_dataset(a.out, a.dataset, range, samples);
  std::cout << "wrote " << samples.size() << " sequences to " << (fs::path(a.out) / "manifest.json").string() << '\n';
  return exit_ok;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string manifest;
  std::string out;
  std::uint64_t seed = 0;
  std::size_t runs = 0, epochs = 0, batch = 0;
  std::string loss;
  double delta = 0.0, lr = 0.0, test_fraction = -1.0;
  int precision = 0;
  bool quiet = false;
};

template <class T>
int train_with(const ModelConfig& mc, const TrainConfig& tc, const TrainArgs& a) {
  const JointGraph graph = load_graph(mc.graph);
  const Manifest m = load_manifest(a.manifest, graph.num_joints, mc.channels);
  make_dir(a.out);
  make_dir(fs::path(a.out) / "checkpoints");
  auto save = [&](std::size_t run, const Model<T>& model) {
    json ck = checkpoint_json(model);
    ck["training"] = to_json(tc);
    ck["run"] = run;
    std::ofstream out(fs::path(a.out) / "checkpoints" / ("run_" + std::to_string(run) + ".json"));
    if (!out) fail(ErrorKind::io, "cannot write checkpoint in " + a.out);
    out << ck.dump() << '\n';
    if (run == 0) {
      std::ofstream first(fs::path(a.out) / "checkpoint.json");
      if (!first) fail(ErrorKind::io, "cannot write checkpoint in " + a.out);
      first << ck.dump() << '\n';
    }
    if (!a.quiet) std::cerr << "run " << run << " done\n";
  };
  const RunResult result = multi_run<T>(mc, tc, m.samples, a.seed, save);
  write_json(fs::path(a.out) / "report.json", report_json(mc, tc, a.seed, result));
  write_json(fs::path(a.out) / "timing.json", timing_json(result));
  for (std::size_t r = 0; r < result.runs.size(); ++r) {
    std::cout << "run " << r << ": " << metrics_line(result.runs[r].metrics) << '\n';
  }
  std::cout << "average: " << metrics_line(result.average) << '\n';
  return exit_ok;
}

int cmd_train(const TrainArgs& a, const CLI::App& sub) {
  json j = a.config.empty() ? json::object() : read_json(a.config, ErrorKind::config);
  ModelConfig mc = model_config_from_json(j);
  TrainConfig tc = train_config_from_json(j.value("training", json::object()));
  if (sub.count("--runs")) tc.runs = a.runs;
  if (sub.count("--epochs")) tc.epochs = a.epochs;
  if (sub.count("--batch")) tc.batch_size = a.batch;
  if (sub.count("--loss")) tc.loss.kind = parse_loss_kind(a.loss);
  if (sub.count("--delta")) tc.loss.delta = a.delta;
  if (sub.count("--lr")) tc.adam.lr = a.lr;
  if (sub.count("--test-fraction")) tc.test_fraction = a.test_fraction;
  if (sub.count("--precision")) mc.precision = a.precision;
  mc.seed = a.seed;
  mc.validate();
  tc.validate();
  return mc.precision == 64 ? train_with<double>(mc, tc, a) : train_with<float>(mc, tc, a);
}

// ---------------------------------------------------------------------------

struct LoadedCheckpoint {
  json doc;
  int precision = 32;
  bool normalize = true;
};

LoadedCheckpoint open_checkpoint(const std::string& path) {
  LoadedCheckpoint c;
  c.doc = read_json(path, ErrorKind::format);
  try {
    c.precision = c.doc.at("precision").get<int>();
    if (c.doc.contains("training")) c.normalize = c.doc.at("training").value("normalize", true);
  } catch (const json::exception& e) {
    fail(ErrorKind::format, "checkpoint " + path + ": " + e.what());
  }
  return c;
}

struct EvalArgs {
  std::string checkpoint, manifest, out;
  std::size_t batch = 16;
};

template <class T>
int evaluate_with(const LoadedCheckpoint& ck, const EvalArgs& a) {
  const Model<T> model = model_from_checkpoint_json<T>(ck.doc);
  const Manifest m = load_manifest(a.manifest, model.graph().num_joints, model.config().channels);
  if (m.samples.empty()) fail(ErrorKind::data, "manifest has no samples");
  const std::vector<LabeledSample> samples = preprocess(m.samples, ck.normalize);
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<double> pred = model.predict(samples, a.batch);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const std::vector<double> y = scores_of(samples);
  const Metrics metrics = compute_metrics(y, pred, metric_options_for(y));

  make_dir(a.out);
  json j = to_json(metrics);
  j["count"] = samples.size();
  j["inference_seconds"] = seconds;
  write_json(fs::path(a.out) / "metrics.json", j);
  std::ofstream csv(fs::path(a.out) / "predictions.csv");
  if (!csv) fail(ErrorKind::io, "cannot write predictions in " + a.out);
  csv << "id,target,prediction\n";
  for (std::size_t i = 0; i < samples.size(); ++i) {
    csv << samples[i].sequence.id << ',' << format_double(y[i]) << ',' << format_double(pred[i]) << '\n';
  }
  std::cout << metrics_line(metrics) << "  (" << samples.size() << " sequences, " << seconds << " s)\n";
  return exit_ok;
}

int cmd_evaluate(const EvalArgs& a) {
  const LoadedCheckpoint ck = open_checkpoint(a.checkpoint);
  return ck.precision == 64 ? evaluate_with<double>(ck, a) : evaluate_with<float>(ck, a);
}

// ---------------------------------------------------------------------------

struct FeedbackArgs {
  std::string checkpoint, sequence, out;
  std::vector<std::string> formats{"svg", "csv"};
};

template <class T>
int feedback_with(const LoadedCheckpoint& ck, const FeedbackArgs& a) {
  const Model<T> model = model_from_checkpoint_json<T>(ck.doc);
  SkeletonSequence seq = load_sequence(a.sequence, model.graph().num_joints, model.config().channels);
  if (ck.normalize) seq = normalize_sequence(seq);
  const AttentionFeedback fb = extract_feedback(model, seq);
  const std::string stem = fs::path(a.sequence).stem().string() + "_feedback";
  for (const auto& f : a.formats) {
    const fs::path p = render_feedback(fb, model.graph(), a.out, stem, parse_feedback_format(f));
    std::cout << "wrote " << p.string() << '\n';
  }
  return exit_ok;
}

int cmd_feedback(const FeedbackArgs& a) {
  for (const auto& f : a.formats) parse_feedback_format(f);
  const LoadedCheckpoint ck = open_checkpoint(a.checkpoint);
  return ck.precision == 64 ? feedback_with<double>(ck, a) : feedback_with<float>(ck, a);
}

// ---------------------------------------------------------------------------

struct GradcheckArgs {
  std::string config, out;
  std::uint64_t seed = 0;
  double tolerance = 1e-4;
  std::size_t entries = 48;
  std::size_t frames = 12;
  std::size_t batch = 2;
  bool corrupt = false;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  ModelConfig mc = ModelConfig::tiny();
  if (!a.config.empty()) mc = model_config_from_json(read_json(a.config, ErrorKind::config), mc);
  mc.precision = 64;
  GradcheckOptions opt;
  opt.tolerance = a.tolerance;
  opt.max_entries_per_param = a.entries;
  opt.seed = substream_seed(a.seed, "gradcheck_entries");
  detail::corrupt_matmul_backward = a.corrupt;
  const GradcheckReport report = check_model_gradients(mc, a.seed, a.frames, a.batch, opt);
  detail::corrupt_matmul_backward = false;

  json groups = json::array();
  std::printf("%-24s %8s %14s\n", "group", "entries", "max_rel_error");
  for (const auto& g : group_report(report)) {
    std::printf("%-24s %8zu %14.3e\n", g.name.c_str(), g.checked, g.max_rel_error);
    groups.push_back({{"group", g.name}, {"entries", g.checked}, {"max_rel_error", g.max_rel_error},
                      {"max_abs_error", g.max_abs_error}});
  }
  std::printf("max relative error %.3e (tolerance %.1e): %s\n", report.max_rel_error, report.tolerance,
              report.passed ? "PASS" : "FAIL");
  if (!a.out.empty()) {
    make_dir(a.out);
    write_json(fs::path(a.out) / "gradcheck.json", {{"passed", report.passed},
                                                    {"tolerance", report.tolerance},
                                                    {"max_rel_error", report.max_rel_error},
                                                    {"groups", groups}});
  }
  return report.passed ? exit_ok : exit_numeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Skeleton exercise assessment: synthetic data, training, evaluation and joint feedback"};
  app.require_subcommand(1, 1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic exercise corpus");
  s->add_option("--kind", synth.kind, "arm_lift or squat")->capture_default_str();
  s->add_option("--count", synth.count, "Number of sequences")->capture_default_str();
  s->add_option("--quality", synth.quality, "Quality range lo hi in [0, 1]")->expected(2)->capture_default_str();
  s->add_option("--frames", synth.frames, "Frame count range lo hi")->expected(2)->capture_default_str();
  s->add_option("--dataset", synth.dataset, "Score range: kimore [0,50] or uiprmd [0,1]")->capture_default_str();
  s->add_option("--noise", synth.noise, "Sensor noise std")->capture_default_str();
  s->add_option("--seed", synth.seed, "Root seed")->capture_default_str();
  s->add_option("--out", synth.out, "Output directory")->required();

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train over k seeded runs and write checkpoints and a report");
  t->add_option("--config", train.config, "Model/training config JSON");
  t->add_option("--manifest", train.manifest, "Dataset manifest")->required();
  t->add_option("--out", train.out, "Output directory")->required();
  t->add_option("--seed", train.seed, "Root seed")->capture_default_str();
  t->add_option("--runs", train.runs, "Independent runs");
  t->add_option("--loss", train.loss, "mse, huber or logcosh")->check(CLI::IsMember({"mse", "huber", "logcosh"}));
  t->add_option("--delta", train.delta, "Huber threshold");
  t->add_option("--epochs", train.epochs, "Epochs per run");
  t->add_option("--batch", train.batch, "Batch size");
  t->add_option("--lr", train.lr, "Adam learning rate");
  t->add_option("--test-fraction", train.test_fraction, "Held-out fraction per run (0: evaluate on training data)");
  t->add_option("--precision", train.precision, "32 or 64")->check(CLI::IsMember({32, 64}));
  t->add_flag("--quiet", train.quiet, "No per-run progress on stderr");

  EvalArgs eval;
  auto* e = app.add_subcommand("evaluate", "Score a manifest with a checkpoint");
  e->add_option("--checkpoint", eval.checkpoint, "Checkpoint JSON")->required();
  e->add_option("--manifest", eval.manifest, "Dataset manifest")->required();
  e->add_option("--out", eval.out, "Output directory")->required();
  e->add_option("--batch", eval.batch, "Inference batch size")->capture_default_str();

  FeedbackArgs feedback;
  auto* f = app.add_subcommand("feedback", "Export per-joint attention roles for one sequence");
  f->add_option("--checkpoint", feedback.checkpoint, "Checkpoint JSON")->required();
  f->add_option("--sequence", feedback.sequence, "Sequence CSV")->required();
  f->add_option("--out", feedback.out, "Output directory")->required();
  f->add_option("--format", feedback.formats, "svg, csv or svg,csv")->delimiter(',')->capture_default_str();

  GradcheckArgs grad;
  auto* g = app.add_subcommand("gradcheck", "Finite-difference check of the full model in 64-bit");
  g->add_option("--config", grad.config, "Model config JSON (defaults to the tiny preset)");
  g->add_option("--seed", grad.seed, "Seed")->capture_default_str();
  g->add_option("--tolerance", grad.tolerance, "Maximum relative error")->capture_default_str();
  g->add_option("--entries", grad.entries, "Entries sampled per parameter (0: all)")->capture_default_str();
  g->add_option("--frames", grad.frames, "Sequence length")->capture_default_str();
  g->add_option("--batch", grad.batch, "Sequences in the batch")->capture_default_str();
  g->add_option("--out", grad.out, "Write gradcheck.json here");
  g->add_flag("--corrupt-backward", grad.corrupt, "Perturb the matmul weight gradient (negative control)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForAllHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return exit_usage;
  }

  try {
    if (*s) return cmd_synth(synth);
    if (*t) return cmd_train(train, *t);
    if (*e) return cmd_evaluate(eval);
    if (*f) return cmd_feedback(feedback);
    if (*g) return cmd_gradcheck(grad);
  } catch (const Error& err) {
    std::cerr << "error: " << err.what() << '\n';
    return exit_code_for(err.kind());
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return exit_data;
  }
  return exit_usage;
}
