#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "graph.hpp"

namespace dstgcnt {

/// One exercise performance: T frames of N joints with C coordinates, row-major.
struct SkeletonSequence {
  std::string id;
  std::size_t frames = 0;
  std::size_t joints = 0;
  std::size_t channels = 3;
  std::vector<double> data;

  double& at(std::size_t t, std::size_t j, std::size_t c) { return data[(t * joints + j) * channels + c]; }
  double at(std::size_t t, std::size_t j, std::size_t c) const { return data[(t * joints + j) * channels + c]; }

  bool operator==(const SkeletonSequence&) const = default;
};

struct ScoreRange {
  double lo = 0.0;
  double hi = 50.0;
};

inline constexpr ScoreRange kimore_range{0.0, 50.0};
inline constexpr ScoreRange uiprmd_range{0.0, 1.0};

struct LabeledSample {
  SkeletonSequence sequence;
  double score = 0.0;
  ScoreRange range{};
};

/// Zero-padded batch. frames is [B, T_max, N, C]; mask is [B, T_max] with 1 for real frames.
struct Batch {
  std::vector<LabeledSample> samples;
  std::size_t max_frames = 0;
  std::size_t joints = 0;
  std::size_t channels = 3;
  std::vector<double> frames;
  std::vector<double> mask;

  std::size_t size() const { return samples.size(); }
};

// ---------------------------------------------------------------------------
// CSV sequences: optional header row, then one row per frame j0_x,j0_y,j0_z,...

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline SkeletonSequence parse_sequence_csv(std::istream& in, std::size_t n_joints, std::string id,
                                           std::size_t channels = 3) {
  SkeletonSequence seq;
  seq.id = std::move(id);
  seq.joints = n_joints;
  seq.channels = channels;
  const std::size_t width = n_joints * channels;
  std::string line;
  std::size_t row = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    if (first) {
      first = false;
      const auto pos = line.find_first_not_of(" \t");
      if (std::isalpha(static_cast<unsigned char>(line[pos])) || line[pos] == '_') continue;  // header
    }
    std::size_t count = 0;
    std::size_t start = 0;
    while (true) {
      const std::size_t end = line.find(',', start);
      std::string_view cell(line.data() + start, (end == std::string::npos ? line.size() : end) - start);
      while (!cell.empty() && (cell.front() == ' ' || cell.front() == '\t')) cell.remove_prefix(1);
      while (!cell.empty() && (cell.back() == ' ' || cell.back() == '\t')) cell.remove_suffix(1);
      double v = 0.0;
      const bool nan_text = cell == "nan" || cell == "NaN" || cell == "-nan";
      auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (nan_text || (res.ec == std::errc() && !std::isfinite(v))) {
        fail(ErrorKind::data, seq.id + " row " + std::to_string(row) + ": non-finite value");
      }
      if (res.ec != std::errc() || res.ptr != cell.data() + cell.size()) {
        fail(ErrorKind::format, seq.id + " row " + std::to_string(row) + ": cannot parse '" + std::string(cell) + "'");
      }
      seq.data.push_back(v);
      ++count;
      if (end == std::string::npos) break;
      start = end + 1;
    }
    if (count != width) {
      fail(ErrorKind::format, seq.id + " row " + std::to_string(row) + ": expected " + std::to_string(width) +
                                  " columns, found " + std::to_string(count));
    }
    ++seq.frames;
  }
  if (seq.frames == 0) fail(ErrorKind::format, seq.id + ": no frames");
  return seq;
}

inline SkeletonSequence load_sequence(const std::filesystem::path& path, std::size_t n_joints, std::size_t channels = 3) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open sequence file " + path.string());
  return parse_sequence_csv(in, n_joints, path.stem().string(), channels);
}

inline void write_sequence_csv(std::ostream& out, const SkeletonSequence& seq) {
  static constexpr const char* axes[] = {"x", "y", "z"};
  for (std::size_t j = 0; j < seq.joints; ++j) {
    for (std::size_t c = 0; c < seq.channels; ++c) {
      if (j || c) out << ',';
      out << 'j' << j << '_' << (c < 3 ? axes[c] : std::to_string(c).c_str());
    }
  }
  out << '\n';
  for (std::size_t t = 0; t < seq.frames; ++t) {
    for (std::size_t k = 0; k < seq.joints * seq.channels; ++k) {
      if (k) out << ',';
      out << format_double(seq.data[t * seq.joints * seq.channels + k]);
    }
    out << '\n';
  }
}

inline void write_sequence(const std::filesystem::path& path, const SkeletonSequence& seq) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot write sequence file " + path.string());
  write_sequence_csv(out, seq);
}

// ---------------------------------------------------------------------------
// Manifests: {"dataset", "score_range": [lo, hi], "samples": [{"id", "path", "score"}]}

struct Manifest {
  std::string dataset;
  ScoreRange range{};
  std::vector<LabeledSample> samples;
};

inline Manifest load_manifest(const std::filesystem::path& path, std::size_t n_joints, std::size_t channels = 3) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, "manifest " + path.string() + ": " + e.what());
  }
  Manifest m;
  try {
    m.dataset = j.value("dataset", std::string("unnamed"));
    const auto& r = j.at("score_range");
    m.range = {r.at(0).get<double>(), r.at(1).get<double>()};
    if (!(m.range.lo <= m.range.hi)) fail(ErrorKind::data, "manifest score_range is inverted");
    const auto base = path.parent_path();
    for (const auto& s : j.at("samples")) {
      std::filesystem::path p = s.at("path").get<std::string>();
      if (p.is_relative()) p = base / p;
      LabeledSample sample;
      sample.sequence = load_sequence(p, n_joints, channels);
      sample.sequence.id = s.at("id").get<std::string>();
      sample.score = s.at("score").get<double>();
      sample.range = m.range;
      if (sample.score < m.range.lo || sample.score > m.range.hi) {
        fail(ErrorKind::data, "sample " + sample.sequence.id + " score outside score_range");
      }
      m.samples.push_back(std::move(sample));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, "manifest " + path.string() + ": " + e.what());
  }
  return m;
}

/// Writes each sequence as <dir>/<id>.csv and a manifest.json next to them.
inline void write_dataset(const std::filesystem::path& dir, const std::string& dataset, ScoreRange range,
                          const std::vector<LabeledSample>& samples) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorKind::io, "cannot create " + dir.string() + ": " + ec.message());
  nlohmann::json j;
  j["dataset"] = dataset;
  j["score_range"] = {range.lo, range.hi};
  j["samples"] = nlohmann::json::array();
  for (const auto& s : samples) {
    const std::string file = s.sequence.id + ".csv";
    write_sequence(dir / file, s.sequence);
    j["samples"].push_back({{"id", s.sequence.id}, {"path", file}, {"score", s.score}});
  }
  std::ofstream out(dir / "manifest.json");
  if (!out) fail(ErrorKind::io, "cannot write manifest in " + dir.string());
  out << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Preprocessing

struct NormalizeOptions {
  std::size_t root_joint = kimore::spine_base;
  /// The torso segment is root_joint -> torso_joint.
  std::size_t torso_joint = kimore::spine_shoulder;
};

/// Moves the root joint to the origin in every frame and divides by the mean
/// torso length over the sequence.
inline SkeletonSequence normalize_sequence(const SkeletonSequence& seq, const NormalizeOptions& opt = {}) {
  if (opt.root_joint >= seq.joints || opt.torso_joint >= seq.joints) {
    fail(ErrorKind::config, "normalize_sequence: joint index out of range");
  }
  double torso = 0.0;
  for (std::size_t t = 0; t < seq.frames; ++t) {
    double sq = 0.0;
    for (std::size_t c = 0; c < seq.channels; ++c) {
      const double d = seq.at(t, opt.torso_joint, c) - seq.at(t, opt.root_joint, c);
      sq += d * d;
    }
    torso += std::sqrt(sq);
  }
  torso /= static_cast<double>(seq.frames);
  if (!(torso > 0.0)) fail(ErrorKind::data, "normalize_sequence: zero torso length in " + seq.id);
  SkeletonSequence out = seq;
  for (std::size_t t = 0; t < seq.frames; ++t) {
    for (std::size_t j = 0; j < seq.joints; ++j) {
      for (std::size_t c = 0; c < seq.channels; ++c) {
        out.at(t, j, c) = (seq.at(t, j, c) - seq.at(t, opt.root_joint, c)) / torso;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic exercises on the 25-joint skeleton

enum class ExerciseKind { arm_lift, squat };

inline ExerciseKind parse_exercise_kind(const std::string& s) {
  if (s == "arm_lift") return ExerciseKind::arm_lift;
  if (s == "squat") return ExerciseKind::squat;
  fail(ErrorKind::config, "unknown exercise kind '" + s + "' (expected arm_lift or squat)");
}

inline const char* to_string(ExerciseKind k) { return k == ExerciseKind::arm_lift ? "arm_lift" : "squat"; }

inline double score_from_quality(double quality, ScoreRange range) { return range.lo + quality * (range.hi - range.lo); }

namespace detail {

inline SkeletonSequence rest_pose_sequence(std::size_t frames) {
  const JointGraph g = kimore_graph();
  SkeletonSequence seq;
  seq.joints = g.num_joints;
  seq.channels = 3;
  seq.frames = frames;
  seq.data.assign(frames * seq.joints * 3, 0.0);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t j = 0; j < seq.joints; ++j) {
      seq.at(t, j, 0) = g.layout[j][0];
      seq.at(t, j, 1) = g.layout[j][1] + 0.9;  // pelvis height above the floor
      seq.at(t, j, 2) = 2.5;                   // distance from the sensor
    }
  }
  return seq;
}

/// Rotates joints of one arm about its shoulder in the frontal plane.
inline void raise_arm(SkeletonSequence& seq, std::size_t t, const std::vector<std::size_t>& chain,
                      std::size_t shoulder, double angle, double side) {
  const double cx = seq.at(t, shoulder, 0), cy = seq.at(t, shoulder, 1);
  const double c = std::cos(angle), s = std::sin(angle) * side;
  for (std::size_t j : chain) {
    const double dx = seq.at(t, j, 0) - cx, dy = seq.at(t, j, 1) - cy;
    seq.at(t, j, 0) = cx + c * dx - s * dy;
    seq.at(t, j, 1) = cy + s * dx + c * dy;
  }
}

}  // namespace detail

struct SynthOptions {
  ScoreRange range = kimore_range;
  double noise = 0.002;
};

/// Deterministic synthetic repetition. Lower quality reduces the range of
/// motion and adds tremor; everything outside the moving chain gets only
/// sensor noise.
inline LabeledSample synthesize_exercise(ExerciseKind kind, double quality, std::size_t frames, std::uint64_t seed,
                                         const SynthOptions& opt = {}) {
  using namespace kimore;
  if (frames < 8) fail(ErrorKind::config, "synthesize_exercise needs at least 8 frames");
  if (!(quality >= 0.0 && quality <= 1.0)) fail(ErrorKind::config, "quality must lie in [0, 1]");
  Rng rng(seed);
  const double tremor_freq = rng.uniform(5.0, 7.0);
  const double tremor_phase = rng.uniform(0.0, 2.0 * M_PI);
  const double degradation = 1.0 - quality;

  SkeletonSequence seq = detail::rest_pose_sequence(frames);
  seq.id = std::string(to_string(kind)) + "_" + std::to_string(seed);
  const std::vector<std::size_t> left = {elbow_left, wrist_left, hand_left, hand_tip_left, thumb_left};
  const std::vector<std::size_t> right = {elbow_right, wrist_right, hand_right, hand_tip_right, thumb_right};
  for (std::size_t t = 0; t < frames; ++t) {
    const double phase = 2.0 * M_PI * static_cast<double>(t) / static_cast<double>(frames - 1);
    const double envelope = 0.5 * (1.0 - std::cos(phase));  // 0 -> 1 -> 0
    const double tremor = degradation * 0.25 * std::sin(tremor_freq * phase + tremor_phase);
    if (kind == ExerciseKind::arm_lift) {
      const double angle = (0.5 + 0.5 * quality) * 2.6 * envelope + tremor;
      detail::raise_arm(seq, t, left, shoulder_left, angle, -1.0);
      detail::raise_arm(seq, t, right, shoulder_right, angle, 1.0);
    } else {
      const double depth = (0.5 + 0.5 * quality) * 0.35 * envelope + 0.1 * tremor;
      for (std::size_t j = 0; j < seq.joints; ++j) {
        const bool lower = j == knee_left || j == knee_right || j == ankle_left || j == ankle_right ||
                           j == foot_left || j == foot_right;
        if (j == ankle_left || j == ankle_right || j == foot_left || j == foot_right) continue;
        seq.at(t, j, 1) -= lower ? 0.5 * depth : depth;
        if (j == knee_left || j == knee_right) seq.at(t, j, 2) -= 0.6 * depth;
      }
    }
  }
  for (double& v : seq.data) v += opt.noise * rng.normal();
  return LabeledSample{std::move(seq), score_from_quality(quality, opt.range), opt.range};
}

// ---------------------------------------------------------------------------
// Batching and splitting

inline Batch make_batch(std::vector<LabeledSample> samples) {
  Batch b;
  if (samples.empty()) return b;
  b.joints = samples[0].sequence.joints;
  b.channels = samples[0].sequence.channels;
  for (const auto& s : samples) {
    if (s.sequence.joints != b.joints || s.sequence.channels != b.channels) {
      fail(ErrorKind::data, "batch mixes skeleton layouts");
    }
    b.max_frames = std::max(b.max_frames, s.sequence.frames);
  }
  const std::size_t frame_size = b.joints * b.channels;
  b.frames.assign(samples.size() * b.max_frames * frame_size, 0.0);
  b.mask.assign(samples.size() * b.max_frames, 0.0);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i].sequence;
    std::copy(s.data.begin(), s.data.end(), b.frames.begin() + static_cast<std::ptrdiff_t>(i * b.max_frames * frame_size));
    std::fill_n(b.mask.begin() + static_cast<std::ptrdiff_t>(i * b.max_frames), s.frames, 1.0);
  }
  b.samples = std::move(samples);
  return b;
}

inline std::vector<Batch> make_batches(const std::vector<LabeledSample>& samples, std::size_t batch_size,
                                       std::uint64_t seed) {
  if (batch_size == 0) fail(ErrorKind::config, "batch size must be at least 1");
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(order);
  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    std::vector<LabeledSample> chunk;
    for (std::size_t i = start; i < std::min(order.size(), start + batch_size); ++i) chunk.push_back(samples[order[i]]);
    batches.push_back(make_batch(std::move(chunk)));
  }
  return batches;
}

inline std::pair<std::vector<LabeledSample>, std::vector<LabeledSample>> train_test_split(
    const std::vector<LabeledSample>& samples, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) fail(ErrorKind::config, "test_fraction must lie in (0, 1)");
  if (samples.size() < 2) fail(ErrorKind::data, "split needs at least 2 samples");
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(order);
  auto n_test = static_cast<std::size_t>(std::lround(test_fraction * static_cast<double>(samples.size())));
  n_test = std::clamp<std::size_t>(n_test, 1, samples.size() - 1);
  std::vector<LabeledSample> train, test;
  for (std::size_t i = 0; i < order.size(); ++i) (i < n_test ? test : train).push_back(samples[order[i]]);
  return {std::move(train), std::move(test)};
}

}  // namespace dstgcnt
