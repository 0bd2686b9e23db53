#pragma once

// Joint-role feedback from the block attention maps.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "data.hpp"
#include "graph.hpp"
#include "model.hpp"

namespace dstgcnt {

struct AttentionFeedback {
  std::size_t frames = 0;
  std::size_t joints = 0;
  std::vector<double> map;           // [T, N, N], rows sum to 1
  std::vector<double> joint_role;    // [T, N]
  std::vector<double> summary_role;  // [N], in [0, 1]
};

/// chi[t, j] = sum_i map[t, i, j]
inline std::vector<double> joint_role(const std::vector<double>& map, std::size_t frames, std::size_t joints) {
  if (map.size() != frames * joints * joints) fail(ErrorKind::shape, "joint_role: map is not T x N x N");
  std::vector<double> chi(frames * joints, 0.0);
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t i = 0; i < joints; ++i)
      for (std::size_t j = 0; j < joints; ++j) chi[t * joints + j] += map[(t * joints + i) * joints + j];
  return chi;
}

/// Time-mean per joint, min-max scaled to [0, 1]. A constant profile maps to zeros.
inline std::vector<double> summarize_roles(const std::vector<double>& chi, std::size_t frames, std::size_t joints) {
  if (frames == 0 || chi.size() != frames * joints) fail(ErrorKind::shape, "summarize_roles: chi is not T x N");
  std::vector<double> mean(joints, 0.0);
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t j = 0; j < joints; ++j) mean[j] += chi[t * joints + j];
  for (double& m : mean) m /= static_cast<double>(frames);
  const auto [lo, hi] = std::minmax_element(mean.begin(), mean.end());
  const double low = *lo, range = *hi - *lo;
  std::vector<double> out(joints, 0.0);
  if (range > 0.0)
    for (std::size_t j = 0; j < joints; ++j) out[j] = (mean[j] - low) / range;
  return out;
}

inline AttentionFeedback make_feedback(std::vector<double> map, std::size_t frames, std::size_t joints) {
  AttentionFeedback fb;
  fb.frames = frames;
  fb.joints = joints;
  fb.map = std::move(map);
  fb.joint_role = joint_role(fb.map, frames, joints);
  fb.summary_role = summarize_roles(fb.joint_role, frames, joints);
  return fb;
}

/// Runs one (already preprocessed) sequence and reads the attention map of
/// the configured feedback block.
template <class T>
AttentionFeedback extract_feedback(const Model<T>& model, const SkeletonSequence& seq) {
  NoGradGuard no_grad;
  const Batch batch = make_batch({LabeledSample{seq, 0.0, {}}});
  const auto out = model.forward(batch);
  const Var<T>& m = out.attention_maps.at(model.config().feedback_block);
  return make_feedback(std::vector<double>(m.value().begin(), m.value().end()), seq.frames, seq.joints);
}

inline void write_feedback_csv(std::ostream& out, const AttentionFeedback& fb) {
  for (std::size_t j = 0; j < fb.joints; ++j) out << (j ? "," : "") << "joint_" << j;
  out << '\n';
  for (std::size_t t = 0; t < fb.frames; ++t) {
    for (std::size_t j = 0; j < fb.joints; ++j) out << (j ? "," : "") << format_double(fb.joint_role[t * fb.joints + j]);
    out << '\n';
  }
}

/// Reads a chi table written by write_feedback_csv back into [T, N].
inline std::vector<double> read_feedback_csv(std::istream& in, std::size_t& frames, std::size_t& joints) {
  std::string line;
  if (!std::getline(in, line)) fail(ErrorKind::format, "feedback CSV is empty");
  joints = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
  std::vector<double> chi;
  frames = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream row(line);
    std::string cell;
    std::size_t count = 0;
    while (std::getline(row, cell, ',')) {
      double v = 0.0;
      auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (res.ec != std::errc()) fail(ErrorKind::format, "feedback CSV: bad cell '" + cell + "'");
      chi.push_back(v);
      ++count;
    }
    if (count != joints) fail(ErrorKind::format, "feedback CSV: ragged row");
    ++frames;
  }
  return chi;
}

namespace detail {
/// White -> yellow -> red ramp for v in [0, 1].
inline std::string heat_color(double v) {
  v = std::clamp(v, 0.0, 1.0);
  const int r = 255;
  const int g = static_cast<int>(std::lround(255.0 * (v < 0.5 ? 1.0 : 2.0 * (1.0 - v))));
  const int b = static_cast<int>(std::lround(255.0 * (v < 0.5 ? 1.0 - 2.0 * v : 0.0)));
  char buf[8];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", r, g, b);
  return buf;
}
}  // namespace detail

inline constexpr double svg_min_radius = 3.0;
inline constexpr double svg_max_radius = 14.0;

/// Skeleton drawing (circle radius follows summary_role) beside a frame x joint heatmap of chi.
inline void write_feedback_svg(std::ostream& out, const AttentionFeedback& fb, const JointGraph& graph) {
  if (graph.layout.size() != fb.joints) fail(ErrorKind::config, "graph '" + graph.name + "' has no 2D layout for rendering");
  const double skel_w = 260.0, height = 360.0, margin = 20.0;
  const double cell_w = std::max(4.0, std::min(16.0, 400.0 / static_cast<double>(fb.joints)));
  const double cell_h = std::max(1.0, std::min(8.0, (height - 2 * margin) / static_cast<double>(std::max<std::size_t>(fb.frames, 1))));
  const double heat_x = skel_w + margin;
  const double width = heat_x + cell_w * static_cast<double>(fb.joints) + margin;

  double min_x = 1e300, max_x = -1e300, min_y = 1e300, max_y = -1e300;
  for (const auto& p : graph.layout) {
    min_x = std::min(min_x, p[0]);
    max_x = std::max(max_x, p[0]);
    min_y = std::min(min_y, p[1]);
    max_y = std::max(max_y, p[1]);
  }
  const double span = std::max({max_x - min_x, max_y - min_y, 1e-9});
  const double s = (std::min(skel_w, height) - 2 * margin - 2 * svg_max_radius) / span;
  auto px = [&](std::size_t j) { return margin + svg_max_radius + (graph.layout[j][0] - min_x) * s; };
  auto py = [&](std::size_t j) { return margin + svg_max_radius + (max_y - graph.layout[j][1]) * s; };

  double chi_max = 0.0;
  for (double v : fb.joint_role) chi_max = std::max(chi_max, v);

  out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\" viewBox=\"0 0 "
      << width << ' ' << height << "\">\n";
  out << "<rect x=\"0\" y=\"0\" width=\"" << width << "\" height=\"" << height << "\" fill=\"#ffffff\"/>\n";
  out << "<g id=\"skeleton\" stroke=\"#555555\" stroke-width=\"2\">\n";
  for (auto [a, b] : graph.edges) {
    out << "<line x1=\"" << px(a) << "\" y1=\"" << py(a) << "\" x2=\"" << px(b) << "\" y2=\"" << py(b) << "\"/>\n";
  }
  out << "</g>\n<g id=\"joints\" stroke=\"#333333\" stroke-width=\"1\">\n";
  for (std::size_t j = 0; j < fb.joints; ++j) {
    const double v = fb.summary_role[j];
    const double r = svg_min_radius + (svg_max_radius - svg_min_radius) * v;
    out << "<circle cx=\"" << px(j) << "\" cy=\"" << py(j) << "\" r=\"" << r << "\" fill=\"" << detail::heat_color(v)
        << "\"><title>joint " << j << ": " << v << "</title></circle>\n";
  }
  out << "</g>\n<g id=\"heatmap\">\n";
  for (std::size_t t = 0; t < fb.frames; ++t) {
    for (std::size_t j = 0; j < fb.joints; ++j) {
      const double v = chi_max > 0.0 ? fb.joint_role[t * fb.joints + j] / chi_max : 0.0;
      out << "<rect x=\"" << heat_x + cell_w * static_cast<double>(j) << "\" y=\"" << margin + cell_h * static_cast<double>(t)
          << "\" width=\"" << cell_w << "\" height=\"" << cell_h << "\" fill=\"" << detail::heat_color(v) << "\"/>\n";
    }
  }
  out << "</g>\n</svg>\n";
}

enum class FeedbackFormat { svg, csv };

inline FeedbackFormat parse_feedback_format(const std::string& s) {
  if (s == "svg") return FeedbackFormat::svg;
  if (s == "csv") return FeedbackFormat::csv;
  fail(ErrorKind::config, "unknown feedback format '" + s + "' (expected svg or csv)");
}

/// Writes <out_dir>/<stem>.svg or .csv and returns the path.
inline std::filesystem::path render_feedback(const AttentionFeedback& fb, const JointGraph& graph,
                                             const std::filesystem::path& out_dir, const std::string& stem,
                                             FeedbackFormat format) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) fail(ErrorKind::io, "cannot create " + out_dir.string());
  const auto path = out_dir / (stem + (format == FeedbackFormat::svg ? ".svg" : ".csv"));
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot write " + path.string());
  if (format == FeedbackFormat::svg) {
    write_feedback_svg(out, fb, graph);
  } else {
    write_feedback_csv(out, fb);
  }
  return path;
}

}  // namespace dstgcnt
