#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <deque>
#include <fstream>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "common.hpp"

namespace dstgcnt {

/// Undirected skeleton graph. Edges are stored once, as (i, j) with i < j.
struct JointGraph {
  std::size_t num_joints = 0;
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  std::string name;
  /// Optional front-view 2D coordinates used for rendering.
  std::vector<std::array<double, 2>> layout;

  static JointGraph make(std::size_t n, const std::vector<std::pair<std::size_t, std::size_t>>& edge_list,
                         std::string name = "custom") {
    JointGraph g;
    g.num_joints = n;
    g.name = std::move(name);
    for (auto [a, b] : edge_list) {
      if (a >= n || b >= n) {
        fail(ErrorKind::config, "edge (" + std::to_string(a) + "," + std::to_string(b) + ") out of range for " +
                                    std::to_string(n) + " joints");
      }
      if (a == b) fail(ErrorKind::config, "self-loop edge on joint " + std::to_string(a));
      g.edges.emplace_back(std::min(a, b), std::max(a, b));
    }
    std::sort(g.edges.begin(), g.edges.end());
    g.edges.erase(std::unique(g.edges.begin(), g.edges.end()), g.edges.end());
    return g;
  }

  std::vector<std::vector<std::size_t>> neighbors() const {
    std::vector<std::vector<std::size_t>> nb(num_joints);
    for (auto [a, b] : edges) {
      nb[a].push_back(b);
      nb[b].push_back(a);
    }
    return nb;
  }

  bool has_edge(std::size_t a, std::size_t b) const {
    return std::binary_search(edges.begin(), edges.end(), std::make_pair(std::min(a, b), std::max(a, b)));
  }
};

/// Kinect v2 joint indices as used by KIMORE.
namespace kimore {
enum Joint : std::size_t {
  spine_base = 0,
  spine_mid = 1,
  neck = 2,
  head = 3,
  shoulder_left = 4,
  elbow_left = 5,
  wrist_left = 6,
  hand_left = 7,
  shoulder_right = 8,
  elbow_right = 9,
  wrist_right = 10,
  hand_right = 11,
  hip_left = 12,
  knee_left = 13,
  ankle_left = 14,
  foot_left = 15,
  hip_right = 16,
  knee_right = 17,
  ankle_right = 18,
  foot_right = 19,
  spine_shoulder = 20,
  hand_tip_left = 21,
  thumb_left = 22,
  hand_tip_right = 23,
  thumb_right = 24,
};

inline constexpr std::size_t num_joints = 25;

inline const std::vector<std::size_t>& arm_chain() {
  static const std::vector<std::size_t> joints = {shoulder_left,  elbow_left,  wrist_left,     hand_left,
                                                  hand_tip_left,  thumb_left,  shoulder_right, elbow_right,
                                                  wrist_right,    hand_right,  hand_tip_right, thumb_right};
  return joints;
}

inline const std::vector<std::size_t>& leg_chain() {
  static const std::vector<std::size_t> joints = {hip_left,  knee_left,  ankle_left,  foot_left,
                                                  hip_right, knee_right, ankle_right, foot_right};
  return joints;
}
}  // namespace kimore

/// The 25-joint Kinect v2 skeleton with its front-view layout.
inline JointGraph kimore_graph() {
  using namespace kimore;
  JointGraph g = JointGraph::make(num_joints,
                                  {
                                      {spine_base, spine_mid},
                                      {spine_mid, spine_shoulder},
                                      {spine_shoulder, neck},
                                      {neck, head},
                                      {spine_shoulder, shoulder_left},
                                      {shoulder_left, elbow_left},
                                      {elbow_left, wrist_left},
                                      {wrist_left, hand_left},
                                      {hand_left, hand_tip_left},
                                      {wrist_left, thumb_left},
                                      {spine_shoulder, shoulder_right},
                                      {shoulder_right, elbow_right},
                                      {elbow_right, wrist_right},
                                      {wrist_right, hand_right},
                                      {hand_right, hand_tip_right},
                                      {wrist_right, thumb_right},
                                      {spine_base, hip_left},
                                      {hip_left, knee_left},
                                      {knee_left, ankle_left},
                                      {ankle_left, foot_left},
                                      {spine_base, hip_right},
                                      {hip_right, knee_right},
                                      {knee_right, ankle_right},
                                      {ankle_right, foot_right},
                                  },
                                  "kimore");
  g.layout = {
      {0.00, 0.00},   {0.00, 0.30},   {0.00, 0.62},  {0.00, 0.78},   {-0.18, 0.52}, {-0.25, 0.28}, {-0.28, 0.05},
      {-0.29, -0.03}, {0.18, 0.52},   {0.25, 0.28},  {0.28, 0.05},   {0.29, -0.03}, {-0.09, -0.02}, {-0.10, -0.42},
      {-0.10, -0.80}, {-0.12, -0.88}, {0.09, -0.02}, {0.10, -0.42},  {0.10, -0.80}, {0.12, -0.88},  {0.00, 0.55},
      {-0.30, -0.11}, {-0.24, -0.02}, {0.30, -0.11}, {0.24, -0.02},
  };
  return g;
}

inline JointGraph graph_from_json(const nlohmann::json& j) {
  try {
    const auto n = j.at("num_joints").get<std::size_t>();
    std::vector<std::pair<std::size_t, std::size_t>> edges;
    for (const auto& e : j.at("edges")) {
      if (!e.is_array() || e.size() != 2) fail(ErrorKind::format, "graph edge must be an [i, j] pair");
      edges.emplace_back(e[0].get<std::size_t>(), e[1].get<std::size_t>());
    }
    JointGraph g = JointGraph::make(n, edges, j.value("name", std::string("custom")));
    if (j.contains("layout")) {
      for (const auto& p : j.at("layout")) g.layout.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
      if (g.layout.size() != n) fail(ErrorKind::format, "graph layout must have one [x, y] per joint");
    }
    return g;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, std::string("graph JSON: ") + e.what());
  }
}

inline nlohmann::json graph_to_json(const JointGraph& g) {
  nlohmann::json j;
  j["name"] = g.name;
  j["num_joints"] = g.num_joints;
  j["edges"] = nlohmann::json::array();
  for (auto [a, b] : g.edges) j["edges"].push_back({a, b});
  if (!g.layout.empty()) {
    j["layout"] = nlohmann::json::array();
    for (const auto& p : g.layout) j["layout"].push_back({p[0], p[1]});
  }
  return j;
}

/// Resolves "kimore" to the built-in skeleton, anything else as a graph file path.
inline JointGraph load_graph(const std::string& name_or_path) {
  if (name_or_path == "kimore") return kimore_graph();
  std::ifstream in(name_or_path);
  if (!in) fail(ErrorKind::io, "cannot open graph file " + name_or_path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, "graph file " + name_or_path + ": " + e.what());
  }
  return graph_from_json(j);
}

inline constexpr std::size_t unreachable = std::numeric_limits<std::size_t>::max();

/// All-pairs hop distances by breadth-first search; `unreachable` for disconnected pairs.
inline Matrix<std::size_t> shortest_hop_distances(const JointGraph& g) {
  const std::size_t n = g.num_joints;
  Matrix<std::size_t> d(n, n, unreachable);
  const auto nb = g.neighbors();
  std::deque<std::size_t> queue;
  for (std::size_t s = 0; s < n; ++s) {
    d(s, s) = 0;
    queue.assign(1, s);
    while (!queue.empty()) {
      const std::size_t u = queue.front();
      queue.pop_front();
      for (std::size_t v : nb[u]) {
        if (d(s, v) == unreachable) {
          d(s, v) = d(s, u) + 1;
          queue.push_back(v);
        }
      }
    }
  }
  return d;
}

/// Binary k-hop adjacency: 1 where the hop distance is exactly k, plus the diagonal.
struct HopAdjacency {
  std::size_t k = 0;
  Matrix<double> matrix;
};

inline HopAdjacency k_hop_adjacency(const Matrix<std::size_t>& distances, std::size_t k) {
  const std::size_t n = distances.rows;
  HopAdjacency hop{k, Matrix<double>(n, n)};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      hop.matrix(i, j) = (i == j || distances(i, j) == k) ? 1.0 : 0.0;
    }
  }
  return hop;
}

inline HopAdjacency k_hop_adjacency(const JointGraph& g, std::size_t k) {
  return k_hop_adjacency(shortest_hop_distances(g), k);
}

/// D^{-1/2} (A + I) D^{-1/2}. The self-loop is set, not added, so a diagonal
/// that is already 1 stays 1.
inline Matrix<double> normalize_adjacency(const HopAdjacency& hop) {
  const std::size_t n = hop.matrix.rows;
  Matrix<double> a = hop.matrix;
  for (std::size_t i = 0; i < n; ++i) a(i, i) = 1.0;
  std::vector<double> inv_sqrt_deg(n);
  for (std::size_t i = 0; i < n; ++i) {
    double deg = 0.0;
    for (std::size_t j = 0; j < n; ++j) deg += a(i, j);
    inv_sqrt_deg[i] = 1.0 / std::sqrt(deg);  // deg >= 1 because of the self-loop
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) a(i, j) *= inv_sqrt_deg[i] * inv_sqrt_deg[j];
  }
  return a;
}

/// Normalized operators for hop orders {0} U hops, in that order.
inline std::vector<Matrix<double>> hop_operators(const JointGraph& g, const std::vector<std::size_t>& hops) {
  const auto d = shortest_hop_distances(g);
  std::vector<Matrix<double>> ops;
  ops.push_back(normalize_adjacency(k_hop_adjacency(d, 0)));
  for (std::size_t k : hops) {
    if (k == 0) continue;
    ops.push_back(normalize_adjacency(k_hop_adjacency(d, k)));
  }
  return ops;
}

}  // namespace dstgcnt
