#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace dstgcnt {

struct GradcheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Denominator floor for the relative error, so entries whose true gradient
  /// is numerically zero are judged on absolute error instead.
  double abs_floor = 1e-6;
  /// 0 checks every entry; otherwise a seeded sample of this many per parameter.
  std::size_t max_entries_per_param = 0;
  std::uint64_t seed = 0;
};

struct GradcheckEntry {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> params;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences. `loss` must rebuild the graph from the current parameter values
/// on every call.
inline GradcheckReport gradcheck(const std::function<Var<double>()>& loss,
                                 const std::vector<std::pair<std::string, Var<double>>>& params,
                                 const GradcheckOptions& options = {}) {
  for (auto [name, p] : params) p.zero_grad();
  backward(loss());

  GradcheckReport report;
  report.tolerance = options.tolerance;
  Rng rng(options.seed);
  for (auto [name, p] : params) {
    const std::vector<double> analytic = p.has_grad() ? p.grad() : std::vector<double>(p.numel(), 0.0);
    std::vector<std::size_t> entries(p.numel());
    std::iota(entries.begin(), entries.end(), std::size_t{0});
    if (options.max_entries_per_param && entries.size() > options.max_entries_per_param) {
      rng.shuffle(entries);
      entries.resize(options.max_entries_per_param);
    }
    GradcheckEntry entry{name, entries.size(), 0.0, 0.0};
    NoGradGuard no_grad;
    for (std::size_t i : entries) {
      double& v = p.mutable_value()[i];
      const double saved = v;
      v = saved + options.step;
      const double up = loss().item();
      v = saved - options.step;
      const double down = loss().item();
      v = saved;
      const double numeric = (up - down) / (2.0 * options.step);
      const double abs_err = std::abs(numeric - analytic[i]);
      const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), options.abs_floor});
      entry.max_abs_error = std::max(entry.max_abs_error, abs_err);
      entry.max_rel_error = std::max(entry.max_rel_error, abs_err / denom);
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.params.push_back(entry);
  }
  for (auto [name, p] : params) p.zero_grad();
  report.passed = report.max_rel_error < options.tolerance;
  return report;
}

/// Worst entry per parameter group, where the group is the name up to its last '.'.
inline std::vector<GradcheckEntry> group_report(const GradcheckReport& report) {
  std::vector<GradcheckEntry> groups;
  for (const auto& e : report.params) {
    const auto dot = e.name.rfind('.');
    const std::string key = dot == std::string::npos ? e.name : e.name.substr(0, dot);
    auto it = std::find_if(groups.begin(), groups.end(), [&](const GradcheckEntry& g) { return g.name == key; });
    if (it == groups.end()) {
      groups.push_back({key, 0, 0.0, 0.0});
      it = groups.end() - 1;
    }
    it->checked += e.checked;
    it->max_rel_error = std::max(it->max_rel_error, e.max_rel_error);
    it->max_abs_error = std::max(it->max_abs_error, e.max_abs_error);
  }
  return groups;
}

}  // namespace dstgcnt
