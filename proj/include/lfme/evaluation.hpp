#pragma once

// Leave-one-domain-out protocol, alpha sweeps, and the paired
// hard-/easy-sample comparison of two runs on the same probe batch.

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lfme/analysis.hpp"
#include "lfme/domains.hpp"
#include "lfme/method.hpp"
#include "lfme/train.hpp"

namespace lfme {

/// Mean classification ratio over the listed rows; rows whose probabilities
/// are all equal carry no ranking information and are skipped.
inline std::optional<double> mean_classification_ratio(const Tensor& probs, std::span<const int> labels,
                                                       std::span<const std::size_t> rows) {
  double total = 0.0;
  std::size_t n = 0;
  for (auto r : rows) {
    auto p = probs.row_span(r);
    const auto [lo, hi] = std::minmax_element(p.begin(), p.end());
    if (*hi == *lo) continue;
    total += classification_ratio(p, static_cast<std::size_t>(labels[r]));
    ++n;
  }
  if (n == 0) return std::nullopt;
  return total / static_cast<double>(n);
}

struct RatioPoint {
  std::uint64_t step = 0;
  double base_hard = 0.0;
  double guided_hard = 0.0;
  double base_easy = 0.0;
  double guided_easy = 0.0;
};

/// Classification-ratio series of two runs on their shared probe batch, with
/// hard/easy rows chosen by the experts of `guided` (the top `fraction` of
/// expert losses at each evaluation step).
inline std::vector<RatioPoint> hard_sample_ratio_series(const RunResult& base, const RunResult& guided,
                                                        double fraction = 1.0 / 3.0) {
  if (base.probe.labels != guided.probe.labels || base.probes.size() != guided.probes.size()) {
    throw ValidationError("hard_sample_ratio_series: runs do not share a probe batch and schedule");
  }
  std::vector<RatioPoint> out;
  const auto& labels = guided.probe.labels;
  for (std::size_t i = 0; i < guided.probes.size(); ++i) {
    const auto& g = guided.probes[i];
    const auto& b = base.probes[i];
    if (g.expert_losses.empty()) throw ValidationError("hard_sample_ratio_series: guided run has no experts");
    const auto [hard, easy] = split_hard_easy(g.expert_losses, fraction);
    RatioPoint pt;
    pt.step = g.step;
    pt.base_hard = mean_classification_ratio(b.probs, labels, hard).value_or(NAN);
    pt.guided_hard = mean_classification_ratio(g.probs, labels, hard).value_or(NAN);
    pt.base_easy = mean_classification_ratio(b.probs, labels, easy).value_or(NAN);
    pt.guided_easy = mean_classification_ratio(g.probs, labels, easy).value_or(NAN);
    out.push_back(pt);
  }
  return out;
}

/// Summary of one method on one held-out domain, at the checkpoint chosen by
/// training-domain validation.
struct MethodRow {
  MethodSpec method;
  double ood_acc = 0.0;
  std::vector<double> in_domain_val_acc;  // per source, in source order
  double mean_in_domain = 0.0;
  std::optional<double> expert_in_domain;  // experts on their own domains
  double val_entropy = 0.0;
  std::optional<double> logit_sum;
};

struct EvalReport {
  int held_out_domain = -1;
  std::string held_out_name;
  std::vector<std::string> source_names;
  std::vector<MethodRow> rows;
  std::vector<RunResult> runs;  // parallel to rows
  // ERM against the first LFME run with alpha > 0, when both were requested.
  std::vector<RatioPoint> ratio_series;
};

inline MethodRow summarize_run(const RunResult& run) {
  MethodRow row;
  row.method = run.method;
  const auto& ev = run.selected_eval();
  row.ood_acc = ev.get("ood_acc");
  for (const auto& name : run.source_names) row.in_domain_val_acc.push_back(ev.get("val_acc/" + name));
  row.mean_in_domain = ev.get("mean_val_acc");
  row.expert_in_domain = ev.find("expert_mean_val_acc");
  row.val_entropy = ev.get("val_entropy");
  row.logit_sum = ev.find("val_logit_sum");
  return row;
}

/// Trains every method with every domain of `suite` held out in turn (or only
/// the listed ones) and reports the selected checkpoints.
inline std::vector<EvalReport> evaluate_leave_one_out(const Suite& suite, const TrainConfig& config,
                                                      std::span<const MethodSpec> methods,
                                                      std::span<const std::size_t> held_out = {}) {
  if (suite.size() < 3) throw ValidationError("leave-one-out needs at least 2 remaining source domains");
  std::vector<std::size_t> targets(held_out.begin(), held_out.end());
  if (targets.empty())
    for (std::size_t i = 0; i < suite.size(); ++i) targets.push_back(i);
  std::vector<EvalReport> reports;
  for (auto h : targets) {
    const LeaveOneOut split = split_leave_one_out(suite, h);
    EvalReport rep;
    rep.held_out_domain = split.held_out.domain_id;
    rep.held_out_name = split.held_out.name;
    for (const auto& s : split.sources) rep.source_names.push_back(s.name);
    for (const auto& m : methods) {
      rep.runs.push_back(run_method(m, config, split.sources, split.held_out));
      rep.rows.push_back(summarize_run(rep.runs.back()));
    }
    const RunResult* erm = nullptr;
    const RunResult* lfme = nullptr;
    for (const auto& r : rep.runs) {
      if (!erm && r.method.kind == MethodKind::Erm) erm = &r;
      if (!lfme && r.method.kind == MethodKind::Lfme && r.method.alpha_half > 0) lfme = &r;
    }
    if (erm && lfme) rep.ratio_series = hard_sample_ratio_series(*erm, *lfme);
    reports.push_back(std::move(rep));
  }
  return reports;
}

/// OOD accuracy of LFME per alpha_half value and held-out domain.
struct SweepTable {
  std::vector<double> grid;
  std::vector<std::string> held_out_names;
  std::vector<std::vector<double>> ood;  // [grid][held-out]

  double average(std::size_t g) const {
    double s = 0.0;
    for (double v : ood[g]) s += v;
    return ood[g].empty() ? 0.0 : s / static_cast<double>(ood[g].size());
  }
};

inline std::vector<double> default_alpha_grid() { return {0.0, 0.01, 0.1, 1.0, 10.0, 100.0, 1000.0}; }

inline SweepTable sweep_alpha(const Suite& suite, const TrainConfig& config, std::span<const double> grid,
                              std::span<const std::size_t> held_out = {}) {
  SweepTable table;
  table.grid.assign(grid.begin(), grid.end());
  for (double a : grid) {
    const MethodSpec spec{.kind = MethodKind::Lfme, .alpha_half = a};
    const auto reports = evaluate_leave_one_out(suite, config, std::span(&spec, 1), held_out);
    std::vector<double> row;
    if (table.held_out_names.empty())
      for (const auto& r : reports) table.held_out_names.push_back(r.held_out_name);
    for (const auto& r : reports) row.push_back(r.rows.front().ood_acc);
    table.ood.push_back(std::move(row));
  }
  return table;
}

}  // namespace lfme
