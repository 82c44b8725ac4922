#pragma once

// Long-format metric rows, per-run artifact files, and seed-aggregated
// summary tables.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "lfme/csv.hpp"
#include "lfme/errors.hpp"
#include "lfme/evaluation.hpp"
#include "lfme/train.hpp"

namespace lfme {

struct MetricsRow {
  std::string method;
  std::uint64_t seed = 0;
  int held_out_domain = -1;
  std::uint64_t step = 0;
  std::string metric;
  double value = 0.0;

  bool operator==(const MetricsRow&) const = default;
};

inline const std::vector<std::string>& metrics_header() {
  static const std::vector<std::string> h{"method", "seed", "held_out_domain", "step", "metric", "value"};
  return h;
}

/// One row per metric per evaluation point, in evaluation order.
inline std::vector<MetricsRow> metrics_rows(const RunResult& run) {
  std::vector<MetricsRow> rows;
  const std::string label = run.method.label();
  for (const auto& ev : run.evals) {
    for (const auto& m : ev.metrics) {
      if (!std::isfinite(m.value)) throw NumericError("metric " + m.name + " is not finite");
      rows.push_back({label, run.config.seed, run.held_out_domain, ev.step, m.name, m.value});
    }
  }
  return rows;
}

inline void write_metrics_record(std::ostream& out, const MetricsRow& r) {
  csv::write_record(out, {r.method, std::to_string(r.seed), std::to_string(r.held_out_domain), std::to_string(r.step),
                          r.metric, csv::format_double(r.value)});
}

inline void write_metrics_csv(std::ostream& out, std::span<const MetricsRow> rows) {
  csv::write_record(out, metrics_header());
  for (const auto& r : rows) write_metrics_record(out, r);
}

namespace detail {

inline std::map<std::string, std::size_t> header_index(const std::vector<std::string>& header,
                                                       std::span<const std::string> required,
                                                       const std::string& what) {
  std::map<std::string, std::size_t> idx;
  for (std::size_t i = 0; i < header.size(); ++i) idx[header[i]] = i;
  for (const auto& r : required)
    if (!idx.count(r)) throw FormatError(what + ": missing column '" + r + "'");
  return idx;
}

template <typename T>
T parse_field(const std::string& text, const std::string& what, std::size_t line) {
  if constexpr (std::is_same_v<T, double>) {
    if (auto v = csv::parse_double(text)) return *v;
  } else {
    if (auto v = csv::parse_int(text)) return static_cast<T>(*v);
  }
  throw FormatError(what + ": line " + std::to_string(line) + ": cannot parse '" + text + "'");
}

inline std::ifstream open_for_read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return in;
}

inline std::ofstream open_for_write(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

}  // namespace detail

inline std::vector<MetricsRow> read_metrics_csv(std::istream& in, const std::string& what = "metrics.csv") {
  std::vector<std::string> fields;
  if (!csv::read_record(in, fields)) throw FormatError(what + ": empty file");
  const auto idx = detail::header_index(fields, metrics_header(), what);
  std::vector<MetricsRow> rows;
  std::size_t line = 1;
  while (csv::read_record(in, fields)) {
    ++line;
    if (fields.size() != metrics_header().size()) throw FormatError(what + ": line " + std::to_string(line) + ": bad width");
    MetricsRow r;
    r.method = fields[idx.at("method")];
    r.seed = detail::parse_field<std::uint64_t>(fields[idx.at("seed")], what, line);
    r.held_out_domain = detail::parse_field<int>(fields[idx.at("held_out_domain")], what, line);
    r.step = detail::parse_field<std::uint64_t>(fields[idx.at("step")], what, line);
    r.metric = fields[idx.at("metric")];
    r.value = detail::parse_field<double>(fields[idx.at("value")], what, line);
    rows.push_back(std::move(r));
  }
  return rows;
}

inline std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path) {
  auto in = detail::open_for_read(path);
  return read_metrics_csv(in, path.string());
}

/// Metrics that depend only on the deployed predictor, plus the per-step
/// classification loss. No method column, so runs that must coincide can be
/// compared byte for byte.
inline void write_target_metrics_csv(std::ostream& out, const RunResult& run) {
  csv::write_record(out, {"seed", "held_out_domain", "step", "metric", "value"});
  const std::string seed = std::to_string(run.config.seed), dom = std::to_string(run.held_out_domain);
  for (std::size_t s = 0; s < run.loss_cla.size(); ++s)
    csv::write_record(out, {seed, dom, std::to_string(s + 1), "loss_cla", csv::format_double(run.loss_cla[s])});
  for (const auto& ev : run.evals)
    for (const auto& m : ev.metrics)
      if (m.target) csv::write_record(out, {seed, dom, std::to_string(ev.step), m.name, csv::format_double(m.value)});
}

inline void write_losses_csv(std::ostream& out, const RunResult& run) {
  csv::write_record(out, {"step", "loss_total", "loss_cla"});
  for (std::size_t s = 0; s < run.loss_total.size(); ++s) {
    csv::write_record(out, {std::to_string(s + 1), csv::format_double(run.loss_total[s]),
                            s < run.loss_cla.size() ? csv::format_double(run.loss_cla[s]) : ""});
  }
}

inline void write_rescale_csv(std::ostream& out, const RunResult& run) {
  csv::write_record(out, {"step", "alpha", "row", "f", "f_prime"});
  for (const auto& tr : run.rescale)
    for (const auto& s : tr.samples)
      csv::write_record(out, {std::to_string(tr.step), csv::format_double(tr.alpha), std::to_string(s.row),
                              csv::format_double(s.f), csv::format_double(s.f_prime)});
}

/// Probe outputs at every evaluation step: label, domain, own-domain expert
/// loss (empty without experts), logits z_c (target methods only), q_c.
inline void write_probe_csv(std::ostream& out, const RunResult& run) {
  const std::size_t k = run.probes.empty() ? 0 : run.probes.front().probs.cols();
  const bool logits = !run.probes.empty() && run.probes.front().logits.size() > 0;
  std::vector<std::string> header{"step", "row", "domain", "label", "expert_loss"};
  if (logits)
    for (std::size_t c = 0; c < k; ++c) header.push_back("z" + std::to_string(c));
  for (std::size_t c = 0; c < k; ++c) header.push_back("q" + std::to_string(c));
  csv::write_record(out, header);
  for (const auto& rec : run.probes) {
    for (std::size_t r = 0; r < run.probe.labels.size(); ++r) {
      std::vector<std::string> f{std::to_string(rec.step), std::to_string(r), std::to_string(run.probe.domain_of_row[r]),
                                 std::to_string(run.probe.labels[r]),
                                 rec.expert_losses.empty() ? "" : csv::format_double(rec.expert_losses[r])};
      if (logits)
        for (std::size_t c = 0; c < k; ++c) f.push_back(csv::format_double(rec.logits(r, c)));
      for (std::size_t c = 0; c < k; ++c) f.push_back(csv::format_double(rec.probs(r, c)));
      csv::write_record(out, f);
    }
  }
}

/// Probe outputs read back from probe.csv, grouped by step.
struct ProbeTable {
  std::vector<int> labels;
  std::vector<int> domains;
  std::vector<ProbeRecord> records;
};

inline ProbeTable read_probe_csv(const std::filesystem::path& path) {
  auto in = detail::open_for_read(path);
  const std::string what = path.string();
  std::vector<std::string> h;
  if (!csv::read_record(in, h)) throw FormatError(what + ": empty file");
  const std::string req[] = {"step", "row", "domain", "label", "expert_loss"};
  const auto idx = detail::header_index(h, req, what);
  std::vector<std::size_t> zcols, qcols;
  for (std::size_t i = 0; i < h.size(); ++i) {
    if (h[i].size() > 1 && h[i][0] == 'z') zcols.push_back(i);
    if (h[i].size() > 1 && h[i][0] == 'q') qcols.push_back(i);
  }
  if (qcols.size() < 2) throw FormatError(what + ": fewer than 2 probability columns");
  ProbeTable t;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> f;
  while (csv::read_record(in, f)) rows.push_back(f);
  std::size_t line = 1;
  for (std::size_t i = 0; i < rows.size();) {
    const auto step = detail::parse_field<std::uint64_t>(rows[i][idx.at("step")], what, line + i + 1);
    std::size_t j = i;
    while (j < rows.size() && rows[j][idx.at("step")] == rows[i][idx.at("step")]) ++j;
    const std::size_t n = j - i, k = qcols.size();
    ProbeRecord rec;
    rec.step = step;
    rec.probs = Tensor({n, k});
    if (!zcols.empty()) rec.logits = Tensor({n, zcols.size()});
    const bool first = t.records.empty();
    if (!first && n != t.labels.size()) throw FormatError(what + ": probe size changes between steps");
    for (std::size_t r = 0; r < n; ++r) {
      const auto& row = rows[i + r];
      const std::size_t ln = line + i + r + 1;
      if (row.size() != h.size()) throw FormatError(what + ": line " + std::to_string(ln) + ": bad width");
      if (first) {
        t.labels.push_back(detail::parse_field<int>(row[idx.at("label")], what, ln));
        t.domains.push_back(detail::parse_field<int>(row[idx.at("domain")], what, ln));
      }
      if (!row[idx.at("expert_loss")].empty())
        rec.expert_losses.push_back(detail::parse_field<double>(row[idx.at("expert_loss")], what, ln));
      for (std::size_t c = 0; c < zcols.size(); ++c) rec.logits(r, c) = detail::parse_field<double>(row[zcols[c]], what, ln);
      for (std::size_t c = 0; c < k; ++c) rec.probs(r, c) = detail::parse_field<double>(row[qcols[c]], what, ln);
    }
    t.records.push_back(std::move(rec));
    i = j;
  }
  return t;
}

/// Per-step rescale means read back from rescale.csv.
struct RescaleMeans {
  std::uint64_t step = 0;
  double alpha = 0.0;
  double mean_f = 0.0;
  double mean_f_prime = 0.0;
  std::size_t count = 0;
};

inline std::vector<RescaleMeans> read_rescale_means(const std::filesystem::path& path) {
  auto in = detail::open_for_read(path);
  const std::string what = path.string();
  std::vector<std::string> f;
  if (!csv::read_record(in, f)) throw FormatError(what + ": empty file");
  const std::string req[] = {"step", "alpha", "row", "f", "f_prime"};
  const auto idx = detail::header_index(f, req, what);
  std::vector<RescaleMeans> out;
  std::size_t line = 1;
  while (csv::read_record(in, f)) {
    ++line;
    const auto step = detail::parse_field<std::uint64_t>(f[idx.at("step")], what, line);
    if (out.empty() || out.back().step != step) {
      out.push_back({step, detail::parse_field<double>(f[idx.at("alpha")], what, line), 0.0, 0.0, 0});
    }
    auto& m = out.back();
    m.mean_f += detail::parse_field<double>(f[idx.at("f")], what, line);
    m.mean_f_prime += detail::parse_field<double>(f[idx.at("f_prime")], what, line);
    ++m.count;
  }
  for (auto& m : out) {
    m.mean_f /= static_cast<double>(m.count);
    m.mean_f_prime /= static_cast<double>(m.count);
  }
  return out;
}

/// Equal-width histogram over [lo, hi]; the last bin is closed.
struct Histogram {
  double lo = 0.0;
  double hi = 1.0;
  std::vector<std::size_t> counts;

  std::size_t total() const {
    std::size_t n = 0;
    for (auto c : counts) n += c;
    return n;
  }
};

inline Histogram make_histogram(std::span<const double> values, std::size_t bins, std::optional<double> lo = {},
                                std::optional<double> hi = {}) {
  if (bins == 0) throw ValidationError("histogram: need at least one bin");
  Histogram h;
  h.counts.assign(bins, 0);
  if (values.empty()) return h;
  const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
  h.lo = lo.value_or(*mn);
  h.hi = hi.value_or(*mx);
  if (!(h.hi > h.lo)) h.hi = h.lo + 1.0;
  const double width = (h.hi - h.lo) / static_cast<double>(bins);
  for (double v : values) {
    auto b = static_cast<std::ptrdiff_t>(std::floor((v - h.lo) / width));
    b = std::clamp<std::ptrdiff_t>(b, 0, static_cast<std::ptrdiff_t>(bins) - 1);
    ++h.counts[static_cast<std::size_t>(b)];
  }
  return h;
}

inline void write_histogram_csv(std::ostream& out, const Histogram& h) {
  csv::write_record(out, {"bin_lo", "bin_hi", "count"});
  const double width = (h.hi - h.lo) / static_cast<double>(h.counts.size());
  for (std::size_t b = 0; b < h.counts.size(); ++b) {
    csv::write_record(out, {csv::format_double(h.lo + width * static_cast<double>(b)),
                            csv::format_double(b + 1 == h.counts.size() ? h.hi : h.lo + width * static_cast<double>(b + 1)),
                            std::to_string(h.counts[b])});
  }
}

// ---------------------------------------------------------------------------
// Seed-aggregated summaries

struct SelectedValue {
  std::string method;
  std::uint64_t seed = 0;
  int held_out_domain = -1;
  std::uint64_t step = 0;
  double value = 0.0;
};

/// Per (method, seed, held-out domain): `metric` at the evaluation step with
/// the highest mean_val_acc (ties to the earliest step).
inline std::vector<SelectedValue> select_by_validation(std::span<const MetricsRow> rows, const std::string& metric) {
  using Key = std::tuple<std::string, std::uint64_t, int>;
  std::map<Key, std::map<std::uint64_t, std::pair<std::optional<double>, std::optional<double>>>> by_job;
  for (const auto& r : rows) {
    auto& cell = by_job[{r.method, r.seed, r.held_out_domain}][r.step];
    if (r.metric == "mean_val_acc") cell.first = r.value;
    if (r.metric == metric) cell.second = r.value;
  }
  std::vector<SelectedValue> out;
  for (const auto& [key, steps] : by_job) {
    std::optional<std::uint64_t> best_step;
    double best = -1.0;
    for (const auto& [step, cell] : steps) {
      if (cell.first && *cell.first > best) {
        best = *cell.first;
        best_step = step;
      }
    }
    if (!best_step) continue;
    const auto& v = steps.at(*best_step).second;
    if (!v) continue;
    out.push_back({std::get<0>(key), std::get<1>(key), std::get<2>(key), *best_step, *v});
  }
  return out;
}

struct SummaryCell {
  double mean = 0.0;
  double std = 0.0;  // sample std; 0 for a single seed
  std::size_t n = 0;
};

inline SummaryCell summarize(std::span<const double> values) {
  SummaryCell c;
  c.n = values.size();
  if (values.empty()) return c;
  for (double v : values) c.mean += v;
  c.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - c.mean) * (v - c.mean);
    c.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return c;
}

struct SummaryTable {
  std::string metric;
  std::vector<std::string> methods;  // row order
  std::vector<int> domains;          // ascending held-out ids
  std::vector<std::string> domain_names;
  std::map<std::pair<std::string, int>, SummaryCell> cells;
  std::map<std::string, std::optional<double>> average;  // mean of per-domain means; empty if a column is missing
  std::vector<std::string> gaps;                         // "method seed=.. held_out=.." for every missing run
};

/// Mean +- std over seeds per (method, held-out domain) plus an average
/// column. `expected` lists the runs that should exist; every absent one is
/// reported as a gap and left out of the statistics.
inline SummaryTable summarize_selected(std::span<const SelectedValue> values, const std::string& metric,
                                      std::span<const std::string> methods, std::span<const std::uint64_t> seeds,
                                      std::span<const int> domains,
                                      const std::map<int, std::string>& domain_names = {}) {
  SummaryTable t;
  t.metric = metric;
  t.methods.assign(methods.begin(), methods.end());
  t.domains.assign(domains.begin(), domains.end());
  std::sort(t.domains.begin(), t.domains.end());
  t.domains.erase(std::unique(t.domains.begin(), t.domains.end()), t.domains.end());
  for (int d : t.domains)
    t.domain_names.push_back(domain_names.count(d) ? domain_names.at(d) : "domain" + std::to_string(d));
  std::map<std::tuple<std::string, std::uint64_t, int>, double> found;
  for (const auto& v : values) found[{v.method, v.seed, v.held_out_domain}] = v.value;
  for (const auto& m : t.methods) {
    bool complete = true;
    double avg = 0.0;
    for (int d : t.domains) {
      std::vector<double> vals;
      for (auto s : seeds) {
        auto it = found.find({m, s, d});
        if (it == found.end()) {
          t.gaps.push_back(m + " seed=" + std::to_string(s) + " held_out=" + std::to_string(d));
          continue;
        }
        vals.push_back(it->second);
      }
      if (vals.empty()) {
        complete = false;
        continue;
      }
      const auto cell = summarize(vals);
      t.cells[{m, d}] = cell;
      avg += cell.mean;
    }
    t.average[m] = complete && !t.domains.empty() ? std::optional(avg / static_cast<double>(t.domains.size()))
                                                  : std::nullopt;
  }
  return t;
}

inline std::string format_percent(double v) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(1);
  os << 100.0 * v;
  return os.str();
}

inline void write_summary_csv(std::ostream& out, const SummaryTable& t) {
  std::vector<std::string> header{"method"};
  for (std::size_t i = 0; i < t.domains.size(); ++i) {
    header.push_back(t.domain_names[i] + "_mean");
    header.push_back(t.domain_names[i] + "_std");
    header.push_back(t.domain_names[i] + "_n");
  }
  header.push_back("avg");
  csv::write_record(out, header);
  for (const auto& m : t.methods) {
    std::vector<std::string> f{m};
    for (int d : t.domains) {
      auto it = t.cells.find({m, d});
      if (it == t.cells.end()) {
        f.insert(f.end(), {"", "", "0"});
      } else {
        f.push_back(csv::format_double(it->second.mean));
        f.push_back(csv::format_double(it->second.std));
        f.push_back(std::to_string(it->second.n));
      }
    }
    const auto& avg = t.average.at(m);
    f.push_back(avg ? csv::format_double(*avg) : "");
    csv::write_record(out, f);
  }
}

/// Markdown table in percent: one column per held-out domain, then Avg.
inline void write_summary_markdown(std::ostream& out, const SummaryTable& t) {
  out << "### " << t.metric << " (selected by training-domain validation, mean ± std over seeds, %)\n\n";
  out << "| Method |";
  for (const auto& n : t.domain_names) out << ' ' << n << " |";
  out << " Avg |\n|---|";
  for (std::size_t i = 0; i < t.domains.size(); ++i) out << "---|";
  out << "---|\n";
  for (const auto& m : t.methods) {
    out << "| " << m << " |";
    for (int d : t.domains) {
      auto it = t.cells.find({m, d});
      if (it == t.cells.end()) {
        out << " missing |";
      } else {
        out << ' ' << format_percent(it->second.mean) << " ± " << format_percent(it->second.std) << " |";
      }
    }
    const auto& avg = t.average.at(m);
    out << ' ' << (avg ? format_percent(*avg) : std::string("n/a")) << " |\n";
  }
  if (!t.gaps.empty()) {
    out << "\nMissing runs (" << t.gaps.size() << "):\n\n";
    for (const auto& g : t.gaps) out << "- " << g << '\n';
  }
  out << '\n';
}

}  // namespace lfme
