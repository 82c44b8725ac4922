#pragma once

// Config-driven experiment driver: one job per (method, seed, held-out
// domain), executed by a fixed pool of worker threads. Every job writes into
// a private temporary directory that is renamed into place on success.

#include <atomic>
#include <chrono>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "lfme/config.hpp"
#include "lfme/domains.hpp"
#include "lfme/evaluation.hpp"
#include "lfme/report.hpp"
#include "lfme/train.hpp"

namespace lfme {

namespace fs = std::filesystem;

inline Suite load_suite(const ExperimentConfig& cfg) {
  if (const auto* s = std::get_if<SuiteSpec>(&cfg.suite)) return generate_suite(*s);
  const auto& c = std::get<CsvSuiteSource>(cfg.suite);
  return load_csv_suite(c.path, c.domain_column, c.label_column, c.num_classes, c.split_seed, c.standardize);
}

struct Job {
  MethodSpec method;
  TrainConfig train;
  std::size_t held_out = 0;  // index into the suite

  std::uint64_t seed() const { return train.seed; }
};

/// Jobs in method, seed, held-out order.
inline std::vector<Job> enumerate_jobs(const ExperimentConfig& cfg, const Suite& suite) {
  std::vector<std::size_t> held = cfg.held_out;
  if (held.empty())
    for (std::size_t i = 0; i < suite.size(); ++i) held.push_back(i);
  for (auto h : held) {
    if (h >= suite.size()) {
      throw ValidationError("held_out: index " + std::to_string(h) + " out of range for " +
                            std::to_string(suite.size()) + " domains");
    }
  }
  if (suite.size() < 3) throw ValidationError("suite: leave-one-out needs at least 3 domains");
  std::vector<Job> jobs;
  for (const auto& m : cfg.methods)
    for (auto s : cfg.seeds)
      for (auto h : held) jobs.push_back({m.spec, cfg.train_for(m, s), h});
  return jobs;
}

inline fs::path job_dir(const fs::path& root, const Job& job, const Suite& suite) {
  return root / "runs" / job.method.label() / ("seed" + std::to_string(job.seed())) /
         ("heldout" + std::to_string(suite[job.held_out].domain_id));
}

namespace detail {

inline void write_file(const fs::path& path, const std::function<void(std::ostream&)>& fn) {
  auto out = open_for_write(path);
  fn(out);
  out.flush();
  if (!out) throw IoError("write failed: " + path.string());
}

inline void save_models(const fs::path& dir, const RunResult& run) {
  const auto step = run.selected_eval().step;
  const auto seed = run.config.seed;
  if (run.target) save_checkpoint({"target", step, seed, *run.target}, dir / "target.ckpt");
  if (run.final_target) {
    save_checkpoint({"target_final", run.evals.back().step, seed, *run.final_target}, dir / "target_final.ckpt");
  }
  for (std::size_t i = 0; i < run.experts.size(); ++i) {
    save_checkpoint({"expert" + std::to_string(i), step, seed, run.experts[i]},
                    dir / ("expert" + std::to_string(i) + ".ckpt"));
  }
  if (run.weighting) save_checkpoint({"weighting", step, seed, *run.weighting}, dir / "weighting.ckpt");
}

inline Json run_summary_json(const RunResult& run) {
  Json j;
  j["method"] = run.method.label();
  j["kind"] = std::string(to_string(run.method.kind));
  j["alpha_half"] = run.method.alpha_half;
  j["seed"] = run.config.seed;
  j["held_out_domain"] = run.held_out_domain;
  j["held_out_name"] = run.held_out_name;
  j["sources"] = run.source_names;
  j["steps"] = run.config.steps;
  j["eval_every"] = run.config.eval_every;
  j["selected_step"] = run.selected_eval().step;
  j["train"] = config_detail::train_to_json(run.config);
  return j;
}

}  // namespace detail

/// Writes every artifact of one run into `dir`.
inline void write_run_artifacts(const fs::path& dir, const RunResult& run, ProbeOutput probe) {
  fs::create_directories(dir);
  const auto rows = metrics_rows(run);
  detail::write_file(dir / "metrics.csv", [&](std::ostream& o) { write_metrics_csv(o, rows); });
  if (run.target || run.final_target || !run.loss_cla.empty()) {
    detail::write_file(dir / "target_metrics.csv", [&](std::ostream& o) { write_target_metrics_csv(o, run); });
  }
  detail::write_file(dir / "losses.csv", [&](std::ostream& o) { write_losses_csv(o, run); });
  if (!run.rescale.empty()) detail::write_file(dir / "rescale.csv", [&](std::ostream& o) { write_rescale_csv(o, run); });
  if (probe == ProbeOutput::All) detail::write_file(dir / "probe.csv", [&](std::ostream& o) { write_probe_csv(o, run); });
  detail::write_file(dir / "run.json", [&](std::ostream& o) { o << detail::run_summary_json(run).dump(2) << '\n'; });
  detail::save_models(dir, run);
}

/// Trains one job and moves its artifacts into place atomically.
inline RunResult execute_job(const Job& job, const Suite& suite, const fs::path& root, ProbeOutput probe) {
  const auto split = split_leave_one_out(suite, job.held_out);
  RunResult run = run_method(job.method, job.train, split.sources, split.held_out);
  const fs::path final_dir = job_dir(root, job, suite);
  fs::path tmp = final_dir;
  tmp += ".tmp";
  std::error_code ec;
  fs::remove_all(tmp, ec);
  write_run_artifacts(tmp, run, probe);
  fs::remove_all(final_dir, ec);
  fs::rename(tmp, final_dir);
  return run;
}

/// Runs `fn(i)` for i in [0, n) on `workers` threads. The first exception is
/// rethrown after every worker stops; later jobs are skipped once one fails.
inline void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    while (!failed) {
      const std::size_t i = next++;
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        failed = true;
      }
    }
  };
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
  }
  if (error) std::rethrow_exception(error);
}

struct RunOptions {
  bool skip_existing = false;  // keep finished job directories
  bool quiet = false;
};

inline bool job_complete(const fs::path& dir) { return fs::exists(dir / "metrics.csv") && fs::exists(dir / "run.json"); }

/// Concatenates every job's metrics.csv, in job order, into root/metrics.csv.
/// Jobs without results are skipped; the summary step reports them.
inline void merge_metrics(const fs::path& root, std::span<const Job> jobs, const Suite& suite) {
  const fs::path tmp = root / "metrics.csv.tmp";
  {
    auto out = detail::open_for_write(tmp);
    csv::write_record(out, metrics_header());
    for (const auto& job : jobs) {
      const fs::path p = job_dir(root, job, suite) / "metrics.csv";
      if (!fs::exists(p)) continue;
      for (const auto& r : read_metrics_csv(p)) write_metrics_record(out, r);
    }
    out.flush();
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  fs::rename(tmp, root / "metrics.csv");
}

/// Trains every job of `cfg` and writes the merged metrics file.
inline std::vector<Job> run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {}) {
  cfg.validate();
  const Suite suite = load_suite(cfg);
  const auto jobs = enumerate_jobs(cfg, suite);
  const fs::path root(cfg.output);
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec || !fs::is_directory(root)) throw IoError("cannot create output directory " + root.string());
  detail::write_file(root / "config.json", [&](std::ostream& o) { o << to_json(cfg).dump(2) << '\n'; });

  std::mutex log_mutex;
  std::atomic<std::size_t> done{0};
  parallel_for(jobs.size(), cfg.jobs, [&](std::size_t i) {
    const auto& job = jobs[i];
    const auto dir = job_dir(root, job, suite);
    if (opts.skip_existing && job_complete(dir)) {
      ++done;
      return;
    }
    const auto t0 = std::chrono::steady_clock::now();
    const RunResult run = execute_job(job, suite, root, cfg.probe);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!opts.quiet) {
      std::lock_guard lock(log_mutex);
      std::fprintf(stderr, "[%zu/%zu] %s seed=%llu held_out=%s ood_acc=%.4f (%.1fs)\n", ++done, jobs.size(),
                   job.method.label().c_str(), static_cast<unsigned long long>(job.seed()),
                   run.held_out_name.c_str(), run.selected_metric("ood_acc"), secs);
    }
  });
  merge_metrics(root, jobs, suite);
  return jobs;
}

/// Summary tables from root/metrics.csv for every (method, seed, held-out
/// domain) the config asks for.
inline std::vector<SummaryTable> summarize_experiment(const ExperimentConfig& cfg, const Suite& suite,
                                                      std::span<const std::string> metrics) {
  const fs::path root(cfg.output);
  std::vector<MetricsRow> rows;
  if (fs::exists(root / "metrics.csv")) rows = read_metrics_csv(root / "metrics.csv");
  std::vector<int> domains;
  std::map<int, std::string> names;
  std::vector<std::size_t> held = cfg.held_out;
  if (held.empty())
    for (std::size_t i = 0; i < suite.size(); ++i) held.push_back(i);
  for (auto h : held) {
    domains.push_back(suite.at(h).domain_id);
    names[suite[h].domain_id] = suite[h].name;
  }
  std::vector<SummaryTable> tables;
  for (const auto& metric : metrics) {
    // Expert metrics only exist for methods that train experts.
    std::vector<std::string> applicable;
    for (const auto& m : cfg.methods)
      if (metric.rfind("expert", 0) != 0 || uses_experts(m.spec.kind)) applicable.push_back(m.spec.label());
    if (applicable.empty()) continue;
    const auto selected = select_by_validation(rows, metric);
    tables.push_back(summarize_selected(selected, metric, applicable, cfg.seeds, domains, names));
  }
  return tables;
}

inline void write_summaries(const ExperimentConfig& cfg, std::span<const SummaryTable> tables,
                            const std::string& stem = "summary") {
  const fs::path root(cfg.output);
  if (cfg.wants_format("md")) {
    detail::write_file(root / (stem + ".md"), [&](std::ostream& o) {
      for (const auto& t : tables) write_summary_markdown(o, t);
    });
  }
  if (cfg.wants_format("csv")) {
    for (std::size_t i = 0; i < tables.size(); ++i) {
      const std::string name = i == 0 ? stem + ".csv" : stem + "_" + tables[i].metric + ".csv";
      detail::write_file(root / name, [&](std::ostream& o) { write_summary_csv(o, tables[i]); });
    }
  }
}

/// Replaces the method list with LFME at every alpha_half in `grid`.
inline ExperimentConfig sweep_config(ExperimentConfig cfg, std::span<const double> grid) {
  std::optional<TrainConfig> train;
  for (const auto& m : cfg.methods)
    if (m.spec.kind == MethodKind::Lfme) train = m.train;
  cfg.methods.clear();
  for (double a : grid) cfg.methods.push_back({MethodSpec{.kind = MethodKind::Lfme, .alpha_half = a}, train});
  return cfg;
}

/// Writes domain<i>.csv for every domain of the suite plus suite.json.
inline std::vector<fs::path> write_suite_files(const Suite& suite, const fs::path& dir, const Json& source) {
  fs::create_directories(dir);
  std::vector<fs::path> paths;
  for (const auto& ds : suite) {
    const fs::path p = dir / (ds.name + ".csv");
    detail::write_file(p, [&](std::ostream& o) { write_domain_csv(ds, o, true); });
    paths.push_back(p);
  }
  Json meta;
  meta["suite"] = source;
  meta["domains"] = Json::array();
  for (const auto& ds : suite) {
    meta["domains"].push_back({{"domain_id", ds.domain_id},
                               {"name", ds.name},
                               {"rows", ds.labels.size()},
                               {"train_rows", ds.train_idx.size()},
                               {"val_rows", ds.val_idx.size()},
                               {"provenance", ds.provenance}});
  }
  detail::write_file(dir / "suite.json", [&](std::ostream& o) { o << meta.dump(2) << '\n'; });
  return paths;
}

// ---------------------------------------------------------------------------
// Post-hoc analysis of finished runs

struct RunInfo {
  fs::path dir;
  std::string method;
  std::string kind;
  double alpha_half = 0.0;
  std::uint64_t seed = 0;
  int held_out_domain = -1;
  std::uint64_t steps = 0;
  std::uint64_t selected_step = 0;
};

inline RunInfo read_run_info(const fs::path& dir) {
  std::ifstream in(dir / "run.json");
  if (!in) throw IoError("missing run.json in " + dir.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const Json j = parse_json_text(ss.str(), (dir / "run.json").string());
  RunInfo info;
  info.dir = dir;
  try {
    info.method = j.at("method").get<std::string>();
    info.kind = j.at("kind").get<std::string>();
    info.alpha_half = j.at("alpha_half").get<double>();
    info.seed = j.at("seed").get<std::uint64_t>();
    info.held_out_domain = j.at("held_out_domain").get<int>();
    info.steps = j.at("steps").get<std::uint64_t>();
    info.selected_step = j.at("selected_step").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError((dir / "run.json").string() + ": " + e.what());
  }
  return info;
}

/// Run directories under `path`: the directory itself when it holds a run,
/// otherwise every run below it, in sorted order.
inline std::vector<fs::path> find_run_dirs(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("no such directory: " + path.string());
  if (fs::exists(path / "run.json")) return {path};
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(path)) {
    if (e.is_regular_file() && e.path().filename() == "run.json" && e.path().parent_path().extension() != ".tmp") {
      out.push_back(e.path().parent_path());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

struct AnalysisReport {
  std::size_t runs = 0;
  std::vector<std::string> notices;
  std::vector<fs::path> files;
};

/// Fraction of post-warmup points (step > steps/10) with mean F < 0.
inline std::optional<double> negative_f_fraction(std::span<const RescaleMeans> trace, std::uint64_t steps) {
  std::size_t n = 0, neg = 0;
  for (const auto& m : trace) {
    if (m.step * 10 <= steps) continue;
    ++n;
    neg += m.mean_f < 0.0;
  }
  if (n == 0) return std::nullopt;
  return static_cast<double>(neg) / static_cast<double>(n);
}

/// Histograms and traces for every run under `path`, written next to each
/// run in analysis/, plus a cross-run table and paired ERM/LFME
/// classification-ratio traces in `path`/analysis/.
inline AnalysisReport analyze_runs(const fs::path& path, std::size_t bins = 20) {
  AnalysisReport rep;
  const auto dirs = find_run_dirs(path);
  if (dirs.empty()) throw ValidationError("no runs found under " + path.string());
  const fs::path out_root = path / "analysis";
  fs::create_directories(out_root);

  std::vector<RunInfo> infos;
  std::map<fs::path, ProbeTable> probes;
  auto out_table = detail::open_for_write(out_root / "runs.csv");
  csv::write_record(out_table, {"method", "seed", "held_out_domain", "selected_step", "ood_acc", "mean_val_acc",
                                "val_entropy", "val_logit_sum", "final_probe_logit_sum", "f_negative_fraction",
                                "final_mean_abs_f_gap"});
  std::map<std::string, std::vector<double>> entropy_by_method;

  for (const auto& dir : dirs) {
    const RunInfo info = read_run_info(dir);
    infos.push_back(info);
    ++rep.runs;
    const fs::path adir = dir / "analysis";
    fs::create_directories(adir);
    const auto rows = read_metrics_csv(dir / "metrics.csv");
    auto metric_at = [&](std::uint64_t step, const std::string& name) -> std::optional<double> {
      for (const auto& r : rows)
        if (r.step == step && r.metric == name) return r.value;
      return std::nullopt;
    };
    std::uint64_t last_step = 0;
    for (const auto& r : rows) last_step = std::max(last_step, r.step);

    std::optional<double> fneg, gap;
    if (fs::exists(dir / "rescale.csv")) {
      const auto trace = read_rescale_means(dir / "rescale.csv");
      fneg = negative_f_fraction(trace, info.steps);
      if (!trace.empty()) gap = std::abs(trace.back().mean_f - trace.back().mean_f_prime);
      const fs::path p = adir / "f_trace.csv";
      detail::write_file(p, [&](std::ostream& o) {
        csv::write_record(o, {"step", "alpha", "mean_f", "mean_f_prime", "samples"});
        for (const auto& m : trace) {
          csv::write_record(o, {std::to_string(m.step), csv::format_double(m.alpha), csv::format_double(m.mean_f),
                                csv::format_double(m.mean_f_prime), std::to_string(m.count)});
        }
      });
      rep.files.push_back(p);
    } else if (info.kind == "LFME") {
      rep.notices.push_back(dir.string() + ": no rescale trace (alpha_half = 0 records none)");
    }

    if (fs::exists(dir / "probe.csv")) {
      auto table = read_probe_csv(dir / "probe.csv");
      if (!table.records.empty()) {
        const auto& last = table.records.back();
        const fs::path ph = adir / "prob_hist.csv";
        detail::write_file(ph, [&](std::ostream& o) {
          write_histogram_csv(o, make_histogram(last.probs.values(), bins, 0.0, 1.0));
        });
        rep.files.push_back(ph);
        if (last.logits.size() > 0) {
          const fs::path lh = adir / "logit_hist.csv";
          detail::write_file(lh, [&](std::ostream& o) { write_histogram_csv(o, make_histogram(last.logits.values(), bins)); });
          rep.files.push_back(lh);
        }
      }
      probes.emplace(dir, std::move(table));
    } else {
      rep.notices.push_back(dir.string() + ": no probe.csv (probe output disabled); histograms skipped");
    }

    const auto fmt = [](const std::optional<double>& v) { return v ? csv::format_double(*v) : std::string(); };
    const auto entropy = metric_at(info.selected_step, "val_entropy");
    if (entropy) entropy_by_method[info.method].push_back(*entropy);
    csv::write_record(out_table, {info.method, std::to_string(info.seed), std::to_string(info.held_out_domain),
                                  std::to_string(info.selected_step), fmt(metric_at(info.selected_step, "ood_acc")),
                                  fmt(metric_at(info.selected_step, "mean_val_acc")), fmt(entropy),
                                  fmt(metric_at(info.selected_step, "val_logit_sum")),
                                  fmt(metric_at(last_step, "probe_logit_sum")), fmt(fneg), fmt(gap)});
  }
  out_table.flush();
  rep.files.push_back(out_root / "runs.csv");

  detail::write_file(out_root / "entropy.csv", [&](std::ostream& o) {
    csv::write_record(o, {"method", "runs", "mean_val_entropy"});
    for (const auto& [m, v] : entropy_by_method) {
      const auto c = summarize(v);
      csv::write_record(o, {m, std::to_string(c.n), csv::format_double(c.mean)});
    }
  });
  rep.files.push_back(out_root / "entropy.csv");

  // Classification-ratio traces for ERM and LFME runs sharing seed and domain.
  for (const auto& erm : infos) {
    if (erm.kind != "ERM" || !probes.count(erm.dir)) continue;
    for (const auto& lf : infos) {
      if (lf.kind != "LFME" || lf.seed != erm.seed || lf.held_out_domain != erm.held_out_domain) continue;
      if (!probes.count(lf.dir)) continue;
      const auto& a = probes.at(erm.dir);
      const auto& b = probes.at(lf.dir);
      if (a.labels != b.labels || a.records.size() != b.records.size() || b.records.front().expert_losses.empty()) {
        rep.notices.push_back("ratio trace skipped for " + lf.dir.string() + ": probe batches differ");
        continue;
      }
      const fs::path p = out_root / ("ratio_" + lf.method + "_seed" + std::to_string(lf.seed) + "_heldout" +
                                     std::to_string(lf.held_out_domain) + ".csv");
      detail::write_file(p, [&](std::ostream& o) {
        csv::write_record(o, {"step", "erm_hard", "lfme_hard", "erm_easy", "lfme_easy"});
        for (std::size_t i = 0; i < b.records.size(); ++i) {
          const auto [hard, easy] = split_hard_easy(b.records[i].expert_losses);
          const auto r = [&](const ProbeRecord& rec, const std::vector<std::size_t>& idx) {
            const auto v = mean_classification_ratio(rec.probs, b.labels, idx);
            return v ? csv::format_double(*v) : std::string();
          };
          csv::write_record(o, {std::to_string(b.records[i].step), r(a.records[i], hard), r(b.records[i], hard),
                                r(a.records[i], easy), r(b.records[i], easy)});
        }
      });
      rep.files.push_back(p);
    }
  }
  return rep;
}

}  // namespace lfme
