// Command-line driver: gen, train, compare, analyze, sweep.
//
// Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lfme/config.hpp"
#include "lfme/experiment.hpp"

namespace {

using namespace lfme;

struct ConfigOptions {
  std::string config_path;
  std::string preset_name;
  std::string output;
  std::size_t jobs = 0;
};

void add_config_options(CLI::App* cmd, ConfigOptions& o) {
  cmd->add_option("-c,--config", o.config_path, "Experiment config (JSON)");
  cmd->add_option("--preset", o.preset_name, "Built-in config: paper-tables, quick");
  cmd->add_option("-o,--out", o.output, "Output directory (overrides config 'output')");
  cmd->add_option("-j,--jobs", o.jobs, "Parallel worker slots");
  cmd->allow_extras();
  cmd->footer("Any config key can be overridden with --key.path=value, e.g. --train.lr=0.01 --methods.0.alpha_half=2");
}

Json load_document(const ConfigOptions& o) {
  if (!o.config_path.empty() && !o.preset_name.empty()) throw ValidationError("use either --config or --preset, not both");
  if (!o.preset_name.empty()) return preset(o.preset_name);
  if (o.config_path.empty()) return Json::object();
  std::ifstream in(o.config_path);
  if (!in) throw ValidationError("cannot read config " + o.config_path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_json_text(ss.str(), o.config_path);
}

void apply_extras(Json& doc, const std::vector<std::string>& extras) {
  for (const auto& e : extras) {
    if (e.rfind("--", 0) != 0 || e.find('=') == std::string::npos) {
      throw ValidationError("unexpected argument '" + e + "' (overrides take the form --key.path=value)");
    }
    apply_override(doc, std::string_view(e).substr(2));
  }
}

ExperimentConfig finish_config(Json doc, const ConfigOptions& o, const std::vector<std::string>& extras) {
  apply_extras(doc, extras);
  if (auto seeds = seeds_from_env()) doc["seeds"] = *seeds;
  if (!o.output.empty()) doc["output"] = o.output;
  if (o.jobs > 0) doc["jobs"] = o.jobs;
  return parse_config(doc);
}

std::vector<double> parse_grid(const std::string& text) {
  std::vector<double> grid;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto comma = text.find(',', start);
    const std::string part = text.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    const auto v = csv::parse_double(part);
    if (!v || *v < 0.0) throw ValidationError("--grid: cannot parse '" + part + "' as a non-negative number");
    grid.push_back(*v);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return grid;
}

const std::vector<std::string> kSummaryMetrics{"ood_acc", "mean_val_acc", "expert_mean_val_acc"};

int run(int argc, char** argv) {
  CLI::App app{"Learning-from-multiple-experts domain generalization lab"};
  app.require_subcommand(1);

  ConfigOptions gen_o, train_o, cmp_o, sweep_o;

  auto* gen = app.add_subcommand("gen", "Write the configured suite to per-domain CSV files");
  add_config_options(gen, gen_o);

  auto* train = app.add_subcommand("train", "Train every (method, seed, held-out domain) job");
  add_config_options(train, train_o);
  std::string method_name;
  std::optional<double> alpha_half, ls_epsilon, beta;
  train->add_option("--method", method_name, "Train only this method, e.g. erm, lfme, erm+");
  train->add_option("--alpha-half", alpha_half, "alpha/2 for --method");
  train->add_option("--ls-epsilon", ls_epsilon, "Label smoothing epsilon for --method");
  train->add_option("--beta", beta, "Hard-weight beta for --method");

  auto* compare = app.add_subcommand("compare", "Train missing jobs and write mean +- std summary tables");
  add_config_options(compare, cmp_o);
  bool no_train = false;
  compare->add_flag("--no-train", no_train, "Only summarize existing results");

  auto* sweep = app.add_subcommand("sweep", "LFME over a grid of alpha/2 values");
  add_config_options(sweep, sweep_o);
  std::string grid_text = "0,0.01,0.1,1,10,100,1000";
  sweep->add_option("--grid", grid_text, "Comma-separated alpha/2 values");

  auto* analyze = app.add_subcommand("analyze", "Histograms and traces from finished runs");
  std::string analyze_dir;
  std::size_t bins = 20;
  analyze->add_option("dir", analyze_dir, "Experiment output directory or a single run directory")->required();
  analyze->add_option("--bins", bins, "Histogram bins");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  if (gen->parsed()) {
    Json doc = load_document(gen_o);
    if (!doc.contains("methods")) doc["methods"] = Json::array({"ERM"});  // unused by gen
    const auto cfg = finish_config(doc, gen_o, gen->remaining());
    const Suite suite = load_suite(cfg);
    const auto dir = std::filesystem::path(cfg.output) / "suite";
    const auto files = write_suite_files(suite, dir, to_json(cfg)["suite"]);
    std::fprintf(stderr, "wrote %zu domain files to %s\n", files.size(), dir.string().c_str());
    return 0;
  }
  if (train->parsed()) {
    Json doc = load_document(train_o);
    if (!method_name.empty()) {
      Json m{{"kind", method_name}};
      if (alpha_half) m["alpha_half"] = *alpha_half;
      if (ls_epsilon) m["ls_epsilon"] = *ls_epsilon;
      if (beta) m["hard_weight_beta"] = *beta;
      doc["methods"] = Json::array({m});
    } else if (alpha_half || ls_epsilon || beta) {
      throw ValidationError("--alpha-half, --ls-epsilon and --beta need --method");
    }
    const auto cfg = finish_config(doc, train_o, train->remaining());
    run_experiment(cfg);
    return 0;
  }
  if (compare->parsed()) {
    const auto cfg = finish_config(load_document(cmp_o), cmp_o, compare->remaining());
    const Suite suite = load_suite(cfg);
    if (!no_train) {
      run_experiment(cfg, RunOptions{.skip_existing = true});
    } else {
      std::filesystem::create_directories(cfg.output);
      merge_metrics(cfg.output, enumerate_jobs(cfg, suite), suite);
    }
    const auto tables = summarize_experiment(cfg, suite, kSummaryMetrics);
    write_summaries(cfg, tables);
    for (const auto& t : tables) {
      if (!t.gaps.empty()) std::fprintf(stderr, "%s: %zu missing runs\n", t.metric.c_str(), t.gaps.size());
    }
    return 0;
  }
  if (sweep->parsed()) {
    Json doc = load_document(sweep_o);
    if (!doc.contains("methods")) doc["methods"] = Json::array({Json{{"kind", "LFME"}}});
    const auto grid = parse_grid(grid_text);
    const auto cfg = sweep_config(finish_config(doc, sweep_o, sweep->remaining()), grid);
    run_experiment(cfg, RunOptions{.skip_existing = true});
    const Suite suite = load_suite(cfg);
    const auto tables = summarize_experiment(cfg, suite, std::vector<std::string>{"ood_acc"});
    write_summaries(cfg, tables, "sweep");
    return 0;
  }
  if (analyze->parsed()) {
    const auto rep = analyze_runs(analyze_dir, bins);
    for (const auto& n : rep.notices) std::fprintf(stderr, "notice: %s\n", n.c_str());
    std::fprintf(stderr, "analyzed %zu runs, wrote %zu files\n", rep.runs, rep.files.size());
    return 0;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const lfme::ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
