// Acceptance run: one PASS/FAIL/WARN line per criterion at its stated
// tolerance and runtime budget. Exits nonzero on a hard failure unless
// --report-only is given.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lfme/analysis.hpp"
#include "lfme/evaluation.hpp"
#include "lfme/experiment.hpp"
#include "lfme/losses.hpp"
#include "lfme/mlp.hpp"
#include "lfme/report.hpp"
#include "test_util.hpp"

namespace {

using namespace lfme;
using test::grad_check;
using test::random_one_hot;
using test::random_simplex;
using test::uniform_tensor;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

enum class Status { Pass, Fail, Warn };

struct Outcome {
  int id = 0;
  std::string name;
  Status status = Status::Fail;
  std::string detail;
  bool errored = false;  // threw before the criterion could be measured
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? NAN : s / static_cast<double>(v.size());
}

// ---------------------------------------------------------------------------
// Criteria 1 and 2: autodiff against closed forms and central differences.

Outcome gradient_identity() {
  const auto t0 = Clock::now();
  Rng rng(4);
  std::uniform_int_distribution<std::size_t> kdist(2, 10);
  std::uniform_real_distribution<double> adist(0.01, 10.0);
  double worst = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t k = kdist(rng);
    const double alpha = adist(rng);
    Parameter z(uniform_tensor({1, k}, rng, -5.0, 5.0));
    const Tensor y = random_one_hot(1, k, rng);
    const Tensor qe = random_simplex(1, k, rng);
    Tape tp;
    tp.backward(loss_lfme(tp.leaf(z), y, qe, alpha / 2.0));
    const Tensor q = kernels::softmax(z.value);
    for (std::size_t c = 0; c < k; ++c) worst = std::max(worst, std::abs(z.grad[c] - (q[c] - y[c] + alpha * (z.value[c] - qe[c]))));
  }
  const double secs = seconds_since(t0);
  const bool ok = worst < 1e-10 && secs < 5.0;
  return {1, "gradient identity", ok ? Status::Pass : Status::Fail,
          fmt("max abs error %.3e over 1000 draws (< 1e-10); %.2f s (< 5 s)", worst, secs)};
}

Var reduce(Var v, const Tensor& c) { return sum(sq_dist_rows(v, v.tape->constant(c))); }

Outcome finite_differences() {
  const auto t0 = Clock::now();
  Rng rng(20240611);
  std::uniform_int_distribution<std::size_t> dim(2, 5);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::map<std::string, double> worst;
  auto record = [&](const std::string& op, double e) { worst[op] = std::max(worst[op], e); };
  const int instances = 200;

  for (int t = 0; t < instances; ++t) {
    const std::size_t m = dim(rng), k = dim(rng), n = dim(rng);
    Parameter a(uniform_tensor({m, k}, rng)), b(uniform_tensor({k, n}, rng));
    const Tensor cmn = uniform_tensor({m, n}, rng);
    record("matmul", grad_check({&a, &b}, [&](Tape& tp) { return reduce(matmul(tp.leaf(a), tp.leaf(b)), cmn); }));

    Parameter x(uniform_tensor({m, n}, rng)), bias(uniform_tensor({n}, rng));
    record("add_bias", grad_check({&x, &bias}, [&](Tape& tp) { return reduce(add_bias(tp.leaf(x), tp.leaf(bias)), cmn); }));

    Tensor rv = uniform_tensor({m, n}, rng);
    for (auto& e : rv.values()) e = e < 0 ? e - 0.01 : e + 0.01;  // keep the kink outside the stencil
    Parameter r(rv);
    record("relu", grad_check({&r}, [&](Tape& tp) { return reduce(relu(tp.leaf(r)), cmn); }));

    Parameter p(uniform_tensor({m, n}, rng)), q(uniform_tensor({m, n}, rng));
    const double s = -3.0 + 6.0 * unit(rng);
    record("add/scale", grad_check({&p, &q}, [&](Tape& tp) { return reduce(scale(add(tp.leaf(p), tp.leaf(q)), s), cmn); }));

    Parameter v(uniform_tensor({n}, rng));
    const Tensor w = uniform_tensor({n}, rng, 0.1, 2.0);
    record("sum/mean/weighted_mean", grad_check({&v}, [&](Tape& tp) {
             Var xv = tp.leaf(v);
             return add(add(scale(sum(xv), 0.3), mean(xv)),
                        add(weighted_mean(xv, w.values()), sq_dist_rows(xv, tp.constant(Tensor({n})))));
           }));

    Parameter z(uniform_tensor({m, k}, rng, -3.0, 3.0));
    const Tensor cmk = uniform_tensor({m, k}, rng, 0.0, 1.0);
    record("softmax", grad_check({&z}, [&](Tape& tp) { return reduce(softmax(tp.leaf(z)), cmk); }));

    const Tensor y = random_one_hot(m, k, rng);
    const Tensor soft = random_simplex(m, k, rng);
    record("cross_entropy", grad_check({&z}, [&](Tape& tp) {
             Var qz = softmax(tp.leaf(z));
             return add(cross_entropy(qz, y), soft_cross_entropy(qz, soft));
           }));

    Parameter u(uniform_tensor({m, k}, rng));
    record("sq_dist", grad_check({&z, &u}, [&](Tape& tp) { return mse(tp.leaf(z), tp.leaf(u)); }));

    const Tensor ze = uniform_tensor({m, k}, rng, -3.0, 3.0);
    const double al = 0.01 + 4.99 * unit(rng);
    std::vector<double> rw(m);
    for (auto& e : rw) e = 0.1 + 2.9 * unit(rng);
    record("method losses", grad_check({&z}, [&](Tape& tp) {
             Var zz = tp.leaf(z);
             Var total = add(add(loss_lfme(zz, y, soft, al), loss_erm_plus(zz, y, al)),
                             add(loss_ls(zz, y, 0.2), loss_expert(zz, y)));
             total = add(total, add(weighted_mean(erm_plus_rows(zz, y, al), rw), loss_lfme_guid(softmax(zz), soft)));
             for (auto kind : {MethodKind::KdLogitLogit, MethodKind::KdProbLogit, MethodKind::KdProbProb,
                               MethodKind::KdCrossEntropy}) {
               total = add(total, loss_kd_variant(kind, zz, y, ze, soft, 0.4));
             }
             return total;
           }));
  }

  // Three-layer ReLU network with the LFME objective; draws with a
  // pre-activation inside the stencil of the kink are redrawn.
  const std::vector<std::size_t> dims{4, 6, 5, 3};
  int checked = 0;
  for (std::uint64_t seed = 0; checked < instances; ++seed) {
    MlpModel model = init_mlp(dims, seed);
    for (auto* prm : model.parameters())
      for (auto& e : prm->value.values()) e += -0.2 + 0.4 * unit(rng);
    const Tensor x = uniform_tensor({3, dims[0]}, rng, -2.0, 2.0);
    bool near_kink = false;
    Tensor h = x;
    for (std::size_t l = 0; l + 1 < model.num_layers(); ++l) {
      const auto& w = model.layers()[l].weight.value;
      const auto& b = model.layers()[l].bias.value;
      Tensor pre({h.rows(), w.cols()});
      kernels::matmul(h.data(), w.data(), pre.data(), h.rows(), w.shape()[0], w.cols());
      for (std::size_t r = 0; r < pre.rows(); ++r)
        for (std::size_t j = 0; j < pre.cols(); ++j) {
          pre(r, j) += b[j];
          near_kink = near_kink || std::abs(pre(r, j)) < 1e-3;
          pre(r, j) = std::max(pre(r, j), 0.0);
        }
      h = pre;
    }
    if (near_kink) continue;
    const Tensor y = random_one_hot(3, dims.back(), rng);
    const Tensor qe = random_simplex(3, dims.back(), rng);
    record("mlp+lfme", grad_check(model.parameters(),
                                  [&](Tape& tp) { return loss_lfme(model.forward(tp, tp.constant(x)), y, qe, 0.7); }));
    ++checked;
  }

  const double secs = seconds_since(t0);
  double overall = 0.0;
  std::string worst_op;
  for (const auto& [op, e] : worst)
    if (e >= overall) {
      overall = e;
      worst_op = op;
    }
  const bool ok = overall < 1e-4 && secs < 30.0;
  return {2, "finite differences", ok ? Status::Pass : Status::Fail,
          fmt("%zu op families x %d instances, worst rel. error %.2e (%s) (< 1e-4); %.1f s (< 30 s)", worst.size(),
              instances, overall, worst_op.c_str(), secs)};
}

// ---------------------------------------------------------------------------
// Training runs shared by the trend criteria.

struct Runs {
  std::vector<RunResult> by_seed;
  double seconds = 0.0;
};

class Lab {
 public:
  Lab(std::size_t seeds, std::uint64_t steps) : seeds_(seeds) {
    suite_ = generate_suite(SuiteSpec{});
    split_ = split_leave_one_out(suite_, suite_.size() - 1);
    config_.steps = steps;
  }

  const TrainConfig& config() const { return config_; }
  const LeaveOneOut& split() const { return split_; }
  std::size_t seeds() const { return seeds_; }

  const Runs& runs(const MethodSpec& m) {
    const std::string key = m.label();
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    Runs r;
    for (std::size_t s = 0; s < seeds_; ++s) {
      TrainConfig c = config_;
      c.seed = s;
      const auto t0 = Clock::now();
      r.by_seed.push_back(run_method(m, c, split_.sources, split_.held_out));
      const double secs = seconds_since(t0);
      r.seconds += secs;
      std::fprintf(stderr, "  %s seed=%zu ood_acc=%.4f (%.1f s)\n", key.c_str(), s,
                   r.by_seed.back().selected_metric("ood_acc"), secs);
    }
    return cache_.emplace(key, std::move(r)).first->second;
  }

  std::vector<double> selected(const MethodSpec& m, const std::string& metric) {
    std::vector<double> out;
    for (const auto& r : runs(m).by_seed) out.push_back(r.selected_metric(metric));
    return out;
  }

 private:
  std::size_t seeds_;
  Suite suite_;
  LeaveOneOut split_;
  TrainConfig config_;
  std::map<std::string, Runs> cache_;
};

const MethodSpec kErm{.kind = MethodKind::Erm};
const MethodSpec kLfme{.kind = MethodKind::Lfme, .alpha_half = 1.0};

Outcome reductions(const Lab& lab) {
  const auto t0 = Clock::now();
  TrainConfig c = lab.config();
  c.steps = std::min<std::uint64_t>(c.steps, 2000);
  const MethodSpec reduced[] = {{.kind = MethodKind::Lfme, .alpha_half = 0.0},
                                {.kind = MethodKind::ErmPlus, .alpha_half = 0.0},
                                {.kind = MethodKind::LabelSmoothing, .ls_epsilon = 0.0}};
  auto target_file = [&](const MethodSpec& m) {
    std::ostringstream os;
    write_target_metrics_csv(os, run_method(m, c, lab.split().sources, lab.split().held_out));
    return os.str();
  };
  int identical = 0, total = 0;
  for (std::uint64_t s = 0; s < 3; ++s) {
    c.seed = s;
    const std::string erm = target_file(kErm);
    for (const auto& m : reduced) {
      ++total;
      identical += target_file(m) == erm;
    }
  }
  const double secs = seconds_since(t0);
  const bool ok = identical == total && secs < 120.0;
  return {3, "reduction equivalences", ok ? Status::Pass : Status::Fail,
          fmt("%d/%d target metric files byte-identical to ERM (3 seeds, %llu steps); %.1f s (< 120 s)", identical,
              total, static_cast<unsigned long long>(c.steps), secs)};
}

Outcome rescale_algebra(Lab& lab) {
  const auto t0 = Clock::now();
  std::size_t points = 0, monotone = 0;
  for (double alpha : {0.02, 2.0, 20.0})
    for (double z : {-1.0, 0.3, 2.5})
      for (int i = 0; i < 100; ++i) {
        const double q = 0.005 + 0.0099 * i;
        double pf = -INFINITY, pfp = -INFINITY;
        for (int j = 0; j < 100; ++j, ++points) {
          const double qe = 0.001 + 0.00998 * j;
          const double f = rescale_gt(q, qe, z, alpha), fp = rescale_nongt(q, qe, 1.0 - z, alpha);
          monotone += f > pf && fp > pfp;
          pf = f;
          pfp = fp;
        }
      }
  Rng rng(3);
  std::uniform_int_distribution<int> num(-4096, 4096);
  std::uniform_real_distribution<double> u(0.01, 0.98);
  std::size_t exact = 0;
  const std::size_t draws = 10000;
  for (std::size_t t = 0; t < draws; ++t) {
    const double z = num(rng) / 1024.0;  // dyadic, so sum_{c != *} z_c = 1 - z_* is exact
    const double q = u(rng), qe = u(rng), alpha = 10.0 * u(rng);
    exact += rescale_nongt(q, qe, 1.0 - z, alpha) == rescale_gt(q, qe, z, alpha);
  }
  const double algebra_secs = seconds_since(t0);

  const Runs& lfme = lab.runs(kLfme);
  std::size_t post = 0, negative = 0;
  for (const auto& r : lfme.by_seed)
    for (const auto& tr : r.rescale) {
      if (tr.step * 10 <= r.config.steps) continue;
      ++post;
      negative += tr.mean_f < 0.0;
    }
  const double frac = post ? static_cast<double>(negative) / static_cast<double>(post) : 0.0;
  const double secs = algebra_secs + lfme.seconds;
  const bool ok = monotone == points && points >= 10000 && exact == draws && frac >= 0.9 && secs < 600.0;
  return {4, "rescale factor", ok ? Status::Pass : Status::Fail,
          fmt("monotone %zu/%zu grid points; F'==F %zu/%zu; batch-mean F < 0 at %.1f%% of %zu post-warmup probe "
              "points (>= 90%%); %.0f s (< 600 s)",
              monotone, points, exact, draws, 100.0 * frac, post, secs)};
}

Outcome smoothing(Lab& lab) {
  const auto erm = lab.selected(kErm, "val_entropy");
  const auto lfme = lab.selected(kLfme, "val_entropy");
  std::size_t higher = 0, in_range = 0;
  std::vector<double> sums;
  for (std::size_t s = 0; s < lab.seeds(); ++s) {
    higher += lfme[s] > erm[s];
    const auto& last = lab.runs(kLfme).by_seed[s].evals.back();
    const double zsum = last.get("val_logit_sum");
    sums.push_back(zsum);
    in_range += zsum >= 0.6 && zsum <= 1.4;
  }
  const std::size_t need = (lab.seeds() * 8 + 9) / 10;
  const bool ok = higher >= need && in_range >= need;
  return {5, "smoothing", ok ? Status::Pass : Status::Fail,
          fmt("LFME entropy > ERM in %zu/%zu seeds (mean %.3f vs %.3f); converged sum z in [0.6, 1.4] in %zu/%zu "
              "seeds (mean %.3f); need %zu",
              higher, lab.seeds(), mean_of(lfme), mean_of(erm), in_range, lab.seeds(), mean_of(sums), need)};
}

Outcome generalization(Lab& lab) {
  const MethodSpec erm_plus{.kind = MethodKind::ErmPlus, .alpha_half = 1.0};
  const MethodSpec low{.kind = MethodKind::Lfme, .alpha_half = 0.01};
  const MethodSpec high{.kind = MethodKind::Lfme, .alpha_half = 10.0};
  const double erm = mean_of(lab.selected(kErm, "ood_acc"));
  const double lfme = mean_of(lab.selected(kLfme, "ood_acc"));
  const double plus = mean_of(lab.selected(erm_plus, "ood_acc"));
  const double a_low = mean_of(lab.selected(low, "ood_acc"));
  const double a_high = mean_of(lab.selected(high, "ood_acc"));
  const double spread = std::max({a_low, lfme, a_high}) - std::min({a_low, lfme, a_high});
  double secs = 0.0;
  for (const auto* m : {&kErm, &kLfme, &erm_plus, &low, &high}) secs += lab.runs(*m).seconds;
  const bool ok = lfme - erm >= 0.02 && plus - erm >= 0.01 && spread < 0.04 && secs < 1800.0;
  return {6, "generalization", ok ? Status::Pass : Status::Fail,
          fmt("OOD ERM %.2f, LFME %+.2f (>= +2), ERM+ %+.2f (>= +1); LFME at alpha/2 0.01/1/10 = %.2f/%.2f/%.2f, "
              "spread %.2f (< 4); %.0f s (< 1800 s)",
              100 * erm, 100 * (lfme - erm), 100 * (plus - erm), 100 * a_low, 100 * lfme, 100 * a_high, 100 * spread,
              secs)};
}

Outcome in_domain(Lab& lab) {
  const double erm = mean_of(lab.selected(kErm, "mean_val_acc"));
  const double experts = mean_of(lab.selected(kLfme, "expert_mean_val_acc"));
  const double lfme = mean_of(lab.selected(kLfme, "mean_val_acc"));
  const bool ok = experts - erm >= -0.005 && lfme - experts >= -0.005;
  return {7, "in-domain ordering", ok ? Status::Pass : Status::Fail,
          fmt("val acc ERM %.2f <= experts %.2f <= LFME %.2f (gaps %+.2f, %+.2f; each >= -0.5)", 100 * erm,
              100 * experts, 100 * lfme, 100 * (experts - erm), 100 * (lfme - experts))};
}

Outcome aggregation(Lab& lab) {
  const double erm = mean_of(lab.selected(kErm, "ood_acc"));
  std::string detail = fmt("ERM OOD %.2f;", 100 * erm);
  bool ok = true;
  for (auto kind : {MethodKind::AggAverage, MethodKind::AggSoup, MethodKind::AggConfidence, MethodKind::AggDynamic}) {
    const MethodSpec m{.kind = kind};
    const double v = mean_of(lab.selected(m, "ood_acc"));
    ok = ok && v - erm <= 0.01;
    detail += fmt(" %s %+.2f", m.label().c_str(), 100 * (v - erm));
  }
  detail += " (each <= +1)";
  return {8, "aggregation baselines", ok ? Status::Pass : Status::Warn, detail};
}

Outcome hard_samples(Lab& lab) {
  std::size_t higher = 0;
  std::vector<double> hard_gap, easy_gap;
  for (std::size_t s = 0; s < lab.seeds(); ++s) {
    const auto series = hard_sample_ratio_series(lab.runs(kErm).by_seed[s], lab.runs(kLfme).by_seed[s]);
    std::vector<double> bh, gh, be, ge;
    for (const auto& p : series) {
      if (std::isfinite(p.base_hard) && std::isfinite(p.guided_hard)) {
        bh.push_back(p.base_hard);
        gh.push_back(p.guided_hard);
      }
      if (std::isfinite(p.base_easy) && std::isfinite(p.guided_easy)) {
        be.push_back(p.base_easy);
        ge.push_back(p.guided_easy);
      }
    }
    hard_gap.push_back(mean_of(gh) - mean_of(bh));
    easy_gap.push_back(mean_of(ge) - mean_of(be));
    higher += mean_of(gh) > mean_of(bh);
  }
  const std::size_t need = (lab.seeds() * 8 + 9) / 10;
  const double easy = mean_of(easy_gap);
  const bool ok = higher >= need && std::abs(easy) < 0.05;
  return {9, "hard-sample ratio", ok ? Status::Pass : Status::Fail,
          fmt("mean R on hard samples LFME > ERM in %zu/%zu seeds (need %zu, mean gap %+.3f); easy-sample gap %+.3f "
              "(|.| < 0.05)",
              higher, lab.seeds(), need, mean_of(hard_gap), easy)};
}

Outcome determinism(const Lab& lab) {
  namespace fs = std::filesystem;
  test::ScratchDir dir("acceptance");
  TrainConfig c = lab.config();
  c.steps = std::min<std::uint64_t>(c.steps, 500);
  c.seed = 7;
  int identical = 0, total = 0;
  bool bitwise = true;
  std::size_t checked = 0;
  for (const MethodSpec& m : {kErm, kLfme}) {
    const RunResult a = run_method(m, c, lab.split().sources, lab.split().held_out);
    const RunResult b = run_method(m, c, lab.split().sources, lab.split().held_out);
    const fs::path da = dir / (m.label() + "_a"), db = dir / (m.label() + "_b");
    write_run_artifacts(da, a, ProbeOutput::All);
    write_run_artifacts(db, b, ProbeOutput::All);
    for (const char* f : {"metrics.csv", "target_metrics.csv", "probe.csv"}) {
      std::ifstream fa(da / f, std::ios::binary), fb(db / f, std::ios::binary);
      std::stringstream sa, sb;
      sa << fa.rdbuf();
      sb << fb.rdbuf();
      ++total;
      identical += !sa.str().empty() && sa.str() == sb.str();
    }
    // The final model reproduces the logits recorded on the probe batch at the last evaluation.
    save_checkpoint({"target", a.evals.back().step, c.seed, *a.final_target}, dir / "final.ckpt");
    const Checkpoint back = load_checkpoint(dir / "final.ckpt");
    bitwise = bitwise && back.model.predict(a.probe.x) == a.probes.back().logits;
    ++checked;
    for (std::size_t i = 0; i < a.experts.size(); ++i) {
      const Checkpoint e = load_checkpoint(da / ("expert" + std::to_string(i) + ".ckpt"));
      bitwise = bitwise && e.model.predict(a.probe.x) == a.experts[i].predict(a.probe.x);
      ++checked;
    }
  }
  const bool ok = identical == total && bitwise;
  return {10, "determinism and I/O", ok ? Status::Pass : Status::Fail,
          fmt("%d/%d rerun CSVs byte-identical; checkpoint round trip bitwise on probe logits for %zu models: %s",
              identical, total, checked, bitwise ? "yes" : "no")};
}

const char* label(Status s) { return s == Status::Pass ? "PASS" : s == Status::Fail ? "FAIL" : "WARN"; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria for the LFME lab"};
  bool report_only = false;
  std::size_t seeds = 10;
  std::uint64_t steps = 5000;
  app.add_flag("--report-only", report_only, "Exit 0 even when a criterion fails");
  app.add_option("--seeds", seeds, "Seeds for the trend criteria (the criteria are stated for 10)")
      ->check(CLI::Range(1, 100));
  app.add_option("--steps", steps, "Training steps (the criteria are stated for 5000)")->check(CLI::Range(100, 1000000));
  CLI11_PARSE(app, argc, argv);
  if (seeds != 10 || steps != 5000) {
    std::printf("note: non-standard run (%zu seeds, %llu steps); results do not certify the criteria\n", seeds,
                static_cast<unsigned long long>(steps));
  }

  std::vector<Outcome> outcomes;
  auto report = [&](Outcome o) {
    std::printf("criterion %2d %s  %s: %s\n", o.id, label(o.status), o.name.c_str(), o.detail.c_str());
    std::fflush(stdout);
    outcomes.push_back(std::move(o));
  };
  auto guarded = [&](int id, const char* name, const std::function<Outcome()>& fn) {
    try {
      report(fn());
    } catch (const std::exception& e) {
      report({id, name, Status::Fail, std::string("error: ") + e.what(), true});
    }
  };

  const auto t0 = Clock::now();
  guarded(1, "gradient identity", gradient_identity);
  guarded(2, "finite differences", finite_differences);
  Lab lab(seeds, steps);
  guarded(3, "reduction equivalences", [&] { return reductions(lab); });
  guarded(4, "rescale factor", [&] { return rescale_algebra(lab); });
  guarded(5, "smoothing", [&] { return smoothing(lab); });
  guarded(6, "generalization", [&] { return generalization(lab); });
  guarded(7, "in-domain ordering", [&] { return in_domain(lab); });
  guarded(8, "aggregation baselines", [&] { return aggregation(lab); });
  guarded(9, "hard-sample ratio", [&] { return hard_samples(lab); });
  guarded(10, "determinism and I/O", [&] { return determinism(lab); });

  std::size_t pass = 0, fail = 0, warn = 0, evaluated = 0;
  for (const auto& o : outcomes) {
    (o.status == Status::Pass ? pass : o.status == Status::Fail ? fail : warn)++;
    evaluated += !o.errored;
  }
  std::printf("acceptance: %zu/10 criteria evaluated, %zu passed, %zu failed, %zu warnings (%.0f s)\n", evaluated,
              pass, fail, warn, seconds_since(t0));
  return fail > 0 && !report_only ? 1 : 0;
}
