#include <gtest/gtest.h>

#include <cmath>

#include "lfme/train.hpp"
#include "test_util.hpp"

namespace lfme {
namespace {

class TrainTest : public ::testing::Test {
 protected:
  static LeaveOneOut make_split(SuiteSpec s) { return split_leave_one_out(generate_suite(s), s.num_sources); }

  static SuiteSpec small_spec() {
    SuiteSpec s;
    s.n_per_domain = 200;
    return s;
  }

  static TrainConfig small_config(std::uint64_t seed = 0) {
    TrainConfig c;
    c.hidden = {16};
    c.steps = 200;
    c.eval_every = 50;
    c.batch_per_domain = 16;
    c.probe_per_domain = 16;
    c.seed = seed;
    return c;
  }

  RunResult run(MethodSpec m, const TrainConfig& c) { return run_method(m, c, split.sources, split.held_out); }

  LeaveOneOut split = make_split(small_spec());
};

// Target-facing outputs of a run: everything a target metrics file holds.
void expect_same_target_trajectory(const RunResult& a, const RunResult& b) {
  EXPECT_EQ(a.loss_cla, b.loss_cla);
  ASSERT_EQ(a.evals.size(), b.evals.size());
  for (std::size_t i = 0; i < a.evals.size(); ++i) {
    std::vector<std::pair<std::string, double>> ta, tb;
    for (const auto& m : a.evals[i].metrics)
      if (m.target) ta.emplace_back(m.name, m.value);
    for (const auto& m : b.evals[i].metrics)
      if (m.target) tb.emplace_back(m.name, m.value);
    EXPECT_EQ(ta, tb) << "eval " << i;
  }
  EXPECT_EQ(a.selected, b.selected);
  ASSERT_TRUE(a.final_target && b.final_target);
  EXPECT_EQ(*a.final_target, *b.final_target);
}

TEST_F(TrainTest, ReductionsAreBitIdenticalToErm) {
  for (std::uint64_t seed : {0, 1, 2}) {
    const auto cfg = small_config(seed);
    const RunResult erm = run({.kind = MethodKind::Erm}, cfg);
    expect_same_target_trajectory(run({.kind = MethodKind::Lfme, .alpha_half = 0.0}, cfg), erm);
    expect_same_target_trajectory(run({.kind = MethodKind::ErmPlus, .alpha_half = 0.0}, cfg), erm);
    expect_same_target_trajectory(run({.kind = MethodKind::LabelSmoothing, .ls_epsilon = 0.0}, cfg), erm);
  }
}

TEST_F(TrainTest, WeightedWithZeroBetaMatchesErmPlus) {
  const auto cfg = small_config(4);
  const RunResult plus = run({.kind = MethodKind::ErmPlus, .alpha_half = 0.5}, cfg);
  for (auto kind : {MethodKind::ErmPlusExpertWeighted, MethodKind::ErmPlusSelfWeighted}) {
    expect_same_target_trajectory(run({.kind = kind, .alpha_half = 0.5, .hard_weight_beta = 0.0}, cfg), plus);
  }
}

TEST_F(TrainTest, GuidanceNeverReachesExperts) {
  auto cfg = small_config(3);
  cfg.eval_every = cfg.steps;  // single evaluation, so the selected experts are the final ones
  const RunResult a = run({.kind = MethodKind::Lfme, .alpha_half = 0.0}, cfg);
  const RunResult b = run({.kind = MethodKind::Lfme, .alpha_half = 10.0}, cfg);
  ASSERT_EQ(a.experts.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(a.experts[i], b.experts[i]) << "expert " << i;
  EXPECT_FALSE(*a.final_target == *b.final_target);
}

TEST(TrainStep, SingleSgdStepMatchesClosedForm) {
  // One sample, one linear layer: dL/dz = q - y + alpha (z - q^E), with alpha = 2 * alpha_half.
  const double alpha_half = 0.75, lr = 0.1;
  MlpModel m = init_mlp({3, 4}, 5);
  m.layers()[0].bias.value = Tensor({4}, {0.1, -0.2, 0.3, 0.0});
  const MlpModel before = m;
  const Tensor x({1, 3}, {0.5, -1.0, 2.0});
  const Tensor y({1, 4}, {0, 0, 1, 0});
  const Tensor qe({1, 4}, {0.1, 0.2, 0.6, 0.1});
  Optimizer opt(m.parameters(), OptimizerKind::Sgd, lr, 0.0);
  {
    Tape tp;
    tp.backward(loss_lfme(m.forward(tp, tp.constant(x)), y, qe, alpha_half));
  }
  opt.step();

  const Tensor z = before.predict(x);
  const Tensor q = kernels::softmax(z);
  std::vector<double> dz(4);
  for (std::size_t c = 0; c < 4; ++c) dz[c] = q[c] - y[c] + 2.0 * alpha_half * (z[c] - qe[c]);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 4; ++c) {
      EXPECT_NEAR(m.layers()[0].weight.value(i, c), before.layers()[0].weight.value(i, c) - lr * x[i] * dz[c], 1e-14);
    }
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_NEAR(m.layers()[0].bias.value[c], before.layers()[0].bias.value[c] - lr * dz[c], 1e-14);
  }
}

TEST(TrainStep, WeightedErmPlusGradientOnTwoSamples) {
  const double a = 0.5;
  Parameter z(Tensor({2, 3}, {1.0, 0.0, -1.0, 0.2, 0.4, 0.1}));
  const Tensor y({2, 3}, {1, 0, 0, 0, 0, 1});
  Tape tp;
  Var rows = erm_plus_rows(tp.leaf(z), y, a);
  const std::vector<double> own = rows.value().values();
  const auto w = hard_weights(own, 1.0);
  tp.backward(weighted_mean(rows, w));

  // Two samples: z-scores are -1 and +1, so the weights are 0.1 (clamped) and ~2.
  EXPECT_EQ(std::min(w[0], w[1]), 0.1);
  EXPECT_NEAR(std::max(w[0], w[1]), 2.0, 1e-7);
  const Tensor q = kernels::softmax(z.value);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 3; ++c) {
      const double hand = w[r] / 2.0 * (q(r, c) - y(r, c) + 2.0 * a * (z.value(r, c) - y(r, c)));
      EXPECT_NEAR(z.grad[r * 3 + c], hand, 1e-14);
    }
}

TEST_F(TrainTest, DeterministicInSeed) {
  const auto cfg = small_config(7);
  const MethodSpec m{.kind = MethodKind::Lfme, .alpha_half = 1.0};
  const RunResult a = run(m, cfg), b = run(m, cfg);
  EXPECT_EQ(a.loss_total, b.loss_total);
  ASSERT_EQ(a.evals.size(), b.evals.size());
  for (std::size_t i = 0; i < a.evals.size(); ++i) {
    ASSERT_EQ(a.evals[i].metrics.size(), b.evals[i].metrics.size());
    for (std::size_t j = 0; j < a.evals[i].metrics.size(); ++j) {
      EXPECT_EQ(a.evals[i].metrics[j].value, b.evals[i].metrics[j].value);
    }
  }
  EXPECT_EQ(*a.target, *b.target);
}

TEST_F(TrainTest, SelectionIsEarliestArgmaxOfMeanValidation) {
  auto cfg = small_config(1);
  cfg.eval_every = 10;
  const RunResult r = run({.kind = MethodKind::Erm}, cfg);
  const double best = r.selected_metric("mean_val_acc");
  for (std::size_t i = 0; i < r.evals.size(); ++i) {
    const double v = r.evals[i].get("mean_val_acc");
    EXPECT_LE(v, best);
    if (i < r.selected) {
      EXPECT_LT(v, best) << "an earlier evaluation ties the selected one";
    }
  }
  EXPECT_EQ(r.evals.size(), cfg.steps / cfg.eval_every);
}

TEST_F(TrainTest, EvaluationCadenceIncludesLastStep) {
  auto cfg = small_config();
  cfg.steps = 120;
  const RunResult r = run({.kind = MethodKind::Erm}, cfg);
  std::vector<std::uint64_t> steps;
  for (const auto& e : r.evals) steps.push_back(e.step);
  EXPECT_EQ(steps, (std::vector<std::uint64_t>{50, 100, 120}));
  EXPECT_EQ(r.loss_total.size(), 120u);
}

TEST(TrainErm, SeparableSuiteReachesNearPerfectValidation) {
  SuiteSpec s;
  s.d_spu = 0;
  s.sigma = 0.3;
  s.n_per_domain = 500;
  const LeaveOneOut split = split_leave_one_out(generate_suite(s), s.num_sources);
  TrainConfig cfg;
  cfg.steps = 2000;
  cfg.eval_every = 100;
  const RunResult r = train_erm(split.sources, split.held_out, cfg);
  EXPECT_GE(r.selected_metric("mean_val_acc"), 0.99);

  // Loss decreases in 50-step block averages while it is still well above 0.
  std::vector<double> blocks;
  for (std::size_t b = 0; b + 50 <= r.loss_total.size(); b += 50) {
    double m = 0.0;
    for (std::size_t i = b; i < b + 50; ++i) m += r.loss_total[i];
    blocks.push_back(m / 50.0);
  }
  for (std::size_t i = 1; i < blocks.size() && blocks[i - 1] > 0.05; ++i) EXPECT_LT(blocks[i], blocks[i - 1]) << "block " << i;
}

TEST_F(TrainTest, RescaleTracesOnlyForGuidedLfme) {
  const auto cfg = small_config();
  const RunResult lfme = run({.kind = MethodKind::Lfme, .alpha_half = 1.0}, cfg);
  EXPECT_EQ(lfme.rescale.size(), cfg.steps / cfg.eval_every);
  for (const auto& tr : lfme.rescale) {
    EXPECT_EQ(tr.alpha, 2.0);
    EXPECT_FALSE(tr.samples.empty());
    for (const auto& s : tr.samples) EXPECT_TRUE(std::isfinite(s.f) && std::isfinite(s.f_prime));
  }
  EXPECT_TRUE(run({.kind = MethodKind::Lfme, .alpha_half = 0.0}, cfg).rescale.empty());
  EXPECT_TRUE(run({.kind = MethodKind::Erm}, cfg).rescale.empty());
}

TEST_F(TrainTest, ProbeRecordsAlignWithProbeBatch) {
  const auto cfg = small_config();
  const RunResult r = run({.kind = MethodKind::Lfme, .alpha_half = 1.0}, cfg);
  const std::size_t rows = 3 * cfg.probe_per_domain;
  EXPECT_EQ(r.probe.x.rows(), rows);
  EXPECT_EQ(r.probe.labels.size(), rows);
  ASSERT_EQ(r.probes.size(), r.evals.size());
  for (const auto& p : r.probes) {
    EXPECT_EQ(p.logits.shape(), (Shape{rows, 5}));
    EXPECT_EQ(p.probs.rows(), rows);
    EXPECT_EQ(p.expert_losses.size(), rows);
  }
  EXPECT_EQ(r.probes.back().logits, r.final_target->predict(r.probe.x));
}

TEST_F(TrainTest, ProbeSplitSelectsRows) {
  auto cfg = small_config();
  const Probe train = detail::make_probe(split.sources, 8, ProbeSplit::Train, 0);
  const Probe val = detail::make_probe(split.sources, 8, ProbeSplit::Val, 0);
  EXPECT_EQ(train.x.rows(), 24u);
  EXPECT_FALSE(train.x == val.x);
  EXPECT_EQ(train.domain_of_row, val.domain_of_row);
}

TEST_F(TrainTest, EveryMethodRunsAndReportsFiniteMetrics) {
  const auto cfg = small_config();
  for (const auto& [kind, name] : kMethodNames) {
    const RunResult r = run({.kind = kind}, cfg);
    EXPECT_EQ(r.evals.size(), 4u) << name;
    for (const auto& e : r.evals)
      for (const auto& m : e.metrics) {
        EXPECT_TRUE(std::isfinite(m.value)) << name << " " << m.name;
        if (m.name.find("acc") != std::string::npos) {
          EXPECT_GE(m.value, 0.0);
          EXPECT_LE(m.value, 1.0);
        }
      }
    EXPECT_EQ(r.target.has_value(), uses_target(kind)) << name;
    EXPECT_EQ(!r.experts.empty(), uses_experts(kind)) << name;
    EXPECT_EQ(r.weighting.has_value(), kind == MethodKind::AggDynamic) << name;
    EXPECT_EQ(r.evals.front().find("val_logit_sum").has_value(), uses_target(kind)) << name;
  }
}

TEST_F(TrainTest, ExpertMetricsAreNotTargetMetrics) {
  const RunResult r = run({.kind = MethodKind::Lfme}, small_config());
  for (const auto& m : r.evals.front().metrics) EXPECT_EQ(m.target, m.name.rfind("expert", 0) != 0) << m.name;
}

TEST_F(TrainTest, ValidationErrors) {
  auto cfg = small_config();
  cfg.steps = 0;
  EXPECT_THROW(run({}, cfg), ValidationError);
  cfg = small_config();
  cfg.lr = 0.0;
  EXPECT_THROW(run({}, cfg), ValidationError);
  EXPECT_THROW(run({.kind = MethodKind::Lfme, .alpha_half = -1.0}, small_config()), ValidationError);
  EXPECT_THROW(run({.kind = MethodKind::LabelSmoothing, .ls_epsilon = 1.0}, small_config()), ValidationError);
  const Suite one(split.sources.begin(), split.sources.begin() + 1);
  EXPECT_THROW(run_method({}, small_config(), one, split.held_out), ValidationError);
  EXPECT_THROW(Trainer({.kind = MethodKind::LfmeGuided}, small_config(), split.sources, split.held_out),
               ValidationError);
  cfg = small_config();
  cfg.batch_per_domain = 1000;
  EXPECT_THROW(run({}, cfg), ValidationError);
}

}  // namespace
}  // namespace lfme
