#pragma once

// Training loop shared by every method in the registry.
//
// Each step draws one aligned minibatch per source domain. Experts see only
// their own domain's rows; the target model sees the concatenation. All
// trained models share one optimizer and one backward pass over the summed
// objective, so a model's update depends only on the terms that reach its
// parameters.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lfme/aggregate.hpp"
#include "lfme/analysis.hpp"
#include "lfme/autodiff.hpp"
#include "lfme/domains.hpp"
#include "lfme/losses.hpp"
#include "lfme/method.hpp"
#include "lfme/mlp.hpp"
#include "lfme/optim.hpp"
#include "lfme/random.hpp"

namespace lfme {

struct MetricValue {
  std::string name;
  double value = 0.0;
  bool target = true;  // depends only on the deployed predictor
};

struct EvalPoint {
  std::uint64_t step = 0;
  std::vector<MetricValue> metrics;

  std::optional<double> find(std::string_view name) const {
    for (const auto& m : metrics)
      if (m.name == name) return m.value;
    return std::nullopt;
  }
  double get(std::string_view name) const {
    if (auto v = find(name)) return *v;
    throw ValidationError("no metric named " + std::string(name));
  }
};

/// Fixed probe batch drawn once per run from one split of every source.
struct Probe {
  Tensor x;
  std::vector<int> labels;
  std::vector<int> domain_of_row;
};

/// Model outputs on the probe batch at one evaluation step.
struct ProbeRecord {
  std::uint64_t step = 0;
  Tensor logits;  // target logits; empty for aggregation methods
  Tensor probs;
  std::vector<double> expert_losses;  // own-domain expert CE; empty without experts
};

struct RescaleSample {
  std::size_t row = 0;
  double f = 0.0;
  double f_prime = 0.0;
};

/// Per-sample rescaling factors on the probe batch. Rows with q_* too close
/// to 1 are skipped.
struct RescaleTrace {
  std::uint64_t step = 0;
  double alpha = 0.0;
  std::vector<RescaleSample> samples;
  double mean_f = 0.0;
  double mean_f_prime = 0.0;
};

struct RunResult {
  MethodSpec method;
  TrainConfig config;
  int held_out_domain = -1;
  std::string held_out_name;
  std::vector<std::string> source_names;

  std::vector<double> loss_total;  // per step
  std::vector<double> loss_cla;    // target H(q, y) per step; empty without a target

  std::vector<EvalPoint> evals;
  std::size_t selected = 0;  // index into evals

  Probe probe;
  std::vector<ProbeRecord> probes;
  std::vector<RescaleTrace> rescale;

  // Models at the selected evaluation step, and after the last step.
  std::optional<MlpModel> target;
  std::vector<MlpModel> experts;
  std::optional<MlpModel> weighting;
  std::optional<MlpModel> final_target;

  const EvalPoint& selected_eval() const { return evals.at(selected); }
  double selected_metric(std::string_view name) const { return selected_eval().get(name); }
};

namespace detail {

inline Probe make_probe(std::span<const DomainDataset> sources, std::size_t per_domain, ProbeSplit split,
                        std::uint64_t seed) {
  Probe p;
  std::vector<Tensor> parts;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    auto idx = split == ProbeSplit::Train ? sources[i].train_idx : sources[i].val_idx;
    Rng rng(derive_seed(seed, "probe", i));
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min(per_domain, idx.size()));
    std::sort(idx.begin(), idx.end());
    parts.push_back(sources[i].gather(idx));
    auto labels = sources[i].gather_labels(idx);
    p.labels.insert(p.labels.end(), labels.begin(), labels.end());
    p.domain_of_row.insert(p.domain_of_row.end(), idx.size(), static_cast<int>(i));
  }
  p.x = concat_rows(parts);
  return p;
}

inline Var sum_terms(std::span<const Var> terms) {
  Var total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
  return total;
}

inline double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace detail

class Trainer {
 public:
  /// `teacher` is the frozen LFME target required by LFME_GUID.
  Trainer(MethodSpec method, TrainConfig config, std::span<const DomainDataset> sources,
          const DomainDataset& held_out, const MlpModel* teacher = nullptr)
      : method_(method), config_(std::move(config)), sources_(sources), held_out_(held_out), teacher_(teacher) {
    method_.validate();
    config_.validate();
    if (sources_.size() < 2) throw ValidationError("training needs at least 2 source domains");
    k_ = sources_.front().num_classes;
    d_ = sources_.front().dim();
    for (const auto& s : sources_) {
      if (s.num_classes != k_ || s.dim() != d_) throw ValidationError("source domains disagree on K or d");
    }
    if (held_out_.dim() != d_) throw ValidationError("held-out domain feature width differs from sources");
    if (method_.kind == MethodKind::LfmeGuided && !teacher_) {
      throw ValidationError("LFME_GUID needs a trained LFME target model");
    }
    for (const auto& s : sources_) {
      train_x_.push_back(s.gather(s.train_idx));
      train_y_.push_back(s.gather_labels(s.train_idx));
      val_x_.push_back(s.gather(s.val_idx));
      val_y_.push_back(s.gather_labels(s.val_idx));
    }
    pooled_val_x_ = concat_rows(val_x_);
    ood_y_ = held_out_.labels;
  }

  RunResult run() {
    const std::uint64_t seed = config_.seed;
    std::vector<std::size_t> dims{d_};
    dims.insert(dims.end(), config_.hidden.begin(), config_.hidden.end());
    auto with_out = [&](std::size_t out) {
      auto d = dims;
      d.push_back(out);
      return d;
    };

    const MethodKind kind = method_.kind;
    const std::size_t m = sources_.size();
    std::optional<MlpModel> target;
    std::vector<MlpModel> experts;
    std::optional<MlpModel> weighting;
    if (uses_target(kind)) target = init_mlp(with_out(k_), derive_seed(seed, "target"));
    if (uses_experts(kind)) {
      for (std::size_t i = 0; i < m; ++i) experts.push_back(init_mlp(with_out(k_), derive_seed(seed, "expert", i)));
    }
    if (kind == MethodKind::AggDynamic) weighting = init_mlp(with_out(m), derive_seed(seed, "weighting"));

    std::vector<Parameter*> params;
    for (auto& e : experts)
      for (auto* p : e.parameters()) params.push_back(p);
    if (weighting)
      for (auto* p : weighting->parameters()) params.push_back(p);
    if (target)
      for (auto* p : target->parameters()) params.push_back(p);
    Optimizer opt(params, config_.optimizer, config_.lr, config_.weight_decay);

    RunResult result;
    result.method = method_;
    result.config = config_;
    result.held_out_domain = held_out_.domain_id;
    result.held_out_name = held_out_.name;
    for (const auto& s : sources_) result.source_names.push_back(s.name);
    result.probe = detail::make_probe(sources_, config_.probe_per_domain, config_.probe_split, seed);

    const std::uint64_t ramp = method_.ramp_steps ? method_.ramp_steps : std::max<std::uint64_t>(1, config_.steps / 2);
    BatchSampler sampler(sources_, config_.batch_per_domain, derive_seed(seed, "batches"));
    double best_val = -1.0;

    for (std::uint64_t step = 0; step < config_.steps; ++step) {
      const Batch batch = sampler.batch(step);
      const Tensor y_all = one_hot(batch.all_labels, k_);
      Tape tape;
      std::vector<Var> terms;

      std::vector<Tensor> expert_logits, expert_probs;
      std::vector<double> expert_rows;
      for (std::size_t i = 0; i < experts.size(); ++i) {
        Var zi = experts[i].forward(tape, tape.constant(batch.xs[i]));
        terms.push_back(loss_expert(zi, one_hot(batch.labels[i], k_)));
        expert_logits.push_back(zi.value());
        expert_probs.push_back(kernels::softmax(zi.value()));
        if (kind == MethodKind::ErmPlusExpertWeighted) {
          auto rows = per_sample_ce(expert_probs.back(), batch.labels[i]);
          expert_rows.insert(expert_rows.end(), rows.begin(), rows.end());
        }
      }
      if (weighting) {
        Var zw = weighting->forward(tape, tape.constant(batch.all_x));
        terms.push_back(loss_expert(zw, one_hot(batch.domain_of_row, m)));
      }
      if (target) {
        Var z = target->forward(tape, tape.constant(batch.all_x));
        terms.push_back(target_loss(z, y_all, batch, expert_logits, expert_probs, expert_rows, step, ramp));
        result.loss_cla.push_back(detail::mean_of(per_sample_ce(kernels::softmax(z.value()), batch.all_labels)));
      }

      Var total = detail::sum_terms(terms);
      result.loss_total.push_back(total.value()[0]);
      tape.backward(total);
      opt.step();
      opt.zero_grad();

      const std::uint64_t done = step + 1;
      if (done % config_.eval_every == 0 || done == config_.steps) {
        evaluate(done, target, experts, weighting, result);
        const double v = result.evals.back().get("mean_val_acc");
        if (v > best_val) {
          best_val = v;
          result.selected = result.evals.size() - 1;
          result.target = target;
          result.experts = experts;
          result.weighting = weighting;
        }
      }
    }
    result.final_target = target;
    return result;
  }

 private:
  Var target_loss(Var z, const Tensor& y, const Batch& batch, std::span<const Tensor> expert_logits,
                  std::span<const Tensor> expert_probs, std::span<const double> expert_rows, std::uint64_t step,
                  std::uint64_t ramp) const {
    const double a = method_.alpha_half;
    switch (method_.kind) {
      case MethodKind::Erm:
        return cross_entropy(softmax(z), y);
      case MethodKind::Lfme:
        // q^E rows line up with z rows: both are in per-domain block order
        return loss_lfme(z, y, concat_rows(expert_probs), a);
      case MethodKind::ErmPlus:
        return loss_erm_plus(z, y, a);
      case MethodKind::LabelSmoothing:
        return loss_ls(z, y, method_.ls_epsilon);
      case MethodKind::KdLogitLogit:
      case MethodKind::KdProbLogit:
      case MethodKind::KdProbProb:
        return loss_kd_variant(method_.kind, z, y, concat_rows(expert_logits), concat_rows(expert_probs), a);
      case MethodKind::KdCrossEntropy:
        return loss_kd_variant(method_.kind, z, y, concat_rows(expert_logits), concat_rows(expert_probs),
                               kd_ramp_weight(a, step, ramp));
      case MethodKind::LfmeGuided: {
        Var q = softmax(z);
        const Tensor teacher_probs = kernels::softmax(teacher_->predict(batch.all_x));
        return add(cross_entropy(q, y), scale(loss_lfme_guid(q, teacher_probs), a));
      }
      case MethodKind::SelfGuided:
        return add(cross_entropy(softmax(z), y), scale(loss_self_guid(z), a));
      case MethodKind::ErmPlusExpertWeighted: {
        Var rows = erm_plus_rows(z, y, a);
        return weighted_mean(rows, hard_weights(expert_rows, method_.hard_weight_beta));
      }
      case MethodKind::ErmPlusSelfWeighted: {
        Var rows = erm_plus_rows(z, y, a);
        const std::vector<double> own = rows.value().values();
        return weighted_mean(rows, hard_weights(own, method_.hard_weight_beta));
      }
      default:
        throw ValidationError("method has no target model: " + std::string(to_string(method_.kind)));
    }
  }

  Tensor predict_probs(const std::optional<MlpModel>& target, const std::vector<MlpModel>& experts,
                       const std::optional<MlpModel>& weighting, const Tensor& x, Tensor* logits) const {
    if (target) {
      Tensor z = target->predict(x);
      Tensor q = kernels::softmax(z);
      if (logits) *logits = std::move(z);
      return q;
    }
    return aggregate_predict(method_.kind, experts, weighting ? &*weighting : nullptr, x);
  }

  void evaluate(std::uint64_t step, const std::optional<MlpModel>& target, const std::vector<MlpModel>& experts,
                const std::optional<MlpModel>& weighting, RunResult& result) const {
    EvalPoint ev;
    ev.step = step;
    double val_sum = 0.0;
    std::vector<Tensor> val_probs;
    for (std::size_t i = 0; i < sources_.size(); ++i) {
      const Tensor tp = predict_probs(target, experts, weighting, train_x_[i], nullptr);
      const Tensor vp = predict_probs(target, experts, weighting, val_x_[i], nullptr);
      ev.metrics.push_back({"train_acc/" + sources_[i].name, accuracy(tp, train_y_[i])});
      const double va = accuracy(vp, val_y_[i]);
      ev.metrics.push_back({"val_acc/" + sources_[i].name, va});
      val_sum += va;
      val_probs.push_back(vp);
    }
    ev.metrics.push_back({"mean_val_acc", val_sum / static_cast<double>(sources_.size())});
    const Tensor ood = predict_probs(target, experts, weighting, held_out_.features, nullptr);
    ev.metrics.push_back({"ood_acc", accuracy(ood, ood_y_)});
    ev.metrics.push_back({"val_entropy", mean_entropy(concat_rows(val_probs))});
    if (target) ev.metrics.push_back({"val_logit_sum", mean_logit_sum(target->predict(pooled_val_x_))});

    ProbeRecord rec;
    rec.step = step;
    rec.probs = predict_probs(target, experts, weighting, result.probe.x, target ? &rec.logits : nullptr);
    if (target) ev.metrics.push_back({"probe_logit_sum", mean_logit_sum(rec.logits)});

    if (!experts.empty()) {
      double own_sum = 0.0;
      for (std::size_t i = 0; i < experts.size(); ++i) {
        const double acc = accuracy(experts[i].predict(val_x_[i]), val_y_[i]);
        ev.metrics.push_back({"expert_val_acc/" + sources_[i].name, acc, false});
        own_sum += acc;
      }
      ev.metrics.push_back({"expert_mean_val_acc", own_sum / static_cast<double>(experts.size()), false});

      // Expert i scores the probe rows of its own domain.
      const auto& probe = result.probe;
      std::vector<Tensor> expert_probe_probs;
      for (const auto& e : experts) expert_probe_probs.push_back(kernels::softmax(e.predict(probe.x)));
      rec.expert_losses.resize(probe.labels.size());
      for (std::size_t r = 0; r < probe.labels.size(); ++r) {
        const auto& qe = expert_probe_probs[static_cast<std::size_t>(probe.domain_of_row[r])];
        rec.expert_losses[r] = -std::log(std::max(qe(r, static_cast<std::size_t>(probe.labels[r])), 1e-12));
      }
      if (method_.kind == MethodKind::Lfme && method_.alpha_half > 0.0) {
        result.rescale.push_back(rescale_trace(step, rec.logits, rec.probs, expert_probe_probs, probe));
      }
    }
    result.probes.push_back(std::move(rec));
    result.evals.push_back(std::move(ev));
  }

  RescaleTrace rescale_trace(std::uint64_t step, const Tensor& logits, const Tensor& probs,
                             std::span<const Tensor> expert_probs, const Probe& probe) const {
    RescaleTrace tr;
    tr.step = step;
    tr.alpha = 2.0 * method_.alpha_half;
    double sf = 0.0, sfp = 0.0;
    for (std::size_t r = 0; r < probe.labels.size(); ++r) {
      const auto star = static_cast<std::size_t>(probe.labels[r]);
      const double q_star = probs(r, star);
      if (!(q_star < kRescaleMaxProb)) continue;
      const double qe_star = expert_probs[static_cast<std::size_t>(probe.domain_of_row[r])](r, star);
      double z_rest = 0.0;
      for (std::size_t c = 0; c < k_; ++c)
        if (c != star) z_rest += logits(r, c);
      RescaleSample s{r, rescale_gt(q_star, qe_star, logits(r, star), tr.alpha),
                      rescale_nongt(q_star, qe_star, z_rest, tr.alpha)};
      sf += s.f;
      sfp += s.f_prime;
      tr.samples.push_back(s);
    }
    if (!tr.samples.empty()) {
      tr.mean_f = sf / static_cast<double>(tr.samples.size());
      tr.mean_f_prime = sfp / static_cast<double>(tr.samples.size());
    }
    return tr;
  }

  MethodSpec method_;
  TrainConfig config_;
  std::span<const DomainDataset> sources_;
  const DomainDataset& held_out_;
  const MlpModel* teacher_;
  std::size_t k_ = 0;
  std::size_t d_ = 0;
  std::vector<Tensor> train_x_, val_x_;
  std::vector<std::vector<int>> train_y_, val_y_;
  Tensor pooled_val_x_;
  std::vector<int> ood_y_;
};

/// Trains any registered method. LFME_GUID first trains an LFME model with
/// the same configuration and uses its selected target as the frozen guide.
inline RunResult run_method(const MethodSpec& method, const TrainConfig& config,
                            std::span<const DomainDataset> sources, const DomainDataset& held_out) {
  if (method.kind == MethodKind::LfmeGuided) {
    MethodSpec teacher_spec = method;
    teacher_spec.kind = MethodKind::Lfme;
    const RunResult teacher = Trainer(teacher_spec, config, sources, held_out).run();
    return Trainer(method, config, sources, held_out, &*teacher.target).run();
  }
  return Trainer(method, config, sources, held_out).run();
}

inline RunResult train_erm(std::span<const DomainDataset> sources, const DomainDataset& held_out,
                           const TrainConfig& config) {
  return run_method(MethodSpec{.kind = MethodKind::Erm}, config, sources, held_out);
}

inline RunResult train_lfme(std::span<const DomainDataset> sources, const DomainDataset& held_out,
                            const TrainConfig& config, double alpha_half) {
  return run_method(MethodSpec{.kind = MethodKind::Lfme, .alpha_half = alpha_half}, config, sources, held_out);
}

enum class HardWeightSource { Experts, Self };

/// ERM+ with per-sample hard-sample weights from the experts' or the model's
/// own losses.
inline RunResult train_weighted(std::span<const DomainDataset> sources, const DomainDataset& held_out,
                                const TrainConfig& config, HardWeightSource source, double alpha_half, double beta) {
  MethodSpec spec;
  spec.kind = source == HardWeightSource::Experts ? MethodKind::ErmPlusExpertWeighted : MethodKind::ErmPlusSelfWeighted;
  spec.alpha_half = alpha_half;
  spec.hard_weight_beta = beta;
  return run_method(spec, config, sources, held_out);
}

}  // namespace lfme
