#pragma once

// Training objectives for the experts, the target model and the ablation
// family. All batch reductions are means over rows.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "lfme/autodiff.hpp"
#include "lfme/errors.hpp"
#include "lfme/method.hpp"
#include "lfme/tensor.hpp"

namespace lfme {

/// Expert objective on its own domain: H(softmax(z), y).
inline Var loss_expert(Var z, const Tensor& y) {
  detail::require_same_shape(z.value(), y, "loss_expert");
  return cross_entropy(softmax(z), y);
}

/// H(softmax(z), y) + alpha_half * mean_B ||z - q^E||^2. `expert_probs` is
/// taken as a constant (it never receives gradient).
inline Var loss_lfme(Var z, const Tensor& y, const Tensor& expert_probs, double alpha_half) {
  detail::require_same_shape(z.value(), expert_probs, "loss_lfme");
  Var cla = cross_entropy(softmax(z), y);
  Var guid = mse(z, z.tape->constant(expert_probs));
  return add(cla, scale(guid, alpha_half));
}

/// Per-sample H(q_r, y_r) + alpha_half ||z_r - y_r||^2 -> shape {B}.
inline Var erm_plus_rows(Var z, const Tensor& y, double alpha_half) {
  require_one_hot(y);
  Var ce = cross_entropy_rows(softmax(z), y);
  Var guid = sq_dist_rows(z, z.tape->constant(y));
  return add(ce, scale(guid, alpha_half));
}

/// The one-hot label replaces q^E: mean_B [H(q, y) + alpha_half ||z - y||^2].
inline Var loss_erm_plus(Var z, const Tensor& y, double alpha_half) {
  return mean(erm_plus_rows(z, y, alpha_half));
}

/// Cross-entropy against (1 - eps) y + eps / K.
inline Var loss_ls(Var z, const Tensor& y, double epsilon) {
  require_one_hot(y);
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ValidationError("loss_ls: epsilon must lie in [0, 1]");
  Tensor smooth = y;
  const double uniform = epsilon / static_cast<double>(y.cols());
  for (auto& v : smooth.values()) v = (1.0 - epsilon) * v + uniform;
  return soft_cross_entropy(softmax(z), smooth);
}

/// Weight of the KD_CE soft-label term at `step`: linear ramp to alpha_half.
inline double kd_ramp_weight(double alpha_half, std::uint64_t step, std::uint64_t ramp_steps) {
  if (ramp_steps == 0) return alpha_half;
  const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(ramp_steps));
  return alpha_half * frac;
}

/// The distillation alternatives. For the three regression forms the result
/// is L_cla + weight * guidance; KD_CE is (1 - weight) H(q, y) + weight H(q, q^E).
inline Var loss_kd_variant(MethodKind kind, Var z, const Tensor& y, const Tensor& expert_logits,
                           const Tensor& expert_probs, double weight) {
  detail::require_same_shape(z.value(), expert_logits, "loss_kd_variant");
  detail::require_same_shape(z.value(), expert_probs, "loss_kd_variant");
  Tape& tape = *z.tape;
  Var q = softmax(z);
  Var cla = cross_entropy(q, y);
  switch (kind) {
    case MethodKind::KdLogitLogit:
      return add(cla, scale(mse(z, tape.constant(expert_logits)), weight));
    case MethodKind::KdProbLogit:
      return add(cla, scale(mse(q, tape.constant(expert_logits)), weight));
    case MethodKind::KdProbProb:
      return add(cla, scale(mse(q, tape.constant(expert_probs)), weight));
    case MethodKind::KdCrossEntropy:
      return add(scale(cla, 1.0 - weight), scale(soft_cross_entropy(q, expert_probs), weight));
    default:
      throw ValidationError("loss_kd_variant: not a KD kind: " + std::string(to_string(kind)));
  }
}

/// Guidance mean_B ||z - sg(softmax(z))||^2.
inline Var loss_self_guid(Var z) { return mse(z, detach(softmax(z))); }

/// Guidance mean_B ||q - q^LFME||^2 against a frozen model's probabilities.
inline Var loss_lfme_guid(Var q, const Tensor& lfme_probs) {
  return mse(q, q.tape->constant(lfme_probs));
}

/// Per-sample weights that grow with the loss: 1 + beta * zscore(loss),
/// clamped to [0.1, 10]. Population standard deviation.
inline std::vector<double> hard_weights(std::span<const double> losses, double beta) {
  if (losses.empty()) throw ValidationError("hard_weights: empty batch");
  // Equal losses carry no ranking; the rounded mean would otherwise leak
  // through the 1e-8 guard as a spurious weight.
  const auto [lo, hi] = std::minmax_element(losses.begin(), losses.end());
  if (*lo == *hi || beta == 0.0) return std::vector<double>(losses.size(), 1.0);
  const double n = static_cast<double>(losses.size());
  double mean = 0.0;
  for (double l : losses) mean += l;
  mean /= n;
  double var = 0.0;
  for (double l : losses) var += (l - mean) * (l - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> w;
  w.reserve(losses.size());
  for (double l : losses) {
    const double raw = 1.0 + beta * (l - mean) / (sd + 1e-8);
    w.push_back(std::clamp(raw, 0.1, 10.0));
  }
  return w;
}

}  // namespace lfme
