#pragma once

// Gradient-rescaling factors, predictive statistics and the hard-sample
// classification ratio.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "lfme/errors.hpp"
#include "lfme/tensor.hpp"

namespace lfme {

/// Largest ground-truth probability for which the rescaling factors are
/// defined (their denominator is 1 - q_*).
inline constexpr double kRescaleMaxProb = 1.0 - 1e-9;

/// Ratio of the guided to the plain cross-entropy gradient at the
/// ground-truth logit: F = 1 - alpha (z_* - q^E_*) / (1 - q_*).
inline double rescale_gt(double q_star, double qe_star, double z_star, double alpha) {
  if (!(q_star < kRescaleMaxProb)) throw NumericError("rescale factor undefined for q_* >= 1");
  return 1.0 - alpha * (z_star - qe_star) / (1.0 - q_star);
}

/// Same ratio summed over the non-ground-truth logits:
/// F' = 1 - alpha (1 - sum_{c != *} z_c - q^E_*) / (1 - q_*).
inline double rescale_nongt(double q_star, double qe_star, double sum_z_nongt, double alpha) {
  if (!(q_star < kRescaleMaxProb)) throw NumericError("rescale factor undefined for q_* >= 1");
  return 1.0 - alpha * (1.0 - sum_z_nongt - qe_star) / (1.0 - q_star);
}

/// Shannon entropy in nats; 0 log 0 = 0.
inline double entropy(std::span<const double> q) {
  double h = 0.0;
  for (double p : q)
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

/// Mean row entropy of a B x K probability matrix.
inline double mean_entropy(const Tensor& probs) {
  if (probs.rows() == 0) return 0.0;
  double total = 0.0;
  for (std::size_t r = 0; r < probs.rows(); ++r) total += entropy(probs.row_span(r));
  return total / static_cast<double>(probs.rows());
}

/// R = pbar_* / max(pbar) with pbar the min-max normalised probabilities.
/// R is 1 when p_* is the maximum and 0 when it is the minimum.
inline double classification_ratio(std::span<const double> p, std::size_t star) {
  if (p.size() < 2) throw ValidationError("classification_ratio: need at least 2 classes");
  if (star >= p.size()) throw ValidationError("classification_ratio: class index out of range");
  const auto [lo, hi] = std::minmax_element(p.begin(), p.end());
  if (*hi == *lo) throw NumericError("classification_ratio: degenerate input (all probabilities equal)");
  // max(pbar) is 1 by construction
  return (p[star] - *lo) / (*hi - *lo);
}

/// Splits a batch by loss: the ceil(fraction * B) largest losses are hard,
/// the rest easy. Ties are broken by lower index ranking as harder. Both
/// index lists come back sorted ascending.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_hard_easy(
    std::span<const double> losses, double fraction = 1.0 / 3.0) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw ValidationError("split_hard_easy: fraction must lie in [0, 1]");
  std::vector<std::size_t> order(losses.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return losses[a] > losses[b]; });
  // 1e-12 slack keeps ceil(1/3 * 3) == 1 despite rounding
  const auto n_hard = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(losses.size()) - 1e-12));
  std::vector<std::size_t> hard(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_hard));
  std::vector<std::size_t> easy(order.begin() + static_cast<std::ptrdiff_t>(n_hard), order.end());
  std::sort(hard.begin(), hard.end());
  std::sort(easy.begin(), easy.end());
  return {std::move(hard), std::move(easy)};
}

/// Fraction of rows whose argmax (ties to the lowest class) equals the label.
inline double accuracy(const Tensor& scores, std::span<const int> labels) {
  if (scores.rows() != labels.size()) throw DimensionError("accuracy: row/label count mismatch");
  if (labels.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    auto row = scores.row_span(r);
    const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    hits += best == labels[r];
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

/// Per-row cross-entropy of probability rows against integer labels.
inline std::vector<double> per_sample_ce(const Tensor& probs, std::span<const int> labels) {
  std::vector<double> out;
  out.reserve(labels.size());
  for (std::size_t r = 0; r < labels.size(); ++r) {
    out.push_back(-std::log(std::max(probs(r, static_cast<std::size_t>(labels[r])), 1e-12)));
  }
  return out;
}

/// Mean of sum_c z_c over rows.
inline double mean_logit_sum(const Tensor& logits) {
  if (logits.rows() == 0) return 0.0;
  double total = 0.0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    for (double v : logits.row_span(r)) total += v;
  }
  return total / static_cast<double>(logits.rows());
}

}  // namespace lfme
