#pragma once

// Inference-time combinations of the domain experts.

#include <span>
#include <vector>

#include "lfme/analysis.hpp"
#include "lfme/errors.hpp"
#include "lfme/method.hpp"
#include "lfme/mlp.hpp"
#include "lfme/tensor.hpp"

namespace lfme {

/// Class probabilities B x K from the experts combined according to `kind`:
///   AGG_AVG  mean of expert softmax outputs
///   AGG_MS   softmax of the uniformly parameter-averaged expert
///   AGG_CONF per row, the output of the expert with the lowest entropy
///            (ties to the lowest domain id)
///   AGG_DYN  sum_i softmax(W(x))_i * softmax(E_i(x))
/// `weighting` is required for AGG_DYN only.
inline Tensor aggregate_predict(MethodKind kind, std::span<const MlpModel> experts, const MlpModel* weighting,
                                const Tensor& x) {
  if (experts.empty()) throw ValidationError("aggregate_predict: no experts");
  if (kind == MethodKind::AggSoup) return kernels::softmax(average_parameters(experts).predict(x));

  std::vector<Tensor> probs;
  for (const auto& e : experts) probs.push_back(kernels::softmax(e.predict(x)));
  const std::size_t b = probs.front().rows(), k = probs.front().cols();
  for (const auto& p : probs) {
    if (p.cols() != k) throw DimensionError("aggregate_predict: experts disagree on class count");
  }
  Tensor out({b, k});
  switch (kind) {
    case MethodKind::AggAverage: {
      const double inv = 1.0 / static_cast<double>(probs.size());
      for (const auto& p : probs)
        for (std::size_t j = 0; j < out.size(); ++j) out[j] += p[j];
      for (auto& v : out.values()) v *= inv;
      return out;
    }
    case MethodKind::AggConfidence: {
      for (std::size_t r = 0; r < b; ++r) {
        std::size_t best = 0;
        double best_h = entropy(probs[0].row_span(r));
        for (std::size_t i = 1; i < probs.size(); ++i) {
          const double h = entropy(probs[i].row_span(r));
          if (h < best_h) {
            best_h = h;
            best = i;
          }
        }
        for (std::size_t c = 0; c < k; ++c) out(r, c) = probs[best](r, c);
      }
      return out;
    }
    case MethodKind::AggDynamic: {
      if (!weighting) throw ValidationError("aggregate_predict: AGG_DYN needs a weighting network");
      if (weighting->output_dim() != experts.size()) {
        throw DimensionError("aggregate_predict: weighting network has " + std::to_string(weighting->output_dim()) +
                             " outputs for " + std::to_string(experts.size()) + " experts");
      }
      const Tensor w = kernels::softmax(weighting->predict(x));
      for (std::size_t r = 0; r < b; ++r)
        for (std::size_t i = 0; i < probs.size(); ++i)
          for (std::size_t c = 0; c < k; ++c) out(r, c) += w(r, i) * probs[i](r, c);
      return out;
    }
    default:
      throw ValidationError("aggregate_predict: not an aggregation kind: " + std::string(to_string(kind)));
  }
}

}  // namespace lfme
