#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "lfme/csv.hpp"
#include "lfme/errors.hpp"

namespace lfme {

enum class MethodKind {
  Erm,
  Lfme,
  ErmPlus,
  LabelSmoothing,
  KdLogitLogit,    // ||z - z^E||^2
  KdProbLogit,     // ||q - z^E||^2
  KdProbProb,      // ||q - q^E||^2
  KdCrossEntropy,  // (1 - w) H(q, y) + w H(q, q^E), w ramped
  LfmeGuided,      // ||q - q^LFME||^2 from a frozen LFME target
  SelfGuided,      // ||z - sg(softmax(z))||^2
  ErmPlusExpertWeighted,
  ErmPlusSelfWeighted,
  AggAverage,
  AggSoup,
  AggConfidence,
  AggDynamic,
};

inline constexpr std::array<std::pair<MethodKind, std::string_view>, 16> kMethodNames{{
    {MethodKind::Erm, "ERM"},
    {MethodKind::Lfme, "LFME"},
    {MethodKind::ErmPlus, "ERM_PLUS"},
    {MethodKind::LabelSmoothing, "LS"},
    {MethodKind::KdLogitLogit, "KD_ZZ"},
    {MethodKind::KdProbLogit, "KD_QZ"},
    {MethodKind::KdProbProb, "KD_QQ"},
    {MethodKind::KdCrossEntropy, "KD_CE"},
    {MethodKind::LfmeGuided, "LFME_GUID"},
    {MethodKind::SelfGuided, "SELF_GUID"},
    {MethodKind::ErmPlusExpertWeighted, "ERMP_W_EXPT"},
    {MethodKind::ErmPlusSelfWeighted, "ERMP_W_SELF"},
    {MethodKind::AggAverage, "AGG_AVG"},
    {MethodKind::AggSoup, "AGG_MS"},
    {MethodKind::AggConfidence, "AGG_CONF"},
    {MethodKind::AggDynamic, "AGG_DYN"},
}};

inline std::string_view to_string(MethodKind kind) {
  for (const auto& [k, name] : kMethodNames)
    if (k == kind) return name;
  return "?";
}

/// Case-insensitive; accepts '-' for '_' and "ERM+" for ERM_PLUS.
inline std::optional<MethodKind> parse_method_kind(std::string_view text) {
  std::string norm;
  for (char c : text) norm += c == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  if (norm == "ERM+") norm = "ERM_PLUS";
  for (const auto& [k, name] : kMethodNames)
    if (name == norm) return k;
  return std::nullopt;
}

inline bool uses_experts(MethodKind k) {
  switch (k) {
    case MethodKind::Lfme:
    case MethodKind::KdLogitLogit:
    case MethodKind::KdProbLogit:
    case MethodKind::KdProbProb:
    case MethodKind::KdCrossEntropy:
    case MethodKind::ErmPlusExpertWeighted:
    case MethodKind::AggAverage:
    case MethodKind::AggSoup:
    case MethodKind::AggConfidence:
    case MethodKind::AggDynamic:
      return true;
    default:
      return false;
  }
}

inline bool is_aggregation(MethodKind k) {
  return k == MethodKind::AggAverage || k == MethodKind::AggSoup || k == MethodKind::AggConfidence ||
         k == MethodKind::AggDynamic;
}

inline bool uses_target(MethodKind k) { return !is_aggregation(k); }

struct MethodSpec {
  MethodKind kind = MethodKind::Erm;
  double alpha_half = 1.0;  // weight on the guidance term (alpha / 2)
  double ls_epsilon = 0.1;
  std::uint64_t ramp_steps = 0;  // KD_CE ramp length; 0 means half the run
  double hard_weight_beta = 1.0;

  void validate() const {
    if (!(alpha_half >= 0.0) || !std::isfinite(alpha_half)) throw ValidationError("method: alpha_half must be >= 0");
    if (!(ls_epsilon >= 0.0 && ls_epsilon < 1.0)) throw ValidationError("method: ls_epsilon must lie in [0, 1)");
    if (!(hard_weight_beta >= 0.0) || !std::isfinite(hard_weight_beta)) {
      throw ValidationError("method: hard_weight_beta must be >= 0");
    }
  }

  /// Short identifier used in file paths and report rows, e.g. "LFME_a1".
  std::string label() const {
    std::string out(to_string(kind));
    switch (kind) {
      case MethodKind::Erm:
      case MethodKind::AggAverage:
      case MethodKind::AggSoup:
      case MethodKind::AggConfidence:
      case MethodKind::AggDynamic:
        break;
      case MethodKind::LabelSmoothing:
        out += "_e" + csv::format_double(ls_epsilon);
        break;
      case MethodKind::ErmPlusExpertWeighted:
      case MethodKind::ErmPlusSelfWeighted:
        out += "_a" + csv::format_double(alpha_half) + "_b" + csv::format_double(hard_weight_beta);
        break;
      default:
        out += "_a" + csv::format_double(alpha_half);
    }
    return out;
  }

  bool operator==(const MethodSpec&) const = default;
};

enum class OptimizerKind { Sgd, Adam };

/// Source split the fixed probe batch is drawn from.
enum class ProbeSplit { Train, Val };

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::Adam;
  double lr = 1e-3;
  double weight_decay = 0.0;
  std::uint64_t steps = 5000;
  std::size_t batch_per_domain = 32;
  std::uint64_t seed = 0;
  std::uint64_t eval_every = 100;
  std::vector<std::size_t> hidden{64, 64};
  std::size_t probe_per_domain = 64;
  ProbeSplit probe_split = ProbeSplit::Train;

  void validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ValidationError("train.lr must be positive");
    if (!(weight_decay >= 0.0)) throw ValidationError("train.weight_decay must be >= 0");
    if (steps == 0) throw ValidationError("train.steps must be positive");
    if (batch_per_domain == 0) throw ValidationError("train.batch_per_domain must be positive");
    if (eval_every == 0) throw ValidationError("train.eval_every must be positive");
    for (auto h : hidden)
      if (h == 0) throw ValidationError("train.hidden widths must be positive");
  }

  bool operator==(const TrainConfig&) const = default;
};

}  // namespace lfme
