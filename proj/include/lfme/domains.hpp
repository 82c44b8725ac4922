#pragma once

// Multi-domain classification data: a synthetic generator with shared
// (invariant) class structure plus domain-specific spurious features, CSV
// ingestion, and per-domain minibatch sampling.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "lfme/csv.hpp"
#include "lfme/errors.hpp"
#include "lfme/random.hpp"
#include "lfme/tensor.hpp"

namespace lfme {

struct SuiteSpec {
  std::size_t num_sources = 3;  // M; the generator emits M + 1 domains
  std::size_t num_classes = 5;  // K
  std::size_t n_per_domain = 1000;
  std::size_t d_inv = 8;
  std::size_t d_spu = 8;
  double rho = 0.9;    // label/spurious correlation inside each domain
  double sigma = 1.0;  // std of the invariant features around class means
  std::uint64_t seed = 0;

  void validate() const {
    if (num_sources < 2) throw ValidationError("suite: need at least 2 source domains");
    if (num_classes < 2) throw ValidationError("suite: need at least 2 classes");
    if (n_per_domain < num_classes) throw ValidationError("suite: n_per_domain must be >= num_classes");
    if (!(rho >= 0.0 && rho <= 1.0)) throw ValidationError("suite: rho must lie in [0, 1]");
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ValidationError("suite: sigma must be positive");
    if (d_inv < num_classes - 1) throw ValidationError("suite: d_inv must be >= num_classes - 1");
    if (d_spu != 0 && d_spu < num_classes - 1) {
      throw ValidationError("suite: d_spu must be 0 or >= num_classes - 1");
    }
  }

  std::size_t feature_dim() const { return d_inv + d_spu; }

  bool operator==(const SuiteSpec&) const = default;
};

struct DomainDataset {
  int domain_id = 0;
  std::string name;
  std::size_t num_classes = 0;
  Tensor features;  // N x d
  std::vector<int> labels;
  std::vector<std::size_t> train_idx;  // sorted, disjoint from val_idx
  std::vector<std::size_t> val_idx;
  Tensor spurious_rotation;  // d_spu x d_spu; empty for ingested data
  std::string provenance;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return features.cols(); }

  Tensor gather(std::span<const std::size_t> idx) const {
    const std::size_t d = dim();
    Tensor out({idx.size(), d});
    for (std::size_t r = 0; r < idx.size(); ++r) {
      auto src = features.row_span(idx[r]);
      std::copy(src.begin(), src.end(), out.data().begin() + r * d);
    }
    return out;
  }

  std::vector<int> gather_labels(std::span<const std::size_t> idx) const {
    std::vector<int> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(labels[i]);
    return out;
  }

  bool operator==(const DomainDataset&) const = default;
};

using Suite = std::vector<DomainDataset>;

inline Tensor one_hot(std::span<const int> labels, std::size_t num_classes) {
  Tensor out({labels.size(), num_classes});
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= num_classes) {
      throw ValidationError("label " + std::to_string(labels[r]) + " outside [0, " +
                            std::to_string(num_classes) + ")");
    }
    out(r, static_cast<std::size_t>(labels[r])) = 1.0;
  }
  return out;
}

namespace detail {

/// Vertices of a regular simplex centred at the origin, K points in R^{K-1},
/// each of Euclidean norm `radius`. Built from the Helmert basis of the
/// sum-zero subspace of R^K.
inline std::vector<std::vector<double>> simplex_vertices(std::size_t k, double radius) {
  std::vector<std::vector<double>> basis;  // K-1 orthonormal vectors in R^K
  for (std::size_t j = 1; j < k; ++j) {
    std::vector<double> h(k, 0.0);
    const double norm = std::sqrt(static_cast<double>(j * (j + 1)));
    for (std::size_t i = 0; i < j; ++i) h[i] = 1.0 / norm;
    h[j] = -static_cast<double>(j) / norm;
    basis.push_back(std::move(h));
  }
  const double vnorm = std::sqrt(static_cast<double>(k - 1) / static_cast<double>(k));
  std::vector<std::vector<double>> verts(k, std::vector<double>(k - 1, 0.0));
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t j = 0; j + 1 < k; ++j) {
      // <e_c - 1/K, h_j> = h_j[c] since h_j sums to zero
      verts[c][j] = basis[j][c] * radius / vnorm;
    }
  return verts;
}

/// Haar-distributed orthogonal matrix (Gram-Schmidt on a Gaussian matrix).
/// Gram-Schmidt on the rows of a square matrix.
inline Tensor orthonormalize_rows(Tensor q) {
  const std::size_t d = q.rows();
  for (std::size_t r = 0; r < d; ++r) {
    for (std::size_t p = 0; p < r; ++p) {
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += q(r, c) * q(p, c);
      for (std::size_t c = 0; c < d; ++c) q(r, c) -= dot * q(p, c);
    }
    double norm = 0.0;
    for (std::size_t c = 0; c < d; ++c) norm += q(r, c) * q(r, c);
    norm = std::sqrt(norm);
    for (std::size_t c = 0; c < d; ++c) q(r, c) /= norm;
  }
  return q;
}

inline Tensor random_rotation(std::size_t d, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor g({d, d});
  for (auto& v : g.values()) v = normal(rng);
  return orthonormalize_rows(std::move(g));
}

inline double frobenius_distance(const Tensor& a, const Tensor& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

}  // namespace detail

/// Label-stratified 80/20 train/val split, deterministic in `seed`.
inline void assign_split(DomainDataset& ds, std::uint64_t seed, double val_fraction = 0.2) {
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < ds.labels.size(); ++i) by_class[ds.labels[i]].push_back(i);
  ds.train_idx.clear();
  ds.val_idx.clear();
  Rng rng(derive_seed(seed, "split", static_cast<std::uint64_t>(ds.domain_id)));
  for (auto& [label, idx] : by_class) {
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(idx.size())));
    ds.val_idx.insert(ds.val_idx.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
    ds.train_idx.insert(ds.train_idx.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
  }
  std::sort(ds.train_idx.begin(), ds.train_idx.end());
  std::sort(ds.val_idx.begin(), ds.val_idx.end());
}

/// Generates M source-style domains plus one extra domain whose spurious
/// rotation is fresh. Every domain shares the invariant class-conditional
/// Gaussian (simplex means of norm 2, std sigma). Spurious coordinates are
/// R_i (rho m_y + sqrt(1 - rho^2) xi) with xi matched to the covariance of m_y,
/// so any projection inside the class subspace correlates with the label
/// projection at exactly rho in expectation.
inline Suite generate_suite(const SuiteSpec& spec) {
  spec.validate();
  const std::size_t k = spec.num_classes;
  const std::size_t d = spec.feature_dim();
  const auto means = detail::simplex_vertices(k, 2.0);
  const double class_std = 2.0 / std::sqrt(static_cast<double>(k - 1));
  const double mix = std::sqrt(std::max(0.0, 1.0 - spec.rho * spec.rho));

  std::vector<Tensor> rotations;
  for (std::size_t i = 0; i <= spec.num_sources; ++i) {
    if (spec.d_spu == 0) {
      rotations.emplace_back(Shape{0, 0});
      continue;
    }
    for (std::uint64_t attempt = 0;; ++attempt) {
      Rng rrng(derive_seed(spec.seed, "rotation", (i << 16) + attempt));
      Tensor r = detail::random_rotation(spec.d_spu, rrng);
      bool distinct = true;
      for (const auto& prev : rotations) distinct = distinct && detail::frobenius_distance(prev, r) > 0.1;
      if (distinct) {
        rotations.push_back(std::move(r));
        break;
      }
    }
  }

  Suite suite;
  for (std::size_t i = 0; i <= spec.num_sources; ++i) {
    DomainDataset ds;
    ds.domain_id = static_cast<int>(i);
    ds.name = "domain" + std::to_string(i);
    ds.num_classes = k;
    ds.spurious_rotation = rotations[i];
    ds.provenance = "synthetic seed=" + std::to_string(spec.seed) + (i == spec.num_sources ? " fresh-rotation" : "");

    Rng rng(derive_seed(spec.seed, "domain", i));
    std::normal_distribution<double> normal(0.0, 1.0);
    ds.labels.resize(spec.n_per_domain);
    for (std::size_t n = 0; n < spec.n_per_domain; ++n) ds.labels[n] = static_cast<int>(n % k);
    std::shuffle(ds.labels.begin(), ds.labels.end(), rng);

    ds.features = Tensor({spec.n_per_domain, d});
    std::vector<double> latent(spec.d_spu);
    for (std::size_t n = 0; n < spec.n_per_domain; ++n) {
      const auto& m = means[static_cast<std::size_t>(ds.labels[n])];
      for (std::size_t j = 0; j < spec.d_inv; ++j) {
        const double mu = j + 1 < k ? m[j] : 0.0;
        ds.features(n, j) = mu + spec.sigma * normal(rng);
      }
      if (spec.d_spu == 0) continue;
      // Latent dims past the class subspace stay zero.
      std::fill(latent.begin(), latent.end(), 0.0);
      for (std::size_t j = 0; j + 1 < k; ++j) latent[j] = spec.rho * m[j] + mix * class_std * normal(rng);
      const auto& rot = ds.spurious_rotation;
      for (std::size_t a = 0; a < spec.d_spu; ++a) {
        double acc = 0.0;
        for (std::size_t b = 0; b < spec.d_spu; ++b) acc += rot(a, b) * latent[b];
        ds.features(n, spec.d_inv + a) = acc;
      }
    }
    assign_split(ds, spec.seed);
    suite.push_back(std::move(ds));
  }
  return suite;
}

/// Reads a multi-domain CSV: header row, numeric feature columns plus a
/// domain column and an integer label column. Domains are ordered
/// numerically when every value is an integer, lexicographically otherwise.
/// Features are standardised with statistics pooled over all rows unless
/// `standardize` is false, in which case values pass through unchanged.
/// `num_classes == 0` infers K as max label + 1.
inline Suite load_csv_suite(const std::filesystem::path& path, const std::string& domain_column,
                            const std::string& label_column, std::size_t num_classes = 0,
                            std::uint64_t split_seed = 0, bool standardize = true) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::string> header;
  if (!csv::read_record(in, header)) throw FormatError(path.string() + ": empty file");
  std::ptrdiff_t dom_col = -1, lab_col = -1;
  std::vector<std::size_t> feat_cols;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (header[c] == domain_column) {
      dom_col = static_cast<std::ptrdiff_t>(c);
    } else if (header[c] == label_column) {
      lab_col = static_cast<std::ptrdiff_t>(c);
    } else {
      feat_cols.push_back(c);
    }
  }
  if (dom_col < 0) throw ValidationError(path.string() + ": missing domain column '" + domain_column + "'");
  if (lab_col < 0) throw ValidationError(path.string() + ": missing label column '" + label_column + "'");
  if (feat_cols.empty()) throw ValidationError(path.string() + ": no feature columns");

  std::vector<std::string> row_domain;
  std::vector<int> row_label;
  std::vector<double> feats;
  std::vector<std::string> fields;
  std::size_t line = 1;
  while (csv::read_record(in, fields)) {
    ++line;
    if (fields.size() == 1 && fields[0].empty()) continue;
    if (fields.size() != header.size()) {
      throw FormatError(path.string() + ": row " + std::to_string(line) + " has " +
                        std::to_string(fields.size()) + " fields, header has " + std::to_string(header.size()));
    }
    for (auto c : feat_cols) {
      auto v = csv::parse_double(fields[c]);
      if (!v || !std::isfinite(*v)) {
        throw FormatError(path.string() + ": non-numeric feature at row " + std::to_string(line) +
                          ", column '" + header[c] + "': '" + fields[c] + "'");
      }
      feats.push_back(*v);
    }
    auto lab = csv::parse_int(fields[static_cast<std::size_t>(lab_col)]);
    if (!lab) {
      throw FormatError(path.string() + ": non-integer label at row " + std::to_string(line) + ": '" +
                        fields[static_cast<std::size_t>(lab_col)] + "'");
    }
    if (*lab < 0 || (num_classes && static_cast<std::size_t>(*lab) >= num_classes)) {
      throw ValidationError(path.string() + ": label " + std::to_string(*lab) + " at row " +
                            std::to_string(line) + " outside [0, " + std::to_string(num_classes) + ")");
    }
    row_label.push_back(static_cast<int>(*lab));
    row_domain.push_back(fields[static_cast<std::size_t>(dom_col)]);
  }
  if (row_label.empty()) throw ValidationError(path.string() + ": no data rows");
  if (num_classes == 0) num_classes = static_cast<std::size_t>(*std::max_element(row_label.begin(), row_label.end())) + 1;
  if (num_classes < 2) throw ValidationError(path.string() + ": need at least 2 classes");

  std::vector<std::string> names = row_domain;
  std::sort(names.begin(), names.end());
  names.erase(std::unique(names.begin(), names.end()), names.end());
  const bool numeric = std::all_of(names.begin(), names.end(), [](const std::string& s) { return csv::parse_int(s).has_value(); });
  if (numeric) {
    std::sort(names.begin(), names.end(), [](const std::string& a, const std::string& b) { return *csv::parse_int(a) < *csv::parse_int(b); });
  }
  if (names.size() < 2) throw ValidationError(path.string() + ": need at least 2 domains, found " + std::to_string(names.size()));

  const std::size_t d = feat_cols.size();
  const std::size_t n = row_label.size();
  std::vector<double> mean(d, 0.0), sd(d, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) mean[j] += feats[r * d + j];
  for (auto& m : mean) m /= static_cast<double>(n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) {
      const double dv = feats[r * d + j] - mean[j];
      sd[j] += dv * dv;
    }
  for (auto& s : sd) {
    s = std::sqrt(s / static_cast<double>(n));
    if (s == 0.0) s = 1.0;
  }
  if (!standardize) {
    std::fill(mean.begin(), mean.end(), 0.0);
    std::fill(sd.begin(), sd.end(), 1.0);
  }

  std::unordered_map<std::string, std::size_t> index_of;
  for (std::size_t i = 0; i < names.size(); ++i) index_of[names[i]] = i;
  std::vector<std::vector<std::size_t>> rows_of(names.size());
  for (std::size_t r = 0; r < n; ++r) rows_of[index_of[row_domain[r]]].push_back(r);

  Suite suite;
  for (std::size_t i = 0; i < names.size(); ++i) {
    DomainDataset ds;
    ds.domain_id = static_cast<int>(i);
    ds.name = names[i];
    ds.num_classes = num_classes;
    ds.provenance = "csv " + path.filename().string();
    ds.features = Tensor({rows_of[i].size(), d});
    for (std::size_t r = 0; r < rows_of[i].size(); ++r) {
      const std::size_t src = rows_of[i][r];
      for (std::size_t j = 0; j < d; ++j) ds.features(r, j) = (feats[src * d + j] - mean[j]) / sd[j];
      ds.labels.push_back(row_label[src]);
    }
    assign_split(ds, split_seed);
    suite.push_back(std::move(ds));
  }
  return suite;
}

/// Writes one domain as CSV: f0..f{d-1},domain,label with round-trip precision.
inline void write_domain_csv(const DomainDataset& ds, std::ostream& out, bool header = true) {
  std::vector<std::string> fields;
  if (header) {
    for (std::size_t j = 0; j < ds.dim(); ++j) fields.push_back("f" + std::to_string(j));
    fields.emplace_back("domain");
    fields.emplace_back("label");
    csv::write_record(out, fields);
  }
  for (std::size_t r = 0; r < ds.size(); ++r) {
    fields.clear();
    for (double v : ds.features.row_span(r)) fields.push_back(csv::format_double(v));
    fields.push_back(ds.name);
    fields.push_back(std::to_string(ds.labels[r]));
    csv::write_record(out, fields);
  }
}

// ---------------------------------------------------------------------------
// Minibatches
// ---------------------------------------------------------------------------

/// One training step's data: an aligned minibatch per source domain plus
/// their concatenation (domain 0 rows first), so row r of the concatenated
/// batch and row r of the concatenated expert outputs refer to one sample.
struct Batch {
  std::vector<Tensor> xs;
  std::vector<std::vector<int>> labels;
  std::vector<std::vector<std::size_t>> indices;  // dataset row indices
  Tensor all_x;
  std::vector<int> all_labels;
  std::vector<int> domain_of_row;  // position of the source in the list
};

/// Stateless-in-step sampler: each source's training rows are visited in a
/// seeded random order per epoch; the epoch permutation is reshuffled when a
/// domain is exhausted. batch(step) depends only on (seed, step).
class BatchSampler {
 public:
  BatchSampler(std::span<const DomainDataset> sources, std::size_t batch_per_domain, std::uint64_t seed)
      : sources_(sources), batch_(batch_per_domain), seed_(seed), cache_(sources.size()) {
    if (batch_per_domain == 0) throw ValidationError("batch_per_domain must be positive");
    for (const auto& s : sources_) {
      if (s.train_idx.size() < batch_per_domain) {
        throw ValidationError("batch_per_domain " + std::to_string(batch_per_domain) + " exceeds the " +
                              std::to_string(s.train_idx.size()) + " training rows of " + s.name);
      }
    }
  }

  Batch batch(std::uint64_t step) {
    Batch b;
    std::vector<Tensor> parts;
    for (std::size_t i = 0; i < sources_.size(); ++i) {
      const auto& ds = sources_[i];
      const std::size_t n = ds.train_idx.size();
      std::vector<std::size_t> rows;
      rows.reserve(batch_);
      for (std::size_t j = 0; j < batch_; ++j) {
        const std::uint64_t pos = step * batch_ + j;
        const auto& perm = permutation(i, pos / n);
        rows.push_back(ds.train_idx[perm[pos % n]]);
      }
      b.xs.push_back(ds.gather(rows));
      b.labels.push_back(ds.gather_labels(rows));
      b.all_labels.insert(b.all_labels.end(), b.labels.back().begin(), b.labels.back().end());
      b.domain_of_row.insert(b.domain_of_row.end(), batch_, static_cast<int>(i));
      b.indices.push_back(std::move(rows));
    }
    b.all_x = concat_rows(b.xs);
    return b;
  }

 private:
  const std::vector<std::size_t>& permutation(std::size_t domain, std::uint64_t epoch) {
    auto& entry = cache_[domain];
    if (!entry.valid || entry.epoch != epoch) {
      entry.perm.resize(sources_[domain].train_idx.size());
      std::iota(entry.perm.begin(), entry.perm.end(), std::size_t{0});
      Rng rng(derive_seed(seed_, "batches", (static_cast<std::uint64_t>(domain) << 40) + epoch));
      std::shuffle(entry.perm.begin(), entry.perm.end(), rng);
      entry.epoch = epoch;
      entry.valid = true;
    }
    return entry.perm;
  }

  struct CacheEntry {
    bool valid = false;
    std::uint64_t epoch = 0;
    std::vector<std::size_t> perm;
  };

  std::span<const DomainDataset> sources_;
  std::size_t batch_;
  std::uint64_t seed_;
  std::vector<CacheEntry> cache_;
};

inline Batch make_batches(std::span<const DomainDataset> sources, std::size_t batch_per_domain,
                          std::uint64_t seed, std::uint64_t step) {
  return BatchSampler(sources, batch_per_domain, seed).batch(step);
}

/// Source domains and the held-out domain for one leave-one-out split.
struct LeaveOneOut {
  Suite sources;
  DomainDataset held_out;
};

inline LeaveOneOut split_leave_one_out(const Suite& suite, std::size_t held_out) {
  if (held_out >= suite.size()) throw ValidationError("held-out domain index out of range");
  if (suite.size() < 3) throw ValidationError("leave-one-out needs at least 2 remaining source domains");
  LeaveOneOut out;
  for (std::size_t i = 0; i < suite.size(); ++i) {
    if (i == held_out) {
      out.held_out = suite[i];
    } else {
      out.sources.push_back(suite[i]);
    }
  }
  return out;
}

}  // namespace lfme
