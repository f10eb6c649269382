#pragma once

// The three objective terms: InfoNCE shared/unique losses, cosine-embedding
// orthogonality loss, and their weighted composition.

#include "coral/autodiff.hpp"
#include "coral/common.hpp"

#include <utility>
#include <vector>

namespace coral::losses {

struct LossWeights {
  double lambda_s = 1.0;
  double lambda_u = 1.0;
  double lambda_o = 1.0;
  void validate() const {
    require(lambda_s >= 0 && lambda_u >= 0 && lambda_o >= 0,
            "loss weights must be non-negative");
  }
};

struct SimilarityConfig {
  double temperature = 0.1;
  bool symmetrize = true;
  void validate() const { require(temperature > 0, "temperature must be > 0"); }
};

/// Projected embeddings of the two views, one matrix per pathway, rows = batch.
template <class S>
struct BatchEmbeddings {
  ad::Var shared_first;
  ad::Var shared_second;
  std::vector<ad::Var> unique_first;
  std::vector<ad::Var> unique_second;

  int n_modalities() const { return static_cast<int>(unique_first.size()); }
};

/// -I_NCE(Z, Z'): in-batch negatives, cosine similarity at temperature tau,
/// positives on the diagonal; optionally symmetrized over both directions.
template <class S>
ad::Var info_nce(ad::Tape<S>& t, ad::Var z, ad::Var z_prime, const SimilarityConfig& cfg) {
  cfg.validate();
  require(t.value(z).rows() == t.value(z_prime).rows() &&
              t.value(z).cols() == t.value(z_prime).cols(),
          "info_nce: shape mismatch");
  require(t.value(z).rows() >= 2, "info_nce: need batch >= 2 for negatives");
  ad::Var a = t.l2_normalize_rows(z);
  ad::Var b = t.l2_normalize_rows(z_prime);
  ad::Var logits = t.scale(t.matmul_nt(a, b), S(1.0 / cfg.temperature));
  return t.info_nce_from_logits(logits, cfg.symmetrize);
}

template <class S>
ad::Var shared_loss(ad::Tape<S>& t, const BatchEmbeddings<S>& batch,
                    const SimilarityConfig& cfg) {
  return info_nce(t, batch.shared_first, batch.shared_second, cfg);
}

template <class S>
ad::Var unique_loss(ad::Tape<S>& t, const BatchEmbeddings<S>& batch,
                    const SimilarityConfig& cfg) {
  require(batch.n_modalities() >= 1, "unique_loss: need at least one modality");
  require(batch.unique_first.size() == batch.unique_second.size(),
          "unique_loss: view mismatch");
  std::vector<std::pair<ad::Var, S>> terms;
  for (int i = 0; i < batch.n_modalities(); ++i)
    terms.push_back({info_nce(t, batch.unique_first[static_cast<std::size_t>(i)],
                              batch.unique_second[static_cast<std::size_t>(i)], cfg),
                     S(1)});
  return t.add_scaled(terms);
}

/// Cosine embedding loss: mean over paired rows of max(0, cos). Zero at or
/// beyond 90 degrees, so orthogonal directions are not penalized.
template <class S>
ad::Var cel(ad::Tape<S>& t, ad::Var z, ad::Var z_prime) {
  require(t.value(z).rows() == t.value(z_prime).rows() &&
              t.value(z).cols() == t.value(z_prime).cols(),
          "cel: shape mismatch");
  ad::Var a = t.l2_normalize_rows(z);
  ad::Var b = t.l2_normalize_rows(z_prime);
  return t.mean_all(t.relu(t.rowwise_dot(a, b)));
}

/// Number of CEL terms Eq-counted: per view, each unique vs shared plus each
/// unique pair, over both views.
inline int orthogonality_term_count(int n_modalities) {
  return 2 * n_modalities + n_modalities * (n_modalities - 1);
}

template <class S>
ad::Var orthogonality_loss(ad::Tape<S>& t, const BatchEmbeddings<S>& batch) {
  const int n = batch.n_modalities();
  require(n >= 1, "orthogonality_loss: need at least one modality");
  std::vector<std::pair<ad::Var, S>> terms;
  for (int i = 0; i < n; ++i) {
    auto ui = static_cast<std::size_t>(i);
    terms.push_back({cel(t, batch.unique_first[ui], batch.shared_first), S(1)});
    terms.push_back({cel(t, batch.unique_second[ui], batch.shared_second), S(1)});
  }
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      auto ui = static_cast<std::size_t>(i), uj = static_cast<std::size_t>(j);
      terms.push_back({cel(t, batch.unique_first[ui], batch.unique_first[uj]), S(1)});
      terms.push_back({cel(t, batch.unique_second[ui], batch.unique_second[uj]), S(1)});
    }
  }
  require(static_cast<int>(terms.size()) == orthogonality_term_count(n),
          "orthogonality_loss: term count mismatch");
  return t.add_scaled(terms);
}

template <class S>
struct TotalLoss {
  ad::Var total;
  ad::Var shared;
  ad::Var unique;
  ad::Var orthogonal;

  struct Values {
    double total, shared, unique, orthogonal;
  };
  Values values(const ad::Tape<S>& t) const {
    return {static_cast<double>(t.scalar(total)), static_cast<double>(t.scalar(shared)),
            static_cast<double>(t.scalar(unique)),
            static_cast<double>(t.scalar(orthogonal))};
  }
};

template <class S>
TotalLoss<S> total_loss(ad::Tape<S>& t, const BatchEmbeddings<S>& batch,
                        const LossWeights& w, const SimilarityConfig& cfg) {
  w.validate();
  TotalLoss<S> out;
  out.shared = shared_loss(t, batch, cfg);
  out.unique = unique_loss(t, batch, cfg);
  out.orthogonal = orthogonality_loss(t, batch);
  out.total = t.add_scaled({{out.shared, S(w.lambda_s)},
                            {out.unique, S(w.lambda_u)},
                            {out.orthogonal, S(w.lambda_o)}});
  return out;
}

// ---- plain-matrix evaluation (no tape), shared with the disentanglement
// report so the statistic and the loss cannot drift apart ----

template <class S>
double cel_value(const Matrix<S>& z, const Matrix<S>& z_prime) {
  require(z.rows() == z_prime.rows() && z.cols() == z_prime.cols(),
          "cel_value: shape mismatch");
  double acc = 0;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    double na = z.row(r).norm(), nb = z_prime.row(r).norm();
    if (!(na > 1e-12) || !(nb > 1e-12))
      throw std::domain_error("cel_value: zero-norm row");
    double c = static_cast<double>(z.row(r).dot(z_prime.row(r))) / (na * nb);
    acc += std::max(0.0, c);
  }
  return acc / static_cast<double>(z.rows());
}

}  // namespace coral::losses
