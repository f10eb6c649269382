#pragma once

// Brute-force loss oracles, deliberately written as plain loops over
// explicitly materialized similarity matrices. These stay independent of the
// tape implementation they are used to check.

#include "coral/common.hpp"

#include <cmath>
#include <vector>

namespace oracles {

using coral::MatD;

inline double cosine(const MatD& a, Eigen::Index i, const MatD& b, Eigen::Index j) {
  double dot = 0, na = 0, nb = 0;
  for (Eigen::Index c = 0; c < a.cols(); ++c) {
    dot += a(i, c) * b(j, c);
    na += a(i, c) * a(i, c);
    nb += b(j, c) * b(j, c);
  }
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

inline double info_nce(const MatD& z, const MatD& zp, double tau, bool symmetrized) {
  const Eigen::Index B = z.rows();
  MatD sim(B, B);
  for (Eigen::Index i = 0; i < B; ++i)
    for (Eigen::Index j = 0; j < B; ++j) sim(i, j) = cosine(z, i, zp, j) / tau;
  double row_loss = 0;
  for (Eigen::Index k = 0; k < B; ++k) {
    double denom = 0;
    for (Eigen::Index j = 0; j < B; ++j) denom += std::exp(sim(k, j));
    row_loss += -std::log(std::exp(sim(k, k)) / denom);
  }
  row_loss /= static_cast<double>(B);
  if (!symmetrized) return row_loss;
  double col_loss = 0;
  for (Eigen::Index k = 0; k < B; ++k) {
    double denom = 0;
    for (Eigen::Index i = 0; i < B; ++i) denom += std::exp(sim(i, k));
    col_loss += -std::log(std::exp(sim(k, k)) / denom);
  }
  col_loss /= static_cast<double>(B);
  return 0.5 * (row_loss + col_loss);
}

inline double cel(const MatD& z, const MatD& zp) {
  double acc = 0;
  for (Eigen::Index k = 0; k < z.rows(); ++k) {
    double c = cosine(z, k, zp, k);
    if (c > 0) acc += c;
  }
  return acc / static_cast<double>(z.rows());
}

struct Batch {
  MatD shared_first, shared_second;
  std::vector<MatD> unique_first, unique_second;
};

inline double orthogonality(const Batch& b) {
  const int n = static_cast<int>(b.unique_first.size());
  double total = 0;
  for (int i = 0; i < n; ++i) {
    total += cel(b.unique_first[static_cast<std::size_t>(i)], b.shared_first);
    total += cel(b.unique_second[static_cast<std::size_t>(i)], b.shared_second);
  }
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      total += cel(b.unique_first[static_cast<std::size_t>(i)],
                   b.unique_first[static_cast<std::size_t>(j)]);
      total += cel(b.unique_second[static_cast<std::size_t>(i)],
                   b.unique_second[static_cast<std::size_t>(j)]);
    }
  }
  return total;
}

inline double unique_sum(const Batch& b, double tau, bool sym) {
  double total = 0;
  for (std::size_t i = 0; i < b.unique_first.size(); ++i)
    total += info_nce(b.unique_first[i], b.unique_second[i], tau, sym);
  return total;
}

inline double total(const Batch& b, double ls, double lu, double lo, double tau, bool sym) {
  return ls * info_nce(b.shared_first, b.shared_second, tau, sym) + lu * unique_sum(b, tau, sym) +
         lo * orthogonality(b);
}

}  // namespace oracles
