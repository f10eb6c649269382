#pragma once

// Central finite-difference gradient checking shared by the autodiff, loss,
// and model test suites. Loss closures rebuild the tape from current
// parameter values on every call.

#include "coral/autodiff.hpp"
#include "coral/rng.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace gradcheck {

using coral::ad::Parameter;
using coral::ad::Tape;
using coral::ad::Var;

using LossFn = std::function<double()>;
// Fills parameter grads for the same loss; returns the loss value.
using BackwardFn = std::function<double()>;

struct Report {
  double max_rel_err = 0;  // |a-n| / max(|a|, |n|, 1)
  double max_abs_err = 0;
  int probes = 0;
};

/// Probes `probes_per_param` random entries of every parameter.
inline Report check(std::vector<Parameter<double>*> params, const BackwardFn& backward,
                    const LossFn& loss, int probes_per_param, coral::Rng& rng,
                    double eps = 1e-3) {
  for (auto* p : params) p->zero_grad();
  backward();
  Report rep;
  for (auto* p : params) {
    const int probes = std::min<int>(probes_per_param, static_cast<int>(p->size()));
    auto picks = rng.sample_without_replacement(static_cast<int>(p->size()), probes);
    for (int idx : picks) {
      double* slot = p->value.data() + idx;
      const double orig = *slot;
      *slot = orig + eps;
      const double f_plus = loss();
      *slot = orig - eps;
      const double f_minus = loss();
      *slot = orig;
      const double numeric = (f_plus - f_minus) / (2 * eps);
      const double analytic = p->grad.data()[idx];
      const double abs_err = std::abs(numeric - analytic);
      const double rel = abs_err / std::max({std::abs(numeric), std::abs(analytic), 1.0});
      rep.max_rel_err = std::max(rep.max_rel_err, rel);
      rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
      ++rep.probes;
    }
  }
  return rep;
}

inline coral::Matrix<double> random_matrix(Eigen::Index rows, Eigen::Index cols,
                                           coral::Rng& rng, double scale = 1.0) {
  coral::Matrix<double> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

}  // namespace gradcheck
