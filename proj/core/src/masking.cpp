#include "coral/masking.hpp"

#include <algorithm>
#include <cmath>

namespace coral::masking {

namespace {
std::atomic<std::uint64_t> g_plans_built{0};

template <class S>
std::vector<int> apply_mask_impl(Matrix<S>& tokens, double ratio, Rng& rng) {
  require(ratio >= 0.0 && ratio <= 1.0, "apply_mask: ratio must be in [0,1]");
  auto idx = sample_mask_indices(static_cast<int>(tokens.rows()), ratio, rng);
  for (int r : idx) tokens.row(r).setZero();
  return idx;
}
}  // namespace

std::uint64_t plans_built() { return g_plans_built.load(); }
void reset_plans_built() { g_plans_built.store(0); }

MaskSchedule MaskSchedule::staged_default() {
  return MaskSchedule{{{0, 0.05}, {25, 0.35}, {50, 0.55}, {75, 0.75}}, Mode::Increasing};
}

MaskSchedule MaskSchedule::constant(double m) {
  return MaskSchedule{{{0, m}}, Mode::Static};
}

void MaskSchedule::validate() const {
  require(!stages.empty(), "mask schedule: at least one stage required");
  require(stages.front().first == 0, "mask schedule: first stage must start at epoch 0");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    require(stages[i].second >= 0.0 && stages[i].second <= 1.0,
            "mask schedule: ratios must be in [0,1]");
    if (i > 0) {
      require(stages[i].first > stages[i - 1].first,
              "mask schedule: stage epochs must be strictly increasing");
      if (mode == Mode::Increasing)
        require(stages[i].second >= stages[i - 1].second,
                "mask schedule: increasing mode requires non-decreasing ratios");
    }
  }
}

std::pair<std::vector<int>, std::vector<int>> partition_modalities(int n, Rng& rng) {
  require(n >= 2, "partition_modalities: need n >= 2");
  int size_first = n / 2;
  if (n % 2 == 1) size_first = (rng.uniform_below(2) == 0) ? (n + 1) / 2 : n / 2;
  std::vector<int> m1 = rng.sample_without_replacement(n, size_first);
  std::vector<int> m2;
  m2.reserve(static_cast<std::size_t>(n - size_first));
  std::size_t j = 0;
  for (int i = 0; i < n; ++i) {
    if (j < m1.size() && m1[j] == i) {
      ++j;
    } else {
      m2.push_back(i);
    }
  }
  return {std::move(m1), std::move(m2)};
}

std::vector<int> sample_mask_indices(int seq_len, double ratio, Rng& rng) {
  require(seq_len >= 1, "sample_mask_indices: empty sequence");
  require(ratio >= 0.0 && ratio <= 1.0, "sample_mask_indices: ratio must be in [0,1]");
  // round up so any m > 0 masks at least one token
  int k = static_cast<int>(std::ceil(ratio * seq_len - 1e-12));
  k = std::min(k, seq_len);
  return rng.sample_without_replacement(seq_len, k);
}

std::vector<int> apply_mask(MatF& tokens, double ratio, Rng& rng) {
  return apply_mask_impl(tokens, ratio, rng);
}
std::vector<int> apply_mask(MatD& tokens, double ratio, Rng& rng) {
  return apply_mask_impl(tokens, ratio, rng);
}

double schedule_ratio(const MaskSchedule& schedule, int epoch) {
  schedule.validate();
  require(epoch >= 0, "schedule_ratio: epoch must be >= 0");
  double r = schedule.stages.front().second;
  for (const auto& [start, ratio] : schedule.stages) {
    if (epoch >= start) r = ratio;
  }
  return r;
}

std::pair<MaskPlan, MaskPlan> build_view_plans(int n_modalities, double ratio,
                                               const std::vector<int>& token_counts,
                                               Rng& rng) {
  require(static_cast<int>(token_counts.size()) == n_modalities,
          "build_view_plans: token_counts size mismatch");
  auto [m1, m2] = partition_modalities(n_modalities, rng);
  MaskPlan first{ratio, m1, m2, ViewId::First, {}};
  MaskPlan second{ratio, m1, m2, ViewId::Second, {}};
  for (int i : m1)
    first.masked_token_indices[i] =
        sample_mask_indices(token_counts[static_cast<std::size_t>(i)], ratio, rng);
  for (int i : m2)
    second.masked_token_indices[i] =
        sample_mask_indices(token_counts[static_cast<std::size_t>(i)], ratio, rng);
  g_plans_built.fetch_add(2);
  return {std::move(first), std::move(second)};
}

}  // namespace coral::masking
