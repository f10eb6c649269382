#pragma once

// Asymmetric complementary masking: per-batch modality partitioning, token
// masking at ratio m, and the staged ratio schedule.

#include "coral/common.hpp"
#include "coral/rng.hpp"

#include <atomic>
#include <cstdint>
#include <map>
#include <vector>

namespace coral::masking {

enum class ViewId { First, Second };

struct MaskPlan {
  double ratio = 0.0;
  std::vector<int> partition_first;   // M1: modality indices masked in view one
  std::vector<int> partition_second;  // M2: complementary set, masked in view two
  ViewId view = ViewId::First;
  // token indices per masked modality (same indices applied to every sample
  // in the batch; one draw per plan)
  std::map<int, std::vector<int>> masked_token_indices;

  const std::vector<int>& masked_modalities() const {
    return view == ViewId::First ? partition_first : partition_second;
  }
};

struct MaskSchedule {
  enum class Mode { Increasing, Static };
  // (start_epoch, ratio) pairs; stage epochs strictly increasing
  std::vector<std::pair<int, double>> stages;
  Mode mode = Mode::Increasing;

  static MaskSchedule staged_default();    // 5% -> 35% -> 55% -> 75% over 25-epoch intervals
  static MaskSchedule constant(double m);  // single static stage
  void validate() const;
};

/// Number of plans constructed since process start (or last reset). The
/// trainer is the only legitimate producer; evaluation paths assert this
/// counter does not move.
std::uint64_t plans_built();
void reset_plans_built();

/// Uniformly random disjoint cover (M1, M2) of {0..n-1}. Sizes are equal for
/// even n; for odd n they differ by one with the larger side assigned to M1
/// or M2 with probability 1/2 each.
std::pair<std::vector<int>, std::vector<int>> partition_modalities(int n, Rng& rng);

/// k = ceil(m*L) distinct token indices, uniform without replacement.
std::vector<int> sample_mask_indices(int seq_len, double ratio, Rng& rng);

/// Zero the selected token rows of a sequence in place; returns the indices.
std::vector<int> apply_mask(MatF& tokens, double ratio, Rng& rng);
std::vector<int> apply_mask(MatD& tokens, double ratio, Rng& rng);

/// Piecewise-constant ratio lookup.
double schedule_ratio(const MaskSchedule& schedule, int epoch);

/// Complementary plans for one batch: both share a freshly drawn partition
/// and the ratio m; view one masks M1, view two masks M2. token_counts gives
/// L_i per modality so per-token decisions can be drawn up front.
std::pair<MaskPlan, MaskPlan> build_view_plans(int n_modalities, double ratio,
                                               const std::vector<int>& token_counts,
                                               Rng& rng);

}  // namespace coral::masking
