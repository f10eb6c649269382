#pragma once

// Controllable synthetic bimodal benchmark. Redundancy, uniqueness, and
// synergy are induced by construction: paired samples share the shape factor,
// textures are drawn independently per modality, and modality-two color
// follows a fixed texture->color permutation of modality one. Payloads are
// factor-vectors: concatenated one-hot blocks plus Gaussian noise, passed
// through a per-modality orthogonal scramble so the modalities are not
// coordinate-aligned.

#include "coral/common.hpp"
#include "coral/rng.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace coral::synth {

struct FactorTriple {
  int shape = 0;
  int texture = 0;
  int color = 0;
};

struct MultimodalSample {
  std::uint64_t sample_id = 0;
  std::vector<Eigen::VectorXd> views;   // one payload per modality
  std::vector<FactorTriple> factors;    // ground truth per modality
  int synergy_label = 0;                // 1 iff color_2 == mapping[texture_1]
};

struct SynergyMapping {
  std::vector<int> map;  // texture index -> color index, a bijection

  std::vector<int> inverse() const;
  void validate(int cardinality) const;
};

struct SynthConfig {
  int cardinality = 10;
  int n_train = 10000;
  int n_test = 4096;
  double noise_sigma = 0.1;

  int n_modalities() const { return 2; }
  int payload_dim() const { return 3 * cardinality; }
  void validate() const;
};

struct DatasetSplit {
  std::vector<MultimodalSample> train;
  std::vector<MultimodalSample> test;
  SynergyMapping mapping;
  std::uint64_t seed = 0;
  SynthConfig config;
  std::vector<MatD> scrambles;  // per-modality orthogonal mixing matrices
};

enum class ProbeTask { Redundancy, Uniqueness, Synergy };

inline int probe_classes(ProbeTask task, int cardinality) {
  return task == ProbeTask::Synergy ? 2 : cardinality;
}
std::string probe_task_name(ProbeTask task);
ProbeTask probe_task_from_name(const std::string& name);

/// Deterministic in (config, seed). Every train pair adheres to the synergy
/// mapping; test pairs are balanced 50/50 between adherent and color-resampled
/// negatives, arranged so both halves of the test list stay balanced.
DatasetSplit generate_trifeature(const SynthConfig& config, std::uint64_t seed);

/// Redundancy -> shared shape, Uniqueness -> modality-one texture,
/// Synergy -> adherence flag.
std::vector<int> probe_labels(const std::vector<MultimodalSample>& samples, ProbeTask task);

// ---- serialization ----
// One flat binary file per split: header {magic "CORALDS1", version u32,
// n_modalities u32, cardinality u32, n_samples u64, seed u64} followed by
// fixed-width records. Round trips are bit-exact.

void save_samples(const std::string& path, const std::vector<MultimodalSample>& samples,
                  const SynthConfig& config, std::uint64_t seed);
std::vector<MultimodalSample> load_samples(const std::string& path, SynthConfig* config_out,
                                           std::uint64_t* seed_out);

/// Writes train/test record files, the probe-label CSV (sample_id, task,
/// label), and a JSON sidecar with the mapping and generator config.
void save_split(const std::string& dir, const DatasetSplit& split);
DatasetSplit load_split(const std::string& dir);

/// Fraction of samples whose modality-two color equals mapping[texture_1].
double adherence_rate(const std::vector<MultimodalSample>& samples,
                      const SynergyMapping& mapping);

}  // namespace coral::synth
