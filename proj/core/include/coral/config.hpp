#pragma once

// Experiment configuration: a single JSON tree with an explicit schema
// version. Unknown keys are hard errors; dry-run prints the fully resolved
// tree so ablation configs stay diffable.

#include "coral/common.hpp"
#include "coral/losses.hpp"
#include "coral/masking.hpp"
#include "coral/model.hpp"
#include "coral/optimizer.hpp"
#include "coral/synth.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace coral {

struct AugmentConfig {
  double noise_sigma = 0.05;
  double dropout_p = 0.1;
  void validate() const {
    require(noise_sigma >= 0, "augment: noise_sigma must be >= 0");
    require(dropout_p >= 0 && dropout_p < 1, "augment: dropout_p must be in [0,1)");
  }
};

struct ProbeConfig {
  double l2 = 0.0;       // no regularization unless asked for
  int max_iters = 500;
  double tol = 1e-6;
  void validate() const {
    require(l2 >= 0, "probe: l2 must be >= 0");
    require(max_iters >= 1, "probe: max_iters must be >= 1");
    require(tol > 0, "probe: tol must be > 0");
  }
};

struct FinetuneConfig {
  enum class PositivePolicy { SameClass, SameSampleOnly };
  PositivePolicy policy = PositivePolicy::SameClass;
  double mask_ratio = 0.20;
  double lambda_o = 1.0;
  bool freeze_heads = true;
  int patience = 10;
  int max_epochs = 100;
  double lr = 1e-4;
  void validate() const {
    require(mask_ratio >= 0 && mask_ratio <= 1, "finetune: mask_ratio must be in [0,1]");
    require(lambda_o >= 0, "finetune: lambda_o must be >= 0");
    require(patience >= 1, "finetune: patience must be >= 1");
    require(max_epochs >= 1, "finetune: max_epochs must be >= 1");
    require(lr > 0, "finetune: lr must be > 0");
  }
};

struct ExperimentConfig {
  int schema_version = 1;
  synth::SynthConfig data;
  std::uint64_t data_seed = 7;
  std::string data_dir = "data/trifeature";
  ModelConfig model;
  OptimizerConfig optim;
  masking::MaskSchedule schedule = masking::MaskSchedule::staged_default();
  bool masking_enabled = true;
  losses::LossWeights weights;
  losses::SimilarityConfig similarity;
  AugmentConfig augment;
  ProbeConfig probe;
  FinetuneConfig finetune;
  std::vector<std::uint64_t> seeds = {41, 42, 43, 44, 45};
  std::string out_dir = "runs/default";
  int checkpoint_every = 25;

  void validate() const;

  /// Hash over the architecture-relevant subtree; checkpoints refuse to load
  /// into a differently shaped model.
  std::uint64_t model_hash() const;
};

ExperimentConfig config_from_json_text(const std::string& text);
ExperimentConfig load_config(const std::string& path);
std::string config_to_json_text(const ExperimentConfig& cfg);
void save_config(const std::string& path, const ExperimentConfig& cfg);

}  // namespace coral
