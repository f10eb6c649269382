#pragma once

// Self-supervised pretraining (augment -> dual-path forward under
// complementary mask plans -> composite loss -> AdamW) and the supervised
// contrastive fine-tuning mode.

#include "coral/config.hpp"
#include "coral/model.hpp"
#include "coral/optimizer.hpp"
#include "coral/synth.hpp"

#include <functional>
#include <string>
#include <vector>

namespace coral::train {

/// Named RNG streams derived from one master seed. Consuming one stream
/// leaves the others untouched.
struct Streams {
  Rng param_init;
  Rng augment;
  Rng masking;
  Rng data_order;
};
Streams make_streams(std::uint64_t master_seed);

struct StepMetrics {
  std::int64_t step = 0;
  double loss_shared = 0;
  double loss_unique = 0;
  double loss_orthogonal = 0;
  double total = 0;
  double mask_ratio = 0;
  double lr = 0;
};

struct MaskAuditRecord {
  int epoch;
  double ratio;
  std::vector<int> m1, m2;
};

struct PretrainHooks {
  std::function<void(const StepMetrics&)> on_step;
  std::function<void(const MaskAuditRecord&)> on_mask;
  std::function<void(int epoch, double mean_total)> on_epoch_end;
  std::function<void(int epoch, double ratio)> on_schedule_transition;
  std::function<void(int epoch)> on_checkpoint;  // called at checkpoint_every and at the end
};

struct PretrainResult {
  std::int64_t steps = 0;
  int epochs = 0;
  std::vector<double> first_step_totals;  // first five steps, for determinism checks
  double final_epoch_mean_total = 0;
};

/// Two stochastic views of a payload batch: additive Gaussian noise plus
/// feature dropout, shapes preserved.
Matrix<float> augment_payload(const Matrix<float>& payload, const AugmentConfig& cfg, Rng& rng);

/// Full pretraining run. The model must have been constructed with this seed's
/// init stream for the determinism contract to hold end to end.
PretrainResult pretrain(Model<float>& model, AdamW<float>& opt,
                        const synth::DatasetSplit& data, const ExperimentConfig& cfg,
                        std::uint64_t seed, const PretrainHooks& hooks = {},
                        int start_epoch = 0);

struct FinetuneResult {
  int best_epoch = 0;
  double best_val_accuracy = 0;
  int epochs_run = 0;
  bool stopped_early = false;
};

/// Supervised contrastive fine-tuning on labeled samples. Positives follow
/// cfg.finetune.policy; orthogonality stays on at finetune.lambda_o; masking
/// runs at the fixed lower ratio; heads are frozen when flagged. Early
/// stopping monitors a linear probe on the validation slice.
FinetuneResult finetune(Model<float>& model, const std::vector<synth::MultimodalSample>& train,
                        const std::vector<int>& train_labels,
                        const std::vector<synth::MultimodalSample>& val,
                        const std::vector<int>& val_labels, int n_classes,
                        const ExperimentConfig& cfg, std::uint64_t seed,
                        const std::function<void(int, double)>& on_epoch = {});

}  // namespace coral::train
