#pragma once

// Frozen-representation linear probing over the three information-component
// tasks, multi-seed aggregation, disentanglement measurement, and embedding
// export.

#include "coral/config.hpp"
#include "coral/model.hpp"
#include "coral/synth.hpp"

#include <string>
#include <tuple>
#include <vector>

namespace coral::eval {

struct EmbeddingMatrix {
  MatF z;  // one row per sample: concat(z_sr, z_u_1, ..., z_u_n)
  std::vector<std::pair<std::string, std::pair<int, int>>> slices;  // component -> [begin, end)
  std::vector<std::uint64_t> sample_ids;
};

/// Inference embeddings (no augmentation, no masking, no heads) plus the
/// component boundaries so probes can run on Z, z_sr alone, or z_u_i alone.
EmbeddingMatrix extract_embeddings(Model<float>& model,
                                   const std::vector<synth::MultimodalSample>& samples,
                                   int batch_size = 256);

/// component: "full", "shared", or "unique_<i>" (1-based).
MatD component_columns(const EmbeddingMatrix& emb, const std::string& component);

/// Multinomial logistic regression (single linear layer, bias, optional L2),
/// solved full-batch by L-BFGS to the configured gradient tolerance. Returns
/// test accuracy.
double linear_probe(const MatD& x_train, const std::vector<int>& y_train, const MatD& x_test,
                    const std::vector<int>& y_test, int n_classes, const ProbeConfig& cfg);

/// Probe-task data under the canonical protocol: redundancy and uniqueness
/// probes train on the training split and evaluate on the full test split;
/// the synergy probe trains on the first half of the (balanced) test split
/// and evaluates on the second half, since training pairs all adhere.
struct TaskData {
  MatD x_train;
  std::vector<int> y_train;
  MatD x_test;
  std::vector<int> y_test;
  int n_classes = 0;
};
TaskData task_data(const EmbeddingMatrix& train_emb, const EmbeddingMatrix& test_emb,
                   const synth::DatasetSplit& split, synth::ProbeTask task,
                   const std::string& component = "full");

double run_probe(const EmbeddingMatrix& train_emb, const EmbeddingMatrix& test_emb,
                 const synth::DatasetSplit& split, synth::ProbeTask task,
                 const ProbeConfig& cfg, const std::string& component = "full");

/// Convenience for fine-tuning early stopping: probe arbitrary labeled sample
/// sets on the full Z.
double probe_on_samples(Model<float>& model, const std::vector<synth::MultimodalSample>& train,
                        const std::vector<int>& y_train,
                        const std::vector<synth::MultimodalSample>& test,
                        const std::vector<int>& y_test, int n_classes, const ProbeConfig& cfg);

struct ProbeResult {
  synth::ProbeTask task;
  std::vector<double> per_seed;
  double mean = 0;
  double stddev = 0;  // population std over seeds
};
ProbeResult aggregate_seeds(synth::ProbeTask task, const std::vector<double>& accuracies);
std::string format_mean_std(const ProbeResult& r);  // "74.4±2.92" style, percent

struct DisentanglementReport {
  std::vector<double> shared_vs_unique;                   // hinge-cosine per modality
  std::vector<std::tuple<int, int, double>> unique_pairs; // (i, j, hinge-cosine)
  double max_shared_vs_unique() const;
};

/// Hinge-cosine statistics over projected inference embeddings; numerically
/// identical to the cosine-embedding loss on the same pairs.
DisentanglementReport measure_disentanglement(Model<float>& model,
                                              const std::vector<synth::MultimodalSample>& samples,
                                              int batch_size = 256);

void export_embeddings_csv(const std::string& path, const EmbeddingMatrix& emb);

struct ExportedRow {
  std::uint64_t sample_id;
  std::string component;
  std::vector<double> values;
};
std::vector<ExportedRow> load_embeddings_csv(const std::string& path);

/// Raw factor-vector baseline: concatenated modality payloads, no model.
MatD raw_concat_embeddings(const std::vector<synth::MultimodalSample>& samples);

/// Labeled slices for supervised synergy fine-tuning. The balanced test split
/// provides all labeled data: the probe trains on the first half and
/// evaluates on the second, and fine-tuning sees only the probe-train half
/// (3/4 for updates, 1/4 for early stopping) so the evaluation half stays
/// untouched.
struct SynergyFinetuneData {
  std::vector<synth::MultimodalSample> ft_train, ft_val, probe_train, probe_eval;
  std::vector<int> ft_train_labels, ft_val_labels, probe_train_labels, probe_eval_labels;
};
SynergyFinetuneData synergy_finetune_data(const synth::DatasetSplit& split);

/// Synergy accuracy of a frozen probe under the canonical protocol
/// (train on probe_train, evaluate on probe_eval).
double synergy_probe_accuracy(Model<float>& model, const SynergyFinetuneData& data,
                              const ProbeConfig& cfg);

}  // namespace coral::eval
