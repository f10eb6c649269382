#include "coral/trainer.hpp"

#include "coral/eval.hpp"
#include "coral/losses.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

namespace coral::train {

Streams make_streams(std::uint64_t master_seed) {
  return Streams{Rng::stream(master_seed, "model/init"), Rng::stream(master_seed, "augment"),
                 Rng::stream(master_seed, "masking"), Rng::stream(master_seed, "data_order")};
}

Matrix<float> augment_payload(const Matrix<float>& payload, const AugmentConfig& cfg, Rng& rng) {
  Matrix<float> out = payload;
  for (Eigen::Index r = 0; r < out.rows(); ++r)
    for (Eigen::Index c = 0; c < out.cols(); ++c)
      out(r, c) += static_cast<float>(cfg.noise_sigma * rng.normal());
  if (cfg.dropout_p > 0) {
    for (Eigen::Index r = 0; r < out.rows(); ++r)
      for (Eigen::Index c = 0; c < out.cols(); ++c)
        if (rng.uniform() < cfg.dropout_p) out(r, c) = 0.0f;
  }
  return out;
}

namespace {

Matrix<float> gather_payload(const std::vector<synth::MultimodalSample>& samples,
                             const std::vector<int>& indices, int modality) {
  const Eigen::Index dim = samples.at(0).views.at(static_cast<std::size_t>(modality)).size();
  Matrix<float> out(static_cast<Eigen::Index>(indices.size()), dim);
  for (std::size_t i = 0; i < indices.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) =
        samples[static_cast<std::size_t>(indices[i])]
            .views[static_cast<std::size_t>(modality)]
            .cast<float>()
            .transpose();
  return out;
}

std::vector<MaskSpec> specs_from_plans(const masking::MaskPlan& first,
                                       const masking::MaskPlan& second, int batch) {
  std::vector<MaskSpec> specs;
  for (int mi : first.masked_modalities())
    specs.push_back({mi, first.masked_token_indices.at(mi), 0, batch});
  for (int mi : second.masked_modalities())
    specs.push_back({mi, second.masked_token_indices.at(mi), batch, 2 * batch});
  return specs;
}

void check_complementarity(const masking::MaskPlan& first, const masking::MaskPlan& second,
                           int n_modalities) {
  std::set<int> a(first.masked_modalities().begin(), first.masked_modalities().end());
  std::set<int> b(second.masked_modalities().begin(), second.masked_modalities().end());
  std::size_t total = a.size() + b.size();
  for (int x : b) a.insert(x);
  if (a.size() != total || static_cast<int>(a.size()) != n_modalities)
    throw RuntimeAbort("mask plans are not a disjoint cover of the modalities");
}

struct ViewBatch {
  std::vector<Matrix<float>> stacked;  // per modality: [view' ; view''] rows
  int batch = 0;
};

ViewBatch make_view_batch(const std::vector<synth::MultimodalSample>& samples,
                          const std::vector<int>& indices, int n_modalities,
                          const AugmentConfig& aug, Rng& rng) {
  ViewBatch vb;
  vb.batch = static_cast<int>(indices.size());
  for (int m = 0; m < n_modalities; ++m) {
    Matrix<float> base = gather_payload(samples, indices, m);
    Matrix<float> stacked(2 * base.rows(), base.cols());
    stacked.topRows(base.rows()) = augment_payload(base, aug, rng);
    stacked.bottomRows(base.rows()) = augment_payload(base, aug, rng);
    vb.stacked.push_back(std::move(stacked));
  }
  return vb;
}

losses::BatchEmbeddings<float> split_views(ad::Tape<float>& tape,
                                           const Model<float>::Outputs& out, int batch) {
  losses::BatchEmbeddings<float> be;
  be.shared_first = tape.slice_rows(out.p_sr, 0, batch);
  be.shared_second = tape.slice_rows(out.p_sr, batch, batch);
  for (ad::Var v : out.p_u) {
    be.unique_first.push_back(tape.slice_rows(v, 0, batch));
    be.unique_second.push_back(tape.slice_rows(v, batch, batch));
  }
  return be;
}

std::string nan_dump(const losses::TotalLoss<float>::Values& v, int epoch, std::int64_t step,
                     std::size_t batch_id) {
  std::ostringstream os;
  os << "non-finite loss at epoch " << epoch << " step " << step << " batch " << batch_id
     << ": shared=" << v.shared << " unique=" << v.unique << " orthogonal=" << v.orthogonal
     << " total=" << v.total;
  return os.str();
}

}  // namespace

PretrainResult pretrain(Model<float>& model, AdamW<float>& opt,
                        const synth::DatasetSplit& data, const ExperimentConfig& cfg,
                        std::uint64_t seed, const PretrainHooks& hooks, int start_epoch) {
  cfg.validate();
  require(!data.train.empty(), "pretrain: dataset is empty");
  require(model.config().n_modalities >= 2, "pretrain: need >= 2 modalities");

  const int n_mod = model.config().n_modalities;
  const std::vector<int> token_counts(static_cast<std::size_t>(n_mod),
                                      model.config().tokens_per_modality);

  PretrainResult result;
  const int n = static_cast<int>(data.train.size());

  double last_ratio = -1;
  std::int64_t step = static_cast<std::int64_t>(start_epoch) *
                      ((n + cfg.optim.batch_size - 1) / cfg.optim.batch_size);
  for (int epoch = start_epoch; epoch < cfg.optim.epochs; ++epoch) {
    const double ratio =
        cfg.masking_enabled ? masking::schedule_ratio(cfg.schedule, epoch) : 0.0;
    if (ratio != last_ratio) {
      if (hooks.on_schedule_transition) hooks.on_schedule_transition(epoch, ratio);
      last_ratio = ratio;
    }
    // epoch-scoped streams so a resumed run draws exactly what a continuous
    // run would have drawn
    const std::string suffix = "/epoch" + std::to_string(epoch);
    Rng order_rng = Rng::stream(seed, "data_order" + suffix);
    Rng augment_rng = Rng::stream(seed, "augment" + suffix);
    Rng masking_rng = Rng::stream(seed, "masking" + suffix);
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    order_rng.shuffle(order);

    double epoch_total = 0;
    int epoch_steps = 0;
    for (int at = 0; at < n; at += cfg.optim.batch_size) {
      const int bsz = std::min(cfg.optim.batch_size, n - at);
      if (bsz < 2) continue;  // InfoNCE needs at least one negative
      std::vector<int> indices(order.begin() + at, order.begin() + at + bsz);
      const std::size_t batch_id = static_cast<std::size_t>(at / cfg.optim.batch_size);

      ViewBatch vb = make_view_batch(data.train, indices, n_mod, cfg.augment, augment_rng);

      std::vector<MaskSpec> specs;
      if (cfg.masking_enabled && ratio > 0) {
        auto [plan_first, plan_second] =
            masking::build_view_plans(n_mod, ratio, token_counts, masking_rng);
        check_complementarity(plan_first, plan_second, n_mod);
        if (hooks.on_mask)
          hooks.on_mask({epoch, ratio, plan_first.partition_first, plan_first.partition_second});
        specs = specs_from_plans(plan_first, plan_second, bsz);
      }

      ad::Tape<float> tape;
      std::vector<ad::Var> payloads;
      payloads.reserve(vb.stacked.size());
      for (const auto& m : vb.stacked) payloads.push_back(tape.input(m));
      losses::TotalLoss<float> loss;
      try {
        auto out = model.forward(tape, payloads, specs, true);
        auto be = split_views(tape, out, bsz);
        loss = losses::total_loss(tape, be, cfg.weights, cfg.similarity);
      } catch (const std::domain_error& e) {
        throw RuntimeAbort("non-finite forward at epoch " + std::to_string(epoch) + " step " +
                           std::to_string(step) + " batch " + std::to_string(batch_id) + ": " +
                           e.what());
      }
      auto vals = loss.values(tape);
      if (!std::isfinite(vals.total))
        throw RuntimeAbort(nan_dump(vals, epoch, step, batch_id));

      model.zero_grad();
      tape.backward(loss.total);
      opt.step();

      if (result.first_step_totals.size() < 5) result.first_step_totals.push_back(vals.total);
      if (hooks.on_step)
        hooks.on_step({step, vals.shared, vals.unique, vals.orthogonal, vals.total, ratio,
                       cfg.optim.lr});
      epoch_total += vals.total;
      ++epoch_steps;
      ++step;
    }
    result.final_epoch_mean_total = epoch_steps > 0 ? epoch_total / epoch_steps : 0.0;
    if (hooks.on_epoch_end) hooks.on_epoch_end(epoch, result.final_epoch_mean_total);
    const bool last = epoch + 1 == cfg.optim.epochs;
    if (hooks.on_checkpoint && ((epoch + 1) % cfg.checkpoint_every == 0 || last))
      hooks.on_checkpoint(epoch);
    result.epochs = epoch + 1;
  }
  result.steps = step;
  return result;
}

FinetuneResult finetune(Model<float>& model, const std::vector<synth::MultimodalSample>& train,
                        const std::vector<int>& train_labels,
                        const std::vector<synth::MultimodalSample>& val,
                        const std::vector<int>& val_labels, int n_classes,
                        const ExperimentConfig& cfg, std::uint64_t seed,
                        const std::function<void(int, double)>& on_epoch) {
  cfg.validate();
  require(train.size() == train_labels.size(), "finetune: label count mismatch");
  require(!train.empty() && !val.empty(), "finetune: empty splits");
  {
    std::set<int> distinct(train_labels.begin(), train_labels.end());
    require(distinct.size() >= 2, "finetune: need at least two classes");
  }

  const FinetuneConfig& ft = cfg.finetune;
  const int n_mod = model.config().n_modalities;
  const std::vector<int> token_counts(static_cast<std::size_t>(n_mod),
                                      model.config().tokens_per_modality);
  const bool exclude = ft.policy == FinetuneConfig::PositivePolicy::SameSampleOnly;

  std::vector<bool> was_trainable;
  for (auto* p : model.parameters()) was_trainable.push_back(p->trainable);
  if (ft.freeze_heads) model.set_trainable("head.", false);

  OptimizerConfig oc = cfg.optim;
  oc.lr = ft.lr;
  AdamW<float> opt(model.parameters(), oc);
  Streams streams = make_streams(seed);

  losses::LossWeights w = cfg.weights;
  w.lambda_o = ft.lambda_o;

  const int n = static_cast<int>(train.size());
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

  FinetuneResult result;
  std::vector<Matrix<float>> best_params;
  int since_best = 0;
  for (int epoch = 0; epoch < ft.max_epochs; ++epoch) {
    streams.data_order.shuffle(order);
    for (int at = 0; at + 1 < n; at += cfg.optim.batch_size) {
      const int bsz = std::min(cfg.optim.batch_size, n - at);
      if (bsz < 2) continue;
      std::vector<int> indices(order.begin() + at, order.begin() + at + bsz);
      std::vector<int> labels;
      labels.reserve(indices.size());
      for (int i : indices) labels.push_back(train_labels[static_cast<std::size_t>(i)]);
      {
        // a one-class batch carries no supervised contrast; skip it
        std::set<int> distinct(labels.begin(), labels.end());
        if (distinct.size() < 2) continue;
      }

      ViewBatch vb = make_view_batch(train, indices, n_mod, cfg.augment, streams.augment);
      std::vector<MaskSpec> specs;
      if (ft.mask_ratio > 0) {
        auto [plan_first, plan_second] =
            masking::build_view_plans(n_mod, ft.mask_ratio, token_counts, streams.masking);
        specs = specs_from_plans(plan_first, plan_second, bsz);
      }

      ad::Tape<float> tape;
      std::vector<ad::Var> payloads;
      for (const auto& m : vb.stacked) payloads.push_back(tape.input(m));
      auto out = model.forward(tape, payloads, specs, true);
      auto be = split_views(tape, out, bsz);

      auto sup_nce = [&](ad::Var a, ad::Var b) {
        ad::Var an = tape.l2_normalize_rows(a);
        ad::Var bn = tape.l2_normalize_rows(b);
        ad::Var logits = tape.scale(tape.matmul_nt(an, bn),
                                    static_cast<float>(1.0 / cfg.similarity.temperature));
        return tape.sup_info_nce_from_logits(logits, labels, exclude,
                                             cfg.similarity.symmetrize);
      };
      ad::Var l_shared = sup_nce(be.shared_first, be.shared_second);
      std::vector<std::pair<ad::Var, float>> uterms;
      for (std::size_t i = 0; i < be.unique_first.size(); ++i)
        uterms.push_back({sup_nce(be.unique_first[i], be.unique_second[i]), 1.0f});
      ad::Var l_unique = tape.add_scaled(uterms);
      ad::Var l_ortho = losses::orthogonality_loss(tape, be);
      ad::Var total = tape.add_scaled({{l_shared, static_cast<float>(w.lambda_s)},
                                       {l_unique, static_cast<float>(w.lambda_u)},
                                       {l_ortho, static_cast<float>(w.lambda_o)}});
      if (!std::isfinite(tape.scalar(total)))
        throw RuntimeAbort("finetune: non-finite loss at epoch " + std::to_string(epoch));

      model.zero_grad();
      tape.backward(total);
      opt.step();
    }

    const double val_acc = eval::probe_on_samples(model, train, train_labels, val, val_labels,
                                                  n_classes, cfg.probe);
    if (on_epoch) on_epoch(epoch, val_acc);
    result.epochs_run = epoch + 1;
    if (val_acc > result.best_val_accuracy) {
      result.best_val_accuracy = val_acc;
      result.best_epoch = epoch;
      since_best = 0;
      best_params.clear();
      for (auto* p : model.parameters()) best_params.push_back(p->value);
    } else if (++since_best >= ft.patience) {
      result.stopped_early = true;
      break;
    }
  }

  if (!best_params.empty()) {
    for (std::size_t i = 0; i < model.parameters().size(); ++i)
      model.parameters()[i]->value = best_params[i];
  }
  for (std::size_t i = 0; i < model.parameters().size(); ++i)
    model.parameters()[i]->trainable = was_trainable[i];
  return result;
}

}  // namespace coral::train
