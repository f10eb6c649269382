#include "coral/trainer.hpp"

#include "coral/eval.hpp"
#include "coral/losses.hpp"

#include <doctest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <set>

using namespace coral;

namespace {

// small but non-trivial configuration so trainer tests stay fast
ExperimentConfig small_cfg(int epochs = 2, int n_train = 192) {
  ExperimentConfig cfg;
  cfg.data.cardinality = 10;
  cfg.data.n_train = n_train;
  cfg.data.n_test = 64;
  cfg.model.payload_dims = {30, 30};
  cfg.model.d_tok = 16;
  cfg.model.d_s = 16;
  cfg.model.d_p = 16;
  cfg.model.fusion_heads = 4;
  cfg.model.encoder_hidden = 16;
  cfg.model.ffn_hidden = 32;
  cfg.optim.epochs = epochs;
  cfg.optim.batch_size = 32;
  cfg.schedule = masking::MaskSchedule::constant(0.25);
  cfg.checkpoint_every = 1000;
  cfg.probe.max_iters = 100;
  cfg.validate();
  return cfg;
}

}  // namespace

TEST_CASE("seed control: identical streams per seed, isolated across names") {
  auto a = train::make_streams(41);
  auto b = train::make_streams(41);
  CHECK(a.augment.next_u64() == b.augment.next_u64());
  CHECK(a.masking.next_u64() == b.masking.next_u64());
  CHECK(a.param_init.next_u64() == b.param_init.next_u64());
  CHECK(a.data_order.next_u64() == b.data_order.next_u64());

  // consuming the masking stream must not perturb the augmentation stream
  auto c = train::make_streams(41);
  auto d = train::make_streams(41);
  for (int i = 0; i < 1000; ++i) (void)c.masking.next_u64();
  std::uint64_t cs_c = 0, cs_d = 0;
  for (int i = 0; i < 100; ++i) {
    cs_c ^= c.augment.next_u64();
    cs_d ^= d.augment.next_u64();
  }
  CHECK(cs_c == cs_d);

  // different master seeds give different parameter inits
  Model<float> m41(small_cfg().model, 41);
  Model<float> m42(small_cfg().model, 42);
  CHECK(m41.find_param("fusion.cls")->value != m42.find_param("fusion.cls")->value);
}

TEST_CASE("augmentation preserves shape and is stochastic") {
  Rng rng = Rng::stream(1, "augment");
  MatF payload = MatF::Ones(8, 30);
  AugmentConfig aug;
  MatF v1 = train::augment_payload(payload, aug, rng);
  MatF v2 = train::augment_payload(payload, aug, rng);
  CHECK(v1.rows() == 8);
  CHECK(v1.cols() == 30);
  CHECK(v1 != v2);
  int zeros = 0;
  for (Eigen::Index i = 0; i < v1.size(); ++i)
    if (v1.data()[i] == 0.0f) ++zeros;
  // dropout 0.1 over 240 entries
  CHECK(zeros > 2);
  CHECK(zeros < 60);
}

TEST_CASE("pretrain determinism: bitwise-identical first five steps") {
  auto cfg = small_cfg(1);
  auto split = synth::generate_trifeature(cfg.data, cfg.data_seed);
  std::vector<double> first, second;
  for (auto* sink : {&first, &second}) {
    Model<float> model(cfg.model, 41);
    AdamW<float> opt(model.parameters(), cfg.optim);
    auto result = train::pretrain(model, opt, split, cfg, 41);
    *sink = result.first_step_totals;
  }
  REQUIRE(first.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(std::memcmp(&first[i], &second[i], sizeof(double)) == 0);
  }
  // a different seed departs immediately
  Model<float> model(cfg.model, 42);
  AdamW<float> opt(model.parameters(), cfg.optim);
  auto other = train::pretrain(model, opt, split, cfg, 42);
  CHECK(other.first_step_totals[0] != first[0]);
}

TEST_CASE("mask plans stay complementary on every training step") {
  auto cfg = small_cfg(2);
  auto split = synth::generate_trifeature(cfg.data, cfg.data_seed);
  Model<float> model(cfg.model, 41);
  AdamW<float> opt(model.parameters(), cfg.optim);
  std::int64_t audited = 0;
  train::PretrainHooks hooks;
  hooks.on_mask = [&](const train::MaskAuditRecord& r) {
    std::set<int> all(r.m1.begin(), r.m1.end());
    for (int m : r.m2) all.insert(m);
    CHECK(all.size() == r.m1.size() + r.m2.size());
    CHECK(all.size() == 2);
    ++audited;
  };
  auto result = train::pretrain(model, opt, split, cfg, 41, hooks);
  CHECK(audited == result.steps);
}

TEST_CASE("applied mask ratio follows the schedule exactly per epoch") {
  auto cfg = small_cfg(4);
  cfg.schedule = masking::MaskSchedule{{{0, 0.05}, {1, 0.35}, {2, 0.55}, {3, 0.75}},
                                       masking::MaskSchedule::Mode::Increasing};
  cfg.validate();
  auto split = synth::generate_trifeature(cfg.data, cfg.data_seed);
  Model<float> model(cfg.model, 41);
  AdamW<float> opt(model.parameters(), cfg.optim);
  const int steps_per_epoch = (cfg.data.n_train + cfg.optim.batch_size - 1) / cfg.optim.batch_size;
  train::PretrainHooks hooks;
  hooks.on_step = [&](const train::StepMetrics& s) {
    int epoch = static_cast<int>(s.step) / steps_per_epoch;
    CHECK(s.mask_ratio == masking::schedule_ratio(cfg.schedule, epoch));
  };
  (void)train::pretrain(model, opt, split, cfg, 41, hooks);
}

TEST_CASE("masking disabled or inference never constructs a plan") {
  auto cfg = small_cfg(1);
  cfg.masking_enabled = false;
  auto split = synth::generate_trifeature(cfg.data, cfg.data_seed);
  Model<float> model(cfg.model, 41);
  AdamW<float> opt(model.parameters(), cfg.optim);
  masking::reset_plans_built();
  (void)train::pretrain(model, opt, split, cfg, 41);
  CHECK(masking::plans_built() == 0);

  auto emb = eval::extract_embeddings(model, split.test);
  (void)emb;
  CHECK(masking::plans_built() == 0);
}

TEST_CASE("gradient-flow audit: shared loss reaches no unique-pathway parameter") {
  auto cfg = small_cfg();
  auto split = synth::generate_trifeature(cfg.data, cfg.data_seed);
  Model<float> model(cfg.model, 41);

  const int B = 16;
  ad::Tape<float> tape;
  std::vector<ad::Var> payloads;
  for (int m = 0; m < 2; ++m) {
    MatF p(2 * B, 30);
    for (int i = 0; i < 2 * B; ++i)
      p.row(i) = split.train[static_cast<std::size_t>(i % B)]
                     .views[static_cast<std::size_t>(m)]
                     .cast<float>()
                     .transpose();
    payloads.push_back(tape.input(p));
  }
  auto out = model.forward(tape, payloads, {}, true);
  losses::BatchEmbeddings<float> be;
  be.shared_first = tape.slice_rows(out.p_sr, 0, B);
  be.shared_second = tape.slice_rows(out.p_sr, B, B);
  for (ad::Var v : out.p_u) {
    be.unique_first.push_back(tape.slice_rows(v, 0, B));
    be.unique_second.push_back(tape.slice_rows(v, B, B));
  }
  model.zero_grad();
  tape.backward(losses::shared_loss(tape, be, cfg.similarity));
  for (auto* p : model.parameters()) {
    bool unique_side = p->name.rfind("unique.", 0) == 0 ||
                       p->name.rfind("encoder.unique.", 0) == 0 ||
                       p->name.rfind("head.unique.", 0) == 0;
    if (unique_side) {
      CHECK(p->grad.cwiseAbs().maxCoeff() == 0.0f);
    }
  }
  CHECK(model.find_param("fusion.cls")->grad.cwiseAbs().maxCoeff() > 0.0f);
}

TEST_CASE("all three loss components fall below their first-step values") {
  auto cfg = small_cfg(8, 320);
  auto split = synth::generate_trifeature(cfg.data, cfg.data_seed);
  Model<float> model(cfg.model, 41);
  AdamW<float> opt(model.parameters(), cfg.optim);
  std::vector<train::StepMetrics> steps;
  train::PretrainHooks hooks;
  hooks.on_step = [&](const train::StepMetrics& s) { steps.push_back(s); };
  (void)train::pretrain(model, opt, split, cfg, 41, hooks);
  REQUIRE(steps.size() > 50);
  const auto& last = steps.back();
  CHECK(last.loss_shared < steps[0].loss_shared);
  CHECK(last.loss_unique < steps[0].loss_unique);
  CHECK(last.loss_orthogonal < steps[0].loss_orthogonal);
}

TEST_CASE("NaN loss aborts with a diagnostic dump instead of training on") {
  auto cfg = small_cfg(1);
  auto split = synth::generate_trifeature(cfg.data, cfg.data_seed);
  Model<float> model(cfg.model, 41);
  model.find_param("fusion.cls")->value(0, 0) = std::numeric_limits<float>::quiet_NaN();
  AdamW<float> opt(model.parameters(), cfg.optim);
  try {
    (void)train::pretrain(model, opt, split, cfg, 41);
    FAIL("expected RuntimeAbort");
  } catch (const RuntimeAbort& e) {
    std::string msg = e.what();
    CHECK(msg.find("batch") != std::string::npos);
    CHECK(msg.find("epoch") != std::string::npos);
  }
}

TEST_CASE("resume from a mid-run snapshot reproduces the continuous run bitwise") {
  auto cfg = small_cfg(4);
  auto split = synth::generate_trifeature(cfg.data, cfg.data_seed);

  Model<float> continuous(cfg.model, 41);
  AdamW<float> opt_c(continuous.parameters(), cfg.optim);
  (void)train::pretrain(continuous, opt_c, split, cfg, 41);

  Model<float> resumed(cfg.model, 41);
  AdamW<float> opt_r(resumed.parameters(), cfg.optim);
  ExperimentConfig first_half = cfg;
  first_half.optim.epochs = 2;
  first_half.schedule = cfg.schedule;
  first_half.validate();
  (void)train::pretrain(resumed, opt_r, split, first_half, 41);
  (void)train::pretrain(resumed, opt_r, split, cfg, 41, {}, 2);

  for (std::size_t i = 0; i < continuous.parameters().size(); ++i)
    CHECK(continuous.parameters()[i]->value == resumed.parameters()[i]->value);
}

TEST_CASE("finetune: frozen heads bitwise-stable, flags restored, label errors") {
  auto cfg = small_cfg(1);
  cfg.finetune.max_epochs = 2;
  cfg.finetune.patience = 5;
  cfg.probe.max_iters = 50;
  cfg.data.n_test = 128;
  cfg.validate();
  auto split = synth::generate_trifeature(cfg.data, cfg.data_seed);
  auto ft = eval::synergy_finetune_data(split);
  CHECK(ft.ft_train.size() + ft.ft_val.size() == ft.probe_train.size());
  CHECK(ft.probe_eval.size() == 64);

  Model<float> model(cfg.model, 41);
  MatF encoder_before = model.find_param("encoder.shared.0.w1")->value;
  std::vector<MatF> head_before;
  for (auto* p : model.parameters())
    if (p->name.rfind("head.", 0) == 0) head_before.push_back(p->value);

  (void)train::finetune(model, ft.ft_train, ft.ft_train_labels, ft.ft_val, ft.ft_val_labels, 2,
                        cfg, 41);
  std::size_t k = 0;
  for (auto* p : model.parameters())
    if (p->name.rfind("head.", 0) == 0) CHECK(p->value == head_before[k++]);
  for (auto* p : model.parameters()) CHECK(p->trainable);
  CHECK(model.find_param("encoder.shared.0.w1")->value != encoder_before);

  std::vector<int> ones(ft.ft_train_labels.size(), 1);
  CHECK_THROWS_AS(train::finetune(model, ft.ft_train, ones, ft.ft_val, ft.ft_val_labels, 2, cfg,
                                  41),
                  ConfigError);
}

TEST_CASE("supervised positives follow the configured policy") {
  // labels [0,0,1,1]: anchor 0 takes row 1 as an extra positive under
  // same_class; under same_sample_only rows with the anchor's class other
  // than itself leave the loss entirely
  MatD logits(4, 4);
  logits << 2.0, 1.0, -1.0, -0.5, 1.2, 1.8, -0.3, -0.7, -0.9, -0.2, 1.5, 0.8, -0.4, -0.6, 0.9,
      1.7;
  std::vector<int> labels = {0, 0, 1, 1};

  ad::Tape<double> t;
  ad::Var l = t.input(logits);
  double same_class = t.scalar(t.sup_info_nce_from_logits(l, labels, false, false));
  double same_sample = t.scalar(t.sup_info_nce_from_logits(l, labels, true, false));

  // hand-computed reference
  auto lse = [&](std::vector<int> idx, int row) {
    double mx = -1e30;
    for (int j : idx) mx = std::max(mx, logits(row, j));
    double s = 0;
    for (int j : idx) s += std::exp(logits(row, j) - mx);
    return mx + std::log(s);
  };
  double want_class = 0;
  std::vector<std::vector<int>> pos = {{0, 1}, {0, 1}, {2, 3}, {2, 3}};
  for (int k = 0; k < 4; ++k) {
    double anchor = 0;
    for (int p : pos[static_cast<std::size_t>(k)])
      anchor += (lse({0, 1, 2, 3}, k) - logits(k, p)) / 2.0;
    want_class += anchor / 4.0;
  }
  CHECK(same_class == doctest::Approx(want_class).epsilon(1e-12));

  double want_sample = 0;
  std::vector<std::vector<int>> denom = {{0, 2, 3}, {1, 2, 3}, {0, 1, 2}, {0, 1, 3}};
  for (int k = 0; k < 4; ++k)
    want_sample += (lse(denom[static_cast<std::size_t>(k)], k) - logits(k, k)) / 4.0;
  CHECK(same_sample == doctest::Approx(want_sample).epsilon(1e-12));
}
