#include "coral/model.hpp"

#include "coral/checkpoint.hpp"
#include "coral/losses.hpp"
#include "gradcheck.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>

using namespace coral;
using ad::Tape;
using ad::Var;

namespace {

ModelConfig tiny_cfg(int n_mod = 2) {
  ModelConfig c;
  c.n_modalities = n_mod;
  c.payload_dims.assign(static_cast<std::size_t>(n_mod), 12);
  c.tokens_per_modality = 3;
  c.d_tok = 8;
  c.d_s = 8;
  c.d_p = 6;
  c.fusion_heads = 2;
  c.fusion_layers = 1;
  c.ffn_hidden = 10;
  c.encoder_hidden = 9;
  return c;
}

template <class S>
std::vector<Matrix<S>> random_payloads(const ModelConfig& cfg, int n, Rng& rng) {
  std::vector<Matrix<S>> out;
  for (int m = 0; m < cfg.n_modalities; ++m) {
    Matrix<S> p(n, cfg.payload_dims[static_cast<std::size_t>(m)]);
    for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = static_cast<S>(rng.normal());
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace

TEST_CASE("config validation: evenness, readout width, head divisibility") {
  ModelConfig c = tiny_cfg();
  CHECK_NOTHROW(c.validate());
  c.d_s = 7;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_cfg();
  c.d_s = 16;  // != d_tok
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_cfg();
  c.fusion_heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("encode_modality: L tokens of width d_tok, deterministic, finite on zeros") {
  Model<float> model(tiny_cfg(), 1);
  Rng rng(2);
  auto payloads = random_payloads<float>(model.config(), 5, rng);

  Tape<float> t;
  auto seq = model.encode_modality(t, payloads[0], 0, Pathway::Shared);
  CHECK(t.value(seq.tokens).rows() == 5 * 3);
  CHECK(t.value(seq.tokens).cols() == 8);

  Tape<float> t2;
  auto seq2 = model.encode_modality(t2, payloads[0], 0, Pathway::Shared);
  CHECK(t.value(seq.tokens) == t2.value(seq2.tokens));

  Tape<float> t3;
  MatF zeros = MatF::Zero(4, 12);
  auto seqz = model.encode_modality(t3, zeros, 0, Pathway::Shared);
  CHECK(t3.value(seqz.tokens).allFinite());

  Tape<float> t4;
  MatF wrong = MatF::Zero(4, 11);
  CHECK_THROWS_AS((void)model.encode_modality(t4, wrong, 0, Pathway::Shared), ConfigError);
}

TEST_CASE("default-shape contract: 30-dim factor vector -> 4 tokens of width 64") {
  ModelConfig c;  // defaults
  Model<float> model(c, 3);
  Tape<float> t;
  MatF payload = MatF::Ones(2, 30);
  auto seq = model.encode_modality(t, payload, 0, Pathway::Shared);
  CHECK(t.value(seq.tokens).rows() == 2 * 4);
  CHECK(t.value(seq.tokens).cols() == 64);
}

TEST_CASE("fuse_shared: no-plan output, m=0 plan identity, masking changes output") {
  Model<float> model(tiny_cfg(), 4);
  Rng rng(5);
  auto payloads = random_payloads<float>(model.config(), 6, rng);

  auto run = [&](const masking::MaskPlan* plan) {
    Tape<float> t;
    std::vector<TokenSequence<float>> seqs;
    for (int m = 0; m < 2; ++m)
      seqs.push_back(model.encode_modality(t, payloads[static_cast<std::size_t>(m)], m,
                                           Pathway::Shared));
    Var z = model.fuse_shared(t, seqs, plan);
    return MatF(t.value(z));
  };

  MatF base = run(nullptr);
  CHECK(base.rows() == 6);
  CHECK(base.cols() == 8);

  masking::MaskPlan zero_plan{0.0, {0}, {1}, masking::ViewId::First, {{0, {}}}};
  CHECK(run(&zero_plan) == base);

  masking::MaskPlan half{0.5, {0}, {1}, masking::ViewId::First, {{0, {0, 2}}}};
  MatF masked = run(&half);
  CHECK(masked.allFinite());
  CHECK(masked != base);

  masking::MaskPlan bad{0.5, {2}, {1}, masking::ViewId::First, {{2, {0}}}};
  Tape<float> t5;
  std::vector<TokenSequence<float>> seqs5;
  for (int m = 0; m < 2; ++m)
    seqs5.push_back(
        model.encode_modality(t5, payloads[static_cast<std::size_t>(m)], m, Pathway::Shared));
  CHECK_THROWS_AS((void)model.fuse_shared(t5, seqs5, &bad), ConfigError);
}

TEST_CASE("masking zeroes exactly the planned token rows before fusion") {
  Model<float> model(tiny_cfg(), 4);
  Rng rng(5);
  auto payloads = random_payloads<float>(model.config(), 6, rng);
  Tape<float> t;
  auto seq0 = model.encode_modality(t, payloads[0], 0, Pathway::Shared);
  Var masked = t.zero_token_rows(seq0.tokens, 3, {0, 2}, 0, 6);
  const MatF& m = t.value(masked);
  int zeroed = 0;
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    if (m.row(r).norm() == 0) ++zeroed;
  CHECK(zeroed == 12);  // ceil(0.5*3)=2 tokens x 6 samples
}

TEST_CASE("unique_path dims: half variant d_s/2, same variant d_s, pooling identity at L=1") {
  Rng rng(6);
  Model<float> half(tiny_cfg(), 7);
  auto payloads = random_payloads<float>(half.config(), 4, rng);
  Tape<float> t;
  Var u = half.unique_path(t, t.input(payloads[0]), 0);
  CHECK(t.value(u).rows() == 4);
  CHECK(t.value(u).cols() == 4);  // d_s/2

  ModelConfig same_cfg = tiny_cfg();
  same_cfg.unique_variant = UniqueVariant::MlpPoolSame;
  Model<float> same(same_cfg, 7);
  Tape<float> t2;
  Var u2 = same.unique_path(t2, t2.input(payloads[0]), 0);
  CHECK(t2.value(u2).cols() == 8);  // d_s

  // single-token sequence: attention pooling must return that token's value
  ModelConfig one_tok = tiny_cfg();
  one_tok.tokens_per_modality = 1;
  Model<float> m1(one_tok, 8);
  Tape<float> t3;
  auto seq = m1.encode_modality(t3, payloads[0], 0, Pathway::Unique);
  Var pooled = m1.unique_from_tokens(t3, seq);
  Var h = t3.gelu(t3.add_rowvec(t3.matmul(seq.tokens, t3.param(*m1.find_param("unique.0.mlp.w1"))),
                                t3.param(*m1.find_param("unique.0.mlp.b1"))));
  Var mlp = t3.add_rowvec(t3.matmul(h, t3.param(*m1.find_param("unique.0.mlp.w2"))),
                          t3.param(*m1.find_param("unique.0.mlp.b2")));
  CHECK((t3.value(pooled) - t3.value(mlp)).cwiseAbs().maxCoeff() < 1e-6f);
}

TEST_CASE("project: shapes reconcile into d_p; unknown head rejected") {
  Model<float> model(tiny_cfg(), 9);
  Tape<float> t;
  Var shared_e = t.input(MatF::Ones(3, 8));
  Var unique_e = t.input(MatF::Ones(3, 4));
  CHECK(t.value(model.project(t, shared_e, HeadId::Shared())).cols() == 6);
  CHECK(t.value(model.project(t, unique_e, HeadId::Unique(1))).cols() == 6);
  CHECK_THROWS_AS((void)model.project(t, unique_e, HeadId::Unique(5)), ConfigError);
  CHECK_THROWS_AS((void)model.project(t, unique_e, HeadId::Shared()), ConfigError);
}

TEST_CASE("forward_inference: concatenation dims for half and same variants, n=2 and n=3") {
  ModelConfig c;
  c.payload_dims = {30, 30};
  c.d_tok = 128;
  c.d_s = 128;
  c.fusion_heads = 8;
  CHECK(c.z_dim() == 256);  // 128 + 2*64

  ModelConfig c3 = c;
  c3.n_modalities = 3;
  c3.payload_dims = {30, 30, 30};
  CHECK(c3.z_dim() == 320);  // 128 + 3*64

  ModelConfig tiny = tiny_cfg();
  Rng rng(11);
  Model<float> tm(tiny, 11);
  auto payloads = random_payloads<float>(tiny, 5, rng);
  MatF z1 = tm.forward_inference(payloads);
  MatF z2 = tm.forward_inference(payloads);
  CHECK(z1.rows() == 5);
  CHECK(z1.cols() == tiny.z_dim());
  CHECK(z1 == z2);  // no stochastic layers at inference
}

TEST_CASE("n=3 forward works end to end") {
  ModelConfig c = tiny_cfg(3);
  Model<float> model(c, 30);
  Rng rng(31);
  auto payloads = random_payloads<float>(c, 4, rng);
  MatF z = model.forward_inference(payloads);
  CHECK(z.rows() == 4);
  CHECK(z.cols() == c.z_dim());
  CHECK(z.allFinite());
}

TEST_CASE("forward passes stay finite for |x| up to 1e3") {
  Model<float> model(tiny_cfg(), 12);
  Rng rng(13);
  auto payloads = random_payloads<float>(model.config(), 4, rng);
  for (auto& p : payloads) p *= 1000.0f / p.cwiseAbs().maxCoeff();
  MatF z = model.forward_inference(payloads);
  CHECK(z.allFinite());
}

TEST_CASE("fusion is modality-asymmetric: swapping payloads changes z_sr") {
  ModelConfig c = tiny_cfg();
  c.payload_dims = {12, 12};  // identical shapes so only the type embeddings differ
  Model<float> model(c, 14);
  Rng rng(15);
  auto payloads = random_payloads<float>(c, 4, rng);
  MatF z = model.forward_inference(payloads);
  std::vector<MatF> swapped = {payloads[1], payloads[0]};
  MatF zs = model.forward_inference(swapped);
  CHECK((z.leftCols(c.d_s) - zs.leftCols(c.d_s)).cwiseAbs().maxCoeff() > 1e-4f);
}

TEST_CASE("unique pathway is lighter than the fusion transformer at defaults") {
  ModelConfig c;  // defaults
  Model<float> model(c, 16);
  auto unique0 = model.parameter_count("unique.0.");
  auto fusion = model.parameter_count("fusion.");
  CHECK(unique0 > 0);
  CHECK(unique0 < fusion);
}

TEST_CASE("share_pathway_encoders collapses the per-pathway encoder copies") {
  ModelConfig c = tiny_cfg();
  Model<float> separate(c, 17);
  c.share_pathway_encoders = true;
  Model<float> shared(c, 17);
  CHECK(separate.parameter_count("encoder.unique.") > 0);
  CHECK(shared.parameter_count("encoder.unique.") == 0);
  CHECK(separate.parameter_count() ==
        shared.parameter_count() + separate.parameter_count("encoder.unique."));
}

TEST_CASE("learnable mask token replaces rows instead of zeroing") {
  ModelConfig c = tiny_cfg();
  c.learnable_mask_token = true;
  Model<float> model(c, 18);
  Rng rng(19);
  auto payloads = random_payloads<float>(c, 3, rng);
  masking::MaskPlan plan{0.5, {0}, {1}, masking::ViewId::First, {{0, {1}}}};
  Tape<float> t;
  std::vector<TokenSequence<float>> seqs;
  for (int m = 0; m < 2; ++m)
    seqs.push_back(
        model.encode_modality(t, payloads[static_cast<std::size_t>(m)], m, Pathway::Shared));
  Var z = model.fuse_shared(t, seqs, &plan);
  CHECK(t.value(z).allFinite());
  model.zero_grad();
  t.backward(t.mean_all(z));
  CHECK(model.find_param("fusion.mask_token")->grad.cwiseAbs().maxCoeff() > 0.0f);
}

TEST_CASE("model gradients match finite differences for every trainable module") {
  ModelConfig c = tiny_cfg();
  Model<double> model(c, 20);
  Rng rng(21);
  auto payloads = random_payloads<double>(c, 4, rng);

  auto build = [&](Tape<double>& t) {
    std::vector<Var> leaves;
    for (const auto& p : payloads) leaves.push_back(t.input(p));
    std::vector<MaskSpec> specs = {{0, {1}, 0, 2}, {1, {0, 2}, 2, 4}};
    auto out = model.forward(t, leaves, specs, true);
    losses::BatchEmbeddings<double> be;
    be.shared_first = t.slice_rows(out.p_sr, 0, 2);
    be.shared_second = t.slice_rows(out.p_sr, 2, 2);
    for (Var v : out.p_u) {
      be.unique_first.push_back(t.slice_rows(v, 0, 2));
      be.unique_second.push_back(t.slice_rows(v, 2, 2));
    }
    return losses::total_loss(t, be, {1, 1, 1}, {0.1, true}).total;
  };
  auto loss_value = [&]() {
    Tape<double> t;
    return t.scalar(build(t));
  };
  auto backward = [&]() {
    Tape<double> t;
    Var l = build(t);
    t.backward(l);
    return t.scalar(l);
  };
  // small step keeps finite-difference truncation below the tolerance at this
  // tiny width, where the contrastive composition is very sharply curved
  auto rep = gradcheck::check(model.parameters(), backward, loss_value, 3, rng, 1e-5);
  CAPTURE(rep.max_rel_err);
  CHECK(rep.max_rel_err < 1e-4);
  CHECK(rep.probes > 100);
}

TEST_CASE("checkpoint round trip reproduces identical embeddings and refuses mismatches") {
  namespace fs = std::filesystem;
  ModelConfig c = tiny_cfg();
  Model<float> model(c, 22);
  Rng rng(23);
  auto payloads = random_payloads<float>(c, 4, rng);
  MatF before = model.forward_inference(payloads);

  auto path = (fs::temp_directory_path() / "coral_ckpt_test.bin").string();
  CheckpointMeta meta{0xabcd, 17, 41, false};
  save_checkpoint(path, model, meta);

  Model<float> other(c, 99);  // different init
  CHECK(other.forward_inference(payloads) != before);
  auto loaded = load_checkpoint(path, other, 0xabcd);
  CHECK(loaded.epoch == 17);
  CHECK(loaded.seed == 41);
  CHECK(other.forward_inference(payloads) == before);  // bitwise identical

  CHECK_THROWS_AS(load_checkpoint(path, other, 0x1234), ConfigError);
  ModelConfig wider = c;
  wider.d_p = 12;
  Model<float> mismatched(wider, 1);
  CHECK_THROWS_AS(load_checkpoint(path, mismatched, 0xabcd), ConfigError);
  fs::remove(path);
}
