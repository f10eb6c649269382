#include "coral/eval.hpp"

#include "coral/losses.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>

using namespace coral;

namespace {

ModelConfig small_model() {
  ModelConfig c;
  c.payload_dims = {30, 30};
  c.d_tok = 16;
  c.d_s = 16;
  c.d_p = 16;
  c.fusion_heads = 4;
  c.encoder_hidden = 16;
  c.ffn_hidden = 32;
  return c;
}

synth::DatasetSplit small_split(int n_train = 256, int n_test = 128) {
  synth::SynthConfig dc;
  dc.n_train = n_train;
  dc.n_test = n_test;
  return synth::generate_trifeature(dc, 7);
}

}  // namespace

TEST_CASE("linear probe separates a linearly separable problem and rejects degeneracy") {
  Rng rng(1);
  const int n = 400, d = 8;
  MatD x(n, d);
  std::vector<int> y;
  for (int i = 0; i < n; ++i) {
    int cls = i % 4;
    for (int c = 0; c < d; ++c) x(i, c) = rng.normal() * 0.3 + (c == cls ? 3.0 : 0.0);
    y.push_back(cls);
  }
  ProbeConfig cfg;
  double acc = eval::linear_probe(x.topRows(300), {y.begin(), y.begin() + 300},
                                  x.bottomRows(100), {y.begin() + 300, y.end()}, 4, cfg);
  CHECK(acc > 0.95);

  std::vector<int> constant(300, 2);
  CHECK_THROWS_AS(eval::linear_probe(x.topRows(300), constant, x.bottomRows(100),
                                     {y.begin() + 300, y.end()}, 4, cfg),
                  ConfigError);
}

TEST_CASE("shuffled labels probe to chance within 3 points") {
  auto split = small_split(2000, 512);
  MatD x = eval::raw_concat_embeddings(split.train);
  MatD xt = eval::raw_concat_embeddings(split.test);
  auto y = synth::probe_labels(split.train, synth::ProbeTask::Redundancy);
  auto yt = synth::probe_labels(split.test, synth::ProbeTask::Redundancy);
  Rng rng(99);
  rng.shuffle(y);  // destroy the signal
  ProbeConfig cfg;
  double acc = eval::linear_probe(x, y, xt, yt, 10, cfg);
  CHECK(acc < 0.10 + 0.03);
  CHECK(acc > 0.10 - 0.03);
}

TEST_CASE("raw factor-vectors are linearly decodable: redundancy probe >= 99%") {
  auto split = small_split(3000, 512);
  MatD x = eval::raw_concat_embeddings(split.train);
  MatD xt = eval::raw_concat_embeddings(split.test);
  auto y = synth::probe_labels(split.train, synth::ProbeTask::Redundancy);
  auto yt = synth::probe_labels(split.test, synth::ProbeTask::Redundancy);
  ProbeConfig cfg;
  double acc = eval::linear_probe(x, y, xt, yt, 10, cfg);
  CHECK(acc >= 0.99);
}

TEST_CASE("probe accuracy is deterministic") {
  auto split = small_split(500, 128);
  MatD x = eval::raw_concat_embeddings(split.train);
  MatD xt = eval::raw_concat_embeddings(split.test);
  auto y = synth::probe_labels(split.train, synth::ProbeTask::Uniqueness);
  auto yt = synth::probe_labels(split.test, synth::ProbeTask::Uniqueness);
  ProbeConfig cfg;
  CHECK(eval::linear_probe(x, y, xt, yt, 10, cfg) == eval::linear_probe(x, y, xt, yt, 10, cfg));
}

TEST_CASE("extract_embeddings: slices, reassembly, determinism") {
  auto split = small_split(64, 32);
  Model<float> model(small_model(), 5);
  auto emb = eval::extract_embeddings(model, split.test);
  CHECK(emb.z.rows() == 32);
  CHECK(emb.z.cols() == model.config().z_dim());
  REQUIRE(emb.slices.size() == 3);
  CHECK(emb.slices[0].first == "shared");
  CHECK(emb.slices[0].second.first == 0);
  CHECK(emb.slices[0].second.second == 16);
  CHECK(emb.slices[1].first == "unique_1");
  CHECK(emb.slices[2].first == "unique_2");
  CHECK(emb.slices[2].second.second == emb.z.cols());

  // slice reassembly equals the full matrix
  MatD full = eval::component_columns(emb, "full");
  MatD rebuilt(full.rows(), full.cols());
  rebuilt << eval::component_columns(emb, "shared"), eval::component_columns(emb, "unique_1"),
      eval::component_columns(emb, "unique_2");
  CHECK(rebuilt == full);

  auto emb2 = eval::extract_embeddings(model, split.test);
  CHECK(emb.z == emb2.z);

  CHECK_THROWS_AS(eval::component_columns(emb, "unique_9"), ConfigError);
}

TEST_CASE("aggregate_seeds: examples and recomputation to 1e-12") {
  auto a = eval::aggregate_seeds(synth::ProbeTask::Synergy, {0.74, 0.74, 0.74});
  CHECK(a.mean == doctest::Approx(0.74).epsilon(1e-12));
  CHECK(a.stddev == doctest::Approx(0.0));
  CHECK(eval::format_mean_std(a) == "74.0±0.00");

  auto b = eval::aggregate_seeds(synth::ProbeTask::Synergy, {0.70, 0.80});
  CHECK(b.mean == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(b.stddev == doctest::Approx(0.05).epsilon(1e-12));  // population std

  std::vector<double> accs = {0.9412, 0.9355, 0.9538, 0.9471, 0.9402};
  auto c = eval::aggregate_seeds(synth::ProbeTask::Redundancy, accs);
  double mean = 0;
  for (double x : accs) mean += x / 5.0;
  double var = 0;
  for (double x : accs) var += (x - mean) * (x - mean) / 5.0;
  CHECK(std::abs(c.mean - mean) < 1e-12);
  CHECK(std::abs(c.stddev - std::sqrt(var)) < 1e-12);

  CHECK_THROWS_AS(eval::aggregate_seeds(synth::ProbeTask::Synergy, {0.5}), ConfigError);
}

TEST_CASE("disentanglement statistic equals the loss module's hinge-cosine") {
  auto split = small_split(64, 48);
  Model<float> model(small_model(), 6);
  auto rep = eval::measure_disentanglement(model, split.test);
  REQUIRE(rep.shared_vs_unique.size() == 2);
  REQUIRE(rep.unique_pairs.size() == 1);
  for (double v : rep.shared_vs_unique) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }

  // cross-check one pair against the tape implementation of cel
  const ModelConfig& mc = model.config();
  const int n = 48;
  MatF p_sr(n, mc.d_p), p_u0(n, mc.d_p);
  for (int at = 0; at < n; at += 16) {
    ad::Tape<float> t;
    std::vector<ad::Var> payloads;
    for (int m = 0; m < 2; ++m) {
      MatF p(16, 30);
      for (int i = 0; i < 16; ++i)
        p.row(i) = split.test[static_cast<std::size_t>(at + i)]
                       .views[static_cast<std::size_t>(m)]
                       .cast<float>()
                       .transpose();
      payloads.push_back(t.input(p));
    }
    auto out = model.forward(t, payloads, {}, true);
    p_sr.middleRows(at, 16) = t.value(out.p_sr);
    p_u0.middleRows(at, 16) = t.value(out.p_u[0]);
  }
  ad::Tape<float> t;
  double via_loss = t.scalar(losses::cel(t, t.input(p_u0), t.input(p_sr)));
  CHECK(rep.shared_vs_unique[0] == doctest::Approx(via_loss).epsilon(1e-5));
}

TEST_CASE("embedding export: round trip, component names, row count") {
  namespace fs = std::filesystem;
  auto split = small_split(32, 16);
  Model<float> model(small_model(), 7);
  auto emb = eval::extract_embeddings(model, split.test);
  auto path = (fs::temp_directory_path() / "coral_emb_test.csv").string();
  eval::export_embeddings_csv(path, emb);
  auto rows = eval::load_embeddings_csv(path);

  CHECK(rows.size() == 16 * 3);  // n_samples x (n + 1) components
  std::size_t at = 0;
  for (int r = 0; r < 16; ++r) {
    for (const auto& [name, range] : emb.slices) {
      const auto& row = rows[at++];
      CHECK(row.sample_id == emb.sample_ids[static_cast<std::size_t>(r)]);
      CHECK(row.component == name);
      REQUIRE(static_cast<int>(row.values.size()) == range.second - range.first);
      for (int c = range.first; c < range.second; ++c)
        CHECK(std::abs(row.values[static_cast<std::size_t>(c - range.first)] -
                       static_cast<double>(emb.z(r, c))) < 1e-9);
    }
  }
  fs::remove(path);
}

TEST_CASE("synergy task data splits the balanced test half/half") {
  auto split = small_split(64, 128);
  Model<float> model(small_model(), 8);
  auto etr = eval::extract_embeddings(model, split.train);
  auto ete = eval::extract_embeddings(model, split.test);
  auto td = eval::task_data(etr, ete, split, synth::ProbeTask::Synergy);
  CHECK(td.x_train.rows() == 64);
  CHECK(td.x_test.rows() == 64);
  CHECK(td.n_classes == 2);
  int pos_train = 0, pos_test = 0;
  for (int y : td.y_train) pos_train += y;
  for (int y : td.y_test) pos_test += y;
  CHECK(pos_train == 32);
  CHECK(pos_test == 32);

  auto rd = eval::task_data(etr, ete, split, synth::ProbeTask::Redundancy);
  CHECK(rd.x_train.rows() == 64);
  CHECK(rd.x_test.rows() == 128);
  CHECK(rd.n_classes == 10);
}
