#include "coral/synth.hpp"

#include <Eigen/QR>
#include <nlohmann/json.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>

namespace coral::synth {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<int> SynergyMapping::inverse() const {
  std::vector<int> inv(map.size(), -1);
  for (std::size_t t = 0; t < map.size(); ++t) inv[static_cast<std::size_t>(map[t])] = static_cast<int>(t);
  return inv;
}

void SynergyMapping::validate(int cardinality) const {
  require(static_cast<int>(map.size()) == cardinality, "mapping: wrong length");
  std::vector<bool> seen(map.size(), false);
  for (int v : map) {
    require(v >= 0 && v < cardinality, "mapping: value out of range");
    require(!seen[static_cast<std::size_t>(v)], "mapping: not a bijection");
    seen[static_cast<std::size_t>(v)] = true;
  }
}

void SynthConfig::validate() const {
  require(cardinality >= 2, "cardinality must be >= 2 (synergy label degenerate otherwise)");
  require(n_train >= 1, "n_train must be >= 1");
  require(n_test >= 2, "n_test must be >= 2 (balanced test construction needs both labels)");
  require(noise_sigma >= 0.0, "noise_sigma must be >= 0");
}

std::string probe_task_name(ProbeTask task) {
  switch (task) {
    case ProbeTask::Redundancy: return "redundancy";
    case ProbeTask::Uniqueness: return "uniqueness";
    case ProbeTask::Synergy: return "synergy";
  }
  return "?";
}

ProbeTask probe_task_from_name(const std::string& name) {
  if (name == "redundancy") return ProbeTask::Redundancy;
  if (name == "uniqueness") return ProbeTask::Uniqueness;
  if (name == "synergy") return ProbeTask::Synergy;
  throw ConfigError("unknown probe task: " + name);
}

namespace {

MatD random_orthogonal(int dim, Rng& rng) {
  MatD g(dim, dim);
  for (int r = 0; r < dim; ++r)
    for (int c = 0; c < dim; ++c) g(r, c) = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ();
  Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  // fix the sign convention so the factorization is unique
  for (int c = 0; c < dim; ++c)
    if (r(c, c) < 0) q.col(c) = -q.col(c);
  return q;
}

Eigen::VectorXd encode_payload(const FactorTriple& f, const SynthConfig& cfg,
                               const MatD& scramble, Rng& rng) {
  Eigen::VectorXd onehot = Eigen::VectorXd::Zero(cfg.payload_dim());
  onehot[f.shape] = 1.0;
  onehot[cfg.cardinality + f.texture] = 1.0;
  onehot[2 * cfg.cardinality + f.color] = 1.0;
  for (int i = 0; i < onehot.size(); ++i) onehot[i] += cfg.noise_sigma * rng.normal();
  return scramble * onehot;
}

int draw(Rng& rng, int n) { return static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(n))); }

MultimodalSample make_pair(std::uint64_t id, bool adherent, const SynthConfig& cfg,
                           const SynergyMapping& mapping, const std::vector<MatD>& scrambles,
                           Rng& rng) {
  MultimodalSample s;
  s.sample_id = id;
  int shape = draw(rng, cfg.cardinality);
  FactorTriple f1{shape, draw(rng, cfg.cardinality), draw(rng, cfg.cardinality)};
  FactorTriple f2{shape, draw(rng, cfg.cardinality), 0};
  if (adherent) {
    f2.color = mapping.map[static_cast<std::size_t>(f1.texture)];
  } else {
    // resample uniformly from the non-mapped colors, guaranteeing label 0
    int mapped = mapping.map[static_cast<std::size_t>(f1.texture)];
    int c = draw(rng, cfg.cardinality - 1);
    f2.color = (c >= mapped) ? c + 1 : c;
  }
  s.factors = {f1, f2};
  s.views.push_back(encode_payload(f1, cfg, scrambles[0], rng));
  s.views.push_back(encode_payload(f2, cfg, scrambles[1], rng));
  s.synergy_label = adherent ? 1 : 0;
  return s;
}

}  // namespace

DatasetSplit generate_trifeature(const SynthConfig& config, std::uint64_t seed) {
  config.validate();
  DatasetSplit split;
  split.seed = seed;
  split.config = config;

  Rng map_rng = Rng::stream(seed, "synth/mapping");
  split.mapping.map = map_rng.permutation(config.cardinality);
  split.mapping.validate(config.cardinality);

  Rng scramble_rng = Rng::stream(seed, "synth/scramble");
  for (int i = 0; i < config.n_modalities(); ++i)
    split.scrambles.push_back(random_orthogonal(config.payload_dim(), scramble_rng));

  Rng train_rng = Rng::stream(seed, "synth/train");
  split.train.reserve(static_cast<std::size_t>(config.n_train));
  for (int i = 0; i < config.n_train; ++i)
    split.train.push_back(make_pair(static_cast<std::uint64_t>(i), true, config, split.mapping,
                                    split.scrambles, train_rng));

  // Balanced test labels arranged pairwise (one adherent + one negative per
  // consecutive pair, order randomized) so any contiguous half of the list is
  // itself balanced; the probe protocol trains on one half.
  Rng test_rng = Rng::stream(seed, "synth/test");
  split.test.reserve(static_cast<std::size_t>(config.n_test));
  for (int i = 0; i < config.n_test; ++i) {
    bool adherent;
    if (i + 1 < config.n_test || config.n_test % 2 == 0) {
      bool first_of_pair = (i % 2 == 0);
      if (first_of_pair) adherent = test_rng.uniform_below(2) == 0;
      else adherent = split.test.back().synergy_label == 0;
    } else {
      adherent = true;  // odd count: the +-1 sample is adherent
    }
    split.test.push_back(make_pair(static_cast<std::uint64_t>(config.n_train + i), adherent,
                                   config, split.mapping, split.scrambles, test_rng));
  }
  return split;
}

std::vector<int> probe_labels(const std::vector<MultimodalSample>& samples, ProbeTask task) {
  std::vector<int> labels;
  labels.reserve(samples.size());
  for (const auto& s : samples) {
    switch (task) {
      case ProbeTask::Redundancy: labels.push_back(s.factors[0].shape); break;
      case ProbeTask::Uniqueness: labels.push_back(s.factors[0].texture); break;
      case ProbeTask::Synergy: labels.push_back(s.synergy_label); break;
    }
  }
  return labels;
}

double adherence_rate(const std::vector<MultimodalSample>& samples,
                      const SynergyMapping& mapping) {
  if (samples.empty()) return 0.0;
  int hits = 0;
  for (const auto& s : samples)
    if (s.factors[1].color == mapping.map[static_cast<std::size_t>(s.factors[0].texture)]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

// ---- serialization ----

namespace {
constexpr char kMagic[8] = {'C', 'O', 'R', 'A', 'L', 'D', 'S', '1'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}
}  // namespace

void save_samples(const std::string& path, const std::vector<MultimodalSample>& samples,
                  const SynthConfig& config, std::uint64_t seed) {
  std::ofstream os(path, std::ios::binary);
  require(os.good(), "save_samples: cannot open " + path);
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, kVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(config.n_modalities()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(config.cardinality));
  put<std::uint64_t>(os, samples.size());
  put<std::uint64_t>(os, seed);
  for (const auto& s : samples) {
    put<std::uint64_t>(os, s.sample_id);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(s.synergy_label));
    for (const auto& f : s.factors) {
      put<std::uint32_t>(os, static_cast<std::uint32_t>(f.shape));
      put<std::uint32_t>(os, static_cast<std::uint32_t>(f.texture));
      put<std::uint32_t>(os, static_cast<std::uint32_t>(f.color));
    }
    for (const auto& v : s.views)
      os.write(reinterpret_cast<const char*>(v.data()),
               static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(v.size())));
  }
  require(os.good(), "save_samples: write failed for " + path);
}

std::vector<MultimodalSample> load_samples(const std::string& path, SynthConfig* config_out,
                                           std::uint64_t* seed_out) {
  std::ifstream is(path, std::ios::binary);
  require(is.good(), "load_samples: cannot open " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  require(is.good() && std::memcmp(magic, kMagic, 8) == 0,
          "load_samples: bad magic in " + path);
  require(get<std::uint32_t>(is) == kVersion, "load_samples: unsupported version");
  auto n_mod = get<std::uint32_t>(is);
  auto card = get<std::uint32_t>(is);
  auto n_samples = get<std::uint64_t>(is);
  auto seed = get<std::uint64_t>(is);
  require(n_mod == 2, "load_samples: only bimodal files supported");
  SynthConfig cfg;
  cfg.cardinality = static_cast<int>(card);
  if (config_out) *config_out = cfg;
  if (seed_out) *seed_out = seed;

  std::vector<MultimodalSample> samples;
  samples.reserve(n_samples);
  const int dim = cfg.payload_dim();
  for (std::uint64_t i = 0; i < n_samples; ++i) {
    MultimodalSample s;
    s.sample_id = get<std::uint64_t>(is);
    s.synergy_label = static_cast<int>(get<std::uint32_t>(is));
    s.factors.resize(n_mod);
    for (auto& f : s.factors) {
      f.shape = static_cast<int>(get<std::uint32_t>(is));
      f.texture = static_cast<int>(get<std::uint32_t>(is));
      f.color = static_cast<int>(get<std::uint32_t>(is));
    }
    for (std::uint32_t m = 0; m < n_mod; ++m) {
      Eigen::VectorXd v(dim);
      is.read(reinterpret_cast<char*>(v.data()),
              static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(dim)));
      s.views.push_back(std::move(v));
    }
    require(is.good(), "load_samples: truncated file " + path);
    samples.push_back(std::move(s));
  }
  return samples;
}

void save_split(const std::string& dir, const DatasetSplit& split) {
  fs::create_directories(dir);
  save_samples((fs::path(dir) / "train.coralds").string(), split.train, split.config, split.seed);
  save_samples((fs::path(dir) / "test.coralds").string(), split.test, split.config, split.seed);

  json meta;
  meta["seed"] = split.seed;
  meta["cardinality"] = split.config.cardinality;
  meta["n_train"] = split.config.n_train;
  meta["n_test"] = split.config.n_test;
  meta["noise_sigma"] = split.config.noise_sigma;
  meta["mapping"] = split.mapping.map;
  std::ofstream meta_os(fs::path(dir) / "dataset.json");
  meta_os << meta.dump(2) << "\n";
  require(meta_os.good(), "save_split: cannot write dataset.json");

  std::ofstream csv(fs::path(dir) / "labels.csv");
  csv << "sample_id,task,label\n";
  for (ProbeTask task : {ProbeTask::Redundancy, ProbeTask::Uniqueness, ProbeTask::Synergy}) {
    for (const auto* part : {&split.train, &split.test}) {
      auto labels = probe_labels(*part, task);
      for (std::size_t i = 0; i < part->size(); ++i)
        csv << (*part)[i].sample_id << "," << probe_task_name(task) << "," << labels[i] << "\n";
    }
  }
  require(csv.good(), "save_split: cannot write labels.csv");
}

DatasetSplit load_split(const std::string& dir) {
  DatasetSplit split;
  std::ifstream meta_is(fs::path(dir) / "dataset.json");
  require(meta_is.good(), "load_split: missing dataset.json in " + dir);
  json meta = json::parse(meta_is);
  split.seed = meta.at("seed").get<std::uint64_t>();
  split.config.cardinality = meta.at("cardinality").get<int>();
  split.config.n_train = meta.at("n_train").get<int>();
  split.config.n_test = meta.at("n_test").get<int>();
  split.config.noise_sigma = meta.at("noise_sigma").get<double>();
  split.mapping.map = meta.at("mapping").get<std::vector<int>>();
  split.mapping.validate(split.config.cardinality);

  split.train = load_samples((fs::path(dir) / "train.coralds").string(), nullptr, nullptr);
  split.test = load_samples((fs::path(dir) / "test.coralds").string(), nullptr, nullptr);
  require(static_cast<int>(split.train.size()) == split.config.n_train,
          "load_split: train size mismatch");
  require(static_cast<int>(split.test.size()) == split.config.n_test,
          "load_split: test size mismatch");
  return split;
}

}  // namespace coral::synth
