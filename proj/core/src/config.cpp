#include "coral/config.hpp"

#include "coral/rng.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <set>

namespace coral {

using nlohmann::json;

namespace {

/// Walks an object, erroring on keys the schema does not know. Call done()
/// after all reads; no silent typo acceptance.
struct StrictReader {
  json j;
  std::string path;
  std::set<std::string> seen;

  StrictReader(json jj, std::string p) : j(std::move(jj)), path(std::move(p)) {
    require(j.is_object(), "config: " + path + " must be an object");
  }

  bool has(const std::string& key) {
    seen.insert(key);
    return j.contains(key);
  }

  template <class T>
  void read(const std::string& key, T& out) {
    if (!has(key)) return;
    try {
      out = j.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError("config: bad value for " + path + key + ": " + e.what());
    }
  }

  json sub(const std::string& key) {
    seen.insert(key);
    return j.contains(key) ? j.at(key) : json::object();
  }

  void done() const {
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (!seen.count(it.key()))
        throw ConfigError("config: unknown key " + path + it.key());
    }
  }
};

json schedule_to_json(const masking::MaskSchedule& s) {
  json j;
  j["mode"] = s.mode == masking::MaskSchedule::Mode::Increasing ? "increasing" : "static";
  json stages = json::array();
  for (const auto& [e, r] : s.stages) stages.push_back(json::array({e, r}));
  j["stages"] = stages;
  return j;
}

}  // namespace

void ExperimentConfig::validate() const {
  require(schema_version == 1, "config: unsupported schema_version");
  data.validate();
  model.validate();
  require(model.n_modalities == data.n_modalities(),
          "config: model.n_modalities must match the bimodal generator");
  for (int d : model.payload_dims)
    require(d == data.payload_dim(), "config: model payload dims must equal 3*cardinality");
  optim.validate();
  schedule.validate();
  for (const auto& [epoch, ratio] : schedule.stages) {
    (void)ratio;
    require(epoch < optim.epochs, "config: mask schedule stage beyond epoch range");
  }
  weights.validate();
  similarity.validate();
  augment.validate();
  probe.validate();
  finetune.validate();
  require(!seeds.empty(), "config: seeds must be nonempty");
  require(checkpoint_every >= 1, "config: checkpoint_every must be >= 1");
}

std::uint64_t ExperimentConfig::model_hash() const {
  json j;
  j["n_modalities"] = model.n_modalities;
  j["payload_dims"] = model.payload_dims;
  j["tokens_per_modality"] = model.tokens_per_modality;
  j["d_tok"] = model.d_tok;
  j["d_s"] = model.d_s;
  j["d_p"] = model.d_p;
  j["fusion_heads"] = model.fusion_heads;
  j["fusion_layers"] = model.fusion_layers;
  j["ffn_hidden"] = model.ffn_hidden;
  j["encoder_hidden"] = model.encoder_hidden;
  j["unique_variant"] = unique_variant_name(model.unique_variant);
  j["share_pathway_encoders"] = model.share_pathway_encoders;
  j["learnable_mask_token"] = model.learnable_mask_token;
  return fnv1a(j.dump());
}

ExperimentConfig config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  ExperimentConfig cfg;
  StrictReader root(j, "");
  root.read("schema_version", cfg.schema_version);

  {
    StrictReader r(root.sub("data"), "data.");
    r.read("cardinality", cfg.data.cardinality);
    r.read("n_train", cfg.data.n_train);
    r.read("n_test", cfg.data.n_test);
    r.read("noise_sigma", cfg.data.noise_sigma);
    r.read("seed", cfg.data_seed);
    r.read("dir", cfg.data_dir);
    r.done();
  }
  // payload dims follow the generator unless explicitly overridden
  cfg.model.payload_dims.assign(static_cast<std::size_t>(cfg.data.n_modalities()),
                                cfg.data.payload_dim());
  {
    StrictReader r(root.sub("model"), "model.");
    r.read("n_modalities", cfg.model.n_modalities);
    r.read("payload_dims", cfg.model.payload_dims);
    r.read("tokens_per_modality", cfg.model.tokens_per_modality);
    r.read("d_tok", cfg.model.d_tok);
    r.read("d_s", cfg.model.d_s);
    r.read("d_p", cfg.model.d_p);
    r.read("fusion_heads", cfg.model.fusion_heads);
    r.read("fusion_layers", cfg.model.fusion_layers);
    r.read("ffn_hidden", cfg.model.ffn_hidden);
    r.read("encoder_hidden", cfg.model.encoder_hidden);
    std::string variant = unique_variant_name(cfg.model.unique_variant);
    r.read("unique_variant", variant);
    cfg.model.unique_variant = unique_variant_from_name(variant);
    r.read("share_pathway_encoders", cfg.model.share_pathway_encoders);
    r.read("learnable_mask_token", cfg.model.learnable_mask_token);
    r.done();
  }
  {
    StrictReader r(root.sub("optim"), "optim.");
    r.read("lr", cfg.optim.lr);
    r.read("weight_decay", cfg.optim.weight_decay);
    r.read("beta1", cfg.optim.beta1);
    r.read("beta2", cfg.optim.beta2);
    r.read("eps", cfg.optim.eps);
    r.read("batch_size", cfg.optim.batch_size);
    r.read("epochs", cfg.optim.epochs);
    r.done();
  }
  {
    StrictReader r(root.sub("mask"), "mask.");
    r.read("enabled", cfg.masking_enabled);
    std::string mode = cfg.schedule.mode == masking::MaskSchedule::Mode::Increasing
                           ? "increasing"
                           : "static";
    r.read("mode", mode);
    if (mode == "increasing") cfg.schedule.mode = masking::MaskSchedule::Mode::Increasing;
    else if (mode == "static") cfg.schedule.mode = masking::MaskSchedule::Mode::Static;
    else throw ConfigError("config: mask.mode must be 'increasing' or 'static'");
    if (r.has("stages")) {
      cfg.schedule.stages.clear();
      for (const auto& st : r.j.at("stages")) {
        require(st.is_array() && st.size() == 2,
                "config: mask.stages entries must be [epoch, ratio]");
        cfg.schedule.stages.push_back({st.at(0).get<int>(), st.at(1).get<double>()});
      }
    }
    r.done();
  }
  {
    StrictReader r(root.sub("loss"), "loss.");
    r.read("lambda_s", cfg.weights.lambda_s);
    r.read("lambda_u", cfg.weights.lambda_u);
    r.read("lambda_o", cfg.weights.lambda_o);
    r.read("temperature", cfg.similarity.temperature);
    r.read("symmetrize", cfg.similarity.symmetrize);
    r.done();
  }
  {
    StrictReader r(root.sub("augment"), "augment.");
    r.read("noise_sigma", cfg.augment.noise_sigma);
    r.read("dropout_p", cfg.augment.dropout_p);
    r.done();
  }
  {
    StrictReader r(root.sub("probe"), "probe.");
    r.read("l2", cfg.probe.l2);
    r.read("max_iters", cfg.probe.max_iters);
    r.read("tol", cfg.probe.tol);
    r.done();
  }
  {
    StrictReader r(root.sub("finetune"), "finetune.");
    std::string policy = cfg.finetune.policy == FinetuneConfig::PositivePolicy::SameClass
                             ? "same_class"
                             : "same_sample_only";
    r.read("positive_policy", policy);
    if (policy == "same_class") cfg.finetune.policy = FinetuneConfig::PositivePolicy::SameClass;
    else if (policy == "same_sample_only")
      cfg.finetune.policy = FinetuneConfig::PositivePolicy::SameSampleOnly;
    else throw ConfigError("config: finetune.positive_policy must be same_class|same_sample_only");
    r.read("mask_ratio", cfg.finetune.mask_ratio);
    r.read("lambda_o", cfg.finetune.lambda_o);
    r.read("freeze_heads", cfg.finetune.freeze_heads);
    r.read("patience", cfg.finetune.patience);
    r.read("max_epochs", cfg.finetune.max_epochs);
    r.read("lr", cfg.finetune.lr);
    r.done();
  }
  root.read("seeds", cfg.seeds);
  root.read("out_dir", cfg.out_dir);
  root.read("checkpoint_every", cfg.checkpoint_every);
  root.done();

  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  require(is.good(), "config: cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return config_from_json_text(text);
}

std::string config_to_json_text(const ExperimentConfig& cfg) {
  json j;
  j["schema_version"] = cfg.schema_version;
  j["data"] = {{"cardinality", cfg.data.cardinality}, {"n_train", cfg.data.n_train},
               {"n_test", cfg.data.n_test},           {"noise_sigma", cfg.data.noise_sigma},
               {"seed", cfg.data_seed},               {"dir", cfg.data_dir}};
  j["model"] = {{"n_modalities", cfg.model.n_modalities},
                {"payload_dims", cfg.model.payload_dims},
                {"tokens_per_modality", cfg.model.tokens_per_modality},
                {"d_tok", cfg.model.d_tok},
                {"d_s", cfg.model.d_s},
                {"d_p", cfg.model.d_p},
                {"fusion_heads", cfg.model.fusion_heads},
                {"fusion_layers", cfg.model.fusion_layers},
                {"ffn_hidden", cfg.model.ffn_hidden},
                {"encoder_hidden", cfg.model.encoder_hidden},
                {"unique_variant", unique_variant_name(cfg.model.unique_variant)},
                {"share_pathway_encoders", cfg.model.share_pathway_encoders},
                {"learnable_mask_token", cfg.model.learnable_mask_token}};
  j["optim"] = {{"lr", cfg.optim.lr},       {"weight_decay", cfg.optim.weight_decay},
                {"beta1", cfg.optim.beta1}, {"beta2", cfg.optim.beta2},
                {"eps", cfg.optim.eps},     {"batch_size", cfg.optim.batch_size},
                {"epochs", cfg.optim.epochs}};
  j["mask"] = schedule_to_json(cfg.schedule);
  j["mask"]["enabled"] = cfg.masking_enabled;
  j["loss"] = {{"lambda_s", cfg.weights.lambda_s},
               {"lambda_u", cfg.weights.lambda_u},
               {"lambda_o", cfg.weights.lambda_o},
               {"temperature", cfg.similarity.temperature},
               {"symmetrize", cfg.similarity.symmetrize}};
  j["augment"] = {{"noise_sigma", cfg.augment.noise_sigma}, {"dropout_p", cfg.augment.dropout_p}};
  j["probe"] = {{"l2", cfg.probe.l2}, {"max_iters", cfg.probe.max_iters}, {"tol", cfg.probe.tol}};
  j["finetune"] = {{"positive_policy",
                    cfg.finetune.policy == FinetuneConfig::PositivePolicy::SameClass
                        ? "same_class"
                        : "same_sample_only"},
                   {"mask_ratio", cfg.finetune.mask_ratio},
                   {"lambda_o", cfg.finetune.lambda_o},
                   {"freeze_heads", cfg.finetune.freeze_heads},
                   {"patience", cfg.finetune.patience},
                   {"max_epochs", cfg.finetune.max_epochs},
                   {"lr", cfg.finetune.lr}};
  j["seeds"] = cfg.seeds;
  j["out_dir"] = cfg.out_dir;
  j["checkpoint_every"] = cfg.checkpoint_every;
  return j.dump(2) + "\n";
}

void save_config(const std::string& path, const ExperimentConfig& cfg) {
  std::ofstream os(path);
  require(os.good(), "config: cannot write " + path);
  os << config_to_json_text(cfg);
  require(os.good(), "config: write failed for " + path);
}

}  // namespace coral
