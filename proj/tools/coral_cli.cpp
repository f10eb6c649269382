// coral experiment front-end: dataset generation, pretraining, probing,
// ablation sweeps, and supervised fine-tuning over reproducible run
// directories. Exit codes: 0 success, 2 config error, 3 runtime abort.

#include "coral/checkpoint.hpp"
#include "coral/config.hpp"
#include "coral/eval.hpp"
#include "coral/trainer.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace coral;

namespace {

std::string timestamp() {
  auto now = std::chrono::system_clock::now();
  std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

ExperimentConfig load_or_default(const std::string& config_path) {
  if (config_path.empty()) return ExperimentConfig{};
  return load_config(config_path);
}

void apply_overrides(ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds,
                     const std::string& out) {
  if (!seeds.empty()) cfg.seeds = seeds;
  if (!out.empty()) cfg.out_dir = out;
  cfg.validate();
}

void write_manifest(const fs::path& run_dir, const ExperimentConfig& cfg,
                    const std::string& command) {
  json m;
  m["schema_version"] = 1;
  m["tool"] = "coral 0.1.0";
  m["command"] = command;
  m["created_at"] = timestamp();
  m["config_snapshot"] = "config.snapshot.json";
  m["model_hash"] = cfg.model_hash();
  m["seeds"] = cfg.seeds;
  m["data_dir"] = cfg.data_dir;
  json artifacts = json::array();
  for (auto seed : cfg.seeds) {
    std::string base = "seeds/" + std::to_string(seed);
    artifacts.push_back({{"seed", seed},
                         {"checkpoints", base + "/checkpoints"},
                         {"metrics", base + "/metrics.csv"},
                         {"mask_audit", base + "/mask_audit.log"},
                         {"events", base + "/events.log"}});
  }
  m["artifacts"] = artifacts;
  m["results_dir"] = "results";
  std::ofstream os(run_dir / "manifest.json");
  os << m.dump(2) << "\n";
  require(os.good(), "cannot write manifest.json");
}

synth::DatasetSplit load_dataset(const ExperimentConfig& cfg) {
  if (!fs::exists(fs::path(cfg.data_dir) / "dataset.json"))
    throw ConfigError("dataset not found in '" + cfg.data_dir +
                      "' (run `coral generate` first)");
  return synth::load_split(cfg.data_dir);
}

struct SeedPaths {
  fs::path dir, checkpoints, metrics, audit, events;
};

SeedPaths seed_paths(const fs::path& run_dir, std::uint64_t seed) {
  SeedPaths p;
  p.dir = run_dir / "seeds" / std::to_string(seed);
  p.checkpoints = p.dir / "checkpoints";
  p.metrics = p.dir / "metrics.csv";
  p.audit = p.dir / "mask_audit.log";
  p.events = p.dir / "events.log";
  return p;
}

int latest_checkpoint_epoch(const fs::path& ckpt_dir) {
  int best = -1;
  if (!fs::exists(ckpt_dir)) return best;
  for (const auto& e : fs::directory_iterator(ckpt_dir)) {
    const std::string name = e.path().filename().string();
    if (name.rfind("epoch_", 0) == 0)
      best = std::max(best, std::stoi(name.substr(6, name.find('.') - 6)));
  }
  return best;
}

void pretrain_one_seed(const ExperimentConfig& cfg, const synth::DatasetSplit& data,
                       const fs::path& run_dir, std::uint64_t seed, bool resume) {
  SeedPaths p = seed_paths(run_dir, seed);
  fs::create_directories(p.checkpoints);

  Model<float> model(cfg.model, seed);
  AdamW<float> opt(model.parameters(), cfg.optim);

  int start_epoch = 0;
  if (resume) {
    int last = latest_checkpoint_epoch(p.checkpoints);
    if (last >= 0) {
      char name[32];
      std::snprintf(name, sizeof(name), "epoch_%04d.ckpt", last);
      auto meta = load_checkpoint((p.checkpoints / name).string(), model, cfg.model_hash(), &opt);
      start_epoch = static_cast<int>(meta.epoch) + 1;
      std::cout << "seed " << seed << ": resuming at epoch " << start_epoch << "\n";
    }
  }
  if (start_epoch >= cfg.optim.epochs) {
    std::cout << "seed " << seed << ": already complete\n";
    return;
  }

  std::ofstream metrics(p.metrics, start_epoch > 0 ? std::ios::app : std::ios::trunc);
  if (start_epoch == 0) metrics << "step,l_shared,l_unique,l_orthogonal,total,m,lr\n";
  std::ofstream audit(p.audit, start_epoch > 0 ? std::ios::app : std::ios::trunc);
  std::ofstream events(p.events, start_epoch > 0 ? std::ios::app : std::ios::trunc);

  train::PretrainHooks hooks;
  hooks.on_step = [&](const train::StepMetrics& s) {
    metrics << s.step << "," << s.loss_shared << "," << s.loss_unique << ","
            << s.loss_orthogonal << "," << s.total << "," << s.mask_ratio << "," << s.lr << "\n";
  };
  hooks.on_mask = [&](const train::MaskAuditRecord& r) {
    audit << r.epoch << "," << r.ratio << ",M1=";
    for (std::size_t i = 0; i < r.m1.size(); ++i) audit << (i ? "|" : "") << r.m1[i];
    audit << ",M2=";
    for (std::size_t i = 0; i < r.m2.size(); ++i) audit << (i ? "|" : "") << r.m2[i];
    audit << "\n";
  };
  hooks.on_epoch_end = [&](int epoch, double mean_total) {
    events << json({{"event", "epoch_end"}, {"epoch", epoch}, {"mean_total", mean_total}}).dump()
           << "\n";
    events.flush();
  };
  hooks.on_schedule_transition = [&](int epoch, double ratio) {
    events << json({{"event", "schedule_transition"}, {"epoch", epoch}, {"ratio", ratio}}).dump()
           << "\n";
  };
  hooks.on_checkpoint = [&](int epoch) {
    char name[32];
    std::snprintf(name, sizeof(name), "epoch_%04d.ckpt", epoch);
    CheckpointMeta meta{cfg.model_hash(), static_cast<std::uint32_t>(epoch), seed, true};
    save_checkpoint((p.checkpoints / name).string(), model, meta, &opt);
    if (epoch + 1 == cfg.optim.epochs) {
      CheckpointMeta final_meta{cfg.model_hash(), static_cast<std::uint32_t>(epoch), seed, false};
      save_checkpoint((p.checkpoints / "final.ckpt").string(), model, final_meta);
    }
    events << json({{"event", "checkpoint"}, {"epoch", epoch}}).dump() << "\n";
  };

  auto result = train::pretrain(model, opt, data, cfg, seed, hooks, start_epoch);
  std::cout << "seed " << seed << ": " << result.steps << " steps, final mean loss "
            << result.final_epoch_mean_total << "\n";
}

struct SeedProbe {
  std::uint64_t seed;
  std::map<synth::ProbeTask, double> accuracy;
};

SeedProbe probe_one_seed(const ExperimentConfig& cfg, const synth::DatasetSplit& data,
                         const fs::path& run_dir, std::uint64_t seed,
                         const std::string& component, bool export_embeddings) {
  SeedPaths p = seed_paths(run_dir, seed);
  fs::path ckpt = p.checkpoints / "final.ckpt";
  if (!fs::exists(ckpt))
    throw ConfigError("missing checkpoint " + ckpt.string() + " (pretrain first)");
  Model<float> model(cfg.model, seed);
  load_checkpoint(ckpt.string(), model, cfg.model_hash());

  auto etr = eval::extract_embeddings(model, data.train);
  auto ete = eval::extract_embeddings(model, data.test);
  SeedProbe out{seed, {}};
  for (auto task : {synth::ProbeTask::Redundancy, synth::ProbeTask::Uniqueness,
                    synth::ProbeTask::Synergy})
    out.accuracy[task] = eval::run_probe(etr, ete, data, task, cfg.probe, component);
  if (export_embeddings) {
    fs::create_directories(run_dir / "results");
    eval::export_embeddings_csv(
        (run_dir / "results" / ("embeddings_" + std::to_string(seed) + ".csv")).string(), ete);
  }
  return out;
}

void write_probe_results(const fs::path& run_dir, const std::vector<SeedProbe>& probes,
                         const std::string& component) {
  fs::create_directories(run_dir / "results");
  std::ofstream csv(run_dir / "results" / "probe_results.csv");
  csv << "task,component,mean,std";
  for (const auto& sp : probes) csv << ",seed_" << sp.seed;
  csv << "\n";
  std::ostringstream table;
  table << "task         component  mean±std";
  for (const auto& sp : probes) table << "  s" << sp.seed;
  table << "\n";
  for (auto task : {synth::ProbeTask::Redundancy, synth::ProbeTask::Uniqueness,
                    synth::ProbeTask::Synergy}) {
    std::vector<double> accs;
    for (const auto& sp : probes) accs.push_back(sp.accuracy.at(task));
    auto agg = probes.size() >= 2
                   ? eval::aggregate_seeds(task, accs)
                   : eval::ProbeResult{task, accs, accs.at(0), 0.0};
    csv << synth::probe_task_name(task) << "," << component << "," << agg.mean << ","
        << agg.stddev;
    for (double a : accs) csv << "," << a;
    csv << "\n";
    char line[256];
    std::snprintf(line, sizeof(line), "%-12s %-10s %s", synth::probe_task_name(task).c_str(),
                  component.c_str(), eval::format_mean_std(agg).c_str());
    table << line;
    for (double a : accs) {
      std::snprintf(line, sizeof(line), "  %.3f", a);
      table << line;
    }
    table << "\n";
  }
  std::ofstream txt(run_dir / "results" / "probe_results.txt");
  txt << table.str();
  std::cout << table.str();
}

// ---- subcommands ----

int cmd_generate(const std::string& config_path, const std::string& out, bool dry_run) {
  ExperimentConfig cfg = load_or_default(config_path);
  if (!out.empty()) cfg.data_dir = out;
  cfg.validate();
  if (dry_run) {
    std::cout << config_to_json_text(cfg);
    return 0;
  }
  auto split = synth::generate_trifeature(cfg.data, cfg.data_seed);
  synth::save_split(cfg.data_dir, split);
  json m;
  m["generator_seed"] = cfg.data_seed;
  m["created_at"] = timestamp();
  m["n_train"] = cfg.data.n_train;
  m["n_test"] = cfg.data.n_test;
  m["cardinality"] = cfg.data.cardinality;
  std::ofstream os(fs::path(cfg.data_dir) / "manifest.json");
  os << m.dump(2) << "\n";
  std::cout << "wrote " << cfg.data.n_train << "+" << cfg.data.n_test << " samples to "
            << cfg.data_dir << "\n";
  return 0;
}

int cmd_pretrain(const std::string& config_path, const std::vector<std::uint64_t>& seeds,
                 const std::string& out, bool dry_run, bool resume) {
  ExperimentConfig cfg = load_or_default(config_path);
  apply_overrides(cfg, seeds, out);
  if (dry_run) {
    std::cout << config_to_json_text(cfg);
    return 0;
  }
  auto data = load_dataset(cfg);
  fs::path run_dir(cfg.out_dir);
  fs::create_directories(run_dir);
  if (!resume || !fs::exists(run_dir / "manifest.json")) {
    save_config((run_dir / "config.snapshot.json").string(), cfg);
    write_manifest(run_dir, cfg, "pretrain");
  }
  for (auto seed : cfg.seeds) pretrain_one_seed(cfg, data, run_dir, seed, resume);
  std::cout << "run directory: " << run_dir.string() << "\n";
  return 0;
}

int cmd_probe(const std::string& run_dir_arg, const std::string& component,
              bool export_embeddings) {
  fs::path run_dir(run_dir_arg);
  if (!fs::exists(run_dir / "config.snapshot.json"))
    throw ConfigError("not a run directory (missing config.snapshot.json): " + run_dir_arg);
  ExperimentConfig cfg = load_config((run_dir / "config.snapshot.json").string());
  auto data = load_dataset(cfg);
  std::vector<SeedProbe> probes;
  for (auto seed : cfg.seeds)
    probes.push_back(probe_one_seed(cfg, data, run_dir, seed, component, export_embeddings));
  write_probe_results(run_dir, probes, component);
  return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& axis,
               const std::vector<std::uint64_t>& seeds, const std::string& out, bool dry_run) {
  ExperimentConfig base = load_or_default(config_path);
  apply_overrides(base, seeds, out);
  // one-axis-at-a-time: non-swept loss weights stay at 1
  base.weights = losses::LossWeights{};

  struct Variant {
    std::string name;
    std::function<void(ExperimentConfig&)> apply;
  };
  std::map<std::string, std::vector<Variant>> presets;
  presets["mask_schedule"] = {
      {"none", [](ExperimentConfig& c) { c.masking_enabled = false; }},
      {"0.25", [](ExperimentConfig& c) { c.schedule = masking::MaskSchedule::constant(0.25); }},
      {"0.50", [](ExperimentConfig& c) { c.schedule = masking::MaskSchedule::constant(0.50); }},
      {"0.75", [](ExperimentConfig& c) { c.schedule = masking::MaskSchedule::constant(0.75); }},
      {"staged",
       [](ExperimentConfig& c) { c.schedule = masking::MaskSchedule::staged_default(); }}};
  presets["lambda_s"] = {
      {"0.5", [](ExperimentConfig& c) { c.weights.lambda_s = 0.5; }},
      {"1", [](ExperimentConfig& c) { c.weights.lambda_s = 1.0; }},
      {"2", [](ExperimentConfig& c) { c.weights.lambda_s = 2.0; }}};
  presets["lambda_u"] = {
      {"0.5", [](ExperimentConfig& c) { c.weights.lambda_u = 0.5; }},
      {"1", [](ExperimentConfig& c) { c.weights.lambda_u = 1.0; }},
      {"2", [](ExperimentConfig& c) { c.weights.lambda_u = 2.0; }}};
  presets["lambda_o"] = {
      {"1", [](ExperimentConfig& c) { c.weights.lambda_o = 1.0; }},
      {"3", [](ExperimentConfig& c) { c.weights.lambda_o = 3.0; }},
      {"5", [](ExperimentConfig& c) { c.weights.lambda_o = 5.0; }}};
  presets["unique_variant"] = {
      {"mlp_pool_half",
       [](ExperimentConfig& c) { c.model.unique_variant = UniqueVariant::MlpPoolHalf; }},
      {"mlp_pool_same",
       [](ExperimentConfig& c) { c.model.unique_variant = UniqueVariant::MlpPoolSame; }}};

  auto it = presets.find(axis);
  if (it == presets.end()) throw ConfigError("unknown ablation axis: " + axis);

  if (dry_run) {
    std::cout << "axis " << axis << ":";
    for (const auto& v : it->second) std::cout << " " << v.name;
    std::cout << "\nseeds:";
    for (auto s : base.seeds) std::cout << " " << s;
    std::cout << "\n";
    return 0;
  }

  auto data = load_dataset(base);
  fs::path sweep_dir = fs::path(base.out_dir) / ("ablate_" + axis);
  fs::create_directories(sweep_dir / "results");

  std::ofstream csv(sweep_dir / "results" / ("ablate_" + axis + ".csv"));
  csv << "value,task,mean,std\n";
  std::ostringstream table;
  table << "value          redundancy       uniqueness       synergy\n";
  for (const auto& variant : it->second) {
    ExperimentConfig cfg = base;
    variant.apply(cfg);
    cfg.out_dir = (sweep_dir / variant.name).string();
    cfg.validate();
    fs::path run_dir(cfg.out_dir);
    fs::create_directories(run_dir);
    save_config((run_dir / "config.snapshot.json").string(), cfg);
    write_manifest(run_dir, cfg, "ablate " + axis + "=" + variant.name);
    std::vector<SeedProbe> probes;
    for (auto seed : cfg.seeds) {
      pretrain_one_seed(cfg, data, run_dir, seed, false);
      probes.push_back(probe_one_seed(cfg, data, run_dir, seed, "full", false));
    }
    write_probe_results(run_dir, probes, "full");
    char line[256];
    std::string cells;
    for (auto task : {synth::ProbeTask::Redundancy, synth::ProbeTask::Uniqueness,
                      synth::ProbeTask::Synergy}) {
      std::vector<double> accs;
      for (const auto& sp : probes) accs.push_back(sp.accuracy.at(task));
      auto agg = probes.size() >= 2 ? eval::aggregate_seeds(task, accs)
                                    : eval::ProbeResult{task, accs, accs.at(0), 0.0};
      csv << variant.name << "," << synth::probe_task_name(task) << "," << agg.mean << ","
          << agg.stddev << "\n";
      std::snprintf(line, sizeof(line), "%-16s ", eval::format_mean_std(agg).c_str());
      cells += line;
    }
    std::snprintf(line, sizeof(line), "%-14s %s\n", variant.name.c_str(), cells.c_str());
    table << line;
  }
  std::ofstream txt(sweep_dir / "results" / ("ablate_" + axis + ".txt"));
  txt << table.str();
  std::cout << table.str();
  return 0;
}

int cmd_finetune(const std::string& run_dir_arg, double mask_ratio, double lambda_o,
                 const std::string& policy, bool no_freeze_heads, int patience) {
  fs::path run_dir(run_dir_arg);
  if (!fs::exists(run_dir / "config.snapshot.json"))
    throw ConfigError("not a run directory (missing config.snapshot.json): " + run_dir_arg);
  ExperimentConfig cfg = load_config((run_dir / "config.snapshot.json").string());
  cfg.finetune.mask_ratio = mask_ratio;
  cfg.finetune.lambda_o = lambda_o;
  cfg.finetune.freeze_heads = !no_freeze_heads;
  cfg.finetune.patience = patience;
  if (policy == "same_class") cfg.finetune.policy = FinetuneConfig::PositivePolicy::SameClass;
  else if (policy == "same_sample_only")
    cfg.finetune.policy = FinetuneConfig::PositivePolicy::SameSampleOnly;
  else throw ConfigError("finetune: policy must be same_class|same_sample_only");
  cfg.validate();

  auto data = load_dataset(cfg);
  auto ft = eval::synergy_finetune_data(data);

  fs::create_directories(run_dir / "results");
  std::ofstream csv(run_dir / "results" / "finetune_results.csv");
  csv << "seed,pre_accuracy,post_accuracy,delta,best_epoch,epochs_run,stopped_early\n";
  double mean_delta = 0;
  for (auto seed : cfg.seeds) {
    SeedPaths p = seed_paths(run_dir, seed);
    fs::path ckpt = p.checkpoints / "final.ckpt";
    if (!fs::exists(ckpt)) throw ConfigError("missing checkpoint " + ckpt.string());
    Model<float> model(cfg.model, seed);
    load_checkpoint(ckpt.string(), model, cfg.model_hash());

    double pre = eval::synergy_probe_accuracy(model, ft, cfg.probe);
    auto result = train::finetune(model, ft.ft_train, ft.ft_train_labels, ft.ft_val,
                                  ft.ft_val_labels, 2, cfg, seed);
    double post = eval::synergy_probe_accuracy(model, ft, cfg.probe);
    CheckpointMeta meta{cfg.model_hash(), static_cast<std::uint32_t>(result.best_epoch), seed,
                        false};
    save_checkpoint((p.checkpoints / "finetuned.ckpt").string(), model, meta);
    csv << seed << "," << pre << "," << post << "," << (post - pre) << "," << result.best_epoch
        << "," << result.epochs_run << "," << (result.stopped_early ? 1 : 0) << "\n";
    std::printf("seed %llu: pre %.4f -> post %.4f (best epoch %d%s)\n",
                static_cast<unsigned long long>(seed), pre, post, result.best_epoch,
                result.stopped_early ? ", early stop" : "");
    mean_delta += (post - pre) / static_cast<double>(cfg.seeds.size());
  }
  std::printf("mean accuracy delta: %+.4f\n", mean_delta);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"COrAL: orthogonalized multimodal contrastive learning"};
  app.require_subcommand(1);

  std::string config_path, out, run_dir, component = "full", policy = "same_class";
  std::vector<std::uint64_t> seeds;
  bool dry_run = false, deterministic = false, resume = false, export_embeddings = false;
  bool no_freeze_heads = false;
  double mask_ratio = 0.20, lambda_o = 1.0;
  int patience = 10;

  app.add_option("--config", config_path, "experiment config JSON")->check(CLI::ExistingFile);
  app.add_option("--seeds", seeds, "override config seeds");
  app.add_option("--out", out, "override output directory");
  app.add_flag("--dry-run", dry_run, "validate config, print resolved defaults, do nothing");
  app.add_flag("--deterministic", deterministic,
               "strict single-threaded execution (always on; recorded for provenance)");

  auto* gen = app.add_subcommand("generate", "generate the synthetic dataset");
  auto* pre = app.add_subcommand("pretrain", "self-supervised pretraining, one sub-run per seed");
  pre->add_flag("--resume", resume, "continue from the latest checkpoint");
  auto* probe = app.add_subcommand("probe", "linear probing over a finished run");
  probe->add_option("run_dir", run_dir, "run directory")->required();
  probe->add_option("--component", component, "full | shared | unique_<i>");
  probe->add_flag("--export-embeddings", export_embeddings, "write embedding CSVs");
  auto* ablate = app.add_subcommand("ablate", "preset sweeps over one axis");
  std::string axis;
  ablate->add_option("axis", axis,
                     "mask_schedule | lambda_s | lambda_u | lambda_o | unique_variant")
      ->required();
  auto* ft = app.add_subcommand("finetune", "supervised contrastive fine-tuning on synergy labels");
  ft->add_option("run_dir", run_dir, "run directory")->required();
  ft->add_option("--mask-ratio", mask_ratio, "fixed masking ratio during fine-tuning");
  ft->add_option("--lambda-o", lambda_o, "orthogonality weight during fine-tuning");
  ft->add_option("--policy", policy, "same_class | same_sample_only");
  ft->add_flag("--no-freeze-heads", no_freeze_heads, "keep projection heads trainable");
  ft->add_option("--patience", patience, "early-stopping patience (epochs)");

  CLI11_PARSE(app, argc, argv);
  (void)deterministic;  // execution is single-threaded by construction

  try {
    if (gen->parsed()) return cmd_generate(config_path, out, dry_run);
    if (pre->parsed()) return cmd_pretrain(config_path, seeds, out, dry_run, resume);
    if (probe->parsed()) return cmd_probe(run_dir, component, export_embeddings);
    if (ablate->parsed()) return cmd_ablate(config_path, axis, seeds, out, dry_run);
    if (ft->parsed())
      return cmd_finetune(run_dir, mask_ratio, lambda_o, policy, no_freeze_heads, patience);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const RuntimeAbort& e) {
    std::cerr << "runtime abort: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
