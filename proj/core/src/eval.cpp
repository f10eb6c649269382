#include "coral/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace coral::eval {

EmbeddingMatrix extract_embeddings(Model<float>& model,
                                   const std::vector<synth::MultimodalSample>& samples,
                                   int batch_size) {
  require(!samples.empty(), "extract_embeddings: no samples");
  const ModelConfig& cfg = model.config();
  EmbeddingMatrix out;
  out.z.resize(static_cast<Eigen::Index>(samples.size()), cfg.z_dim());
  out.sample_ids.reserve(samples.size());
  for (const auto& s : samples) out.sample_ids.push_back(s.sample_id);

  int begin = 0;
  out.slices.push_back({"shared", {0, cfg.d_s}});
  begin = cfg.d_s;
  for (int i = 0; i < cfg.n_modalities; ++i) {
    out.slices.push_back({"unique_" + std::to_string(i + 1), {begin, begin + cfg.unique_dim()}});
    begin += cfg.unique_dim();
  }

  const int n = static_cast<int>(samples.size());
  for (int at = 0; at < n; at += batch_size) {
    const int bsz = std::min(batch_size, n - at);
    std::vector<MatF> payloads;
    for (int m = 0; m < cfg.n_modalities; ++m) {
      MatF p(bsz, cfg.payload_dims[static_cast<std::size_t>(m)]);
      for (int i = 0; i < bsz; ++i)
        p.row(i) = samples[static_cast<std::size_t>(at + i)]
                       .views[static_cast<std::size_t>(m)]
                       .cast<float>()
                       .transpose();
      payloads.push_back(std::move(p));
    }
    out.z.middleRows(at, bsz) = model.forward_inference(payloads);
  }
  return out;
}

MatD component_columns(const EmbeddingMatrix& emb, const std::string& component) {
  if (component == "full") return emb.z.cast<double>();
  for (const auto& [name, range] : emb.slices) {
    if (name == component)
      return emb.z.middleCols(range.first, range.second - range.first).cast<double>();
  }
  throw ConfigError("unknown embedding component: " + component);
}

namespace {

struct LogisticObjective {
  const MatD& x;  // N x (d+1), bias column appended
  const std::vector<int>& y;
  int n_classes;
  double l2;

  // value and gradient at W (flattened (d+1) x C)
  double eval(const MatD& w, MatD& grad) const {
    const Eigen::Index n = x.rows();
    MatD logits = x * w;  // N x C
    double loss = 0;
    MatD p(n, n_classes);
    for (Eigen::Index r = 0; r < n; ++r) {
      auto row = logits.row(r).array();
      double mx = row.maxCoeff();
      auto ex = (row - mx).exp();
      double sum = ex.sum();
      p.row(r) = ex / sum;
      loss -= (logits(r, y[static_cast<std::size_t>(r)]) - mx - std::log(sum));
    }
    loss /= static_cast<double>(n);
    for (Eigen::Index r = 0; r < n; ++r) p(r, y[static_cast<std::size_t>(r)]) -= 1.0;
    grad.noalias() = x.transpose() * p;
    grad /= static_cast<double>(n);
    if (l2 > 0) {
      // bias row excluded from the penalty
      MatD wreg = w;
      wreg.row(w.rows() - 1).setZero();
      loss += 0.5 * l2 * wreg.squaredNorm();
      grad += l2 * wreg;
    }
    return loss;
  }
};

/// L-BFGS with two-loop recursion and Armijo backtracking. The objective is
/// convex, so this converges without a full Wolfe search.
void lbfgs_minimize(const LogisticObjective& obj, MatD& w, int max_iters, double tol) {
  const int mem = 10;
  std::vector<MatD> s_hist, y_hist;
  std::vector<double> rho;
  MatD grad(w.rows(), w.cols());
  double f = obj.eval(w, grad);
  for (int it = 0; it < max_iters; ++it) {
    if (grad.template lpNorm<Eigen::Infinity>() < tol) break;
    // two-loop recursion
    MatD q = grad;
    std::vector<double> alpha(s_hist.size());
    for (int i = static_cast<int>(s_hist.size()) - 1; i >= 0; --i) {
      alpha[static_cast<std::size_t>(i)] =
          rho[static_cast<std::size_t>(i)] *
          (s_hist[static_cast<std::size_t>(i)].array() * q.array()).sum();
      q -= alpha[static_cast<std::size_t>(i)] * y_hist[static_cast<std::size_t>(i)];
    }
    if (!s_hist.empty()) {
      const MatD& sl = s_hist.back();
      const MatD& yl = y_hist.back();
      double gamma = (sl.array() * yl.array()).sum() / (yl.array() * yl.array()).sum();
      q *= gamma;
    }
    for (std::size_t i = 0; i < s_hist.size(); ++i) {
      double beta = rho[i] * (y_hist[i].array() * q.array()).sum();
      q += (alpha[i] - beta) * s_hist[i];
    }
    MatD dir = -q;
    double g_dot_d = (grad.array() * dir.array()).sum();
    if (g_dot_d >= 0) {  // fall back to steepest descent
      dir = -grad;
      g_dot_d = -(grad.array() * grad.array()).sum();
    }
    double step = 1.0;
    MatD w_new(w.rows(), w.cols());
    MatD grad_new(w.rows(), w.cols());
    double f_new = f;
    bool accepted = false;
    for (int ls = 0; ls < 40; ++ls) {
      w_new = w + step * dir;
      f_new = obj.eval(w_new, grad_new);
      if (f_new <= f + 1e-4 * step * g_dot_d) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
    MatD s = w_new - w;
    MatD yv = grad_new - grad;
    double sy = (s.array() * yv.array()).sum();
    if (sy > 1e-12) {
      s_hist.push_back(std::move(s));
      y_hist.push_back(std::move(yv));
      rho.push_back(1.0 / sy);
      if (static_cast<int>(s_hist.size()) > mem) {
        s_hist.erase(s_hist.begin());
        y_hist.erase(y_hist.begin());
        rho.erase(rho.begin());
      }
    }
    w = std::move(w_new);
    grad = std::move(grad_new);
    f = f_new;
  }
}

MatD with_bias(const MatD& x) {
  MatD out(x.rows(), x.cols() + 1);
  out.leftCols(x.cols()) = x;
  out.col(x.cols()).setOnes();
  return out;
}

}  // namespace

double linear_probe(const MatD& x_train, const std::vector<int>& y_train, const MatD& x_test,
                    const std::vector<int>& y_test, int n_classes, const ProbeConfig& cfg) {
  cfg.validate();
  require(x_train.rows() == static_cast<Eigen::Index>(y_train.size()),
          "linear_probe: train size mismatch");
  require(x_test.rows() == static_cast<Eigen::Index>(y_test.size()),
          "linear_probe: test size mismatch");
  require(n_classes >= 2, "linear_probe: need >= 2 classes");
  {
    std::set<int> distinct(y_train.begin(), y_train.end());
    require(distinct.size() >= 2, "linear_probe: degenerate single-class training labels");
  }
  for (int y : y_train) require(y >= 0 && y < n_classes, "linear_probe: label out of range");

  // standardize features on train statistics (affine, so still a linear probe)
  Eigen::RowVectorXd mean = x_train.colwise().mean();
  Eigen::RowVectorXd std_dev =
      ((x_train.rowwise() - mean).array().square().colwise().mean()).sqrt().matrix();
  for (Eigen::Index c = 0; c < std_dev.size(); ++c)
    if (std_dev(c) < 1e-8) std_dev(c) = 1.0;
  MatD xtr = (x_train.rowwise() - mean).array().rowwise() / std_dev.array();
  MatD xte = (x_test.rowwise() - mean).array().rowwise() / std_dev.array();

  MatD xtr_b = with_bias(xtr);
  MatD w = MatD::Zero(xtr_b.cols(), n_classes);
  LogisticObjective obj{xtr_b, y_train, n_classes, cfg.l2};
  lbfgs_minimize(obj, w, cfg.max_iters, cfg.tol);

  MatD logits = with_bias(xte) * w;
  int correct = 0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    Eigen::Index arg = 0;
    logits.row(r).maxCoeff(&arg);
    if (static_cast<int>(arg) == y_test[static_cast<std::size_t>(r)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(logits.rows());
}

TaskData task_data(const EmbeddingMatrix& train_emb, const EmbeddingMatrix& test_emb,
                   const synth::DatasetSplit& split, synth::ProbeTask task,
                   const std::string& component) {
  TaskData td;
  td.n_classes = synth::probe_classes(task, split.config.cardinality);
  if (task == synth::ProbeTask::Synergy) {
    // training pairs all adhere, so the probe trains on one balanced half of
    // the test split and evaluates on the other
    const int n = static_cast<int>(split.test.size());
    const int half = n / 2;
    require(half >= 1 && n - half >= 1, "synergy probe: test split too small");
    MatD all = component_columns(test_emb, component);
    auto labels = synth::probe_labels(split.test, task);
    td.x_train = all.topRows(half);
    td.y_train.assign(labels.begin(), labels.begin() + half);
    td.x_test = all.bottomRows(n - half);
    td.y_test.assign(labels.begin() + half, labels.end());
  } else {
    td.x_train = component_columns(train_emb, component);
    td.y_train = synth::probe_labels(split.train, task);
    td.x_test = component_columns(test_emb, component);
    td.y_test = synth::probe_labels(split.test, task);
  }
  return td;
}

double run_probe(const EmbeddingMatrix& train_emb, const EmbeddingMatrix& test_emb,
                 const synth::DatasetSplit& split, synth::ProbeTask task,
                 const ProbeConfig& cfg, const std::string& component) {
  TaskData td = task_data(train_emb, test_emb, split, task, component);
  return linear_probe(td.x_train, td.y_train, td.x_test, td.y_test, td.n_classes, cfg);
}

double probe_on_samples(Model<float>& model, const std::vector<synth::MultimodalSample>& train,
                        const std::vector<int>& y_train,
                        const std::vector<synth::MultimodalSample>& test,
                        const std::vector<int>& y_test, int n_classes, const ProbeConfig& cfg) {
  EmbeddingMatrix etr = extract_embeddings(model, train);
  EmbeddingMatrix ete = extract_embeddings(model, test);
  return linear_probe(etr.z.cast<double>(), y_train, ete.z.cast<double>(), y_test, n_classes,
                      cfg);
}

ProbeResult aggregate_seeds(synth::ProbeTask task, const std::vector<double>& accuracies) {
  require(accuracies.size() >= 2, "aggregate_seeds: need >= 2 seeds");
  ProbeResult r;
  r.task = task;
  r.per_seed = accuracies;
  double sum = 0;
  for (double a : accuracies) sum += a;
  r.mean = sum / static_cast<double>(accuracies.size());
  double var = 0;
  for (double a : accuracies) var += (a - r.mean) * (a - r.mean);
  r.stddev = std::sqrt(var / static_cast<double>(accuracies.size()));
  return r;
}

std::string format_mean_std(const ProbeResult& r) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.1f±%.2f", 100.0 * r.mean, 100.0 * r.stddev);
  return buf;
}

double DisentanglementReport::max_shared_vs_unique() const {
  double mx = 0;
  for (double v : shared_vs_unique) mx = std::max(mx, v);
  return mx;
}

DisentanglementReport measure_disentanglement(Model<float>& model,
                                              const std::vector<synth::MultimodalSample>& samples,
                                              int batch_size) {
  require(!samples.empty(), "measure_disentanglement: no samples");
  const ModelConfig& cfg = model.config();
  const int n = static_cast<int>(samples.size());
  MatF p_sr(n, cfg.d_p);
  std::vector<MatF> p_u(static_cast<std::size_t>(cfg.n_modalities), MatF(n, cfg.d_p));

  for (int at = 0; at < n; at += batch_size) {
    const int bsz = std::min(batch_size, n - at);
    ad::Tape<float> tape;
    std::vector<ad::Var> payloads;
    for (int m = 0; m < cfg.n_modalities; ++m) {
      MatF p(bsz, cfg.payload_dims[static_cast<std::size_t>(m)]);
      for (int i = 0; i < bsz; ++i)
        p.row(i) = samples[static_cast<std::size_t>(at + i)]
                       .views[static_cast<std::size_t>(m)]
                       .cast<float>()
                       .transpose();
      payloads.push_back(tape.input(p));
    }
    auto out = model.forward(tape, payloads, {}, true);
    p_sr.middleRows(at, bsz) = tape.value(out.p_sr);
    for (int m = 0; m < cfg.n_modalities; ++m)
      p_u[static_cast<std::size_t>(m)].middleRows(at, bsz) =
          tape.value(out.p_u[static_cast<std::size_t>(m)]);
  }

  DisentanglementReport rep;
  for (int i = 0; i < cfg.n_modalities; ++i)
    rep.shared_vs_unique.push_back(losses::cel_value(p_u[static_cast<std::size_t>(i)], p_sr));
  for (int i = 0; i < cfg.n_modalities; ++i)
    for (int j = i + 1; j < cfg.n_modalities; ++j)
      rep.unique_pairs.push_back({i, j,
                                  losses::cel_value(p_u[static_cast<std::size_t>(i)],
                                                    p_u[static_cast<std::size_t>(j)])});
  return rep;
}

void export_embeddings_csv(const std::string& path, const EmbeddingMatrix& emb) {
  std::ofstream os(path);
  require(os.good(), "export_embeddings_csv: cannot open " + path);
  int max_width = 0;
  for (const auto& [name, range] : emb.slices)
    max_width = std::max(max_width, range.second - range.first);
  os << "sample_id,component";
  for (int i = 0; i < max_width; ++i) os << ",dim_" << i;
  os << "\n";
  char buf[64];
  for (Eigen::Index r = 0; r < emb.z.rows(); ++r) {
    for (const auto& [name, range] : emb.slices) {
      os << emb.sample_ids[static_cast<std::size_t>(r)] << "," << name;
      for (int c = range.first; c < range.second; ++c) {
        std::snprintf(buf, sizeof(buf), "%.17g", static_cast<double>(emb.z(r, c)));
        os << "," << buf;
      }
      for (int c = range.second - range.first; c < max_width; ++c) os << ",";
      os << "\n";
    }
  }
  require(os.good(), "export_embeddings_csv: write failed for " + path);
}

std::vector<ExportedRow> load_embeddings_csv(const std::string& path) {
  std::ifstream is(path);
  require(is.good(), "load_embeddings_csv: cannot open " + path);
  std::string line;
  std::getline(is, line);  // header
  std::vector<ExportedRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    ExportedRow row;
    std::getline(ss, field, ',');
    row.sample_id = std::stoull(field);
    std::getline(ss, row.component, ',');
    while (std::getline(ss, field, ',')) {
      if (field.empty()) break;
      row.values.push_back(std::stod(field));
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

SynergyFinetuneData synergy_finetune_data(const synth::DatasetSplit& split) {
  const int n = static_cast<int>(split.test.size());
  const int half = n / 2;
  require(half >= 8, "synergy_finetune_data: test split too small");
  const int ft_n = (3 * half) / 4;
  SynergyFinetuneData d;
  auto labels = synth::probe_labels(split.test, synth::ProbeTask::Synergy);
  for (int i = 0; i < n; ++i) {
    const auto& s = split.test[static_cast<std::size_t>(i)];
    if (i < half) {
      d.probe_train.push_back(s);
      d.probe_train_labels.push_back(labels[static_cast<std::size_t>(i)]);
      if (i < ft_n) {
        d.ft_train.push_back(s);
        d.ft_train_labels.push_back(labels[static_cast<std::size_t>(i)]);
      } else {
        d.ft_val.push_back(s);
        d.ft_val_labels.push_back(labels[static_cast<std::size_t>(i)]);
      }
    } else {
      d.probe_eval.push_back(s);
      d.probe_eval_labels.push_back(labels[static_cast<std::size_t>(i)]);
    }
  }
  return d;
}

double synergy_probe_accuracy(Model<float>& model, const SynergyFinetuneData& data,
                              const ProbeConfig& cfg) {
  return probe_on_samples(model, data.probe_train, data.probe_train_labels, data.probe_eval,
                          data.probe_eval_labels, 2, cfg);
}

MatD raw_concat_embeddings(const std::vector<synth::MultimodalSample>& samples) {
  require(!samples.empty(), "raw_concat_embeddings: no samples");
  Eigen::Index dim = 0;
  for (const auto& v : samples[0].views) dim += v.size();
  MatD out(static_cast<Eigen::Index>(samples.size()), dim);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    Eigen::Index at = 0;
    for (const auto& v : samples[i].views) {
      out.row(static_cast<Eigen::Index>(i)).segment(at, v.size()) = v.transpose();
      at += v.size();
    }
  }
  return out;
}

}  // namespace coral::eval
