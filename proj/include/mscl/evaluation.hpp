#pragma once

// Frozen-encoder features, elastic-net logistic-regression probes with random
// hyperparameter search, ROC-AUC metrics, checkpoint selection and CKA.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "mscl/error.hpp"
#include "mscl/model.hpp"
#include "mscl/rng.hpp"
#include "mscl/synthdata.hpp"
#include "mscl/trainer.hpp"

namespace mscl {

struct FeatureMatrix {
  Eigen::MatrixXd Z;  // n x d
  std::vector<std::string> ids;
  std::vector<int> labels;

  std::size_t rows() const { return std::size_t(Z.rows()); }
};

/// Encoder z (before any projection head) for modality m of the listed subjects, no augmentation.
template <class T>
FeatureMatrix extract_features(const MultimodalModel<T>& model, int m, const DatasetManifest& ds,
                               const std::vector<std::size_t>& idx, int batch_size = 16) {
  FeatureMatrix f;
  const int d = model.spec.encoder.repr_dim;
  f.Z.resize(Eigen::Index(idx.size()), d);
  std::size_t row = 0;
  for (const auto& b : make_batches(idx, std::max(batch_size, 1))) {
    std::vector<const Volume*> vols;
    for (std::size_t i : b) {
      vols.push_back(&ds.pairs.at(i).modality(m));
      f.ids.push_back(ds.pairs[i].subject_id);
      f.labels.push_back(ds.pairs[i].label);
    }
    auto z = model.nets[std::size_t(m)].encoder.forward(make_batch<T>(vols)).z;
    for (std::size_t r = 0; r < b.size(); ++r, ++row)
      for (int c = 0; c < d; ++c) {
        const double v = double(z.value()[r * std::size_t(d) + std::size_t(c)]);
        if (!std::isfinite(v)) throw NumericError("non-finite feature for subject " + ds.pairs[b[r]].subject_id);
        f.Z(Eigen::Index(row), c) = v;
      }
  }
  return f;
}

/// Rows whose task label is defined, with labels replaced by task class ids.
inline FeatureMatrix task_subset(const FeatureMatrix& f, Task task, int generator_classes) {
  std::vector<Eigen::Index> keep;
  FeatureMatrix out;
  for (std::size_t i = 0; i < f.rows(); ++i) {
    const int l = task_label(f.labels[i], task, generator_classes);
    if (l < 0) continue;
    keep.push_back(Eigen::Index(i));
    out.ids.push_back(f.ids[i]);
    out.labels.push_back(l);
  }
  out.Z.resize(Eigen::Index(keep.size()), f.Z.cols());
  for (std::size_t r = 0; r < keep.size(); ++r) out.Z.row(Eigen::Index(r)) = f.Z.row(keep[r]);
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

/// Binary ROC-AUC as the normalized Mann-Whitney statistic with midranks; labels 0/1.
inline double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw ConfigError("roc_auc: size mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mid = 0.5 * double(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = mid;
    i = j + 1;
  }
  double r_pos = 0;
  std::size_t n_pos = 0, n_neg = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] == 1) {
      r_pos += rank[i];
      ++n_pos;
    } else if (labels[i] == 0) {
      ++n_neg;
    } else {
      throw DataError("roc_auc: labels must be 0/1");
    }
  }
  if (n_pos == 0 || n_neg == 0) throw DataError("roc_auc: both classes must be present");
  return (r_pos - double(n_pos) * double(n_pos + 1) / 2.0) / (double(n_pos) * double(n_neg));
}

/// Unweighted mean over class pairs of the two directed pairwise AUCs (Hand & Till).
inline double ovo_macro_auc(const Eigen::MatrixXd& prob, const std::vector<int>& labels) {
  const int k = int(prob.cols());
  if (std::size_t(prob.rows()) != labels.size()) throw ConfigError("ovo_macro_auc: size mismatch");
  if (k < 2) throw ConfigError("ovo_macro_auc: need at least 2 classes");
  double acc = 0;
  int pairs = 0;
  for (int a = 0; a < k; ++a)
    for (int b = a + 1; b < k; ++b) {
      std::vector<double> sa, sb;
      std::vector<int> la, lb;
      for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] != a && labels[i] != b) continue;
        sa.push_back(prob(Eigen::Index(i), a));
        la.push_back(labels[i] == a ? 1 : 0);
        sb.push_back(prob(Eigen::Index(i), b));
        lb.push_back(labels[i] == b ? 1 : 0);
      }
      acc += 0.5 * (roc_auc(sa, la) + roc_auc(sb, lb));
      ++pairs;
    }
  return acc / double(pairs);
}

// ---------------------------------------------------------------------------
// Elastic-net multinomial logistic regression

struct ProbeConfig {
  int trials = 500;
  double log10_c_min = -6.0, log10_c_max = 3.0;
  double l1_min = 0.0, l1_max = 1.0;
  int max_iter = 300;
  double tol = 1e-6;
  bool standardize = true;
  std::uint64_t seed = 0;

  void validate() const {
    if (trials < 1) throw ConfigError("ProbeConfig: trials must be >= 1");
    if (max_iter < 1) throw ConfigError("ProbeConfig: max_iter must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const ProbeConfig& c) {
  j = {{"trials", c.trials},   {"log10_c_min", c.log10_c_min}, {"log10_c_max", c.log10_c_max},
       {"l1_min", c.l1_min},   {"l1_max", c.l1_max},           {"max_iter", c.max_iter},
       {"tol", c.tol},         {"standardize", c.standardize}, {"seed", c.seed}};
}
inline void from_json(const nlohmann::json& j, ProbeConfig& c) {
  ProbeConfig d;
  c.trials = j.value("trials", d.trials);
  c.log10_c_min = j.value("log10_c_min", d.log10_c_min);
  c.log10_c_max = j.value("log10_c_max", d.log10_c_max);
  c.l1_min = j.value("l1_min", d.l1_min);
  c.l1_max = j.value("l1_max", d.l1_max);
  c.max_iter = j.value("max_iter", d.max_iter);
  c.tol = j.value("tol", d.tol);
  c.standardize = j.value("standardize", d.standardize);
  c.seed = j.value("seed", d.seed);
}

struct LogisticModel {
  Eigen::MatrixXd W;  // K x d, on standardized features
  Eigen::VectorXd b;  // K
  Eigen::RowVectorXd mean, scale;

  Eigen::MatrixXd standardized(const Eigen::MatrixXd& X) const {
    return (X.rowwise() - mean).array().rowwise() / scale.array();
  }
  Eigen::MatrixXd predict_proba(const Eigen::MatrixXd& X) const {
    Eigen::MatrixXd logits = (standardized(X) * W.transpose()).rowwise() + b.transpose();
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      const double mx = logits.row(i).maxCoeff();
      logits.row(i) = (logits.row(i).array() - mx).exp();
      logits.row(i) /= logits.row(i).sum();
    }
    return logits;
  }
};

namespace probe_detail {

inline double soft_threshold(double x, double t) { return x > t ? x - t : (x < -t ? x + t : 0.0); }

/// Sum of cross-entropies and its gradient (wrt W and b) for softmax logits X W^T + b.
inline double ce_and_grad(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y, const Eigen::MatrixXd& W,
                          const Eigen::VectorXd& b, Eigen::MatrixXd& gW, Eigen::VectorXd& gb) {
  Eigen::MatrixXd P = (X * W.transpose()).rowwise() + b.transpose();
  double loss = 0;
  for (Eigen::Index i = 0; i < P.rows(); ++i) {
    const double mx = P.row(i).maxCoeff();
    P.row(i) = (P.row(i).array() - mx).exp();
    const double z = P.row(i).sum();
    P.row(i) /= z;
    for (Eigen::Index k = 0; k < P.cols(); ++k)
      if (Y(i, k) > 0) loss -= std::log(std::max(P(i, k), 1e-300));
  }
  Eigen::MatrixXd R = P - Y;
  gW = R.transpose() * X;
  gb = R.colwise().sum().transpose();
  return loss;
}

}  // namespace probe_detail

/// Standardized design, one-hot targets and the Lipschitz constant of the data term, shared across fits.
struct LogisticProblem {
  Eigen::MatrixXd X, Y;
  Eigen::RowVectorXd mean, scale;
  double lipschitz = 0;  // 1/2 ||[X 1]||_2^2
  int k = 2;
};

inline LogisticProblem prepare_logistic(const Eigen::MatrixXd& X_raw, const std::vector<int>& y, int k,
                                        bool standardize = true) {
  const Eigen::Index n = X_raw.rows(), d = X_raw.cols();
  if (std::size_t(n) != y.size()) throw ConfigError("logistic regression: feature/label count mismatch");
  LogisticProblem p;
  p.k = k;
  p.mean = standardize ? Eigen::RowVectorXd(X_raw.colwise().mean()) : Eigen::RowVectorXd::Zero(d);
  p.scale = Eigen::RowVectorXd::Ones(d);
  if (standardize)
    for (Eigen::Index c = 0; c < d; ++c) {
      const double sd = std::sqrt((X_raw.col(c).array() - p.mean(c)).square().mean());
      p.scale(c) = sd > 1e-12 ? sd : 1.0;
    }
  p.X = (X_raw.rowwise() - p.mean).array().rowwise() / p.scale.array();
  p.Y = Eigen::MatrixXd::Zero(n, k);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int l = y[std::size_t(i)];
    if (l < 0 || l >= k) throw DataError("logistic regression: label " + std::to_string(l) + " out of range");
    p.Y(i, l) = 1.0;
  }
  Eigen::MatrixXd Xa(n, d + 1);
  Xa << p.X, Eigen::VectorXd::Ones(n);
  const double sig = Eigen::JacobiSVD<Eigen::MatrixXd>(Xa).singularValues()(0);
  p.lipschitz = 0.5 * sig * sig;
  return p;
}

/// Minimizes sum_i CE_i + (1/C) * (l1 * |W|_1 + (1 - l1) / 2 * |W|_F^2) by FISTA; intercepts are unpenalized.
inline LogisticModel fit_logistic(const LogisticProblem& p, double C, double l1, int max_iter, double tol) {
  LogisticModel m;
  m.mean = p.mean;
  m.scale = p.scale;
  const double l2 = (1.0 - l1) / C, l1w = l1 / C;
  const double step = 1.0 / (p.lipschitz + l2);
  m.W = Eigen::MatrixXd::Zero(p.k, p.X.cols());
  m.b = Eigen::VectorXd::Zero(p.k);
  Eigen::MatrixXd V = m.W, gW;
  Eigen::VectorXd vb = m.b, gb;
  double t = 1.0;
  for (int it = 0; it < max_iter; ++it) {
    probe_detail::ce_and_grad(p.X, p.Y, V, vb, gW, gb);
    gW += l2 * V;
    Eigen::MatrixXd W_new = V - step * gW;
    for (Eigen::Index i = 0; i < W_new.size(); ++i)
      W_new.data()[i] = probe_detail::soft_threshold(W_new.data()[i], step * l1w);
    Eigen::VectorXd b_new = vb - step * gb;
    const double t_new = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    const double mom = (t - 1.0) / t_new;
    V = W_new + mom * (W_new - m.W);
    vb = b_new + mom * (b_new - m.b);
    const double change = std::sqrt((W_new - m.W).squaredNorm() + (b_new - m.b).squaredNorm());
    const double size = std::sqrt(W_new.squaredNorm() + b_new.squaredNorm());
    m.W = std::move(W_new);
    m.b = std::move(b_new);
    t = t_new;
    if (change <= tol * std::max(1.0, size)) break;
  }
  if (!m.W.allFinite() || !m.b.allFinite()) throw NumericError("fit_logistic: non-finite coefficients");
  return m;
}

inline LogisticModel fit_logistic(const Eigen::MatrixXd& X_raw, const std::vector<int>& y, int k, double C, double l1,
                                  int max_iter, double tol, bool standardize = true) {
  return fit_logistic(prepare_logistic(X_raw, y, k, standardize), C, l1, max_iter, tol);
}

struct ProbeResult {
  double C = 0, l1_ratio = 0;
  int trial = -1;
  double val_metric = 0;
  double test_metric = std::numeric_limits<double>::quiet_NaN();
  LogisticModel model;
  int n_classes = 2;

  /// Per-dimension betas: class-1 minus class-0 coefficients for binary tasks, one row per class otherwise.
  Eigen::MatrixXd betas() const {
    if (n_classes == 2) return (model.W.row(1) - model.W.row(0));
    return model.W;
  }
};

inline void require_classes(const std::vector<int>& labels, int k, const std::string& what) {
  std::vector<int> count(std::size_t(k), 0);
  for (int l : labels) {
    if (l < 0 || l >= k) throw DataError(what + ": label " + std::to_string(l) + " outside 0.." + std::to_string(k - 1));
    count[std::size_t(l)]++;
  }
  for (int c = 0; c < k; ++c)
    if (count[std::size_t(c)] == 0)
      throw DataError(what + ": class " + std::to_string(c) + " absent (every class must be present)");
}

/// ROC-AUC of class 1 for two classes, OVO macro AUC otherwise.
inline double probe_metric(const Eigen::MatrixXd& prob, const std::vector<int>& labels) {
  if (prob.cols() == 2) {
    std::vector<double> s(std::size_t(prob.rows()));
    for (Eigen::Index i = 0; i < prob.rows(); ++i) s[std::size_t(i)] = prob(i, 1);
    return roc_auc(s, labels);
  }
  return ovo_macro_auc(prob, labels);
}

/// Random search over (C, l1_ratio); best validation metric wins, ties to the earliest trial.
inline ProbeResult fit_probe(const FeatureMatrix& train, const FeatureMatrix& val, const ProbeConfig& cfg, int n_classes,
                             const FeatureMatrix* test = nullptr) {
  cfg.validate();
  require_classes(train.labels, n_classes, "fit_probe train split");
  require_classes(val.labels, n_classes, "fit_probe validation split");
  const LogisticProblem problem = prepare_logistic(train.Z, train.labels, n_classes, cfg.standardize);
  ProbeResult best;
  best.val_metric = -1;
  for (int trial = 0; trial < cfg.trials; ++trial) {
    Rng rng = make_rng(cfg.seed, 0x9b0be000 + std::uint64_t(trial));
    const double log_c = std::uniform_real_distribution<double>(cfg.log10_c_min, cfg.log10_c_max)(rng);
    const double l1 = std::uniform_real_distribution<double>(cfg.l1_min, cfg.l1_max)(rng);
    const double C = std::pow(10.0, log_c);
    auto model = fit_logistic(problem, C, l1, cfg.max_iter, cfg.tol);
    const double metric = probe_metric(model.predict_proba(val.Z), val.labels);
    if (metric > best.val_metric) {
      best.C = C;
      best.l1_ratio = l1;
      best.trial = trial;
      best.val_metric = metric;
      best.model = std::move(model);
      best.n_classes = n_classes;
    }
  }
  if (test) {
    require_classes(test->labels, n_classes, "fit_probe test split");
    best.test_metric = probe_metric(best.model.predict_proba(test->Z), test->labels);
  }
  return best;
}

// ---------------------------------------------------------------------------
// Checkpoint selection

struct CheckpointScore {
  int epoch;
  std::vector<double> val_metrics;  // one per modality
};

/// Highest mean validation metric across modalities; ties to the earliest epoch.
inline int select_checkpoint(const std::vector<CheckpointScore>& scores) {
  if (scores.empty()) throw ConfigError("select_checkpoint: no probe results");
  int best_epoch = -1;
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& s : scores) {
    if (s.val_metrics.empty()) throw ConfigError("select_checkpoint: checkpoint without metrics");
    const double mean = std::accumulate(s.val_metrics.begin(), s.val_metrics.end(), 0.0) / double(s.val_metrics.size());
    if (mean > best || (mean == best && s.epoch < best_epoch)) {
      best = mean;
      best_epoch = s.epoch;
    }
  }
  return best_epoch;
}

// ---------------------------------------------------------------------------
// CKA

/// ||Zk^T Zm||_F^2 / (||Zm^T Zm||_F ||Zk^T Zk||_F); optionally column-centered first.
inline double cka(const Eigen::MatrixXd& zm, const Eigen::MatrixXd& zk, bool centered = false) {
  if (zm.rows() != zk.rows())
    throw ConfigError("cka: row counts differ (" + std::to_string(zm.rows()) + " vs " + std::to_string(zk.rows()) + ")");
  Eigen::MatrixXd a = zm, b = zk;
  if (centered) {
    a.rowwise() -= a.colwise().mean();
    b.rowwise() -= b.colwise().mean();
  }
  const double num = (b.transpose() * a).squaredNorm();
  const double den = (a.transpose() * a).norm() * (b.transpose() * b).norm();
  if (!(den > 0)) throw NumericError("cka: zero feature matrix (undefined normalization)");
  return num / den;
}

}  // namespace mscl
