#pragma once

// Pretraining loop: shuffled, augmented mini-batches through both encoders,
// composed loss, RAdam update, per-epoch validation and top-k checkpoints.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mscl/checkpoint.hpp"
#include "mscl/error.hpp"
#include "mscl/model.hpp"
#include "mscl/objectives.hpp"
#include "mscl/optim.hpp"
#include "mscl/rng.hpp"
#include "mscl/synthdata.hpp"

namespace mscl {

struct TrainConfig {
  double learning_rate = 4e-4;
  int epochs = 20;
  int batch_size = 8;
  int checkpoint_k = 10;
  std::uint64_t seed = 0;
  bool augment = true;
  int augment_pad = -1;  // -1: volume_side / 8
  double beta1 = 0.9;
  double beta2 = 0.999;

  void validate() const {
    if (epochs < 1) throw ConfigError("TrainConfig: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
    if (checkpoint_k < 1) throw ConfigError("TrainConfig: checkpoint_k must be >= 1");
    if (!(learning_rate > 0)) throw ConfigError("TrainConfig: learning_rate must be positive");
  }
  int pad_for(int side) const { return augment_pad >= 0 ? augment_pad : side / 8; }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"learning_rate", c.learning_rate}, {"epochs", c.epochs},   {"batch_size", c.batch_size},
       {"checkpoint_k", c.checkpoint_k},   {"seed", c.seed},       {"augment", c.augment},
       {"augment_pad", c.augment_pad},     {"beta1", c.beta1},     {"beta2", c.beta2}};
}
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.checkpoint_k = j.value("checkpoint_k", d.checkpoint_k);
  c.seed = j.value("seed", d.seed);
  c.augment = j.value("augment", d.augment);
  c.augment_pad = j.value("augment_pad", d.augment_pad);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
}

// ---------------------------------------------------------------------------
// Tasks and labels

enum class Task { two_way, three_way };

inline Task parse_task(const std::string& s) {
  if (s == "2way" || s == "2-way" || s == "2") return Task::two_way;
  if (s == "3way" || s == "3-way" || s == "3") return Task::three_way;
  throw ConfigError("unknown task '" + s + "' (expected 2way or 3way)");
}
inline std::string task_name(Task t) { return t == Task::two_way ? "2way" : "3way"; }

/// Class id of a subject for a task, or -1 when the subject does not take part.
/// 2way: classes 0 and 1. 3way: classes 0..2 when the generator has 3 classes,
/// otherwise classes 0, 1 plus unlabeled subjects as class 2.
inline int task_label(int label, Task task, int generator_classes) {
  if (task == Task::two_way) return (label == 0 || label == 1) ? label : -1;
  if (generator_classes >= 3) return (label >= 0 && label <= 2) ? label : -1;
  if (label == kUnlabeled) return 2;
  return (label == 0 || label == 1) ? label : -1;
}
inline int task_classes(Task task) { return task == Task::two_way ? 2 : 3; }

// ---------------------------------------------------------------------------
// Batching

/// Consecutive chunks of `batch`; a trailing chunk of one sample joins the previous chunk.
inline std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& idx, int batch) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < idx.size(); i += std::size_t(batch))
    out.emplace_back(idx.begin() + long(i), idx.begin() + long(std::min(idx.size(), i + std::size_t(batch))));
  if (out.size() > 1 && out.back().size() == 1) {
    out[out.size() - 2].push_back(out.back().front());
    out.pop_back();
  }
  return out;
}

template <class T>
std::array<Var<T>, 2> load_batch(const DatasetManifest& ds, const std::vector<std::size_t>& idx, Rng* augment_rng,
                                 int pad) {
  std::array<Var<T>, 2> out;
  for (int m = 0; m < 2; ++m) {
    std::vector<Volume> aug;
    std::vector<const Volume*> ptrs;
    aug.reserve(idx.size());
    for (std::size_t i : idx) {
      const Volume& v = ds.pairs.at(i).modality(m);
      if (augment_rng && pad > 0) {
        aug.push_back(reflect_pad_crop(v, pad, int(v.dims[0]), *augment_rng));
        ptrs.push_back(&aug.back());
      } else {
        ptrs.push_back(&v);
      }
    }
    out[std::size_t(m)] = make_batch<T>(ptrs);
  }
  return out;
}

// ---------------------------------------------------------------------------

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  std::map<std::string, double> terms;  // training means, plus "penalty"
};

template <class T>
struct TrainResult {
  std::vector<EpochMetrics> history;
  std::vector<CheckpointRecord> records;  // top-k, best first
  MultimodalModel<T> model;               // parameters after the last epoch
};

struct TrainSubsets {
  std::vector<std::size_t> train, val;
};

/// Training = every non-hold-out subject outside `fold`; validation = `fold`.
/// Objectives with CE keep only subjects that carry a task label.
inline TrainSubsets pretraining_subsets(const DatasetManifest& ds, int fold, const ObjectiveSpec& spec, Task task) {
  if (fold < 0 || fold >= ds.splits.folds)
    throw ConfigError("fold " + std::to_string(fold) + " outside 0.." + std::to_string(ds.splits.folds - 1));
  TrainSubsets s;
  const int classes = ds.generator_spec.n_classes;
  for (std::size_t i = 0; i < ds.pairs.size(); ++i) {
    const int f = ds.splits.fold_of.at(i);
    if (f == kHoldout) continue;
    if (spec.needs_labels() && task_label(ds.pairs[i].label, task, classes) < 0) continue;
    (f == fold ? s.val : s.train).push_back(i);
  }
  return s;
}

inline nlohmann::json spec_echo(const ModelSpec& model, const ObjectiveSpec& obj, Task task) {
  nlohmann::json terms = nlohmann::json::array();
  for (Term t : obj.terms) terms.push_back(term_name(t));
  return {{"model", model},
          {"objective", {{"terms", terms}, {"symmetrize", obj.symmetrize}, {"critic", obj.critic}}},
          {"task", task_name(task)}};
}

namespace train_detail {

inline void check_setup(const ModelSpec& model, const ObjectiveSpec& obj, const TrainConfig& cfg) {
  cfg.validate();
  obj.validate();
  if ((obj.uses_scores() || obj.has(Term::CCA)) && cfg.batch_size < 2)
    throw ConfigError("batch_size " + std::to_string(cfg.batch_size) + " < 2 with contrastive/CCA terms in " +
                      obj.name());
  if (obj.uses_scores() && obj.critic.d != model.encoder.repr_dim)
    throw ConfigError("critic d=" + std::to_string(obj.critic.d) + " differs from repr_dim " +
                      std::to_string(model.encoder.repr_dim));
}

inline std::vector<int> batch_labels(const DatasetManifest& ds, const std::vector<std::size_t>& idx, Task task) {
  std::vector<int> out;
  for (std::size_t i : idx) out.push_back(task_label(ds.pairs[i].label, task, ds.generator_spec.n_classes));
  return out;
}

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace train_detail

inline constexpr std::uint64_t kValidationStream = 0x7a11da7e;

/// Sample-weighted mean of the composed loss over `idx`, without augmentation; the CC
/// anchor stream is re-seeded on every call so repeated validations agree.
template <class T>
double validation_loss(const MultimodalModel<T>& model, const ObjectiveSpec& obj, const DatasetManifest& ds,
                       const std::vector<std::size_t>& idx, int batch_size, std::uint64_t seed, Task task) {
  if (idx.size() < 2) throw ConfigError("validation needs at least 2 subjects, got " + std::to_string(idx.size()));
  Rng cc_rng = make_rng(seed, kValidationStream);
  double acc = 0;
  std::size_t n = 0;
  for (const auto& b : make_batches(idx, std::max(batch_size, 2))) {
    auto inputs = load_batch<T>(ds, b, nullptr, 0);
    auto outs = model_outputs(model, obj, inputs);
    const auto labels = train_detail::batch_labels(ds, b, task);
    auto br = compose(obj, outs, &labels, cc_rng);
    acc += br.total * double(b.size());
    n += b.size();
  }
  return acc / double(n);
}

inline void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochMetrics>& history,
                              const ObjectiveSpec& obj) {
  std::ofstream os(path);
  auto keys = breakdown_keys(obj);
  keys.push_back("penalty");
  os << "epoch,train_loss,val_loss";
  for (const auto& k : keys) os << ',' << k;
  os << '\n';
  for (const auto& h : history) {
    os << h.epoch << ',' << train_detail::fmt(h.train_loss) << ',' << train_detail::fmt(h.val_loss);
    for (const auto& k : keys) {
      auto it = h.terms.find(k);
      os << ',' << (it == h.terms.end() ? std::string() : train_detail::fmt(it->second));
    }
    os << '\n';
  }
  if (!os) throw DataError("cannot write " + path.string());
}

inline std::uint64_t model_seed(std::uint64_t seed) { return derive_seed(seed, 0x30de1); }

/// Trains both encoders jointly. Unimodal objectives (CR, AE, CE) decompose into two
/// independent per-modality sums, so one run yields epoch-paired checkpoints.
/// With `exp_dir`, checkpoints go to exp_dir/checkpoints and metrics to exp_dir/metrics.csv.
template <class T>
TrainResult<T> pretrain(const DatasetManifest& ds, int fold, const ModelSpec& model_spec, const ObjectiveSpec& obj,
                        const TrainConfig& cfg, Task task = Task::two_way,
                        const std::optional<std::filesystem::path>& exp_dir = std::nullopt) {
  train_detail::check_setup(model_spec, obj, cfg);
  const auto subsets = pretraining_subsets(ds, fold, obj, task);
  if (subsets.train.size() < 2) throw ConfigError("fewer than 2 training subjects for fold " + std::to_string(fold));
  if (subsets.val.size() < 2) throw ConfigError("fewer than 2 validation subjects in fold " + std::to_string(fold));

  TrainResult<T> result;
  result.model = build_model<T>(model_spec, model_seed(cfg.seed));
  auto& model = result.model;
  RAdam<T> opt(model.params.tensors, RAdamConfig{cfg.learning_rate, cfg.beta1, cfg.beta2, 1e-8});
  const int pad = cfg.pad_for(model_spec.encoder.input_side);
  const nlohmann::json echo = spec_echo(model_spec, obj, task);

  std::optional<CheckpointStore> store;
  if (exp_dir) {
    std::filesystem::create_directories(*exp_dir);
    std::filesystem::remove_all(*exp_dir / "checkpoints");
    store.emplace(*exp_dir / "checkpoints", cfg.checkpoint_k);
  }

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng shuffle_rng = make_rng(cfg.seed, 0x100000 + std::uint64_t(epoch));
    Rng aug_rng = make_rng(cfg.seed, 0x200000 + std::uint64_t(epoch));
    Rng cc_rng = make_rng(cfg.seed, 0x300000 + std::uint64_t(epoch));
    auto order = subsets.train;
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    EpochMetrics em;
    em.epoch = epoch;
    std::size_t seen = 0;
    for (const auto& b : make_batches(order, cfg.batch_size)) {
      if (b.size() < 2 && (obj.uses_scores() || obj.has(Term::CCA))) continue;
      auto inputs = load_batch<T>(ds, b, cfg.augment ? &aug_rng : nullptr, pad);
      auto outs = model_outputs(model, obj, inputs);
      const auto labels = train_detail::batch_labels(ds, b, task);
      auto br = compose(obj, outs, &labels, cc_rng);
      if (!std::isfinite(br.total))
        throw NumericError("epoch " + std::to_string(epoch) + ": non-finite training loss");
      model.params.zero_grad();
      ag::backward(br.total_var);
      opt.step();
      const double w = double(b.size());
      em.train_loss += br.total * w;
      for (const auto& [k, v] : br.terms) em.terms[k] += v * w;
      em.terms["penalty"] += br.penalty * w;
      seen += b.size();
    }
    model.params.zero_grad();
    if (seen == 0) throw ConfigError("no trainable batch in epoch " + std::to_string(epoch));
    em.train_loss /= double(seen);
    for (auto& [k, v] : em.terms) v /= double(seen);
    em.val_loss = validation_loss(model, obj, ds, subsets.val, cfg.batch_size, cfg.seed, task);
    if (!std::isfinite(em.val_loss) || !std::isfinite(em.train_loss))
      throw NumericError("epoch " + std::to_string(epoch) + ": training diverged (non-finite loss)");
    result.history.push_back(em);

    CheckpointRecord rec{epoch, em.val_loss, obj.name(), echo, snapshot_parameters(model.params)};
    if (store) store->save(rec);
    result.records.push_back(std::move(rec));
    std::stable_sort(result.records.begin(), result.records.end(), [](const auto& a, const auto& b) {
      return better_checkpoint(a.validation_loss, a.epoch, b.validation_loss, b.epoch);
    });
    if (int(result.records.size()) > cfg.checkpoint_k) result.records.resize(std::size_t(cfg.checkpoint_k));
    if (exp_dir) write_metrics_csv(*exp_dir / "metrics.csv", result.history, obj);
  }
  return result;
}

}  // namespace mscl
