#pragma once

// Experiment configuration and the command implementations behind the CLI:
// synth, pretrain, probe, align, saliency, report, taxonomy.
//
// Layout of one experiment directory (one objective, one fold):
//   config.json         resolved configuration
//   metrics.csv         per-epoch losses
//   checkpoints/        NNN.ckpt + index.json
//   probe_all.csv       probe metrics for every stored checkpoint
//   results.csv         selected checkpoint, one row per modality
//   selection.json      selected checkpoint and probe hyperparameters
//   betas.csv           probe coefficients of the selected checkpoint
//   cka.csv             alignment of the two modalities
//   saliency/           mean saliency volumes, clusters.json, dice.csv, links.json, links.csv
//   log.txt             timestamps live here only

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mscl/checkpoint.hpp"
#include "mscl/error.hpp"
#include "mscl/evaluation.hpp"
#include "mscl/model.hpp"
#include "mscl/objectives.hpp"
#include "mscl/saliency.hpp"
#include "mscl/synthdata.hpp"
#include "mscl/trainer.hpp"

namespace mscl {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration

struct DataSection {
  std::string manifest;  // empty: generate in memory from `latent`
  LatentSpec latent;
  int n_subjects = 40;
  int folds = 5;
  double holdout_frac = 0.2;
};

struct SaliencyConfig {
  int steps = 64;
  double sigma = 1.5;
  std::size_t min_cluster_size = 200;
  int top_k = 64;
  int connectivity = 26;
  double p_threshold = 0.05;
  std::string dims = "top-beta";  // or "all"
  int top_beta = 2;                // per sign
};

struct ExperimentConfig {
  DataSection data;
  EncoderSpec encoder;
  LocalHeadSpec local;
  GlobalHeadSpec global;
  ObjectiveSpec objective = parse_objective("RR-XX");
  TrainConfig train;
  ProbeConfig probe;
  Task task = Task::two_way;
  SaliencyConfig saliency;
  int fold = 0;

  ModelSpec model_spec() const {
    ModelSpec m = objective.model_spec(encoder, global, task_classes(task));
    m.local = local;
    return m;
  }
};

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["data"] = {{"manifest", c.data.manifest},     {"latent", c.data.latent},
               {"n_subjects", c.data.n_subjects}, {"folds", c.data.folds},
               {"holdout_frac", c.data.holdout_frac}};
  j["model"] = {{"encoder", c.encoder},
                {"local", {{"hidden", c.local.hidden}}},
                {"global", {{"hidden_layers", c.global.hidden_layers}, {"width", c.global.width}}}};
  std::vector<std::string> terms;
  for (Term t : c.objective.terms) terms.push_back(term_name(t));
  j["objective"] = {{"terms", terms}, {"symmetrize", c.objective.symmetrize}, {"critic", c.objective.critic}};
  j["train"] = c.train;
  j["eval"] = {{"probe", c.probe}, {"task", task_name(c.task)}};
  const auto& s = c.saliency;
  j["saliency"] = {{"steps", s.steps},         {"sigma", s.sigma},
                   {"min_cluster_size", s.min_cluster_size}, {"top_k", s.top_k},
                   {"connectivity", s.connectivity},         {"p_threshold", s.p_threshold},
                   {"dims", s.dims},                         {"top_beta", s.top_beta}};
  j["fold"] = c.fold;
  return j;
}

/// Missing keys keep their defaults; relative manifest paths resolve against `base_dir`.
inline ExperimentConfig experiment_from_json(const nlohmann::json& j, const fs::path& base_dir = {}) {
  ExperimentConfig c;
  try {
    if (j.contains("data")) {
      const auto& d = j["data"];
      c.data.manifest = d.value("manifest", std::string{});
      if (!c.data.manifest.empty() && fs::path(c.data.manifest).is_relative() && !base_dir.empty())
        c.data.manifest = fs::weakly_canonical(base_dir / c.data.manifest).string();
      if (d.contains("latent")) c.data.latent = d["latent"].get<LatentSpec>();
      c.data.n_subjects = d.value("n_subjects", c.data.n_subjects);
      c.data.folds = d.value("folds", c.data.folds);
      c.data.holdout_frac = d.value("holdout_frac", c.data.holdout_frac);
    }
    if (j.contains("model")) {
      const auto& m = j["model"];
      if (m.contains("encoder")) c.encoder = m["encoder"].get<EncoderSpec>();
      if (m.contains("local")) c.local.hidden = m["local"].value("hidden", c.local.hidden);
      if (m.contains("global")) {
        c.global.hidden_layers = m["global"].value("hidden_layers", c.global.hidden_layers);
        c.global.width = m["global"].value("width", c.global.width);
      }
    }
    if (j.contains("objective")) {
      const auto& o = j["objective"];
      CriticConfig critic;
      if (o.contains("critic")) critic = o["critic"].get<CriticConfig>();
      if (!o.contains("critic") || !o["critic"].contains("d")) critic.d = c.encoder.repr_dim;
      const auto& t = o.at("terms");
      c.objective = t.is_string() ? parse_objective(t.get<std::string>(), critic)
                                  : parse_objective(t.get<std::vector<std::string>>(), critic);
      c.objective.symmetrize = o.value("symmetrize", true);
    } else {
      c.objective.critic.d = c.encoder.repr_dim;
    }
    if (j.contains("train")) c.train = j["train"].get<TrainConfig>();
    if (j.contains("eval")) {
      const auto& e = j["eval"];
      if (e.contains("probe")) c.probe = e["probe"].get<ProbeConfig>();
      if (e.contains("task")) c.task = parse_task(e["task"].get<std::string>());
    }
    if (j.contains("saliency")) {
      const auto& s = j["saliency"];
      auto& o = c.saliency;
      o.steps = s.value("steps", o.steps);
      o.sigma = s.value("sigma", o.sigma);
      o.min_cluster_size = s.value("min_cluster_size", o.min_cluster_size);
      o.top_k = s.value("top_k", o.top_k);
      o.connectivity = s.value("connectivity", o.connectivity);
      o.p_threshold = s.value("p_threshold", o.p_threshold);
      o.dims = s.value("dims", o.dims);
      o.top_beta = s.value("top_beta", o.top_beta);
    }
    c.fold = j.value("fold", 0);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (c.saliency.dims != "all" && c.saliency.dims != "top-beta")
    throw ConfigError("saliency.dims must be 'all' or 'top-beta', got '" + c.saliency.dims + "'");
  if (!c.data.manifest.empty() && !fs::exists(c.data.manifest))
    throw DependencyError("manifest not found: " + c.data.manifest);
  c.probe.validate();
  return c;
}

inline nlohmann::json read_json(const fs::path& path) {
  if (!fs::exists(path)) throw DependencyError("file not found: " + path.string());
  std::ifstream is(path);
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline ExperimentConfig load_experiment_config(const fs::path& path) {
  return experiment_from_json(read_json(path), path.parent_path());
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  os << text;
  if (!os) throw DataError("cannot write " + path.string());
}

// ---------------------------------------------------------------------------
// Logging

inline void log_line(const fs::path& exp_dir, const std::string& msg, bool echo = true) {
  if (echo) std::cerr << msg << '\n';
  if (exp_dir.empty()) return;
  fs::create_directories(exp_dir);
  std::ofstream os(exp_dir / "log.txt", std::ios::app);
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char stamp[32];
  std::strftime(stamp, sizeof(stamp), "%Y-%m-%dT%H:%M:%S", std::gmtime(&now));
  os << stamp << ' ' << msg << '\n';
}

// ---------------------------------------------------------------------------
// Data

inline DatasetManifest load_or_generate(const DataSection& d) {
  if (!d.manifest.empty()) return load_dataset(d.manifest);
  return generate_dataset(d.latent, std::size_t(d.n_subjects), {d.folds, d.holdout_frac});
}

inline void cmd_synth(const ExperimentConfig& cfg, const fs::path& out) {
  auto ds = generate_dataset(cfg.data.latent, std::size_t(cfg.data.n_subjects), {cfg.data.folds, cfg.data.holdout_frac});
  write_dataset(out, ds);
  log_line(out, "synth: wrote " + std::to_string(ds.pairs.size()) + " subjects to " + (out / "manifest.json").string());
}

// ---------------------------------------------------------------------------
// Pretraining

inline void cmd_pretrain(ExperimentConfig cfg, const fs::path& exp_dir) {
  for (const auto& w : cfg.objective.warnings()) log_line(exp_dir, "warning: " + w);
  const auto ds = load_or_generate(cfg.data);
  if (cfg.fold < 0 || cfg.fold >= ds.splits.folds)
    throw ConfigError("fold " + std::to_string(cfg.fold) + " outside 0.." + std::to_string(ds.splits.folds - 1));
  fs::create_directories(exp_dir);
  write_text(exp_dir / "config.json", to_json(cfg).dump(2) + "\n");
  log_line(exp_dir, "pretrain: " + cfg.objective.name() + " fold " + std::to_string(cfg.fold) + " seed " +
                        std::to_string(cfg.train.seed));
  auto res = pretrain<float>(ds, cfg.fold, cfg.model_spec(), cfg.objective, cfg.train, cfg.task, exp_dir);
  const auto& last = res.history.back();
  log_line(exp_dir, "pretrain: done, last epoch train " + std::to_string(last.train_loss) + " val " +
                        std::to_string(last.val_loss));
}

// ---------------------------------------------------------------------------
// Probing

struct ExperimentContext {
  fs::path dir;
  ExperimentConfig cfg;
  DatasetManifest ds;
};

inline ExperimentContext open_experiment(const fs::path& dir) {
  if (!fs::exists(dir / "config.json"))
    throw DependencyError("no experiment in " + dir.string() + " (config.json missing; run pretrain first)");
  ExperimentContext ctx{dir, load_experiment_config(dir / "config.json"), {}};
  if (!fs::exists(dir / "checkpoints" / "index.json"))
    throw DependencyError("no checkpoints in " + dir.string() + " (run pretrain first)");
  ctx.ds = load_or_generate(ctx.cfg.data);
  return ctx;
}

inline MultimodalModel<float> load_model(const ExperimentContext& ctx, int epoch) {
  CheckpointStore store(ctx.dir / "checkpoints", ctx.cfg.train.checkpoint_k);
  const auto rec = store.load(epoch);
  auto model = build_model<float>(ctx.cfg.model_spec(), 0);
  restore_parameters(model.params, rec.tensors);
  return model;
}

struct ProbeSplits {
  std::vector<std::size_t> train, val, test;
};

inline ProbeSplits probe_splits(const DatasetManifest& ds, int fold) {
  return {ds.splits.training(fold), ds.splits.members(fold), ds.splits.holdout()};
}

/// Probe one modality of a model on (train folds, validation fold, hold-out).
inline ProbeResult probe_modality(const MultimodalModel<float>& model, int m, const DatasetManifest& ds, int fold,
                                  Task task, ProbeConfig cfg) {
  const auto sp = probe_splits(ds, fold);
  const int gc = ds.generator_spec.n_classes;
  auto train = task_subset(extract_features(model, m, ds, sp.train), task, gc);
  auto val = task_subset(extract_features(model, m, ds, sp.val), task, gc);
  std::optional<FeatureMatrix> test;
  if (!sp.test.empty()) test = task_subset(extract_features(model, m, ds, sp.test), task, gc);
  cfg.seed = derive_seed(cfg.seed, 0x9b0be + std::uint64_t(m));
  const bool test_ok = test && [&] {
    std::vector<int> cnt(std::size_t(task_classes(task)), 0);
    for (int l : test->labels) cnt[std::size_t(l)]++;
    return std::all_of(cnt.begin(), cnt.end(), [](int c) { return c > 0; });
  }();
  return fit_probe(train, val, cfg, task_classes(task), test_ok ? &*test : nullptr);
}

inline std::string fmt9(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

inline void cmd_probe(const fs::path& exp_dir, std::optional<Task> task_override = std::nullopt) {
  auto ctx = open_experiment(exp_dir);
  const Task task = task_override.value_or(ctx.cfg.task);
  CheckpointStore store(exp_dir / "checkpoints", ctx.cfg.train.checkpoint_k);
  auto entries = store.entries();
  std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) { return a.epoch < b.epoch; });
  ProbeConfig pc = ctx.cfg.probe;
  pc.seed = derive_seed(ctx.cfg.train.seed, pc.seed);

  std::vector<CheckpointScore> scores;
  std::map<int, std::array<ProbeResult, 2>> results;
  std::ostringstream all;
  all << "checkpoint_id,modality,task,metric_val,metric_test,C,l1_ratio\n";
  for (const auto& e : entries) {
    const auto model = load_model(ctx, e.epoch);
    std::array<ProbeResult, 2> r{probe_modality(model, 0, ctx.ds, ctx.cfg.fold, task, pc),
                                 probe_modality(model, 1, ctx.ds, ctx.cfg.fold, task, pc)};
    scores.push_back({e.epoch, {r[0].val_metric, r[1].val_metric}});
    for (int m = 0; m < 2; ++m)
      all << e.epoch << ",m" << m + 1 << ',' << task_name(task) << ',' << fmt9(r[std::size_t(m)].val_metric) << ','
          << fmt9(r[std::size_t(m)].test_metric) << ',' << fmt9(r[std::size_t(m)].C) << ','
          << fmt9(r[std::size_t(m)].l1_ratio) << '\n';
    results[e.epoch] = std::move(r);
  }
  const int best = select_checkpoint(scores);
  const auto& r = results.at(best);

  std::ostringstream res;
  res << "model,fold,modality,task,metric_val,metric_test,checkpoint_id\n";
  for (int m = 0; m < 2; ++m)
    res << ctx.cfg.objective.name() << ',' << ctx.cfg.fold << ",m" << m + 1 << ',' << task_name(task) << ','
        << fmt9(r[std::size_t(m)].val_metric) << ',' << fmt9(r[std::size_t(m)].test_metric) << ',' << best << '\n';

  std::ostringstream betas;
  betas << "modality,row,dim,beta\n";
  nlohmann::json sel{{"checkpoint", best}, {"task", task_name(task)}, {"modalities", nlohmann::json::array()}};
  for (int m = 0; m < 2; ++m) {
    const auto b = r[std::size_t(m)].betas();
    for (Eigen::Index row = 0; row < b.rows(); ++row)
      for (Eigen::Index d = 0; d < b.cols(); ++d)
        betas << 'm' << m + 1 << ',' << row << ',' << d << ',' << fmt9(b(row, d)) << '\n';
    sel["modalities"].push_back({{"C", r[std::size_t(m)].C},
                                 {"l1_ratio", r[std::size_t(m)].l1_ratio},
                                 {"trial", r[std::size_t(m)].trial}});
  }
  write_text(exp_dir / "probe_all.csv", all.str());
  write_text(exp_dir / "results.csv", res.str());
  write_text(exp_dir / "betas.csv", betas.str());
  write_text(exp_dir / "selection.json", sel.dump(2) + "\n");
  log_line(exp_dir, "probe: selected checkpoint " + std::to_string(best) + " (" + task_name(task) + ")");
}

inline int selected_checkpoint(const fs::path& exp_dir) {
  const auto p = exp_dir / "selection.json";
  if (!fs::exists(p)) throw DependencyError("no selected checkpoint in " + exp_dir.string() + " (run probe first)");
  return read_json(p).at("checkpoint").get<int>();
}

/// Subjects used for alignment and saliency: the hold-out set.
inline std::vector<std::size_t> evaluation_subjects(const DatasetManifest& ds) {
  auto idx = ds.splits.holdout();
  if (idx.size() < 2)
    throw DataError("hold-out set has " + std::to_string(idx.size()) +
                    " subjects; alignment and saliency need at least 2 (set data.holdout_frac)");
  return idx;
}

inline void cmd_align(const fs::path& exp_dir) {
  auto ctx = open_experiment(exp_dir);
  const int best = selected_checkpoint(exp_dir);
  const auto model = load_model(ctx, best);
  const auto idx = evaluation_subjects(ctx.ds);
  const auto z1 = extract_features(model, 0, ctx.ds, idx), z2 = extract_features(model, 1, ctx.ds, idx);
  std::ostringstream os;
  os << "model,fold,cka\n" << ctx.cfg.objective.name() << ',' << ctx.cfg.fold << ',' << fmt9(cka(z1.Z, z2.Z)) << '\n';
  write_text(exp_dir / "cka.csv", os.str());
  log_line(exp_dir, "align: cka written for checkpoint " + std::to_string(best));
}

// ---------------------------------------------------------------------------
// Saliency

/// Dimensions with the largest positive and most negative coefficients (top_beta of each sign).
inline std::vector<int> top_beta_dims(const Eigen::VectorXd& beta, int top_beta) {
  std::vector<int> order(std::size_t(beta.size()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return beta(a) > beta(b); });
  std::vector<int> out;
  for (int i = 0; i < int(order.size()) && i < top_beta; ++i)
    if (beta(order[std::size_t(i)]) > 0) out.push_back(order[std::size_t(i)]);
  for (int i = 0; i < int(order.size()) && i < top_beta; ++i) {
    const int d = order[order.size() - 1 - std::size_t(i)];
    if (beta(d) < 0 && std::find(out.begin(), out.end(), d) == out.end()) out.push_back(d);
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// Coefficient vector per modality from betas.csv: the single binary row, or last-class minus first-class row.
inline std::array<Eigen::VectorXd, 2> read_betas(const fs::path& exp_dir, int d) {
  const auto p = exp_dir / "betas.csv";
  if (!fs::exists(p)) throw DependencyError("betas.csv missing in " + exp_dir.string() + " (run probe first)");
  std::ifstream is(p);
  std::string line;
  std::getline(is, line);
  std::array<std::map<int, Eigen::VectorXd>, 2> rows;
  while (std::getline(is, line)) {
    std::stringstream ss(line);
    std::string mod, row, dim, val;
    std::getline(ss, mod, ',');
    std::getline(ss, row, ',');
    std::getline(ss, dim, ',');
    std::getline(ss, val, ',');
    auto& r = rows[mod == "m1" ? 0 : 1];
    auto& v = r[std::stoi(row)];
    if (v.size() == 0) v = Eigen::VectorXd::Zero(d);
    v(std::stoi(dim)) = std::stod(val);
  }
  std::array<Eigen::VectorXd, 2> out;
  for (int m = 0; m < 2; ++m) {
    const auto& r = rows[std::size_t(m)];
    if (r.empty()) throw IntegrityError("betas.csv has no rows for modality m" + std::to_string(m + 1));
    out[std::size_t(m)] = r.size() == 1 ? r.begin()->second : Eigen::VectorXd(r.rbegin()->second - r.begin()->second);
  }
  return out;
}

struct SaliencyArtifacts {
  std::array<std::map<int, ClusterReport>, 2> clusters;
  std::array<std::vector<DiceEntry>, 2> dice;
  LinkGraph links;
};

inline SaliencyArtifacts cmd_saliency(const fs::path& exp_dir, std::optional<std::string> dims_override = std::nullopt) {
  auto ctx = open_experiment(exp_dir);
  const auto& sc = ctx.cfg.saliency;
  const std::string dims_mode = dims_override.value_or(sc.dims);
  if (dims_mode != "all" && dims_mode != "top-beta") throw ConfigError("--dims must be all or top-beta");
  const int best = selected_checkpoint(exp_dir);
  const auto model = load_model(ctx, best);
  const auto idx = evaluation_subjects(ctx.ds);
  const int d = ctx.cfg.encoder.repr_dim;

  std::vector<std::size_t> group_a, group_b;  // class 0 vs class 1
  for (std::size_t i : idx) {
    const int l = ctx.ds.pairs[i].label;
    if (l == 0) group_a.push_back(i);
    if (l == 1) group_b.push_back(i);
  }
  if (group_a.size() < 2 || group_b.size() < 2)
    throw DataError("saliency needs at least 2 hold-out subjects in each of classes 0 and 1 (have " +
                    std::to_string(group_a.size()) + " and " + std::to_string(group_b.size()) + ")");

  std::array<std::vector<int>, 2> dims;
  if (dims_mode == "all") {
    for (int m = 0; m < 2; ++m)
      for (int k = 0; k < d; ++k) dims[std::size_t(m)].push_back(k);
  } else {
    const auto betas = read_betas(exp_dir, d);
    for (int m = 0; m < 2; ++m) dims[std::size_t(m)] = top_beta_dims(betas[std::size_t(m)], sc.top_beta);
  }

  const Mask brain = ctx.ds.atlas.brain_mask();
  const fs::path out = exp_dir / "saliency";
  fs::create_directories(out);
  SaliencyArtifacts art;
  nlohmann::json clusters_json;
  std::ostringstream dice_csv;
  dice_csv << "modality,dim,roi,roi_name,dice\n";
  for (int m = 0; m < 2; ++m) {
    const auto& enc = model.nets[std::size_t(m)].encoder;
    const std::string mod = "m" + std::to_string(m + 1);
    for (int dim : dims[std::size_t(m)]) {
      std::vector<Volume> sa, sb;
      Volume mean(brain.dims[0], brain.dims[1], brain.dims[2]);
      for (auto* g : {&group_a, &group_b})
        for (std::size_t i : *g) {
          auto raw = integrated_gradients_dim<float>(enc, ctx.ds.pairs[i].modality(m), dim, {sc.steps, 16});
          auto v = postprocess(raw, brain, sc.sigma);
          for (std::size_t k = 0; k < v.size(); ++k) mean.data[k] += v.data[k] / float(idx.size());
          (g == &group_a ? sa : sb).push_back(std::move(v));
        }
      char name[64];
      std::snprintf(name, sizeof(name), "%s_dim%02d_mean.mscv", mod.c_str(), dim);
      write_volume(out / name, mean);
      auto stat = group_stats(sa, sb);
      auto rep = threshold_and_clusterize(stat, {sc.p_threshold, sc.min_cluster_size, sc.connectivity});
      auto table = atlas_overlap(rep, ctx.ds.atlas, dim);
      for (const auto& e : table)
        dice_csv << mod << ',' << dim << ',' << e.roi << ',' << ctx.ds.atlas.roi_names[std::size_t(e.roi - 1)] << ','
                 << fmt9(e.dice) << '\n';
      clusters_json[mod][std::to_string(dim)] = to_json(rep, ctx.ds.atlas.roi_names);
      art.dice[std::size_t(m)].insert(art.dice[std::size_t(m)].end(), table.begin(), table.end());
      art.clusters[std::size_t(m)][dim] = std::move(rep);
    }
  }
  const auto z1 = extract_features(model, 0, ctx.ds, idx), z2 = extract_features(model, 1, ctx.ds, idx);
  art.links = crossmodal_links(z1.Z, z2.Z, art.dice, sc.top_k);
  for (const auto& w : art.links.warnings) log_line(exp_dir, "warning: " + w);
  write_text(out / "clusters.json", clusters_json.dump(2) + "\n");
  write_text(out / "dice.csv", dice_csv.str());
  write_text(out / "links.json", to_json(art.links).dump(2) + "\n");
  write_link_csv(out / "links.csv", art.links);
  log_line(exp_dir, "saliency: " + std::to_string(dims[0].size() + dims[1].size()) + " dimensions, " +
                        std::to_string(art.links.edges.size()) + " link edges");
  return art;
}

// ---------------------------------------------------------------------------
// Report

/// Linear-interpolation quantile of a sorted sample.
inline double quantile_sorted(const std::vector<double>& v, double q) {
  if (v.empty()) return std::nan("");
  const double pos = q * double(v.size() - 1);
  const std::size_t lo = std::size_t(std::floor(pos)), hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - double(lo)) * (v[hi] - v[lo]);
}

struct Summary {
  std::size_t n = 0;
  double median = std::nan(""), iqr = std::nan("");
};

inline Summary summarize(std::vector<double> v) {
  v.erase(std::remove_if(v.begin(), v.end(), [](double x) { return std::isnan(x); }), v.end());
  std::sort(v.begin(), v.end());
  Summary s;
  s.n = v.size();
  if (v.empty()) return s;
  s.median = quantile_sorted(v, 0.5);
  s.iqr = quantile_sorted(v, 0.75) - quantile_sorted(v, 0.25);
  return s;
}

inline std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw DependencyError("cannot read " + p.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(is, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

inline double parse_double(const std::string& s) { return s == "nan" ? std::nan("") : std::stod(s); }

/// Bar chart of medians with IQR whiskers.
inline std::string summary_svg(const std::vector<std::pair<std::string, Summary>>& bars, const std::string& title) {
  const int w = 60 + 40 * int(bars.size()), h = 260;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"10\" y=\"16\" font-size=\"12\">" << title << "</text>\n";
  os << "<line x1=\"40\" y1=\"220\" x2=\"" << w - 10 << "\" y2=\"220\" stroke=\"black\"/>\n";
  for (double t : {0.0, 0.5, 1.0})
    os << "<text x=\"4\" y=\"" << fmt9(224 - 180 * t) << "\" font-size=\"10\">" << fmt9(t) << "</text>\n";
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const auto& [label, s] = bars[i];
    const double x = 50 + 40 * double(i);
    const double med = std::isnan(s.median) ? 0 : std::clamp(s.median, 0.0, 1.0);
    os << "<rect x=\"" << fmt9(x) << "\" y=\"" << fmt9(220 - 180 * med) << "\" width=\"24\" height=\""
       << fmt9(180 * med) << "\" fill=\"steelblue\"/>\n";
    if (!std::isnan(s.iqr)) {
      const double lo = std::clamp(med - s.iqr / 2, 0.0, 1.0), hi = std::clamp(med + s.iqr / 2, 0.0, 1.0);
      os << "<line x1=\"" << fmt9(x + 12) << "\" y1=\"" << fmt9(220 - 180 * lo) << "\" x2=\"" << fmt9(x + 12)
         << "\" y2=\"" << fmt9(220 - 180 * hi) << "\" stroke=\"black\"/>\n";
    }
    os << "<text x=\"" << fmt9(x) << "\" y=\"235\" font-size=\"9\" transform=\"rotate(30 " << fmt9(x) << " 235)\">"
       << label << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

/// Median and IQR across experiment directories of test metrics and CKA.
inline void cmd_report(const std::vector<fs::path>& exp_dirs, const fs::path& out) {
  if (exp_dirs.empty()) throw ConfigError("report: no experiment directories given");
  std::map<std::tuple<std::string, std::string, std::string>, std::pair<std::vector<double>, std::vector<double>>>
      metrics;
  std::map<std::string, std::vector<double>> ckas;
  for (const auto& dir : exp_dirs) {
    if (!fs::exists(dir / "results.csv"))
      throw DependencyError("results.csv missing in " + dir.string() + " (run probe first)");
    const auto rows = read_csv(dir / "results.csv");
    for (std::size_t i = 1; i < rows.size(); ++i) {
      const auto& r = rows[i];
      if (r.size() < 7) throw IntegrityError("malformed results.csv in " + dir.string());
      auto& slot = metrics[{r[0], r[2], r[3]}];
      slot.first.push_back(parse_double(r[4]));
      slot.second.push_back(parse_double(r[5]));
    }
    if (fs::exists(dir / "cka.csv")) {
      const auto rows_c = read_csv(dir / "cka.csv");
      for (std::size_t i = 1; i < rows_c.size(); ++i) ckas[rows_c[i].at(0)].push_back(parse_double(rows_c[i].at(2)));
    }
  }
  fs::create_directories(out);
  std::ostringstream os;
  os << "model,modality,task,n_folds,median_val,iqr_val,median_test,iqr_test\n";
  std::vector<std::pair<std::string, Summary>> bars;
  for (const auto& [key, v] : metrics) {
    const auto sv = summarize(v.first), st = summarize(v.second);
    os << std::get<0>(key) << ',' << std::get<1>(key) << ',' << std::get<2>(key) << ',' << v.first.size() << ','
       << fmt9(sv.median) << ',' << fmt9(sv.iqr) << ',' << fmt9(st.median) << ',' << fmt9(st.iqr) << '\n';
    bars.push_back({std::get<0>(key) + " " + std::get<1>(key) + " " + std::get<2>(key), st});
  }
  write_text(out / "report.csv", os.str());
  write_text(out / "report_auc.svg", summary_svg(bars, "probe ROC-AUC on hold-out: median and IQR"));
  if (!ckas.empty()) {
    std::ostringstream oc;
    oc << "model,n_folds,median_cka,iqr_cka\n";
    std::vector<std::pair<std::string, Summary>> cbars;
    for (const auto& [model, v] : ckas) {
      const auto s = summarize(v);
      oc << model << ',' << v.size() << ',' << fmt9(s.median) << ',' << fmt9(s.iqr) << '\n';
      cbars.push_back({model, s});
    }
    write_text(out / "report_cka.csv", oc.str());
    write_text(out / "report_cka.svg", summary_svg(cbars, "cross-modal CKA: median and IQR"));
  }
}

// ---------------------------------------------------------------------------
// Taxonomy

inline std::string taxonomy_listing() {
  std::ostringstream os;
  for (const auto& e : taxonomy()) {
    std::string terms;
    for (Term t : e.terms) terms += (terms.empty() ? "" : ",") + term_name(t);
    os << e.name << '\t' << terms << '\t' << (e.baseline ? "baseline" : "taxonomy") << '\n';
  }
  return os.str();
}

}  // namespace mscl
