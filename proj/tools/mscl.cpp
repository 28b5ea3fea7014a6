#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "mscl/pipeline.hpp"

namespace {

struct Overrides {
  std::string config;
  int fold = -1;
  long long seed = -1;
  std::string task;
  std::string objective;
  int epochs = -1;
};

mscl::ExperimentConfig resolve(const Overrides& o) {
  mscl::ExperimentConfig cfg;
  if (!o.config.empty()) cfg = mscl::load_experiment_config(o.config);
  if (!o.objective.empty()) {
    auto critic = cfg.objective.critic;
    const bool sym = cfg.objective.symmetrize;
    cfg.objective = mscl::parse_objective(o.objective, critic);
    cfg.objective.symmetrize = sym;
  }
  if (o.fold >= 0) cfg.fold = o.fold;
  if (o.seed >= 0) {
    cfg.train.seed = std::uint64_t(o.seed);
    cfg.data.latent.seed = std::uint64_t(o.seed);
  }
  if (!o.task.empty()) cfg.task = mscl::parse_task(o.task);
  if (o.epochs > 0) cfg.train.epochs = o.epochs;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-scale coordinated contrastive learning for paired volumes"};
  app.require_subcommand(1);
  Overrides ov;
  std::string out, dims;
  std::vector<std::string> dirs;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", ov.config, "experiment configuration (JSON)");
    sub->add_option("--fold", ov.fold, "validation fold");
    sub->add_option("--seed", ov.seed, "seed for data generation and training");
    sub->add_option("--task", ov.task, "2way or 3way");
  };

  auto* synth = app.add_subcommand("synth", "generate a synthetic paired-volume dataset");
  add_common(synth);
  synth->add_option("--out", out, "output directory")->required();

  auto* pre = app.add_subcommand("pretrain", "pretrain one objective on one fold");
  add_common(pre);
  pre->add_option("--objective", ov.objective, "term list, e.g. RR-XX or CR,CC");
  pre->add_option("--epochs", ov.epochs, "override train.epochs");
  pre->add_option("--out", out, "experiment directory")->required();

  auto* probe = app.add_subcommand("probe", "linear probes on stored checkpoints; select the best");
  probe->add_option("--task", ov.task, "2way or 3way");
  probe->add_option("experiment", out, "experiment directory")->required();

  auto* align = app.add_subcommand("align", "CKA between the two modalities' representations");
  align->add_option("experiment", out, "experiment directory")->required();

  auto* sal = app.add_subcommand("saliency", "integrated-gradient saliency, clusters, atlas DICE, link graph");
  sal->add_option("--dims", dims, "all or top-beta");
  sal->add_option("experiment", out, "experiment directory")->required();

  auto* rep = app.add_subcommand("report", "median and IQR across experiments");
  rep->add_option("experiments", dirs, "experiment directories")->required();
  rep->add_option("--out", out, "report directory")->required();

  auto* tax = app.add_subcommand("taxonomy", "list every objective combination and baseline");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      mscl::cmd_synth(resolve(ov), out);
    } else if (*pre) {
      mscl::cmd_pretrain(resolve(ov), out);
    } else if (*probe) {
      std::optional<mscl::Task> task;
      if (!ov.task.empty()) task = mscl::parse_task(ov.task);
      mscl::cmd_probe(out, task);
    } else if (*align) {
      mscl::cmd_align(out);
    } else if (*sal) {
      std::optional<std::string> d;
      if (!dims.empty()) d = dims;
      mscl::cmd_saliency(out, d);
    } else if (*rep) {
      mscl::cmd_report({dirs.begin(), dirs.end()}, out);
    } else if (*tax) {
      std::cout << mscl::taxonomy_listing();
    }
  } catch (const mscl::Error& e) {
    std::cerr << "mscl: " << mscl::Error::category(e.kind()) << ": " << e.what() << '\n';
    return static_cast<int>(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "mscl: internal error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
