#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "flowrl/experiments.hpp"
#include "flowrl/version.hpp"

using namespace flowrl;

int main(int argc, char** argv) {
  CLI::App app{"toy crystal-structure flow sampler with inference-time RL"};
  app.set_version_flag("--version", kArtifactVersion);
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::vector<std::string> overrides;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "config file (json)")->required();
    sub->add_option("--set", overrides,
                    "override config keys, dotted paths: rl.lr=0.001");
    sub->add_option("-o,--out", out_dir, "output directory (overrides config)");
  };

  struct Sub {
    const char* name;
    const char* desc;
    int (*fn)(const harness::ExperimentConfig&);
  };
  const std::vector<Sub> subs{
      {"gen-dataset", "relax random structures into a reference dataset",
       harness::run_gen_dataset},
      {"pretrain", "train the velocity (and denoiser) model", harness::run_pretrain},
      {"noise-sweep", "calibrate noise scales against the deterministic baseline",
       harness::run_noise_sweep},
      {"reinforce", "GRPO reinforcement of the sampler", harness::run_reinforce},
      {"anneal-reinforce", "learn a velocity-annealing schedule with GRPO",
       harness::run_reinforce},
      {"evaluate", "evaluate a checkpoint on a dataset split", harness::run_evaluate},
      {"step-sweep", "evaluate across integration step counts",
       harness::run_step_sweep},
      {"sweep", "random-search hyperparameter optimization", harness::run_search},
      {"anneal-baseline", "handcrafted velocity-annealing sweep",
       harness::run_anneal_baseline},
  };

  for (const auto& s : subs) add_common(app.add_subcommand(s.name, s.desc));

  CLI11_PARSE(app, argc, argv);

  const std::string name = app.get_subcommands().front()->get_name();
  try {
    auto cfg = harness::load_config_file(config_path, overrides);
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (name == "anneal-reinforce" &&
        cfg.rl.variant != harness::RLVariant::Anneal)
      throw std::invalid_argument("anneal-reinforce requires rl.variant=anneal");
    if (name == "reinforce" && cfg.rl.variant == harness::RLVariant::Anneal)
      throw std::invalid_argument("use anneal-reinforce for rl.variant=anneal");
    harness::validate_for_run(cfg);
    for (const auto& s : subs)
      if (name == s.name) return s.fn(cfg);
    throw std::logic_error("unhandled subcommand " + name);
  } catch (const std::exception& e) {
    std::cerr << "{\"error\":" << nlohmann::json(std::string(e.what())).dump()
              << "}" << std::endl;
    return 1;
  }
}
