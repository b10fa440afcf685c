// Command-line front end: train single runs, sweep condition x seed grids,
// evaluate and ablate trained checkpoints.
//
// Exit codes: 0 success, 1 validation error, 2 runtime failure.

#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "marlcpc/marlcpc.hpp"

namespace {

int cmd_train(const std::string& config_path, const std::string& preset,
              int seed_override, const std::string& out_override, bool quiet) {
  marlcpc::RunConfig config;
  if (!config_path.empty())
    config = marlcpc::load_config(config_path);
  else
    config = marlcpc::RunConfig::preset(preset);
  if (seed_override >= 0) config.seed = static_cast<std::uint64_t>(seed_override);
  if (!out_override.empty()) config.out = out_override;
  marlcpc::validate_config(config);

  marlcpc::RunResult res = marlcpc::run_one(config, quiet);
  std::cout << "run complete: " << res.iterations << " iterations, "
            << res.env_steps << " env steps, " << res.episodes
            << " episodes -> " << marlcpc::default_out_dir(config) << std::endl;
  return 0;
}

int cmd_sweep(const std::string& manifest_path, int jobs, bool quiet) {
  marlcpc::ExperimentManifest manifest = marlcpc::load_manifest(manifest_path);
  marlcpc::SweepResult res = marlcpc::run_sweep(manifest, jobs, quiet);
  std::cout << "sweep complete: " << res.summary.size() << " summary rows";
  if (res.skipped_existing > 0)
    std::cout << " (" << res.skipped_existing << " runs reused)";
  if (res.failed_runs > 0) std::cout << " (" << res.failed_runs << " runs FAILED)";
  std::cout << " -> " << manifest.out << "/summary.csv" << std::endl;
  return res.failed_runs == 0 ? 0 : 2;
}

int cmd_ablate(const std::string& checkpoint, const std::string& mode,
               int trials, std::uint64_t eval_seed) {
  std::vector<marlcpc::AblationMode> modes;
  if (mode == "all") {
    modes = {marlcpc::AblationMode::None, marlcpc::AblationMode::RandomMessage,
             marlcpc::AblationMode::ZeroMessage};
  } else {
    const marlcpc::AblationMode m = marlcpc::parse_ablation(mode);
    modes = {marlcpc::AblationMode::None};
    if (m != marlcpc::AblationMode::None) modes.push_back(m);
  }
  auto rows = marlcpc::run_ablation(checkpoint, modes, trials, eval_seed);
  if (trials < 2)
    std::cerr << "warning: trials < 2; CI columns are empty" << std::endl;
  std::cout << marlcpc::ablation_csv(rows);
  return 0;
}

int cmd_eval(const std::string& checkpoint, int episodes, std::uint64_t eval_seed) {
  marlcpc::LoadedCheckpoint lc = marlcpc::checkpoint_load(checkpoint);
  auto env = marlcpc::make_env(lc.meta.env);
  marlcpc::RandomStream rng(marlcpc::RandomStream::derive(eval_seed, 7));
  marlcpc::EvalResult ev = marlcpc::evaluate(lc.bundles, *env, episodes,
                                             marlcpc::AblationMode::None, rng);
  std::cout << "env,condition,episodes,welfare,episode_length";
  for (std::size_t i = 0; i < ev.agent_returns.size(); ++i)
    std::cout << ",return_agent" << i;
  std::cout << "\n"
            << lc.meta.env << "," << lc.meta.condition << "," << episodes << ","
            << ev.welfare << "," << ev.episode_length;
  for (double r : ev.agent_returns) std::cout << "," << r;
  std::cout << std::endl;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MARL laboratory: reward-independent emergent communication "
               "via collective predictive coding"};
  app.require_subcommand(1);

  std::string config_path, preset, out_override, manifest_path, checkpoint;
  std::string mode = "all";
  int seed_override = -1;
  int jobs = 2;
  int trials = 100;
  int episodes = 100;
  std::uint64_t eval_seed = 9999;
  bool quiet = false;

  auto* train = app.add_subcommand("train", "Train one run from a config file");
  auto* copt = train->add_option("--config", config_path, "Run config file");
  auto* popt =
      train->add_option("--preset", preset,
                        "Built-in preset: bandit | bandit-coop | "
                        "observer-full | observer-desk");
  copt->excludes(popt);
  train->add_option("--seed", seed_override, "Override run.seed");
  train->add_option("--out", out_override, "Override output directory");
  train->add_flag("--quiet", quiet, "Suppress per-evaluation log lines");

  auto* sweep = app.add_subcommand("sweep", "Run a conditions x seeds manifest");
  sweep->add_option("--manifest", manifest_path, "Manifest file")->required();
  sweep->add_option("--jobs", jobs, "Parallel runs");

  auto* ablate =
      app.add_subcommand("ablate", "Message ablations on a trained checkpoint");
  ablate->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  ablate->add_option("--mode", mode, "all | none | random | zero");
  ablate->add_option("--trials", trials, "Evaluation episodes per mode");
  ablate->add_option("--eval-seed", eval_seed, "Evaluation RNG seed");

  auto* eval = app.add_subcommand("eval", "Evaluate a trained checkpoint");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_option("--episodes", episodes, "Evaluation episodes");
  eval->add_option("--eval-seed", eval_seed, "Evaluation RNG seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (train->parsed()) {
      if (config_path.empty() && preset.empty())
        throw marlcpc::ConfigError("train: provide --config or --preset");
      return cmd_train(config_path, preset, seed_override, out_override, quiet);
    }
    if (sweep->parsed()) return cmd_sweep(manifest_path, jobs, true);
    if (ablate->parsed()) return cmd_ablate(checkpoint, mode, trials, eval_seed);
    if (eval->parsed()) return cmd_eval(checkpoint, episodes, eval_seed);
  } catch (const marlcpc::ConfigError& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  } catch (const marlcpc::ad::ContractError& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  } catch (const marlcpc::CheckpointError& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime failure: " << e.what() << std::endl;
    return 2;
  }
  return 0;
}
