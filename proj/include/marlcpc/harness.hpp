#pragma once

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "marlcpc/checkpoint.hpp"
#include "marlcpc/config.hpp"
#include "marlcpc/stats.hpp"
#include "marlcpc/trainers.hpp"

namespace marlcpc {

inline std::string metrics_csv_header(int n_agents) {
  std::string h = "iteration,env_steps,episodes,condition,env,seed";
  for (int i = 0; i < n_agents; ++i)
    h += ",return_agent" + std::to_string(i);
  h += ",welfare,episode_length";
  return h;
}

inline std::string metrics_csv_row(const RunRecord& r) {
  std::string row = std::to_string(r.iteration) + "," +
                    std::to_string(r.env_steps) + "," +
                    std::to_string(r.episodes) + "," + r.condition + "," +
                    r.env + "," + std::to_string(r.seed);
  for (double ret : r.agent_returns) row += "," + detail::fmt_double(ret);
  row += "," + detail::fmt_double(r.welfare);
  row += "," + detail::fmt_double(r.episode_length);
  return row;
}

inline std::string default_out_dir(const RunConfig& c) {
  if (!c.out.empty()) return c.out;
  std::string root = "runs";
  if (const char* env_root = std::getenv("MARLCPC_OUT")) root = env_root;
  return root + "/" + c.env + "-" + c.condition + "-seed" +
         std::to_string(c.seed);
}

// Executes one training run: writes config.resolved before training starts,
// streams metrics.csv row by row, drops periodic and final checkpoints, and
// marks completion with a DONE file.
inline RunResult run_one(const RunConfig& config, bool quiet = false) {
  const std::string dir = default_out_dir(config);
  std::filesystem::create_directories(dir);

  {
    std::ofstream rc(dir + "/config.resolved", std::ios::trunc);
    if (!rc) throw std::runtime_error("cannot write " + dir + "/config.resolved");
    rc << resolve_config(config);
  }

  std::ofstream csv(dir + "/metrics.csv", std::ios::trunc);
  if (!csv) throw std::runtime_error("cannot write " + dir + "/metrics.csv");
  auto env_probe = make_env(config.env);
  csv << metrics_csv_header(env_probe->spec().n_agents) << "\n";
  csv.flush();

  CheckpointMeta meta;
  meta.env = config.env;
  meta.condition = config.condition;
  meta.seed = config.seed;
  meta.vocab = config.vocab;
  meta.beta = config.beta;
  meta.cpc_hidden = config.cpc_hidden;
  meta.policy_hidden = config.policy_hidden;
  meta.straight_through = config.straight_through;
  meta.adam = Adam::Hyper{config.trainer.learning_rate, config.adam_beta1,
                          config.adam_beta2, config.adam_epsilon};

  RunHooks hooks;
  hooks.on_record = [&](const RunRecord& r) {
    csv << metrics_csv_row(r) << "\n";
    csv.flush();
    if (!quiet)
      std::cout << "[" << config.env << "/" << config.condition << "/seed"
                << config.seed << "] iter " << r.iteration << " welfare "
                << r.welfare << " ep_len " << r.episode_length << std::endl;
  };
  hooks.on_checkpoint = [&](int iteration, std::vector<AgentBundle>& bundles,
                            bool final) {
    meta.iteration = iteration;
    const std::string path =
        final ? dir + "/checkpoint_final.bin"
              : dir + "/checkpoint_iter" + std::to_string(iteration) + ".bin";
    checkpoint_save(path, meta, bundles);
  };

  RunResult res = run_training(config.to_setup(), hooks);
  std::ofstream done(dir + "/DONE", std::ios::trunc);
  done << "ok\n";
  return res;
}

// ---------------------------------------------------------------------------
// Sweep: conditions x seeds, bounded worker pool, IQM + CI aggregation.
// ---------------------------------------------------------------------------

struct ParsedRun {
  std::string condition;
  std::uint64_t seed = 0;
  std::vector<RunRecord> records;
};

inline std::vector<RunRecord> read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty metrics: " + path);
  const int n_agents =
      static_cast<int>(std::count(line.begin(), line.end(), ',')) - 7;
  std::vector<RunRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) f.push_back(tok);
    RunRecord r;
    r.iteration = std::stoi(f.at(0));
    r.env_steps = std::stoll(f.at(1));
    r.episodes = std::stoll(f.at(2));
    r.condition = f.at(3);
    r.env = f.at(4);
    r.seed = std::stoull(f.at(5));
    for (int i = 0; i < n_agents; ++i)
      r.agent_returns.push_back(std::stod(f.at(6 + i)));
    r.welfare = std::stod(f.at(6 + n_agents));
    r.episode_length = std::stod(f.at(7 + n_agents));
    out.push_back(r);
  }
  return out;
}

inline double record_metric(const RunRecord& r, const std::string& metric) {
  if (metric == "welfare") return r.welfare;
  if (metric == "episode_length") return r.episode_length;
  throw std::runtime_error("unknown metric: " + metric);
}

// Aggregates per-condition runs into plot-ready summary points: one row per
// (metric, condition, eval point), IQM across seeds with a bootstrap CI.
inline std::vector<SummaryPoint> summarize_runs(
    const std::vector<ParsedRun>& runs, const std::vector<std::string>& metrics,
    const std::string& env, int resamples, double confidence,
    std::uint64_t ci_seed = 17) {
  std::vector<std::string> conditions;
  for (const auto& r : runs)
    if (std::find(conditions.begin(), conditions.end(), r.condition) ==
        conditions.end())
      conditions.push_back(r.condition);

  std::vector<SummaryPoint> out;
  for (const auto& metric : metrics) {
    for (const auto& cond : conditions) {
      std::vector<const ParsedRun*> group;
      for (const auto& r : runs)
        if (r.condition == cond) group.push_back(&r);
      if (group.empty()) continue;
      std::size_t points = group[0]->records.size();
      for (const auto* g : group) points = std::min(points, g->records.size());
      for (std::size_t p = 0; p < points; ++p) {
        std::vector<double> samples;
        for (const auto* g : group)
          samples.push_back(record_metric(g->records[p], metric));
        SummaryPoint sp;
        sp.metric = metric;
        sp.condition = cond;
        sp.env = env;
        sp.steps = group[0]->records[p].env_steps;
        sp.iqm_value = iqm(samples);
        sp.n_runs = static_cast<int>(samples.size());
        if (samples.size() >= 2) {
          RandomStream rng(RandomStream::derive(ci_seed, p * 1315423911ULL +
                                                             out.size()));
          auto [lo, hi] = bootstrap_ci(samples, rng,
                                       [](const std::vector<double>& s) {
                                         return iqm(s);
                                       },
                                       resamples, confidence);
          sp.ci_lo = lo;
          sp.ci_hi = hi;
          sp.has_ci = true;
        }
        out.push_back(sp);
      }
    }
  }
  return out;
}

inline std::string summary_csv(const std::vector<SummaryPoint>& points) {
  std::string s = "metric,condition,env,steps,iqm,ci_lo,ci_hi,n_runs\n";
  for (const auto& p : points) {
    s += p.metric + "," + p.condition + "," + p.env + "," +
         std::to_string(p.steps) + "," + detail::fmt_double(p.iqm_value) + ",";
    if (p.has_ci)
      s += detail::fmt_double(p.ci_lo) + "," + detail::fmt_double(p.ci_hi);
    else
      s += ",";
    s += "," + std::to_string(p.n_runs) + "\n";
  }
  return s;
}

struct SweepResult {
  std::vector<SummaryPoint> summary;
  int failed_runs = 0;
  int skipped_existing = 0;
};

// Runs every manifest config on a bounded pool; completed runs (DONE marker)
// are reused. Failed runs are recorded and skipped in aggregation.
inline SweepResult run_sweep(const ExperimentManifest& manifest, int jobs,
                             bool quiet = true) {
  std::vector<RunConfig> configs = manifest.expand();
  std::filesystem::create_directories(manifest.out);

  std::atomic<std::size_t> next{0};
  std::mutex io_mutex;
  std::vector<bool> ok(configs.size(), false);
  std::vector<bool> reused(configs.size(), false);

  auto work = [&]() {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= configs.size()) return;
      const RunConfig& rc = configs[i];
      const std::string dir = default_out_dir(rc);
      try {
        if (std::filesystem::exists(dir + "/DONE") &&
            std::filesystem::exists(dir + "/metrics.csv")) {
          ok[i] = true;
          reused[i] = true;
          continue;
        }
        run_one(rc, quiet);
        ok[i] = true;
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(io_mutex);
        std::cerr << "warning: run " << rc.condition << "/seed" << rc.seed
                  << " failed and is skipped in aggregation: " << e.what()
                  << std::endl;
      }
    }
  };

  const int n_threads =
      std::max(1, std::min<int>(jobs, static_cast<int>(configs.size())));
  std::vector<std::thread> pool;
  for (int j = 0; j < n_threads; ++j) pool.emplace_back(work);
  for (auto& th : pool) th.join();

  SweepResult result;
  std::vector<ParsedRun> parsed;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    if (!ok[i]) {
      ++result.failed_runs;
      continue;
    }
    if (reused[i]) ++result.skipped_existing;
    ParsedRun pr;
    pr.condition = configs[i].condition;
    pr.seed = configs[i].seed;
    pr.records = read_metrics_csv(default_out_dir(configs[i]) + "/metrics.csv");
    parsed.push_back(std::move(pr));
  }
  result.summary =
      summarize_runs(parsed, manifest.metrics, manifest.base.env,
                     manifest.base.bootstrap_resamples, manifest.base.confidence);

  std::ofstream out(manifest.out + "/summary.csv", std::ios::trunc);
  out << summary_csv(result.summary);
  if (result.summary.size() == 1 || (!parsed.empty() && parsed.size() < 2))
    std::cerr << "warning: fewer than 2 runs per condition; CI columns are empty"
              << std::endl;
  return result;
}

// ---------------------------------------------------------------------------
// Ablation report over a trained checkpoint.
// ---------------------------------------------------------------------------

struct AblationRow {
  std::string mode;
  int trials = 0;
  double welfare_iqm = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  bool has_ci = false;
  double episode_length = 0.0;
};

inline AblationRow ablation_row(std::vector<AgentBundle>& bundles, Env& env,
                                AblationMode mode, int trials,
                                std::uint64_t eval_seed, int resamples,
                                double confidence) {
  RandomStream rng(RandomStream::derive(eval_seed, static_cast<int>(mode) + 40));
  EvalResult ev = evaluate(bundles, env, trials, mode, rng);
  AblationRow row;
  row.mode = ablation_name(mode);
  row.trials = trials;
  row.welfare_iqm = iqm(ev.episode_welfares);
  row.episode_length = ev.episode_length;
  if (trials >= 2) {
    RandomStream ci_rng(RandomStream::derive(eval_seed, static_cast<int>(mode) + 80));
    auto [lo, hi] = bootstrap_ci(ev.episode_welfares, ci_rng,
                                 [](const std::vector<double>& s) { return iqm(s); },
                                 resamples, confidence);
    row.ci_lo = lo;
    row.ci_hi = hi;
    row.has_ci = true;
  }
  return row;
}

// Loads frozen agents and evaluates the requested interventions. A run whose
// condition exchanges no messages cannot be ablated.
inline std::vector<AblationRow> run_ablation(const std::string& checkpoint_path,
                                             const std::vector<AblationMode>& modes,
                                             int trials, std::uint64_t eval_seed,
                                             int resamples = 2000,
                                             double confidence = 0.95) {
  LoadedCheckpoint lc = checkpoint_load(checkpoint_path);
  const Condition cond = parse_condition(lc.meta.condition);
  if (!condition_communicates(cond))
    throw ConfigError("checkpoint condition '" + lc.meta.condition +
                      "' exchanges no messages; nothing to ablate");
  auto env = make_env(lc.meta.env);
  std::vector<AblationRow> rows;
  for (AblationMode m : modes)
    rows.push_back(ablation_row(lc.bundles, *env, m, trials, eval_seed,
                                resamples, confidence));
  return rows;
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string s = "mode,trials,welfare_iqm,ci_lo,ci_hi,episode_length\n";
  for (const auto& r : rows) {
    s += r.mode + "," + std::to_string(r.trials) + "," +
         detail::fmt_double(r.welfare_iqm) + ",";
    if (r.has_ci)
      s += detail::fmt_double(r.ci_lo) + "," + detail::fmt_double(r.ci_hi);
    else
      s += ",";
    s += "," + detail::fmt_double(r.episode_length) + "\n";
  }
  return s;
}

}  // namespace marlcpc
