#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "marlcpc/agents.hpp"
#include "marlcpc/trainers.hpp"

namespace marlcpc {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {
// Shortest representation that parses back to the same double.
inline std::string fmt_double(double v) {
  char buf[40];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}
}  // namespace detail

// Full run configuration. Defaults follow the experimental protocol for the
// chosen environment; values that fill protocol gaps are marked `# gap-fill`
// when the resolved config is emitted.
struct RunConfig {
  std::string env = "bandit";
  std::string condition = "cpc";
  std::uint64_t seed = 1;
  std::string out;

  TrainerConfig trainer;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;

  int vocab = 5;
  double beta = 1.0;
  int cpc_hidden = 64;
  int policy_hidden = 64;
  std::string straight_through = "vector";

  int bootstrap_resamples = 2000;
  double confidence = 0.95;

  static RunConfig preset(const std::string& name) {
    RunConfig c;
    if (name == "bandit" || name == "bandit-coop") {
      c.env = name;
      c.vocab = 5;
      c.trainer.learning_rate = 3e-4;
      c.trainer.batch_episodes = 256;
      c.trainer.budget_episodes = 30000;
      c.trainer.eval_interval = 1;
      c.trainer.eval_episodes = 100;
    } else if (name == "observer-full" || name == "observer") {
      c.env = "observer";
      c.vocab = 20;
      c.trainer.learning_rate = 2.5e-4;
      c.trainer.rollout_steps = 1024;
      c.trainer.workers = 8;
      c.trainer.budget_steps = 3000000;
      c.trainer.eval_interval = 10;
      c.trainer.eval_episodes = 100;
    } else if (name == "observer-desk") {
      c = preset("observer-full");
      c.trainer.budget_steps = 500000;
      c.trainer.eval_episodes = 50;
    } else {
      throw ConfigError("unknown preset: " + name);
    }
    return c;
  }

  RunSetup to_setup() const {
    RunSetup s;
    s.env_name = env;
    s.condition = parse_condition(condition);
    s.seed = seed;
    s.trainer = trainer;
    s.hyper.policy_hidden = policy_hidden;
    s.hyper.cpc_hidden = cpc_hidden;
    s.hyper.vocab = vocab;
    s.hyper.beta = beta;
    s.hyper.st_estimator = parse_st_estimator(straight_through);
    s.hyper.adam = Adam::Hyper{trainer.learning_rate, adam_beta1, adam_beta2,
                               adam_epsilon};
    return s;
  }
};

namespace detail {

struct KvFile {
  // section.key -> value, plus original order for diagnostics
  std::map<std::string, std::string> values;
  std::vector<std::string> order;

  void set(const std::string& section, const std::string& key,
           const std::string& value) {
    const std::string full = section + "." + key;
    if (!values.count(full)) order.push_back(full);
    values[full] = value;
  }
};

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline KvFile parse_kv_text(std::istream& in, const std::string& origin) {
  KvFile kv;
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError(origin + ":" + std::to_string(lineno) +
                          ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) +
                        ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
    kv.set(section, key, value);
  }
  return kv;
}

inline KvFile parse_kv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  return parse_kv_text(in, path);
}

inline double to_double(const std::string& full, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return d;
  } catch (...) {
    throw ConfigError("key " + full + ": expected a number, got '" + v + "'");
  }
}

inline long long to_int(const std::string& full, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long d = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return d;
  } catch (...) {
    throw ConfigError("key " + full + ": expected an integer, got '" + v + "'");
  }
}

inline bool to_bool(const std::string& full, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("key " + full + ": expected a boolean, got '" + v + "'");
}

// Applies one section.key; returns false if the key is unknown.
inline bool apply_key(RunConfig& c, const std::string& full,
                      const std::string& v) {
  auto D = [&] { return to_double(full, v); };
  auto I = [&] { return to_int(full, v); };
  auto B = [&] { return to_bool(full, v); };

  if (full == "run.env") c.env = v;
  else if (full == "run.condition") c.condition = v;
  else if (full == "run.seed") c.seed = static_cast<std::uint64_t>(I());
  else if (full == "run.out") c.out = v;
  else if (full == "trainer.learning_rate") c.trainer.learning_rate = D();
  else if (full == "trainer.gamma") c.trainer.gamma = D();
  else if (full == "trainer.gae_lambda") c.trainer.gae_lambda = D();
  else if (full == "trainer.clip_epsilon") c.trainer.clip_epsilon = D();
  else if (full == "trainer.value_coef") c.trainer.value_coef = D();
  else if (full == "trainer.entropy_coef") c.trainer.entropy_coef = D();
  else if (full == "trainer.minibatches") c.trainer.minibatches = static_cast<int>(I());
  else if (full == "trainer.epochs") c.trainer.epochs = static_cast<int>(I());
  else if (full == "trainer.batch_episodes") c.trainer.batch_episodes = static_cast<int>(I());
  else if (full == "trainer.rollout_steps") c.trainer.rollout_steps = static_cast<int>(I());
  else if (full == "trainer.workers") c.trainer.workers = static_cast<int>(I());
  else if (full == "trainer.advantage_norm") c.trainer.advantage_norm = B();
  else if (full == "trainer.budget_episodes") c.trainer.budget_episodes = I();
  else if (full == "trainer.budget_steps") c.trainer.budget_steps = I();
  else if (full == "trainer.adam_beta1") c.adam_beta1 = D();
  else if (full == "trainer.adam_beta2") c.adam_beta2 = D();
  else if (full == "trainer.adam_epsilon") c.adam_epsilon = D();
  else if (full == "cpc.vocab") c.vocab = static_cast<int>(I());
  else if (full == "cpc.beta") c.beta = D();
  else if (full == "cpc.hidden") c.cpc_hidden = static_cast<int>(I());
  else if (full == "cpc.straight_through") c.straight_through = v;
  else if (full == "policy.hidden") c.policy_hidden = static_cast<int>(I());
  else if (full == "eval.interval") c.trainer.eval_interval = static_cast<int>(I());
  else if (full == "eval.episodes") c.trainer.eval_episodes = static_cast<int>(I());
  else if (full == "eval.resamples") c.bootstrap_resamples = static_cast<int>(I());
  else if (full == "eval.confidence") c.confidence = D();
  else if (full == "checkpoint.interval") c.trainer.checkpoint_interval = static_cast<int>(I());
  else return false;
  return true;
}

}  // namespace detail

inline void validate_config(const RunConfig& c) {
  if (c.env != "bandit" && c.env != "bandit-coop" && c.env != "observer")
    throw ConfigError("key run.env: unknown env '" + c.env + "'");
  try {
    parse_condition(c.condition);
  } catch (const std::exception&) {
    throw ConfigError("key run.condition: unknown condition '" + c.condition + "'");
  }
  auto positive = [](double x, const char* k) {
    if (!(x > 0)) throw ConfigError(std::string("key ") + k + ": must be positive");
  };
  positive(c.trainer.learning_rate, "trainer.learning_rate");
  positive(c.trainer.gamma, "trainer.gamma");
  positive(c.vocab, "cpc.vocab");
  parse_st_estimator(c.straight_through);  // validates the name
  positive(c.trainer.minibatches, "trainer.minibatches");
  positive(c.trainer.epochs, "trainer.epochs");
  if (!(c.trainer.clip_epsilon > 0 && c.trainer.clip_epsilon < 1))
    throw ConfigError("key trainer.clip_epsilon: must be in (0,1)");
  if (c.trainer.workers < 1)
    throw ConfigError("key trainer.workers: must be at least 1");
  if (c.env == "observer" &&
      c.trainer.rollout_steps % c.trainer.workers != 0)
    throw ConfigError("key trainer.rollout_steps: must be divisible by workers");
}

// Loads a config file on top of the preset selected by its run.env key.
inline RunConfig load_config(const std::string& path) {
  detail::KvFile kv = detail::parse_kv_file(path);
  std::string env = "bandit";
  if (kv.values.count("run.env")) env = kv.values.at("run.env");
  std::string preset_name = env;
  if (kv.values.count("run.preset")) preset_name = kv.values.at("run.preset");
  RunConfig c = RunConfig::preset(preset_name);
  for (const std::string& full : kv.order) {
    if (full == "run.preset") continue;
    if (!detail::apply_key(c, full, kv.values.at(full)))
      throw ConfigError("unknown config key: " + full);
  }
  validate_config(c);
  return c;
}

// Serializes every effective hyperparameter; gap-fill defaults (values the
// protocol does not pin down) are annotated so runs are auditable.
inline std::string resolve_config(const RunConfig& c) {
  const bool bandit = c.env != "observer";
  std::set<std::string> gap = {
      "trainer.adam_beta1", "trainer.adam_beta2", "trainer.adam_epsilon",
      "eval.interval",      "eval.episodes",      "trainer.advantage_norm",
      "trainer.gae_lambda", "trainer.epochs",     "checkpoint.interval",
      "cpc.straight_through"};
  if (bandit) {
    gap.insert("trainer.batch_episodes");
    gap.insert("trainer.minibatches");
  }

  std::ostringstream out;
  std::string section;
  auto emit_str = [&](const std::string& full, const std::string& value) {
    const auto dot = full.find('.');
    const std::string sec = full.substr(0, dot);
    const std::string key = full.substr(dot + 1);
    if (sec != section) {
      if (!section.empty()) out << "\n";
      out << "[" << sec << "]\n";
      section = sec;
    }
    out << key << " = " << value;
    if (gap.count(full)) out << "  # gap-fill";
    out << "\n";
  };
  auto emit = [&](const std::string& full, const auto& value) {
    using T = std::decay_t<decltype(value)>;
    if constexpr (std::is_same_v<T, double>)
      emit_str(full, detail::fmt_double(value));
    else if constexpr (std::is_arithmetic_v<T>)
      emit_str(full, std::to_string(value));
    else
      emit_str(full, std::string(value));
  };

  emit("run.env", c.env);
  emit("run.condition", c.condition);
  emit("run.seed", c.seed);
  if (!c.out.empty()) emit("run.out", c.out);
  emit("trainer.learning_rate", c.trainer.learning_rate);
  emit("trainer.gamma", c.trainer.gamma);
  emit("trainer.gae_lambda", c.trainer.gae_lambda);
  emit("trainer.clip_epsilon", c.trainer.clip_epsilon);
  emit("trainer.value_coef", c.trainer.value_coef);
  emit("trainer.entropy_coef", c.trainer.entropy_coef);
  emit("trainer.minibatches", c.trainer.minibatches);
  emit("trainer.epochs", c.trainer.epochs);
  if (bandit)
    emit("trainer.batch_episodes", c.trainer.batch_episodes);
  else {
    emit("trainer.rollout_steps", c.trainer.rollout_steps);
    emit("trainer.workers", c.trainer.workers);
  }
  emit("trainer.advantage_norm", c.trainer.advantage_norm ? "true" : "false");
  if (bandit)
    emit("trainer.budget_episodes", c.trainer.budget_episodes);
  else
    emit("trainer.budget_steps", c.trainer.budget_steps);
  emit("trainer.adam_beta1", c.adam_beta1);
  emit("trainer.adam_beta2", c.adam_beta2);
  emit("trainer.adam_epsilon", c.adam_epsilon);
  emit("cpc.vocab", c.vocab);
  emit("cpc.beta", c.beta);
  emit("cpc.hidden", c.cpc_hidden);
  emit("cpc.straight_through", c.straight_through);
  emit("policy.hidden", c.policy_hidden);
  emit("eval.interval", c.trainer.eval_interval);
  emit("eval.episodes", c.trainer.eval_episodes);
  emit("eval.resamples", c.bootstrap_resamples);
  emit("eval.confidence", c.confidence);
  emit("checkpoint.interval", c.trainer.checkpoint_interval);
  return out.str();
}

// ---------------------------------------------------------------------------
// Sweep manifest: conditions x seeds over a base config.
// ---------------------------------------------------------------------------

struct ExperimentManifest {
  RunConfig base;
  std::vector<std::string> conditions;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> metrics;  // which metrics to summarize
  std::string out;

  std::vector<RunConfig> expand() const {
    std::vector<RunConfig> runs;
    for (const auto& cond : conditions)
      for (std::uint64_t s : seeds) {
        RunConfig c = base;
        c.condition = cond;
        c.seed = s;
        c.out = out + "/" + cond + "-seed" + std::to_string(s);
        validate_config(c);
        runs.push_back(c);
      }
    return runs;
  }
};

inline std::vector<std::uint64_t> parse_seed_list(const std::string& v) {
  std::vector<std::uint64_t> seeds;
  const auto dots = v.find("..");
  if (dots != std::string::npos) {
    const long long a = detail::to_int("sweep.seeds", v.substr(0, dots));
    const long long b = detail::to_int("sweep.seeds", v.substr(dots + 2));
    if (b < a) throw ConfigError("sweep.seeds: empty range");
    for (long long s = a; s <= b; ++s) seeds.push_back(static_cast<std::uint64_t>(s));
  } else {
    std::stringstream ss(v);
    std::string tok;
    while (std::getline(ss, tok, ','))
      seeds.push_back(static_cast<std::uint64_t>(
          detail::to_int("sweep.seeds", detail::trim(tok))));
  }
  std::set<std::uint64_t> uniq(seeds.begin(), seeds.end());
  if (uniq.size() != seeds.size())
    throw ConfigError("sweep.seeds: seeds must be distinct");
  if (seeds.empty()) throw ConfigError("sweep.seeds: empty seed list");
  return seeds;
}

inline ExperimentManifest load_manifest(const std::string& path) {
  detail::KvFile kv = detail::parse_kv_file(path);
  ExperimentManifest m;

  std::string env = "bandit";
  if (kv.values.count("sweep.env")) env = kv.values.at("sweep.env");
  std::string preset_name = env;
  if (kv.values.count("sweep.preset")) preset_name = kv.values.at("sweep.preset");
  m.base = RunConfig::preset(preset_name);
  m.base.env = env;

  if (!kv.values.count("sweep.conditions"))
    throw ConfigError("manifest: missing sweep.conditions");
  {
    std::stringstream ss(kv.values.at("sweep.conditions"));
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      tok = detail::trim(tok);
      parse_condition(tok);  // validates
      m.conditions.push_back(tok);
    }
  }
  if (!kv.values.count("sweep.seeds"))
    throw ConfigError("manifest: missing sweep.seeds");
  m.seeds = parse_seed_list(kv.values.at("sweep.seeds"));
  m.out = kv.values.count("sweep.out") ? kv.values.at("sweep.out") : "sweep-out";
  if (kv.values.count("sweep.metrics")) {
    std::stringstream ss(kv.values.at("sweep.metrics"));
    std::string tok;
    while (std::getline(ss, tok, ',')) m.metrics.push_back(detail::trim(tok));
  } else {
    m.metrics = env == "observer"
                    ? std::vector<std::string>{"welfare", "episode_length"}
                    : std::vector<std::string>{"welfare"};
  }

  for (const std::string& full : kv.order) {
    if (full.rfind("sweep.", 0) == 0) {
      static const std::set<std::string> known = {
          "sweep.env",  "sweep.preset", "sweep.conditions",
          "sweep.seeds", "sweep.out",   "sweep.metrics"};
      if (!known.count(full)) throw ConfigError("unknown manifest key: " + full);
      continue;
    }
    if (!detail::apply_key(m.base, full, kv.values.at(full)))
      throw ConfigError("unknown manifest key: " + full);
  }
  validate_config(m.base);
  return m;
}

}  // namespace marlcpc
