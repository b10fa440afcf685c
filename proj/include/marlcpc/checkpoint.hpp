#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "marlcpc/agents.hpp"
#include "marlcpc/envs.hpp"

namespace marlcpc {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CheckpointMeta {
  std::string env;
  std::string condition;
  std::uint64_t seed = 0;
  int iteration = 0;
  int vocab = 5;
  double beta = 1.0;
  int cpc_hidden = 64;
  int policy_hidden = 64;
  std::string straight_through = "vector";
  Adam::Hyper adam;
};

namespace detail {
constexpr char kCheckpointMagic[8] = {'M', 'C', 'P', 'C', 'K', 'P', 'T', '1'};
constexpr int kCheckpointVersion = 1;
}  // namespace detail

// Versioned self-describing checkpoint: 8-byte magic, u64 header length, a
// JSON header naming every block, then raw little-endian 64-bit blocks
// (parameter values followed by Adam first/second moments, per agent, in the
// bundle's fixed parameter order). Round-trips are byte-exact.
inline void checkpoint_save(const std::string& path, const CheckpointMeta& meta,
                            std::vector<AgentBundle>& bundles) {
  nlohmann::json header;
  header["format"] = "marlcpc-checkpoint";
  header["version"] = detail::kCheckpointVersion;
  header["env"] = meta.env;
  header["condition"] = meta.condition;
  header["seed"] = meta.seed;
  header["iteration"] = meta.iteration;
  header["vocab"] = meta.vocab;
  header["beta"] = meta.beta;
  header["cpc_hidden"] = meta.cpc_hidden;
  header["policy_hidden"] = meta.policy_hidden;
  header["straight_through"] = meta.straight_through;
  header["adam"] = {{"lr", meta.adam.lr},
                    {"beta1", meta.adam.beta1},
                    {"beta2", meta.adam.beta2},
                    {"epsilon", meta.adam.epsilon}};

  nlohmann::json blocks = nlohmann::json::array();
  std::vector<const Mat*> payload;
  std::vector<int> steps;
  for (auto& b : bundles) {
    steps.push_back(b.opt.step_count());
    auto params = b.params();
    for (std::size_t p = 0; p < params.size(); ++p) {
      const std::string base =
          "agent" + std::to_string(b.index) + "/p" + std::to_string(p);
      const Mat& v = params[p]->value;
      blocks.push_back({{"name", base + "/value"},
                        {"rows", v.rows()},
                        {"cols", v.cols()}});
      payload.push_back(&v);
    }
    auto& slots = b.opt.slots();
    for (std::size_t p = 0; p < slots.size(); ++p) {
      const std::string base =
          "agent" + std::to_string(b.index) + "/p" + std::to_string(p);
      blocks.push_back({{"name", base + "/adam_m"},
                        {"rows", slots[p].m.rows()},
                        {"cols", slots[p].m.cols()}});
      payload.push_back(&slots[p].m);
      blocks.push_back({{"name", base + "/adam_v"},
                        {"rows", slots[p].v.rows()},
                        {"cols", slots[p].v.cols()}});
      payload.push_back(&slots[p].v);
    }
  }
  header["adam_steps"] = steps;
  header["blocks"] = blocks;

  const std::string hs = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open checkpoint for writing: " + path);
  out.write(detail::kCheckpointMagic, 8);
  const std::uint64_t len = hs.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const Mat* m : payload)
    out.write(reinterpret_cast<const char*>(m->data()),
              static_cast<std::streamsize>(sizeof(double) * m->size()));
  if (!out) throw CheckpointError("write failure on checkpoint: " + path);
}

struct LoadedCheckpoint {
  CheckpointMeta meta;
  std::vector<AgentBundle> bundles;
};

inline LoadedCheckpoint checkpoint_load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path);

  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0)
    throw CheckpointError("not a checkpoint file (bad magic): " + path);
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in) throw CheckpointError("truncated checkpoint header length: " + path);
  std::string hs(len, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(len));
  if (!in) throw CheckpointError("truncated checkpoint header: " + path);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hs);
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint header: ") + e.what());
  }
  if (header.value("version", -1) != detail::kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version in " + path);

  LoadedCheckpoint lc;
  try {
    lc.meta.env = header.at("env").get<std::string>();
    lc.meta.condition = header.at("condition").get<std::string>();
    lc.meta.seed = header.at("seed").get<std::uint64_t>();
    lc.meta.iteration = header.at("iteration").get<int>();
    lc.meta.vocab = header.at("vocab").get<int>();
    lc.meta.beta = header.at("beta").get<double>();
    lc.meta.cpc_hidden = header.at("cpc_hidden").get<int>();
    lc.meta.policy_hidden = header.at("policy_hidden").get<int>();
    lc.meta.straight_through = header.at("straight_through").get<std::string>();
    lc.meta.adam.lr = header.at("adam").at("lr").get<double>();
    lc.meta.adam.beta1 = header.at("adam").at("beta1").get<double>();
    lc.meta.adam.beta2 = header.at("adam").at("beta2").get<double>();
    lc.meta.adam.epsilon = header.at("adam").at("epsilon").get<double>();
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("checkpoint header missing field: ") +
                          e.what());
  }

  auto env = make_env(lc.meta.env);
  AgentHyper hyper;
  hyper.policy_hidden = lc.meta.policy_hidden;
  hyper.cpc_hidden = lc.meta.cpc_hidden;
  hyper.vocab = lc.meta.vocab;
  hyper.beta = lc.meta.beta;
  hyper.st_estimator = parse_st_estimator(lc.meta.straight_through);
  hyper.adam = lc.meta.adam;
  const Condition cond = parse_condition(lc.meta.condition);
  for (int i = 0; i < env->spec().n_agents; ++i)
    lc.bundles.push_back(build_bundle(cond, env->spec(), i, hyper, lc.meta.seed));

  const auto& blocks = header.at("blocks");
  std::size_t bi = 0;
  auto read_block = [&](Mat& target, const std::string& expect_suffix) {
    if (bi >= blocks.size())
      throw CheckpointError("checkpoint missing block for " + expect_suffix);
    const auto& blk = blocks[bi++];
    const std::string name = blk.at("name").get<std::string>();
    const auto rows = blk.at("rows").get<Eigen::Index>();
    const auto cols = blk.at("cols").get<Eigen::Index>();
    if (rows != target.rows() || cols != target.cols())
      throw CheckpointError("checkpoint block " + name + " has shape " +
                            std::to_string(rows) + "x" + std::to_string(cols) +
                            ", expected " + std::to_string(target.rows()) + "x" +
                            std::to_string(target.cols()));
    in.read(reinterpret_cast<char*>(target.data()),
            static_cast<std::streamsize>(sizeof(double) * target.size()));
    if (!in) throw CheckpointError("truncated while reading block " + name);
  };

  const auto& steps = header.at("adam_steps");
  for (std::size_t a = 0; a < lc.bundles.size(); ++a) {
    auto& b = lc.bundles[a];
    auto params = b.params();
    for (std::size_t p = 0; p < params.size(); ++p)
      read_block(params[p]->value, "agent" + std::to_string(a) + " value");
    auto& slots = b.opt.slots();
    for (std::size_t p = 0; p < slots.size(); ++p) {
      read_block(slots[p].m, "agent" + std::to_string(a) + " adam_m");
      read_block(slots[p].v, "agent" + std::to_string(a) + " adam_v");
    }
    b.opt.set_step_count(steps.at(a).get<int>());
  }
  if (bi != blocks.size())
    throw CheckpointError("checkpoint has extra blocks beyond the model");
  return lc;
}

}  // namespace marlcpc
