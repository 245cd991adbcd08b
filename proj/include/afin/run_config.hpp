#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "afin/afin_network.hpp"
#include "afin/task_simulator.hpp"
#include "afin/training.hpp"

namespace afin {

constexpr int kSchemaVersion = 1;

struct EvalConfig {
  std::vector<int> budgets = {100, 1000, 10000};
  int ref_iterations = 200000;  // reference chain length for non-conjugate tasks
  int ref_warmup = 20000;
  int ref_samples = 20000;      // oracle reference draws for conjugate tasks
  int sw2_projections = 128;    // R
  double mcmc_warmup_frac = 0.25;
};

struct RunConfig {
  uint64_t seed = 0;
  AfinConfig model;
  DecoderKind decoder = DecoderKind::kGaussian;
  SimulatorConfig simulator;
  TrainConfig train;
  EvalConfig eval;
  std::string out_dir = "runs/default";
  int threads = 0;  // 0 = library default
};

inline AfinConfig model_config_from_json(const nlohmann::json& j, AfinConfig base) {
  if (j.contains("C")) base.channels = j.at("C").get<int>();
  if (j.contains("H")) base.hidden = j.at("H").get<int>();
  if (j.contains("L")) base.layers = j.at("L").get<int>();
  if (j.contains("M")) base.merge_blocks = j.at("M").get<int>();
  if (j.contains("heads")) base.heads = j.at("heads").get<int>();
  if (j.contains("adapter_hidden")) base.adapter_hidden = j.at("adapter_hidden").get<int>();
  if (j.contains("adapter_layers")) base.adapter_layers = j.at("adapter_layers").get<int>();
  if (j.contains("flow_layers")) base.flow_layers = j.at("flow_layers").get<int>();
  if (j.contains("flow_hidden")) base.flow_hidden = j.at("flow_hidden").get<int>();
  if (j.contains("flow_context")) base.flow_context = j.at("flow_context").get<int>();
  if (j.contains("precision_floor")) base.precision_floor = j.at("precision_floor").get<double>();
  if (j.contains("whiten_flow")) base.whiten_flow = j.at("whiten_flow").get<bool>();
  return base;
}

inline nlohmann::json model_config_to_json(const AfinConfig& c) {
  nlohmann::json j;
  j["C"] = c.channels;
  j["H"] = c.hidden;
  j["L"] = c.layers;
  j["M"] = c.merge_blocks;
  j["heads"] = c.heads;
  j["adapter_hidden"] = c.adapter_hidden;
  j["adapter_layers"] = c.adapter_layers;
  j["flow_layers"] = c.flow_layers;
  j["flow_hidden"] = c.flow_hidden;
  j["flow_context"] = c.flow_context;
  j["precision_floor"] = c.precision_floor;
  j["whiten_flow"] = c.whiten_flow;
  return j;
}

inline AfinConfig profile_config(const std::string& name) {
  if (name == "paper-default") return AfinConfig::paper_default();
  if (name == "toy") return AfinConfig::toy();
  throw std::invalid_argument("unknown profile: " + name + " (expected paper-default or toy)");
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig cfg;
  if (j.contains("schema_version") && j.at("schema_version").get<int>() != kSchemaVersion)
    throw std::invalid_argument("config: unsupported schema_version");
  if (j.contains("seed")) cfg.seed = j.at("seed").get<uint64_t>();
  AfinConfig base = j.contains("profile")
                        ? profile_config(j.at("profile").get<std::string>())
                        : AfinConfig::paper_default();
  cfg.model = j.contains("model") ? model_config_from_json(j.at("model"), base) : base;
  cfg.model.validate();
  if (j.contains("decoder")) cfg.decoder = decoder_kind_from_name(j.at("decoder").get<std::string>());
  if (j.contains("simulator")) cfg.simulator = simulator_config_from_json(j.at("simulator"));
  if (j.contains("train")) {
    const auto& t = j.at("train");
    if (t.contains("steps")) cfg.train.steps = t.at("steps").get<int>();
    if (t.contains("micro_batch")) cfg.train.micro_batch = t.at("micro_batch").get<int>();
    if (t.contains("accumulation")) cfg.train.accumulation = t.at("accumulation").get<int>();
    if (t.contains("peak_lr")) cfg.train.peak_lr = t.at("peak_lr").get<double>();
    if (t.contains("weight_decay")) cfg.train.weight_decay = t.at("weight_decay").get<double>();
    if (t.contains("ema_decay")) cfg.train.ema_decay = t.at("ema_decay").get<double>();
    if (t.contains("warmup_frac")) cfg.train.warmup_frac = t.at("warmup_frac").get<double>();
    if (t.contains("log_every")) cfg.train.log_every = t.at("log_every").get<int>();
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    if (e.contains("budgets")) cfg.eval.budgets = e.at("budgets").get<std::vector<int>>();
    if (e.contains("ref_iterations")) cfg.eval.ref_iterations = e.at("ref_iterations").get<int>();
    if (e.contains("ref_warmup")) cfg.eval.ref_warmup = e.at("ref_warmup").get<int>();
    if (e.contains("ref_samples")) cfg.eval.ref_samples = e.at("ref_samples").get<int>();
    if (e.contains("sw2_projections"))
      cfg.eval.sw2_projections = e.at("sw2_projections").get<int>();
    if (e.contains("mcmc_warmup_frac"))
      cfg.eval.mcmc_warmup_frac = e.at("mcmc_warmup_frac").get<double>();
  }
  if (j.contains("paths") && j.at("paths").contains("out_dir"))
    cfg.out_dir = j.at("paths").at("out_dir").get<std::string>();
  if (j.contains("threads")) cfg.threads = j.at("threads").get<int>();
  cfg.train.seed = cfg.seed;
  cfg.train.decoder = cfg.decoder;
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("config: cannot open " + path);
  nlohmann::json j;
  is >> j;
  return run_config_from_json(j);
}

inline nlohmann::json run_config_to_json(const RunConfig& cfg) {
  nlohmann::json j;
  j["schema_version"] = kSchemaVersion;
  j["seed"] = cfg.seed;
  j["model"] = model_config_to_json(cfg.model);
  j["decoder"] = decoder_kind_name(cfg.decoder);
  j["simulator"] = simulator_config_to_json(cfg.simulator);
  j["train"] = {{"steps", cfg.train.steps},
                {"micro_batch", cfg.train.micro_batch},
                {"accumulation", cfg.train.accumulation},
                {"peak_lr", cfg.train.peak_lr},
                {"weight_decay", cfg.train.weight_decay},
                {"ema_decay", cfg.train.ema_decay},
                {"warmup_frac", cfg.train.warmup_frac},
                {"log_every", cfg.train.log_every}};
  j["eval"] = {{"budgets", cfg.eval.budgets},
               {"ref_iterations", cfg.eval.ref_iterations},
               {"ref_warmup", cfg.eval.ref_warmup},
               {"ref_samples", cfg.eval.ref_samples},
               {"sw2_projections", cfg.eval.sw2_projections},
               {"mcmc_warmup_frac", cfg.eval.mcmc_warmup_frac}};
  j["paths"] = {{"out_dir", cfg.out_dir}};
  j["threads"] = cfg.threads;
  return j;
}

}  // namespace afin
