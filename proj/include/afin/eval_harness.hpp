#pragma once

#include <chrono>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "afin/inference_eval.hpp"
#include "afin/run_config.hpp"

namespace afin {

struct EvalRow {
  int task_id = 0;
  std::string method;
  int budget = 0;
  PosteriorMetrics metrics;
  double wallclock_s = 0.0;
  bool skipped = false;
  std::string note;
};

struct TaskReference {
  Moments moments;
  Tensor samples;
  bool from_oracle = false;
};

// Conjugate tasks use the closed-form oracle (exact moments plus exact
// posterior draws); everything else falls back to a long adaptive-RWM chain.
inline TaskReference build_reference(const TaskInstance& task, const EvalConfig& cfg,
                                     RngStream& rng) {
  TaskReference ref;
  if (is_conjugate_task(task)) {
    GaussianDistribution oracle = conjugate_posterior_oracle(task);
    ref.moments.mean = oracle.mean;
    ref.moments.cov = oracle.covariance();
    ref.samples = Tensor(cfg.ref_samples, task.d);
    for (int s = 0; s < cfg.ref_samples; ++s) {
      auto z = oracle.sample(rng);
      for (int j = 0; j < task.d; ++j) ref.samples(s, j) = z[size_t(j)];
    }
    ref.from_oracle = true;
    return ref;
  }
  McmcResult chain = mcmc_reference(task, cfg.ref_iterations, cfg.ref_warmup, rng);
  ref.moments = sample_moments(chain.samples);
  int keep = std::min(cfg.ref_samples, chain.samples.rows());
  int stride = chain.samples.rows() / keep;
  ref.samples = Tensor(keep, task.d);
  for (int s = 0; s < keep; ++s)
    for (int j = 0; j < task.d; ++j) ref.samples(s, j) = chain.samples(s * stride, j);
  return ref;
}

inline Tensor subsample_rows(const Tensor& x, int count, RngStream& rng) {
  if (x.rows() <= count) return x;
  std::vector<int> idx(size_t(x.rows()), 0);
  for (int i = 0; i < x.rows(); ++i) idx[size_t(i)] = i;
  rng.shuffle(idx);
  Tensor out(count, x.cols());
  for (int s = 0; s < count; ++s)
    for (int j = 0; j < x.cols(); ++j) out(s, j) = x(idx[size_t(s)], j);
  return out;
}

// One (task, method, budget) metrics row. Wall clock covers proposal
// construction and sampling; metric computation is excluded.
inline EvalRow evaluate_method(const AfinNetwork& net, DecoderKind decoder,
                               const TaskInstance& task, const TaskReference& ref,
                               const std::string& method, int budget, const EvalConfig& cfg,
                               uint64_t seed, int task_id) {
  EvalRow row;
  row.task_id = task_id;
  row.method = method;
  row.budget = budget;
  LogDensityFn log_target = [&task](const std::vector<double>& z) {
    return log_unnormalized_posterior(task, z);
  };
  uint64_t method_code = 0;
  for (char c : method) method_code = method_code * 131 + uint64_t(static_cast<unsigned char>(c));
  RngStream rng =
      RngStream::derive(seed, {0xE7A1ull, uint64_t(task_id), method_code, uint64_t(budget)});
  RngStream dir_rng = RngStream::derive(seed, {0xD12ull, uint64_t(task_id)});
  Tensor directions = random_directions(cfg.sw2_projections, task.d, dir_rng);
  auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&]() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };

  if (method == "oracle") {
    if (!ref.from_oracle) {
      row.skipped = true;
      row.note = "non-conjugate task; oracle skipped";
      return row;
    }
    row.wallclock_s = elapsed();
    row.metrics.m1 = metric_m1(ref.moments.mean, ref.moments.mean);
    row.metrics.m2 = metric_m2(ref.moments.cov, ref.moments.cov);
    row.metrics.sw2 = sliced_w2_directions(ref.samples, nullptr, ref.samples, nullptr, directions);
    return row;
  }

  if (method == "mcmc") {
    int warmup = std::max(1, int(cfg.mcmc_warmup_frac * budget));
    McmcResult chain = mcmc_reference(task, budget, warmup, rng);
    row.wallclock_s = elapsed();
    Moments m = sample_moments(chain.samples);
    row.metrics.m1 = metric_m1(m.mean, ref.moments.mean);
    row.metrics.m2 = metric_m2(m.cov, ref.moments.cov);
    int s_common = std::min(chain.samples.rows(), ref.samples.rows());
    Tensor a = subsample_rows(chain.samples, s_common, rng);
    Tensor b = subsample_rows(ref.samples, s_common, rng);
    row.metrics.sw2 = sliced_w2_directions(a, nullptr, b, nullptr, directions);
    if (chain.warning) row.note = "acceptance rate outside [0.05, 0.95]";
    return row;
  }

  // afin single-shot and afin+snis share the forward pass
  Proposal proposal;
  if (decoder == DecoderKind::kFlow) {
    proposal = flow_proposal(afin_forward_flow(net, task));
  } else {
    proposal = gaussian_proposal(net.forward_gaussian(task));
  }

  if (method == "afin") {
    Tensor draws(budget, task.d);
    for (int s = 0; s < budget; ++s) {
      auto z = proposal.sample(rng);
      for (int j = 0; j < task.d; ++j) draws(s, j) = z[size_t(j)];
    }
    row.wallclock_s = elapsed();
    Moments m = sample_moments(draws);
    row.metrics.m1 = metric_m1(m.mean, ref.moments.mean);
    row.metrics.m2 = metric_m2(m.cov, ref.moments.cov);
    int s_common = std::min(draws.rows(), ref.samples.rows());
    Tensor a = subsample_rows(draws, s_common, rng);
    Tensor b = subsample_rows(ref.samples, s_common, rng);
    row.metrics.sw2 = sliced_w2_directions(a, nullptr, b, nullptr, directions);
    return row;
  }

  if (method == "afin+snis") {
    WeightedSampleSet ws = snis(proposal, log_target, budget, rng);
    row.wallclock_s = elapsed();
    Moments m = weighted_moments(ws);
    row.metrics.m1 = metric_m1(m.mean, ref.moments.mean);
    row.metrics.m2 = metric_m2(m.cov, ref.moments.cov);
    row.metrics.sw2 =
        sliced_w2_directions(ws.samples, &ws.weights, ref.samples, nullptr, directions);
    if (ws.count() >= 25) row.metrics.pareto_k = pareto_k(ws.log_raw);
    WeightDiagnostics diag = weight_diagnostics(ws, log_target, ref.samples);
    row.metrics.max_weight = diag.max_weight;
    row.metrics.entropy_ratio = diag.entropy_ratio;
    row.metrics.energy_gap = diag.energy_gap;
    return row;
  }

  throw std::invalid_argument("evaluate_method: unknown method " + method);
}

inline std::vector<EvalRow> evaluate_tasks(const AfinNetwork& net, DecoderKind decoder,
                                           const std::vector<TaskInstance>& tasks,
                                           const std::vector<std::string>& methods,
                                           const std::vector<int>& budgets, const EvalConfig& cfg,
                                           uint64_t seed) {
  std::vector<EvalRow> rows;
  for (int t = 0; t < int(tasks.size()); ++t) {
    RngStream ref_rng = RngStream::derive(seed, {0x8EFull, uint64_t(t)});
    TaskReference ref = build_reference(tasks[size_t(t)], cfg, ref_rng);
    for (const std::string& method : methods)
      for (int budget : budgets)
        rows.push_back(
            evaluate_method(net, decoder, tasks[size_t(t)], ref, method, budget, cfg, seed, t));
  }
  return rows;
}

inline nlohmann::json eval_row_to_json(const EvalRow& row) {
  auto opt = [](double v) {
    return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v);
  };
  nlohmann::json j;
  j["task_id"] = row.task_id;
  j["method"] = row.method;
  j["budget"] = row.budget;
  if (row.skipped) {
    j["skipped"] = true;
    j["note"] = row.note;
    return j;
  }
  j["m1"] = row.metrics.m1;
  j["m2"] = row.metrics.m2;
  j["sw2"] = row.metrics.sw2;
  j["pareto_k"] = std::isinf(row.metrics.pareto_k)
                      ? nlohmann::json("-inf")
                      : opt(row.metrics.pareto_k);
  j["max_weight"] = opt(row.metrics.max_weight);
  j["entropy_ratio"] = opt(row.metrics.entropy_ratio);
  j["energy_gap"] = opt(row.metrics.energy_gap);
  j["wallclock_s"] = row.wallclock_s;
  if (!row.note.empty()) j["note"] = row.note;
  return j;
}

}  // namespace afin
