#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "afin/afin_network.hpp"
#include "afin/task_simulator.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace afin {

struct TrainConfig {
  int steps = 5000;
  int micro_batch = 8;       // B, tasks per micro-batch
  int accumulation = 2;      // K, micro-batches per optimizer step
  double peak_lr = 2e-4;
  double weight_decay = 1e-2;
  double ema_decay = 0.999;
  double warmup_frac = 0.01;  // linear warmup before the cosine decay
  uint64_t seed = 0;
  DecoderKind decoder = DecoderKind::kGaussian;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int log_every = 25;

  void validate() const {
    auto require = [](bool ok, const char* msg) {
      if (!ok) throw std::invalid_argument(std::string("TrainConfig: ") + msg);
    };
    require(steps >= 0, "steps must be non-negative");
    require(micro_batch >= 1 && accumulation >= 1, "B and K must be >= 1");
    require(peak_lr > 0.0, "peak_lr must be positive");
    require(ema_decay >= 0.0 && ema_decay < 1.0, "ema_decay outside [0,1)");
    require(weight_decay >= 0.0, "weight_decay must be non-negative");
  }
};

// Per-task log density term of the objective: d^{-1} log q_phi(z).
inline Value task_log_density(const AfinNetwork& net, ForwardCtx& ctx, const TaskInstance& task,
                              DecoderKind decoder) {
  if (!task.latent.has_value())
    throw std::invalid_argument("task_log_density: task carries no ground-truth latent");
  AfinForward fwd = net.forward_values(ctx, task, decoder == DecoderKind::kFlow);
  Tensor z = Tensor::column(*task.latent);
  Value logq;
  if (decoder == DecoderKind::kGaussian) {
    logq = op_gaussian_logpdf(fwd.mu, fwd.lambda, z);
  } else {
    logq = flow_log_prob_value(ctx, net, fwd, z);
  }
  return op_scale(logq, 1.0 / task.d);
}

// Mean negative per-dimension log density over the batch, no gradients.
inline double batch_loss(const AfinNetwork& net, const std::vector<TaskInstance>& tasks,
                         DecoderKind decoder) {
  if (tasks.empty()) throw std::invalid_argument("batch_loss: empty batch");
  double total = 0.0;
  for (const TaskInstance& task : tasks) {
    ForwardCtx ctx(net.store(), nullptr);
    total += -task_log_density(net, ctx, task, decoder).val()[0];
  }
  return total / double(tasks.size());
}

// Accumulates d(mean loss)/dw into the store's gradient slots, scaled by
// `weight` (1/K for micro-batch accumulation). Per-task tapes may be built in
// parallel; the reduction into the store runs in task order, so gradients are
// deterministic under any thread schedule.
inline double accumulate_batch_gradients(AfinNetwork& net, const std::vector<TaskInstance>& tasks,
                                         DecoderKind decoder, double weight = 1.0) {
  int n = int(tasks.size());
  if (n == 0) throw std::invalid_argument("accumulate_batch_gradients: empty batch");
  std::vector<std::unique_ptr<Tape>> tapes{size_t(n)};
  std::vector<Value> losses{size_t(n)};
  std::vector<std::string> errors{size_t(n)};
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
  for (int i = 0; i < n; ++i) {
    try {
      tapes[size_t(i)] = std::make_unique<Tape>();
      ForwardCtx ctx(net.store(), tapes[size_t(i)].get());
      losses[size_t(i)] = op_scale(task_log_density(net, ctx, tasks[size_t(i)], decoder), -1.0);
    } catch (const std::exception& e) {
      errors[size_t(i)] = e.what();
    }
  }
  for (int i = 0; i < n; ++i)
    if (!errors[size_t(i)].empty())
      throw std::runtime_error("task " + std::to_string(i) + ": " + errors[size_t(i)]);
  double total = 0.0;
  double scale = weight / double(n);
  for (int i = 0; i < n; ++i) {
    total += losses[size_t(i)].val()[0];
    tapes[size_t(i)]->backward(losses[size_t(i)], scale);
    tapes[size_t(i)]->for_each_param_grad([&](int pid, const Tensor& g) {
      Tensor& slot = net.store().grad(pid);
      for (size_t j = 0; j < g.size(); ++j) slot[j] += g[j];
    });
  }
  return total / double(n);
}

// ---------------------------------------------------------------------------
// AdamW with linear warmup + cosine decay and EMA shadow weights.
// ---------------------------------------------------------------------------

inline double lr_at_step(const TrainConfig& cfg, int step) {
  int warmup = int(std::ceil(cfg.warmup_frac * cfg.steps));
  if (warmup > 0 && step < warmup) return cfg.peak_lr * double(step + 1) / double(warmup);
  if (cfg.steps <= warmup) return cfg.peak_lr;
  double progress = double(step - warmup) / double(cfg.steps - warmup);
  return cfg.peak_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

class Trainer {
 public:
  Trainer(AfinNetwork& net, TrainConfig cfg) : net_(net), cfg_(cfg) {
    cfg_.validate();
    ParameterStore& store = net_.store();
    for (int i = 0; i < store.count(); ++i) {
      m_.emplace_back(store.value(i).rows(), store.value(i).cols());
      v_.emplace_back(store.value(i).rows(), store.value(i).cols());
      ema_.push_back(store.value(i));
    }
  }

  int step() const { return step_; }
  const TrainConfig& config() const { return cfg_; }

  // One optimizer step on externally supplied micro-batches.
  double apply_step(const std::vector<std::vector<TaskInstance>>& micro_batches) {
    ParameterStore& store = net_.store();
    store.zero_grads();
    double loss = 0.0;
    for (const auto& batch : micro_batches)
      loss += accumulate_batch_gradients(net_, batch, cfg_.decoder,
                                         1.0 / double(micro_batches.size()));
    loss /= double(micro_batches.size());
    if (!std::isfinite(loss)) throw std::runtime_error("non-finite loss");
    double lr = lr_at_step(cfg_, step_);
    ++step_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, step_);
    double bc2 = 1.0 - std::pow(cfg_.beta2, step_);
    for (int i = 0; i < store.count(); ++i) {
      Tensor& w = store.value(i);
      const Tensor& g = store.grad(i);
      Tensor& m = m_[size_t(i)];
      Tensor& v = v_[size_t(i)];
      Tensor& e = ema_[size_t(i)];
      for (size_t j = 0; j < w.size(); ++j) {
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
        double mhat = m[j] / bc1;
        double vhat = v[j] / bc2;
        w[j] -= lr * (mhat / (std::sqrt(vhat) + cfg_.adam_eps) + cfg_.weight_decay * w[j]);
        e[j] = cfg_.ema_decay * e[j] + (1.0 - cfg_.ema_decay) * w[j];
      }
    }
    last_lr_ = lr;
    return loss;
  }

  double last_lr() const { return last_lr_; }
  const std::vector<Tensor>& ema_weights() const { return ema_; }

  void copy_ema_into(AfinNetwork& target) const {
    ParameterStore& store = target.store();
    if (store.count() != int(ema_.size()))
      throw std::invalid_argument("copy_ema_into: registry mismatch");
    for (int i = 0; i < store.count(); ++i) store.value(i) = ema_[size_t(i)];
  }

  // Full state container: model, EMA shadow, Adam moments, step counter.
  void save_state(const std::string& path) const {
    NamedTensors out = net_.named_tensors("model/");
    const ParameterStore& store = net_.store();
    for (int i = 0; i < store.count(); ++i) {
      out.emplace_back("ema/" + store.name(i), ema_[size_t(i)]);
      out.emplace_back("opt_m/" + store.name(i), m_[size_t(i)]);
      out.emplace_back("opt_v/" + store.name(i), v_[size_t(i)]);
    }
    out.emplace_back("meta/step", Tensor::scalar(double(step_)));
    save_tensor_container(path, out);
  }

  void load_state(const std::string& path) {
    NamedTensors in = load_tensor_container(path);
    net_.load_named(in, "model/");
    ParameterStore& store = net_.store();
    size_t found = 0;
    for (auto& [name, t] : in) {
      auto match = [&](const std::string& prefix, std::vector<Tensor>& slot) {
        if (name.rfind(prefix, 0) != 0) return false;
        int id = store.find(name.substr(prefix.size()));
        slot[size_t(id)] = t;
        ++found;
        return true;
      };
      if (match("ema/", ema_) || match("opt_m/", m_) || match("opt_v/", v_)) continue;
      if (name == "meta/step") step_ = int(std::lround(t[0]));
    }
    if (found != 3 * size_t(store.count()))
      throw std::runtime_error("load_state: incomplete optimizer state");
  }

 private:
  AfinNetwork& net_;
  TrainConfig cfg_;
  std::vector<Tensor> m_, v_, ema_;
  int step_ = 0;
  double last_lr_ = 0.0;
};

struct TrainResult {
  std::vector<double> loss_history;
  double wallclock_s = 0.0;
};

// Full training loop; the metrics log is CSV (step, loss, lr, wallclock_s).
// A non-finite loss aborts after dumping the offending batch as JSON lines.
// `stop_at_step` pauses the run early without shortening the schedule
// horizon, so a paused-and-resumed run reproduces an uninterrupted one
// bit-for-bit.
inline TrainResult train_loop(Trainer& trainer, const SimulatorConfig& sim_cfg,
                              const std::string& metrics_csv_path = "",
                              const std::string& nan_dump_path = "",
                              const std::function<void(int, double)>& on_step = nullptr,
                              int stop_at_step = -1) {
  const TrainConfig& cfg = trainer.config();
  sim_cfg.validate();
  TrainResult result;
  std::ofstream metrics;
  if (!metrics_csv_path.empty()) {
    metrics.open(metrics_csv_path);
    if (!metrics) throw std::runtime_error("train_loop: cannot open " + metrics_csv_path);
    metrics << "step,loss,lr,wallclock_s\n";
  }
  int last_step = stop_at_step < 0 ? cfg.steps : std::min(cfg.steps, stop_at_step);
  auto t0 = std::chrono::steady_clock::now();
  while (trainer.step() < last_step) {
    int step = trainer.step();
    std::vector<std::vector<TaskInstance>> micro_batches;
    micro_batches.reserve(size_t(cfg.accumulation));
    for (int k = 0; k < cfg.accumulation; ++k)
      micro_batches.push_back(simulate_micro_batch(sim_cfg, cfg.seed, uint64_t(step), uint64_t(k),
                                                   cfg.micro_batch));
    double loss;
    try {
      loss = trainer.apply_step(micro_batches);
    } catch (const std::runtime_error& e) {
      if (!nan_dump_path.empty()) {
        std::ofstream dump(nan_dump_path);
        for (const auto& batch : micro_batches)
          for (const TaskInstance& t : batch) dump << task_to_json(t).dump() << "\n";
      }
      throw std::runtime_error(std::string("train_loop aborted at step ") +
                               std::to_string(step) + ": " + e.what() +
                               (nan_dump_path.empty() ? "" : " (batch dumped to " + nan_dump_path + ")"));
    }
    result.loss_history.push_back(loss);
    double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (metrics.is_open() && (step % cfg.log_every == 0 || step + 1 == cfg.steps))
      metrics << step << "," << loss << "," << trainer.last_lr() << "," << wall << "\n";
    if (on_step) on_step(step, loss);
  }
  result.wallclock_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checker
// ---------------------------------------------------------------------------

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_name;
  size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Central differences against the analytic gradients of the mean batch loss.
// The denominator floor keeps the ratio meaningful where both values sit at
// finite-difference noise level.
inline GradCheckResult finite_difference_check(AfinNetwork& net,
                                               const std::vector<TaskInstance>& tasks,
                                               DecoderKind decoder, int n_probes, RngStream& rng,
                                               double h = 1e-5, bool corrupt = false) {
  ParameterStore& store = net.store();
  store.zero_grads();
  accumulate_batch_gradients(net, tasks, decoder);
  if (corrupt) store.grad(0)[0] += 1e-2;
  GradCheckResult result;
  for (int p = 0; p < n_probes; ++p) {
    int id = rng.uniform_int(0, store.count() - 1);
    size_t idx = size_t(rng.uniform_int(0, int(store.value(id).size()) - 1));
    if (corrupt && p == 0) {
      // the negative-control hook perturbs the first entry; probe it first
      id = 0;
      idx = 0;
    }
    double saved = store.value(id)[idx];
    store.value(id)[idx] = saved + h;
    double up = batch_loss(net, tasks, decoder);
    store.value(id)[idx] = saved - h;
    double down = batch_loss(net, tasks, decoder);
    store.value(id)[idx] = saved;
    double numeric = (up - down) / (2.0 * h);
    double analytic = store.grad(id)[idx];
    double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-6});
    double rel = std::fabs(analytic - numeric) / denom;
    if (rel > result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_name = store.name(id);
      result.worst_index = idx;
      result.analytic = analytic;
      result.numeric = numeric;
    }
  }
  return result;
}

}  // namespace afin
