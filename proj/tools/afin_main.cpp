// Command-line entry point: simulate | train | eval | gradcheck | oracle-check.
// Flag precedence: flags > config file > built-in defaults.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "afin/eval_harness.hpp"
#include "afin/quadrature.hpp"
#include "afin/run_config.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace fs = std::filesystem;
using namespace afin;

namespace {

struct CommonFlags {
  std::string config_path;
  std::string profile;
  int64_t seed = -1;
  int threads = 0;
};

RunConfig resolve_config(const CommonFlags& flags) {
  RunConfig cfg;
  if (!flags.config_path.empty()) {
    cfg = load_run_config(flags.config_path);
  } else if (!flags.profile.empty()) {
    cfg.model = profile_config(flags.profile);
  }
  if (!flags.profile.empty() && !flags.config_path.empty()) cfg.model = profile_config(flags.profile);
  if (flags.seed >= 0) cfg.seed = uint64_t(flags.seed);
  if (flags.threads > 0) cfg.threads = flags.threads;
  cfg.train.seed = cfg.seed;
  cfg.train.decoder = cfg.decoder;
#ifdef _OPENMP
  if (cfg.threads > 0) omp_set_num_threads(cfg.threads);
#endif
  return cfg;
}

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config_path, "JSON run configuration");
  cmd->add_option("--profile", flags.profile, "built-in model profile (paper-default | toy)");
  cmd->add_option("--seed", flags.seed, "master seed (overrides config)");
  cmd->add_option("--threads", flags.threads, "thread cap (overrides config)");
}

void write_meta(const std::string& path, const RunConfig& cfg, const nlohmann::json& extra) {
  nlohmann::json meta = extra;
  meta["schema_version"] = kSchemaVersion;
  meta["seed"] = cfg.seed;
  std::ofstream os(path);
  os << meta.dump(2) << "\n";
}

std::vector<TaskInstance> read_tasks_jsonl(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open task file: " + path);
  std::vector<TaskInstance> tasks;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    tasks.push_back(task_from_json(nlohmann::json::parse(line)));
  }
  return tasks;
}

int cmd_simulate(const RunConfig& cfg, int count, const std::string& out_path) {
  std::ofstream os(out_path);
  if (!os) throw std::runtime_error("cannot open output file: " + out_path);
  std::map<int, int> d_hist, n_hist;
  std::map<std::string, int> type_hist;
  for (int i = 0; i < count; ++i) {
    RngStream rng = RngStream::derive(cfg.seed, {0x51Cull, uint64_t(i)});
    TaskInstance task = simulate_task(cfg.simulator, rng);
    os << task_to_json(task).dump() << "\n";
    d_hist[task.d] += 1;
    n_hist[task.num_likelihoods()] += 1;
    type_hist[factor_type_name(task.prior.factor_type)] += 1;
    for (const FactorSpec& f : task.likelihoods) type_hist[factor_type_name(f.factor_type)] += 1;
  }
  write_meta(out_path + ".meta.json", cfg, {{"count", count}, {"kind", "tasks"}});
  std::cout << "wrote " << count << " tasks to " << out_path << " (seed " << cfg.seed << ")\n";
  std::cout << "d histogram:";
  for (auto& [d, c] : d_hist) std::cout << " " << d << ":" << c;
  std::cout << "\nN histogram:";
  for (auto& [n, c] : n_hist) std::cout << " " << n << ":" << c;
  std::cout << "\nfactor types:";
  for (auto& [t, c] : type_hist) std::cout << " " << t << ":" << c;
  std::cout << "\n";
  return 0;
}

int cmd_train(RunConfig cfg, const std::string& resume_path, int run_steps) {
  fs::create_directories(cfg.out_dir);
  AfinNetwork net(cfg.model, cfg.seed);
  Trainer trainer(net, cfg.train);
  if (!resume_path.empty()) {
    trainer.load_state(resume_path);
    std::cout << "resumed from " << resume_path << " at step " << trainer.step() << "\n";
  }
  std::string metrics_path = cfg.out_dir + "/metrics.csv";
  std::string ckpt_path = cfg.out_dir + "/checkpoint.afin";
  write_meta(cfg.out_dir + "/run_config.json", cfg, run_config_to_json(cfg));
  TrainResult result;
  int stop_at = run_steps >= 0 ? trainer.step() + run_steps : -1;
  if (trainer.step() < cfg.train.steps) {
    result = train_loop(
        trainer, cfg.simulator, metrics_path, cfg.out_dir + "/nan_batch.jsonl",
        [&](int step, double loss) {
          if (step % cfg.train.log_every == 0)
            std::cout << "step " << step << " loss " << loss << "\n";
        },
        stop_at);
  }
  trainer.save_state(ckpt_path);
  std::cout << "checkpoint (live + EMA + optimizer state): " << ckpt_path << "\n";
  if (!result.loss_history.empty())
    std::cout << "final loss " << result.loss_history.back() << " after "
              << result.loss_history.size() << " steps, " << result.wallclock_s << " s\n";
  return 0;
}

int cmd_eval(RunConfig cfg, const std::string& checkpoint, const std::string& tasks_path,
             const std::vector<std::string>& methods, std::vector<int> budgets,
             bool use_ema) {
  fs::create_directories(cfg.out_dir);
  AfinNetwork net(cfg.model, cfg.seed);
  NamedTensors state = load_tensor_container(checkpoint);
  net.load_named(state, use_ema ? "ema/" : "model/");
  std::vector<TaskInstance> tasks = read_tasks_jsonl(tasks_path);
  if (budgets.empty()) budgets = cfg.eval.budgets;
  std::vector<EvalRow> rows =
      evaluate_tasks(net, cfg.decoder, tasks, methods, budgets, cfg.eval, cfg.seed);

  nlohmann::json report;
  report["schema_version"] = kSchemaVersion;
  report["seed"] = cfg.seed;
  report["checkpoint"] = checkpoint;
  report["rows"] = nlohmann::json::array();
  for (const EvalRow& r : rows) report["rows"].push_back(eval_row_to_json(r));
  std::ofstream os(cfg.out_dir + "/report.json");
  os << report.dump(2) << "\n";

  // aggregate CSV: mean metrics per (method, budget) for accuracy-vs-time curves
  std::map<std::pair<std::string, int>, std::vector<const EvalRow*>> groups;
  for (const EvalRow& r : rows)
    if (!r.skipped) groups[{r.method, r.budget}].push_back(&r);
  std::ofstream csv(cfg.out_dir + "/aggregate.csv");
  csv << "# schema_version=" << kSchemaVersion << " seed=" << cfg.seed << "\n";
  csv << "method,budget,tasks,m1,m2,sw2,wallclock_s\n";
  for (auto& [key, group] : groups) {
    double m1 = 0, m2 = 0, sw2 = 0, wall = 0;
    for (const EvalRow* r : group) {
      m1 += r->metrics.m1;
      m2 += r->metrics.m2;
      sw2 += r->metrics.sw2;
      wall += r->wallclock_s;
    }
    double n = double(group.size());
    csv << key.first << "," << key.second << "," << group.size() << "," << m1 / n << ","
        << m2 / n << "," << sw2 / n << "," << wall / n << "\n";
  }
  int skips = 0;
  for (const EvalRow& r : rows) skips += r.skipped ? 1 : 0;
  std::cout << "evaluated " << tasks.size() << " tasks x " << methods.size() << " methods x "
            << budgets.size() << " budgets: " << rows.size() << " rows (" << skips
            << " skipped), report in " << cfg.out_dir << "\n";
  return 0;
}

int cmd_gradcheck(RunConfig cfg, int probes, bool corrupt) {
  double threshold = 1e-4;
  bool ok = true;
  for (DecoderKind decoder : {DecoderKind::kGaussian, DecoderKind::kFlow}) {
    AfinNetwork net(cfg.model, cfg.seed);
    SimulatorConfig sim = cfg.simulator;
    sim.d_max = std::min(sim.d_max, 3);
    sim.n_max = std::min(sim.n_max, 6);
    RngStream task_rng = RngStream::derive(cfg.seed, {0x94Dull});
    std::vector<TaskInstance> tasks;
    for (int i = 0; i < 3; ++i) tasks.push_back(simulate_task(sim, task_rng));
    RngStream probe_rng = RngStream::derive(cfg.seed, {0x94Eull});
    GradCheckResult r = finite_difference_check(net, tasks, decoder, probes, probe_rng, 1e-5,
                                                corrupt);
    std::printf("gradcheck[%s]: max rel error %.3e (worst %s[%zu]: analytic %.6e fd %.6e)\n",
                decoder_kind_name(decoder).c_str(), r.max_rel_error, r.worst_name.c_str(),
                r.worst_index, r.analytic, r.numeric);
    ok = ok && r.max_rel_error < threshold;
  }
  std::printf("gradcheck: %s\n", ok ? "PASS" : "FAIL");
  return ok ? 0 : 1;
}

int cmd_oracle_check(RunConfig cfg, int n_tasks) {
  double tol = 1e-6;
  SimulatorConfig sim = cfg.simulator;
  sim.allowed_priors = {FactorType::kDiagGaussian, FactorType::kFullrankGaussian};
  sim.allowed_likelihoods = {FactorType::kLinGaussian};
  sim.n_min = 1;
  sim.n_max = std::min(sim.n_max, 8);
  double worst = 0.0;
  int worst_task = -1;
  for (int i = 0; i < n_tasks; ++i) {
    sim.d_min = sim.d_max = 1 + (i % 2);
    RngStream rng = RngStream::derive(cfg.seed, {0x0'7Aull, uint64_t(i)});
    TaskInstance task = simulate_task(sim, rng);
    GaussianDistribution oracle = conjugate_posterior_oracle(task);
    quadrature::QuadMoments quad = quadrature::posterior_moments(task);
    Tensor oracle_cov = oracle.covariance();
    double err = 0.0;
    for (int j = 0; j < task.d; ++j)
      err = std::max(err, std::fabs(oracle.mean[size_t(j)] - quad.mean[size_t(j)]));
    for (size_t k = 0; k < oracle_cov.size(); ++k)
      err = std::max(err, std::fabs(oracle_cov[k] - quad.cov[k]));
    if (err > worst) {
      worst = err;
      worst_task = i;
    }
  }
  std::printf("oracle-check: %d tasks, worst moment disagreement %.3e (task %d), tolerance %.0e\n",
              n_tasks, worst, worst_task, tol);
  bool ok = worst < tol;
  std::printf("oracle-check: %s\n", ok ? "PASS" : "FAIL");
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Amortized factor inference networks: simulator, training, and evaluation"};
  app.require_subcommand(1);

  CommonFlags sim_flags, train_flags, eval_flags, grad_flags, oracle_flags;

  auto* sim = app.add_subcommand("simulate", "write simulated tasks as JSON lines");
  add_common(sim, sim_flags);
  int sim_count = 100;
  std::string sim_out = "tasks.jsonl";
  sim->add_option("--count", sim_count, "number of tasks");
  sim->add_option("--out", sim_out, "output path");

  auto* train = app.add_subcommand("train", "train a network on simulated tasks");
  add_common(train, train_flags);
  int train_steps = -1, train_run_steps = -1;
  std::string train_out, train_resume, train_decoder;
  train->add_option("--steps", train_steps, "schedule horizon in optimizer steps");
  train->add_option("--run-steps", train_run_steps,
                    "run at most this many steps now, keeping the schedule horizon");
  train->add_option("--out-dir", train_out, "output directory (overrides config)");
  train->add_option("--resume", train_resume, "checkpoint to resume from");
  train->add_option("--decoder", train_decoder, "decoder variant: gaussian | flow");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a task file");
  add_common(eval, eval_flags);
  std::string eval_ckpt, eval_tasks, eval_methods = "afin,afin+snis,mcmc,oracle", eval_out;
  std::string eval_budgets;
  bool eval_ema = false;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--tasks", eval_tasks, "JSON-lines task file")->required();
  eval->add_option("--methods", eval_methods, "comma-separated method list");
  eval->add_option("--budgets", eval_budgets, "comma-separated budget list");
  eval->add_option("--out-dir", eval_out, "output directory (overrides config)");
  eval->add_flag("--use-ema", eval_ema, "evaluate the EMA weights");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient validation");
  add_common(grad, grad_flags);
  int grad_probes = 200;
  bool grad_corrupt = false;
  grad->add_option("--probes", grad_probes, "random parameters to probe per decoder variant");
  grad->add_flag("--corrupt-gradient", grad_corrupt,
                 "negative-control hook: perturb one analytic gradient");

  auto* oracle = app.add_subcommand("oracle-check",
                                    "closed-form posterior vs quadrature cross-validation");
  add_common(oracle, oracle_flags);
  int oracle_tasks = 100;
  oracle->add_option("--tasks", oracle_tasks, "number of random conjugate tasks");

  CLI11_PARSE(app, argc, argv);

  try {
    if (sim->parsed()) return cmd_simulate(resolve_config(sim_flags), sim_count, sim_out);
    if (train->parsed()) {
      RunConfig cfg = resolve_config(train_flags);
      if (train_steps >= 0) cfg.train.steps = train_steps;
      if (!train_out.empty()) cfg.out_dir = train_out;
      if (!train_decoder.empty()) {
        cfg.decoder = decoder_kind_from_name(train_decoder);
        cfg.train.decoder = cfg.decoder;
      }
      return cmd_train(cfg, train_resume, train_run_steps);
    }
    if (eval->parsed()) {
      RunConfig cfg = resolve_config(eval_flags);
      if (!eval_out.empty()) cfg.out_dir = eval_out;
      std::vector<std::string> methods;
      std::stringstream ms(eval_methods);
      std::string item;
      while (std::getline(ms, item, ',')) methods.push_back(item);
      std::vector<int> budgets;
      if (!eval_budgets.empty()) {
        std::stringstream bs(eval_budgets);
        while (std::getline(bs, item, ',')) budgets.push_back(std::stoi(item));
      }
      return cmd_eval(cfg, eval_ckpt, eval_tasks, methods, budgets, eval_ema);
    }
    if (grad->parsed()) {
      RunConfig cfg = resolve_config(grad_flags);
      if (grad_flags.config_path.empty() && grad_flags.profile.empty())
        cfg.model = AfinConfig::toy();
      return cmd_gradcheck(cfg, grad_probes, grad_corrupt);
    }
    if (oracle->parsed()) return cmd_oracle_check(resolve_config(oracle_flags), oracle_tasks);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
