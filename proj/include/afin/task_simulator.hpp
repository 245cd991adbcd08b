#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "afin/factor_model.hpp"
#include "afin/rng.hpp"

namespace afin {

struct SimulatorConfig {
  int d_min = 1;
  int d_max = 16;
  int n_min = 1;
  int n_max = 256;
  double p_hard = 0.6;
  double alpha_d = 1.0;
  double alpha_n = 0.75;
  double homogeneous_prob = 0.5;
  double dirichlet_conc = 0.5;
  // families: iid, diag_scale, correlated, student_t
  std::vector<double> design_family_probs = {0.7, 0.1, 0.1, 0.1};
  double base_scale_coeff = 0.9;
  // Restricting these lists yields reduced task families (e.g. the
  // conjugate-only profile used for toy training).
  std::vector<FactorType> allowed_priors = prior_types();
  std::vector<FactorType> allowed_likelihoods = likelihood_types();

  // sampled-parameter ranges; the spectra and noise ranges below are
  // documented constants of this simulator
  double design_spectrum_lo = 0.2;
  double design_spectrum_hi = 5.0;
  double design_student_nu = 4.0;
  double obs_log_scale_lo = -1.0;
  double obs_log_scale_hi = 0.0;

  void validate() const {
    auto require = [](bool ok, const char* msg) {
      if (!ok) throw std::invalid_argument(std::string("SimulatorConfig: ") + msg);
    };
    require(d_min >= 1 && d_min <= d_max, "d range invalid");
    require(n_min >= 1 && n_min <= n_max, "N range invalid");
    require(p_hard >= 0.0 && p_hard <= 1.0, "p_hard outside [0,1]");
    require(homogeneous_prob >= 0.0 && homogeneous_prob <= 1.0, "homogeneous_prob outside [0,1]");
    require(dirichlet_conc > 0.0, "dirichlet_conc must be positive");
    require(design_family_probs.size() == 4, "design_family_probs must have 4 entries");
    double s = 0.0;
    for (double p : design_family_probs) {
      require(p >= 0.0, "design family probability negative");
      s += p;
    }
    require(std::fabs(s - 1.0) <= 1e-12, "design_family_probs must sum to 1");
    require(!allowed_priors.empty() && !allowed_likelihoods.empty(), "empty type lists");
    for (FactorType t : allowed_priors) require(is_prior_type(t), "non-prior in allowed_priors");
    for (FactorType t : allowed_likelihoods)
      require(is_likelihood_type(t), "non-likelihood in allowed_likelihoods");
  }
};

struct BatchSpec {
  int tasks_per_micro_batch = 32;  // B
  int micro_batches_per_step = 4;  // K

  void validate() const {
    if (tasks_per_micro_batch < 1 || micro_batches_per_step < 1)
      throw std::invalid_argument("BatchSpec: B and K must be >= 1");
  }
};

// Stream purposes; keeping these distinct makes every (step, micro, task)
// sub-stream independent of evaluation order.
namespace stream_purpose {
constexpr uint64_t kSizes = 1;
constexpr uint64_t kTask = 2;
}  // namespace stream_purpose

// With probability p_hard, (d, N) follows
//   P(d, N) propto ((d - d_min + 1) / (d_max - d_min + 1))^alpha_d * (N_min / N)^alpha_N,
// biasing toward high-dimensional, data-poor tasks; otherwise uniform on the
// rectangle.
inline std::pair<int, int> sample_task_sizes(const SimulatorConfig& cfg, RngStream& rng) {
  cfg.validate();
  if (rng.uniform() < cfg.p_hard) {
    int nd = cfg.d_max - cfg.d_min + 1;
    std::vector<double> wd(nd);
    for (int i = 0; i < nd; ++i) wd[i] = std::pow(double(i + 1) / nd, cfg.alpha_d);
    int nn = cfg.n_max - cfg.n_min + 1;
    std::vector<double> wn(nn);
    for (int i = 0; i < nn; ++i) wn[i] = std::pow(double(cfg.n_min) / (cfg.n_min + i), cfg.alpha_n);
    int d = cfg.d_min + rng.categorical(wd);
    int n = cfg.n_min + rng.categorical(wn);
    return {d, n};
  }
  return {rng.uniform_int(cfg.d_min, cfg.d_max), rng.uniform_int(cfg.n_min, cfg.n_max)};
}

inline FactorSpec sample_prior_factor(int d, const SimulatorConfig& cfg, RngStream& rng) {
  FactorSpec f;
  f.factor_type = cfg.allowed_priors[size_t(rng.uniform_int(0, int(cfg.allowed_priors.size()) - 1))];
  f.theta.loc.resize(d);
  for (int i = 0; i < d; ++i) f.theta.loc[i] = 0.45 * rng.normal();
  switch (f.factor_type) {
    case FactorType::kDiagGaussian:
      f.theta.scale_vec.resize(d);
      for (int i = 0; i < d; ++i) f.theta.scale_vec[i] = std::exp(rng.uniform(-0.8, 0.0));
      break;
    case FactorType::kFullrankGaussian: {
      Tensor m = rng.normal_matrix(d, d, 0.3);
      Tensor lambda(d, d);
      for (int i = 0; i < d; ++i) {
        for (int j = 0; j < d; ++j) {
          double s = 0.0;
          for (int k = 0; k < d; ++k) s += m(i, k) * m(j, k);
          lambda(i, j) = s / d;
        }
        lambda(i, i) += 0.5;
      }
      f.theta.precision = std::move(lambda);
      break;
    }
    case FactorType::kDiagStudentT:
      f.theta.scale_vec.resize(d);
      for (int i = 0; i < d; ++i) f.theta.scale_vec[i] = std::exp(rng.uniform(-0.7, 0.0));
      f.theta.nu = rng.uniform(3.0, 8.0);
      break;
    case FactorType::kDiagLaplace:
      f.theta.scale_vec.resize(d);
      for (int i = 0; i < d; ++i) f.theta.scale_vec[i] = std::exp(rng.uniform(-1.0, -0.05));
      break;
    default:
      throw std::logic_error("sample_prior_factor: non-prior type in allowed_priors");
  }
  f.validate(d);
  return f;
}

inline FactorSpec sample_prior_factor(int d, RngStream& rng) {
  return sample_prior_factor(d, SimulatorConfig{}, rng);
}

// Homogeneous with probability homogeneous_prob; otherwise k distinct types
// (P(k) propto exp(-(k-2))), a Dirichlet-multinomial site allocation with at
// least one site per selected type, uniformly permuted.
inline std::vector<FactorType> sample_likelihood_types(int n, const SimulatorConfig& cfg,
                                                       RngStream& rng) {
  if (n < 1) throw std::invalid_argument("sample_likelihood_types: N must be >= 1");
  const auto& types = cfg.allowed_likelihoods;
  int m = int(types.size());
  int k_max = std::min(m, n);
  bool homogeneous = (k_max < 2) || rng.bernoulli(cfg.homogeneous_prob);
  if (homogeneous) {
    FactorType t = types[size_t(rng.uniform_int(0, m - 1))];
    return std::vector<FactorType>(size_t(n), t);
  }
  std::vector<double> kw(size_t(k_max - 1));
  for (int k = 2; k <= k_max; ++k) kw[size_t(k - 2)] = std::exp(-(k - 2));
  int k = 2 + rng.categorical(kw);
  // k distinct types, uniform without replacement
  std::vector<FactorType> pool = types;
  rng.shuffle(pool);
  pool.resize(size_t(k));
  std::vector<double> pi = rng.dirichlet(k, cfg.dirichlet_conc);
  std::vector<int> counts(size_t(k), 1);
  for (int i = 0; i < n - k; ++i) counts[size_t(rng.categorical(pi))] += 1;
  std::vector<FactorType> out;
  out.reserve(size_t(n));
  for (int j = 0; j < k; ++j)
    for (int c = 0; c < counts[size_t(j)]; ++c) out.push_back(pool[size_t(j)]);
  rng.shuffle(out);
  return out;
}

enum class DesignFamily { kIid, kDiagScale, kCorrelated, kStudentT };

// Rows scaled so that iid entries have standard deviation base_scale_coeff / sqrt(d),
// keeping the linear signal X z at O(1). Non-iid spectra are normalized to the
// same average variance.
inline Tensor sample_design_matrix(int n, int d, const SimulatorConfig& cfg, RngStream& rng) {
  double base = cfg.base_scale_coeff / std::sqrt(double(d));
  DesignFamily family = DesignFamily(rng.categorical(cfg.design_family_probs));
  Tensor x(n, d);
  auto normalized_spectrum = [&]() {
    std::vector<double> s(d);
    double total = 0.0;
    for (int j = 0; j < d; ++j) {
      s[size_t(j)] = rng.log_uniform(cfg.design_spectrum_lo, cfg.design_spectrum_hi);
      total += s[size_t(j)];
    }
    for (int j = 0; j < d; ++j) s[size_t(j)] *= d / total;
    return s;
  };
  switch (family) {
    case DesignFamily::kIid:
      for (size_t i = 0; i < x.size(); ++i) x[i] = base * rng.normal();
      return x;
    case DesignFamily::kDiagScale: {
      auto s = normalized_spectrum();
      for (int r = 0; r < n; ++r)
        for (int j = 0; j < d; ++j) x(r, j) = base * std::sqrt(s[size_t(j)]) * rng.normal();
      return x;
    }
    case DesignFamily::kCorrelated:
    case DesignFamily::kStudentT: {
      auto s = normalized_spectrum();
      Tensor q = rng.haar_orthogonal(d);
      for (int r = 0; r < n; ++r) {
        std::vector<double> g(d);
        for (int j = 0; j < d; ++j) g[size_t(j)] = std::sqrt(s[size_t(j)]) * rng.normal();
        double w = 1.0;
        if (family == DesignFamily::kStudentT)
          w = std::sqrt(cfg.design_student_nu / rng.chi_square(cfg.design_student_nu));
        for (int i = 0; i < d; ++i) {
          double v = 0.0;
          for (int j = 0; j < d; ++j) v += q(i, j) * g[size_t(j)];
          x(r, i) = base * w * v;
        }
      }
      return x;
    }
  }
  throw std::logic_error("sample_design_matrix: unreachable");
}

inline TaskInstance simulate_task_with_sizes(const SimulatorConfig& cfg, int d, int n,
                                             RngStream& rng) {
  TaskInstance task;
  task.d = d;
  task.prior = sample_prior_factor(d, cfg, rng);
  task.latent = sample_prior(task.prior, d, rng);
  std::vector<FactorType> types = sample_likelihood_types(n, cfg, rng);
  bool any_covariate = false;
  for (FactorType t : types) any_covariate = any_covariate || has_covariate(t);
  Tensor design;
  if (any_covariate) design = sample_design_matrix(n, d, cfg, rng);
  task.likelihoods.reserve(size_t(n));
  for (int i = 0; i < n; ++i) {
    FactorSpec f;
    f.factor_type = types[size_t(i)];
    if (has_covariate(f.factor_type)) {
      std::vector<double> row(d);
      for (int j = 0; j < d; ++j) row[size_t(j)] = design(i, j);
      f.covariate = std::move(row);
    }
    switch (f.factor_type) {
      case FactorType::kGaussian:
      case FactorType::kLinGaussian:
        f.theta.scale = std::exp(rng.uniform(cfg.obs_log_scale_lo, cfg.obs_log_scale_hi));
        break;
      case FactorType::kLinStudentT:
        f.theta.scale = std::exp(rng.uniform(cfg.obs_log_scale_lo, cfg.obs_log_scale_hi));
        f.theta.nu = rng.uniform(3.0, 8.0);
        break;
      case FactorType::kBinomialLogit:
        f.theta.trial_count = rng.uniform_int(2, 8);
        break;
      case FactorType::kBernoulliLogit:
        break;
      default:
        throw std::logic_error("simulate_task: non-likelihood type");
    }
    task.likelihoods.push_back(sample_observation(std::move(f), *task.latent, rng));
  }
  task.validate();
  return task;
}

inline TaskInstance simulate_task(const SimulatorConfig& cfg, RngStream& rng) {
  auto [d, n] = sample_task_sizes(cfg, rng);
  return simulate_task_with_sizes(cfg, d, n, rng);
}

// Tasks within a micro-batch share (d, N); every (step, micro, task) triple
// gets its own derived stream, so the batch content does not depend on
// evaluation order.
inline std::vector<TaskInstance> simulate_micro_batch(const SimulatorConfig& cfg, uint64_t seed,
                                                      uint64_t step, uint64_t micro, int b) {
  RngStream sizes_rng = RngStream::derive(seed, {step, micro, stream_purpose::kSizes});
  auto [d, n] = sample_task_sizes(cfg, sizes_rng);
  std::vector<TaskInstance> out;
  out.reserve(size_t(b));
  for (int t = 0; t < b; ++t) {
    RngStream rng = RngStream::derive(seed, {step, micro, stream_purpose::kTask, uint64_t(t)});
    out.push_back(simulate_task_with_sizes(cfg, d, n, rng));
  }
  return out;
}

inline nlohmann::json simulator_config_to_json(const SimulatorConfig& cfg) {
  nlohmann::json j;
  j["d_min"] = cfg.d_min;
  j["d_max"] = cfg.d_max;
  j["N_min"] = cfg.n_min;
  j["N_max"] = cfg.n_max;
  j["p_hard"] = cfg.p_hard;
  j["alpha_d"] = cfg.alpha_d;
  j["alpha_N"] = cfg.alpha_n;
  j["homogeneous_prob"] = cfg.homogeneous_prob;
  j["dirichlet_conc"] = cfg.dirichlet_conc;
  j["design_family_probs"] = cfg.design_family_probs;
  j["base_scale_coeff"] = cfg.base_scale_coeff;
  std::vector<std::string> priors, liks;
  for (FactorType t : cfg.allowed_priors) priors.push_back(factor_type_name(t));
  for (FactorType t : cfg.allowed_likelihoods) liks.push_back(factor_type_name(t));
  j["allowed_priors"] = priors;
  j["allowed_likelihoods"] = liks;
  return j;
}

inline SimulatorConfig simulator_config_from_json(const nlohmann::json& j) {
  SimulatorConfig cfg;
  if (j.contains("d_min")) cfg.d_min = j.at("d_min").get<int>();
  if (j.contains("d_max")) cfg.d_max = j.at("d_max").get<int>();
  if (j.contains("N_min")) cfg.n_min = j.at("N_min").get<int>();
  if (j.contains("N_max")) cfg.n_max = j.at("N_max").get<int>();
  if (j.contains("p_hard")) cfg.p_hard = j.at("p_hard").get<double>();
  if (j.contains("alpha_d")) cfg.alpha_d = j.at("alpha_d").get<double>();
  if (j.contains("alpha_N")) cfg.alpha_n = j.at("alpha_N").get<double>();
  if (j.contains("homogeneous_prob"))
    cfg.homogeneous_prob = j.at("homogeneous_prob").get<double>();
  if (j.contains("dirichlet_conc")) cfg.dirichlet_conc = j.at("dirichlet_conc").get<double>();
  if (j.contains("design_family_probs"))
    cfg.design_family_probs = j.at("design_family_probs").get<std::vector<double>>();
  if (j.contains("base_scale_coeff")) cfg.base_scale_coeff = j.at("base_scale_coeff").get<double>();
  if (j.contains("allowed_priors")) {
    cfg.allowed_priors.clear();
    for (const auto& s : j.at("allowed_priors"))
      cfg.allowed_priors.push_back(factor_type_from_name(s.get<std::string>()));
  }
  if (j.contains("allowed_likelihoods")) {
    cfg.allowed_likelihoods.clear();
    for (const auto& s : j.at("allowed_likelihoods"))
      cfg.allowed_likelihoods.push_back(factor_type_from_name(s.get<std::string>()));
  }
  cfg.validate();
  return cfg;
}

}  // namespace afin
