#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "afin/rng.hpp"
#include "afin/tensor.hpp"

namespace afin {

// The factor role (prior v· likelihood) is part of the type: prior and
// likelihood factors use different adapters even when the parametric forms
// look alike.
enum class FactorType {
  // prior variants
  kDiagGaussian,
  kFullrankGaussian,
  kDiagStudentT,
  kDiagLaplace,
  // likelihood variants
  kGaussian,       // vector observation y = z + eps, isotropic noise
  kLinGaussian,    // y = x^T z + eps
  kBernoulliLogit, // y ~ Bernoulli(sigmoid(x^T z))
  kBinomialLogit,  // y ~ Binomial(n_c, sigmoid(x^T z))
  kLinStudentT,    // y = x^T z + sigma * t_nu
};

inline bool is_prior_type(FactorType t) {
  switch (t) {
    case FactorType::kDiagGaussian:
    case FactorType::kFullrankGaussian:
    case FactorType::kDiagStudentT:
    case FactorType::kDiagLaplace:
      return true;
    default:
      return false;
  }
}
inline bool is_likelihood_type(FactorType t) { return !is_prior_type(t); }
inline bool has_covariate(FactorType t) {
  switch (t) {
    case FactorType::kLinGaussian:
    case FactorType::kBernoulliLogit:
    case FactorType::kBinomialLogit:
    case FactorType::kLinStudentT:
      return true;
    default:
      return false;
  }
}

inline const std::vector<FactorType>& prior_types() {
  static const std::vector<FactorType> v = {
      FactorType::kDiagGaussian, FactorType::kFullrankGaussian, FactorType::kDiagStudentT,
      FactorType::kDiagLaplace};
  return v;
}
inline const std::vector<FactorType>& likelihood_types() {
  static const std::vector<FactorType> v = {FactorType::kGaussian, FactorType::kLinGaussian,
                                            FactorType::kBernoulliLogit,
                                            FactorType::kBinomialLogit, FactorType::kLinStudentT};
  return v;
}

inline std::string factor_type_name(FactorType t) {
  switch (t) {
    case FactorType::kDiagGaussian: return "diag_gaussian";
    case FactorType::kFullrankGaussian: return "fullrank_gaussian";
    case FactorType::kDiagStudentT: return "diag_student_t";
    case FactorType::kDiagLaplace: return "diag_laplace";
    case FactorType::kGaussian: return "gaussian";
    case FactorType::kLinGaussian: return "lin_gaussian";
    case FactorType::kBernoulliLogit: return "bernoulli_logit";
    case FactorType::kBinomialLogit: return "binomial_logit";
    case FactorType::kLinStudentT: return "lin_student_t";
  }
  throw std::invalid_argument("factor_type_name: unknown type");
}

inline FactorType factor_type_from_name(const std::string& s) {
  for (FactorType t : prior_types())
    if (factor_type_name(t) == s) return t;
  for (FactorType t : likelihood_types())
    if (factor_type_name(t) == s) return t;
  throw std::invalid_argument("unknown factor type: " + s);
}

// Type-dependent parameter bundle. Only the fields used by the factor type
// are meaningful; validate() enforces the shape contract.
struct FactorTheta {
  std::vector<double> loc;        // mu per coordinate (priors)
  std::vector<double> scale_vec;  // sigma / s per coordinate (diagonal priors)
  Tensor precision;               // d x d (fullrank_gaussian)
  double scale = 0.0;             // scalar noise scale (likelihoods)
  double nu = 0.0;                // Student-t degrees of freedom
  int trial_count = 0;            // n_c (binomial_logit)
};

struct FactorSpec {
  FactorType factor_type = FactorType::kDiagGaussian;
  FactorTheta theta;
  std::optional<std::vector<double>> covariate;  // row x in R^d
  std::optional<double> observation;             // scalar y
  std::optional<std::vector<double>> observation_vec;  // vector y (gaussian likelihood)

  bool has_observation() const { return observation.has_value() || observation_vec.has_value(); }

  void validate(int d) const;
};

struct GaussianDistribution {
  std::vector<double> mean;  // mu in R^d
  Tensor precision;          // Lambda, d x d, symmetric positive definite

  int dim() const { return int(mean.size()); }

  // Throws if the precision fails a Cholesky factorization.
  std::vector<double> cholesky() const { return linalg::cholesky(precision.data(), dim()); }

  double logpdf(const std::vector<double>& z) const {
    int d = dim();
    auto L = cholesky();
    std::vector<double> delta(d);
    for (int i = 0; i < d; ++i) delta[i] = z[i] - mean[i];
    std::vector<double> y(d, 0.0);
    for (int j = 0; j < d; ++j)
      for (int i = j; i < d; ++i) y[j] += L[size_t(i) * d + j] * delta[i];
    double quad = 0.0;
    for (int j = 0; j < d; ++j) quad += y[j] * y[j];
    return 0.5 * linalg::chol_logdet(L, d) - 0.5 * d * std::log(2.0 * M_PI) - 0.5 * quad;
  }

  // z = mu + L^{-T} eps with Lambda = L L^T, so that cov(z) = Lambda^{-1}.
  std::vector<double> sample(RngStream& rng) const {
    int d = dim();
    auto L = cholesky();
    std::vector<double> eps(d);
    for (int i = 0; i < d; ++i) eps[i] = rng.normal();
    linalg::solve_lower_transpose(L, d, eps.data());
    for (int i = 0; i < d; ++i) eps[i] += mean[i];
    return eps;
  }

  Tensor covariance() const {
    int d = dim();
    auto L = cholesky();
    auto inv = linalg::chol_inverse(L, d);
    Tensor cov(d, d);
    for (int i = 0; i < d * d; ++i) cov[size_t(i)] = inv[size_t(i)];
    return cov;
  }
};

struct TaskInstance {
  int d = 0;
  FactorSpec prior;
  std::vector<FactorSpec> likelihoods;
  std::optional<std::vector<double>> latent;  // ground-truth z for simulated tasks

  int num_likelihoods() const { return int(likelihoods.size()); }
  void validate() const;
};

// ---------------------------------------------------------------------------
// validation
// ---------------------------------------------------------------------------

inline void FactorSpec::validate(int d) const {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument("FactorSpec: " + msg);
  };
  const bool prior = is_prior_type(factor_type);
  if (prior) {
    require(!has_observation(), "prior factors carry no observation");
    require(!covariate.has_value(), "prior factors carry no covariate");
  } else {
    require(has_observation(), "likelihood factors carry exactly one observation");
  }
  if (has_covariate(factor_type)) {
    require(covariate.has_value(), "missing covariate row");
    require(int(covariate->size()) == d, "covariate length != d");
  }
  switch (factor_type) {
    case FactorType::kDiagGaussian:
    case FactorType::kDiagLaplace:
      require(int(theta.loc.size()) == d, "location length != d");
      require(int(theta.scale_vec.size()) == d, "scale length != d");
      for (double s : theta.scale_vec) require(s > 0.0, "scale must be strictly positive");
      break;
    case FactorType::kDiagStudentT:
      require(int(theta.loc.size()) == d, "location length != d");
      require(int(theta.scale_vec.size()) == d, "scale length != d");
      for (double s : theta.scale_vec) require(s > 0.0, "scale must be strictly positive");
      require(theta.nu > 0.0, "nu must be positive");
      break;
    case FactorType::kFullrankGaussian: {
      require(int(theta.loc.size()) == d, "location length != d");
      require(theta.precision.rows() == d && theta.precision.cols() == d,
              "precision shape != d x d");
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < i; ++j)
          require(std::fabs(theta.precision(i, j) - theta.precision(j, i)) <=
                      1e-12 * (1.0 + std::fabs(theta.precision(i, j))),
                  "precision not symmetric");
      linalg::cholesky(theta.precision.data(), d);  // throws when not PD
      break;
    }
    case FactorType::kGaussian:
      require(theta.scale > 0.0, "noise scale must be strictly positive");
      require(observation_vec.has_value() && int(observation_vec->size()) == d,
              "gaussian likelihood stores a d-vector observation");
      break;
    case FactorType::kLinGaussian:
      require(theta.scale > 0.0, "noise scale must be strictly positive");
      require(observation.has_value(), "scalar observation required");
      break;
    case FactorType::kLinStudentT:
      require(theta.scale > 0.0, "noise scale must be strictly positive");
      require(theta.nu > 0.0, "nu must be positive");
      require(observation.has_value(), "scalar observation required");
      break;
    case FactorType::kBernoulliLogit: {
      require(observation.has_value(), "scalar observation required");
      double y = *observation;
      require(y == 0.0 || y == 1.0, "bernoulli observation must be 0 or 1");
      break;
    }
    case FactorType::kBinomialLogit: {
      require(theta.trial_count >= 1, "n_c must be >= 1");
      require(observation.has_value(), "scalar observation required");
      double y = *observation;
      require(y == std::floor(y) && y >= 0.0 && y <= theta.trial_count,
              "binomial observation outside {0..n_c}");
      break;
    }
  }
}

inline void TaskInstance::validate() const {
  if (d < 1) throw std::invalid_argument("TaskInstance: d must be >= 1");
  if (likelihoods.empty()) throw std::invalid_argument("TaskInstance: N must be >= 1");
  if (!is_prior_type(prior.factor_type))
    throw std::invalid_argument("TaskInstance: prior factor has a likelihood type");
  prior.validate(d);
  for (const FactorSpec& f : likelihoods) {
    if (!is_likelihood_type(f.factor_type))
      throw std::invalid_argument("TaskInstance: likelihood list contains a prior type");
    f.validate(d);
  }
  if (latent.has_value() && int(latent->size()) != d)
    throw std::invalid_argument("TaskInstance: latent length != d");
}

// ---------------------------------------------------------------------------
// log densities (64-bit, log-space, exact normalizing constants)
// ---------------------------------------------------------------------------

namespace density {

inline double log_sigmoid(double x) {
  return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

inline double normal_logpdf(double x, double mean, double sigma) {
  double t = (x - mean) / sigma;
  return -0.5 * std::log(2.0 * M_PI) - std::log(sigma) - 0.5 * t * t;
}

inline double student_t_logpdf(double x, double mean, double sigma, double nu) {
  double t = (x - mean) / sigma;
  return std::lgamma(0.5 * (nu + 1.0)) - std::lgamma(0.5 * nu) - 0.5 * std::log(nu * M_PI) -
         std::log(sigma) - 0.5 * (nu + 1.0) * std::log1p(t * t / nu);
}

inline double laplace_logpdf(double x, double loc, double s) {
  return -std::log(2.0 * s) - std::fabs(x - loc) / s;
}

inline double log_binomial_coeff(int n, int k) {
  return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

}  // namespace density

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double log_prior_density(const FactorSpec& prior, const std::vector<double>& z) {
  if (!is_prior_type(prior.factor_type))
    throw std::invalid_argument("log_prior_density: not a prior factor");
  int d = int(z.size());
  prior.validate(d);
  double lp = 0.0;
  switch (prior.factor_type) {
    case FactorType::kDiagGaussian:
      for (int i = 0; i < d; ++i)
        lp += density::normal_logpdf(z[i], prior.theta.loc[i], prior.theta.scale_vec[i]);
      return lp;
    case FactorType::kDiagStudentT:
      for (int i = 0; i < d; ++i)
        lp += density::student_t_logpdf(z[i], prior.theta.loc[i], prior.theta.scale_vec[i],
                                        prior.theta.nu);
      return lp;
    case FactorType::kDiagLaplace:
      for (int i = 0; i < d; ++i)
        lp += density::laplace_logpdf(z[i], prior.theta.loc[i], prior.theta.scale_vec[i]);
      return lp;
    case FactorType::kFullrankGaussian: {
      GaussianDistribution g{prior.theta.loc, prior.theta.precision};
      return g.logpdf(z);
    }
    default:
      throw std::invalid_argument("log_prior_density: unreachable");
  }
}

inline double log_likelihood_density(const FactorSpec& factor, const std::vector<double>& z) {
  if (!is_likelihood_type(factor.factor_type))
    throw std::invalid_argument("log_likelihood_density: not a likelihood factor");
  int d = int(z.size());
  factor.validate(d);
  switch (factor.factor_type) {
    case FactorType::kGaussian: {
      double lp = 0.0;
      for (int i = 0; i < d; ++i)
        lp += density::normal_logpdf((*factor.observation_vec)[i], z[i], factor.theta.scale);
      return lp;
    }
    case FactorType::kLinGaussian:
      return density::normal_logpdf(*factor.observation, dot(*factor.covariate, z),
                                    factor.theta.scale);
    case FactorType::kLinStudentT:
      return density::student_t_logpdf(*factor.observation, dot(*factor.covariate, z),
                                       factor.theta.scale, factor.theta.nu);
    case FactorType::kBernoulliLogit: {
      double eta = dot(*factor.covariate, z);
      if (!std::isfinite(eta))
        throw std::domain_error("log_likelihood_density: non-finite logit");
      double y = *factor.observation;
      return y * density::log_sigmoid(eta) + (1.0 - y) * density::log_sigmoid(-eta);
    }
    case FactorType::kBinomialLogit: {
      double eta = dot(*factor.covariate, z);
      if (!std::isfinite(eta))
        throw std::domain_error("log_likelihood_density: non-finite logit");
      int n = factor.theta.trial_count;
      int y = int(*factor.observation);
      return density::log_binomial_coeff(n, y) + y * density::log_sigmoid(eta) +
             (n - y) * density::log_sigmoid(-eta);
    }
    default:
      throw std::invalid_argument("log_likelihood_density: unreachable");
  }
}

// log p(z, y_{1:N}) = log prior + sum_n log likelihood_n, summed in list order
// so the result is bit-reproducible.
inline double log_unnormalized_posterior(const TaskInstance& task, const std::vector<double>& z) {
  task.validate();
  if (int(z.size()) != task.d)
    throw std::invalid_argument("log_unnormalized_posterior: z length != d");
  double lp = log_prior_density(task.prior, z);
  for (const FactorSpec& f : task.likelihoods) lp += log_likelihood_density(f, z);
  return lp;
}

// ---------------------------------------------------------------------------
// sampling
// ---------------------------------------------------------------------------

inline std::vector<double> sample_prior(const FactorSpec& prior, int d, RngStream& rng) {
  if (!is_prior_type(prior.factor_type))
    throw std::invalid_argument("sample_prior: not a prior factor");
  prior.validate(d);
  std::vector<double> z(d);
  switch (prior.factor_type) {
    case FactorType::kDiagGaussian:
      for (int i = 0; i < d; ++i)
        z[i] = prior.theta.loc[i] + prior.theta.scale_vec[i] * rng.normal();
      return z;
    case FactorType::kDiagStudentT:
      for (int i = 0; i < d; ++i)
        z[i] = prior.theta.loc[i] + prior.theta.scale_vec[i] * rng.student_t(prior.theta.nu);
      return z;
    case FactorType::kDiagLaplace:
      for (int i = 0; i < d; ++i) z[i] = rng.laplace(prior.theta.loc[i], prior.theta.scale_vec[i]);
      return z;
    case FactorType::kFullrankGaussian: {
      GaussianDistribution g{prior.theta.loc, prior.theta.precision};
      return g.sample(rng);
    }
    default:
      throw std::invalid_argument("sample_prior: unreachable");
  }
}

// Samples the observation of a likelihood factor given z and writes it into
// the returned copy of the factor.
inline FactorSpec sample_observation(FactorSpec factor, const std::vector<double>& z,
                                     RngStream& rng) {
  if (!is_likelihood_type(factor.factor_type))
    throw std::invalid_argument("sample_observation: not a likelihood factor");
  int d = int(z.size());
  switch (factor.factor_type) {
    case FactorType::kGaussian: {
      std::vector<double> y(d);
      for (int i = 0; i < d; ++i) y[i] = z[i] + factor.theta.scale * rng.normal();
      factor.observation_vec = std::move(y);
      break;
    }
    case FactorType::kLinGaussian:
      factor.observation = dot(*factor.covariate, z) + factor.theta.scale * rng.normal();
      break;
    case FactorType::kLinStudentT:
      factor.observation =
          dot(*factor.covariate, z) + factor.theta.scale * rng.student_t(factor.theta.nu);
      break;
    case FactorType::kBernoulliLogit: {
      double eta = dot(*factor.covariate, z);
      double p = 1.0 / (1.0 + std::exp(-eta));
      factor.observation = rng.bernoulli(p) ? 1.0 : 0.0;
      break;
    }
    case FactorType::kBinomialLogit: {
      double eta = dot(*factor.covariate, z);
      double p = 1.0 / (1.0 + std::exp(-eta));
      factor.observation = double(rng.binomial(factor.theta.trial_count, p));
      break;
    }
    default:
      throw std::invalid_argument("sample_observation: unreachable");
  }
  factor.validate(d);
  return factor;
}

// ---------------------------------------------------------------------------
// conjugate oracle
// ---------------------------------------------------------------------------

inline bool is_conjugate_task(const TaskInstance& task) {
  if (task.prior.factor_type != FactorType::kDiagGaussian &&
      task.prior.factor_type != FactorType::kFullrankGaussian)
    return false;
  for (const FactorSpec& f : task.likelihoods)
    if (f.factor_type != FactorType::kLinGaussian) return false;
  return true;
}

// Closed-form posterior for a Gaussian prior with linear-Gaussian likelihoods:
//   Lambda* = Lambda_0 + sum_n x_n x_n^T / sigma_n^2
//   mu*     = Lambda*^{-1} (Lambda_0 mu_0 + sum_n x_n y_n / sigma_n^2)
inline GaussianDistribution conjugate_posterior_oracle(const TaskInstance& task) {
  task.validate();
  if (!is_conjugate_task(task))
    throw std::invalid_argument("conjugate_posterior_oracle: unsupported task");
  int d = task.d;
  Tensor lambda(d, d);
  std::vector<double> eta(d, 0.0);  // Lambda_0 mu_0 + sum x y / sigma^2
  if (task.prior.factor_type == FactorType::kDiagGaussian) {
    for (int i = 0; i < d; ++i) {
      double prec = 1.0 / (task.prior.theta.scale_vec[i] * task.prior.theta.scale_vec[i]);
      lambda(i, i) = prec;
      eta[i] = prec * task.prior.theta.loc[i];
    }
  } else {
    lambda = task.prior.theta.precision;
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) eta[i] += lambda(i, j) * task.prior.theta.loc[j];
  }
  for (const FactorSpec& f : task.likelihoods) {
    double inv_var = 1.0 / (f.theta.scale * f.theta.scale);
    const std::vector<double>& x = *f.covariate;
    for (int i = 0; i < d; ++i) {
      for (int j = 0; j < d; ++j) lambda(i, j) += x[i] * x[j] * inv_var;
      eta[i] += x[i] * (*f.observation) * inv_var;
    }
  }
  auto L = linalg::cholesky(lambda.data(), d);
  linalg::chol_solve(L, d, eta.data());
  return GaussianDistribution{std::move(eta), std::move(lambda)};
}

// ---------------------------------------------------------------------------
// JSON (canonical on-disk task format)
// ---------------------------------------------------------------------------

inline nlohmann::json factor_to_json(const FactorSpec& f) {
  nlohmann::json theta;
  switch (f.factor_type) {
    case FactorType::kDiagGaussian:
    case FactorType::kDiagLaplace:
      theta["mu"] = f.theta.loc;
      theta[f.factor_type == FactorType::kDiagLaplace ? "scale" : "sigma"] = f.theta.scale_vec;
      break;
    case FactorType::kDiagStudentT:
      theta["mu"] = f.theta.loc;
      theta["sigma"] = f.theta.scale_vec;
      theta["nu"] = f.theta.nu;
      break;
    case FactorType::kFullrankGaussian: {
      theta["mu"] = f.theta.loc;
      int d = f.theta.precision.rows();
      std::vector<std::vector<double>> rows(d, std::vector<double>(d));
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) rows[i][j] = f.theta.precision(i, j);
      theta["precision"] = rows;
      break;
    }
    case FactorType::kGaussian:
      theta["sigma"] = f.theta.scale;
      break;
    case FactorType::kLinGaussian:
      theta["sigma"] = f.theta.scale;
      break;
    case FactorType::kLinStudentT:
      theta["sigma"] = f.theta.scale;
      theta["nu"] = f.theta.nu;
      break;
    case FactorType::kBernoulliLogit:
      theta = nlohmann::json::object();
      break;
    case FactorType::kBinomialLogit:
      theta["n_c"] = f.theta.trial_count;
      break;
  }
  nlohmann::json j;
  j["type"] = factor_type_name(f.factor_type);
  j["theta"] = theta;
  if (f.covariate.has_value()) j["x"] = *f.covariate;
  if (f.observation_vec.has_value()) {
    j["y"] = *f.observation_vec;
  } else if (f.observation.has_value()) {
    if (f.factor_type == FactorType::kBernoulliLogit ||
        f.factor_type == FactorType::kBinomialLogit) {
      j["y"] = int64_t(*f.observation);
    } else {
      j["y"] = *f.observation;
    }
  }
  return j;
}

inline FactorSpec factor_from_json(const nlohmann::json& j) {
  FactorSpec f;
  f.factor_type = factor_type_from_name(j.at("type").get<std::string>());
  const nlohmann::json& theta = j.at("theta");
  switch (f.factor_type) {
    case FactorType::kDiagGaussian:
      f.theta.loc = theta.at("mu").get<std::vector<double>>();
      f.theta.scale_vec = theta.at("sigma").get<std::vector<double>>();
      break;
    case FactorType::kDiagLaplace:
      f.theta.loc = theta.at("mu").get<std::vector<double>>();
      f.theta.scale_vec = theta.at("scale").get<std::vector<double>>();
      break;
    case FactorType::kDiagStudentT:
      f.theta.loc = theta.at("mu").get<std::vector<double>>();
      f.theta.scale_vec = theta.at("sigma").get<std::vector<double>>();
      f.theta.nu = theta.at("nu").get<double>();
      break;
    case FactorType::kFullrankGaussian: {
      f.theta.loc = theta.at("mu").get<std::vector<double>>();
      auto rows = theta.at("precision").get<std::vector<std::vector<double>>>();
      int d = int(rows.size());
      f.theta.precision = Tensor(d, d);
      for (int i = 0; i < d; ++i)
        for (int j2 = 0; j2 < d; ++j2) f.theta.precision(i, j2) = rows[i][j2];
      break;
    }
    case FactorType::kGaussian:
    case FactorType::kLinGaussian:
      f.theta.scale = theta.at("sigma").get<double>();
      break;
    case FactorType::kLinStudentT:
      f.theta.scale = theta.at("sigma").get<double>();
      f.theta.nu = theta.at("nu").get<double>();
      break;
    case FactorType::kBernoulliLogit:
      break;
    case FactorType::kBinomialLogit:
      f.theta.trial_count = theta.at("n_c").get<int>();
      break;
  }
  if (j.contains("x")) f.covariate = j.at("x").get<std::vector<double>>();
  if (j.contains("y")) {
    if (j.at("y").is_array()) {
      f.observation_vec = j.at("y").get<std::vector<double>>();
    } else {
      f.observation = j.at("y").get<double>();
    }
  }
  return f;
}

inline nlohmann::json task_to_json(const TaskInstance& task) {
  nlohmann::json j;
  j["d"] = task.d;
  j["prior"] = factor_to_json(task.prior);
  nlohmann::json liks = nlohmann::json::array();
  for (const FactorSpec& f : task.likelihoods) liks.push_back(factor_to_json(f));
  j["likelihoods"] = liks;
  if (task.latent.has_value()) j["z"] = *task.latent;
  return j;
}

inline TaskInstance task_from_json(const nlohmann::json& j) {
  TaskInstance t;
  t.d = j.at("d").get<int>();
  t.prior = factor_from_json(j.at("prior"));
  for (const auto& lj : j.at("likelihoods")) t.likelihoods.push_back(factor_from_json(lj));
  if (j.contains("z")) t.latent = j.at("z").get<std::vector<double>>();
  t.validate();
  return t;
}

}  // namespace afin
