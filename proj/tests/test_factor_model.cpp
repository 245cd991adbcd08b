#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "afin/factor_model.hpp"
#include "afin/quadrature.hpp"
#include "test_util.hpp"

using namespace afin;
using Catch::Approx;

namespace {

FactorSpec diag_gaussian_prior(std::vector<double> mu, std::vector<double> sigma) {
  FactorSpec f;
  f.factor_type = FactorType::kDiagGaussian;
  f.theta.loc = std::move(mu);
  f.theta.scale_vec = std::move(sigma);
  return f;
}

double integrate_density(const std::function<double(double)>& logpdf, double lo, double hi,
                         int n) {
  return quadrature::simpson([&](double x) { return std::exp(logpdf(x)); }, lo, hi, n);
}

}  // namespace

TEST_CASE("prior log densities match closed-form values") {
  CHECK(log_prior_density(diag_gaussian_prior({0.0}, {1.0}), {0.0}) ==
        Approx(-0.9189385).epsilon(1e-6));

  FactorSpec laplace;
  laplace.factor_type = FactorType::kDiagLaplace;
  laplace.theta.loc = {0.0};
  laplace.theta.scale_vec = {1.0};
  CHECK(log_prior_density(laplace, {0.0}) == Approx(-std::log(2.0)));

  FactorSpec fullrank;
  fullrank.factor_type = FactorType::kFullrankGaussian;
  fullrank.theta.loc = {0.0, 0.0};
  fullrank.theta.precision = Tensor(2, 2);
  fullrank.theta.precision(0, 0) = 2.0;
  fullrank.theta.precision(1, 1) = 2.0;
  // value pinned by the normalizing constant: the density with this constant
  // integrates to one on a 2-D grid
  double total = 0.0;
  int n = 400;
  double lo = -8.0, hi = 8.0, h = (hi - lo) / n;
  auto w = quadrature::simpson_weights(n, h);
  for (int i = 0; i <= n; ++i)
    for (int j = 0; j <= n; ++j)
      total += w[size_t(i)] * w[size_t(j)] *
               std::exp(log_prior_density(fullrank, {lo + i * h, lo + j * h}));
  CHECK(total == Approx(1.0).margin(1e-6));
  CHECK(log_prior_density(fullrank, {1.0, 1.0}) ==
        Approx(std::log(2.0) - std::log(2.0 * M_PI) - 2.0));
}

TEST_CASE("likelihood log densities match closed-form values") {
  FactorSpec bern;
  bern.factor_type = FactorType::kBernoulliLogit;
  bern.covariate = std::vector<double>{1.0};
  bern.observation = 1.0;
  CHECK(log_likelihood_density(bern, {0.0}) == Approx(std::log(0.5)));

  FactorSpec lin;
  lin.factor_type = FactorType::kLinGaussian;
  lin.covariate = std::vector<double>{1.0};
  lin.observation = 0.0;
  lin.theta.scale = 1.0;
  CHECK(log_likelihood_density(lin, {0.0}) == Approx(-0.9189385).epsilon(1e-6));

  FactorSpec binom;
  binom.factor_type = FactorType::kBinomialLogit;
  binom.covariate = std::vector<double>{1.0};
  binom.theta.trial_count = 4;
  binom.observation = 2.0;
  CHECK(log_likelihood_density(binom, {0.0}) == Approx(std::log(0.375)));
  // enumeration oracle: all 5 outcomes sum to one
  double total = 0.0;
  for (int y = 0; y <= 4; ++y) {
    binom.observation = double(y);
    total += std::exp(log_likelihood_density(binom, {0.0}));
  }
  CHECK(total == Approx(1.0).epsilon(1e-12));
}

TEST_CASE("every factor type normalizes on small instances") {
  const double tol = 1e-6;
  // priors at d = 1
  CHECK(integrate_density(
            [&](double z) { return log_prior_density(diag_gaussian_prior({0.3}, {0.7}), {z}); },
            -30, 30, 20000) == Approx(1.0).margin(tol));
  FactorSpec stud;
  stud.factor_type = FactorType::kDiagStudentT;
  stud.theta.loc = {0.2};
  stud.theta.scale_vec = {0.8};
  stud.theta.nu = 3.5;
  CHECK(integrate_density([&](double z) { return log_prior_density(stud, {z}); }, -500, 500,
                          400000) == Approx(1.0).margin(tol));
  FactorSpec lap;
  lap.factor_type = FactorType::kDiagLaplace;
  lap.theta.loc = {-0.4};
  lap.theta.scale_vec = {0.6};
  CHECK(integrate_density([&](double z) { return log_prior_density(lap, {z}); }, -40, 40,
                          40000) == Approx(1.0).margin(tol));
  FactorSpec fr;
  fr.factor_type = FactorType::kFullrankGaussian;
  fr.theta.loc = {0.1};
  fr.theta.precision = Tensor(1, 1);
  fr.theta.precision(0, 0) = 1.7;
  CHECK(integrate_density([&](double z) { return log_prior_density(fr, {z}); }, -30, 30,
                          20000) == Approx(1.0).margin(tol));

  // likelihoods integrate/sum to one over y at fixed z
  std::vector<double> z = {0.4};
  FactorSpec vec_gauss;
  vec_gauss.factor_type = FactorType::kGaussian;
  vec_gauss.theta.scale = 0.9;
  CHECK(integrate_density(
            [&](double y) {
              FactorSpec f = vec_gauss;
              f.observation_vec = std::vector<double>{y};
              return log_likelihood_density(f, z);
            },
            -30, 30, 20000) == Approx(1.0).margin(tol));
  FactorSpec lin;
  lin.factor_type = FactorType::kLinGaussian;
  lin.covariate = std::vector<double>{1.3};
  lin.theta.scale = 0.5;
  CHECK(integrate_density(
            [&](double y) {
              FactorSpec f = lin;
              f.observation = y;
              return log_likelihood_density(f, z);
            },
            -30, 30, 20000) == Approx(1.0).margin(tol));
  FactorSpec lst;
  lst.factor_type = FactorType::kLinStudentT;
  lst.covariate = std::vector<double>{0.8};
  lst.theta.scale = 0.6;
  lst.theta.nu = 4.0;
  CHECK(integrate_density(
            [&](double y) {
              FactorSpec f = lst;
              f.observation = y;
              return log_likelihood_density(f, z);
            },
            -400, 400, 400000) == Approx(1.0).margin(tol));
  for (int nc : {1, 5, 8}) {
    FactorSpec binom;
    binom.factor_type = FactorType::kBinomialLogit;
    binom.covariate = std::vector<double>{0.7};
    binom.theta.trial_count = nc;
    double total = 0.0;
    for (int y = 0; y <= nc; ++y) {
      binom.observation = double(y);
      total += std::exp(log_likelihood_density(binom, z));
    }
    CHECK(total == Approx(1.0).epsilon(1e-12));
  }
  FactorSpec bern;
  bern.factor_type = FactorType::kBernoulliLogit;
  bern.covariate = std::vector<double>{-0.9};
  double total = 0.0;
  for (int y = 0; y <= 1; ++y) {
    bern.observation = double(y);
    total += std::exp(log_likelihood_density(bern, z));
  }
  CHECK(total == Approx(1.0).epsilon(1e-12));
}

TEST_CASE("unnormalized posterior is the exact factor sum") {
  TaskInstance task = test::conjugate_task_1d(0.5, 1.2, {1.0, -0.7}, {0.3, 0.9}, {0.8, 1.1});
  std::vector<double> z = {0.25};
  double manual = log_prior_density(task.prior, z);
  for (const FactorSpec& f : task.likelihoods) manual += log_likelihood_density(f, z);
  CHECK(log_unnormalized_posterior(task, z) == manual);  // bit-reproducible order

  SECTION("mode property at the conjugate posterior mean") {
    GaussianDistribution post = conjugate_posterior_oracle(task);
    double at_mode = log_unnormalized_posterior(task, post.mean);
    double sd = std::sqrt(post.covariance()(0, 0));
    CHECK(at_mode > log_unnormalized_posterior(task, {post.mean[0] + 3 * sd}));
    CHECK(at_mode > log_unnormalized_posterior(task, {post.mean[0] - 3 * sd}));
  }

  SECTION("bernoulli factors penalize confidently wrong z") {
    TaskInstance bt;
    bt.d = 1;
    bt.prior = diag_gaussian_prior({0.0}, {1.0});
    FactorSpec f;
    f.factor_type = FactorType::kBernoulliLogit;
    f.covariate = std::vector<double>{1.0};
    f.observation = 0.0;  // disagrees with sign(x^T z) for z > 0
    bt.likelihoods.push_back(f);
    CHECK(log_unnormalized_posterior(bt, {10.0}) < log_unnormalized_posterior(bt, {1.0}));
  }
}

TEST_CASE("factor sampling follows the named distributions") {
  SECTION("degenerate scale returns the location") {
    FactorSpec p = diag_gaussian_prior({2.5, -1.0}, {1e-8, 1e-8});
    RngStream rng(5);
    auto z = sample_prior(p, 2, rng);
    CHECK(z[0] == Approx(2.5).margin(1e-6));
    CHECK(z[1] == Approx(-1.0).margin(1e-6));
  }
  SECTION("student-t median") {
    FactorSpec p;
    p.factor_type = FactorType::kDiagStudentT;
    p.theta.loc = {0.0};
    p.theta.scale_vec = {1.0};
    p.theta.nu = 5.0;
    RngStream rng(6);
    int s_count = 100000;
    std::vector<double> draws(static_cast<size_t>(s_count), 0.0);
    for (int s = 0; s < s_count; ++s) draws[size_t(s)] = sample_prior(p, 1, rng)[0];
    std::nth_element(draws.begin(), draws.begin() + s_count / 2, draws.end());
    CHECK(std::fabs(draws[size_t(s_count / 2)]) < 0.02);
  }
  SECTION("saturated sigmoid") {
    FactorSpec f;
    f.factor_type = FactorType::kBernoulliLogit;
    f.covariate = std::vector<double>{20.0};
    RngStream rng(7);
    int ones = 0, n = 10000;
    for (int s = 0; s < n; ++s) {
      FactorSpec g = sample_observation(f, {1.0}, rng);
      ones += int(*g.observation);
    }
    CHECK(double(ones) / n >= 0.999);
  }
}

TEST_CASE("conjugate oracle matches quadrature and hand expansion") {
  SECTION("single observation, d = 1") {
    TaskInstance task = test::conjugate_task_1d(0.0, 1.0, {1.0}, {1.0}, {1.0});
    GaussianDistribution post = conjugate_posterior_oracle(task);
    CHECK(post.mean[0] == Approx(0.5));
    CHECK(post.covariance()(0, 0) == Approx(0.5));
    auto quad = quadrature::posterior_moments(task);
    CHECK(std::fabs(quad.mean[0] - post.mean[0]) < 1e-7);
    CHECK(std::fabs(quad.cov(0, 0) - post.covariance()(0, 0)) < 1e-7);
  }
  SECTION("zero covariates leave the prior untouched") {
    TaskInstance task = test::conjugate_task_1d(0.7, 1.3, {0.0, 0.0}, {5.0, -2.0}, {1.0, 2.0});
    GaussianDistribution post = conjugate_posterior_oracle(task);
    CHECK(post.mean[0] == Approx(0.7));
    CHECK(post.covariance()(0, 0) == Approx(1.3 * 1.3));
  }
  SECTION("two orthogonal unit covariates at d = 2") {
    TaskInstance task;
    task.d = 2;
    task.prior = diag_gaussian_prior({0.0, 0.0}, {1.0, 1.0});
    for (int i = 0; i < 2; ++i) {
      FactorSpec f;
      f.factor_type = FactorType::kLinGaussian;
      f.covariate = std::vector<double>(2, 0.0);
      (*f.covariate)[size_t(i)] = 1.0;
      f.observation = 0.4;
      f.theta.scale = 1.0;
      task.likelihoods.push_back(f);
    }
    GaussianDistribution post = conjugate_posterior_oracle(task);
    CHECK(post.precision(0, 0) == Approx(2.0));
    CHECK(post.precision(1, 1) == Approx(2.0));
    CHECK(post.precision(0, 1) == Approx(0.0).margin(1e-15));
  }
  SECTION("mean is the mode: gradient at the oracle mean vanishes") {
    TaskInstance task = test::conjugate_task_1d(0.3, 0.9, {1.0, 0.5, -0.4}, {0.2, 0.8, 0.1},
                                                {0.7, 1.0, 1.4});
    GaussianDistribution post = conjugate_posterior_oracle(task);
    double h = 1e-5;
    double g = (log_unnormalized_posterior(task, {post.mean[0] + h}) -
                log_unnormalized_posterior(task, {post.mean[0] - h})) /
               (2 * h);
    CHECK(std::fabs(g) < 1e-8);
  }
  SECTION("non-conjugate factor rejected") {
    TaskInstance task = test::conjugate_task_1d(0.0, 1.0, {1.0}, {1.0}, {1.0});
    task.likelihoods[0].factor_type = FactorType::kBernoulliLogit;
    task.likelihoods[0].observation = 1.0;
    CHECK_THROWS_AS(conjugate_posterior_oracle(task), std::invalid_argument);
  }
}

TEST_CASE("coordinate permutations leave log densities invariant") {
  RngStream rng(9);
  for (int rep = 0; rep < 20; ++rep) {
    int d = rng.uniform_int(2, 5);
    size_t dn = size_t(d);
    std::vector<double> z(dn, 0.0), mu(dn, 0.0), sigma(dn, 0.0);
    for (int i = 0; i < d; ++i) {
      z[size_t(i)] = rng.normal();
      mu[size_t(i)] = rng.normal();
      sigma[size_t(i)] = 0.5 + rng.uniform();
    }
    auto perm = test::random_permutation(d, rng);
    auto permute = [&](const std::vector<double>& v) {
      std::vector<double> out(v.size(), 0.0);
      for (int i = 0; i < d; ++i) out[size_t(i)] = v[size_t(perm[size_t(i)])];
      return out;
    };

    FactorSpec p = diag_gaussian_prior(mu, sigma);
    FactorSpec pp = diag_gaussian_prior(permute(mu), permute(sigma));
    CHECK(log_prior_density(p, z) ==
          Approx(log_prior_density(pp, permute(z))).epsilon(1e-12));

    FactorSpec fr;
    fr.factor_type = FactorType::kFullrankGaussian;
    fr.theta.loc = mu;
    Tensor a = test::random_tensor(d, d, rng, 0.4);
    fr.theta.precision = Tensor(d, d);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) {
        double s = (i == j) ? 1.0 : 0.0;
        for (int k = 0; k < d; ++k) s += a(i, k) * a(j, k);
        fr.theta.precision(i, j) = s;
      }
    FactorSpec frp = fr;
    frp.theta.loc = permute(mu);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j)
        frp.theta.precision(i, j) = fr.theta.precision(perm[size_t(i)], perm[size_t(j)]);
    CHECK(log_prior_density(fr, z) ==
          Approx(log_prior_density(frp, permute(z))).epsilon(1e-12));

    FactorSpec lin;
    lin.factor_type = FactorType::kLinGaussian;
    lin.theta.scale = 0.8;
    lin.observation = 0.3;
    std::vector<double> x(dn, 0.0);
    for (int i = 0; i < d; ++i) x[size_t(i)] = rng.normal();
    lin.covariate = x;
    FactorSpec linp = lin;
    linp.covariate = permute(x);
    CHECK(log_likelihood_density(lin, z) ==
          Approx(log_likelihood_density(linp, permute(z))).epsilon(1e-12));
  }
}

TEST_CASE("task JSON round-trips") {
  TaskInstance task = test::conjugate_task_1d(0.1, 1.1, {1.0, 0.2}, {0.4, -0.3}, {0.9, 0.5});
  task.latent = std::vector<double>{0.15};
  nlohmann::json j = task_to_json(task);
  TaskInstance back = task_from_json(j);
  CHECK(task_to_json(back).dump() == j.dump());

  FactorSpec binom;
  binom.factor_type = FactorType::kBinomialLogit;
  binom.covariate = std::vector<double>{0.5};
  binom.theta.trial_count = 6;
  binom.observation = 3.0;
  task.likelihoods.push_back(binom);
  j = task_to_json(task);
  CHECK(j["likelihoods"][2]["y"].is_number_integer());
  CHECK(task_to_json(task_from_json(j)).dump() == j.dump());
}

TEST_CASE("validation rejects malformed factors") {
  FactorSpec p = diag_gaussian_prior({0.0}, {1.0});
  p.observation = 1.0;
  CHECK_THROWS(p.validate(1));  // prior with observation

  FactorSpec lin;
  lin.factor_type = FactorType::kLinGaussian;
  lin.theta.scale = 1.0;
  lin.observation = 0.0;
  CHECK_THROWS(lin.validate(1));  // missing covariate

  FactorSpec binom;
  binom.factor_type = FactorType::kBinomialLogit;
  binom.covariate = std::vector<double>{1.0};
  binom.theta.trial_count = 4;
  binom.observation = 5.0;  // y > n_c
  CHECK_THROWS(binom.validate(1));

  FactorSpec bad_scale = diag_gaussian_prior({0.0}, {-1.0});
  CHECK_THROWS(bad_scale.validate(1));

  TaskInstance empty;
  empty.d = 1;
  empty.prior = diag_gaussian_prior({0.0}, {1.0});
  CHECK_THROWS(empty.validate());  // N = 0 forbidden
}
