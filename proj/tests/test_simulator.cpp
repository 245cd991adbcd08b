#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <set>

#include "afin/task_simulator.hpp"
#include "test_util.hpp"

using namespace afin;
using Catch::Approx;

TEST_CASE("task sizes: point support") {
  SimulatorConfig cfg;
  cfg.d_min = cfg.d_max = 3;
  cfg.n_min = cfg.n_max = 7;
  RngStream rng(1);
  for (int i = 0; i < 50; ++i) {
    auto [d, n] = sample_task_sizes(cfg, rng);
    REQUIRE(d == 3);
    REQUIRE(n == 7);
  }
}

TEST_CASE("task sizes: uniform branch passes a chi-square test") {
  SimulatorConfig cfg;
  cfg.d_min = 1;
  cfg.d_max = 4;
  cfg.n_min = 1;
  cfg.n_max = 4;
  cfg.p_hard = 0.0;
  RngStream rng(2);
  int draws = 100000;
  std::map<std::pair<int, int>, int> counts;
  for (int i = 0; i < draws; ++i) {
    auto dn = sample_task_sizes(cfg, rng);
    counts[dn] += 1;
  }
  double expected = draws / 16.0;
  double chi2 = 0.0;
  for (int d = 1; d <= 4; ++d)
    for (int n = 1; n <= 4; ++n) {
      double c = counts[{d, n}];
      chi2 += (c - expected) * (c - expected) / expected;
    }
  // critical value of chi-square with 15 dof at alpha = 0.01
  CHECK(chi2 < 30.578);
}

TEST_CASE("task sizes: hard-bias ratios") {
  SimulatorConfig cfg;
  cfg.d_min = 1;
  cfg.d_max = 2;
  cfg.n_min = 1;
  cfg.n_max = 2;
  cfg.p_hard = 1.0;
  cfg.alpha_d = 1.0;
  cfg.alpha_n = 0.75;
  RngStream rng(3);
  int draws = 100000;
  int d2 = 0, n1 = 0;
  for (int i = 0; i < draws; ++i) {
    auto [d, n] = sample_task_sizes(cfg, rng);
    d2 += d == 2;
    n1 += n == 1;
  }
  // P(d=2)/P(d=1) = 2  =>  P(d=2) = 2/3
  double p_d2 = 2.0 / 3.0;
  double sd_d = std::sqrt(p_d2 * (1 - p_d2) / draws);
  CHECK(std::fabs(double(d2) / draws - p_d2) < 3 * sd_d);
  // P(N=1)/P(N=2) = 2^0.75
  double r = std::pow(2.0, 0.75);
  double p_n1 = r / (1.0 + r);
  double sd_n = std::sqrt(p_n1 * (1 - p_n1) / draws);
  CHECK(std::fabs(double(n1) / draws - p_n1) < 3 * sd_n);
}

TEST_CASE("prior factors stay inside the stated parameter ranges") {
  SimulatorConfig cfg;
  RngStream rng(4);
  int seen_fullrank = 0;
  for (int i = 0; i < 4000; ++i) {
    int d = rng.uniform_int(1, 6);
    FactorSpec f = sample_prior_factor(d, cfg, rng);
    switch (f.factor_type) {
      case FactorType::kDiagGaussian:
        for (double s : f.theta.scale_vec) {
          REQUIRE(s > std::exp(-0.8));
          REQUIRE(s < 1.0);
        }
        break;
      case FactorType::kDiagStudentT:
        for (double s : f.theta.scale_vec) {
          REQUIRE(s > std::exp(-0.7));
          REQUIRE(s < 1.0);
        }
        REQUIRE(f.theta.nu > 3.0);
        REQUIRE(f.theta.nu < 8.0);
        break;
      case FactorType::kDiagLaplace:
        for (double s : f.theta.scale_vec) {
          REQUIRE(s > std::exp(-1.0));
          REQUIRE(s < std::exp(-0.05));
        }
        break;
      case FactorType::kFullrankGaussian: {
        ++seen_fullrank;
        REQUIRE_NOTHROW(linalg::cholesky(f.theta.precision.data(), d));
        // Lambda = M M^T / d + 0.5 I has eigenvalues >= 0.5
        for (int k = 0; k < d; ++k) REQUIRE(f.theta.precision(k, k) >= 0.5);
        break;
      }
      default:
        FAIL("unexpected prior type");
    }
  }
  CHECK(seen_fullrank > 0);
}

TEST_CASE("likelihood type mixtures") {
  SimulatorConfig cfg;
  RngStream rng(5);
  SECTION("N = 1 forces homogeneity") {
    for (int i = 0; i < 100; ++i) {
      auto types = sample_likelihood_types(1, cfg, rng);
      REQUIRE(types.size() == 1);
    }
  }
  SECTION("heterogeneous draws contain k distinct types, each at least once") {
    SimulatorConfig het = cfg;
    het.homogeneous_prob = 0.0;
    for (int i = 0; i < 300; ++i) {
      auto types = sample_likelihood_types(12, het, rng);
      std::set<FactorType> distinct(types.begin(), types.end());
      REQUIRE(distinct.size() >= 2);
      REQUIRE(distinct.size() <= 5);
      std::map<FactorType, int> counts;
      for (FactorType t : types) counts[t] += 1;
      for (auto& [t, c] : counts) REQUIRE(c >= 1);
    }
  }
  SECTION("homogeneous fraction near one half") {
    int draws = 100000, homogeneous = 0;
    for (int i = 0; i < draws; ++i) {
      auto types = sample_likelihood_types(64, cfg, rng);
      std::set<FactorType> distinct(types.begin(), types.end());
      homogeneous += distinct.size() == 1;
    }
    double sd = std::sqrt(0.25 / draws);
    CHECK(std::fabs(double(homogeneous) / draws - 0.5) < 3 * sd);
  }
}

TEST_CASE("design matrix families") {
  SECTION("iid second moment at d = 9") {
    SimulatorConfig cfg;
    cfg.design_family_probs = {1.0, 0.0, 0.0, 0.0};
    RngStream rng(6);
    int d = 9;
    double sum_sq = 0.0;
    long entries = 0;
    while (entries < 1000000) {
      Tensor x = sample_design_matrix(200, d, cfg, rng);
      for (size_t i = 0; i < x.size(); ++i) sum_sq += x[i] * x[i];
      entries += long(x.size());
    }
    double mean_sq = sum_sq / double(entries);
    double sigma2 = 0.81 / 9.0;
    double sd = std::sqrt(2.0 * sigma2 * sigma2 / double(entries));
    CHECK(std::fabs(mean_sq - sigma2) < 3 * sd);
  }
  SECTION("correlated family at d = 1 is a scalar scale") {
    SimulatorConfig cfg;
    cfg.design_family_probs = {0.0, 0.0, 1.0, 0.0};
    RngStream rng(7);
    double sum_sq = 0.0;
    long entries = 0;
    while (entries < 400000) {
      Tensor x = sample_design_matrix(100, 1, cfg, rng);
      for (size_t i = 0; i < x.size(); ++i) sum_sq += x[i] * x[i];
      entries += long(x.size());
    }
    // the normalized one-point spectrum is exactly 1, so Var = 0.81
    double sd = std::sqrt(2.0 * 0.81 * 0.81 / double(entries));
    CHECK(std::fabs(sum_sq / double(entries) - 0.81) < 3 * sd);
  }
  SECTION("student-t family has heavy tails") {
    SimulatorConfig cfg;
    cfg.design_family_probs = {0.0, 0.0, 0.0, 1.0};
    RngStream rng(8);
    std::vector<double> entries;
    for (int rep = 0; rep < 1000; ++rep) {
      Tensor x = sample_design_matrix(100, 3, cfg, rng);
      for (size_t i = 0; i < x.size(); ++i) entries.push_back(x[i]);
    }
    double m = 0.0, m2 = 0.0, m4 = 0.0;
    for (double v : entries) m += v;
    m /= double(entries.size());
    for (double v : entries) {
      double c = v - m;
      m2 += c * c;
      m4 += c * c * c * c;
    }
    m2 /= double(entries.size());
    m4 /= double(entries.size());
    CHECK(m4 / (m2 * m2) - 3.0 > 0.0);
  }
}

TEST_CASE("simulated tasks validate, reproduce, and respect supports") {
  SimulatorConfig cfg;
  cfg.d_max = 6;
  cfg.n_max = 24;
  SECTION("constructive invariants and binomial trial counts") {
    RngStream rng(9);
    for (int i = 0; i < 300; ++i) {
      TaskInstance task = simulate_task(cfg, rng);
      REQUIRE_NOTHROW(task.validate());
      REQUIRE(task.latent.has_value());
      for (const FactorSpec& f : task.likelihoods) {
        if (f.factor_type == FactorType::kBinomialLogit) {
          REQUIRE(f.theta.trial_count >= 2);
          REQUIRE(f.theta.trial_count <= 8);
        }
        if (f.factor_type == FactorType::kLinGaussian ||
            f.factor_type == FactorType::kGaussian) {
          REQUIRE(f.theta.scale > std::exp(-1.0));
          REQUIRE(f.theta.scale < 1.0);
        }
        if (f.factor_type == FactorType::kLinStudentT) {
          REQUIRE(f.theta.nu > 3.0);
          REQUIRE(f.theta.nu < 8.0);
        }
      }
    }
  }
  SECTION("byte-for-byte determinism in JSON form") {
    RngStream rng_a(10), rng_b(10);
    for (int i = 0; i < 20; ++i) {
      TaskInstance a = simulate_task(cfg, rng_a);
      TaskInstance b = simulate_task(cfg, rng_b);
      REQUIRE(task_to_json(a).dump() == task_to_json(b).dump());
    }
  }
  SECTION("conjugate-only profile always supports the oracle") {
    SimulatorConfig conj = cfg;
    conj.allowed_priors = {FactorType::kDiagGaussian};
    conj.allowed_likelihoods = {FactorType::kLinGaussian};
    RngStream rng(11);
    for (int i = 0; i < 1000; ++i) {
      TaskInstance task = simulate_task(conj, rng);
      REQUIRE(is_conjugate_task(task));
      REQUIRE_NOTHROW(conjugate_posterior_oracle(task));
    }
  }
}

TEST_CASE("micro-batches share sizes and are schedule independent") {
  SimulatorConfig cfg;
  cfg.d_max = 5;
  cfg.n_max = 12;
  auto batch = simulate_micro_batch(cfg, 42, 3, 1, 6);
  REQUIRE(batch.size() == 6);
  for (const TaskInstance& t : batch) {
    CHECK(t.d == batch[0].d);
    CHECK(t.num_likelihoods() == batch[0].num_likelihoods());
  }
  // identical content on re-evaluation
  auto batch2 = simulate_micro_batch(cfg, 42, 3, 1, 6);
  for (size_t i = 0; i < batch.size(); ++i)
    CHECK(task_to_json(batch[i]).dump() == task_to_json(batch2[i]).dump());
  // task streams do not depend on how many tasks were generated before them
  RngStream sizes = RngStream::derive(42, {3, 1, stream_purpose::kSizes});
  auto [d, n] = sample_task_sizes(cfg, sizes);
  RngStream solo = RngStream::derive(42, {3, 1, stream_purpose::kTask, 4});
  TaskInstance direct = simulate_task_with_sizes(cfg, d, n, solo);
  CHECK(task_to_json(direct).dump() == task_to_json(batch[4]).dump());
}

TEST_CASE("simulator config JSON round-trip and validation") {
  SimulatorConfig cfg;
  cfg.d_max = 4;
  cfg.allowed_likelihoods = {FactorType::kLinGaussian, FactorType::kBernoulliLogit};
  SimulatorConfig back = simulator_config_from_json(simulator_config_to_json(cfg));
  CHECK(back.d_max == 4);
  CHECK(back.allowed_likelihoods.size() == 2);

  SimulatorConfig bad;
  bad.design_family_probs = {0.5, 0.5, 0.5, 0.5};
  CHECK_THROWS(bad.validate());
  SimulatorConfig bad2;
  bad2.d_min = 5;
  bad2.d_max = 2;
  CHECK_THROWS(bad2.validate());
}
