#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "afin/factor_model.hpp"

namespace afin {
namespace quadrature {

// Composite Simpson on a uniform grid; n must be even (n+1 points).
inline double simpson(const std::function<double(double)>& f, double lo, double hi, int n) {
  if (n < 2 || n % 2 != 0) throw std::invalid_argument("simpson: n must be even and >= 2");
  double h = (hi - lo) / n;
  double acc = f(lo) + f(hi);
  for (int i = 1; i < n; ++i) acc += f(lo + i * h) * (i % 2 == 1 ? 4.0 : 2.0);
  return acc * h / 3.0;
}

inline std::vector<double> simpson_weights(int n, double h) {
  std::vector<double> w(size_t(n + 1));
  for (int i = 0; i <= n; ++i) w[size_t(i)] = (i == 0 || i == n) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0);
  for (double& x : w) x *= h / 3.0;
  return w;
}

struct QuadMoments {
  std::vector<double> mean;
  Tensor cov;
  double log_normalizer = 0.0;
};

// Marginal prior standard deviations, used to pick an integration domain
// independently of the closed-form posterior.
inline std::vector<double> prior_marginal_sd(const FactorSpec& prior, int d) {
  std::vector<double> sd(size_t(d), 1.0);
  switch (prior.factor_type) {
    case FactorType::kDiagGaussian:
    case FactorType::kDiagLaplace:
    case FactorType::kDiagStudentT:
      for (int i = 0; i < d; ++i) sd[size_t(i)] = prior.theta.scale_vec[size_t(i)];
      break;
    case FactorType::kFullrankGaussian: {
      auto L = linalg::cholesky(prior.theta.precision.data(), d);
      auto inv = linalg::chol_inverse(L, d);
      for (int i = 0; i < d; ++i) sd[size_t(i)] = std::sqrt(inv[size_t(i) * d + i]);
      break;
    }
    default:
      throw std::invalid_argument("prior_marginal_sd: not a prior factor");
  }
  return sd;
}

// Posterior moments of a 1-D task by normalized quadrature of
// exp(log_unnormalized_posterior). Two passes: a wide coarse scan locates the
// mass, a fine Simpson grid integrates it.
inline QuadMoments posterior_moments_1d(const TaskInstance& task, int fine_n = 4000) {
  if (task.d != 1) throw std::invalid_argument("posterior_moments_1d: d must be 1");
  auto sd = prior_marginal_sd(task.prior, 1);
  double c = task.prior.theta.loc[0], w = 40.0 * sd[0];
  auto logp = [&](double z) { return log_unnormalized_posterior(task, {z}); };
  // coarse pass
  int coarse_n = 2000;
  double h = 2.0 * w / coarse_n;
  double best = -std::numeric_limits<double>::infinity();
  std::vector<double> lp(size_t(coarse_n + 1));
  for (int i = 0; i <= coarse_n; ++i) {
    lp[size_t(i)] = logp(c - w + i * h);
    best = std::max(best, lp[size_t(i)]);
  }
  double z0 = 0.0, m2 = 0.0, mass = 0.0;
  for (int i = 0; i <= coarse_n; ++i) {
    double q = std::exp(lp[size_t(i)] - best);
    double z = c - w + i * h;
    mass += q;
    z0 += q * z;
    m2 += q * z * z;
  }
  z0 /= mass;
  double sd_est = std::sqrt(std::max(m2 / mass - z0 * z0, 1e-12));
  // fine pass
  double lo = z0 - 10.0 * sd_est, hi = z0 + 10.0 * sd_est;
  double hf = (hi - lo) / fine_n;
  auto weights = simpson_weights(fine_n, hf);
  double zsum = 0.0, zzsum = 0.0, total = 0.0, peak = -std::numeric_limits<double>::infinity();
  std::vector<double> lpf(size_t(fine_n + 1));
  for (int i = 0; i <= fine_n; ++i) {
    lpf[size_t(i)] = logp(lo + i * hf);
    peak = std::max(peak, lpf[size_t(i)]);
  }
  for (int i = 0; i <= fine_n; ++i) {
    double q = weights[size_t(i)] * std::exp(lpf[size_t(i)] - peak);
    double z = lo + i * hf;
    total += q;
    zsum += q * z;
    zzsum += q * z * z;
  }
  QuadMoments out;
  out.mean = {zsum / total};
  out.cov = Tensor(1, 1);
  out.cov(0, 0) = zzsum / total - out.mean[0] * out.mean[0];
  out.log_normalizer = std::log(total) + peak;
  return out;
}

// 2-D analogue on a tensor-product Simpson grid.
inline QuadMoments posterior_moments_2d(const TaskInstance& task, int fine_n = 1600) {
  if (task.d != 2) throw std::invalid_argument("posterior_moments_2d: d must be 2");
  auto sd = prior_marginal_sd(task.prior, 2);
  double c0 = task.prior.theta.loc[0], c1 = task.prior.theta.loc[1];
  double w0 = 40.0 * sd[0], w1 = 40.0 * sd[1];
  auto logp = [&](double a, double b) { return log_unnormalized_posterior(task, {a, b}); };
  // coarse pass
  int cn = 240;
  double h0 = 2.0 * w0 / cn, h1 = 2.0 * w1 / cn;
  double best = -std::numeric_limits<double>::infinity();
  std::vector<double> lp(size_t((cn + 1) * (cn + 1)));
  for (int i = 0; i <= cn; ++i)
    for (int j = 0; j <= cn; ++j) {
      double v = logp(c0 - w0 + i * h0, c1 - w1 + j * h1);
      lp[size_t(i) * (cn + 1) + j] = v;
      best = std::max(best, v);
    }
  double mass = 0.0, m0 = 0.0, m1 = 0.0, v00 = 0.0, v11 = 0.0;
  for (int i = 0; i <= cn; ++i)
    for (int j = 0; j <= cn; ++j) {
      double q = std::exp(lp[size_t(i) * (cn + 1) + j] - best);
      double a = c0 - w0 + i * h0, b = c1 - w1 + j * h1;
      mass += q;
      m0 += q * a;
      m1 += q * b;
      v00 += q * a * a;
      v11 += q * b * b;
    }
  m0 /= mass;
  m1 /= mass;
  double s0 = std::sqrt(std::max(v00 / mass - m0 * m0, 1e-12));
  double s1 = std::sqrt(std::max(v11 / mass - m1 * m1, 1e-12));
  // fine pass
  double lo0 = m0 - 10.0 * s0, hi0 = m0 + 10.0 * s0;
  double lo1 = m1 - 10.0 * s1, hi1 = m1 + 10.0 * s1;
  double f0 = (hi0 - lo0) / fine_n, f1 = (hi1 - lo1) / fine_n;
  auto wx = simpson_weights(fine_n, f0);
  auto wy = simpson_weights(fine_n, f1);
  std::vector<double> lpf(size_t(fine_n + 1) * size_t(fine_n + 1));
  double peak = -std::numeric_limits<double>::infinity();
  for (int i = 0; i <= fine_n; ++i)
    for (int j = 0; j <= fine_n; ++j) {
      double v = logp(lo0 + i * f0, lo1 + j * f1);
      lpf[size_t(i) * (fine_n + 1) + j] = v;
      peak = std::max(peak, v);
    }
  double total = 0.0, za = 0.0, zb = 0.0, caa = 0.0, cab = 0.0, cbb = 0.0;
  for (int i = 0; i <= fine_n; ++i)
    for (int j = 0; j <= fine_n; ++j) {
      double q = wx[size_t(i)] * wy[size_t(j)] *
                 std::exp(lpf[size_t(i) * (fine_n + 1) + j] - peak);
      double a = lo0 + i * f0, b = lo1 + j * f1;
      total += q;
      za += q * a;
      zb += q * b;
      caa += q * a * a;
      cab += q * a * b;
      cbb += q * b * b;
    }
  QuadMoments out;
  out.mean = {za / total, zb / total};
  out.cov = Tensor(2, 2);
  out.cov(0, 0) = caa / total - out.mean[0] * out.mean[0];
  out.cov(0, 1) = cab / total - out.mean[0] * out.mean[1];
  out.cov(1, 0) = out.cov(0, 1);
  out.cov(1, 1) = cbb / total - out.mean[1] * out.mean[1];
  out.log_normalizer = std::log(total) + peak;
  return out;
}

inline QuadMoments posterior_moments(const TaskInstance& task) {
  if (task.d == 1) return posterior_moments_1d(task);
  if (task.d == 2) return posterior_moments_2d(task);
  throw std::invalid_argument("quadrature posterior moments support d in {1, 2}");
}

}  // namespace quadrature
}  // namespace afin
