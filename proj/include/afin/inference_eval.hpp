#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "afin/afin_network.hpp"
#include "afin/factor_model.hpp"
#include "afin/rng.hpp"
#include "afin/tensor.hpp"

namespace afin {

using LogDensityFn = std::function<double(const std::vector<double>&)>;

struct Proposal {
  std::function<std::vector<double>(RngStream&)> sample;
  LogDensityFn logpdf;
};

inline Proposal gaussian_proposal(GaussianDistribution g) {
  auto shared = std::make_shared<GaussianDistribution>(std::move(g));
  return Proposal{[shared](RngStream& rng) { return shared->sample(rng); },
                  [shared](const std::vector<double>& z) { return shared->logpdf(z); }};
}

inline Proposal flow_proposal(FlowPosterior f) {
  auto shared = std::make_shared<FlowPosterior>(std::move(f));
  return Proposal{[shared](RngStream& rng) { return shared->sample(rng); },
                  [shared](const std::vector<double>& z) { return shared->log_prob(z); }};
}

// S latent draws with raw and normalized importance weights. Normalization is
// done in log space, so the weights are invariant to any constant shift of
// the raw log weights and sum to one.
struct WeightedSampleSet {
  Tensor samples;                 // S x d
  std::vector<double> log_raw;    // log w_s = log p~ - log q
  std::vector<double> weights;    // normalized, on the simplex

  int count() const { return samples.rows(); }
  int dim() const { return samples.cols(); }

  std::vector<double> sample_at(int s) const {
    std::vector<double> z(size_t(dim()), 0.0);
    for (int j = 0; j < dim(); ++j) z[size_t(j)] = samples(s, j);
    return z;
  }
};

inline std::vector<double> normalize_log_weights(const std::vector<double>& log_raw) {
  double m = -std::numeric_limits<double>::infinity();
  for (double lw : log_raw) m = std::max(m, lw);
  if (!std::isfinite(m))
    throw std::runtime_error("snis: degenerate proposal (all weights are zero)");
  std::vector<double> w(log_raw.size());
  double total = 0.0;
  for (size_t i = 0; i < log_raw.size(); ++i) {
    w[i] = std::exp(log_raw[i] - m);
    total += w[i];
  }
  for (double& x : w) x /= total;
  return w;
}

inline WeightedSampleSet snis(const Proposal& q, const LogDensityFn& log_target, int s_count,
                              RngStream& rng) {
  if (s_count < 2) throw std::invalid_argument("snis: S must be >= 2");
  WeightedSampleSet out;
  out.log_raw.resize(size_t(s_count));
  std::vector<std::vector<double>> draws(size_t(s_count), std::vector<double>{});
  for (int s = 0; s < s_count; ++s) {
    draws[size_t(s)] = q.sample(rng);
    out.log_raw[size_t(s)] = log_target(draws[size_t(s)]) - q.logpdf(draws[size_t(s)]);
  }
  int d = int(draws[0].size());
  out.samples = Tensor(s_count, d);
  for (int s = 0; s < s_count; ++s)
    for (int j = 0; j < d; ++j) out.samples(s, j) = draws[size_t(s)][size_t(j)];
  out.weights = normalize_log_weights(out.log_raw);
  return out;
}

// ---------------------------------------------------------------------------
// moments and moment metrics
// ---------------------------------------------------------------------------

struct Moments {
  std::vector<double> mean;
  Tensor cov;
};

// Unweighted estimators use the 1/(S-1) covariance convention.
inline Moments sample_moments(const Tensor& samples) {
  int s_count = samples.rows(), d = samples.cols();
  if (s_count < 2) throw std::invalid_argument("sample_moments: need at least two samples");
  Moments m;
  m.mean.assign(size_t(d), 0.0);
  for (int s = 0; s < s_count; ++s)
    for (int j = 0; j < d; ++j) m.mean[size_t(j)] += samples(s, j);
  for (double& x : m.mean) x /= s_count;
  m.cov = Tensor(d, d);
  for (int s = 0; s < s_count; ++s)
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j)
        m.cov(i, j) += (samples(s, i) - m.mean[size_t(i)]) * (samples(s, j) - m.mean[size_t(j)]);
  for (size_t k = 0; k < m.cov.size(); ++k) m.cov[k] /= double(s_count - 1);
  return m;
}

// Weighted estimators use the plain normalized-weight form.
inline Moments weighted_moments(const WeightedSampleSet& ws) {
  int s_count = ws.count(), d = ws.dim();
  Moments m;
  m.mean.assign(size_t(d), 0.0);
  for (int s = 0; s < s_count; ++s)
    for (int j = 0; j < d; ++j) m.mean[size_t(j)] += ws.weights[size_t(s)] * ws.samples(s, j);
  m.cov = Tensor(d, d);
  for (int s = 0; s < s_count; ++s)
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j)
        m.cov(i, j) += ws.weights[size_t(s)] * (ws.samples(s, i) - m.mean[size_t(i)]) *
                       (ws.samples(s, j) - m.mean[size_t(j)]);
  return m;
}

inline double metric_m1(const std::vector<double>& mu_a, const std::vector<double>& mu_b) {
  if (mu_a.size() != mu_b.size()) throw std::invalid_argument("metric_m1: dimension mismatch");
  double s = 0.0;
  for (size_t i = 0; i < mu_a.size(); ++i) s += (mu_a[i] - mu_b[i]) * (mu_a[i] - mu_b[i]);
  return std::sqrt(s);
}

inline double metric_m2(const Tensor& cov_a, const Tensor& cov_b) {
  if (!cov_a.same_shape(cov_b)) throw std::invalid_argument("metric_m2: shape mismatch");
  double s = 0.0;
  for (size_t i = 0; i < cov_a.size(); ++i) s += (cov_a[i] - cov_b[i]) * (cov_a[i] - cov_b[i]);
  return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// Sliced Wasserstein-2
// ---------------------------------------------------------------------------

// Exact squared W2 between two weighted 1-D empirical distributions by
// sweeping the merged quantile breakpoints. With uniform weights and equal
// counts this reduces to the mean squared sorted-projection difference.
inline double w2_squared_1d(std::vector<std::pair<double, double>> a,
                            std::vector<std::pair<double, double>> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  size_t ia = 0, ib = 0;
  double ca = a[0].second, cb = b[0].second;  // cumulative masses
  double pos = 0.0, acc = 0.0;
  while (ia < a.size() && ib < b.size()) {
    double next = std::min(ca, cb);
    double seg = next - pos;
    if (seg > 0.0) {
      double diff = a[ia].first - b[ib].first;
      acc += seg * diff * diff;
      pos = next;
    }
    if (ca <= cb) {
      ++ia;
      if (ia < a.size()) ca += a[ia].second;
    } else {
      ++ib;
      if (ib < b.size()) cb += b[ib].second;
    }
  }
  return acc;
}

inline Tensor random_directions(int r, int d, RngStream& rng) {
  Tensor dirs(r, d);
  for (int k = 0; k < r; ++k) {
    double norm = 0.0;
    std::vector<double> g(size_t(d), 0.0);
    do {
      norm = 0.0;
      for (int j = 0; j < d; ++j) {
        g[size_t(j)] = rng.normal();
        norm += g[size_t(j)] * g[size_t(j)];
      }
      norm = std::sqrt(norm);
    } while (norm < 1e-12);
    for (int j = 0; j < d; ++j) dirs(k, j) = g[size_t(j)] / norm;
  }
  return dirs;
}

// sqrt of the mean over directions of the squared 1-D W2 of the projections.
// Weights may be null (uniform). Unweighted use requires equal sample counts;
// subsample the larger set before calling.
inline double sliced_w2_directions(const Tensor& a, const std::vector<double>* wa,
                                   const Tensor& b, const std::vector<double>* wb,
                                   const Tensor& directions) {
  if (a.cols() != b.cols()) throw std::invalid_argument("sliced_w2: dimension mismatch");
  if (!wa && !wb && a.rows() != b.rows())
    throw std::invalid_argument("sliced_w2: unweighted use requires equal sample counts");
  int r = directions.rows(), d = directions.cols();
  if (d != a.cols()) throw std::invalid_argument("sliced_w2: direction dimension mismatch");
  double total = 0.0;
  for (int k = 0; k < r; ++k) {
    std::vector<std::pair<double, double>> pa(size_t(a.rows())), pb(size_t(b.rows()));
    for (int s = 0; s < a.rows(); ++s) {
      double proj = 0.0;
      for (int j = 0; j < d; ++j) proj += directions(k, j) * a(s, j);
      pa[size_t(s)] = {proj, wa ? (*wa)[size_t(s)] : 1.0 / a.rows()};
    }
    for (int s = 0; s < b.rows(); ++s) {
      double proj = 0.0;
      for (int j = 0; j < d; ++j) proj += directions(k, j) * b(s, j);
      pb[size_t(s)] = {proj, wb ? (*wb)[size_t(s)] : 1.0 / b.rows()};
    }
    total += w2_squared_1d(std::move(pa), std::move(pb));
  }
  return std::sqrt(total / r);
}

inline double sliced_w2(const Tensor& a, const Tensor& b, int r, RngStream& rng) {
  return sliced_w2_directions(a, nullptr, b, nullptr, random_directions(r, a.cols(), rng));
}

inline double sliced_w2_weighted(const WeightedSampleSet& a, const Tensor& b, int r,
                                 RngStream& rng) {
  return sliced_w2_directions(a.samples, &a.weights, b, nullptr,
                              random_directions(r, a.dim(), rng));
}

// ---------------------------------------------------------------------------
// Pareto-k tail diagnostic
// ---------------------------------------------------------------------------

// Generalized Pareto shape fitted to the top min(0.2 S, 3 sqrt(S)) raw
// importance ratios by the Zhang-Stephens profile-likelihood method.
// Sentinels: -inf for a constant tail, NaN when fewer than 5 tail points.
inline double pareto_k(const std::vector<double>& log_raw_weights) {
  int s_count = int(log_raw_weights.size());
  if (s_count < 25) throw std::invalid_argument("pareto_k: need S >= 25");
  int m_tail = int(std::ceil(std::min(0.2 * s_count, 3.0 * std::sqrt(double(s_count)))));
  if (m_tail < 5) return std::numeric_limits<double>::quiet_NaN();
  std::vector<double> w(log_raw_weights.size());
  double max_lw = *std::max_element(log_raw_weights.begin(), log_raw_weights.end());
  if (!std::isfinite(max_lw)) return std::numeric_limits<double>::quiet_NaN();
  for (size_t i = 0; i < w.size(); ++i) w[i] = std::exp(log_raw_weights[i] - max_lw);
  std::sort(w.begin(), w.end());
  double threshold = w[size_t(s_count - m_tail - 1)];
  std::vector<double> x(size_t(m_tail), 0.0);
  for (int i = 0; i < m_tail; ++i) x[size_t(i)] = w[size_t(s_count - m_tail + i)] - threshold;
  double x_max = x.back();
  if (x_max <= 0.0) return -std::numeric_limits<double>::infinity();
  double x_quart = x[size_t((m_tail + 2) / 4)];
  if (x_quart <= 0.0) x_quart = x_max * 1e-6;
  // profile likelihood over theta = -xi / sigma: with
  // k(theta) = mean log1p(-theta x), the GPD log likelihood is
  // M (log(-theta / k) - k - 1); the fitted shape is k(theta_hat)
  int grid = 30 + int(std::floor(std::sqrt(double(m_tail))));
  std::vector<double> bs(size_t(grid), 0.0), ll(size_t(grid), 0.0);
  for (int j = 1; j <= grid; ++j) {
    double b = 1.0 / x_max + (1.0 - std::sqrt(double(grid) / (j - 0.5))) / (3.0 * x_quart);
    double k = 0.0;
    for (double xi : x) k += std::log1p(-b * xi);
    k /= m_tail;
    double ratio = -b / k;
    bs[size_t(j - 1)] = b;
    ll[size_t(j - 1)] = (std::isfinite(ratio) && ratio > 0.0)
                            ? m_tail * (std::log(ratio) - k - 1.0)
                            : -std::numeric_limits<double>::infinity();
  }
  double ll_max = *std::max_element(ll.begin(), ll.end());
  if (!std::isfinite(ll_max)) return std::numeric_limits<double>::quiet_NaN();
  double b_hat = 0.0, norm = 0.0;
  for (int j = 0; j < grid; ++j) {
    double wgt = std::exp(ll[size_t(j)] - ll_max);
    b_hat += wgt * bs[size_t(j)];
    norm += wgt;
  }
  b_hat /= norm;
  double k_hat = 0.0;
  for (double xi : x) k_hat += std::log1p(-b_hat * xi);
  return k_hat / m_tail;
}

// ---------------------------------------------------------------------------
// weight diagnostics
// ---------------------------------------------------------------------------

struct WeightDiagnostics {
  double max_weight = 0.0;
  double entropy_ratio = 0.0;  // in [0, 1]; NaN when S = 1
  double energy_gap = 0.0;
};

inline WeightDiagnostics weight_diagnostics(const WeightedSampleSet& ws,
                                            const LogDensityFn& log_target,
                                            const Tensor& ref_samples) {
  if (ref_samples.cols() != ws.dim())
    throw std::invalid_argument("weight_diagnostics: reference dimension mismatch");
  WeightDiagnostics out;
  // ratio accumulated per term as w * (log w / log(1/S)): the uniform case
  // sums k/S terms exactly and lands on 1, the one-hot case on 0
  double log_inv_s = std::log(1.0 / ws.count());
  double ratio = 0.0;
  for (double w : ws.weights) {
    out.max_weight = std::max(out.max_weight, w);
    if (w > 0.0) ratio += w * (std::log(w) / log_inv_s);
  }
  out.entropy_ratio =
      ws.count() > 1 ? ratio + 0.0 : std::numeric_limits<double>::quiet_NaN();
  double e_approx = 0.0;
  for (int s = 0; s < ws.count(); ++s)
    e_approx += ws.weights[size_t(s)] * (-log_target(ws.sample_at(s)));
  double e_ref = 0.0;
  for (int s = 0; s < ref_samples.rows(); ++s) {
    std::vector<double> z(size_t(ref_samples.cols()), 0.0);
    for (int j = 0; j < ref_samples.cols(); ++j) z[size_t(j)] = ref_samples(s, j);
    e_ref += -log_target(z);
  }
  e_ref /= ref_samples.rows();
  out.energy_gap = e_approx - e_ref;
  return out;
}

struct PosteriorMetrics {
  double m1 = 0.0;
  double m2 = 0.0;
  double sw2 = 0.0;
  double pareto_k = std::numeric_limits<double>::quiet_NaN();
  double max_weight = std::numeric_limits<double>::quiet_NaN();
  double entropy_ratio = std::numeric_limits<double>::quiet_NaN();
  double energy_gap = std::numeric_limits<double>::quiet_NaN();
};

// ---------------------------------------------------------------------------
// Adaptive random-walk Metropolis reference sampler (desk-scale stand-in for
// a long-run gradient-based reference).
// ---------------------------------------------------------------------------

struct McmcResult {
  Tensor samples;  // post-warmup draws, iterations x d
  double acceptance_rate = 0.0;
  bool warning = false;  // acceptance outside [0.05, 0.95] after warmup
};

inline McmcResult mcmc_reference(const TaskInstance& task, int iterations, int warmup,
                                 RngStream& rng) {
  task.validate();
  if (iterations < 1 || warmup < 1)
    throw std::invalid_argument("mcmc_reference: iterations and warmup must be positive");
  int d = task.d;
  std::vector<double> z = task.prior.theta.loc;
  double log_p = log_unnormalized_posterior(task, z);

  // proposal covariance: adapted empirical covariance, Cholesky refreshed
  // periodically during warmup; scale tuned toward 0.3 acceptance
  std::vector<double> mean(z);
  Tensor cov = Tensor::identity(d);
  std::vector<double> chol = linalg::cholesky(cov.data(), d);
  double log_scale = std::log(2.38 / std::sqrt(double(d)));
  long accepted_warm = 0;
  Tensor warm_sum_outer(d, d);
  std::vector<double> warm_sum(size_t(d), 0.0);
  long warm_count = 0;
  const int refresh_interval = std::max(50, warmup / 40);

  auto propose = [&](const std::vector<double>& from) {
    std::vector<double> eps(size_t(d), 0.0);
    for (int i = 0; i < d; ++i) eps[size_t(i)] = rng.normal();
    std::vector<double> out(from);
    double scale = std::exp(log_scale);
    for (int i = 0; i < d; ++i) {
      double s = 0.0;
      for (int k = 0; k <= i; ++k) s += chol[size_t(i) * d + k] * eps[size_t(k)];
      out[size_t(i)] += scale * s;
    }
    return out;
  };

  for (int it = 0; it < warmup; ++it) {
    std::vector<double> cand = propose(z);
    double log_cand = log_unnormalized_posterior(task, cand);
    bool accept = std::log(rng.uniform()) < log_cand - log_p;
    if (accept) {
      z = std::move(cand);
      log_p = log_cand;
      ++accepted_warm;
    }
    double gamma = 1.0 / std::sqrt(double(it + 1));
    log_scale += gamma * ((accept ? 1.0 : 0.0) - 0.3);
    ++warm_count;
    for (int i = 0; i < d; ++i) {
      warm_sum[size_t(i)] += z[size_t(i)];
      for (int j = 0; j < d; ++j) warm_sum_outer(i, j) += z[size_t(i)] * z[size_t(j)];
    }
    if ((it + 1) % refresh_interval == 0 && warm_count > 2 * d) {
      for (int i = 0; i < d; ++i) mean[size_t(i)] = warm_sum[size_t(i)] / double(warm_count);
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j)
          cov(i, j) = warm_sum_outer(i, j) / double(warm_count) -
                      mean[size_t(i)] * mean[size_t(j)] + (i == j ? 1e-8 : 0.0);
      try {
        chol = linalg::cholesky(cov.data(), d);
      } catch (const std::runtime_error&) {
        // keep the previous factor when the chain has not moved enough
      }
    }
  }

  McmcResult result;
  result.samples = Tensor(iterations, d);
  long accepted = 0;
  for (int it = 0; it < iterations; ++it) {
    std::vector<double> cand = propose(z);
    double log_cand = log_unnormalized_posterior(task, cand);
    if (std::log(rng.uniform()) < log_cand - log_p) {
      z = std::move(cand);
      log_p = log_cand;
      ++accepted;
    }
    for (int i = 0; i < d; ++i) result.samples(it, i) = z[size_t(i)];
  }
  result.acceptance_rate = double(accepted) / double(iterations);
  result.warning = result.acceptance_rate < 0.05 || result.acceptance_rate > 0.95;
  return result;
}

}  // namespace afin
