#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "afin/autodiff.hpp"
#include "afin/factor_model.hpp"
#include "afin/rng.hpp"

namespace afin::test {

inline Tensor random_tensor(int rows, int cols, RngStream& rng, double scale = 1.0) {
  Tensor t(rows, cols);
  for (size_t i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
  return t;
}

// Central-difference check of d(scalar output)/d(input tensor) against the
// tape gradient, for a graph built by `fn` from a single tracked input.
inline double fd_check_unary(const Tensor& input,
                             const std::function<Value(Tape&, const Value&)>& fn,
                             double h = 1e-6) {
  Tape tape;
  Tensor x = input;
  Value vx = tape.leaf(x);
  Value out = fn(tape, vx);
  tape.backward(out);
  const Tensor& analytic = tape.grad(vx.node());
  double worst = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    double saved = x[i];
    x[i] = saved + h;
    Tape t_up;
    double up = fn(t_up, t_up.leaf(x)).val()[0];
    x[i] = saved - h;
    Tape t_dn;
    double down = fn(t_dn, t_dn.leaf(x)).val()[0];
    x[i] = saved;
    double numeric = (up - down) / (2.0 * h);
    double denom = std::max({std::fabs(analytic[i]), std::fabs(numeric), 1e-7});
    worst = std::max(worst, std::fabs(analytic[i] - numeric) / denom);
  }
  return worst;
}

// Conjugate 1-D task: N(mu0, sigma0^2) prior, lin-Gaussian observations.
inline TaskInstance conjugate_task_1d(double mu0, double sigma0,
                                      const std::vector<double>& xs,
                                      const std::vector<double>& ys,
                                      const std::vector<double>& sigmas) {
  TaskInstance task;
  task.d = 1;
  task.prior.factor_type = FactorType::kDiagGaussian;
  task.prior.theta.loc = {mu0};
  task.prior.theta.scale_vec = {sigma0};
  for (size_t i = 0; i < xs.size(); ++i) {
    FactorSpec f;
    f.factor_type = FactorType::kLinGaussian;
    f.covariate = std::vector<double>{xs[i]};
    f.observation = ys[i];
    f.theta.scale = sigmas[i];
    task.likelihoods.push_back(f);
  }
  return task;
}

inline std::vector<int> random_permutation(int n, RngStream& rng) {
  std::vector<int> p(static_cast<size_t>(n), 0);
  for (int i = 0; i < n; ++i) p[size_t(i)] = i;
  rng.shuffle(p);
  return p;
}

}  // namespace afin::test
