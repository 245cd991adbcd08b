#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "afin/tensor.hpp"

namespace afin {

inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Independent stream derived from a master seed and a list of integer labels
// (step, micro-batch, task index, purpose, ...). Streams with distinct label
// chains are independent regardless of evaluation order, so batch generation
// is reproducible under any parallel schedule.
class RngStream {
 public:
  explicit RngStream(uint64_t seed) : eng_(mix64(seed)) {}

  static RngStream derive(uint64_t master, std::initializer_list<uint64_t> labels) {
    uint64_t s = mix64(master);
    for (uint64_t l : labels) s = mix64(s ^ mix64(l + 0x51a9ef2c37c1d0abull));
    return RngStream(s);
  }

  uint64_t next_u64() { return eng_(); }

  // Uniform on the open interval (0, 1); never returns an endpoint, so it is
  // safe inside logs.
  double uniform() { return (double(eng_() >> 11) + 0.5) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double log_uniform(double lo, double hi) { return std::exp(uniform(std::log(lo), std::log(hi))); }

  // Uniform integer in [lo, hi] inclusive.
  int uniform_int(int lo, int hi) {
    if (hi < lo) throw std::invalid_argument("uniform_int: empty range");
    uint64_t span = uint64_t(hi - lo) + 1;
    // rejection sampling to avoid modulo bias
    uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    uint64_t x;
    do {
      x = eng_();
    } while (x >= limit);
    return lo + int(x % span);
  }

  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double laplace(double loc, double scale) {
    double u = uniform() - 0.5;
    return loc - scale * (u < 0 ? -1.0 : 1.0) * std::log(1.0 - 2.0 * std::fabs(u));
  }

  // Marsaglia-Tsang; boosted for alpha < 1.
  double gamma(double alpha) {
    if (alpha <= 0.0) throw std::invalid_argument("gamma: alpha must be positive");
    if (alpha < 1.0) {
      double u = uniform();
      return gamma(alpha + 1.0) * std::pow(u, 1.0 / alpha);
    }
    double d = alpha - 1.0 / 3.0;
    double c = 1.0 / std::sqrt(9.0 * d);
    while (true) {
      double x = normal();
      double v = 1.0 + c * x;
      if (v <= 0.0) continue;
      v = v * v * v;
      double u = uniform();
      if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) return d * v;
    }
  }

  double chi_square(double nu) { return 2.0 * gamma(0.5 * nu); }

  double student_t(double nu) { return normal() / std::sqrt(chi_square(nu) / nu); }

  bool bernoulli(double p) { return uniform() < p; }

  int binomial(int n, double p) {
    int k = 0;
    for (int i = 0; i < n; ++i) k += bernoulli(p) ? 1 : 0;
    return k;
  }

  // Index draw with probabilities proportional to the given weights.
  int categorical(const std::vector<double>& weights) {
    double total = 0.0;
    for (double w : weights) {
      if (w < 0.0) throw std::invalid_argument("categorical: negative weight");
      total += w;
    }
    if (total <= 0.0) throw std::invalid_argument("categorical: zero total weight");
    double u = uniform() * total;
    double acc = 0.0;
    for (size_t i = 0; i < weights.size(); ++i) {
      acc += weights[i];
      if (u < acc) return int(i);
    }
    return int(weights.size()) - 1;
  }

  std::vector<double> dirichlet(int k, double conc) {
    std::vector<double> g(k);
    double s = 0.0;
    for (int i = 0; i < k; ++i) {
      g[i] = gamma(conc);
      s += g[i];
    }
    for (int i = 0; i < k; ++i) g[i] /= s;
    return g;
  }

  std::vector<double> normal_vector(int n, double scale = 1.0) {
    std::vector<double> v(n);
    for (int i = 0; i < n; ++i) v[i] = scale * normal();
    return v;
  }

  Tensor normal_matrix(int rows, int cols, double scale = 1.0) {
    Tensor t(rows, cols);
    for (size_t i = 0; i < t.size(); ++i) t[i] = scale * normal();
    return t;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int i = int(v.size()) - 1; i > 0; --i) {
      int j = uniform_int(0, i);
      std::swap(v[i], v[size_t(j)]);
    }
  }

  // Haar-distributed orthogonal matrix: Gram-Schmidt of a Gaussian matrix.
  // The implicit R diagonal is positive by construction, which is the
  // convention that makes the resulting Q Haar.
  Tensor haar_orthogonal(int d) {
    Tensor g = normal_matrix(d, d);
    Tensor q(d, d);
    for (int j = 0; j < d; ++j) {
      std::vector<double> v(d);
      for (int i = 0; i < d; ++i) v[i] = g(i, j);
      for (int k = 0; k < j; ++k) {
        double proj = 0.0;
        for (int i = 0; i < d; ++i) proj += q(i, k) * v[i];
        for (int i = 0; i < d; ++i) v[i] -= proj * q(i, k);
      }
      double norm = 0.0;
      for (int i = 0; i < d; ++i) norm += v[i] * v[i];
      norm = std::sqrt(norm);
      for (int i = 0; i < d; ++i) q(i, j) = v[i] / norm;
    }
    return q;
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace afin
