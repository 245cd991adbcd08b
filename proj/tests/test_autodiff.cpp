#include <catch2/catch_amalgamated.hpp>

#include "afin/autodiff.hpp"
#include "test_util.hpp"

using namespace afin;
using afin::test::fd_check_unary;
using afin::test::random_tensor;

namespace {
Value reduce(const Value& v) {
  // quadratic readout so every entry's gradient is exercised
  return op_sum_all(op_mul(v, op_add_const(v, 0.3)));
}
}  // namespace

TEST_CASE("elementwise and structural ops match finite differences") {
  RngStream rng(71);
  Tensor x = random_tensor(4, 3, rng);

  auto check = [&](const std::function<Value(Tape&, const Value&)>& fn) {
    return fd_check_unary(x, fn);
  };

  CHECK(check([](Tape&, const Value& v) { return reduce(op_gelu(v)); }) < 1e-6);
  CHECK(check([](Tape&, const Value& v) { return reduce(op_tanh(v)); }) < 1e-6);
  CHECK(check([](Tape&, const Value& v) { return reduce(op_exp(v)); }) < 1e-6);
  CHECK(check([](Tape&, const Value& v) { return reduce(op_softplus(v)); }) < 1e-6);
  CHECK(check([](Tape&, const Value& v) { return reduce(op_abs(v)); }) < 1e-6);
  CHECK(check([](Tape&, const Value& v) { return reduce(op_scale(v, -1.7)); }) < 1e-6);
  CHECK(check([](Tape&, const Value& v) { return reduce(op_softmax_rows(v)); }) < 1e-5);
  CHECK(check([](Tape&, const Value& v) {
          return reduce(op_mul(v, op_sub(v, op_add(v, op_scale(v, 0.25)))));
        }) < 1e-5);
  CHECK(check([](Tape&, const Value& v) {
          return reduce(op_concat_cols({v, op_scale(v, 2.0)}));
        }) < 1e-6);
  CHECK(check([](Tape&, const Value& v) { return reduce(op_slice_cols(v, 1, 3)); }) < 1e-6);
  CHECK(check([](Tape&, const Value& v) {
          return reduce(op_concat_rows({op_scale(v, 0.5), v}));
        }) < 1e-6);
}

TEST_CASE("matmul, bias, and scalar mixing gradients") {
  RngStream rng(72);
  Tensor x = random_tensor(5, 4, rng);
  Tensor w = random_tensor(4, 3, rng);
  Tensor b = random_tensor(1, 3, rng);

  CHECK(fd_check_unary(x, [&](Tape&, const Value& v) {
          return reduce(op_add_rowvec(op_matmul(v, Value::untracked(w)), Value::untracked(b)));
        }) < 1e-6);
  CHECK(fd_check_unary(w, [&](Tape&, const Value& v) {
          return reduce(op_matmul(Value::untracked(x), v));
        }) < 1e-6);
  Tensor b_wide = random_tensor(1, 4, rng);
  CHECK(fd_check_unary(b_wide, [&](Tape&, const Value& v) {
          return reduce(op_add_rowvec(Value::untracked(x), v));
        }) < 1e-6);

  Tensor s = Tensor::scalar(0.8);
  CHECK(fd_check_unary(s, [&](Tape&, const Value& v) {
          return reduce(op_scale_by_scalar(Value::untracked(x), v));
        }) < 1e-6);
  Tensor cv = random_tensor(5, 1, rng);
  CHECK(fd_check_unary(cv, [&](Tape&, const Value& v) {
          return reduce(op_mul_colvec(Value::untracked(x), v));
        }) < 1e-6);
}

TEST_CASE("token-block ops match finite differences") {
  RngStream rng(73);
  int T = 2, d = 3, C = 2;
  Tensor pair = random_tensor(T * d * d, C, rng);
  Tensor node = random_tensor(T * d, C, rng);

  CHECK(fd_check_unary(pair, [&](Tape&, const Value& v) {
          return reduce(op_pair_row_mean(v, T, d));
        }) < 1e-6);
  CHECK(fd_check_unary(pair, [&](Tape&, const Value& v) {
          return reduce(op_pair_col_mean(v, T, d));
        }) < 1e-6);
  CHECK(fd_check_unary(pair, [&](Tape&, const Value& v) {
          return reduce(op_pair_diag(v, T, d));
        }) < 1e-6);
  CHECK(fd_check_unary(pair, [&](Tape&, const Value& v) {
          return reduce(op_sym_pair(v, T, d));
        }) < 1e-6);
  CHECK(fd_check_unary(pair, [&](Tape&, const Value& v) {
          return reduce(op_block_mean(v, T, d * d));
        }) < 1e-6);
  CHECK(fd_check_unary(node, [&](Tape&, const Value& v) {
          return reduce(op_expand_i(v, T, d));
        }) < 1e-6);
  CHECK(fd_check_unary(node, [&](Tape&, const Value& v) {
          return reduce(op_expand_j(v, T, d));
        }) < 1e-6);
  CHECK(fd_check_unary(node, [&](Tape&, const Value& v) {
          return reduce(op_diag_embed(v, T, d));
        }) < 1e-6);
  CHECK(fd_check_unary(node, [&](Tape&, const Value& v) {
          return reduce(op_broadcast_block(op_block_mean(v, T, d), d));
        }) < 1e-6);
  CHECK(fd_check_unary(node, [&](Tape&, const Value& v) {
          return reduce(op_token_sum(v, T, d));
        }) < 1e-6);
}

TEST_CASE("layer norm gradients") {
  RngStream rng(74);
  Tensor x = random_tensor(4, 6, rng);
  Tensor gain = random_tensor(1, 6, rng, 0.5);
  Tensor bias = random_tensor(1, 6, rng, 0.5);
  for (size_t i = 0; i < gain.size(); ++i) gain[i] += 1.0;

  CHECK(fd_check_unary(x, [&](Tape&, const Value& v) {
          return reduce(op_layer_norm(v, Value::untracked(gain), Value::untracked(bias)));
        }) < 1e-5);
  CHECK(fd_check_unary(gain, [&](Tape&, const Value& v) {
          return reduce(op_layer_norm(Value::untracked(x), v, Value::untracked(bias)));
        }) < 1e-6);
  CHECK(fd_check_unary(bias, [&](Tape&, const Value& v) {
          return reduce(op_layer_norm(Value::untracked(x), Value::untracked(gain), v));
        }) < 1e-6);
}

TEST_CASE("attention ops match finite differences") {
  RngStream rng(75);
  int T = 3, d = 2, C = 4;
  Tensor q = random_tensor(T * d, C, rng);
  Tensor k = random_tensor(T * d, C, rng);
  Tensor v = random_tensor(T * d, C, rng);
  Tensor a(T, T);
  {
    RngStream r2(12);
    for (int n = 0; n < T; ++n) {
      double total = 0.0;
      for (int l = 0; l < T; ++l) {
        a(n, l) = r2.uniform() + 0.1;
        total += a(n, l);
      }
      for (int l = 0; l < T; ++l) a(n, l) /= total;
    }
  }

  CHECK(fd_check_unary(q, [&](Tape&, const Value& vq) {
          return reduce(op_token_gram(vq, Value::untracked(k), T, d, 1, 3, 0.5));
        }) < 1e-6);
  CHECK(fd_check_unary(k, [&](Tape&, const Value& vk) {
          return reduce(op_token_gram(Value::untracked(q), vk, T, d, 0, 4, 0.25));
        }) < 1e-6);
  CHECK(fd_check_unary(v, [&](Tape&, const Value& vv) {
          return reduce(op_attend(Value::untracked(a), vv, T, d, 1, 4));
        }) < 1e-6);
  CHECK(fd_check_unary(a, [&](Tape&, const Value& va) {
          return reduce(op_attend(va, Value::untracked(v), T, d, 0, 2));
        }) < 1e-6);
}

TEST_CASE("gaussian log density and cholesky ops match finite differences") {
  RngStream rng(76);
  int d = 3;
  Tensor mu = random_tensor(d, 1, rng);
  Tensor z = random_tensor(d, 1, rng);
  // SPD lambda via A A^T + I
  Tensor a = random_tensor(d, d, rng, 0.4);
  Tensor lambda(d * d, 1);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      double s = (i == j) ? 1.0 : 0.0;
      for (int k2 = 0; k2 < d; ++k2) s += a(i, k2) * a(j, k2);
      lambda(i * d + j, 0) = s;
    }

  CHECK(fd_check_unary(mu, [&](Tape&, const Value& vm) {
          return op_gaussian_logpdf(vm, Value::untracked(lambda), z);
        }) < 1e-6);
  // lambda must stay SPD and exactly symmetric under probing, so wiggle a
  // pre-symmetrization matrix instead
  Tensor raw = lambda;
  auto lambda_graph = [&](Tape&, const Value& vraw) {
    Value sym = op_sym_pair(vraw, 1, d);
    Value diag_boost = op_diag_embed(
        op_add_const(op_scale(op_pair_diag(sym, 1, d), 0.0), 0.6), 1, d);
    return op_add(sym, diag_boost);
  };
  CHECK(fd_check_unary(raw, [&](Tape& t, const Value& vraw) {
          return op_gaussian_logpdf(Value::untracked(mu), lambda_graph(t, vraw), z);
        }) < 1e-5);
  CHECK(fd_check_unary(raw, [&](Tape& t, const Value& vraw) {
          return op_chol_half_logdet(lambda_graph(t, vraw), d);
        }) < 1e-5);
  Tensor x = random_tensor(d, 1, rng);
  CHECK(fd_check_unary(raw, [&](Tape& t, const Value& vraw) {
          return reduce(op_chol_upper_apply(lambda_graph(t, vraw), Value::untracked(x), d));
        }) < 1e-5);
  CHECK(fd_check_unary(x, [&](Tape&, const Value& vx) {
          return reduce(op_chol_upper_apply(Value::untracked(lambda), vx, d));
        }) < 1e-6);
}

TEST_CASE("untracked values propagate without recording") {
  Tensor x(2, 2);
  x.fill(1.0);
  Value v = Value::untracked(x);
  Value out = op_sum_all(op_gelu(op_matmul(v, v)));
  CHECK_FALSE(out.tracked());
  CHECK(out.val()[0] == Catch::Approx(4.0 * (0.5 * 2.0 * (1.0 + std::erf(2.0 / std::sqrt(2.0))))));
}

TEST_CASE("gradient accumulation is deterministic across repeated runs") {
  RngStream rng(77);
  Tensor w = random_tensor(3, 3, rng);
  auto run = [&]() {
    Tape tape;
    Value vw = tape.leaf(w, 0);
    Value out = op_sum_all(op_gelu(op_matmul(vw, op_gelu(vw))));
    tape.backward(out);
    return tape.grad(vw.node());
  };
  Tensor g1 = run(), g2 = run();
  for (size_t i = 0; i < g1.size(); ++i) CHECK(g1[i] == g2[i]);
}
