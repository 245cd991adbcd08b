#pragma once

#include <cmath>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "afin/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace afin {

// ---------------------------------------------------------------------------
// Reverse-mode tape over dense 2-D tensors.
//
// Values are either tracked (a node on a tape) or untracked (a plain tensor).
// The same forward code serves training (tracked, gradients exact) and
// inference (untracked, intermediates freed as soon as the last handle dies),
// which keeps large no-grad forwards within memory bounds.
// ---------------------------------------------------------------------------

class Tape;

class Value {
 public:
  Value() = default;
  Value(std::shared_ptr<const Tensor> v, Tape* tape, int node)
      : v_(std::move(v)), tape_(tape), node_(node) {}

  static Value untracked(Tensor t) {
    return Value(std::make_shared<Tensor>(std::move(t)), nullptr, -1);
  }
  // Borrow without copying; the referenced tensor must outlive the Value.
  static Value borrowed(const Tensor& t) {
    return Value(std::shared_ptr<const Tensor>(&t, [](const Tensor*) {}), nullptr, -1);
  }

  const Tensor& val() const {
    if (!v_) throw std::runtime_error("Value: empty");
    return *v_;
  }
  std::shared_ptr<const Tensor> ptr() const { return v_; }
  bool tracked() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int node() const { return node_; }
  int rows() const { return val().rows(); }
  int cols() const { return val().cols(); }

 private:
  std::shared_ptr<const Tensor> v_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

class Tape {
 public:
  struct Node {
    std::shared_ptr<const Tensor> val;
    Tensor grad;  // allocated lazily in backward()
    std::function<void(Tape&, const Tensor&)> backward;  // adds into parents
    bool grad_ready = false;
  };

  Value leaf(const Tensor& t, int param_id = -1) {
    int id = add_node(std::shared_ptr<const Tensor>(&t, [](const Tensor*) {}));
    if (param_id >= 0) param_leaves_.emplace_back(param_id, id);
    return Value(nodes_[id].val, this, id);
  }

  Value record(Tensor result, std::function<void(Tape&, const Tensor&)> backward) {
    auto p = std::make_shared<Tensor>(std::move(result));
    int id = add_node(p);
    nodes_[id].backward = std::move(backward);
    return Value(p, this, id);
  }

  Tensor& grad(int node) {
    Node& n = nodes_[size_t(node)];
    if (!n.grad_ready) {
      n.grad = Tensor(n.val->rows(), n.val->cols());
      n.grad_ready = true;
    }
    return n.grad;
  }
  bool has_grad(int node) const { return nodes_[size_t(node)].grad_ready; }

  // Seeds d(out)/d(out) = seed and sweeps the tape in reverse creation order.
  void backward(const Value& out, double seed = 1.0) {
    if (out.tape() != this) throw std::runtime_error("backward: value not on this tape");
    if (out.val().size() != 1) throw std::runtime_error("backward: output must be scalar");
    grad(out.node())[0] += seed;
    for (int i = int(nodes_.size()) - 1; i >= 0; --i) {
      Node& n = nodes_[size_t(i)];
      if (n.backward && n.grad_ready) n.backward(*this, n.grad);
    }
  }

  // Deterministic, leaf-creation-ordered accumulation into external slots.
  template <typename Fn>
  void for_each_param_grad(Fn&& fn) const {
    for (const auto& [pid, node] : param_leaves_) {
      const Node& n = nodes_[size_t(node)];
      if (n.grad_ready) fn(pid, n.grad);
    }
  }

  size_t node_count() const { return nodes_.size(); }
  void clear() {
    nodes_.clear();
    param_leaves_.clear();
  }

 private:
  int add_node(std::shared_ptr<const Tensor> v) {
    nodes_.push_back(Node{std::move(v), Tensor(), nullptr, false});
    return int(nodes_.size()) - 1;
  }

  std::vector<Node> nodes_;
  std::vector<std::pair<int, int>> param_leaves_;
};

namespace detail {

inline Tape* result_tape(std::initializer_list<const Value*> ins) {
  Tape* t = nullptr;
  for (const Value* v : ins) {
    if (v->tracked()) {
      if (t && t != v->tape()) throw std::runtime_error("op: values on different tapes");
      t = v->tape();
    }
  }
  return t;
}

inline void check(bool cond, const char* msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace detail

// ---- elementwise and structural ops ----------------------------------------

inline Value op_add(const Value& a, const Value& b) {
  detail::check(a.val().same_shape(b.val()), "add: shape mismatch");
  Tensor out = a.val();
  for (size_t i = 0; i < out.size(); ++i) out[i] += b.val()[i];
  Tape* tp = detail::result_tape({&a, &b});
  if (!tp) return Value::untracked(std::move(out));
  int na = a.node(), nb = b.node();
  bool ta = a.tracked(), tb = b.tracked();
  return tp->record(std::move(out), [=](Tape& t, const Tensor& g) {
    if (ta) {
      Tensor& ga = t.grad(na);
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tb) {
      Tensor& gb = t.grad(nb);
      for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
}

inline Value op_sub(const Value& a, const Value& b) {
  detail::check(a.val().same_shape(b.val()), "sub: shape mismatch");
  Tensor out = a.val();
  for (size_t i = 0; i < out.size(); ++i) out[i] -= b.val()[i];
  Tape* tp = detail::result_tape({&a, &b});
  if (!tp) return Value::untracked(std::move(out));
  int na = a.node(), nb = b.node();
  bool ta = a.tracked(), tb = b.tracked();
  return tp->record(std::move(out), [=](Tape& t, const Tensor& g) {
    if (ta) {
      Tensor& ga = t.grad(na);
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tb) {
      Tensor& gb = t.grad(nb);
      for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

inline Value op_mul(const Value& a, const Value& b) {
  detail::check(a.val().same_shape(b.val()), "mul: shape mismatch");
  Tensor out = a.val();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= b.val()[i];
  Tape* tp = detail::result_tape({&a, &b});
  if (!tp) return Value::untracked(std::move(out));
  auto av = a.ptr();
  auto bv = b.ptr();
  int na = a.node(), nb = b.node();
  bool ta = a.tracked(), tb = b.tracked();
  return tp->record(std::move(out), [=](Tape& t, const Tensor& g) {
    if (ta) {
      Tensor& ga = t.grad(na);
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*bv)[i];
    }
    if (tb) {
      Tensor& gb = t.grad(nb);
      for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * (*av)[i];
    }
  });
}

inline Value op_scale(const Value& a, double c) {
  Tensor out = a.val();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= c;
  if (!a.tracked()) return Value::untracked(std::move(out));
  int na = a.node();
  return a.tape()->record(std::move(out), [=](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(na);
    for (size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
  });
}

inline Value op_add_const(const Value& a, double c) {
  Tensor out = a.val();
  for (size_t i = 0; i < out.size(); ++i) out[i] += c;
  if (!a.tracked()) return Value::untracked(std::move(out));
  int na = a.node();
  return a.tape()->record(std::move(out), [=](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(na);
    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

// Multiply every entry by a learned scalar held in a 1x1 tensor.
inline Value op_scale_by_scalar(const Value& a, const Value& s) {
  detail::check(s.val().size() == 1, "scale_by_scalar: scalar must be 1x1");
  double c = s.val()[0];
  Tensor out = a.val();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= c;
  Tape* tp = detail::result_tape({&a, &s});
  if (!tp) return Value::untracked(std::move(out));
  auto av = a.ptr();
  int na = a.node(), ns = s.node();
  bool ta = a.tracked(), ts = s.tracked();
  return tp->record(std::move(out), [=](Tape& t, const Tensor& g) {
    if (ta) {
      Tensor& ga = t.grad(na);
      for (size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
    }
    if (ts) {
      double acc = 0.0;
      for (size_t i = 0; i < g.size(); ++i) acc += g[i] * (*av)[i];
      t.grad(ns)[0] += acc;
    }
  });
}

// Broadcast a column vector (R x 1) across all C channels of x (R x C).
inline Value op_mul_colvec(const Value& x, const Value& v) {
  detail::check(v.cols() == 1 && v.rows() == x.rows(), "mul_colvec: shape mismatch");
  int R = x.rows(), C = x.cols();
  Tensor out = x.val();
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c) out(r, c) *= v.val()(r, 0);
  Tape* tp = detail::result_tape({&x, &v});
  if (!tp) return Value::untracked(std::move(out));
  auto xv = x.ptr();
  auto vv = v.ptr();
  int nx = x.node(), nv = v.node();
  bool tx = x.tracked(), tv = v.tracked();
  return tp->record(std::move(out), [=](Tape& t, const Tensor& g) {
    if (tx) {
      Tensor& gx = t.grad(nx);
      for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) gx(r, c) += g(r, c) * (*vv)(r, 0);
    }
    if (tv) {
      Tensor& gv = t.grad(nv);
      for (int r = 0; r < R; ++r) {
        double acc = 0.0;
        for (int c = 0; c < C; ++c) acc += g(r, c) * (*xv)(r, c);
        gv(r, 0) += acc;
      }
    }
  });
}

namespace kern {

inline void matmul(const Tensor& a, const Tensor& b, Tensor& out, bool transpose_a = false,
                   bool transpose_b = false) {
  int M = transpose_a ? a.cols() : a.rows();
  int K = transpose_a ? a.rows() : a.cols();
  int Kb = transpose_b ? b.cols() : b.rows();
  int N = transpose_b ? b.rows() : b.cols();
  if (K != Kb) throw std::invalid_argument("matmul: inner dimension mismatch");
  if (out.rows() != M || out.cols() != N) throw std::invalid_argument("matmul: bad output shape");
  const double* A = a.data();
  const double* B = b.data();
  double* O = out.data();
  int lda = a.cols(), ldb = b.cols();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (size_t(M) * N * K > 2000000)
#endif
  for (int i = 0; i < M; ++i) {
    double* orow = O + size_t(i) * N;
    for (int k = 0; k < K; ++k) {
      double av = transpose_a ? A[size_t(k) * lda + i] : A[size_t(i) * lda + k];
      if (av == 0.0) continue;
      if (transpose_b) {
        const double* brow = B + 0;
        for (int j = 0; j < N; ++j) orow[j] += av * brow[size_t(j) * ldb + k];
      } else {
        const double* brow = B + size_t(k) * ldb;
        for (int j = 0; j < N; ++j) orow[j] += av * brow[j];
      }
    }
  }
}

}  // namespace kern

inline Value op_matmul(const Value& a, const Value& b) {
  Tensor out(a.rows(), b.cols());
  kern::matmul(a.val(), b.val(), out);
  Tape* tp = detail::result_tape({&a, &b});
  if (!tp) return Value::untracked(std::move(out));
  auto av = a.ptr();
  auto bv = b.ptr();
  int na = a.node(), nb = b.node();
  bool ta = a.tracked(), tb = b.tracked();
  return tp->record(std::move(out), [=](Tape& t, const Tensor& g) {
    if (ta) kern::matmul(g, *bv, t.grad(na), false, true);   // dA = G B^T
    if (tb) kern::matmul(*av, g, t.grad(nb), true, false);   // dB = A^T G
  });
}

// Add a 1 x C bias row to every row of x.
inline Value op_add_rowvec(const Value& x, const Value& b) {
  detail::check(b.rows() == 1 && b.cols() == x.cols(), "add_rowvec: shape mismatch");
  int R = x.rows(), C = x.cols();
  Tensor out = x.val();
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c) out(r, c) += b.val()(0, c);
  Tape* tp = detail::result_tape({&x, &b});
  if (!tp) return Value::untracked(std::move(out));
  int nx = x.node(), nb = b.node();
  bool tx = x.tracked(), tb = b.tracked();
  return tp->record(std::move(out), [=](Tape& t, const Tensor& g) {
    if (tx) {
      Tensor& gx = t.grad(nx);
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (tb) {
      Tensor& gb = t.grad(nb);
      for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) gb(0, c) += g(r, c);
    }
  });
}

inline Value op_gelu(const Value& a) {
  static const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  static const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * M_PI);
  Tensor out = a.val();
  for (size_t i = 0; i < out.size(); ++i) {
    double x = out[i];
    out[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
  }
  if (!a.tracked()) return Value::untracked(std::move(out));
  auto av = a.ptr();
  int na = a.node();
  return a.tape()->record(std::move(out), [=](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(na);
    for (size_t i = 0; i < g.size(); ++i) {
      double x = (*av)[i];
      double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
      double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
      ga[i] += g[i] * (cdf + x * pdf);
    }
  });
}

inline Value op_tanh(const Value& a) {
  Tensor out = a.val();
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(out[i]);
  if (!a.tracked()) return Value::untracked(std::move(out));
  int na = a.node();
  auto ov = std::make_shared<Tensor>(out);
  return a.tape()->record(std::move(out), [=](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(na);
    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - (*ov)[i] * (*ov)[i]);
  });
}

inline Value op_exp(const Value& a) {
  Tensor out = a.val();
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(out[i]);
  if (!a.tracked()) return Value::untracked(std::move(out));
  int na = a.node();
  auto ov = std::make_shared<Tensor>(out);
  return a.tape()->record(std::move(out), [=](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(na);
    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*ov)[i];
  });
}

inline Value op_softplus(const Value& a) {
  Tensor out = a.val();
  for (size_t i = 0; i < out.size(); ++i) {
    double x = out[i];
    out[i] = x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
  }
  if (!a.tracked()) return Value::untracked(std::move(out));
  auto av = a.ptr();
  int na = a.node();
  return a.tape()->record(std::move(out), [=](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(na);
    for (size_t i = 0; i < g.size(); ++i) {
      double x = (*av)[i];
      double sig = x > 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      ga[i] += g[i] * sig;
    }
  });
}

// |x| with subgradient 0 at the origin.
inline Value op_abs(const Value& a) {
  Tensor out = a.val();
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::fabs(out[i]);
  if (!a.tracked()) return Value::untracked(std::move(out));
  auto av = a.ptr();
  int na = a.node();
  return a.tape()->record(std::move(out), [=](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(na);
    for (size_t i = 0; i < g.size(); ++i) {
      double x = (*av)[i];
      ga[i] += g[i] * (x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0));
    }
  });
}

inline Value op_square(const Value& a) { return op_mul(a, a); }

inline Value op_sum_all(const Value& a) {
  double s = 0.0;
  for (size_t i = 0; i < a.val().size(); ++i) s += a.val()[i];
  Tensor out = Tensor::scalar(s);
  if (!a.tracked()) return Value::untracked(std::move(out));
  int na = a.node();
  return a.tape()->record(std::move(out), [=](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(na);
    for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[0];
  });
}

inline Value op_concat_cols(const std::vector<Value>& xs) {
  detail::check(!xs.empty(), "concat_cols: empty input");
  int R = xs[0].rows();
  int C = 0;
  for (const Value& x : xs) {
    detail::check(x.rows() == R, "concat_cols: row mismatch");
    C += x.cols();
  }
  Tensor out(R, C);
  int off = 0;
  for (const Value& x : xs) {
    int c = x.cols();
    for (int r = 0; r < R; ++r)
      for (int j = 0; j < c; ++j) out(r, off + j) = x.val()(r, j);
    off += c;
  }
  Tape* tp = nullptr;
  for (const Value& x : xs)
    if (x.tracked()) tp = x.tape();
  if (!tp) return Value::untracked(std::move(out));
  struct Piece {
    int node, off, cols;
    bool tracked;
  };
  std::vector<Piece> pieces;
  off = 0;
  for (const Value& x : xs) {
    pieces.push_back({x.node(), off, x.cols(), x.tracked()});
    off += x.cols();
  }
  return tp->record(std::move(out), [pieces, R](Tape& t, const Tensor& g) {
    for (const Piece& p : pieces) {
      if (!p.tracked) continue;
      Tensor& gx = t.grad(p.node);
      for (int r = 0; r < R; ++r)
        for (int j = 0; j < p.cols; ++j) gx(r, j) += g(r, p.off + j);
    }
  });
}

inline Value op_concat_rows(const std::vector<Value>& xs) {
  detail::check(!xs.empty(), "concat_rows: empty input");
  int C = xs[0].cols();
  int R = 0;
  for (const Value& x : xs) {
    detail::check(x.cols() == C, "concat_rows: column mismatch");
    R += x.rows();
  }
  Tensor out(R, C);
  int off = 0;
  for (const Value& x : xs) {
    for (int r = 0; r < x.rows(); ++r)
      for (int c = 0; c < C; ++c) out(off + r, c) = x.val()(r, c);
    off += x.rows();
  }
  Tape* tp = nullptr;
  for (const Value& x : xs)
    if (x.tracked()) tp = x.tape();
  if (!tp) return Value::untracked(std::move(out));
  struct Piece {
    int node, off, rows;
    bool tracked;
  };
  std::vector<Piece> pieces;
  off = 0;
  for (const Value& x : xs) {
    pieces.push_back({x.node(), off, x.rows(), x.tracked()});
    off += x.rows();
  }
  return tp->record(std::move(out), [pieces, C](Tape& t, const Tensor& g) {
    for (const Piece& p : pieces) {
      if (!p.tracked) continue;
      Tensor& gx = t.grad(p.node);
      for (int r = 0; r < p.rows; ++r)
        for (int c = 0; c < C; ++c) gx(r, c) += g(p.off + r, c);
    }
  });
}

inline Value op_slice_cols(const Value& x, int lo, int hi) {
  detail::check(0 <= lo && lo < hi && hi <= x.cols(), "slice_cols: bad range");
  int R = x.rows(), C = hi - lo;
  Tensor out(R, C);
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c) out(r, c) = x.val()(r, lo + c);
  if (!x.tracked()) return Value::untracked(std::move(out));
  int nx = x.node();
  return x.tape()->record(std::move(out), [=](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad(nx);
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < C; ++c) gx(r, lo + c) += g(r, c);
  });
}

// ---- token-block structural ops --------------------------------------------
//
// Stacked layouts: a list of T per-factor tensors is stored as one
// (T*rpt) x C tensor, where rpt is d for node components and d*d for pair
// components. Pair rows are indexed i*d + j within a block.

// Per-token mean over the rpt rows of each block: (T*rpt) x C -> T x C.
inline Value op_block_mean(const Value& x, int T, int rpt) {
  detail::check(x.rows() == T * rpt, "block_mean: row mismatch");
  int C = x.cols();
  Tensor out(T, C);
  for (int n = 0; n < T; ++n)
    for (int r = 0; r < rpt; ++r)
      for (int c = 0; c < C; ++c) out(n, c) += x.val()(n * rpt + r, c);
  for (size_t i = 0; i < out.size(); ++i) out[i] /= rpt;
  if (!x.tracked()) return Value::untracked(std::move(out));
  int nx = x.node();
  return x.tape()->record(std::move(out), [=](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad(nx);
    double inv = 1.0 / rpt;
    for (int n = 0; n < T; ++n)
      for (int r = 0; r < rpt; ++r)
        for (int c = 0; c < C; ++c) gx(n * rpt + r, c) += inv * g(n, c);
  });
}

// Repeat each token row rpt times: T x C -> (T*rpt) x C.
inline Value op_broadcast_block(const Value& x, int rpt) {
  int T = x.rows(), C = x.cols();
  Tensor out(T * rpt, C);
  for (int n = 0; n < T; ++n)
    for (int r = 0; r < rpt; ++r)
      for (int c = 0; c < C; ++c) out(n * rpt + r, c) = x.val()(n, c);
  if (!x.tracked()) return Value::untracked(std::move(out));
  int nx = x.node();
  return x.tape()->record(std::move(out), [=](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad(nx);
    for (int n = 0; n < T; ++n)
      for (int r = 0; r < rpt; ++r)
        for (int c = 0; c < C; ++c) gx(n, c) += g(n * rpt + r, c);
  });
}

// row(E^pair)_i = mean_j pair_{ij}: (T*d*d) x C -> (T*d) x C.
inline Value op_pair_row_mean(const Value& pair, int T, int d) {
  detail::check(pair.rows() == T * d * d, "pair_row_mean: row mismatch");
  int C = pair.cols();
  Tensor out(T * d, C);
  for (int n = 0; n < T; ++n)
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j)
        for (int c = 0; c < C; ++c) out(n * d + i, c) += pair.val()((n * d + i) * d + j, c);
  for (size_t i = 0; i < out.size(); ++i) out[i] /= d;
  if (!pair.tracked()) return Value::untracked(std::move(out));
  int np = pair.node();
  return pair.tape()->record(std::move(out), [=](Tape& t, const Tensor& g) {
    Tensor& gp = t.grad(np);
    double inv = 1.0 / d;
    for (int n = 0; n < T; ++n)
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j)
          for (int c = 0; c < C; ++c) gp((n * d + i) * d + j, c) += inv * g(n * d + i, c);
  });
}

// col(E^pair)_j = mean_i pair_{ij}: (T*d*d) x C -> (T*d) x C.
inline Value op_pair_col_mean(const Value& pair, int T, int d) {
  detail::check(pair.rows() == T * d * d, "pair_col_mean: row mismatch");
  int C = pair.cols();
  Tensor out(T * d, C);
  for (int n = 0; n < T; ++n)
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j)
        for (int c = 0; c < C; ++c) out(n * d + j, c) += pair.val()((n * d + i) * d + j, c);
  for (size_t i = 0; i < out.size(); ++i) out[i] /= d;
  if (!pair.tracked()) return Value::untracked(std::move(out));
  int np = pair.node();
  return pair.tape()->record(std::move(out), [=](Tape& t, const Tensor& g) {
    Tensor& gp = t.grad(np);
    double inv = 1.0 / d;
    for (int n = 0; n < T; ++n)
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j)
          for (int c = 0; c < C; ++c) gp((n * d + i) * d + j, c) += inv * g(n * d + j, c);
  });
}

// diag(E^pair)_i = pair_{ii}: (T*d*d) x C -> (T*d) x C.
inline Value op_pair_diag(const Value& pair, int T, int d) {
  detail::check(pair.rows() == T * d * d, "pair_diag: row mismatch");
  int C = pair.cols();
  Tensor out(T * d, C);
  for (int n = 0; n < T; ++n)
    for (int i = 0; i < d; ++i)
      for (int c = 0; c < C; ++c) out(n * d + i, c) = pair.val()((n * d + i) * d + i, c);
  if (!pair.tracked()) return Value::untracked(std::move(out));
  int np = pair.node();
  return pair.tape()->record(std::move(out), [=](Tape& t, const Tensor& g) {
    Tensor& gp = t.grad(np);
    for (int n = 0; n < T; ++n)
      for (int i = 0; i < d; ++i)
        for (int c = 0; c < C; ++c) gp((n * d + i) * d + i, c) += g(n * d + i, c);
  });
}

// Embed a per-coordinate tensor on the pair diagonal: (T*d) x C -> (T*d*d) x C.
inline Value op_diag_embed(const Value& x, int T, int d) {
  detail::check(x.rows() == T * d, "diag_embed: row mismatch");
  int C = x.cols();
  Tensor out(T * d * d, C);
  for (int n = 0; n < T; ++n)
    for (int i = 0; i < d; ++i)
      for (int c = 0; c < C; ++c) out((n * d + i) * d + i, c) = x.val()(n * d + i, c);
  if (!x.tracked()) return Value::untracked(std::move(out));
  int nx = x.node();
  return x.tape()->record(std::move(out), [=](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad(nx);
    for (int n = 0; n < T; ++n)
      for (int i = 0; i < d; ++i)
        for (int c = 0; c < C; ++c) gx(n * d + i, c) += g((n * d + i) * d + i, c);
  });
}

// Spread node rows over the pair grid by the first index: out_{ij} = x_i.
inline Value op_expand_i(const Value& x, int T, int d) {
  detail::check(x.rows() == T * d, "expand_i: row mismatch");
  int C = x.cols();
  Tensor out(T * d * d, C);
  for (int n = 0; n < T; ++n)
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j)
        for (int c = 0; c < C; ++c) out((n * d + i) * d + j, c) = x.val()(n * d + i, c);
  if (!x.tracked()) return Value::untracked(std::move(out));
  int nx = x.node();
  return x.tape()->record(std::move(out), [=](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad(nx);
    for (int n = 0; n < T; ++n)
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j)
          for (int c = 0; c < C; ++c) gx(n * d + i, c) += g((n * d + i) * d + j, c);
  });
}

// Spread node rows over the pair grid by the second index: out_{ij} = x_j.
inline Value op_expand_j(const Value& x, int T, int d) {
  detail::check(x.rows() == T * d, "expand_j: row mismatch");
  int C = x.cols();
  Tensor out(T * d * d, C);
  for (int n = 0; n < T; ++n)
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j)
        for (int c = 0; c < C; ++c) out((n * d + i) * d + j, c) = x.val()(n * d + j, c);
  if (!x.tracked()) return Value::untracked(std::move(out));
  int nx = x.node();
  return x.tape()->record(std::move(out), [=](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad(nx);
    for (int n = 0; n < T; ++n)
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j)
          for (int c = 0; c < C; ++c) gx(n * d + j, c) += g((n * d + i) * d + j, c);
  });
}

// sym(X)_{ij} = (X_{ij} + X_{ji}) / 2 per token block. Self-adjoint.
inline Value op_sym_pair(const Value& pair, int T, int d) {
  detail::check(pair.rows() == T * d * d, "sym_pair: row mismatch");
  int C = pair.cols();
  Tensor out(T * d * d, C);
  for (int n = 0; n < T; ++n)
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j)
        for (int c = 0; c < C; ++c)
          out((n * d + i) * d + j, c) =
              0.5 * (pair.val()((n * d + i) * d + j, c) + pair.val()((n * d + j) * d + i, c));
  if (!pair.tracked()) return Value::untracked(std::move(out));
  int np = pair.node();
  return pair.tape()->record(std::move(out), [=](Tape& t, const Tensor& g) {
    Tensor& gp = t.grad(np);
    for (int n = 0; n < T; ++n)
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j)
          for (int c = 0; c < C; ++c)
            gp((n * d + i) * d + j, c) +=
                0.5 * (g((n * d + i) * d + j, c) + g((n * d + j) * d + i, c));
  });
}

// Sum over the token axis: (T*rpt) x C -> rpt x C.
inline Value op_token_sum(const Value& x, int T, int rpt) {
  detail::check(x.rows() == T * rpt, "token_sum: row mismatch");
  int C = x.cols();
  Tensor out(rpt, C);
  for (int n = 0; n < T; ++n)
    for (int r = 0; r < rpt; ++r)
      for (int c = 0; c < C; ++c) out(r, c) += x.val()(n * rpt + r, c);
  if (!x.tracked()) return Value::untracked(std::move(out));
  int nx = x.node();
  return x.tape()->record(std::move(out), [=](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad(nx);
    for (int n = 0; n < T; ++n)
      for (int r = 0; r < rpt; ++r)
        for (int c = 0; c < C; ++c) gx(n * rpt + r, c) += g(r, c);
  });
}

// ---- normalization, attention ----------------------------------------------

// Layer normalization over the channel axis, independently at each row,
// with learned per-channel gain and bias (1 x C each).
inline Value op_layer_norm(const Value& x, const Value& gain, const Value& bias,
                           double eps = 1e-5) {
  int R = x.rows(), C = x.cols();
  detail::check(gain.rows() == 1 && gain.cols() == C, "layer_norm: gain shape");
  detail::check(bias.rows() == 1 && bias.cols() == C, "layer_norm: bias shape");
  Tensor out(R, C);
  Tensor mu(R, 1), inv_sd(R, 1);
  for (int r = 0; r < R; ++r) {
    double m = 0.0;
    for (int c = 0; c < C; ++c) m += x.val()(r, c);
    m /= C;
    double var = 0.0;
    for (int c = 0; c < C; ++c) {
      double dcen = x.val()(r, c) - m;
      var += dcen * dcen;
    }
    var /= C;
    double is = 1.0 / std::sqrt(var + eps);
    mu(r, 0) = m;
    inv_sd(r, 0) = is;
    for (int c = 0; c < C; ++c)
      out(r, c) = gain.val()(0, c) * (x.val()(r, c) - m) * is + bias.val()(0, c);
  }
  Tape* tp = detail::result_tape({&x, &gain, &bias});
  if (!tp) return Value::untracked(std::move(out));
  auto xv = x.ptr();
  auto gv = gain.ptr();
  auto muv = std::make_shared<Tensor>(std::move(mu));
  auto isv = std::make_shared<Tensor>(std::move(inv_sd));
  int nx = x.node(), ng = gain.node(), nb = bias.node();
  bool tx = x.tracked(), tg = gain.tracked(), tb = bias.tracked();
  return tp->record(std::move(out), [=](Tape& t, const Tensor& g) {
    for (int r = 0; r < R; ++r) {
      double m = (*muv)(r, 0), is = (*isv)(r, 0);
      if (tx) {
        // dL/dxhat_c = g_c * gain_c ; backprop through (x - m) * is
        double sum_gh = 0.0, sum_gh_xhat = 0.0;
        for (int c = 0; c < C; ++c) {
          double xhat = ((*xv)(r, c) - m) * is;
          double gh = g(r, c) * (*gv)(0, c);
          sum_gh += gh;
          sum_gh_xhat += gh * xhat;
        }
        Tensor& gx = t.grad(nx);
        for (int c = 0; c < C; ++c) {
          double xhat = ((*xv)(r, c) - m) * is;
          double gh = g(r, c) * (*gv)(0, c);
          gx(r, c) += is * (gh - sum_gh / C - xhat * sum_gh_xhat / C);
        }
      }
      if (tg) {
        Tensor& gg = t.grad(ng);
        for (int c = 0; c < C; ++c) gg(0, c) += g(r, c) * ((*xv)(r, c) - m) * is;
      }
      if (tb) {
        Tensor& gb = t.grad(nb);
        for (int c = 0; c < C; ++c) gb(0, c) += g(r, c);
      }
    }
  });
}

inline Value op_softmax_rows(const Value& x) {
  int R = x.rows(), C = x.cols();
  Tensor out(R, C);
  for (int r = 0; r < R; ++r) {
    double m = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < C; ++c) m = std::max(m, x.val()(r, c));
    double z = 0.0;
    for (int c = 0; c < C; ++c) {
      out(r, c) = std::exp(x.val()(r, c) - m);
      z += out(r, c);
    }
    for (int c = 0; c < C; ++c) out(r, c) /= z;
  }
  if (!x.tracked()) return Value::untracked(std::move(out));
  int nx = x.node();
  auto ov = std::make_shared<Tensor>(out);
  return x.tape()->record(std::move(out), [=](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad(nx);
    for (int r = 0; r < R; ++r) {
      double dot = 0.0;
      for (int c = 0; c < C; ++c) dot += g(r, c) * (*ov)(r, c);
      for (int c = 0; c < C; ++c) gx(r, c) += (*ov)(r, c) * (g(r, c) - dot);
    }
  });
}

// Factor-axis attention scores for one head: contracts the coordinate rows
// and the head's channel slice. out[n,l] = scale * sum_r sum_c q[n*rpt+r, c] k[l*rpt+r, c].
inline Value op_token_gram(const Value& q, const Value& k, int T, int rpt, int head_lo,
                           int head_hi, double scale) {
  detail::check(q.rows() == T * rpt && k.rows() == T * rpt, "token_gram: row mismatch");
  detail::check(q.cols() == k.cols(), "token_gram: channel mismatch");
  detail::check(0 <= head_lo && head_lo < head_hi && head_hi <= q.cols(), "token_gram: head slice");
  Tensor out(T, T);
  const Tensor& qt = q.val();
  const Tensor& kt = k.val();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) \
    if (size_t(T) * T * rpt * (head_hi - head_lo) > 2000000)
#endif
  for (int n = 0; n < T; ++n)
    for (int l = 0; l < T; ++l) {
      double s = 0.0;
      for (int r = 0; r < rpt; ++r)
        for (int c = head_lo; c < head_hi; ++c) s += qt(n * rpt + r, c) * kt(l * rpt + r, c);
      out(n, l) = scale * s;
    }
  Tape* tp = detail::result_tape({&q, &k});
  if (!tp) return Value::untracked(std::move(out));
  auto qv = q.ptr();
  auto kv = k.ptr();
  int nq = q.node(), nk = k.node();
  bool tq = q.tracked(), tk = k.tracked();
  return tp->record(std::move(out), [=](Tape& t, const Tensor& g) {
    if (tq) {
      Tensor& gq = t.grad(nq);
      for (int n = 0; n < T; ++n)
        for (int l = 0; l < T; ++l) {
          double gs = scale * g(n, l);
          if (gs == 0.0) continue;
          for (int r = 0; r < rpt; ++r)
            for (int c = head_lo; c < head_hi; ++c)
              gq(n * rpt + r, c) += gs * (*kv)(l * rpt + r, c);
        }
    }
    if (tk) {
      Tensor& gk = t.grad(nk);
      for (int n = 0; n < T; ++n)
        for (int l = 0; l < T; ++l) {
          double gs = scale * g(n, l);
          if (gs == 0.0) continue;
          for (int r = 0; r < rpt; ++r)
            for (int c = head_lo; c < head_hi; ++c)
              gk(l * rpt + r, c) += gs * (*qv)(n * rpt + r, c);
        }
    }
  });
}

// Mix token values with attention weights A (T x T) within one head slice:
// out[n*rpt+r, c'] = sum_l A[n,l] v[l*rpt+r, head_lo + c'].
inline Value op_attend(const Value& attn, const Value& v, int T, int rpt, int head_lo,
                       int head_hi) {
  detail::check(attn.rows() == T && attn.cols() == T, "attend: attention shape");
  detail::check(v.rows() == T * rpt, "attend: value rows");
  detail::check(0 <= head_lo && head_lo < head_hi && head_hi <= v.cols(), "attend: head slice");
  int U = head_hi - head_lo;
  Tensor out(T * rpt, U);
  const Tensor& at = attn.val();
  const Tensor& vt = v.val();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (size_t(T) * T * rpt * U > 2000000)
#endif
  for (int n = 0; n < T; ++n)
    for (int l = 0; l < T; ++l) {
      double a = at(n, l);
      if (a == 0.0) continue;
      for (int r = 0; r < rpt; ++r)
        for (int c = 0; c < U; ++c) out(n * rpt + r, c) += a * vt(l * rpt + r, head_lo + c);
    }
  Tape* tp = detail::result_tape({&attn, &v});
  if (!tp) return Value::untracked(std::move(out));
  auto av = attn.ptr();
  auto vv = v.ptr();
  int na = attn.node(), nv = v.node();
  bool ta = attn.tracked(), tv = v.tracked();
  return tp->record(std::move(out), [=](Tape& t, const Tensor& g) {
    if (ta) {
      Tensor& ga = t.grad(na);
      for (int n = 0; n < T; ++n)
        for (int l = 0; l < T; ++l) {
          double s = 0.0;
          for (int r = 0; r < rpt; ++r)
            for (int c = 0; c < U; ++c) s += g(n * rpt + r, c) * (*vv)(l * rpt + r, head_lo + c);
          ga(n, l) += s;
        }
    }
    if (tv) {
      Tensor& gv = t.grad(nv);
      for (int n = 0; n < T; ++n)
        for (int l = 0; l < T; ++l) {
          double a = (*av)(n, l);
          if (a == 0.0) continue;
          for (int r = 0; r < rpt; ++r)
            for (int c = 0; c < U; ++c) gv(l * rpt + r, head_lo + c) += a * g(n * rpt + r, c);
        }
    }
  });
}

// ---- Gaussian density and Cholesky ops --------------------------------------

// log N(z; mu, Lambda^{-1}) with mu (d x 1) and Lambda stored (d*d x 1).
// Gradients: d/dmu = Lambda (z - mu) sign-flipped appropriately,
// d/dLambda = 0.5 Lambda^{-1} - 0.5 (z - mu)(z - mu)^T (as a full-matrix
// derivative; symmetry of Lambda is maintained upstream).
inline Value op_gaussian_logpdf(const Value& mu, const Value& lambda, const Tensor& z) {
  int d = mu.rows();
  detail::check(mu.cols() == 1 && z.rows() == d && z.cols() == 1, "gaussian_logpdf: shapes");
  detail::check(lambda.rows() == d * d && lambda.cols() == 1, "gaussian_logpdf: lambda shape");
  auto L = linalg::cholesky(lambda.val().data(), d);
  double half_logdet = 0.5 * linalg::chol_logdet(L, d);
  std::vector<double> delta(d);
  for (int i = 0; i < d; ++i) delta[i] = z(i, 0) - mu.val()(i, 0);
  // quadratic form via y = L^T delta: delta^T Lambda delta = |y|^2? No:
  // Lambda = L L^T so delta^T Lambda delta = |L^T delta|^2.
  double quad = 0.0;
  {
    std::vector<double> y(d, 0.0);
    for (int j = 0; j < d; ++j)
      for (int i = j; i < d; ++i) y[j] += L[size_t(i) * d + j] * delta[i];
    for (int j = 0; j < d; ++j) quad += y[j] * y[j];
  }
  static const double log2pi = std::log(2.0 * M_PI);
  double logp = half_logdet - 0.5 * d * log2pi - 0.5 * quad;
  Tensor out = Tensor::scalar(logp);
  Tape* tp = detail::result_tape({&mu, &lambda});
  if (!tp) return Value::untracked(std::move(out));
  auto lamv = lambda.ptr();
  auto deltav = std::make_shared<std::vector<double>>(std::move(delta));
  auto Lv = std::make_shared<std::vector<double>>(std::move(L));
  int nmu = mu.node(), nlam = lambda.node();
  bool tmu = mu.tracked(), tlam = lambda.tracked();
  return tp->record(std::move(out), [=](Tape& t, const Tensor& g) {
    double gs = g[0];
    const auto& del = *deltav;
    if (tmu) {
      // d logp / d mu = Lambda delta
      Tensor& gm = t.grad(nmu);
      for (int i = 0; i < d; ++i) {
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += (*lamv)[size_t(i) * d + j] * del[j];
        gm(i, 0) += gs * s;
      }
    }
    if (tlam) {
      Tensor& gl = t.grad(nlam);
      auto inv = linalg::chol_inverse(*Lv, d);
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j)
          gl(i * d + j, 0) += gs * (0.5 * inv[size_t(i) * d + j] - 0.5 * del[i] * del[j]);
    }
  });
}

// 0.5 * log det Lambda with Lambda SPD stored (d*d x 1).
inline Value op_chol_half_logdet(const Value& lambda, int d) {
  detail::check(lambda.rows() == d * d && lambda.cols() == 1, "chol_half_logdet: shape");
  auto L = linalg::cholesky(lambda.val().data(), d);
  Tensor out = Tensor::scalar(0.5 * linalg::chol_logdet(L, d));
  if (!lambda.tracked()) return Value::untracked(std::move(out));
  int nl = lambda.node();
  auto Lv = std::make_shared<std::vector<double>>(std::move(L));
  return lambda.tape()->record(std::move(out), [=](Tape& t, const Tensor& g) {
    auto inv = linalg::chol_inverse(*Lv, d);
    Tensor& gl = t.grad(nl);
    for (int i = 0; i < d * d; ++i) gl(i, 0) += 0.5 * g[0] * inv[size_t(i)];
  });
}

// u = L(Lambda)^T x, the whitening transform for a precision matrix. The
// Cholesky pullback follows the standard lower-triangular formulation.
inline Value op_chol_upper_apply(const Value& lambda, const Value& x, int d) {
  detail::check(lambda.rows() == d * d && lambda.cols() == 1, "chol_upper_apply: lambda shape");
  detail::check(x.rows() == d && x.cols() == 1, "chol_upper_apply: x shape");
  auto L = linalg::cholesky(lambda.val().data(), d);
  Tensor out(d, 1);
  for (int j = 0; j < d; ++j) {
    double s = 0.0;
    for (int i = j; i < d; ++i) s += L[size_t(i) * d + j] * x.val()(i, 0);
    out(j, 0) = s;
  }
  Tape* tp = detail::result_tape({&lambda, &x});
  if (!tp) return Value::untracked(std::move(out));
  auto xv = x.ptr();
  auto Lv = std::make_shared<std::vector<double>>(std::move(L));
  int nl = lambda.node(), nx = x.node();
  bool tl = lambda.tracked(), tx = x.tracked();
  return tp->record(std::move(out), [=](Tape& t, const Tensor& g) {
    const auto& L = *Lv;
    if (tx) {
      // du/dx: u = L^T x  =>  dx = L du
      Tensor& gx = t.grad(nx);
      for (int i = 0; i < d; ++i) {
        double s = 0.0;
        for (int j = 0; j <= i; ++j) s += L[size_t(i) * d + j] * g(j, 0);
        gx(i, 0) += s;
      }
    }
    if (tl) {
      // dL_{ij} = x_i * du_j for i >= j, then pull back through the Cholesky.
      std::vector<double> dL(size_t(d) * d, 0.0);
      for (int i = 0; i < d; ++i)
        for (int j = 0; j <= i; ++j) dL[size_t(i) * d + j] = (*xv)(i, 0) * g(j, 0);
      // P = Phi(L^T dL), Phi keeps the lower triangle and halves the diagonal
      std::vector<double> P(size_t(d) * d, 0.0);
      for (int i = 0; i < d; ++i)
        for (int j = 0; j <= i; ++j) {
          double s = 0.0;
          for (int k = std::max(i, j); k < d; ++k)
            s += L[size_t(k) * d + i] * dL[size_t(k) * d + j];
          P[size_t(i) * d + j] = (i == j) ? 0.5 * s : s;
        }
      // dLambda = L^{-T} P L^{-1}, then symmetrize
      // solve L^T X = P  (column-wise), then solve X L^T?? Use:
      // Y = L^{-T} P  => L^T Y = P ; Z = Y L^{-1} => Z L = Y
      std::vector<double> Y(size_t(d) * d, 0.0);
      for (int col = 0; col < d; ++col) {
        std::vector<double> b(d);
        for (int i = 0; i < d; ++i) b[i] = P[size_t(i) * d + col];
        linalg::solve_lower_transpose(L, d, b.data());
        for (int i = 0; i < d; ++i) Y[size_t(i) * d + col] = b[i];
      }
      std::vector<double> Z(size_t(d) * d, 0.0);
      for (int row = 0; row < d; ++row) {
        // Z_{row,:} L = Y_{row,:}  =>  L^T Z_{row,:}^T = Y_{row,:}^T
        std::vector<double> b(d);
        for (int j = 0; j < d; ++j) b[j] = Y[size_t(row) * d + j];
        linalg::solve_lower_transpose(L, d, b.data());
        for (int j = 0; j < d; ++j) Z[size_t(row) * d + j] = b[j];
      }
      Tensor& gl = t.grad(nl);
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j)
          gl(i * d + j, 0) += 0.5 * (Z[size_t(i) * d + j] + Z[size_t(j) * d + i]);
    }
  });
}

}  // namespace afin
