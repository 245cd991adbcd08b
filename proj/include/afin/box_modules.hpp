#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "afin/autodiff.hpp"
#include "afin/param_store.hpp"

namespace afin {

// ---------------------------------------------------------------------------
// Forward context: binds a parameter store to an optional tape. Parameter
// leaves are memoized so each tensor appears once per forward pass and
// gradient accumulation order is the first-use order.
// ---------------------------------------------------------------------------
class ForwardCtx {
 public:
  ForwardCtx(const ParameterStore& store, Tape* tape)
      : store_(&store), tape_(tape) {}

  Value param(int id) {
    if (!tape_) return Value::borrowed(store_->value(id));
    auto it = cache_.find(id);
    if (it != cache_.end()) return it->second;
    Value v = tape_->leaf(store_->value(id), id);
    cache_.emplace(id, v);
    return v;
  }

  bool tracked() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  const ParameterStore& store() const { return *store_; }

 private:
  const ParameterStore* store_;
  Tape* tape_;
  std::unordered_map<int, Value> cache_;
};

// ---------------------------------------------------------------------------
// Scalar BoxMLP (the single-hidden-layer, scalar-channel construction):
//   h_{jl} = sigma(gamma_l + alpha_l z_j + beta_l mean(z)),
//   o_j    = delta + sum_l omega_l h_{jl}.
// Parameter shapes depend on H only, never on d.
// ---------------------------------------------------------------------------
struct ScalarBoxMlpParams {
  std::vector<double> alpha;  // local coefficients, length H
  std::vector<double> beta;   // pooled coefficients, length H
  std::vector<double> gamma;  // hidden biases, length H
  std::vector<double> omega;  // output weights, length H
  double delta = 0.0;         // output bias
};

enum class Nonlinearity { kIdentity, kGelu };

inline std::vector<double> boxmlp_scalar_forward(const ScalarBoxMlpParams& p,
                                                 const std::vector<double>& z,
                                                 Nonlinearity nonlin = Nonlinearity::kGelu) {
  size_t h = p.alpha.size();
  if (p.beta.size() != h || p.gamma.size() != h || p.omega.size() != h)
    throw std::invalid_argument("boxmlp_scalar_forward: parameter length mismatch");
  double mean = 0.0;
  for (double v : z) mean += v;
  mean /= double(z.size());
  std::vector<double> out(z.size(), p.delta);
  for (size_t j = 0; j < z.size(); ++j) {
    for (size_t l = 0; l < h; ++l) {
      double a = p.gamma[l] + p.alpha[l] * z[j] + p.beta[l] * mean;
      if (nonlin == Nonlinearity::kGelu) a = 0.5 * a * (1.0 + std::erf(a / std::sqrt(2.0)));
      out[j] += p.omega[l] * a;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Node-pair embedding and invariant summaries
// ---------------------------------------------------------------------------

// One factor's state: node tensor d x C and pair tensor (d*d) x C with pair
// (i, j) in row i*d + j.
struct NodePairEmbedding {
  Tensor node;
  Tensor pair;

  int dim() const { return node.rows(); }
  int channels() const { return node.cols(); }
};

struct InvariantSummaries {
  Tensor row;          // d x C, mean over j of pair_{ij}
  Tensor col;          // d x C, mean over i of pair_{ij}
  Tensor diag;         // d x C, pair_{ii}
  Tensor global_pair;  // 1 x C
  Tensor global_node;  // 1 x C
};

inline InvariantSummaries invariant_summaries(const NodePairEmbedding& e) {
  int d = e.dim();
  Value pair = Value::borrowed(e.pair);
  Value node = Value::borrowed(e.node);
  InvariantSummaries s;
  s.row = op_pair_row_mean(pair, 1, d).val();
  s.col = op_pair_col_mean(pair, 1, d).val();
  s.diag = op_pair_diag(pair, 1, d).val();
  s.global_pair = op_block_mean(pair, 1, d * d).val();
  s.global_node = op_block_mean(node, 1, d).val();
  return s;
}

// Values carrying node (T*d x C) and pair (T*d*d x C) stacks for T factors.
struct NodePairValue {
  Value node;
  Value pair;
  int tokens = 1;
  int dim = 0;

  int channels() const { return node.cols(); }

  NodePairEmbedding materialize() const {
    if (tokens != 1) throw std::logic_error("materialize: expected a single token");
    return NodePairEmbedding{node.val(), pair.val()};
  }
  static NodePairValue from(const NodePairEmbedding& e) {
    return NodePairValue{Value::borrowed(e.node), Value::borrowed(e.pair), 1, e.dim()};
  }
};

struct SummaryValues {
  Value xi_node;  // (T*d) x 6C
  Value xi_pair;  // (T*d*d) x 6C
};

// The 6C-wide coordinate and coordinate-pair inputs:
//   xi_pair_{ij} = [pair_{ij}, row_i, col_j, node_i, node_j, global_pair]
//   xi_node_i    = [node_i, diag_i, row_i, col_i, global_pair, global_node]
inline SummaryValues build_summary_inputs(const NodePairValue& e) {
  int T = e.tokens, d = e.dim;
  Value row = op_pair_row_mean(e.pair, T, d);
  Value col = op_pair_col_mean(e.pair, T, d);
  Value diag = op_pair_diag(e.pair, T, d);
  Value gp = op_block_mean(e.pair, T, d * d);
  Value gn = op_block_mean(e.node, T, d);
  Value gp_node = op_broadcast_block(gp, d);
  Value gn_node = op_broadcast_block(gn, d);
  Value xi_node = op_concat_cols({e.node, diag, row, col, gp_node, gn_node});
  Value xi_pair = op_concat_cols({e.pair, op_expand_i(row, T, d), op_expand_j(col, T, d),
                                  op_expand_i(e.node, T, d), op_expand_j(e.node, T, d),
                                  op_broadcast_block(gp, d * d)});
  return SummaryValues{xi_node, xi_pair};
}

// ---------------------------------------------------------------------------
// Coordinate-wise MLP: C_in -> H -> ... -> C_out applied independently at
// each coordinate (row). L counts linear layers; GELU between them.
// ---------------------------------------------------------------------------
struct CoordinateMlp {
  std::vector<int> weights;  // parameter ids, one per linear layer
  std::vector<int> biases;
  int c_in = 0, c_out = 0, hidden = 0, layers = 0;

  static CoordinateMlp build(ParameterStore& store, const std::string& prefix, int c_in,
                             int c_out, int hidden, int layers, RngStream& rng,
                             bool zero_init_last = false) {
    if (layers < 1) throw std::invalid_argument("CoordinateMlp: layers must be >= 1");
    CoordinateMlp m;
    m.c_in = c_in;
    m.c_out = c_out;
    m.hidden = hidden;
    m.layers = layers;
    for (int l = 0; l < layers; ++l) {
      int in = l == 0 ? c_in : hidden;
      int out = l == layers - 1 ? c_out : hidden;
      bool zero = zero_init_last && l == layers - 1;
      Tensor w = zero ? Tensor(in, out) : scaled_uniform_init(in, out, in, rng);
      Tensor b = zero ? Tensor(1, out) : scaled_uniform_init(1, out, in, rng);
      m.weights.push_back(store.add(prefix + "/w" + std::to_string(l), std::move(w)));
      m.biases.push_back(store.add(prefix + "/b" + std::to_string(l), std::move(b)));
    }
    return m;
  }

  Value forward(ForwardCtx& ctx, const Value& x) const {
    Value h = x;
    for (int l = 0; l < layers; ++l) {
      h = op_add_rowvec(op_matmul(h, ctx.param(weights[size_t(l)])), ctx.param(biases[size_t(l)]));
      if (l + 1 < layers) h = op_gelu(h);
    }
    return h;
  }

  size_t parameter_count() const {
    size_t n = 0;
    for (int l = 0; l < layers; ++l) {
      int in = l == 0 ? c_in : hidden;
      int out = l == layers - 1 ? c_out : hidden;
      n += size_t(in) * out + out;
    }
    return n;
  }
};

// ---------------------------------------------------------------------------
// Node-pair BoxMLP: separate node and pair coordinate-wise branches over the
// 6C summary inputs. Raw mode returns branch outputs (Q/K/V production);
// residual mode adds them to the state and symmetrizes the pair part.
// ---------------------------------------------------------------------------
struct BoxMlpNodePair {
  CoordinateMlp node_branch;
  CoordinateMlp pair_branch;

  static BoxMlpNodePair build(ParameterStore& store, const std::string& prefix, int c_in,
                              int c_out, int hidden, int layers, RngStream& rng) {
    BoxMlpNodePair m;
    m.node_branch = CoordinateMlp::build(store, prefix + "/node", 6 * c_in, c_out, hidden,
                                         layers, rng);
    m.pair_branch = CoordinateMlp::build(store, prefix + "/pair", 6 * c_in, c_out, hidden,
                                         layers, rng);
    return m;
  }

  NodePairValue forward_raw(ForwardCtx& ctx, const NodePairValue& e) const {
    SummaryValues s = build_summary_inputs(e);
    return NodePairValue{node_branch.forward(ctx, s.xi_node), pair_branch.forward(ctx, s.xi_pair),
                         e.tokens, e.dim};
  }

  NodePairValue forward_residual(ForwardCtx& ctx, const NodePairValue& e) const {
    NodePairValue delta = forward_raw(ctx, e);
    return NodePairValue{op_add(e.node, delta.node),
                         op_sym_pair(op_add(e.pair, delta.pair), e.tokens, e.dim), e.tokens,
                         e.dim};
  }

  size_t parameter_count() const {
    return node_branch.parameter_count() + pair_branch.parameter_count();
  }
};

// Residual increment applied to a different state than the branch input
// (BoxTransformer output and feed-forward updates).
inline NodePairValue residual_update(const NodePairValue& state, const NodePairValue& delta) {
  return NodePairValue{op_add(state.node, delta.node),
                       op_sym_pair(op_add(state.pair, delta.pair), state.tokens, state.dim),
                       state.tokens, state.dim};
}

// ---------------------------------------------------------------------------
// Layer normalization over channels, separate gains for node and pair parts.
// ---------------------------------------------------------------------------
struct NodePairLayerNorm {
  int node_gain = -1, node_bias = -1, pair_gain = -1, pair_bias = -1;
  static constexpr double kEps = 1e-5;

  static NodePairLayerNorm build(ParameterStore& store, const std::string& prefix, int channels) {
    NodePairLayerNorm ln;
    Tensor ones(1, channels);
    ones.fill(1.0);
    ln.node_gain = store.add(prefix + "/node_gain", ones);
    ln.node_bias = store.add(prefix + "/node_bias", Tensor(1, channels));
    Tensor ones2(1, channels);
    ones2.fill(1.0);
    ln.pair_gain = store.add(prefix + "/pair_gain", ones2);
    ln.pair_bias = store.add(prefix + "/pair_bias", Tensor(1, channels));
    return ln;
  }

  NodePairValue forward(ForwardCtx& ctx, const NodePairValue& e) const {
    return NodePairValue{
        op_layer_norm(e.node, ctx.param(node_gain), ctx.param(node_bias), kEps),
        op_layer_norm(e.pair, ctx.param(pair_gain), ctx.param(pair_bias), kEps), e.tokens, e.dim};
  }
};

// ---------------------------------------------------------------------------
// Factor-axis multi-head attention. Scores contract the coordinate axes:
//   S_node[n,l] = (1/d)   sum_i <Q_node[n,i], K_node[l,i]>   (head slice)
//   S_pair[n,l] = (1/d^2) sum_ij <Q_pair[n,ij], K_pair[l,ij]>
//   A = softmax_l((lambda_node S_node + lambda_pair S_pair) / sqrt(u))
// Per head, A mixes both node and pair values; heads concatenate on channels.
// ---------------------------------------------------------------------------
struct FactorAttentionOutput {
  NodePairValue mixed;
  std::vector<Value> attention;  // per-head T x T matrices (rows sum to 1)
};

inline FactorAttentionOutput factor_axis_attention(const NodePairValue& q,
                                                   const NodePairValue& k,
                                                   const NodePairValue& v, const Value& lambda_node,
                                                   const Value& lambda_pair, int heads) {
  int T = q.tokens, d = q.dim, U = q.channels();
  if (U % heads != 0)
    throw std::invalid_argument("factor_axis_attention: U must be divisible by heads");
  int u = U / heads;
  double inv_sqrt_u = 1.0 / std::sqrt(double(u));
  std::vector<Value> node_heads, pair_heads, attn;
  node_heads.reserve(size_t(heads));
  pair_heads.reserve(size_t(heads));
  for (int h = 0; h < heads; ++h) {
    int lo = h * u, hi = (h + 1) * u;
    Value s_node = op_token_gram(q.node, k.node, T, d, lo, hi, 1.0 / d);
    Value s_pair = op_token_gram(q.pair, k.pair, T, d * d, lo, hi, 1.0 / (double(d) * d));
    Value s = op_scale(op_add(op_scale_by_scalar(s_node, lambda_node),
                              op_scale_by_scalar(s_pair, lambda_pair)),
                       inv_sqrt_u);
    Value a = op_softmax_rows(s);
    node_heads.push_back(op_attend(a, v.node, T, d, lo, hi));
    pair_heads.push_back(op_attend(a, v.pair, T, d * d, lo, hi));
    attn.push_back(a);
  }
  NodePairValue mixed{op_concat_cols(node_heads), op_concat_cols(pair_heads), T, d};
  return FactorAttentionOutput{mixed, attn};
}

// Plain-tensor convenience overload over per-factor token lists.
inline std::vector<NodePairEmbedding> factor_axis_attention(
    const std::vector<NodePairEmbedding>& q, const std::vector<NodePairEmbedding>& k,
    const std::vector<NodePairEmbedding>& v, double lambda_node, double lambda_pair, int heads) {
  if (q.empty() || q.size() != k.size() || q.size() != v.size())
    throw std::invalid_argument("factor_axis_attention: token count mismatch");
  int T = int(q.size()), d = q[0].dim(), C = q[0].channels();
  Tensor qn(T * d, C), qp(T * d * d, C), kn(T * d, C), kp(T * d * d, C), vn(T * d, C),
      vp(T * d * d, C);
  for (int n = 0; n < T; ++n) {
    if (q[size_t(n)].dim() != d || k[size_t(n)].dim() != d || v[size_t(n)].dim() != d)
      throw std::invalid_argument("factor_axis_attention: heterogeneous d across tokens");
    for (int r = 0; r < d; ++r)
      for (int c = 0; c < C; ++c) {
        qn(n * d + r, c) = q[size_t(n)].node(r, c);
        kn(n * d + r, c) = k[size_t(n)].node(r, c);
        vn(n * d + r, c) = v[size_t(n)].node(r, c);
      }
    for (int r = 0; r < d * d; ++r)
      for (int c = 0; c < C; ++c) {
        qp(n * d * d + r, c) = q[size_t(n)].pair(r, c);
        kp(n * d * d + r, c) = k[size_t(n)].pair(r, c);
        vp(n * d * d + r, c) = v[size_t(n)].pair(r, c);
      }
  }
  NodePairValue qv{Value::borrowed(qn), Value::borrowed(qp), T, d};
  NodePairValue kv{Value::borrowed(kn), Value::borrowed(kp), T, d};
  NodePairValue vv{Value::borrowed(vn), Value::borrowed(vp), T, d};
  auto out = factor_axis_attention(qv, kv, vv, Value::untracked(Tensor::scalar(lambda_node)),
                                   Value::untracked(Tensor::scalar(lambda_pair)), heads);
  std::vector<NodePairEmbedding> result{size_t(T)};
  for (int n = 0; n < T; ++n) {
    result[size_t(n)].node = Tensor(d, C);
    result[size_t(n)].pair = Tensor(d * d, C);
    for (int r = 0; r < d; ++r)
      for (int c = 0; c < C; ++c) result[size_t(n)].node(r, c) = out.mixed.node.val()(n * d + r, c);
    for (int r = 0; r < d * d; ++r)
      for (int c = 0; c < C; ++c)
        result[size_t(n)].pair(r, c) = out.mixed.pair.val()(n * d * d + r, c);
  }
  return result;
}

// ---------------------------------------------------------------------------
// BoxTransformer block (pre-normalization):
//   Q/K/V     = raw node-pair BoxMLPs of LN(E)
//   Vtilde    = factor-axis multi-head attention
//   Etilde    = E + b_out(Vtilde)          (pair symmetrized)
//   E+        = Etilde + b_ffn(LN(Etilde)) (pair symmetrized)
// ---------------------------------------------------------------------------
struct BoxTransformerBlock {
  BoxMlpNodePair q_map, k_map, v_map, out_map, ffn_map;
  NodePairLayerNorm ln_attn, ln_ffn;
  int lambda_node = -1, lambda_pair = -1;
  int heads = 1;

  static BoxTransformerBlock build(ParameterStore& store, const std::string& prefix, int channels,
                                   int hidden, int layers, int heads, RngStream& rng) {
    if (channels % heads != 0)
      throw std::invalid_argument("BoxTransformerBlock: C must be divisible by heads");
    BoxTransformerBlock b;
    b.heads = heads;
    b.ln_attn = NodePairLayerNorm::build(store, prefix + "/ln_attn", channels);
    b.q_map = BoxMlpNodePair::build(store, prefix + "/q", channels, channels, hidden, layers, rng);
    b.k_map = BoxMlpNodePair::build(store, prefix + "/k", channels, channels, hidden, layers, rng);
    b.v_map = BoxMlpNodePair::build(store, prefix + "/v", channels, channels, hidden, layers, rng);
    b.out_map =
        BoxMlpNodePair::build(store, prefix + "/out", channels, channels, hidden, layers, rng);
    b.ln_ffn = NodePairLayerNorm::build(store, prefix + "/ln_ffn", channels);
    b.ffn_map =
        BoxMlpNodePair::build(store, prefix + "/ffn", channels, channels, hidden, layers, rng);
    b.lambda_node = store.add(prefix + "/lambda_node", Tensor::scalar(1.0));
    b.lambda_pair = store.add(prefix + "/lambda_pair", Tensor::scalar(1.0));
    return b;
  }

  NodePairValue forward(ForwardCtx& ctx, const NodePairValue& e) const {
    NodePairValue normed = ln_attn.forward(ctx, e);
    NodePairValue q = q_map.forward_raw(ctx, normed);
    NodePairValue k = k_map.forward_raw(ctx, normed);
    NodePairValue v = v_map.forward_raw(ctx, normed);
    FactorAttentionOutput att = factor_axis_attention(q, k, v, ctx.param(lambda_node),
                                                      ctx.param(lambda_pair), heads);
    NodePairValue e_tilde = residual_update(e, out_map.forward_raw(ctx, att.mixed));
    NodePairValue ffn_in = ln_ffn.forward(ctx, e_tilde);
    return residual_update(e_tilde, ffn_map.forward_raw(ctx, ffn_in));
  }

  size_t parameter_count(int channels) const {
    return q_map.parameter_count() + k_map.parameter_count() + v_map.parameter_count() +
           out_map.parameter_count() + ffn_map.parameter_count() + 4 * size_t(channels) * 2 + 2;
  }
};

// Stack a list of equal-d node-pair embeddings into a token-stacked value.
inline NodePairValue stack_tokens(const std::vector<NodePairEmbedding>& tokens) {
  if (tokens.empty()) throw std::invalid_argument("stack_tokens: empty token list");
  int T = int(tokens.size()), d = tokens[0].dim(), C = tokens[0].channels();
  Tensor node(T * d, C), pair(T * d * d, C);
  for (int n = 0; n < T; ++n) {
    if (tokens[size_t(n)].dim() != d)
      throw std::invalid_argument("stack_tokens: heterogeneous d across tokens");
    for (int r = 0; r < d; ++r)
      for (int c = 0; c < C; ++c) node(n * d + r, c) = tokens[size_t(n)].node(r, c);
    for (int r = 0; r < d * d; ++r)
      for (int c = 0; c < C; ++c) pair(n * d * d + r, c) = tokens[size_t(n)].pair(r, c);
  }
  return NodePairValue{Value::untracked(std::move(node)), Value::untracked(std::move(pair)), T, d};
}

inline std::vector<NodePairEmbedding> unstack_tokens(const NodePairValue& v) {
  int T = v.tokens, d = v.dim, C = v.channels();
  std::vector<NodePairEmbedding> out{size_t(T)};
  for (int n = 0; n < T; ++n) {
    out[size_t(n)].node = Tensor(d, C);
    out[size_t(n)].pair = Tensor(d * d, C);
    for (int r = 0; r < d; ++r)
      for (int c = 0; c < C; ++c) out[size_t(n)].node(r, c) = v.node.val()(n * d + r, c);
    for (int r = 0; r < d * d; ++r)
      for (int c = 0; c < C; ++c) out[size_t(n)].pair(r, c) = v.pair.val()(n * d * d + r, c);
  }
  return out;
}

// Plain-tensor single-block forward over a token list.
inline std::vector<NodePairEmbedding> boxtransformer_forward(
    const BoxTransformerBlock& block, const ParameterStore& store,
    const std::vector<NodePairEmbedding>& tokens) {
  ForwardCtx ctx(store, nullptr);
  NodePairValue stacked = stack_tokens(tokens);
  return unstack_tokens(block.forward(ctx, stacked));
}

}  // namespace afin
