#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "afin/box_modules.hpp"
#include "afin/factor_model.hpp"
#include "afin/param_store.hpp"

namespace afin {

enum class DecoderKind { kGaussian, kFlow };

inline std::string decoder_kind_name(DecoderKind k) {
  return k == DecoderKind::kGaussian ? "gaussian" : "flow";
}
inline DecoderKind decoder_kind_from_name(const std::string& s) {
  if (s == "gaussian") return DecoderKind::kGaussian;
  if (s == "flow") return DecoderKind::kFlow;
  throw std::invalid_argument("unknown decoder kind: " + s);
}

struct AfinConfig {
  int channels = 40;       // C
  int hidden = 192;        // H
  int layers = 4;          // L, linear layers per coordinate-wise MLP
  int merge_blocks = 4;    // M
  int heads = 4;           // h, attention heads (u = C / h)
  int adapter_hidden = 64;
  int adapter_layers = 2;
  int flow_layers = 4;     // S, RealNVP couplings
  int flow_hidden = 32;
  int flow_context = 40;   // G
  double precision_floor = 1e-4;   // eps_Lambda
  double flow_scale_bound = 3.0;   // bound on coupling log-scales
  bool whiten_flow = true;

  static AfinConfig paper_default() { return AfinConfig{}; }
  static AfinConfig toy() {
    AfinConfig c;
    c.channels = 8;
    c.hidden = 32;
    c.layers = 2;
    c.merge_blocks = 2;
    c.heads = 2;
    c.adapter_hidden = 32;
    c.adapter_layers = 2;
    c.flow_layers = 2;
    c.flow_hidden = 16;
    c.flow_context = 8;
    return c;
  }

  void validate() const {
    auto require = [](bool ok, const char* msg) {
      if (!ok) throw std::invalid_argument(std::string("AfinConfig: ") + msg);
    };
    require(channels >= 1 && hidden >= 1 && layers >= 1, "widths must be positive");
    require(merge_blocks >= 1 && heads >= 1, "merge_blocks and heads must be positive");
    require(channels % heads == 0, "C must be divisible by heads");
    require(adapter_hidden >= 1 && adapter_layers >= 1, "adapter widths must be positive");
    require(flow_layers >= 1 && flow_hidden >= 1 && flow_context >= 1,
            "flow widths must be positive");
    require(precision_floor > 0.0, "precision floor must be positive");
  }
};

// ---------------------------------------------------------------------------
// Factor descriptors.
//
// Only the diagonal-Gaussian prior scheme is fixed externally
// (node [mu_i, log sigma_i, mu_i/sigma_i], pair [node_i, node_j, 1{i=j}]).
// The remaining types follow the same convention: the node descriptor
// concatenates the per-coordinate natural quantities of the factor (location,
// log-scale, standardized location, covariate entry, scalar broadcasts of
// y, nu, n_c, y/n_c as applicable); the pair descriptor concatenates the two
// coordinates' node descriptors, cross-products (x_i x_j, and Lambda_ij for
// the full-rank Gaussian), and the 1{i=j} indicator.
// ---------------------------------------------------------------------------

inline int descriptor_node_width(FactorType t) {
  switch (t) {
    case FactorType::kDiagGaussian: return 3;
    case FactorType::kFullrankGaussian: return 3;
    case FactorType::kDiagStudentT: return 4;
    case FactorType::kDiagLaplace: return 3;
    case FactorType::kGaussian: return 3;
    case FactorType::kLinGaussian: return 4;
    case FactorType::kBernoulliLogit: return 3;
    case FactorType::kBinomialLogit: return 5;
    case FactorType::kLinStudentT: return 5;
  }
  throw std::invalid_argument("descriptor_node_width: unknown type");
}

inline int descriptor_cross_width(FactorType t) {
  switch (t) {
    case FactorType::kFullrankGaussian: return 1;  // Lambda_ij
    case FactorType::kLinGaussian:
    case FactorType::kBernoulliLogit:
    case FactorType::kBinomialLogit:
    case FactorType::kLinStudentT:
      return 1;  // x_i x_j
    default:
      return 0;
  }
}

inline int descriptor_pair_width(FactorType t) {
  return 2 * descriptor_node_width(t) + descriptor_cross_width(t) + 1;
}

struct FactorDescriptors {
  Tensor node;  // d x chi_node
  Tensor pair;  // (d*d) x chi_pair
};

inline FactorDescriptors build_descriptors(const FactorSpec& f, int d) {
  f.validate(d);
  const FactorType t = f.factor_type;
  int cn = descriptor_node_width(t);
  Tensor node(d, cn);
  for (int i = 0; i < d; ++i) {
    switch (t) {
      case FactorType::kDiagGaussian:
      case FactorType::kDiagLaplace: {
        double mu = f.theta.loc[size_t(i)], s = f.theta.scale_vec[size_t(i)];
        node(i, 0) = mu;
        node(i, 1) = std::log(s);
        node(i, 2) = mu / s;
        break;
      }
      case FactorType::kDiagStudentT: {
        double mu = f.theta.loc[size_t(i)], s = f.theta.scale_vec[size_t(i)];
        node(i, 0) = mu;
        node(i, 1) = std::log(s);
        node(i, 2) = mu / s;
        node(i, 3) = f.theta.nu;
        break;
      }
      case FactorType::kFullrankGaussian: {
        double mu = f.theta.loc[size_t(i)], lam_ii = f.theta.precision(i, i);
        node(i, 0) = mu;
        node(i, 1) = -0.5 * std::log(lam_ii);
        node(i, 2) = mu * std::sqrt(lam_ii);
        break;
      }
      case FactorType::kGaussian: {
        double y = (*f.observation_vec)[size_t(i)], s = f.theta.scale;
        node(i, 0) = y;
        node(i, 1) = std::log(s);
        node(i, 2) = y / s;
        break;
      }
      case FactorType::kLinGaussian: {
        double x = (*f.covariate)[size_t(i)], s = f.theta.scale, y = *f.observation;
        node(i, 0) = x;
        node(i, 1) = std::log(s);
        node(i, 2) = y;
        node(i, 3) = x * y / (s * s);
        break;
      }
      case FactorType::kLinStudentT: {
        double x = (*f.covariate)[size_t(i)], s = f.theta.scale, y = *f.observation;
        node(i, 0) = x;
        node(i, 1) = std::log(s);
        node(i, 2) = f.theta.nu;
        node(i, 3) = y;
        node(i, 4) = x * y / (s * s);
        break;
      }
      case FactorType::kBernoulliLogit: {
        double x = (*f.covariate)[size_t(i)], y = *f.observation;
        node(i, 0) = x;
        node(i, 1) = y;
        node(i, 2) = x * (y - 0.5);
        break;
      }
      case FactorType::kBinomialLogit: {
        double x = (*f.covariate)[size_t(i)], y = *f.observation;
        double nc = double(f.theta.trial_count);
        node(i, 0) = x;
        node(i, 1) = y;
        node(i, 2) = nc;
        node(i, 3) = y / nc;
        node(i, 4) = x * (y / nc - 0.5);
        break;
      }
    }
  }
  int cp = descriptor_pair_width(t);
  Tensor pair(d * d, cp);
  bool cross = descriptor_cross_width(t) == 1;
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      int r = i * d + j;
      for (int c = 0; c < cn; ++c) {
        pair(r, c) = node(i, c);
        pair(r, cn + c) = node(j, c);
      }
      int off = 2 * cn;
      if (cross) {
        double v = 0.0;
        if (t == FactorType::kFullrankGaussian) {
          v = f.theta.precision(i, j);
        } else {
          v = (*f.covariate)[size_t(i)] * (*f.covariate)[size_t(j)];
        }
        pair(r, off++) = v;
      }
      pair(r, off) = (i == j) ? 1.0 : 0.0;
    }
  return FactorDescriptors{std::move(node), std::move(pair)};
}

// ---------------------------------------------------------------------------
// Adapters
// ---------------------------------------------------------------------------

struct Adapter {
  CoordinateMlp node_map;
  CoordinateMlp pair_map;
};

struct AdapterSet {
  std::map<FactorType, Adapter> adapters;

  static AdapterSet build(ParameterStore& store, const AfinConfig& cfg, RngStream& rng) {
    AdapterSet s;
    auto add_type = [&](FactorType t) {
      std::string prefix = "adapters/" + factor_type_name(t);
      Adapter a;
      a.node_map = CoordinateMlp::build(store, prefix + "/node", descriptor_node_width(t),
                                        cfg.channels, cfg.adapter_hidden, cfg.adapter_layers, rng);
      a.pair_map = CoordinateMlp::build(store, prefix + "/pair", descriptor_pair_width(t),
                                        cfg.channels, cfg.adapter_hidden, cfg.adapter_layers, rng);
      s.adapters.emplace(t, std::move(a));
    };
    for (FactorType t : prior_types()) add_type(t);
    for (FactorType t : likelihood_types()) add_type(t);
    return s;
  }

  const Adapter& at(FactorType t) const {
    auto it = adapters.find(t);
    if (it == adapters.end())
      throw std::out_of_range("AdapterSet: unknown factor type " + factor_type_name(t));
    return it->second;
  }

  size_t parameter_count() const {
    size_t n = 0;
    for (const auto& [t, a] : adapters)
      n += a.node_map.parameter_count() + a.pair_map.parameter_count();
    return n;
  }
};

// ---------------------------------------------------------------------------
// Decoders
// ---------------------------------------------------------------------------

struct GaussianDecoder {
  CoordinateMlp mean_head;  // xi_node -> 1
  CoordinateMlp pair_head;  // xi_pair -> 1
  CoordinateMlp diag_head;  // xi_node -> 1

  static GaussianDecoder build(ParameterStore& store, const AfinConfig& cfg, RngStream& rng) {
    GaussianDecoder g;
    g.mean_head = CoordinateMlp::build(store, "decoder/gaussian/mean", 6 * cfg.channels, 1,
                                       cfg.hidden, cfg.layers, rng, /*zero_init_last=*/true);
    g.pair_head = CoordinateMlp::build(store, "decoder/gaussian/pair", 6 * cfg.channels, 1,
                                       cfg.hidden, cfg.layers, rng, /*zero_init_last=*/true);
    g.diag_head = CoordinateMlp::build(store, "decoder/gaussian/diag", 6 * cfg.channels, 1,
                                       cfg.hidden, cfg.layers, rng, /*zero_init_last=*/true);
    return g;
  }

  size_t parameter_count() const {
    return mean_head.parameter_count() + pair_head.parameter_count() +
           diag_head.parameter_count();
  }
};

struct FlowDecoder {
  CoordinateMlp ctx_node;  // xi_node -> G
  CoordinateMlp ctx_pair;  // xi_pair -> G
  CoordinateMlp affine;    // xi_node -> 2 (shift tau, log-scale ell)
  std::vector<CoordinateMlp> couplings;  // (2G + 1) -> 2 per layer

  static FlowDecoder build(ParameterStore& store, const AfinConfig& cfg, RngStream& rng) {
    FlowDecoder f;
    f.ctx_node = CoordinateMlp::build(store, "decoder/flow/ctx_node", 6 * cfg.channels,
                                      cfg.flow_context, cfg.hidden, cfg.layers, rng);
    f.ctx_pair = CoordinateMlp::build(store, "decoder/flow/ctx_pair", 6 * cfg.channels,
                                      cfg.flow_context, cfg.hidden, cfg.layers, rng);
    f.affine = CoordinateMlp::build(store, "decoder/flow/affine", 6 * cfg.channels, 2, cfg.hidden,
                                    cfg.layers, rng, /*zero_init_last=*/true);
    for (int s = 0; s < cfg.flow_layers; ++s)
      f.couplings.push_back(CoordinateMlp::build(
          store, "decoder/flow/coupling/" + std::to_string(s), 2 * cfg.flow_context + 1, 2,
          cfg.flow_hidden, 2, rng, /*zero_init_last=*/true));
    return f;
  }

  size_t context_parameter_count() const {
    return ctx_node.parameter_count() + ctx_pair.parameter_count();
  }
  size_t affine_parameter_count() const { return affine.parameter_count(); }
  size_t coupling_parameter_count() const {
    size_t n = 0;
    for (const auto& c : couplings) n += c.parameter_count();
    return n;
  }
};

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

struct AfinForward {
  int d = 0;
  Value mu;      // d x 1
  Value lambda;  // (d*d) x 1, symmetric positive definite by construction
  // flow head outputs; populated when requested
  Value flow_ctx_node;   // d x G
  Value flow_ctx_pair;   // (d*d) x G
  Value flow_shift;      // d x 1 (tau)
  Value flow_log_scale;  // d x 1 (ell)
  bool has_flow = false;
};

class AfinNetwork {
 public:
  AfinNetwork(AfinConfig cfg, uint64_t init_seed) : cfg_(cfg) {
    cfg_.validate();
    RngStream rng = RngStream::derive(init_seed, {0xA51Dull});
    adapters_ = AdapterSet::build(store_, cfg_, rng);
    encoder_ = BoxMlpNodePair::build(store_, "encoder", cfg_.channels, cfg_.channels, cfg_.hidden,
                                     cfg_.layers, rng);
    for (int m = 0; m < cfg_.merge_blocks; ++m)
      merge_.push_back(BoxTransformerBlock::build(store_, "merge/" + std::to_string(m),
                                                  cfg_.channels, cfg_.hidden, cfg_.layers,
                                                  cfg_.heads, rng));
    gaussian_ = GaussianDecoder::build(store_, cfg_, rng);
    flow_ = FlowDecoder::build(store_, cfg_, rng);
  }

  const AfinConfig& config() const { return cfg_; }
  ParameterStore& store() { return store_; }
  const ParameterStore& store() const { return store_; }
  const FlowDecoder& flow_decoder() const { return flow_; }

  // Adapter + shared encoder for one factor.
  NodePairValue encode_factor_value(ForwardCtx& ctx, const FactorSpec& factor, int d) const {
    FactorDescriptors desc = build_descriptors(factor, d);
    const Adapter& a = adapters_.at(factor.factor_type);
    Value node = a.node_map.forward(ctx, Value::untracked(std::move(desc.node)));
    Value pair = op_sym_pair(a.pair_map.forward(ctx, Value::untracked(std::move(desc.pair))), 1, d);
    NodePairValue e{node, pair, 1, d};
    return encoder_.forward_residual(ctx, e);
  }

  NodePairEmbedding encode_factor(const FactorSpec& factor, int d) const {
    ForwardCtx ctx(store_, nullptr);
    NodePairValue e = encode_factor_value(ctx, factor, d);
    return NodePairEmbedding{e.node.val(), e.pair.val()};
  }

  AfinForward forward_values(ForwardCtx& ctx, const TaskInstance& task, bool with_flow) const {
    task.validate();
    int d = task.d;
    int tokens = task.num_likelihoods() + 1;
    std::vector<Value> node_parts, pair_parts;
    node_parts.reserve(size_t(tokens));
    pair_parts.reserve(size_t(tokens));
    auto encode = [&](const FactorSpec& f) {
      FactorDescriptors desc = build_descriptors(f, d);
      const Adapter& a = adapters_.at(f.factor_type);
      node_parts.push_back(a.node_map.forward(ctx, Value::untracked(std::move(desc.node))));
      pair_parts.push_back(a.pair_map.forward(ctx, Value::untracked(std::move(desc.pair))));
    };
    encode(task.prior);
    for (const FactorSpec& f : task.likelihoods) encode(f);
    NodePairValue e{op_concat_rows(node_parts),
                    op_sym_pair(op_concat_rows(pair_parts), tokens, d), tokens, d};
    e = encoder_.forward_residual(ctx, e);
    for (const BoxTransformerBlock& block : merge_) e = block.forward(ctx, e);
    NodePairValue pooled{op_token_sum(e.node, tokens, d),
                         op_sym_pair(op_token_sum(e.pair, tokens, d * d), 1, d), 1, d};
    SummaryValues s = build_summary_inputs(pooled);

    AfinForward out;
    out.d = d;
    out.mu = gaussian_.mean_head.forward(ctx, s.xi_node);
    Value p_sym = op_sym_pair(gaussian_.pair_head.forward(ctx, s.xi_pair), 1, d);
    Value raw_diag = gaussian_.diag_head.forward(ctx, s.xi_node);
    // Lambda = offdiag(sym(P)) + diag(sum_j |sym(P)_ij| + softplus(raw) + eps).
    // The |.|-row-sum keeps the matrix strictly diagonally dominant, so every
    // output precision admits a Cholesky factorization.
    Value abs_p = op_abs(p_sym);
    Value rowsum = op_scale(op_pair_row_mean(abs_p, 1, d), double(d));
    Value addend = op_add_const(op_add(rowsum, op_softplus(raw_diag)), cfg_.precision_floor);
    Value offdiag = op_sub(p_sym, op_diag_embed(op_pair_diag(p_sym, 1, d), 1, d));
    out.lambda = op_add(offdiag, op_diag_embed(addend, 1, d));

    if (with_flow) {
      out.flow_ctx_node = flow_.ctx_node.forward(ctx, s.xi_node);
      out.flow_ctx_pair = op_sym_pair(flow_.ctx_pair.forward(ctx, s.xi_pair), 1, d);
      Value aff = flow_.affine.forward(ctx, s.xi_node);
      out.flow_shift = op_slice_cols(aff, 0, 1);
      out.flow_log_scale = op_slice_cols(aff, 1, 2);
      out.has_flow = true;
    }
    return out;
  }

  GaussianDistribution forward_gaussian(const TaskInstance& task) const {
    ForwardCtx ctx(store_, nullptr);
    AfinForward f = forward_values(ctx, task, /*with_flow=*/false);
    return to_gaussian(f);
  }

  static GaussianDistribution to_gaussian(const AfinForward& f) {
    int d = f.d;
    GaussianDistribution g;
    g.mean.resize(size_t(d));
    for (int i = 0; i < d; ++i) g.mean[size_t(i)] = f.mu.val()(i, 0);
    g.precision = Tensor(d, d);
    for (int i = 0; i < d * d; ++i) g.precision[size_t(i)] = f.lambda.val()(i, 0);
    return g;
  }

  // ---- parameter accounting ----

  struct ParameterBreakdown {
    size_t adapters = 0;
    size_t encoder = 0;
    size_t merge = 0;
    size_t gaussian_decoder = 0;
    size_t flow_context = 0;
    size_t flow_affine = 0;
    size_t flow_couplings = 0;
    size_t total_gaussian() const { return adapters + encoder + merge + gaussian_decoder; }
    size_t total_flow() const {
      return total_gaussian() + flow_context + flow_affine + flow_couplings;
    }
    size_t total() const { return total_flow(); }
  };

  ParameterBreakdown count_parameters() const {
    ParameterBreakdown b;
    b.adapters = adapters_.parameter_count();
    b.encoder = encoder_.parameter_count();
    for (const BoxTransformerBlock& block : merge_) b.merge += block.parameter_count(cfg_.channels);
    b.gaussian_decoder = gaussian_.parameter_count();
    b.flow_context = flow_.context_parameter_count();
    b.flow_affine = flow_.affine_parameter_count();
    b.flow_couplings = flow_.coupling_parameter_count();
    if (b.total() != store_.total_parameters())
      throw std::logic_error("count_parameters: breakdown disagrees with registry");
    return b;
  }

  // ---- checkpoint I/O (model tensors only) ----

  NamedTensors named_tensors(const std::string& prefix = "model/") const {
    NamedTensors out;
    for (int i = 0; i < store_.count(); ++i)
      out.emplace_back(prefix + store_.name(i), store_.value(i));
    return out;
  }

  void save(const std::string& path) const { save_tensor_container(path, named_tensors()); }

  void load_named(const NamedTensors& tensors, const std::string& prefix = "model/") {
    size_t found = 0;
    for (const auto& [name, t] : tensors) {
      if (name.rfind(prefix, 0) != 0) continue;
      int id = store_.find(name.substr(prefix.size()));
      if (!store_.value(id).same_shape(t))
        throw std::runtime_error("checkpoint: shape mismatch for " + name);
      store_.value(id) = t;
      ++found;
    }
    if (found != size_t(store_.count()))
      throw std::runtime_error("checkpoint: missing model tensors");
  }

  void load(const std::string& path) { load_named(load_tensor_container(path)); }

 private:
  AfinConfig cfg_;
  ParameterStore store_;
  AdapterSet adapters_;
  BoxMlpNodePair encoder_;
  std::vector<BoxTransformerBlock> merge_;
  GaussianDecoder gaussian_;
  FlowDecoder flow_;
};

// ---------------------------------------------------------------------------
// Flow distribution
// ---------------------------------------------------------------------------

// Alternating coordinate masks: mask_i = 1 marks pass-through conditioning
// coordinates of coupling layer s.
inline Tensor coupling_mask(int layer, int d) {
  Tensor m(d, 1);
  for (int i = 0; i < d; ++i) m(i, 0) = ((i + layer) % 2 == 0) ? 1.0 : 0.0;
  return m;
}

namespace flow_detail {

struct CouplingParams {
  Value t;  // shift, d x 1 (transformed coordinates only)
  Value s;  // bounded log-scale, d x 1
};

// Conditioner input per coordinate i:
//   [c_node_i, (1/d) sum_j m_j v_j c_pair_{ij}, (1/d) sum_j m_j v_j]
// which depends on v only through the pass-through coordinates.
inline CouplingParams conditioner(ForwardCtx& ctx, const CoordinateMlp& mlp, const Value& v,
                                  const Value& mask, const Value& c_node, const Value& c_pair,
                                  int d, double scale_bound) {
  Value h = op_mul(v, mask);
  Value hb = op_expand_j(h, 1, d);
  Value pv = op_pair_row_mean(op_mul_colvec(c_pair, hb), 1, d);
  Value mv = op_broadcast_block(op_scale(op_sum_all(h), 1.0 / d), d);
  Value xi = op_concat_cols({c_node, pv, mv});
  Value out = mlp.forward(ctx, xi);
  Value t = op_slice_cols(out, 0, 1);
  Value s_raw = op_slice_cols(out, 1, 2);
  Value s = op_scale(op_tanh(op_scale(s_raw, 1.0 / scale_bound)), scale_bound);
  return CouplingParams{t, s};
}

}  // namespace flow_detail

// Exact log density of the flow posterior at z via the inverse pass; all
// pieces stay on the tape, so the flow head trains with exact gradients.
inline Value flow_log_prob_value(ForwardCtx& ctx, const AfinNetwork& net, const AfinForward& fwd,
                                 const Tensor& z) {
  if (!fwd.has_flow) throw std::logic_error("flow_log_prob_value: forward lacks flow outputs");
  const AfinConfig& cfg = net.config();
  int d = fwd.d;
  Value u;
  Value half_logdet;
  if (cfg.whiten_flow) {
    Value delta = op_sub(Value::borrowed(z), fwd.mu);
    u = op_chol_upper_apply(fwd.lambda, delta, d);
    half_logdet = op_chol_half_logdet(fwd.lambda, d);
  } else {
    u = Value::borrowed(z);
  }
  // v_S = exp(-ell) (u - tau)
  Value v = op_mul(op_sub(u, fwd.flow_shift), op_exp(op_scale(fwd.flow_log_scale, -1.0)));
  Value log_q = op_scale(op_sum_all(fwd.flow_log_scale), -1.0);
  if (cfg.whiten_flow) log_q = op_add(log_q, half_logdet);
  const auto& couplings = net.flow_decoder().couplings;
  for (int s = int(couplings.size()) - 1; s >= 0; --s) {
    Tensor mask_t = coupling_mask(s, d);
    Tensor inv_mask_t(d, 1);
    for (int i = 0; i < d; ++i) inv_mask_t(i, 0) = 1.0 - mask_t(i, 0);
    Value mask = Value::untracked(mask_t);
    Value inv_mask = Value::untracked(inv_mask_t);
    auto cp = flow_detail::conditioner(ctx, couplings[size_t(s)], v, mask, fwd.flow_ctx_node,
                                       fwd.flow_ctx_pair, d, cfg.flow_scale_bound);
    // inverse: v_prev = m v + (1 - m) (v - t) exp(-s)
    Value transformed = op_mul(op_sub(v, cp.t), op_exp(op_scale(cp.s, -1.0)));
    v = op_add(op_mul(v, mask), op_mul(transformed, inv_mask));
    log_q = op_sub(log_q, op_sum_all(op_mul(cp.s, inv_mask)));
  }
  // base log density: N(0, I)
  static const double log2pi = std::log(2.0 * M_PI);
  Value base = op_add_const(op_scale(op_sum_all(op_square(v)), -0.5), -0.5 * d * log2pi);
  return op_add(log_q, base);
}

// Self-contained flow posterior: context tensors, final affine, coupling
// weights, and the optional whitening Gaussian.
struct FlowPosterior {
  int d = 0;
  Tensor ctx_node;   // d x G
  Tensor ctx_pair;   // (d*d) x G
  Tensor shift;      // tau, d x 1
  Tensor log_scale;  // ell, d x 1
  std::vector<std::vector<Tensor>> coupling_weights;  // per layer: w0, b0, w1, b1, ...
  double scale_bound = 3.0;
  int flow_hidden = 32;
  bool whitened = false;
  std::vector<double> whiten_mean;
  Tensor whiten_precision;

  // Evaluates one conditioner outside any parameter store.
  std::pair<Tensor, Tensor> conditioner(int layer, const Tensor& v) const {
    Tensor mask = coupling_mask(layer, d);
    Value vv = Value::borrowed(v);
    Value h = op_mul(vv, Value::borrowed(mask));
    Value hb = op_expand_j(h, 1, d);
    Value pv = op_pair_row_mean(op_mul_colvec(Value::borrowed(ctx_pair), hb), 1, d);
    Value mv = op_broadcast_block(op_scale(op_sum_all(h), 1.0 / d), d);
    Value xi = op_concat_cols({Value::borrowed(ctx_node), pv, mv});
    const auto& w = coupling_weights[size_t(layer)];
    Value x = xi;
    for (size_t l = 0; l + 1 < w.size(); l += 2) {
      x = op_add_rowvec(op_matmul(x, Value::borrowed(w[l])), Value::borrowed(w[l + 1]));
      if (l + 2 < w.size()) x = op_gelu(x);
    }
    Tensor t(d, 1), s(d, 1);
    for (int i = 0; i < d; ++i) {
      t(i, 0) = x.val()(i, 0);
      s(i, 0) = scale_bound * std::tanh(x.val()(i, 1) / scale_bound);
    }
    return {t, s};
  }

  std::vector<double> sample(RngStream& rng) const {
    Tensor v(d, 1);
    for (int i = 0; i < d; ++i) v(i, 0) = rng.normal();
    return push_forward(v);
  }

  // Deterministic transport of a base draw through the flow.
  std::vector<double> push_forward(const Tensor& eps) const {
    Tensor v = eps;
    for (size_t s = 0; s < coupling_weights.size(); ++s) {
      Tensor mask = coupling_mask(int(s), d);
      auto [t, sb] = conditioner(int(s), v);
      for (int i = 0; i < d; ++i)
        if (mask(i, 0) == 0.0) v(i, 0) = v(i, 0) * std::exp(sb(i, 0)) + t(i, 0);
    }
    std::vector<double> u(size_t(d), 0.0);
    for (int i = 0; i < d; ++i) u[size_t(i)] = std::exp(log_scale(i, 0)) * v(i, 0) + shift(i, 0);
    if (!whitened) return u;
    auto L = linalg::cholesky(whiten_precision.data(), d);
    linalg::solve_lower_transpose(L, d, u.data());
    for (int i = 0; i < d; ++i) u[size_t(i)] += whiten_mean[size_t(i)];
    return u;
  }

  double log_prob(const std::vector<double>& z) const {
    std::vector<double> u = z;
    double log_q = 0.0;
    if (whitened) {
      auto L = linalg::cholesky(whiten_precision.data(), d);
      for (int i = 0; i < d; ++i) u[size_t(i)] -= whiten_mean[size_t(i)];
      std::vector<double> y(size_t(d), 0.0);
      for (int j = 0; j < d; ++j)
        for (int i = j; i < d; ++i) y[size_t(j)] += L[size_t(i) * d + j] * u[size_t(i)];
      u = std::move(y);
      log_q += 0.5 * linalg::chol_logdet(L, d);
    }
    Tensor v(d, 1);
    for (int i = 0; i < d; ++i) {
      v(i, 0) = (u[size_t(i)] - shift(i, 0)) * std::exp(-log_scale(i, 0));
      log_q -= log_scale(i, 0);
    }
    for (int s = int(coupling_weights.size()) - 1; s >= 0; --s) {
      Tensor mask = coupling_mask(s, d);
      auto [t, sb] = conditioner(s, v);
      for (int i = 0; i < d; ++i)
        if (mask(i, 0) == 0.0) {
          v(i, 0) = (v(i, 0) - t(i, 0)) * std::exp(-sb(i, 0));
          log_q -= sb(i, 0);
        }
    }
    for (int i = 0; i < d; ++i)
      log_q += -0.5 * std::log(2.0 * M_PI) - 0.5 * v(i, 0) * v(i, 0);
    return log_q;
  }
};

inline FlowPosterior extract_flow_posterior(const AfinNetwork& net, const AfinForward& fwd) {
  if (!fwd.has_flow) throw std::logic_error("extract_flow_posterior: forward lacks flow outputs");
  const AfinConfig& cfg = net.config();
  FlowPosterior fp;
  fp.d = fwd.d;
  fp.ctx_node = fwd.flow_ctx_node.val();
  fp.ctx_pair = fwd.flow_ctx_pair.val();
  fp.shift = fwd.flow_shift.val();
  fp.log_scale = fwd.flow_log_scale.val();
  fp.scale_bound = cfg.flow_scale_bound;
  fp.flow_hidden = cfg.flow_hidden;
  for (const CoordinateMlp& c : net.flow_decoder().couplings) {
    std::vector<Tensor> w;
    for (int l = 0; l < c.layers; ++l) {
      w.push_back(net.store().value(c.weights[size_t(l)]));
      w.push_back(net.store().value(c.biases[size_t(l)]));
    }
    fp.coupling_weights.push_back(std::move(w));
  }
  if (cfg.whiten_flow) {
    fp.whitened = true;
    GaussianDistribution g = AfinNetwork::to_gaussian(fwd);
    fp.whiten_mean = g.mean;
    fp.whiten_precision = g.precision;
  }
  return fp;
}

inline FlowPosterior afin_forward_flow(const AfinNetwork& net, const TaskInstance& task) {
  ForwardCtx ctx(net.store(), nullptr);
  AfinForward f = net.forward_values(ctx, task, /*with_flow=*/true);
  return extract_flow_posterior(net, f);
}

}  // namespace afin
