#pragma once

// AMI-Net+ forward pass and the deep MIL baselines, assembled from autograd
// primitives.
//
// Instance tensors use a "rows" layout: a batch of B bags padded to width L
// is a [B*L x features] matrix whose row b*L + j is instance j of bag b. The
// accompanying mask marks real instances; pad rows are held at exactly zero
// after every stage, which makes padding inert.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "amil/autograd.hpp"
#include "amil/bagdata.hpp"
#include "amil/error.hpp"
#include "amil/rng.hpp"

namespace amil::milnet {

namespace ag = amil::autograd;
using ag::ParameterSet;
using ag::Shape;
using ag::Tape;
using ag::Tensor;

enum class PoolingView { max, mean, sum, lse };
enum class InstancePooling { self_adaptive, max, mean, sum, lse, attention };
enum class ModelKind { ami_net_plus, mi_net, big_mi_net, att_net, gated_att_net };

inline constexpr double kLayerNormEpsilon = 1e-5;
inline constexpr double kProbabilityClamp = 1e-7;

inline std::string_view to_string(PoolingView v) {
  switch (v) {
    case PoolingView::max: return "max";
    case PoolingView::mean: return "mean";
    case PoolingView::sum: return "sum";
    case PoolingView::lse: return "lse";
  }
  return "?";
}

inline std::string_view to_string(InstancePooling p) {
  switch (p) {
    case InstancePooling::self_adaptive: return "self_adaptive";
    case InstancePooling::max: return "max";
    case InstancePooling::mean: return "mean";
    case InstancePooling::sum: return "sum";
    case InstancePooling::lse: return "lse";
    case InstancePooling::attention: return "attention";
  }
  return "?";
}

inline std::string_view to_string(ModelKind k) {
  switch (k) {
    case ModelKind::ami_net_plus: return "ami_net_plus";
    case ModelKind::mi_net: return "mi_net";
    case ModelKind::big_mi_net: return "big_mi_net";
    case ModelKind::att_net: return "att_net";
    case ModelKind::gated_att_net: return "gated_att_net";
  }
  return "?";
}

inline PoolingView parse_pooling_view(std::string_view s) {
  for (auto v : {PoolingView::max, PoolingView::mean, PoolingView::sum, PoolingView::lse}) {
    if (to_string(v) == s) return v;
  }
  throw ConfigError("unknown pooling view '" + std::string(s) + "'");
}

inline InstancePooling parse_instance_pooling(std::string_view s) {
  for (auto p : {InstancePooling::self_adaptive, InstancePooling::max, InstancePooling::mean, InstancePooling::sum,
                 InstancePooling::lse, InstancePooling::attention}) {
    if (to_string(p) == s) return p;
  }
  throw ConfigError("unknown instance pooling mode '" + std::string(s) + "'");
}

inline ModelKind parse_model_kind(std::string_view s) {
  for (auto k : {ModelKind::ami_net_plus, ModelKind::mi_net, ModelKind::big_mi_net, ModelKind::att_net,
                 ModelKind::gated_att_net}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown model kind '" + std::string(s) + "'");
}

inline ag::ReduceKind reduce_kind(PoolingView v) {
  switch (v) {
    case PoolingView::max: return ag::ReduceKind::max;
    case PoolingView::mean: return ag::ReduceKind::mean;
    case PoolingView::sum: return ag::ReduceKind::sum;
    case PoolingView::lse: return ag::ReduceKind::lse;
  }
  return ag::ReduceKind::sum;
}

struct ModelConfig {
  std::size_t vocab_size = 0;  // embedding rows, pad row included
  std::size_t d_model = 512;
  std::size_t num_heads = 4;   // 0 bypasses the attention block
  std::vector<std::size_t> fc_dims{256, 128};
  std::vector<PoolingView> pooling_views{PoolingView::max, PoolingView::mean, PoolingView::sum, PoolingView::lse};
  InstancePooling instance_pooling = InstancePooling::self_adaptive;
  ModelKind kind = ModelKind::ami_net_plus;
  std::uint64_t seed = 0;

  std::size_t instance_dim() const { return fc_dims.back(); }
  std::size_t head_dim() const { return num_heads == 0 ? 0 : d_model / num_heads; }
  bool has_attention_block() const { return kind == ModelKind::ami_net_plus && num_heads > 0; }

  void validate() const {
    if (vocab_size < 2) throw ConfigError("vocab_size must cover the pad row and at least one token");
    if (d_model == 0) throw ConfigError("d_model must be positive");
    if (num_heads > 0 && d_model % num_heads != 0) {
      throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by num_heads " +
                        std::to_string(num_heads));
    }
    if (fc_dims.empty()) throw ConfigError("fc_dims must be nonempty");
    for (auto d : fc_dims) {
      if (d == 0) throw ConfigError("fc_dims entries must be positive");
    }
    if (kind == ModelKind::ami_net_plus && instance_pooling == InstancePooling::self_adaptive &&
        pooling_views.empty()) {
      throw ConfigError("self-adaptive pooling needs at least one view");
    }
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// ---------------------------------------------------------------------------
// Parameters

enum class Init { xavier, zeros, ones, embedding };

struct ParamSpec {
  std::string name;
  Shape shape;
  Init init;
};

inline std::string head_param(std::size_t h, std::string_view role) {
  return "attn.head" + std::to_string(h) + "." + std::string(role);
}

/// Every parameter of a model in creation order. Shapes depend on the
/// config alone, which is what checkpoint validation relies on.
inline std::vector<ParamSpec> parameter_layout(const ModelConfig& c) {
  c.validate();
  const std::size_t d = c.d_model;
  const std::size_t m = c.instance_dim();
  std::vector<ParamSpec> out;
  out.push_back({"embedding", {c.vocab_size, d}, Init::embedding});
  if (c.has_attention_block()) {
    const std::size_t dk = c.head_dim();
    for (std::size_t h = 0; h < c.num_heads; ++h) {
      out.push_back({head_param(h, "query"), {d, dk}, Init::xavier});
      out.push_back({head_param(h, "key"), {d, dk}, Init::xavier});
      out.push_back({head_param(h, "value"), {d, dk}, Init::xavier});
    }
    out.push_back({"attn.output", {c.num_heads * dk, d}, Init::xavier});
    out.push_back({"attn.norm.gain", {d}, Init::ones});
    out.push_back({"attn.norm.bias", {d}, Init::zeros});
  }
  std::size_t in = d;
  for (std::size_t i = 0; i < c.fc_dims.size(); ++i) {
    out.push_back({"ffn" + std::to_string(i) + ".weight", {in, c.fc_dims[i]}, Init::xavier});
    out.push_back({"ffn" + std::to_string(i) + ".bias", {c.fc_dims[i]}, Init::zeros});
    in = c.fc_dims[i];
  }
  auto gate = [&](bool gated, const std::string& prefix) {
    out.push_back({prefix + ".w1", {m, 1}, Init::xavier});
    out.push_back({prefix + ".w2", {m, m}, Init::xavier});
    if (gated) out.push_back({prefix + ".w3", {m, m}, Init::xavier});
  };
  auto score = [&](std::size_t rows) {
    out.push_back({"score.weight", {rows, 1}, Init::xavier});
    out.push_back({"score.bias", {1}, Init::zeros});
  };
  switch (c.kind) {
    case ModelKind::ami_net_plus:
      if (c.instance_pooling == InstancePooling::self_adaptive) {
        out.push_back({"pool.view_weights", {c.pooling_views.size(), 1}, Init::xavier});
      } else if (c.instance_pooling == InstancePooling::attention) {
        gate(false, "pool.attention");
      }
      gate(true, "gate");
      score(2 * m);
      break;
    case ModelKind::mi_net:
      out.push_back({"instance_score.weight", {m, 1}, Init::xavier});
      out.push_back({"instance_score.bias", {1}, Init::zeros});
      break;
    case ModelKind::big_mi_net: score(m); break;
    case ModelKind::att_net:
      gate(false, "attention");
      score(m);
      break;
    case ModelKind::gated_att_net:
      gate(true, "gate");
      score(m);
      break;
  }
  return out;
}

inline std::vector<std::size_t> frozen_rows(const ParamSpec& spec) {
  if (spec.init == Init::embedding) return {bagdata::Vocabulary::pad_id};
  return {};
}

/// Glorot-uniform weights, zero biases, unit layer-norm gain, N(0, 1/d)
/// embedding rows with the pad row pinned at zero.
inline ParameterSet init_params(const ModelConfig& config, std::uint64_t rng_seed) {
  Rng rng(rng_seed);
  ParameterSet params;
  for (const auto& spec : parameter_layout(config)) {
    Tensor t = Tensor::zeros(spec.shape, true);
    auto v = t.mutable_data();
    switch (spec.init) {
      case Init::xavier: {
        const double fan_in = static_cast<double>(spec.shape[0]);
        const double fan_out = static_cast<double>(spec.shape.size() > 1 ? spec.shape[1] : 1);
        const double bound = std::sqrt(6.0 / (fan_in + fan_out));
        for (double& x : v) x = rng.uniform(-bound, bound);
        break;
      }
      case Init::zeros: break;
      case Init::ones: std::fill(v.begin(), v.end(), 1.0); break;
      case Init::embedding: {
        const std::size_t d = spec.shape[1];
        const double sd = 1.0 / std::sqrt(static_cast<double>(d));
        for (std::size_t i = d; i < v.size(); ++i) v[i] = rng.normal(0.0, sd);
        break;
      }
    }
    params.add(spec.name, std::move(t), frozen_rows(spec));
  }
  return params;
}

/// Throws if `params` does not match the layout implied by `config`.
inline void check_compatible(const ParameterSet& params, const ModelConfig& config) {
  const auto layout = parameter_layout(config);
  if (layout.size() != params.size()) {
    throw ConfigError("parameter count mismatch: expected " + std::to_string(layout.size()) + ", found " +
                      std::to_string(params.size()));
  }
  std::size_t i = 0;
  for (const auto& p : params) {
    const auto& spec = layout[i++];
    if (p.name != spec.name) throw ConfigError("parameter '" + p.name + "' where '" + spec.name + "' was expected");
    if (p.value.shape() != spec.shape) {
      throw ConfigError("parameter '" + p.name + "': expected shape " + ag::to_string(spec.shape) + ", found " +
                        ag::to_string(p.value.shape()));
    }
  }
}

// ---------------------------------------------------------------------------
// Components

struct Instances {
  Tensor rows;  // [batch*width x features]
  std::vector<std::uint8_t> mask;
  std::size_t batch = 0;
  std::size_t width = 0;

  /// Constant [batch*width x 1] column of 0/1 used to re-zero pad rows.
  Tensor mask_column() const {
    std::vector<double> v(mask.begin(), mask.end());
    return Tensor({mask.size(), 1}, std::move(v));
  }
  ag::Mask bag_mask(Shape shape) const { return ag::Mask(std::move(shape), mask); }
};

inline Instances embed_bags(Tape& tape, const bagdata::BatchedBags& batch, const Tensor& table) {
  const std::size_t rows = table.extent(0);
  for (std::size_t i = 0; i < batch.token_ids.size(); ++i) {
    if (batch.token_ids[i] >= rows) {
      throw DataError("bag " + batch.ids[i / batch.width] + ": token id " + std::to_string(batch.token_ids[i]) +
                      " outside embedding table of " + std::to_string(rows) + " rows");
    }
  }
  Instances out{Tensor(), batch.mask, batch.batch, batch.width};
  Tensor gathered = ag::gather_rows(tape, table, batch.token_ids);
  out.rows = ag::mul(tape, gathered, out.mask_column());
  return out;
}

/// Batched attention over bags: Q, K, V are [B x L x dk], key_mask is B*L.
/// Softmax runs over valid keys; rows of pad queries are zeroed.
inline Tensor masked_attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v,
                               const std::vector<std::uint8_t>& key_mask) {
  const std::size_t b = q.extent(0);
  const std::size_t l = q.extent(1);
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(q.extent(2)));
  Tensor sim = ag::scale(tape, ag::bmm(tape, q, ag::transpose(tape, k)), inv_sqrt_dk);
  Tensor weights = ag::masked_softmax(tape, sim, ag::Mask({b, 1, l}, key_mask), 2);
  Tensor out = ag::bmm(tape, weights, v);
  std::vector<double> rows(key_mask.begin(), key_mask.end());
  return ag::mul(tape, out, Tensor({b, l, 1}, std::move(rows)));
}

/// Self-attention of one bag, queries = keys = values = x ([L x dk]).
inline Tensor scaled_dot_attention(Tape& tape, const Tensor& x, const std::vector<std::uint8_t>& mask) {
  if (x.rank() != 2 || mask.size() != x.extent(0)) {
    throw ShapeError("scaled_dot_attention: expected [L x dk] input with L mask entries");
  }
  if (std::none_of(mask.begin(), mask.end(), [](auto m) { return m != 0; })) {
    throw DomainError("scaled_dot_attention: bag has no valid instances");
  }
  Tensor x3 = ag::reshape(tape, x, {1, x.extent(0), x.extent(1)});
  return ag::reshape(tape, masked_attention(tape, x3, x3, x3, mask), x.shape());
}

/// Multi-head self-attention, residual connection, then layer norm. With
/// zero heads the block is the identity.
inline Tensor multi_head_block(Tape& tape, const Instances& x, const ParameterSet& params,
                               const ModelConfig& config) {
  if (config.num_heads == 0) return x.rows;
  if (config.d_model % config.num_heads != 0) {
    throw ConfigError("d_model " + std::to_string(config.d_model) + " is not divisible by num_heads " +
                      std::to_string(config.num_heads));
  }
  const std::size_t dk = config.head_dim();
  const Shape bag_shape{x.batch, x.width, dk};
  std::vector<Tensor> heads;
  for (std::size_t h = 0; h < config.num_heads; ++h) {
    Tensor q = ag::reshape(tape, ag::matmul(tape, x.rows, params.at(head_param(h, "query"))), bag_shape);
    Tensor k = ag::reshape(tape, ag::matmul(tape, x.rows, params.at(head_param(h, "key"))), bag_shape);
    Tensor v = ag::reshape(tape, ag::matmul(tape, x.rows, params.at(head_param(h, "value"))), bag_shape);
    heads.push_back(ag::reshape(tape, masked_attention(tape, q, k, v, x.mask), {x.batch * x.width, dk}));
  }
  Tensor joined = heads.size() == 1 ? heads.front() : ag::concat(tape, heads, 1);
  Tensor projected = ag::matmul(tape, joined, params.at("attn.output"));
  Tensor normed = ag::layer_norm(tape, ag::add(tape, x.rows, projected), params.at("attn.norm.gain"),
                                 params.at("attn.norm.bias"), kLayerNormEpsilon);
  return ag::mul(tape, normed, x.mask_column());
}

/// Affine + relu per fc stage; pad rows re-zeroed after each stage.
inline Tensor instance_ffn(Tape& tape, const Tensor& rows, const Instances& layout, const ParameterSet& params,
                           const ModelConfig& config) {
  const Tensor keep = layout.mask_column();
  Tensor h = rows;
  for (std::size_t i = 0; i < config.fc_dims.size(); ++i) {
    const std::string p = "ffn" + std::to_string(i);
    h = ag::relu(tape, ag::add(tape, ag::matmul(tape, h, params.at(p + ".weight")), params.at(p + ".bias")));
    h = ag::mul(tape, h, keep);
  }
  return h;
}

/// One untrainable pooling over the instance axis: [B*L x M] -> [B x M].
inline Tensor pool_instances(Tape& tape, const Tensor& h, const Instances& layout, PoolingView view) {
  const std::size_t m = h.extent(1);
  Tensor h3 = ag::reshape(tape, h, {layout.batch, layout.width, m});
  return ag::reduce(tape, reduce_kind(view), h3, 1, layout.bag_mask({layout.batch, layout.width, 1}));
}

/// Each view pools over the instance axis per dimension; the views are
/// combined by the learned V x 1 weighting.
inline Tensor self_adaptive_pool(Tape& tape, const Tensor& h, const Instances& layout, const Tensor& view_weights,
                                 const std::vector<PoolingView>& views) {
  if (views.empty() || view_weights.size() != views.size()) {
    throw ShapeError("self_adaptive_pool: " + std::to_string(views.size()) + " views but weights of shape " +
                     ag::to_string(view_weights.shape()));
  }
  const std::size_t b = layout.batch;
  const std::size_t m = h.extent(1);
  std::vector<Tensor> pooled;
  for (auto v : views) pooled.push_back(ag::reshape(tape, pool_instances(tape, h, layout, v), {b, m, 1}));
  Tensor stacked = pooled.size() == 1 ? pooled.front() : ag::concat(tape, pooled, 2);
  Tensor flat = ag::reshape(tape, stacked, {b * m, views.size()});
  return ag::reshape(tape, ag::matmul(tape, flat, view_weights), {b, m});
}

struct AttentionPool {
  Tensor pooled;   // [B x M]
  Tensor weights;  // [B x L], zero at pad positions
};

/// score_j = w1^T (tanh(h_j W2) [* sigmoid(h_j W3)]), softmax over the valid
/// instances of each bag, then the weighted sum of instance rows. Passing
/// no w3 gives the ungated variant.
inline AttentionPool attention_pool(Tape& tape, const Tensor& h, const Instances& layout, const Tensor& w1,
                                    const Tensor& w2, const std::optional<Tensor>& w3) {
  const std::size_t b = layout.batch;
  const std::size_t l = layout.width;
  const std::size_t m = h.extent(1);
  Tensor act = ag::tanh(tape, ag::matmul(tape, h, w2));
  if (w3) act = ag::mul(tape, act, ag::sigmoid(tape, ag::matmul(tape, h, *w3)));
  Tensor gate = ag::reshape(tape, ag::matmul(tape, act, w1), {b, l});
  Tensor weights = ag::masked_softmax(tape, gate, layout.bag_mask({b, l}), 1);
  Tensor pooled = ag::bmm(tape, ag::reshape(tape, weights, {b, 1, l}), ag::reshape(tape, h, {b, l, m}));
  return {ag::reshape(tape, pooled, {b, m}), weights};
}

inline AttentionPool gated_attention_pool(Tape& tape, const Tensor& h, const Instances& layout, const Tensor& w1,
                                          const Tensor& w2, const Tensor& w3) {
  return attention_pool(tape, h, layout, w1, w2, w3);
}

/// sigmoid(z . w + b) clamped away from 0 and 1; z is [B x F], result [B].
inline Tensor linear_probability(Tape& tape, const Tensor& z, const Tensor& weight, const Tensor& bias) {
  Tensor logit = ag::add(tape, ag::matmul(tape, z, weight), bias);
  Tensor p = ag::clamp(tape, ag::sigmoid(tape, logit), kProbabilityClamp, 1.0 - kProbabilityClamp);
  return ag::reshape(tape, p, {z.extent(0)});
}

/// Scores the concatenation [z_att ; z_sap].
inline Tensor bag_score(Tape& tape, const Tensor& z_att, const Tensor& z_sap, const Tensor& weight,
                        const Tensor& bias) {
  return linear_probability(tape, ag::concat(tape, {z_att, z_sap}, 1), weight, bias);
}

// ---------------------------------------------------------------------------
// Full models

struct ForwardOutput {
  Tensor probabilities;              // [B]
  std::optional<Tensor> attention;   // [B x L] bag-level attention weights
};

inline Tensor instance_pooling(Tape& tape, const Tensor& h, const Instances& x, const ParameterSet& params,
                               const ModelConfig& config) {
  switch (config.instance_pooling) {
    case InstancePooling::self_adaptive:
      return self_adaptive_pool(tape, h, x, params.at("pool.view_weights"), config.pooling_views);
    case InstancePooling::max: return pool_instances(tape, h, x, PoolingView::max);
    case InstancePooling::mean: return pool_instances(tape, h, x, PoolingView::mean);
    case InstancePooling::sum: return pool_instances(tape, h, x, PoolingView::sum);
    case InstancePooling::lse: return pool_instances(tape, h, x, PoolingView::lse);
    case InstancePooling::attention:
      return attention_pool(tape, h, x, params.at("pool.attention.w1"), params.at("pool.attention.w2"),
                            std::nullopt)
          .pooled;
  }
  throw ConfigError("unknown instance pooling");
}

/// Shared embed + FFN trunk of the baselines followed by their heads.
inline ForwardOutput baseline_forward(Tape& tape, const bagdata::BatchedBags& batch, const ParameterSet& params,
                                      const ModelConfig& config) {
  Instances x = embed_bags(tape, batch, params.at("embedding"));
  Tensor h = instance_ffn(tape, x.rows, x, params, config);
  switch (config.kind) {
    case ModelKind::mi_net: {
      Tensor s = ag::sigmoid(tape, ag::add(tape, ag::matmul(tape, h, params.at("instance_score.weight")),
                                           params.at("instance_score.bias")));
      Tensor bag = ag::reduce(tape, ag::ReduceKind::max, ag::reshape(tape, s, {x.batch, x.width}), 1,
                              x.bag_mask({x.batch, x.width}));
      return {ag::clamp(tape, bag, kProbabilityClamp, 1.0 - kProbabilityClamp), std::nullopt};
    }
    case ModelKind::big_mi_net: {
      Tensor z = pool_instances(tape, h, x, PoolingView::max);
      return {linear_probability(tape, z, params.at("score.weight"), params.at("score.bias")), std::nullopt};
    }
    case ModelKind::att_net: {
      auto pool = attention_pool(tape, h, x, params.at("attention.w1"), params.at("attention.w2"), std::nullopt);
      return {linear_probability(tape, pool.pooled, params.at("score.weight"), params.at("score.bias")),
              pool.weights};
    }
    case ModelKind::gated_att_net: {
      auto pool = gated_attention_pool(tape, h, x, params.at("gate.w1"), params.at("gate.w2"), params.at("gate.w3"));
      return {linear_probability(tape, pool.pooled, params.at("score.weight"), params.at("score.bias")),
              pool.weights};
    }
    case ModelKind::ami_net_plus: break;
  }
  throw ConfigError("baseline_forward: " + std::string(to_string(config.kind)) + " is not a baseline");
}

/// embed -> multi-head block -> instance FFN -> {instance pooling, gated
/// attention pooling} -> linear scorer -> sigmoid.
inline ForwardOutput forward(Tape& tape, const bagdata::BatchedBags& batch, const ParameterSet& params,
                             const ModelConfig& config) {
  if (config.kind != ModelKind::ami_net_plus) return baseline_forward(tape, batch, params, config);
  Instances x = embed_bags(tape, batch, params.at("embedding"));
  Tensor attended = multi_head_block(tape, x, params, config);
  Tensor h = instance_ffn(tape, attended, x, params, config);
  Tensor z_sap = instance_pooling(tape, h, x, params, config);
  auto att = gated_attention_pool(tape, h, x, params.at("gate.w1"), params.at("gate.w2"), params.at("gate.w3"));
  Tensor p = bag_score(tape, att.pooled, z_sap, params.at("score.weight"), params.at("score.bias"));
  return {p, att.weights};
}

/// Probabilities without recording a tape.
inline std::vector<double> predict(const bagdata::BatchedBags& batch, const ParameterSet& params,
                                   const ModelConfig& config) {
  Tape tape = Tape::no_grad();
  auto out = forward(tape, batch, params, config);
  return {out.probabilities.data().begin(), out.probabilities.data().end()};
}

}  // namespace amil::milnet
