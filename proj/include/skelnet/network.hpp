#pragma once

// Two-path skeleton classifier.
//
//   spatial:  per-part FC encoders (arms share, legs share) -> self-attention
//             over the 5 part tokens -> GCN over the part graph -> max over
//             parts -> 2 FC layers, per frame
//   temporal: 4 bidirectional LSTM layers -> projection -> self-attention over
//             frames -> 3 FC layers, the last two wrapped in a residual
//   fusion:   per-frame concat -> projection -> multi-head self-attention with
//             residual -> mean over frames -> 2 FC layers -> softmax
//
// Every FC layer with an activation is FC -> batch norm -> leaky ReLU.

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "skelnet/autodiff.hpp"
#include "skelnet/errors.hpp"
#include "skelnet/pose_data.hpp"

namespace skelnet::net {

using ad::Mode;
using ad::Var;

struct ModelConfig {
  std::size_t n_part = 64;       // part encoder width
  std::size_t n_graph_out = 16;  // GCN output width
  std::size_t spatial_out = 16;  // width of the two spatial FC layers
  std::size_t n_rnn = 32;        // LSTM hidden size per direction
  std::size_t n_rnn_layers = 4;
  std::size_t n_rnn_out = 15;  // temporal output width
  std::size_t fusion_width = 32;
  std::size_t n_heads = 4;
  std::size_t head_hidden = 16;
  double dropout_p = 0.2;
  bool gcn_self_loops = false;
  double gcn_init_const = 0.01;
  double leaky_slope = 0.01;
  double bn_momentum = ad::kBatchNormMomentum;
  double bn_epsilon = ad::kBatchNormEpsilon;

  void validate() const {
    for (std::size_t w : {n_part, n_graph_out, spatial_out, n_rnn, n_rnn_layers, n_rnn_out,
                          fusion_width, n_heads, head_hidden})
      if (w < 1) throw ConfigError("model widths must be at least 1");
    if (fusion_width % n_heads != 0)
      throw ConfigError("fusion_width " + std::to_string(fusion_width) +
                        " is not divisible by n_heads " + std::to_string(n_heads));
    if (dropout_p < 0.0 || dropout_p >= 1.0) throw ConfigError("dropout_p must lie in [0, 1)");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"n_part", c.n_part},         {"n_graph_out", c.n_graph_out},
       {"spatial_out", c.spatial_out}, {"n_rnn", c.n_rnn},
       {"n_rnn_layers", c.n_rnn_layers}, {"n_rnn_out", c.n_rnn_out},
       {"fusion_width", c.fusion_width}, {"n_heads", c.n_heads},
       {"head_hidden", c.head_hidden}, {"dropout_p", c.dropout_p},
       {"gcn_self_loops", c.gcn_self_loops}, {"gcn_init_const", c.gcn_init_const},
       {"leaky_slope", c.leaky_slope}, {"bn_momentum", c.bn_momentum},
       {"bn_epsilon", c.bn_epsilon}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("n_part").get_to(c.n_part);
  j.at("n_graph_out").get_to(c.n_graph_out);
  j.at("spatial_out").get_to(c.spatial_out);
  j.at("n_rnn").get_to(c.n_rnn);
  j.at("n_rnn_layers").get_to(c.n_rnn_layers);
  j.at("n_rnn_out").get_to(c.n_rnn_out);
  j.at("fusion_width").get_to(c.fusion_width);
  j.at("n_heads").get_to(c.n_heads);
  j.at("head_hidden").get_to(c.head_hidden);
  j.at("dropout_p").get_to(c.dropout_p);
  j.at("gcn_self_loops").get_to(c.gcn_self_loops);
  j.at("gcn_init_const").get_to(c.gcn_init_const);
  j.at("leaky_slope").get_to(c.leaky_slope);
  j.at("bn_momentum").get_to(c.bn_momentum);
  j.at("bn_epsilon").get_to(c.bn_epsilon);
}

// ---------------------------------------------------------------------------
// Parameters

enum class Role { Weight, Bias, NormAffine, NormRunning };

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
};

struct DenseBlock {
  Linear fc;
  Tensor bn_scale;
  Tensor bn_shift;
  ad::BatchNormState bn;
};

struct AttentionWeights {
  Tensor query, key, value;  // [d_in, d_k], [d_in, d_k], [d_in, d_v]
};

struct MultiHeadWeights {
  Tensor query, key, value, output;  // all [d, d]
};

struct LstmDirection {
  Tensor input_weight;   // [in, 4H], gate order i, f, g, o
  Tensor hidden_weight;  // [H, 4H]
  Tensor bias;           // [4H]
};

struct LstmLayer {
  LstmDirection forward, backward;
};

using Encoder = std::array<DenseBlock, 3>;

struct ParameterStore {
  ModelConfig config;
  std::array<Encoder, 3> encoders;  // indexed by Archetype
  AttentionWeights spatial_attention;
  Tensor gcn_weight;
  std::array<DenseBlock, 2> spatial_fc;
  std::vector<LstmLayer> lstm;
  Linear temporal_projection;
  AttentionWeights temporal_attention;
  std::array<DenseBlock, 3> temporal_fc;
  Linear fusion_input;
  MultiHeadWeights fusion;
  DenseBlock head_hidden;
  Linear head_out;

  /// Both arms resolve to one encoder object, likewise both legs.
  Encoder& encoder(Part p) { return encoders[static_cast<std::size_t>(archetype(p))]; }
  const Encoder& encoder(Part p) const {
    return encoders[static_cast<std::size_t>(archetype(p))];
  }

  template <class F>
  void visit(F&& f) { visit_impl(*this, f); }
  template <class F>
  void visit(F&& f) const { visit_impl(*this, f); }

 private:
  template <class Self, class F>
  static void visit_impl(Self& s, F& f) {
    auto linear = [&](const std::string& n, auto& l) {
      f(n + ".weight", l.weight, Role::Weight);
      f(n + ".bias", l.bias, Role::Bias);
    };
    auto dense = [&](const std::string& n, auto& d) {
      linear(n, d.fc);
      f(n + ".bn.scale", d.bn_scale, Role::NormAffine);
      f(n + ".bn.shift", d.bn_shift, Role::NormAffine);
      f(n + ".bn.running_mean", d.bn.running_mean, Role::NormRunning);
      f(n + ".bn.running_var", d.bn.running_var, Role::NormRunning);
    };
    auto attention = [&](const std::string& n, auto& a) {
      f(n + ".query", a.query, Role::Weight);
      f(n + ".key", a.key, Role::Weight);
      f(n + ".value", a.value, Role::Weight);
    };
    static constexpr std::array<const char*, 3> kArchetypes{"torso", "arm", "leg"};
    for (std::size_t a = 0; a < 3; ++a)
      for (std::size_t l = 0; l < 3; ++l)
        dense(std::string("encoder.") + kArchetypes[a] + ".fc" + std::to_string(l + 1),
              s.encoders[a][l]);
    attention("spatial.attention", s.spatial_attention);
    f("spatial.gcn.weight", s.gcn_weight, Role::Weight);
    for (std::size_t l = 0; l < 2; ++l) dense("spatial.fc" + std::to_string(l + 1), s.spatial_fc[l]);
    for (std::size_t l = 0; l < s.lstm.size(); ++l)
      for (int dir = 0; dir < 2; ++dir) {
        auto& d = dir == 0 ? s.lstm[l].forward : s.lstm[l].backward;
        const std::string n =
            "temporal.lstm" + std::to_string(l) + (dir == 0 ? ".forward" : ".backward");
        f(n + ".input_weight", d.input_weight, Role::Weight);
        f(n + ".hidden_weight", d.hidden_weight, Role::Weight);
        f(n + ".bias", d.bias, Role::Bias);
      }
    linear("temporal.projection", s.temporal_projection);
    attention("temporal.attention", s.temporal_attention);
    for (std::size_t l = 0; l < 3; ++l)
      dense("temporal.fc" + std::to_string(l + 1), s.temporal_fc[l]);
    linear("fusion.input", s.fusion_input);
    attention("fusion.mha", s.fusion);
    f("fusion.mha.output", s.fusion.output, Role::Weight);
    dense("head.fc1", s.head_hidden);
    linear("head.out", s.head_out);
  }
};

inline bool trainable(Role r) { return r != Role::NormRunning; }

namespace detail {

inline Tensor kaiming(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  Tensor t(Shape{fan_in, fan_out});
  for (auto& v : t.storage()) v = dist(rng);
  return t;
}

inline Linear make_linear(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  return Linear{kaiming(in, out, rng), Tensor(Shape{out})};
}

inline DenseBlock make_dense(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  DenseBlock d;
  d.fc = make_linear(in, out, rng);
  d.bn_scale = Tensor(Shape{out}, 1.0);
  d.bn_shift = Tensor(Shape{out});
  d.bn.running_mean = Tensor(Shape{out});
  d.bn.running_var = Tensor(Shape{out}, 1.0);
  return d;
}

inline AttentionWeights make_attention(std::size_t in, std::size_t dk, std::size_t dv,
                                       std::mt19937_64& rng) {
  AttentionWeights a;
  a.query = kaiming(in, dk, rng);
  a.key = kaiming(in, dk, rng);
  a.value = kaiming(in, dv, rng);
  return a;
}

inline LstmDirection make_lstm_direction(std::size_t in, std::size_t hidden,
                                         std::mt19937_64& rng) {
  return LstmDirection{kaiming(in, 4 * hidden, rng), kaiming(hidden, 4 * hidden, rng),
                       Tensor(Shape{4 * hidden})};
}

}  // namespace detail

/// Kaiming-normal weights, zero biases, identity batch norm, constant GCN weight.
inline ParameterStore init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  ParameterStore p;
  p.config = config;
  for (Archetype a : {Archetype::Torso, Archetype::Arm, Archetype::Leg}) {
    const Part sample = a == Archetype::Torso ? Part::Torso
                        : a == Archetype::Arm ? Part::RightArm
                                              : Part::RightLeg;
    const std::size_t in = 2 * part_keypoints(sample).size();
    auto& enc = p.encoders[static_cast<std::size_t>(a)];
    enc[0] = detail::make_dense(in, config.n_part, rng);
    enc[1] = detail::make_dense(config.n_part, config.n_part, rng);
    enc[2] = detail::make_dense(config.n_part, config.n_part, rng);
  }
  p.spatial_attention = detail::make_attention(config.n_part, config.n_part, config.n_part, rng);
  p.gcn_weight = Tensor(Shape{config.n_part, config.n_graph_out}, config.gcn_init_const);
  p.spatial_fc[0] = detail::make_dense(config.n_graph_out, config.spatial_out, rng);
  p.spatial_fc[1] = detail::make_dense(config.spatial_out, config.spatial_out, rng);
  for (std::size_t l = 0; l < config.n_rnn_layers; ++l) {
    const std::size_t in = l == 0 ? kClipRows : 2 * config.n_rnn;
    LstmLayer layer;
    layer.forward = detail::make_lstm_direction(in, config.n_rnn, rng);
    layer.backward = detail::make_lstm_direction(in, config.n_rnn, rng);
    p.lstm.push_back(std::move(layer));
  }
  p.temporal_projection = detail::make_linear(2 * config.n_rnn, config.n_rnn_out, rng);
  p.temporal_attention =
      detail::make_attention(config.n_rnn_out, config.n_rnn_out, config.n_rnn_out, rng);
  for (auto& d : p.temporal_fc) d = detail::make_dense(config.n_rnn_out, config.n_rnn_out, rng);
  const std::size_t joined = config.spatial_out + config.n_rnn_out;
  p.fusion_input = detail::make_linear(joined, config.fusion_width, rng);
  const std::size_t fw = config.fusion_width;
  p.fusion.query = detail::kaiming(fw, fw, rng);
  p.fusion.key = detail::kaiming(fw, fw, rng);
  p.fusion.value = detail::kaiming(fw, fw, rng);
  p.fusion.output = detail::kaiming(fw, fw, rng);
  p.head_hidden = detail::make_dense(fw, config.head_hidden, rng);
  p.head_out = detail::make_linear(config.head_hidden, 2, rng);
  return p;
}

// ---------------------------------------------------------------------------
// Binding parameters into a graph

/// Maps parameter tensors to graph leaves. Tensors are keyed by address, so a
/// tensor reached through two routes (shared encoders) yields one leaf and
/// its gradient sums both uses.
class Binder {
 public:
  explicit Binder(bool track_grads) : track_(track_grads) {}

  Var operator()(const Tensor& t) {
    auto it = vars_.find(&t);
    if (it != vars_.end()) return it->second;
    Var v = track_ ? ad::parameter(t) : ad::constant(t);
    vars_.emplace(&t, v);
    return v;
  }

  /// Gradient for a bound tensor; zeros when it never joined the graph.
  Tensor grad(const Tensor& t) const {
    auto it = vars_.find(&t);
    return it == vars_.end() ? Tensor(t.shape()) : it->second.grad();
  }

  bool tracking() const { return track_; }

 private:
  bool track_;
  std::unordered_map<const Tensor*, Var> vars_;
};

template <class Store>
struct Context {
  Store& params;
  Binder& bind;
  Mode mode = Mode::Eval;
  std::mt19937_64* rng = nullptr;
};

template <class Store>
Context(Store&, Binder&, Mode, std::mt19937_64*) -> Context<Store>;

// ---------------------------------------------------------------------------
// Building blocks

inline Var linear(const Var& x, const Var& weight, const Var& bias) {
  return ad::add(ad::matmul(x, weight), bias);
}

/// FC -> batch norm -> leaky ReLU over a [rows, in] input.
template <class Store, class Block>
Var dense_block(const Var& x, Block& block, Context<Store>& ctx) {
  const auto& cfg = ctx.params.config;
  Var y = linear(x, ctx.bind(block.fc.weight), ctx.bind(block.fc.bias));
  Var scale = ctx.bind(block.bn_scale), shift = ctx.bind(block.bn_shift);
  if (ctx.mode == Mode::Eval) {
    y = ad::batch_norm(y, scale, shift, std::as_const(block.bn), cfg.bn_epsilon);
  } else if constexpr (std::is_const_v<Block>) {
    ad::BatchNormState scratch = block.bn;
    y = ad::batch_norm(y, scale, shift, scratch, Mode::Train, cfg.bn_momentum, cfg.bn_epsilon);
  } else {
    y = ad::batch_norm(y, scale, shift, block.bn, Mode::Train, cfg.bn_momentum, cfg.bn_epsilon);
  }
  return ad::leaky_relu(y, cfg.leaky_slope);
}

template <class Store>
Var maybe_dropout(const Var& x, Context<Store>& ctx) {
  const double p = ctx.params.config.dropout_p;
  if (ctx.mode == Mode::Eval || p == 0.0) return x;
  if (!ctx.rng) throw ConfigError("train-mode dropout needs a random generator");
  return ad::dropout(x, p, Mode::Train, *ctx.rng);
}

/// Degree-normalized propagation over the part graph.
struct PartGraph {
  Tensor adjacency;    // [n, n], symmetric, binary
  Tensor propagation;  // D^-1/2 (A [+ I]) D^-1/2
  bool self_loops = false;
};

inline PartGraph make_part_graph(Tensor adjacency, bool self_loops) {
  if (adjacency.rank() != 2 || adjacency.dim(0) != adjacency.dim(1))
    throw NumericError("adjacency must be square");
  const std::size_t n = adjacency.dim(0);
  Tensor a = adjacency;
  if (self_loops)
    for (std::size_t i = 0; i < n; ++i) a.at(i, i) += 1.0;
  std::vector<double> inv_sqrt(n);
  for (std::size_t i = 0; i < n; ++i) {
    double deg = 0.0;
    for (std::size_t j = 0; j < n; ++j) deg += a.at(i, j);
    if (deg <= 0.0) throw NumericError("part graph node " + std::to_string(i) + " has degree 0");
    inv_sqrt[i] = 1.0 / std::sqrt(deg);
  }
  Tensor p(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) p.at(i, j) = inv_sqrt[i] * a.at(i, j) * inv_sqrt[j];
  return PartGraph{std::move(adjacency), std::move(p), self_loops};
}

/// Complete graph over the body parts, no self-connections in the adjacency.
inline PartGraph complete_part_graph(std::size_t n, bool self_loops) {
  Tensor a(Shape{n, n}, 1.0);
  for (std::size_t i = 0; i < n; ++i) a.at(i, i) = 0.0;
  return make_part_graph(std::move(a), self_loops);
}

/// leaky_relu(P . H . W) for H of shape [nodes, d] or [batch, nodes, d].
inline Var gcn_forward(const Var& features, const PartGraph& graph, const Var& weight,
                       double slope = 0.01) {
  Var hw = ad::matmul(features, weight);
  return ad::leaky_relu(ad::matmul(ad::constant(graph.propagation), hw), slope);
}

struct AttentionResult {
  Var output;
  Var weights;
};

/// softmax(Q K^T / sqrt(d_k)) V with Q, K, V projected from the same tokens.
/// Tokens are [n, d] or [batch, n, d].
inline AttentionResult scaled_dot_attention(const Var& q, const Var& k, const Var& v) {
  const double dk = static_cast<double>(q.shape().back());
  Var scores = ad::scale(ad::matmul(q, ad::transpose(k)), 1.0 / std::sqrt(dk));
  Var w = ad::row_softmax(scores);
  return {ad::matmul(w, v), w};
}

inline AttentionResult self_attention(const Var& tokens, const Var& wq, const Var& wk,
                                      const Var& wv) {
  return scaled_dot_attention(ad::matmul(tokens, wq), ad::matmul(tokens, wk),
                              ad::matmul(tokens, wv));
}

struct MultiHeadResult {
  Var output;                 // same shape as the input tokens
  std::vector<Var> weights;  // one [.., n, n] matrix per head
};

/// Multi-head self-attention over [batch, n, d] or [n, d] tokens, followed by
/// the output projection and a residual connection to the input.
inline MultiHeadResult multi_head_attention(const Var& tokens, const Var& wq, const Var& wk,
                                            const Var& wv, const Var& wo, std::size_t n_heads) {
  const std::size_t d = tokens.shape().back();
  if (n_heads == 0 || d % n_heads != 0)
    throw ConfigError("multi-head width " + std::to_string(d) + " is not divisible by " +
                      std::to_string(n_heads) + " heads");
  const std::size_t dh = d / n_heads;
  const std::size_t axis = tokens.rank() - 1;
  Var q = ad::matmul(tokens, wq), k = ad::matmul(tokens, wk), v = ad::matmul(tokens, wv);
  MultiHeadResult r;
  std::vector<Var> heads;
  for (std::size_t h = 0; h < n_heads; ++h) {
    auto a = scaled_dot_attention(ad::slice(q, axis, h * dh, dh), ad::slice(k, axis, h * dh, dh),
                                  ad::slice(v, axis, h * dh, dh));
    heads.push_back(a.output);
    r.weights.push_back(a.weights);
  }
  Var joined = n_heads == 1 ? heads[0] : ad::concat(heads, axis);
  r.output = ad::add(ad::matmul(joined, wo), tokens);
  return r;
}

struct LstmState {
  Var h, c;
};

/// One LSTM step given the precomputed input contribution x W_x + b.
inline LstmState lstm_step(const Var& input_gates, const LstmState& prev, const Var& hidden_weight) {
  const std::size_t hsz = hidden_weight.shape()[0];
  const std::size_t axis = input_gates.rank() - 1;
  Var gates = ad::add(input_gates, ad::matmul(prev.h, hidden_weight));
  Var i = ad::sigmoid(ad::slice(gates, axis, 0, hsz));
  Var f = ad::sigmoid(ad::slice(gates, axis, hsz, hsz));
  Var g = ad::tanh(ad::slice(gates, axis, 2 * hsz, hsz));
  Var o = ad::sigmoid(ad::slice(gates, axis, 3 * hsz, hsz));
  Var c = ad::add(ad::mul(f, prev.c), ad::mul(i, g));
  return {ad::mul(o, ad::tanh(c)), c};
}

/// i, f, o = sigmoid(.), g = tanh(.); c_t = f*c + i*g; h_t = o*tanh(c_t).
inline LstmState lstm_cell(const Var& x, const LstmState& prev, const Var& input_weight,
                           const Var& hidden_weight, const Var& bias) {
  return lstm_step(linear(x, input_weight, bias), prev, hidden_weight);
}

struct LstmDirectionVars {
  Var input_weight, hidden_weight, bias;
};

/// Runs one direction over a [batch, T, in] sequence from zero states.
inline Var lstm_direction(const Var& seq, const LstmDirectionVars& w, bool reverse) {
  const std::size_t batch = seq.dim(0), steps = seq.dim(1);
  const std::size_t hsz = w.hidden_weight.shape()[0];
  Var xg = linear(seq, w.input_weight, w.bias);  // [B, T, 4H]
  LstmState state{ad::constant(Tensor(Shape{batch, hsz})), ad::constant(Tensor(Shape{batch, hsz}))};
  std::vector<Var> outputs(steps);
  for (std::size_t s = 0; s < steps; ++s) {
    const std::size_t t = reverse ? steps - 1 - s : s;
    Var xt = ad::reshape(ad::slice(xg, 1, t, 1), Shape{batch, 4 * hsz});
    state = lstm_step(xt, state, w.hidden_weight);
    outputs[t] = ad::reshape(state.h, Shape{batch, 1, hsz});
  }
  return ad::concat(outputs, 1);
}

/// Forward and backward passes concatenated per frame: [batch, T, 2H].
inline Var bilstm_layer(const Var& seq, const LstmDirectionVars& fwd, const LstmDirectionVars& bwd) {
  return ad::concat({lstm_direction(seq, fwd, false), lstm_direction(seq, bwd, true)}, 2);
}

// ---------------------------------------------------------------------------
// Paths

struct Batch {
  std::size_t size = 0;
  std::size_t frames = 0;
  std::array<Tensor, kNumParts> part_rows;  // [B*T, 2k_p], rows ordered (clip, frame)
  Tensor sequence;                          // [B, T, 50]
};

inline Batch make_batch(std::span<const SkeletonClip* const> clips) {
  if (clips.empty()) throw DataError("empty batch");
  Batch b;
  b.size = clips.size();
  b.frames = clips[0]->frames();
  for (const auto* c : clips) {
    if (c->matrix.rank() != 2 || c->matrix.dim(0) != kClipRows || c->frames() != b.frames)
      throw NumericError("clip shape " + shape_str(c->matrix.shape()) +
                         " does not match batch frame count " + std::to_string(b.frames));
  }
  const std::size_t rows = b.size * b.frames;
  for (Part p : kAllParts) {
    const auto kps = part_keypoints(p);
    Tensor t(Shape{rows, 2 * kps.size()});
    for (std::size_t i = 0; i < b.size; ++i)
      for (std::size_t f = 0; f < b.frames; ++f)
        for (std::size_t j = 0; j < kps.size(); ++j) {
          t.at(i * b.frames + f, 2 * j) = clips[i]->matrix.at(2 * kps[j], f);
          t.at(i * b.frames + f, 2 * j + 1) = clips[i]->matrix.at(2 * kps[j] + 1, f);
        }
    b.part_rows[static_cast<std::size_t>(p)] = std::move(t);
  }
  b.sequence = Tensor(Shape{b.size, b.frames, kClipRows});
  for (std::size_t i = 0; i < b.size; ++i)
    for (std::size_t f = 0; f < b.frames; ++f)
      for (std::size_t r = 0; r < kClipRows; ++r)
        b.sequence.at(i, f, r) = clips[i]->matrix.at(r, f);
  return b;
}

struct SpatialResult {
  Var features;       // [B, T, spatial_out]
  Var part_features;  // [B*T, 5, n_part] encoder outputs, part order of kAllParts
  Var attention;      // [B*T, 5, 5]
};

template <class Store>
SpatialResult spatial_forward(const Batch& batch, Context<Store>& ctx) {
  auto& P = ctx.params;
  const auto& cfg = P.config;
  const std::size_t rows = batch.size * batch.frames;

  // Each archetype encodes its parts in one pass so shared weights see both sides.
  std::array<Var, kNumParts> encoded;
  auto run_encoder = [&](auto& enc, Var x) {
    for (auto& block : enc) x = dense_block(x, block, ctx);
    return x;
  };
  encoded[static_cast<std::size_t>(Part::Torso)] =
      run_encoder(P.encoder(Part::Torso), ad::constant(batch.part_rows[0]));
  for (auto [a, b] : {std::pair{Part::RightArm, Part::LeftArm},
                      std::pair{Part::RightLeg, Part::LeftLeg}}) {
    const auto ia = static_cast<std::size_t>(a), ib = static_cast<std::size_t>(b);
    Var both = run_encoder(P.encoder(a), ad::concat({ad::constant(batch.part_rows[ia]),
                                                     ad::constant(batch.part_rows[ib])},
                                                    0));
    encoded[ia] = ad::slice(both, 0, 0, rows);
    encoded[ib] = ad::slice(both, 0, rows, rows);
  }
  std::vector<Var> tokens;
  for (auto& e : encoded) tokens.push_back(ad::reshape(e, Shape{rows, 1, cfg.n_part}));
  Var parts = ad::concat(tokens, 1);

  auto att = self_attention(parts, ctx.bind(P.spatial_attention.query),
                            ctx.bind(P.spatial_attention.key), ctx.bind(P.spatial_attention.value));
  const PartGraph graph = complete_part_graph(kNumParts, cfg.gcn_self_loops);
  Var g = gcn_forward(att.output, graph, ctx.bind(P.gcn_weight), cfg.leaky_slope);
  Var pooled = ad::max_over_axis(g, 1);  // [B*T, n_graph_out]
  Var x = dense_block(pooled, P.spatial_fc[0], ctx);
  x = dense_block(x, P.spatial_fc[1], ctx);
  x = maybe_dropout(x, ctx);
  return {ad::reshape(x, Shape{batch.size, batch.frames, cfg.spatial_out}), parts, att.weights};
}

struct TemporalResult {
  Var features;   // [B, T, n_rnn_out]
  Var recurrent;  // [B, T, 2H] output of the LSTM stack
  Var attention;  // [B, T, T]
};

template <class Store>
LstmDirectionVars bind_direction(const LstmDirection& d, Context<Store>& ctx) {
  return {ctx.bind(d.input_weight), ctx.bind(d.hidden_weight), ctx.bind(d.bias)};
}

template <class Store>
TemporalResult temporal_forward(const Batch& batch, Context<Store>& ctx) {
  auto& P = ctx.params;
  const auto& cfg = P.config;
  const std::size_t rows = batch.size * batch.frames;
  Var seq = ad::constant(batch.sequence);
  for (auto& layer : P.lstm)
    seq = bilstm_layer(seq, bind_direction(layer.forward, ctx), bind_direction(layer.backward, ctx));
  Var recurrent = seq;
  Var proj = linear(seq, ctx.bind(P.temporal_projection.weight),
                    ctx.bind(P.temporal_projection.bias));
  auto att = self_attention(proj, ctx.bind(P.temporal_attention.query),
                            ctx.bind(P.temporal_attention.key),
                            ctx.bind(P.temporal_attention.value));
  Var flat = ad::reshape(att.output, Shape{rows, cfg.n_rnn_out});
  Var h1 = dense_block(flat, P.temporal_fc[0], ctx);
  Var h3 = dense_block(dense_block(h1, P.temporal_fc[1], ctx), P.temporal_fc[2], ctx);
  Var out = maybe_dropout(ad::add(h1, h3), ctx);
  return {ad::reshape(out, Shape{batch.size, batch.frames, cfg.n_rnn_out}), recurrent,
          att.weights};
}

struct FusionResult {
  Var logits;         // [B, 2]
  Var probabilities;  // [B, 2]
  std::vector<Var> attention;
};

template <class Store>
FusionResult fuse_classify(const Var& spatial, const Var& temporal, Context<Store>& ctx) {
  auto& P = ctx.params;
  if (spatial.dim(1) != temporal.dim(1))
    throw NumericError("spatial and temporal sequences differ in length");
  Var joined = ad::concat({spatial, temporal}, 2);
  Var x = linear(joined, ctx.bind(P.fusion_input.weight), ctx.bind(P.fusion_input.bias));
  auto mha = multi_head_attention(x, ctx.bind(P.fusion.query), ctx.bind(P.fusion.key),
                                  ctx.bind(P.fusion.value), ctx.bind(P.fusion.output),
                                  P.config.n_heads);
  Var pooled = ad::mean_over_axis(mha.output, 1);
  Var h = maybe_dropout(dense_block(pooled, P.head_hidden, ctx), ctx);
  Var logits = linear(h, ctx.bind(P.head_out.weight), ctx.bind(P.head_out.bias));
  return {logits, ad::row_softmax(logits), std::move(mha.weights)};
}

struct ForwardResult {
  Var probabilities;  // [B, 2]
  Var logits;
  SpatialResult spatial;
  TemporalResult temporal;
  FusionResult fusion;
};

template <class Store>
ForwardResult forward_batch(const Batch& batch, Context<Store>& ctx) {
  ForwardResult r;
  r.spatial = spatial_forward(batch, ctx);
  r.temporal = temporal_forward(batch, ctx);
  r.fusion = fuse_classify(r.spatial.features, r.temporal.features, ctx);
  r.probabilities = r.fusion.probabilities;
  r.logits = r.fusion.logits;
  return r;
}

// ---------------------------------------------------------------------------
// Attention records

struct AttentionRecord {
  Tensor spatial;            // [5, 5], frame-averaged
  Tensor spatial_per_frame;  // [T, 5, 5]
  Tensor temporal;           // [T, T]
  Label predicted = Label::Chorea;
  std::array<double, 2> probabilities{};
};

inline std::vector<AttentionRecord> attention_records(const ForwardResult& r) {
  const Tensor& probs = r.probabilities.value();
  const Tensor& sp = r.spatial.attention.value();
  const Tensor& tp = r.temporal.attention.value();
  const std::size_t batch = probs.dim(0), frames = tp.dim(1);
  std::vector<AttentionRecord> out(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    auto& rec = out[b];
    rec.probabilities = {probs.at(b, 0), probs.at(b, 1)};
    rec.predicted = rec.probabilities[1] > rec.probabilities[0] ? Label::Dystonia : Label::Chorea;
    rec.spatial_per_frame = Tensor(Shape{frames, kNumParts, kNumParts});
    rec.spatial = Tensor(Shape{kNumParts, kNumParts});
    const std::size_t block = kNumParts * kNumParts;
    for (std::size_t f = 0; f < frames; ++f)
      for (std::size_t i = 0; i < block; ++i) {
        const double v = sp[(b * frames + f) * block + i];
        rec.spatial_per_frame[f * block + i] = v;
        rec.spatial[i] += v / static_cast<double>(frames);
      }
    rec.temporal = Tensor(Shape{frames, frames});
    std::copy_n(tp.data() + b * frames * frames, frames * frames, rec.temporal.data());
  }
  return out;
}

/// Eval-mode forward for a single clip.
inline std::pair<std::array<double, 2>, AttentionRecord> model_forward(const SkeletonClip& clip,
                                                                       const ParameterStore& params) {
  Binder bind(false);
  Context ctx{params, bind, Mode::Eval, nullptr};
  const SkeletonClip* one[] = {&clip};
  auto rec = attention_records(forward_batch(make_batch(one), ctx)).front();
  return {rec.probabilities, rec};
}

/// Eval-mode forward over many clips in chunks.
inline std::vector<AttentionRecord> predict(const ParameterStore& params,
                                            const std::vector<SkeletonClip>& clips,
                                            std::size_t chunk = 32) {
  std::vector<AttentionRecord> out;
  out.reserve(clips.size());
  for (std::size_t start = 0; start < clips.size(); start += chunk) {
    std::vector<const SkeletonClip*> ptrs;
    for (std::size_t i = start; i < std::min(clips.size(), start + chunk); ++i)
      ptrs.push_back(&clips[i]);
    Binder bind(false);
    Context ctx{params, bind, Mode::Eval, nullptr};
    auto recs = attention_records(forward_batch(make_batch(ptrs), ctx));
    for (auto& r : recs) out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr int kCheckpointFormatVersion = 1;

inline nlohmann::json checkpoint_json(const ParameterStore& params) {
  nlohmann::json tensors = nlohmann::json::object();
  params.visit([&](const std::string& name, const Tensor& t, Role) {
    tensors[name] = {{"shape", t.shape()}, {"data", t.storage()}};
  });
  return {{"format_version", kCheckpointFormatVersion},
          {"config", params.config},
          {"tensors", std::move(tensors)}};
}

inline void save_checkpoint(const std::filesystem::path& path, const ParameterStore& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << checkpoint_json(params).dump() << '\n';
}

inline ParameterStore params_from_json(const nlohmann::json& j) {
  if (!j.is_object() || j.value("format_version", 0) != kCheckpointFormatVersion)
    throw DataError("unsupported checkpoint format");
  ModelConfig cfg;
  try {
    cfg = j.at("config").get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint config: ") + e.what());
  }
  ParameterStore p = init_params(cfg, 0);
  const auto& tensors = j.at("tensors");
  p.visit([&](const std::string& name, Tensor& t, Role) {
    if (!tensors.contains(name)) throw DataError("checkpoint missing tensor " + name);
    const auto& e = tensors.at(name);
    auto shape = e.at("shape").get<Shape>();
    if (shape != t.shape())
      throw DataError("checkpoint tensor " + name + " has shape " + shape_str(shape) +
                      ", expected " + shape_str(t.shape()));
    t = Tensor(std::move(shape), e.at("data").get<std::vector<double>>());
    if (!t.all_finite()) throw DataError("checkpoint tensor " + name + " is not finite");
  });
  return p;
}

inline ParameterStore load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return params_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace skelnet::net
