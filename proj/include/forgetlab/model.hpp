#pragma once

// Tiny decoder-only transformer (pre-LN, learned positions, untied output head).
//
// The head scores only emittable tokens (ids 1..V-1); BOS is an input-only
// token, so every next-token distribution lives on V-1 outcomes and BOS can
// never be generated. next_token_logits reports BOS as -infinity.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "forgetlab/autodiff.hpp"
#include "forgetlab/errors.hpp"
#include "forgetlab/rng.hpp"
#include "forgetlab/vocab.hpp"

namespace forgetlab {

struct ModelConfig {
  int vocab_size = 24;
  int d_model = 32;
  int n_layers = 2;
  int n_heads = 2;
  int d_ff = 64;
  int max_len = 32;
  std::uint64_t init_seed = 0;
  // Multiplier on every random init std; 0 yields an all-zero (uniform-output) model.
  double init_scale = 1.0;

  void validate() const {
    require(vocab_size >= 3, "model: vocab_size must be >= 3");
    require(d_model >= 1 && n_layers >= 0 && n_heads >= 1 && d_ff >= 1, "model: dimensions must be positive");
    require(d_model % n_heads == 0, "model: d_model must be divisible by n_heads");
    require(max_len >= 2, "model: max_len must be >= 2");
    require(init_scale >= 0 && std::isfinite(init_scale), "model: init_scale must be finite and >= 0");
  }

  std::size_t emit_size() const { return static_cast<std::size_t>(vocab_size - 1); }

  bool operator==(const ModelConfig&) const = default;

  // Shape-level equality; init settings do not count.
  bool same_architecture(const ModelConfig& o) const {
    return vocab_size == o.vocab_size && d_model == o.d_model && n_layers == o.n_layers && n_heads == o.n_heads &&
           d_ff == o.d_ff && max_len == o.max_len;
  }
};

inline std::string config_string(const ModelConfig& c) {
  return "V=" + std::to_string(c.vocab_size) + ";d=" + std::to_string(c.d_model) + ";layers=" +
         std::to_string(c.n_layers) + ";heads=" + std::to_string(c.n_heads) + ";ff=" + std::to_string(c.d_ff) +
         ";L=" + std::to_string(c.max_len);
}

// Index arithmetic for the fixed parameter order.
struct ParamLayout {
  static constexpr std::size_t kTokEmb = 0;
  static constexpr std::size_t kPosEmb = 1;
  static constexpr std::size_t kGlobalsBefore = 2;

  enum Slot : std::size_t {
    ln1_gain,
    ln1_bias,
    wq,
    wk,
    wv,
    wo,
    bo,
    ln2_gain,
    ln2_bias,
    w1,
    b1,
    w2,
    b2,
    kPerLayer
  };

  static std::size_t layer(std::size_t l, Slot s) { return kGlobalsBefore + l * kPerLayer + s; }
  static std::size_t lnf_gain(std::size_t layers) { return kGlobalsBefore + layers * kPerLayer; }
  static std::size_t lnf_bias(std::size_t layers) { return lnf_gain(layers) + 1; }
  static std::size_t head_w(std::size_t layers) { return lnf_gain(layers) + 2; }
  static std::size_t head_b(std::size_t layers) { return lnf_gain(layers) + 3; }
  static std::size_t count(std::size_t layers) { return lnf_gain(layers) + 4; }
};

template <std::floating_point T>
struct Parameters {
  ModelConfig config;
  std::vector<std::string> names;
  std::vector<ad::Array<T>> arrays;

  std::size_t size() const { return arrays.size(); }

  std::size_t index(std::string_view name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return i;
    throw UsageError("no parameter named '" + std::string(name) + "'");
  }
  ad::Array<T>& operator[](std::string_view name) { return arrays[index(name)]; }
  const ad::Array<T>& operator[](std::string_view name) const { return arrays[index(name)]; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& a : arrays) n += a.size();
    return n;
  }

  bool operator==(const Parameters&) const = default;
};

template <std::floating_point To, std::floating_point From>
Parameters<To> cast(const Parameters<From>& p) {
  Parameters<To> out;
  out.config = p.config;
  out.names = p.names;
  for (const auto& a : p.arrays) out.arrays.push_back(ad::cast<To>(a));
  return out;
}

inline std::vector<std::pair<std::string, ad::Shape>> parameter_shapes(const ModelConfig& c) {
  const auto V = c.emit_size() + 1, E = c.emit_size(), d = static_cast<std::size_t>(c.d_model),
             f = static_cast<std::size_t>(c.d_ff), L = static_cast<std::size_t>(c.max_len);
  std::vector<std::pair<std::string, ad::Shape>> s;
  s.emplace_back("tok_emb", ad::Shape{V, d});
  s.emplace_back("pos_emb", ad::Shape{L, d});
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    s.emplace_back(p + "ln1.gain", ad::Shape{d});
    s.emplace_back(p + "ln1.bias", ad::Shape{d});
    s.emplace_back(p + "attn.wq", ad::Shape{d, d});
    s.emplace_back(p + "attn.wk", ad::Shape{d, d});
    s.emplace_back(p + "attn.wv", ad::Shape{d, d});
    s.emplace_back(p + "attn.wo", ad::Shape{d, d});
    s.emplace_back(p + "attn.bo", ad::Shape{d});
    s.emplace_back(p + "ln2.gain", ad::Shape{d});
    s.emplace_back(p + "ln2.bias", ad::Shape{d});
    s.emplace_back(p + "mlp.w1", ad::Shape{d, f});
    s.emplace_back(p + "mlp.b1", ad::Shape{f});
    s.emplace_back(p + "mlp.w2", ad::Shape{f, d});
    s.emplace_back(p + "mlp.b2", ad::Shape{d});
  }
  s.emplace_back("lnf.gain", ad::Shape{d});
  s.emplace_back("lnf.bias", ad::Shape{d});
  s.emplace_back("head.w", ad::Shape{d, E});
  s.emplace_back("head.b", ad::Shape{E});
  return s;
}

// Scaled-normal weights (std = init_scale / sqrt(fan_in); embeddings std 0.5 * init_scale),
// unit layernorm gains, zero biases.
template <std::floating_point T = float>
Parameters<T> init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Parameters<T> p;
  p.config = config;
  p.config.init_seed = seed;
  Rng rng(derive_seed(seed, "init"));
  const double residual_scale = 1.0 / std::sqrt(2.0 * std::max(1, config.n_layers));
  for (auto& [name, shape] : parameter_shapes(config)) {
    ad::Array<T> a(shape);
    const bool is_gain = name.ends_with(".gain");
    const bool is_matrix = shape.size() == 2;
    if (is_gain) {
      std::fill(a.values.begin(), a.values.end(), T(1));
    } else if (is_matrix) {
      double std = config.init_scale;
      if (name.ends_with("_emb")) {
        std *= 0.5;
      } else {
        std /= std::sqrt(static_cast<double>(shape[0]));
        if (name.ends_with("attn.wo") || name.ends_with("mlp.w2")) std *= residual_scale;
      }
      for (T& x : a.values) x = static_cast<T>(std * rng.normal());
      if (config.init_scale == 0) std::fill(a.values.begin(), a.values.end(), T(0));
    }
    p.names.push_back(name);
    p.arrays.push_back(std::move(a));
  }
  return p;
}

template <std::floating_point T = float>
Parameters<T> init_model(const ModelConfig& config) {
  return init_model<T>(config, config.init_seed);
}

// One packed sequence: the model reads BOS + body[0..n-2] and predicts body[0..n-1].
struct PackedBatch {
  std::vector<int> inputs;
  std::vector<int> positions;
  std::vector<int> targets;  // emittable index = token id - 1
  std::vector<ad::Segment> segments;

  std::size_t rows() const { return inputs.size(); }

  void append(const TokenSequence& body, int max_len) {
    if (body.empty()) throw UsageError("cannot pack an empty sequence");
    if (static_cast<int>(body.size()) > max_len)
      throw UsageError("sequence of length " + std::to_string(body.size()) + " exceeds max length " +
                       std::to_string(max_len));
    segments.push_back({inputs.size(), body.size()});
    for (std::size_t t = 0; t < body.size(); ++t) {
      if (body[t] <= kBos) throw UsageError("sequence body may not contain BOS");
      inputs.push_back(t == 0 ? kBos : body[t - 1]);
      positions.push_back(static_cast<int>(t));
      targets.push_back(body[t] - 1);
    }
  }

  // Input-only packing (prefix of length n, no targets); the last row predicts the next token.
  void append_prefix(const TokenSequence& prefix, int max_len) {
    if (static_cast<int>(prefix.size()) >= max_len)
      throw UsageError("prefix of length " + std::to_string(prefix.size()) + " leaves no room under max length " +
                       std::to_string(max_len));
    segments.push_back({inputs.size(), prefix.size() + 1});
    for (std::size_t t = 0; t <= prefix.size(); ++t) {
      const int tok = t == 0 ? kBos : prefix[t - 1];
      if (t > 0 && tok <= kBos) throw UsageError("prefix may not contain BOS");
      inputs.push_back(tok);
      positions.push_back(static_cast<int>(t));
      targets.push_back(0);
    }
  }
};

template <std::floating_point T>
using Weights = std::vector<ad::Var<T>>;

template <std::floating_point T>
Weights<T> bind_trainable(ad::Tape<T>& tape, const std::vector<ad::Array<T>>& arrays) {
  Weights<T> w;
  w.reserve(arrays.size());
  for (const auto& a : arrays) w.push_back(tape.parameter(a));
  return w;
}

template <std::floating_point T>
Weights<T> bind_constant(ad::Tape<T>& tape, const std::vector<ad::Array<T>>& arrays) {
  Weights<T> w;
  w.reserve(arrays.size());
  for (const auto& a : arrays) w.push_back(tape.constant(a));
  return w;
}

// Logits [rows, V-1] for every packed position.
template <std::floating_point T>
ad::Var<T> forward_logits(const ModelConfig& c, const Weights<T>& w, const PackedBatch& batch) {
  using L = ParamLayout;
  const std::size_t layers = static_cast<std::size_t>(c.n_layers);
  if (w.size() != L::count(layers)) throw UsageError("weight list does not match model config");
  for (int tok : batch.inputs)
    if (tok < 0 || tok >= c.vocab_size) throw UsageError("token id out of vocabulary range");
  for (int pos : batch.positions)
    if (pos >= c.max_len) throw UsageError("position exceeds model context");
  ad::Var<T> x = ad::add(ad::embedding(w[L::kTokEmb], batch.inputs), ad::embedding(w[L::kPosEmb], batch.positions));
  for (std::size_t l = 0; l < layers; ++l) {
    auto P = [&](L::Slot s) { return w[L::layer(l, s)]; };
    ad::Var<T> h = ad::layernorm(x, P(L::ln1_gain), P(L::ln1_bias));
    ad::Var<T> att = ad::causal_attention(ad::matmul(h, P(L::wq)), ad::matmul(h, P(L::wk)), ad::matmul(h, P(L::wv)),
                                          batch.segments, static_cast<std::size_t>(c.n_heads));
    x = ad::add(x, ad::add(ad::matmul(att, P(L::wo)), P(L::bo)));
    ad::Var<T> h2 = ad::layernorm(x, P(L::ln2_gain), P(L::ln2_bias));
    ad::Var<T> m = ad::gelu(ad::add(ad::matmul(h2, P(L::w1)), P(L::b1)));
    x = ad::add(x, ad::add(ad::matmul(m, P(L::w2)), P(L::b2)));
  }
  ad::Var<T> xf = ad::layernorm(x, w[L::lnf_gain(layers)], w[L::lnf_bias(layers)]);
  return ad::add(ad::matmul(xf, w[L::head_w(layers)]), w[L::head_b(layers)]);
}

// Per-row log-probabilities of the packed targets (value only).
template <std::floating_point T>
std::vector<double> target_logprobs(const Parameters<T>& params, const PackedBatch& batch) {
  ad::Tape<T> tape(false);
  const auto w = bind_constant(tape, params.arrays);
  const auto nll = ad::softmax_cross_entropy(forward_logits(params.config, w, batch), batch.targets);
  std::vector<double> out(nll.value().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = -static_cast<double>(nll.value().values[i]);
  return out;
}

// Full-vocabulary logits (length V) for the token following BOS + prefix.
template <std::floating_point T>
std::vector<T> next_token_logits(const Parameters<T>& params, const TokenSequence& prefix) {
  PackedBatch b;
  b.append_prefix(prefix, params.config.max_len);
  ad::Tape<T> tape(false);
  const auto w = bind_constant(tape, params.arrays);
  const auto& lv = forward_logits(params.config, w, b).value();
  const std::size_t E = params.config.emit_size();
  std::vector<T> out(E + 1);
  out[kBos] = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < E; ++j) out[j + 1] = lv.values[(b.rows() - 1) * E + j];
  return out;
}

// Logits (length V each) at every position of BOS + body[0..n-1]; row t predicts body[t].
template <std::floating_point T>
std::vector<std::vector<T>> all_position_logits(const Parameters<T>& params, const TokenSequence& body) {
  PackedBatch b;
  b.append(body, params.config.max_len);
  ad::Tape<T> tape(false);
  const auto w = bind_constant(tape, params.arrays);
  const auto& lv = forward_logits(params.config, w, b).value();
  const std::size_t E = params.config.emit_size();
  std::vector<std::vector<T>> out(b.rows(), std::vector<T>(E + 1));
  for (std::size_t r = 0; r < b.rows(); ++r) {
    out[r][kBos] = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < E; ++j) out[r][j + 1] = lv.values[r * E + j];
  }
  return out;
}

// A complete sequence either ends in its first EOS or has exactly max_len tokens.
inline void check_complete(const TokenSequence& x, int max_len, int vocab_size) {
  if (x.empty()) throw UsageError("malformed sequence: empty");
  if (static_cast<int>(x.size()) > max_len) throw UsageError("malformed sequence: longer than max length");
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] <= kBos || x[i] >= vocab_size) throw UsageError("malformed sequence: invalid token id");
    if (x[i] == kEos && i + 1 != x.size()) throw UsageError("malformed sequence: EOS before the end");
  }
  if (x.back() != kEos && static_cast<int>(x.size()) != max_len)
    throw UsageError("malformed sequence: no EOS and shorter than max length");
}

// log p(x) in nats under the forced-stop convention with bound max_len (default: model context).
template <std::floating_point T>
double sequence_logprob(const Parameters<T>& params, const TokenSequence& x, int max_len = 0) {
  const int bound = max_len > 0 ? max_len : params.config.max_len;
  check_complete(x, bound, params.config.vocab_size);
  PackedBatch b;
  b.append(x, params.config.max_len);
  double total = 0;
  for (double lp : target_logprobs(params, b)) total += lp;
  return total;
}

// log p(y | x): scores y's tokens only, conditioning on BOS + x + y_<t.
template <std::floating_point T>
double conditional_logprob(const Parameters<T>& params, const TokenSequence& x, const TokenSequence& y, int max_len = 0) {
  const int bound = max_len > 0 ? max_len : params.config.max_len;
  if (static_cast<int>(x.size() + y.size()) > bound) throw UsageError("conditional_logprob: combined length exceeds max length");
  if (y.empty()) throw UsageError("conditional_logprob: empty continuation");
  for (TokenId t : x)
    if (t == kEos) throw UsageError("conditional_logprob: prompt may not contain EOS");
  TokenSequence full = x;
  full.insert(full.end(), y.begin(), y.end());
  check_complete(full, bound, params.config.vocab_size);
  PackedBatch b;
  b.append(full, params.config.max_len);
  const auto lps = target_logprobs(params, b);
  double total = 0;
  for (std::size_t t = x.size(); t < lps.size(); ++t) total += lps[t];
  return total;
}


// log p(x) for many complete sequences, packed into chunks of up to `chunk` sequences per forward.
template <std::floating_point T>
std::vector<double> batch_sequence_logprobs(const Parameters<T>& params, const std::vector<TokenSequence>& xs,
                                            int max_len = 0, std::size_t chunk = 256) {
  const int bound = max_len > 0 ? max_len : params.config.max_len;
  std::vector<double> out;
  out.reserve(xs.size());
  for (std::size_t start = 0; start < xs.size(); start += chunk) {
    const std::size_t end = std::min(xs.size(), start + chunk);
    PackedBatch b;
    for (std::size_t i = start; i < end; ++i) {
      check_complete(xs[i], bound, params.config.vocab_size);
      b.append(xs[i], params.config.max_len);
    }
    const auto lps = target_logprobs(params, b);
    for (const auto& seg : b.segments) {
      double total = 0;
      for (std::size_t r = seg.start; r < seg.start + seg.length; ++r) total += lps[r];
      out.push_back(total);
    }
  }
  return out;
}

}  // namespace forgetlab
