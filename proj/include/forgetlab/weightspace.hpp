#pragma once

// Parameter-space baselines: low-rank adapters on frozen weights, and post-hoc
// interpolation between a base and a fine-tuned checkpoint.

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "forgetlab/errors.hpp"
#include "forgetlab/model.hpp"
#include "forgetlab/objectives.hpp"
#include "forgetlab/rng.hpp"

namespace forgetlab {

// Row-vector convention throughout (y = x W with W: [in, out]), so the adapter
// stores A: [in, r] and B: [r, out] and the delta is (alpha / r) * A B.
template <std::floating_point T>
struct LoraAdapter {
  ModelConfig config;
  int rank = 4;
  double alpha = 4.0;
  std::vector<std::string> targets;
  std::vector<ad::Array<T>> a;
  std::vector<ad::Array<T>> b;

  double scale() const { return alpha / static_cast<double>(rank); }
  bool operator==(const LoraAdapter&) const = default;
};

// Every attention projection and both MLP matrices.
inline std::vector<std::string> default_lora_targets(const ModelConfig& c) {
  std::vector<std::string> t;
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    for (const char* m : {"attn.wq", "attn.wk", "attn.wv", "attn.wo", "mlp.w1", "mlp.w2"}) t.push_back(p + m);
  }
  return t;
}

// alpha <= 0 means alpha = rank.
template <std::floating_point T>
LoraAdapter<T> lora_wrap(const Parameters<T>& base, int rank, double alpha, std::uint64_t seed,
                         std::vector<std::string> targets = {}) {
  if (targets.empty()) targets = default_lora_targets(base.config);
  require(rank >= 1, "lora: rank must be >= 1");
  LoraAdapter<T> out;
  out.config = base.config;
  out.rank = rank;
  out.alpha = alpha > 0 ? alpha : static_cast<double>(rank);
  out.targets = std::move(targets);
  const auto r = static_cast<std::size_t>(rank);
  const double std_a = 1.0 / std::sqrt(static_cast<double>(rank));
  for (std::size_t i = 0; i < out.targets.size(); ++i) {
    const auto& w = base[out.targets[i]];
    if (w.shape.size() != 2) throw UsageError("lora: target '" + out.targets[i] + "' is not a matrix");
    if (r > std::min(w.rows(), w.cols()))
      throw UsageError("lora: rank " + std::to_string(rank) + " exceeds the dimensions of '" + out.targets[i] + "'");
    Rng rng(derive_seed(seed, i));
    ad::Array<T> a({w.rows(), r});
    for (T& x : a.values) x = static_cast<T>(std_a * rng.normal());
    out.a.push_back(std::move(a));
    out.b.emplace_back(ad::Shape{r, w.cols()});
  }
  return out;
}

namespace detail {

template <std::floating_point T>
std::vector<std::size_t> lora_slots(const Parameters<T>& base, const LoraAdapter<T>& adapter) {
  if (!base.config.same_architecture(adapter.config)) throw IncompatibleError("lora: adapter was built for a different model");
  require(adapter.a.size() == adapter.targets.size() && adapter.b.size() == adapter.targets.size(),
          "lora: adapter arrays do not match its target list");
  std::vector<std::size_t> slots;
  for (std::size_t i = 0; i < adapter.targets.size(); ++i) {
    const std::size_t k = base.index(adapter.targets[i]);
    const auto& w = base.arrays[k];
    const auto& a = adapter.a[i];
    const auto& b = adapter.b[i];
    if (a.shape.size() != 2 || b.shape.size() != 2 || a.rows() != w.rows() || b.cols() != w.cols() ||
        a.cols() != b.rows())
      throw UsageError("lora: adapter shape mismatch on '" + adapter.targets[i] + "'");
    slots.push_back(k);
  }
  return slots;
}

}  // namespace detail

// Frozen base on the tape plus the low-rank deltas on the given adapter leaves
// (leaves = A_0..A_{n-1}, B_0..B_{n-1}).
template <std::floating_point T>
Weights<T> bind_lora(ad::Tape<T>& tape, const Parameters<T>& base, const LoraAdapter<T>& adapter,
                     const std::vector<ad::Var<T>>& leaves) {
  const auto slots = detail::lora_slots(base, adapter);
  const std::size_t n = slots.size();
  require(leaves.size() == 2 * n, "lora: wrong number of adapter leaves");
  Weights<T> w = bind_constant(tape, base.arrays);
  for (std::size_t i = 0; i < n; ++i) {
    auto delta = ad::scale(ad::matmul(leaves[i], leaves[n + i]), static_cast<T>(adapter.scale()));
    w[slots[i]] = ad::add(w[slots[i]], delta);
  }
  return w;
}

template <std::floating_point T>
std::vector<ad::Array<T>> adapter_arrays(const LoraAdapter<T>& adapter) {
  std::vector<ad::Array<T>> out = adapter.a;
  out.insert(out.end(), adapter.b.begin(), adapter.b.end());
  return out;
}

// Dense parameters with W + (alpha / r) A B. Entries with a zero delta keep the base bits.
template <std::floating_point T>
Parameters<T> lora_merge(const Parameters<T>& base, const LoraAdapter<T>& adapter) {
  const auto slots = detail::lora_slots(base, adapter);
  Parameters<T> out = base;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    ad::Tape<T> tape(false);
    const auto d = ad::scale(ad::matmul(tape.constant(adapter.a[i]), tape.constant(adapter.b[i])),
                             static_cast<T>(adapter.scale()))
                       .value();
    auto& w = out.arrays[slots[i]].values;
    for (std::size_t j = 0; j < w.size(); ++j)
      if (d.values[j] != 0) w[j] = w[j] + d.values[j];
  }
  return out;
}

template <std::floating_point T>
struct LoraTrainResult {
  LoraAdapter<T> adapter;
  std::vector<StepRecord> history;
};

// Only the adapter moves; the base stays frozen.
template <std::floating_point T>
LoraTrainResult<T> train_lora(const Parameters<T>& base, const LoraAdapter<T>& init, TrainingStream& stream,
                              const LossSpec& spec, const TrainConfig& cfg) {
  require(spec.l2_coeff == 0, "lora: l2 penalty is not supported on adapters");
  detail::lora_slots(base, init);
  LoraTrainResult<T> out{init, {}};
  if (cfg.steps == 0) return out;
  auto trainables = adapter_arrays(init);
  WeightBuilder<T> build = [&](ad::Tape<T>& tape, const std::vector<ad::Var<T>>& leaves) {
    return bind_lora(tape, base, init, leaves);
  };
  out.history = optimize<T>(trainables, base.config, build, stream, spec, cfg, nullptr);
  const std::size_t n = init.targets.size();
  for (std::size_t i = 0; i < n; ++i) {
    out.adapter.a[i] = std::move(trainables[i]);
    out.adapter.b[i] = std::move(trainables[n + i]);
  }
  return out;
}

// alpha * theta_star + (1 - alpha) * theta_ft; the endpoints return exact copies.
template <std::floating_point T>
Parameters<T> wise_ft(const Parameters<T>& theta_star, const Parameters<T>& theta_ft, double alpha) {
  require(alpha >= 0 && alpha <= 1, "wise-ft: alpha must lie in [0, 1]");
  if (!theta_star.config.same_architecture(theta_ft.config) || theta_star.names != theta_ft.names)
    throw IncompatibleError("wise-ft: checkpoints have different architectures");
  for (std::size_t i = 0; i < theta_star.arrays.size(); ++i)
    if (theta_star.arrays[i].shape != theta_ft.arrays[i].shape)
      throw IncompatibleError("wise-ft: shape mismatch on '" + theta_star.names[i] + "'");
  if (alpha == 1) return theta_star;
  if (alpha == 0) return theta_ft;
  Parameters<T> out = theta_star;
  for (std::size_t i = 0; i < out.arrays.size(); ++i) {
    auto& o = out.arrays[i].values;
    const auto& f = theta_ft.arrays[i].values;
    for (std::size_t j = 0; j < o.size(); ++j)
      o[j] = static_cast<T>(alpha * static_cast<double>(o[j]) + (1 - alpha) * static_cast<double>(f[j]));
  }
  return out;
}

}  // namespace forgetlab
