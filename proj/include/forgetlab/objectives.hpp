#pragma once

// Losses, the L2-to-reference penalty, the warmup + cosine schedule, AdamW, and the
// step-budgeted training loop shared by full fine-tuning and adapter training.

#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "forgetlab/autodiff.hpp"
#include "forgetlab/errors.hpp"
#include "forgetlab/model.hpp"
#include "forgetlab/tasks.hpp"

namespace forgetlab {

// Two realizations of the KL penalty: mix_ratio sizes the augmentation share of the data
// stream (pooled per-token mean), penalty_weight scales a separate augmentation mean.
struct LossSpec {
  double mix_ratio = 1.0;
  double penalty_weight = 0.0;
  double l2_coeff = 0.0;

  void validate() const {
    require(mix_ratio >= 0 && penalty_weight >= 0 && l2_coeff >= 0, "loss spec: weights must be >= 0");
    require(!(mix_ratio > 0 && penalty_weight > 0), "loss spec: mix_ratio and penalty_weight are exclusive");
  }
  bool weighted_path() const { return penalty_weight > 0; }
};

struct TrainConfig {
  double peak_lr = 3e-4;
  double warmup_frac = 0.03;
  std::size_t steps = 2000;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  double clip_norm = 1.0;  // 0 disables clipping
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;

  void validate() const {
    require(warmup_frac >= 0 && warmup_frac < 1, "train config: warmup fraction must lie in [0, 1)");
    require(batch_size >= 1, "train config: batch size must be >= 1");
    require(peak_lr >= 0 && clip_norm >= 0 && weight_decay >= 0, "train config: rates must be >= 0");
  }
};

// Linear warmup from 0 to peak, then cosine decay to 0 at total_steps.
inline double lr_at(std::size_t step, std::size_t total_steps, double peak, double warmup_frac) {
  if (step > total_steps) throw UsageError("lr_at: step out of range");
  const auto warmup = static_cast<std::size_t>(std::llround(warmup_frac * static_cast<double>(total_steps)));
  if (step < warmup) return peak * static_cast<double>(step) / static_cast<double>(warmup);
  if (total_steps == warmup) return peak;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// Packed examples plus per-row masks for scored positions, split by origin.
template <std::floating_point T>
struct LossBatch {
  PackedBatch packed;
  std::vector<T> finetune_mask;      // scored tokens of origin=finetune examples
  std::vector<T> augmentation_mask;  // scored tokens of every other origin

  bool has_finetune() const { return any(finetune_mask); }
  bool has_augmentation() const { return any(augmentation_mask); }

 private:
  static bool any(const std::vector<T>& m) {
    for (T x : m)
      if (x != T(0)) return true;
    return false;
  }
};

// all-token examples score every position (body tokens and EOS); masked-target examples
// score only the target, conditioning on the prompt.
template <std::floating_point T>
LossBatch<T> pack_examples(const std::vector<const Example*>& examples, int max_len) {
  LossBatch<T> b;
  for (const Example* ex : examples) {
    if (ex->target.empty()) throw UsageError("example with empty target");
    const std::size_t before = b.packed.rows();
    b.packed.append(ex->body(), max_len);
    const std::size_t first_scored = ex->kind == LossKind::all_token ? 0 : ex->prompt.size();
    const bool ft = ex->origin == Origin::finetune || ex->origin == Origin::eval;
    for (std::size_t r = before; r < b.packed.rows(); ++r) {
      const T scored = (r - before) >= first_scored ? T(1) : T(0);
      b.finetune_mask.push_back(ft ? scored : T(0));
      b.augmentation_mask.push_back(ft ? T(0) : scored);
    }
  }
  return b;
}

template <std::floating_point T>
std::vector<const Example*> pointers(const std::vector<Example>& xs) {
  std::vector<const Example*> out;
  out.reserve(xs.size());
  for (const auto& x : xs) out.push_back(&x);
  return out;
}

namespace detail {

template <std::floating_point T>
std::vector<T> sum_masks(const std::vector<T>& a, const std::vector<T>& b) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

}  // namespace detail

// Mean NLL over every counted token of the batch.
template <std::floating_point T>
ad::Var<T> pretrain_loss(const ModelConfig& c, const Weights<T>& w, const std::vector<TokenSequence>& batch) {
  if (batch.empty()) throw UsageError("pretrain_loss: empty batch");
  PackedBatch packed;
  for (const auto& x : batch) packed.append(x, c.max_len);
  auto nll = ad::softmax_cross_entropy(forward_logits(c, w, packed), packed.targets);
  return ad::masked_mean(nll, std::vector<T>(packed.rows(), T(1)));
}

// Mean NLL over target tokens only.
template <std::floating_point T>
ad::Var<T> sft_loss(const ModelConfig& c, const Weights<T>& w, const std::vector<const Example*>& batch) {
  if (batch.empty()) throw UsageError("sft_loss: empty batch");
  auto lb = pack_examples<T>(batch, c.max_len);
  auto nll = ad::softmax_cross_entropy(forward_logits(c, w, lb.packed), lb.packed.targets);
  return ad::masked_mean(nll, detail::sum_masks(lb.finetune_mask, lb.augmentation_mask));
}

template <std::floating_point T>
struct MixedLoss {
  ad::Var<T> total;
  std::optional<double> finetune_mean;
  std::optional<double> augmentation_mean;
};

// Ratio path: one mean over all counted tokens of both origins. Weighted path:
// finetune-mean + penalty_weight * augmentation-mean.
template <std::floating_point T>
MixedLoss<T> mixed_loss(const ModelConfig& c, const Weights<T>& w, const LossBatch<T>& batch, const LossSpec& spec) {
  spec.validate();
  auto nll = ad::softmax_cross_entropy(forward_logits(c, w, batch.packed), batch.packed.targets);
  MixedLoss<T> out{nll, std::nullopt, std::nullopt};
  std::optional<ad::Var<T>> ft, aug;
  if (batch.has_finetune()) {
    ft = ad::masked_mean(nll, batch.finetune_mask);
    out.finetune_mean = static_cast<double>(ft->value().values[0]);
  }
  if (batch.has_augmentation()) {
    aug = ad::masked_mean(nll, batch.augmentation_mask);
    out.augmentation_mean = static_cast<double>(aug->value().values[0]);
  }
  if (!ft && !aug) throw UsageError("mixed_loss: batch has no scored tokens");
  if (spec.weighted_path()) {
    const T lambda = static_cast<T>(spec.penalty_weight);
    if (ft && aug)
      out.total = ad::add(*ft, ad::scale(*aug, lambda));
    else
      out.total = ft ? *ft : ad::scale(*aug, lambda);
  } else {
    out.total = ad::masked_mean(nll, detail::sum_masks(batch.finetune_mask, batch.augmentation_mask));
  }
  return out;
}

// coeff * sum ||w - ref||^2 over every bound array.
template <std::floating_point T>
ad::Var<T> l2_penalty(const Weights<T>& w, const std::vector<ad::Array<T>>& ref, double coeff) {
  if (w.size() != ref.size() || w.empty()) throw UsageError("l2_penalty: parameter count mismatch");
  ad::Tape<T>& tape = *w[0].tape;
  std::optional<ad::Var<T>> acc;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (w[i].shape() != ref[i].shape) throw UsageError("l2_penalty: shape mismatch");
    auto term = ad::sum_squares(ad::sub(w[i], tape.constant(ref[i])));
    acc = acc ? ad::add(*acc, term) : term;
  }
  return ad::scale(*acc, static_cast<T>(coeff));
}

// Value-level conveniences.
template <std::floating_point T>
double pretrain_loss(const Parameters<T>& p, const std::vector<TokenSequence>& batch) {
  ad::Tape<T> tape(false);
  return static_cast<double>(pretrain_loss(p.config, bind_constant(tape, p.arrays), batch).value().values[0]);
}

template <std::floating_point T>
double sft_loss(const Parameters<T>& p, const std::vector<Example>& batch) {
  ad::Tape<T> tape(false);
  return static_cast<double>(sft_loss(p.config, bind_constant(tape, p.arrays), pointers<T>(batch)).value().values[0]);
}

template <std::floating_point T>
double mixed_loss(const Parameters<T>& p, const std::vector<Example>& batch, const LossSpec& spec) {
  ad::Tape<T> tape(false);
  const auto lb = pack_examples<T>(pointers<T>(batch), p.config.max_len);
  return static_cast<double>(mixed_loss(p.config, bind_constant(tape, p.arrays), lb, spec).total.value().values[0]);
}

template <std::floating_point T>
double l2_penalty(const Parameters<T>& p, const Parameters<T>& ref, double coeff) {
  ad::Tape<T> tape(false);
  return static_cast<double>(l2_penalty(bind_constant(tape, p.arrays), ref.arrays, coeff).value().values[0]);
}

template <std::floating_point T>
double parameter_distance(const Parameters<T>& a, const Parameters<T>& b) {
  if (a.arrays.size() != b.arrays.size()) throw UsageError("parameter_distance: parameter count mismatch");
  double ss = 0;
  for (std::size_t i = 0; i < a.arrays.size(); ++i) {
    if (a.arrays[i].shape != b.arrays[i].shape) throw UsageError("parameter_distance: shape mismatch");
    for (std::size_t j = 0; j < a.arrays[i].size(); ++j) {
      const double d = static_cast<double>(a.arrays[i].values[j]) - static_cast<double>(b.arrays[i].values[j]);
      ss += d * d;
    }
  }
  return std::sqrt(ss);
}

template <std::floating_point T>
class AdamW {
 public:
  AdamW(const std::vector<ad::Array<T>>& params, const TrainConfig& cfg) : cfg_(cfg) {
    for (const auto& p : params) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }

  void step(std::vector<ad::Array<T>>& params, const std::vector<ad::Array<T>>& grads, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i].values;
      const auto& g = grads[i].values;
      for (std::size_t j = 0; j < p.size(); ++j) {
        const double gj = static_cast<double>(g[j]);
        m_[i][j] = cfg_.beta1 * m_[i][j] + (1 - cfg_.beta1) * gj;
        v_[i][j] = cfg_.beta2 * v_[i][j] + (1 - cfg_.beta2) * gj * gj;
        const double update = (m_[i][j] / bc1) / (std::sqrt(v_[i][j] / bc2) + cfg_.adam_eps);
        const double pj = static_cast<double>(p[j]);
        p[j] = static_cast<T>(pj - lr * (update + cfg_.weight_decay * pj));
      }
    }
  }

 private:
  TrainConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

struct StepRecord {
  std::size_t step = 0;
  double lr = 0;
  double loss = 0;
  std::optional<double> finetune_loss;
  std::optional<double> augmentation_loss;
  double l2 = 0;
};

inline double mean_loss(const std::vector<StepRecord>& h, std::size_t begin, std::size_t end) {
  double s = 0;
  for (std::size_t i = begin; i < end; ++i) s += h[i].loss;
  return end > begin ? s / static_cast<double>(end - begin) : std::numeric_limits<double>::quiet_NaN();
}

// Builds the model weight list on a tape from the trainable leaves.
template <std::floating_point T>
using WeightBuilder = std::function<Weights<T>(ad::Tape<T>&, const std::vector<ad::Var<T>>&)>;

// Step-budgeted AdamW loop. Update k (1-based) uses lr_at(k, steps, ...).
template <std::floating_point T>
std::vector<StepRecord> optimize(std::vector<ad::Array<T>>& trainables, const ModelConfig& model_config,
                                 const WeightBuilder<T>& build, TrainingStream& stream, const LossSpec& spec,
                                 const TrainConfig& cfg, const std::vector<ad::Array<T>>* l2_ref) {
  cfg.validate();
  spec.validate();
  if (stream.steps() != cfg.steps || stream.batch_size() != cfg.batch_size)
    throw UsageError("train: stream step budget / batch size disagree with the train config");
  if (spec.l2_coeff > 0 && !l2_ref) throw UsageError("train: l2 penalty needs reference parameters");
  std::vector<StepRecord> history;
  history.reserve(cfg.steps);
  AdamW<T> opt(trainables, cfg);
  for (std::size_t k = 1; k <= cfg.steps; ++k) {
    const auto batch = pack_examples<T>(stream.next_batch(), model_config.max_len);
    ad::Tape<T> tape;
    std::vector<ad::Var<T>> leaves;
    leaves.reserve(trainables.size());
    for (const auto& a : trainables) leaves.push_back(tape.parameter(a));
    const Weights<T> w = build(tape, leaves);
    MixedLoss<T> loss = mixed_loss(model_config, w, batch, spec);
    StepRecord rec;
    rec.step = k;
    rec.finetune_loss = loss.finetune_mean;
    rec.augmentation_loss = loss.augmentation_mean;
    ad::Var<T> total = loss.total;
    if (spec.l2_coeff > 0) {
      auto pen = l2_penalty(w, *l2_ref, spec.l2_coeff);
      rec.l2 = static_cast<double>(pen.value().values[0]);
      total = ad::add(total, pen);
    }
    rec.loss = static_cast<double>(total.value().values[0]);
    if (!std::isfinite(rec.loss)) throw NumericalError("training diverged at step " + std::to_string(k));
    tape.backward(total);
    std::vector<ad::Array<T>> grads;
    grads.reserve(leaves.size());
    for (const auto& v : leaves) grads.push_back(tape.gradient(v));
    if (cfg.clip_norm > 0) {
      double ss = 0;
      for (const auto& g : grads)
        for (T x : g.values) ss += static_cast<double>(x) * static_cast<double>(x);
      const double norm = std::sqrt(ss);
      if (!std::isfinite(norm)) throw NumericalError("non-finite gradient at step " + std::to_string(k));
      if (norm > cfg.clip_norm) {
        const T s = static_cast<T>(cfg.clip_norm / norm);
        for (auto& g : grads)
          for (T& x : g.values) x *= s;
      }
    }
    rec.lr = lr_at(k, cfg.steps, cfg.peak_lr, cfg.warmup_frac);
    opt.step(trainables, grads, rec.lr);
    history.push_back(rec);
  }
  return history;
}

template <std::floating_point T>
struct TrainResult {
  Parameters<T> params;
  std::vector<StepRecord> history;
};

// Full-parameter training; l2 penalty (if any) pulls towards `reference` (normally the init).
template <std::floating_point T>
TrainResult<T> train(const Parameters<T>& init, TrainingStream& stream, const LossSpec& spec, const TrainConfig& cfg,
                     const Parameters<T>* reference = nullptr) {
  TrainResult<T> out{init, {}};
  if (cfg.steps == 0) return out;
  const Parameters<T>& ref = reference ? *reference : init;
  WeightBuilder<T> identity = [](ad::Tape<T>&, const std::vector<ad::Var<T>>& leaves) { return leaves; };
  out.history = optimize(out.params.arrays, init.config, identity, stream, spec, cfg, &ref.arrays);
  return out;
}

}  // namespace forgetlab
