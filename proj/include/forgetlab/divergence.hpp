#pragma once

// Exact distributions over the truncated string space, and Monte-Carlo KL estimators
// checked against them.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "forgetlab/errors.hpp"
#include "forgetlab/model.hpp"
#include "forgetlab/sampling.hpp"

namespace forgetlab {

inline constexpr double kEnumerationGuard = 1e7;

// Strings of at most max_len tokens that end at their first EOS, plus every
// EOS-free string of exactly max_len tokens.
struct StringSpace {
  int vocab_size = 0;
  int max_len = 0;

  void validate() const {
    require(vocab_size >= 3, "string space: vocab_size must be >= 3");
    require(max_len >= 1, "string space: max_len must be >= 1");
    const double count = std::pow(static_cast<double>(vocab_size - 2), max_len);
    if (count > kEnumerationGuard)
      throw UsageError("string space too large to enumerate: " + std::to_string(vocab_size - 2) + "^" +
                       std::to_string(max_len) + " strings exceeds the 1e7 guard");
  }
};

template <std::floating_point T>
StringSpace space_for(const Parameters<T>& p, int max_len) {
  return {p.config.vocab_size, max_len};
}

// Strings in lexicographic id order with natural-log probabilities.
struct StringDistribution {
  std::vector<TokenSequence> strings;
  std::vector<double> log_probs;

  std::size_t size() const { return strings.size(); }

  double total_mass() const {
    double s = 0;
    for (double lp : log_probs) s += std::exp(lp);
    return s;
  }

  // 0 for strings outside the support.
  double probability(const TokenSequence& x) const {
    auto it = std::lower_bound(strings.begin(), strings.end(), x);
    if (it == strings.end() || *it != x) return 0.0;
    return std::exp(log_probs[static_cast<std::size_t>(it - strings.begin())]);
  }
};

namespace detail {

inline std::vector<double> log_softmax_emittable(const std::vector<double>& logits) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 1; i < logits.size(); ++i) mx = std::max(mx, logits[i]);
  double z = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) z += std::exp(logits[i] - mx);
  std::vector<double> out(logits.size(), -std::numeric_limits<double>::infinity());
  for (std::size_t i = 1; i < logits.size(); ++i) out[i] = logits[i] - mx - std::log(z);
  return out;
}

// Depth-first prefix-tree walk with running log-probabilities. step(prefix) returns, per
// token id, the log-probability of extending by it (-inf prunes the branch); leaf(string,
// total) receives every complete string in lexicographic order.
template <class Step, class Leaf>
void walk_prefix_tree(const StringSpace& space, Step&& step, Leaf&& leaf) {
  TokenSequence prefix;
  std::vector<double> running{0.0};
  auto visit = [&](auto&& self) -> void {
    const std::vector<double> lp = step(prefix);
    for (TokenId t = 1; t < space.vocab_size; ++t) {
      if (std::isinf(lp[static_cast<std::size_t>(t)])) continue;
      const double total = running.back() + lp[static_cast<std::size_t>(t)];
      prefix.push_back(t);
      if (t == kEos || static_cast<int>(prefix.size()) == space.max_len) {
        leaf(prefix, total);
      } else {
        running.push_back(total);
        self(self);
        running.pop_back();
      }
      prefix.pop_back();
    }
  };
  visit(visit);
}

inline void check_pair(const ModelConfig& a, const ModelConfig& b, const StringSpace& space) {
  if (a.vocab_size != b.vocab_size) throw IncompatibleError("models have different vocabularies");
  if (space.vocab_size != a.vocab_size) throw IncompatibleError("string space vocabulary does not match the models");
  if (space.max_len > a.max_len || space.max_len > b.max_len)
    throw IncompatibleError("string space is longer than a model context");
}

}  // namespace detail

inline StringDistribution enumerate_distribution(const Parameters<double>& params, const StringSpace& space) {
  space.validate();
  detail::check_pair(params.config, params.config, space);
  StringDistribution dist;
  detail::walk_prefix_tree(
      space,
      [&](const TokenSequence& prefix) { return detail::log_softmax_emittable(next_token_logits(params, prefix)); },
      [&](const TokenSequence& x, double lp) {
        dist.strings.push_back(x);
        dist.log_probs.push_back(lp);
      });
  return dist;
}

// KL(p || q) = sum_x p(x) (log p(x) - log q(x)) over the truncated space.
inline double exact_kl(const Parameters<double>& p, const Parameters<double>& q, const StringSpace& space) {
  space.validate();
  detail::check_pair(p.config, q.config, space);
  // Walk the tree once, evaluating both models at every prefix.
  double kl = 0;
  TokenSequence prefix;
  std::vector<double> pr{0.0}, qr{0.0};
  auto walk = [&](auto&& self) -> void {
    const auto lp = detail::log_softmax_emittable(next_token_logits(p, prefix));
    const auto lq = detail::log_softmax_emittable(next_token_logits(q, prefix));
    for (TokenId t = 1; t < space.vocab_size; ++t) {
      const auto ti = static_cast<std::size_t>(t);
      const double tp = pr.back() + lp[ti];
      const double tq = qr.back() + lq[ti];
      prefix.push_back(t);
      if (t == kEos || static_cast<int>(prefix.size()) == space.max_len) {
        kl += std::exp(tp) * (tp - tq);
      } else {
        pr.push_back(tp);
        qr.push_back(tq);
        self(self);
        pr.pop_back();
        qr.pop_back();
      }
      prefix.pop_back();
    }
  };
  walk(walk);
  return kl;
}

enum class EstimatorKind { kl, cross_entropy };

inline const char* estimator_name(EstimatorKind k) { return k == EstimatorKind::kl ? "kl" : "cross-entropy"; }

struct KLReport {
  std::optional<double> exact_kl;
  double mc_estimate = 0;
  double std_error = 0;
  std::size_t n_samples = 0;  // 0: exact-only report
  EstimatorKind kind = EstimatorKind::kl;
};

namespace detail {

// Mean and standard error (unbiased n-1 variance) in index order.
inline std::pair<double, double> mean_and_se(const std::vector<double>& v) {
  if (v.empty()) throw UsageError("Monte-Carlo estimate needs at least one sample");
  double mean = 0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  if (v.size() == 1) return {mean, 0.0};
  double ss = 0;
  for (double x : v) ss += (x - mean) * (x - mean);
  const double var = ss / static_cast<double>(v.size() - 1);
  return {mean, std::sqrt(var / static_cast<double>(v.size()))};
}

}  // namespace detail

// Per-sample terms log p(x) - log q(x).
inline std::vector<double> kl_terms(const Parameters<double>& p, const Parameters<double>& q,
                                    const std::vector<TokenSequence>& samples, int max_len = 0) {
  if (p.config.vocab_size != q.config.vocab_size) throw IncompatibleError("models have different vocabularies");
  const auto lp = batch_sequence_logprobs(p, samples, max_len);
  const auto lq = batch_sequence_logprobs(q, samples, max_len);
  std::vector<double> out(samples.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = lp[i] - lq[i];
  return out;
}

inline KLReport mc_kl(const Parameters<double>& p, const Parameters<double>& q,
                      const std::vector<TokenSequence>& samples, int max_len = 0) {
  if (samples.empty()) throw UsageError("mc_kl: empty sample list");
  const auto [mean, se] = detail::mean_and_se(kl_terms(p, q, samples, max_len));
  return {std::nullopt, mean, se, samples.size(), EstimatorKind::kl};
}

// Mean of -log q(x) over samples from p; equals KL(p||q) + H(p) in expectation.
inline KLReport mc_cross_entropy(const Parameters<double>& p, const Parameters<double>& q,
                                 const std::vector<TokenSequence>& samples, int max_len = 0) {
  if (samples.empty()) throw UsageError("mc_cross_entropy: empty sample list");
  if (p.config.vocab_size != q.config.vocab_size) throw IncompatibleError("models have different vocabularies");
  auto lq = batch_sequence_logprobs(q, samples, max_len);
  for (double& x : lq) x = -x;
  const auto [mean, se] = detail::mean_and_se(lq);
  return {std::nullopt, mean, se, samples.size(), EstimatorKind::cross_entropy};
}

struct SamplerBias {
  StringDistribution tempered;
  double kl_to_model = 0;  // KL(tempered || model)
};

// Exact string distribution induced by stepwise filter_distribution under cfg (zero-mass
// branches pruned) and its KL to the raw model distribution.
inline SamplerBias sampler_bias(const Parameters<double>& params, const SamplerConfig& cfg, const StringSpace& space) {
  cfg.validate();
  space.validate();
  detail::check_pair(params.config, params.config, space);
  SamplerBias out;
  std::vector<double> model_running{0.0};
  TokenSequence prefix;
  std::vector<double> tr{0.0};
  auto walk = [&](auto&& self) -> void {
    const auto logits = next_token_logits(params, prefix);
    const auto lm = detail::log_softmax_emittable(logits);
    const auto filtered = filter_distribution<double>(logits, cfg.temperature, cfg.top_p);
    for (TokenId t = 1; t < space.vocab_size; ++t) {
      const auto ti = static_cast<std::size_t>(t);
      if (filtered[ti] <= 0) continue;
      const double lt = tr.back() + std::log(filtered[ti]);
      const double lmt = model_running.back() + lm[ti];
      prefix.push_back(t);
      if (t == kEos || static_cast<int>(prefix.size()) == space.max_len) {
        out.tempered.strings.push_back(prefix);
        out.tempered.log_probs.push_back(lt);
        out.kl_to_model += std::exp(lt) * (lt - lmt);
      } else {
        tr.push_back(lt);
        model_running.push_back(lmt);
        self(self);
        tr.pop_back();
        model_running.pop_back();
      }
      prefix.pop_back();
    }
  };
  walk(walk);
  return out;
}

// E_{x ~ dist}[f(x)] for a per-string function evaluated in one pass.
template <class F>
double expectation(const StringDistribution& dist, F&& f) {
  double acc = 0;
  for (std::size_t i = 0; i < dist.size(); ++i) acc += std::exp(dist.log_probs[i]) * f(dist.strings[i]);
  return acc;
}

// Entropy of p over the space, -sum p log p.
inline double exact_entropy(const StringDistribution& dist) {
  double h = 0;
  for (double lp : dist.log_probs) h -= std::exp(lp) * lp;
  return h;
}

}  // namespace forgetlab
