#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "forgetlab/errors.hpp"
#include "forgetlab/model.hpp"
#include "forgetlab/rng.hpp"

namespace forgetlab {

struct SamplerConfig {
  double temperature = 1.0;  // 0 = greedy
  double top_p = 0.95;
  int max_len = 0;  // 0 = model context length
  std::uint64_t seed = 0;

  void validate() const {
    require(std::isfinite(temperature) && temperature >= 0, "sampler: temperature must be >= 0");
    require(top_p > 0 && top_p <= 1, "sampler: top_p must lie in (0, 1]");
    require(max_len >= 0, "sampler: max_len must be >= 0");
  }

  int resolved_max_len(int model_max_len) const {
    require(max_len <= model_max_len, "sampler: max_len exceeds the model context");
    return max_len > 0 ? max_len : model_max_len;
  }
};

// Settings used for context-free generations and for contextual generations.
inline SamplerConfig context_free_defaults() { return {1.0, 0.95, 0, 0}; }
inline SamplerConfig contextual_defaults() { return {0.6, 0.95, 0, 0}; }

// softmax(logits / T) followed by nucleus truncation: keep the smallest probability-sorted
// prefix (ties by ascending id) whose mass reaches top_p, then renormalize. T = 0 is argmax
// with ties to the lowest id. -inf logits are excluded outcomes.
template <std::floating_point T>
std::vector<double> filter_distribution(std::span<const T> logits, double temperature, double top_p) {
  SamplerConfig{temperature, top_p, 0, 0}.validate();
  const std::size_t n = logits.size();
  double mx = -std::numeric_limits<double>::infinity();
  std::size_t arg = n;
  for (std::size_t i = 0; i < n; ++i) {
    const double l = static_cast<double>(logits[i]);
    if (std::isnan(l) || l == std::numeric_limits<double>::infinity())
      throw NumericalError("filter_distribution: non-finite logit");
    if (l > mx) {
      mx = l;
      arg = i;
    }
  }
  if (arg == n) throw NumericalError("filter_distribution: every logit is -inf");
  std::vector<double> p(n, 0.0);
  if (temperature == 0) {
    p[arg] = 1.0;
    return p;
  }
  double z = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double l = static_cast<double>(logits[i]);
    p[i] = std::isinf(l) ? 0.0 : std::exp((l - mx) / temperature);
    z += p[i];
  }
  for (double& x : p) x /= z;
  if (top_p >= 1) return p;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
  double cum = 0;
  std::size_t keep = 0;
  while (keep < n) {
    cum += p[order[keep]];
    ++keep;
    if (cum >= top_p) break;
  }
  std::vector<double> out(n, 0.0);
  double kept = 0;
  for (std::size_t i = 0; i < keep; ++i) kept += p[order[i]];
  for (std::size_t i = 0; i < keep; ++i) out[order[i]] = p[order[i]] / kept;
  return out;
}

// Inverse-CDF draw in ascending id order.
inline TokenId draw(const std::vector<double>& probs, Rng& rng) {
  const double u = rng.uniform();
  double cum = 0;
  std::size_t last = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0) continue;
    cum += probs[i];
    last = i;
    if (u < cum) return static_cast<TokenId>(i);
  }
  return static_cast<TokenId>(last);
}

// Continues BOS + prompt until EOS or until prompt + continuation reaches max_len.
template <std::floating_point T>
TokenSequence generate_one(const Parameters<T>& params, const TokenSequence& prompt, const SamplerConfig& cfg,
                           std::uint64_t stream_seed) {
  const int max_len = cfg.resolved_max_len(params.config.max_len);
  Rng rng(stream_seed);
  TokenSequence prefix = prompt;
  TokenSequence out;
  while (static_cast<int>(prefix.size()) < max_len) {
    const auto logits = next_token_logits(params, prefix);
    const TokenId tok = draw(filter_distribution<T>(logits, cfg.temperature, cfg.top_p), rng);
    prefix.push_back(tok);
    out.push_back(tok);
    if (tok == kEos) break;
  }
  return out;
}

// Sequence i uses RNG stream derive_seed(cfg.seed, i), so results are independent of
// evaluation order.
template <std::floating_point T>
std::vector<TokenSequence> sample_conditional(const Parameters<T>& params, const TokenSequence& prompt,
                                              const SamplerConfig& cfg, std::size_t n) {
  cfg.validate();
  const int max_len = cfg.resolved_max_len(params.config.max_len);
  if (static_cast<int>(prompt.size()) >= max_len) throw UsageError("sample_conditional: prompt too long");
  for (TokenId t : prompt)
    if (t <= kBos || t >= params.config.vocab_size || t == kEos)
      throw UsageError("sample_conditional: prompt has an invalid token");
  std::vector<TokenSequence> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = generate_one(params, prompt, cfg, derive_seed(cfg.seed, i));
  return out;
}

template <std::floating_point T>
std::vector<TokenSequence> sample_context_free(const Parameters<T>& params, const SamplerConfig& cfg, std::size_t n) {
  return sample_conditional(params, TokenSequence{}, cfg, n);
}

}  // namespace forgetlab
