#pragma once

// Synthetic stand-ins for a pretraining corpus (Markov letter strings plus a
// string-reversal skill) and a new downstream task (single-digit addition mod 10),
// and the builders for every augmentation source.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "forgetlab/errors.hpp"
#include "forgetlab/model.hpp"
#include "forgetlab/rng.hpp"
#include "forgetlab/sampling.hpp"
#include "forgetlab/vocab.hpp"

namespace forgetlab {

enum class LossKind { all_token, masked_target };
enum class Origin { finetune, cfs, cs, replay, eval };

inline const char* loss_kind_name(LossKind k) { return k == LossKind::all_token ? "all-token" : "masked-target"; }

inline const char* origin_name(Origin o) {
  switch (o) {
    case Origin::finetune: return "finetune";
    case Origin::cfs: return "cfs";
    case Origin::cs: return "cs";
    case Origin::replay: return "replay";
    case Origin::eval: return "eval";
  }
  return "?";
}

struct Example {
  TokenSequence prompt;
  TokenSequence target;
  LossKind kind = LossKind::masked_target;
  Origin origin = Origin::finetune;

  TokenSequence body() const {
    TokenSequence b = prompt;
    b.insert(b.end(), target.begin(), target.end());
    return b;
  }

  bool operator==(const Example&) const = default;
};

inline Example make_example(TokenSequence prompt, TokenSequence target, LossKind kind, Origin origin) {
  if (target.empty()) throw UsageError("example target must be nonempty");
  if (kind == LossKind::all_token && !prompt.empty()) throw UsageError("all-token examples have empty prompts");
  return Example{std::move(prompt), std::move(target), kind, origin};
}

inline Example all_token_example(TokenSequence x, Origin origin) {
  return make_example({}, std::move(x), LossKind::all_token, origin);
}

// Desk vocabulary ids.
namespace tok {
inline TokenId letter(int i) { return 2 + i; }  // a..h
inline TokenId digit(int d) { return 10 + d; }  // 0..9
inline constexpr TokenId kReverse = 20;         // r
inline constexpr TokenId kSep = 21;             // |
inline constexpr TokenId kPlus = 22;            // +
inline constexpr TokenId kEquals = 23;          // =
inline constexpr int kLetters = 8;
}  // namespace tok

inline constexpr int kDeskMaxLen = 32;
inline constexpr double kMarkovMeanLength = 12.0;
inline constexpr double kMarkovFraction = 0.7;
inline constexpr std::uint64_t kTransitionSeed = 0x5eed'0f'7a'b1eULL;

using TransitionMatrix = std::array<std::array<double, tok::kLetters>, tok::kLetters>;

// Fixed letter-to-letter transition matrix; rows are softmax(1.5 * N(0,1)).
inline const TransitionMatrix& markov_transitions() {
  static const TransitionMatrix m = [] {
    TransitionMatrix t{};
    Rng rng(kTransitionSeed);
    for (auto& row : t) {
      double z = 0;
      for (double& x : row) {
        x = std::exp(1.5 * rng.normal());
        z += x;
      }
      for (double& x : row) x /= z;
    }
    return t;
  }();
  return m;
}

namespace detail {

inline int draw_index(const std::array<double, tok::kLetters>& row, Rng& rng) {
  const double u = rng.uniform();
  double cum = 0;
  for (int i = 0; i < tok::kLetters; ++i) {
    cum += row[static_cast<std::size_t>(i)];
    if (u < cum) return i;
  }
  return tok::kLetters - 1;
}

inline TokenSequence truncate(TokenSequence s, int max_len) {
  if (static_cast<int>(s.size()) > max_len) s.resize(static_cast<std::size_t>(max_len));
  return s;
}

}  // namespace detail

// Geometric length (mean 12), uniform first letter, then Markov transitions; EOS-terminated
// unless cut at max_len.
inline TokenSequence markov_string(Rng& rng, int max_len = kDeskMaxLen) {
  int len = 1;
  while (rng.uniform() >= 1.0 / kMarkovMeanLength) ++len;
  TokenSequence s;
  int cur = rng.range(0, tok::kLetters - 1);
  s.push_back(tok::letter(cur));
  for (int i = 1; i < len && static_cast<int>(s.size()) <= max_len; ++i) {
    cur = detail::draw_index(markov_transitions()[static_cast<std::size_t>(cur)], rng);
    s.push_back(tok::letter(cur));
  }
  s.push_back(kEos);
  return detail::truncate(std::move(s), max_len);
}

inline TokenSequence random_letters(Rng& rng, int min_len, int max_len) {
  TokenSequence s(static_cast<std::size_t>(rng.range(min_len, max_len)));
  for (TokenId& t : s) t = tok::letter(rng.range(0, tok::kLetters - 1));
  return s;
}

// r s | reverse(s) EOS
inline TokenSequence reverse_string(const TokenSequence& letters) {
  TokenSequence s{tok::kReverse};
  s.insert(s.end(), letters.begin(), letters.end());
  s.push_back(tok::kSep);
  s.insert(s.end(), letters.rbegin(), letters.rend());
  s.push_back(kEos);
  return s;
}

// 70% Markov strings, 30% reverse-skill strings; item i depends only on (seed, i).
inline std::vector<TokenSequence> gen_pretrain_corpus(std::uint64_t seed, std::size_t n, int max_len = kDeskMaxLen) {
  require(n >= 1, "gen_pretrain_corpus: n must be >= 1");
  std::vector<TokenSequence> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, i));
    if (rng.uniform() < kMarkovFraction)
      out.push_back(markov_string(rng, max_len));
    else
      out.push_back(detail::truncate(reverse_string(random_letters(rng, 3, 6)), max_len));
  }
  return out;
}

// Markov strings only (the held-out old-task likelihood set).
inline std::vector<TokenSequence> gen_markov_heldout(std::uint64_t seed, std::size_t n, int max_len = kDeskMaxLen) {
  std::vector<TokenSequence> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(derive_seed(seed, "markov-heldout"), i));
    out.push_back(markov_string(rng, max_len));
  }
  return out;
}

// Prompt "r s |", target reverse(s) EOS.
inline std::vector<Example> gen_reverse_eval(std::uint64_t seed, std::size_t n) {
  std::vector<Example> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(derive_seed(seed, "reverse-eval"), i));
    const TokenSequence s = random_letters(rng, 3, 6);
    TokenSequence prompt{tok::kReverse};
    prompt.insert(prompt.end(), s.begin(), s.end());
    prompt.push_back(tok::kSep);
    TokenSequence target(s.rbegin(), s.rend());
    target.push_back(kEos);
    out.push_back(make_example(std::move(prompt), std::move(target), LossKind::masked_target, Origin::eval));
  }
  return out;
}

inline Example addition_example(int d1, int d2, Origin origin = Origin::finetune) {
  return make_example({tok::digit(d1), tok::kPlus, tok::digit(d2), tok::kEquals}, {tok::digit((d1 + d2) % 10), kEos},
                      LossKind::masked_target, origin);
}

// "d1 + d2 =" -> "(d1 + d2) mod 10" EOS with uniform digits.
inline std::vector<Example> gen_finetune_dataset(std::uint64_t seed, std::size_t n) {
  require(n >= 1, "gen_finetune_dataset: n must be >= 1");
  std::vector<Example> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(derive_seed(seed, "addition"), i));
    const int d1 = rng.range(0, 9);
    const int d2 = rng.range(0, 9);
    out.push_back(addition_example(d1, d2));
  }
  return out;
}

// All 100 addition prompts once each.
inline std::vector<Example> addition_table() {
  std::vector<Example> out;
  for (int a = 0; a < 10; ++a)
    for (int b = 0; b < 10; ++b) out.push_back(addition_example(a, b, Origin::eval));
  return out;
}

template <std::floating_point T>
std::vector<Example> build_cfs_dataset(const Parameters<T>& base, std::size_t count, const SamplerConfig& cfg) {
  std::vector<Example> out;
  out.reserve(count);
  for (auto& x : sample_context_free(base, cfg, count)) out.push_back(all_token_example(std::move(x), Origin::cfs));
  return out;
}

// One generated continuation per fine-tuning prompt, paired back with that prompt.
template <std::floating_point T>
std::vector<Example> build_cs_dataset(const Parameters<T>& base, const std::vector<Example>& finetune,
                                      const SamplerConfig& cfg) {
  cfg.validate();
  std::vector<Example> out;
  out.reserve(finetune.size());
  for (std::size_t i = 0; i < finetune.size(); ++i) {
    TokenSequence y = generate_one(base, finetune[i].prompt, cfg, derive_seed(cfg.seed, i));
    out.push_back(make_example(finetune[i].prompt, std::move(y), LossKind::masked_target, Origin::cs));
  }
  return out;
}

inline std::vector<Example> build_replay_mix(std::uint64_t seed, std::size_t count, int max_len = kDeskMaxLen) {
  std::vector<Example> out;
  if (count == 0) return out;
  out.reserve(count);
  for (auto& x : gen_pretrain_corpus(derive_seed(seed, "replay"), count, max_len))
    out.push_back(all_token_example(std::move(x), Origin::replay));
  return out;
}

struct MixSpec {
  double percentage = 100.0;  // augmentation examples as a percentage of |F|
  std::size_t step_budget = 2000;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;

  std::size_t augmentation_count(std::size_t finetune_size) const {
    return static_cast<std::size_t>(std::llround(percentage / 100.0 * static_cast<double>(finetune_size)));
  }
};

// Single-consumer batch iterator over per-epoch shuffles of a fixed pool. The epoch count is
// whatever the step budget needs, so larger pools are visited for fewer epochs.
class TrainingStream {
 public:
  TrainingStream(std::vector<Example> pool, std::size_t steps, std::size_t batch_size, std::uint64_t seed)
      : pool_(std::move(pool)), steps_(steps), batch_size_(batch_size), seed_(seed) {
    require(!pool_.empty(), "training stream: empty pool");
    require(batch_size_ >= 1, "training stream: batch size must be >= 1");
    order_.resize(pool_.size());
  }

  const std::vector<Example>& pool() const { return pool_; }
  std::size_t steps() const { return steps_; }
  std::size_t batch_size() const { return batch_size_; }
  std::size_t epochs() const { return (steps_ * batch_size_ + pool_.size() - 1) / pool_.size(); }

  std::vector<const Example*> next_batch() {
    std::vector<const Example*> batch;
    batch.reserve(batch_size_);
    while (batch.size() < batch_size_) {
      if (cursor_ == 0) reshuffle();
      batch.push_back(&pool_[order_[cursor_]]);
      if (++cursor_ == pool_.size()) {
        cursor_ = 0;
        ++epoch_;
      }
    }
    return batch;
  }

  // Permutation used by epoch e.
  std::vector<std::size_t> epoch_order(std::size_t e) const {
    std::vector<std::size_t> order(pool_.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(seed_, e));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    return order;
  }

 private:
  void reshuffle() { order_ = epoch_order(epoch_); }

  std::vector<Example> pool_;
  std::size_t steps_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
};

inline TrainingStream mix_datasets(const std::vector<Example>& finetune, const std::vector<Example>& augmentation,
                                   const MixSpec& spec) {
  require(!finetune.empty(), "mix_datasets: empty fine-tuning set");
  require(spec.percentage >= 0, "mix_datasets: percentage must be >= 0");
  require(spec.step_budget > 0, "mix_datasets: step budget must be > 0");
  const std::size_t count = spec.augmentation_count(finetune.size());
  if (augmentation.size() < count)
    throw UsageError("mix_datasets: need " + std::to_string(count) + " augmentation examples, have " +
                     std::to_string(augmentation.size()));
  std::vector<Example> pool = finetune;
  pool.insert(pool.end(), augmentation.begin(), augmentation.begin() + static_cast<long>(count));
  return TrainingStream(std::move(pool), spec.step_budget, spec.batch_size, derive_seed(spec.seed, "shuffle"));
}

}  // namespace forgetlab
