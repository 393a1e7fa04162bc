#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "forgetlab/objectives.hpp"
#include "forgetlab/tasks.hpp"

using namespace forgetlab;

namespace {

bool is_letter(TokenId t) { return t >= tok::letter(0) && t < tok::letter(tok::kLetters); }

// Small model pretrained briefly on the desk corpus; shared by the CFS tests.
const Parameters<float>& pretrained_fixture() {
  static const Parameters<float> p = [] {
    ModelConfig c;
    c.d_model = 16;
    c.n_layers = 1;
    c.d_ff = 32;
    std::vector<Example> corpus;
    for (auto& x : gen_pretrain_corpus(5, 2000)) corpus.push_back(all_token_example(std::move(x), Origin::replay));
    TrainConfig cfg;
    cfg.steps = 300;
    cfg.peak_lr = 3e-3;
    TrainingStream s(corpus, cfg.steps, cfg.batch_size, 1);
    return train(init_model<float>(c, 2), s, LossSpec{}, cfg).params;
  }();
  return p;
}

}  // namespace

TEST(Tasks, GeneratorsAreDeterministicAndPrefixStable) {
  EXPECT_EQ(gen_pretrain_corpus(3, 200), gen_pretrain_corpus(3, 200));
  const auto big = gen_pretrain_corpus(3, 300);
  EXPECT_EQ(std::vector<TokenSequence>(big.begin(), big.begin() + 200), gen_pretrain_corpus(3, 200));
  EXPECT_NE(gen_pretrain_corpus(3, 50), gen_pretrain_corpus(4, 50));
  EXPECT_EQ(gen_finetune_dataset(2, 100), gen_finetune_dataset(2, 100));
  EXPECT_EQ(gen_reverse_eval(2, 30), gen_reverse_eval(2, 30));
  EXPECT_THROW(gen_pretrain_corpus(1, 0), UsageError);
  EXPECT_THROW(gen_finetune_dataset(1, 0), UsageError);
}

TEST(Tasks, CorpusStringsAreWellFormed) {
  std::size_t reverse = 0;
  const auto corpus = gen_pretrain_corpus(7, 5000);
  for (const auto& x : corpus) {
    ASSERT_FALSE(x.empty());
    EXPECT_LE(x.size(), 32u);
    if (x.front() == tok::kReverse) {
      ++reverse;
      const auto sep = std::find(x.begin(), x.end(), tok::kSep);
      ASSERT_NE(sep, x.end());
      const TokenSequence s(x.begin() + 1, sep);
      EXPECT_GE(s.size(), 3u);
      EXPECT_LE(s.size(), 6u);
      TokenSequence suffix(sep + 1, x.end());
      TokenSequence expect(s.rbegin(), s.rend());
      expect.push_back(kEos);
      EXPECT_EQ(suffix, expect);
    } else {
      for (std::size_t i = 0; i + 1 < x.size(); ++i) EXPECT_TRUE(is_letter(x[i]));
      EXPECT_TRUE(x.back() == kEos || x.size() == 32u);
    }
  }
  // 30% reverse strings, 4 sd band
  const double sd = std::sqrt(5000 * 0.3 * 0.7);
  EXPECT_LT(std::abs(static_cast<double>(reverse) - 1500), 4 * sd);
}

TEST(Tasks, MarkovTransitionsAreStochastic) {
  for (const auto& row : markov_transitions()) {
    double s = 0;
    for (double x : row) {
      EXPECT_GT(x, 0);
      s += x;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

// Empirical letter-to-letter counts against the transition matrix, rows weighted by visits.
TEST(Tasks, MarkovBigramsMatchTransitionMatrix) {
  std::array<std::array<double, tok::kLetters>, tok::kLetters> counts{};
  double total = 0;
  for (const auto& x : gen_markov_heldout(11, 50000))
    for (std::size_t i = 0; i + 1 < x.size(); ++i)
      if (is_letter(x[i]) && is_letter(x[i + 1])) {
        counts[static_cast<std::size_t>(x[i] - 2)][static_cast<std::size_t>(x[i + 1] - 2)] += 1;
        total += 1;
      }
  double weighted_tv = 0;
  for (std::size_t a = 0; a < counts.size(); ++a) {
    double row = 0;
    for (double c : counts[a]) row += c;
    double tv = 0;
    for (std::size_t b = 0; b < counts[a].size(); ++b) tv += std::abs(counts[a][b] / row - markov_transitions()[a][b]);
    weighted_tv += row / total * 0.5 * tv;
  }
  EXPECT_LE(weighted_tv, 0.02);
}

TEST(Tasks, MarkovLengthsAreGeometric) {
  double len = 0;
  std::size_t n = 0;
  for (const auto& x : gen_markov_heldout(2, 20000)) {
    if (x.back() != kEos) continue;  // cut at max_len
    len += static_cast<double>(x.size() - 1);
    ++n;
  }
  // geometric(1/12) conditioned on fitting with its EOS
  double num = 0, den = 0;
  for (int l = 1; l <= 31; ++l) {
    const double pl = std::pow(11.0 / 12, l - 1) / 12;
    num += l * pl;
    den += pl;
  }
  EXPECT_NEAR(len / static_cast<double>(n), num / den, 0.15);
}

TEST(Tasks, AdditionExamples) {
  const auto e = addition_example(3, 4);
  EXPECT_EQ(e.prompt, (TokenSequence{tok::digit(3), tok::kPlus, tok::digit(4), tok::kEquals}));
  EXPECT_EQ(e.target, (TokenSequence{tok::digit(7), kEos}));
  EXPECT_EQ(addition_example(9, 9).target, (TokenSequence{tok::digit(8), kEos}));
  EXPECT_EQ(e.kind, LossKind::masked_target);
  EXPECT_EQ(e.origin, Origin::finetune);
  const auto table = addition_table();
  EXPECT_EQ(table.size(), 100u);
  std::set<TokenSequence> prompts;
  for (const auto& x : table) prompts.insert(x.prompt);
  EXPECT_EQ(prompts.size(), 100u);
}

// Pearson chi-square over the 100 digit pairs; 148.23 is the 0.999 quantile at 99 dof.
TEST(Tasks, AdditionCellsAreUniform) {
  std::map<TokenSequence, double> cells;
  for (const auto& e : gen_finetune_dataset(1, 10000)) cells[e.prompt] += 1;
  EXPECT_EQ(cells.size(), 100u);
  double chi2 = 0;
  for (const auto& [k, c] : cells) chi2 += (c - 100) * (c - 100) / 100;
  EXPECT_LT(chi2, 148.23);
}

TEST(Tasks, ReverseEvalExamples) {
  for (const auto& e : gen_reverse_eval(99, 200)) {
    EXPECT_EQ(e.prompt.front(), tok::kReverse);
    EXPECT_EQ(e.prompt.back(), tok::kSep);
    TokenSequence s(e.prompt.begin() + 1, e.prompt.end() - 1);
    TokenSequence expect(s.rbegin(), s.rend());
    expect.push_back(kEos);
    EXPECT_EQ(e.target, expect);
    EXPECT_EQ(e.origin, Origin::eval);
  }
}

TEST(Tasks, CfsSamplesAreTaggedAndTypicalOfTheBase) {
  const auto& base = pretrained_fixture();
  const auto cfs = build_cfs_dataset(base, 300, SamplerConfig{1.0, 0.95, 0, 3});
  ASSERT_EQ(cfs.size(), 300u);
  Rng rng(17);
  double lp_cfs = 0, lp_rand = 0;
  for (const auto& e : cfs) {
    EXPECT_EQ(e.origin, Origin::cfs);
    EXPECT_EQ(e.kind, LossKind::all_token);
    EXPECT_TRUE(e.prompt.empty());
    lp_cfs += sequence_logprob(base, e.target);
    // same length, uniform emittable tokens
    TokenSequence r(e.target.size());
    for (auto& t : r) t = static_cast<TokenId>(rng.range(2, 23));
    if (e.target.back() == kEos) r.back() = kEos;
    lp_rand += sequence_logprob(base, r);
  }
  EXPECT_GT(lp_cfs, lp_rand);
  EXPECT_EQ(cfs, build_cfs_dataset(base, 300, SamplerConfig{1.0, 0.95, 0, 3}));
}

TEST(Tasks, CsPairsFollowFinetunePrompts) {
  ModelConfig c;
  const auto untrained = init_model<float>(c, 3);
  const auto f = gen_finetune_dataset(4, 300);
  const auto cs = build_cs_dataset(untrained, f, SamplerConfig{0.6, 0.95, 0, 5});
  ASSERT_EQ(cs.size(), f.size());
  std::size_t disagree = 0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    EXPECT_EQ(cs[i].prompt, f[i].prompt);
    EXPECT_EQ(cs[i].origin, Origin::cs);
    EXPECT_EQ(cs[i].kind, LossKind::masked_target);
    disagree += cs[i].target != f[i].target;
  }
  EXPECT_GT(static_cast<double>(disagree) / static_cast<double>(f.size()), 0.8);
}

TEST(Tasks, ReplayDrawsFreshPretrainingStrings) {
  const auto replay = build_replay_mix(1, 2000);
  ASSERT_EQ(replay.size(), 2000u);
  EXPECT_TRUE(build_replay_mix(1, 0).empty());
  std::set<TokenSequence> corpus;
  for (auto& x : gen_pretrain_corpus(1, 50000))
    if (x.size() >= 16) corpus.insert(std::move(x));
  for (const auto& e : replay) {
    EXPECT_EQ(e.origin, Origin::replay);
    EXPECT_EQ(e.kind, LossKind::all_token);
    if (e.target.size() >= 16) {
      EXPECT_EQ(corpus.count(e.target), 0u);
    }
  }
}

TEST(Tasks, MixingPercentages) {
  const auto f = gen_finetune_dataset(1, 1000);
  const auto aug = build_replay_mix(2, 2000);
  const auto none = mix_datasets(f, aug, MixSpec{0.0, 10, 32, 1});
  EXPECT_EQ(none.pool(), f);
  const auto full = mix_datasets(f, aug, MixSpec{100.0, 10, 32, 1});
  ASSERT_EQ(full.pool().size(), 2000u);
  std::size_t ft = 0;
  for (const auto& e : full.pool()) ft += e.origin == Origin::finetune;
  EXPECT_EQ(ft, 1000u);
  for (double pct : {1.0, 12.5, 50.0, 100.0, 200.0}) {
    const auto s = mix_datasets(f, aug, MixSpec{pct, 10, 32, 1});
    EXPECT_EQ(s.pool().size(), 1000u + static_cast<std::size_t>(std::llround(pct * 10)));
  }
  EXPECT_THROW(mix_datasets(f, aug, MixSpec{300.0, 10, 32, 1}), UsageError);
  EXPECT_THROW(mix_datasets(f, aug, MixSpec{-1.0, 10, 32, 1}), UsageError);
  EXPECT_THROW(mix_datasets({}, aug, MixSpec{}), UsageError);
}

TEST(Tasks, EachExampleOncePerEpoch) {
  std::vector<Example> pool;
  for (int i = 0; i < 40; ++i) pool.push_back(addition_example(i % 10, i / 10));
  // 3 epochs of 40 in batches of 8
  TrainingStream s(pool, 15, 8, 6);
  EXPECT_EQ(s.epochs(), 3u);
  for (int epoch = 0; epoch < 3; ++epoch) {
    std::multiset<const Example*> seen;
    for (int b = 0; b < 5; ++b)
      for (const Example* e : s.next_batch()) seen.insert(e);
    EXPECT_EQ(seen.size(), 40u);
    for (const auto& e : s.pool()) EXPECT_EQ(seen.count(&e), 1u);
  }
  EXPECT_NE(s.epoch_order(0), s.epoch_order(1));
}

TEST(Tasks, ExampleInvariants) {
  EXPECT_THROW(make_example({2}, {}, LossKind::masked_target, Origin::finetune), UsageError);
  EXPECT_THROW(make_example({2}, {3}, LossKind::all_token, Origin::replay), UsageError);
  EXPECT_NO_THROW(make_example({}, {3}, LossKind::masked_target, Origin::finetune));
  EXPECT_STREQ(origin_name(Origin::cfs), "cfs");
  EXPECT_STREQ(loss_kind_name(LossKind::all_token), "all-token");
}
