#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "forgetlab/divergence.hpp"
#include "forgetlab/sampling.hpp"

using namespace forgetlab;

namespace {

ModelConfig micro(int vocab, int max_len) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.d_model = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_ff = 16;
  c.max_len = max_len;
  return c;
}

std::vector<double> logits_of(std::vector<double> probs) {
  for (double& p : probs) p = std::log(p);
  return probs;
}

}  // namespace

TEST(Sampling, IdentityConfigIsPlainSoftmax) {
  const std::vector<double> logits{0.3, -1.2, 2.0, 0.0, 0.7};
  const auto p = filter_distribution<double>(logits, 1.0, 1.0);
  double z = 0;
  for (double l : logits) z += std::exp(l);
  for (std::size_t i = 0; i < logits.size(); ++i) EXPECT_NEAR(p[i], std::exp(logits[i]) / z, 1e-15);
}

TEST(Sampling, NucleusKeepsSmallestPrefixReachingTopP) {
  const auto p = filter_distribution<double>(logits_of({0.5, 0.3, 0.2}), 1.0, 0.7);
  EXPECT_NEAR(p[0], 0.625, 1e-12);
  EXPECT_NEAR(p[1], 0.375, 1e-12);
  EXPECT_EQ(p[2], 0.0);
}

TEST(Sampling, GreedyBreaksTiesTowardsLowestId) {
  const std::vector<double> logits{1.0, 2.0, 2.0};
  EXPECT_EQ(filter_distribution<double>(logits, 0.0, 0.95), (std::vector<double>{0, 1, 0}));
}

TEST(Sampling, NucleusTiesBrokenByAscendingId) {
  // four equal tokens, top_p 0.5 keeps exactly the two lowest ids
  const auto p = filter_distribution<double>(std::vector<double>{0, 0, 0, 0}, 1.0, 0.5);
  EXPECT_EQ(p, (std::vector<double>{0.5, 0.5, 0, 0}));
}

TEST(Sampling, FilteredDistributionIsNormalizedAndMonotoneInTopP) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> logits(9);
    for (double& l : logits) l = 2.0 * rng.normal();
    const double t = 0.2 + 1.5 * rng.uniform();
    std::vector<double> prev;
    for (double top_p : {0.1, 0.3, 0.5, 0.8, 0.95, 1.0}) {
      const auto p = filter_distribution<double>(logits, t, top_p);
      double s = 0;
      for (double x : p) {
        EXPECT_GE(x, 0.0);
        s += x;
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
      if (!prev.empty())
        for (std::size_t i = 0; i < p.size(); ++i)
          if (prev[i] > 0) {
            EXPECT_GT(p[i], 0.0);
          }
      prev = p;
    }
  }
}

TEST(Sampling, ExcludedAndDegenerateLogits) {
  const double ninf = -std::numeric_limits<double>::infinity();
  const auto p = filter_distribution<double>(std::vector<double>{ninf, 0.0, 0.0}, 1.0, 1.0);
  EXPECT_EQ(p, (std::vector<double>{0, 0.5, 0.5}));
  EXPECT_THROW(filter_distribution<double>(std::vector<double>{ninf, ninf}, 1.0, 1.0), NumericalError);
  EXPECT_THROW(filter_distribution<double>(std::vector<double>{0.0, NAN}, 1.0, 1.0), NumericalError);
  EXPECT_THROW(filter_distribution<double>(std::vector<double>{0.0}, -1.0, 1.0), UsageError);
  EXPECT_THROW(filter_distribution<double>(std::vector<double>{0.0}, 1.0, 0.0), UsageError);
  EXPECT_THROW(filter_distribution<double>(std::vector<double>{0.0}, 1.0, 1.5), UsageError);
}

TEST(Sampling, DefaultSettings) {
  EXPECT_EQ(context_free_defaults().temperature, 1.0);
  EXPECT_EQ(context_free_defaults().top_p, 0.95);
  EXPECT_EQ(contextual_defaults().temperature, 0.6);
  EXPECT_EQ(contextual_defaults().top_p, 0.95);
}

// Pearson chi-square on first tokens of a uniform model; 40.29 is the 0.99 quantile at 22 dof.
TEST(Sampling, ZeroInitFirstTokenIsUniform) {
  ModelConfig c;
  c.init_scale = 0;
  const auto p = init_model<double>(c, 0);
  const auto xs = sample_context_free(p, SamplerConfig{1.0, 1.0, 1, 11}, 50000);
  std::vector<double> counts(24, 0);
  for (const auto& x : xs) {
    ASSERT_EQ(x.size(), 1u);
    counts[static_cast<std::size_t>(x[0])] += 1;
  }
  EXPECT_EQ(counts[kBos], 0);
  const double expected = 50000.0 / 23;
  double chi2 = 0;
  for (std::size_t t = 1; t < 24; ++t) chi2 += (counts[t] - expected) * (counts[t] - expected) / expected;
  EXPECT_LT(chi2, 40.29);
}

TEST(Sampling, EmpiricalStringFrequenciesMatchEnumeration) {
  const auto p = init_model<double>(micro(5, 4), 12);
  const auto dist = enumerate_distribution(p, StringSpace{5, 4});
  const std::size_t n = 100000;
  std::map<TokenSequence, double> freq;
  for (const auto& x : sample_context_free(p, SamplerConfig{1.0, 1.0, 0, 3}, n)) freq[x] += 1.0 / n;
  double tv = 0;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    const auto it = freq.find(dist.strings[i]);
    tv += std::abs((it == freq.end() ? 0.0 : it->second) - std::exp(dist.log_probs[i]));
    if (it != freq.end()) freq.erase(it);
  }
  EXPECT_TRUE(freq.empty()) << "sampler produced strings outside the space";
  EXPECT_LE(0.5 * tv, 0.02);
}

TEST(Sampling, SamplingIsDeterministicAndOrderIndependent) {
  const auto p = init_model<float>(micro(6, 8), 2);
  const SamplerConfig cfg{0.8, 0.9, 0, 5};
  const auto a = sample_context_free(p, cfg, 40);
  EXPECT_EQ(a, sample_context_free(p, cfg, 40));
  // stream i does not depend on how many siblings are drawn
  const auto b = sample_context_free(p, cfg, 10);
  EXPECT_EQ(std::vector<TokenSequence>(a.begin(), a.begin() + 10), b);
}

TEST(Sampling, EmptyPromptEqualsContextFree) {
  const auto p = init_model<float>(micro(6, 8), 2);
  const SamplerConfig cfg{1.0, 0.95, 0, 9};
  EXPECT_EQ(sample_conditional(p, TokenSequence{}, cfg, 25), sample_context_free(p, cfg, 25));
}

TEST(Sampling, ConditionalOutputsExcludePromptAndRespectLength) {
  const auto p = init_model<float>(micro(6, 8), 2);
  const TokenSequence prompt{2, 3, 4};
  for (const auto& y : sample_conditional(p, prompt, SamplerConfig{1.0, 1.0, 0, 1}, 50)) {
    ASSERT_FALSE(y.empty());
    EXPECT_LE(prompt.size() + y.size(), 8u);
    for (std::size_t i = 0; i + 1 < y.size(); ++i) EXPECT_NE(y[i], kEos);
    if (prompt.size() + y.size() < 8) {
      EXPECT_EQ(y.back(), kEos);
    }
  }
  EXPECT_THROW(sample_conditional(p, TokenSequence(8, 2), SamplerConfig{}, 1), UsageError);
  EXPECT_THROW(sample_conditional(p, TokenSequence{2, 3}, SamplerConfig{1.0, 1.0, 2, 0}, 1), UsageError);
  EXPECT_THROW(sample_conditional(p, TokenSequence{9}, SamplerConfig{}, 1), UsageError);
  EXPECT_THROW(sample_conditional(p, TokenSequence{}, SamplerConfig{1.0, 1.0, 9, 0}, 1), UsageError);
}
