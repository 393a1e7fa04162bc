#include <gtest/gtest.h>

#include <cmath>

#include "forgetlab/metrics.hpp"
#include "forgetlab/objectives.hpp"

using namespace forgetlab;

namespace {

// Desk-sized uniform model whose head bias makes `favourite` the greedy choice at every step.
Parameters<float> always_emits(TokenId favourite) {
  ModelConfig c;
  c.init_scale = 0;
  auto p = init_model<float>(c, 0);
  p["head.b"].values[static_cast<std::size_t>(favourite - 1)] = 5.0f;
  return p;
}

MetricsReport run(std::string method, std::uint64_t seed, double nll, double em_old, double em_new) {
  MetricsReport r;
  r.method = std::move(method);
  r.seed = seed;
  r.old_nll = nll;
  r.old_em = em_old;
  r.new_em = em_new;
  r.marker_mean = 0.5;
  r.gen_len_mean = 10;
  r.config_hash = "abc";
  return r;
}

}  // namespace

TEST(Metrics, ZeroInitPerplexityIsLogEmittable) {
  ModelConfig c;
  c.init_scale = 0;
  const auto p = init_model<double>(c, 0);
  EXPECT_NEAR(perplexity(p, gen_markov_heldout(1, 50)), std::log(23.0), 1e-12);
  EXPECT_THROW(perplexity(p, {}), UsageError);
}

TEST(Metrics, PerplexityIsTokenWeightedAndOrderFree) {
  ModelConfig c;
  c.d_model = 16;
  c.d_ff = 32;
  const auto p = init_model<double>(c, 4);
  auto xs = gen_markov_heldout(2, 40);
  const double a = perplexity(p, xs);
  std::reverse(xs.begin(), xs.end());
  EXPECT_NEAR(perplexity(p, xs), a, 1e-12);
  double nll = 0, tokens = 0;
  for (const auto& x : xs) {
    nll -= sequence_logprob(p, x);
    tokens += static_cast<double>(x.size());
  }
  EXPECT_NEAR(a, nll / tokens, 1e-12);
}

TEST(Metrics, RandomModelHasLowExactMatch) {
  const auto p = init_model<float>(ModelConfig{}, 5);
  EXPECT_LT(exact_match(p, addition_table()), 0.25);
  EXPECT_LT(exact_match(p, gen_reverse_eval(99, 50)), 0.25);
  EXPECT_EQ(exact_match(p, addition_table()), exact_match(p, addition_table()));
  EXPECT_THROW(exact_match(p, {}), UsageError);
  Example empty_target{{2}, {}, LossKind::masked_target, Origin::eval};
  EXPECT_THROW(exact_match(p, {empty_target}), UsageError);
}

TEST(Metrics, ExactMatchIsStrictAboutEos) {
  const TokenId seven = tok::digit(7);
  const auto p = always_emits(seven);
  const TokenSequence prompt{tok::digit(3), tok::kPlus, tok::digit(4), tok::kEquals};
  // greedy output is 28 sevens cut at max_len
  const Example cut{prompt, TokenSequence(28, seven), LossKind::masked_target, Origin::eval};
  Example with_eos = cut;
  with_eos.target.back() = kEos;
  const Example short_answer{prompt, {seven, kEos}, LossKind::masked_target, Origin::eval};
  EXPECT_EQ(exact_match(p, {cut}), 1.0);
  EXPECT_EQ(exact_match(p, {with_eos}), 0.0);
  EXPECT_EQ(exact_match(p, {short_answer}), 0.0);
  EXPECT_EQ(exact_match(p, {cut, short_answer}), 0.5);
  EXPECT_EQ(exact_match(always_emits(kEos), {Example{prompt, {kEos}, LossKind::masked_target, Origin::eval}}), 1.0);
}

TEST(Metrics, MarkerStatistics) {
  const auto v = Vocabulary::desk();
  const TokenId m = tok::kSep;
  auto s = marker_stats({{m, m, kEos}}, m, v);
  EXPECT_EQ(s.mean_occurrences, 2.0);
  EXPECT_EQ(s.mean_length, 3.0);
  s = marker_stats({{2, 3, kEos}, {m, kEos}, {m, 2, m, m}}, m, v);
  EXPECT_DOUBLE_EQ(s.mean_occurrences, 4.0 / 3);
  EXPECT_DOUBLE_EQ(s.mean_length, 9.0 / 3);
  s = marker_stats({}, m, v);
  EXPECT_EQ(s.mean_occurrences, 0.0);
  EXPECT_THROW(marker_stats({{2}}, 24, v), UsageError);
}

TEST(Metrics, OldTaskComposite) {
  const auto r = run("ft", 1, std::log(23.0) / 2, 0.6, 1.0);
  EXPECT_NEAR(old_task_composite(r, 23), 0.5 * 0.6 + 0.25, 1e-15);
  EXPECT_NEAR(old_task_composite(run("x", 1, std::log(23.0), 0, 0), 23), 0.0, 1e-15);
}

TEST(Metrics, TradeoffReportSingleRun) {
  const auto rep = tradeoff_report({run("ft", 1, 2.0, 0.5, 1.0)});
  ASSERT_EQ(rep.rows.size(), 1u);
  ASSERT_EQ(rep.aggregates.size(), 2u);
  EXPECT_EQ(rep.aggregates[0].seed, "mean");
  EXPECT_EQ(rep.aggregates[1].seed, "sd");
  EXPECT_EQ(rep.aggregates[0].old_nll, 2.0);
  EXPECT_EQ(rep.aggregates[1].old_nll, 0.0);
  EXPECT_THROW(tradeoff_report({}), UsageError);
  EXPECT_THROW(rep.mean_of("cfs"), UsageError);
}

TEST(Metrics, TradeoffReportAggregatesSeeds) {
  const auto rep =
      tradeoff_report({run("cfs", 3, 1.9, 0.8, 1.0), run("cfs", 1, 1.8, 1.0, 1.0), run("cfs", 2, 2.0, 0.9, 0.97)});
  EXPECT_EQ(rep.rows[0].seed, "1");
  EXPECT_EQ(rep.rows[2].seed, "3");
  const auto& mean = rep.mean_of("cfs");
  EXPECT_NEAR(mean.old_nll, 1.9, 1e-12);
  EXPECT_NEAR(mean.old_em, 0.9, 1e-12);
  EXPECT_NEAR(mean.new_em, 0.99, 1e-12);
  EXPECT_NEAR(rep.aggregates[1].old_nll, 0.1, 1e-12);
  EXPECT_NEAR(rep.aggregates[1].new_em, std::sqrt(0.0006 / 2), 1e-12);
}

TEST(Metrics, TradeoffReportGroupsEveryMethod) {
  std::vector<MetricsReport> runs;
  const std::vector<std::string> methods{"base", "ft", "cfs", "cs", "replay", "l2", "lora", "wise-ft"};
  for (const auto& m : methods)
    for (std::uint64_t s : {2, 1}) runs.push_back(run(m, s, 2, 0.5, 0.5));
  const auto rep = tradeoff_report(runs);
  EXPECT_EQ(rep.rows.size(), 16u);
  EXPECT_EQ(rep.aggregates.size(), 16u);
  const auto csv = rep.csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "method,seed,old_nll,old_em,new_em,marker_mean,gen_len_mean,config_hash");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 33);
  EXPECT_NE(csv.find("base,1,2,0.5,0.5,0.5,10,abc\n"), std::string::npos);
  for (const auto& m : methods) EXPECT_NE(rep.summary().find(m), std::string::npos);
}

TEST(Metrics, ShortestRoundTripFormatting) {
  EXPECT_EQ(fmt_double(0.5), "0.5");
  EXPECT_EQ(fmt_double(2.0), "2");
  EXPECT_EQ(fmt_double(0.1), "0.1");
  EXPECT_EQ(fmt_double(10), "10");
  for (double x : {1.0 / 3, 3.135494215929149, 1e-300, -2.5e17, 5e-4, 123456.75}) EXPECT_EQ(std::strtod(fmt_double(x).c_str(), nullptr), x);
}

// A model trained on held-out-distribution strings scores them better than its own init.
TEST(Metrics, TrainingImprovesHeldOutLikelihood) {
  ModelConfig c;
  c.d_model = 16;
  c.n_layers = 1;
  c.d_ff = 32;
  const auto init = init_model<float>(c, 3);
  std::vector<Example> data;
  for (auto& x : gen_markov_heldout(8, 1000)) data.push_back(all_token_example(std::move(x), Origin::replay));
  TrainConfig cfg;
  cfg.steps = 150;
  cfg.peak_lr = 3e-3;
  TrainingStream s(data, cfg.steps, cfg.batch_size, 2);
  const auto trained = train(init, s, LossSpec{}, cfg).params;
  const auto heldout = gen_markov_heldout(9, 200);
  EXPECT_LT(perplexity(trained, heldout), perplexity(init, heldout));
  EXPECT_LT(perplexity(trained, heldout), std::log(23.0));
}
