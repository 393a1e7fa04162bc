#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "forgetlab/metrics.hpp"
#include "forgetlab/objectives.hpp"

using namespace forgetlab;

namespace {

ModelConfig micro(int vocab = 6, int max_len = 8, double scale = 1.0) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.d_model = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_ff = 16;
  c.max_len = max_len;
  c.init_scale = scale;
  return c;
}

Example ft(TokenSequence x, TokenSequence y) {
  return make_example(std::move(x), std::move(y), LossKind::masked_target, Origin::finetune);
}

Example aug(TokenSequence x, Origin o = Origin::cfs) { return all_token_example(std::move(x), o); }

std::vector<Example> mixed_examples() {
  return {ft({2, 3, 4}, {5, kEos}), aug({3, 3, 2, kEos}), ft({4}, {2, 2, kEos}), aug({5, 4, 3, 2, 5, 4, 3, 2})};
}

using GradFn = std::function<ad::Var<double>(ad::Tape<double>&, const Weights<double>&)>;

std::vector<ad::Array<double>> gradients(const Parameters<double>& p, const GradFn& f) {
  ad::Tape<double> tape;
  const auto w = bind_trainable(tape, p.arrays);
  tape.backward(f(tape, w));
  std::vector<ad::Array<double>> g;
  for (const auto& v : w) g.push_back(tape.gradient(v));
  return g;
}

}  // namespace

TEST(Objectives, ZeroInitLossesAreLogEmittable) {
  const auto p = init_model<double>(micro(6, 8, 0.0), 0);
  const double ln = std::log(5.0);
  EXPECT_NEAR(pretrain_loss(p, {{2, 3, kEos}, {4, 4, 4, 4, 4, 4, 4, 4}}), ln, 1e-12);
  EXPECT_NEAR(sft_loss(p, {ft({2, 3}, {4, kEos})}), ln, 1e-12);
  EXPECT_NEAR(mixed_loss(p, mixed_examples(), LossSpec{}), ln, 1e-12);
}

TEST(Objectives, SingleSequencePretrainLossIsPerTokenLogprob) {
  const auto p = init_model<double>(micro(), 3);
  const TokenSequence x{2, 5, 3, 3, kEos};
  EXPECT_NEAR(pretrain_loss(p, {x}), -sequence_logprob(p, x) / 5.0, 1e-12);
  EXPECT_THROW(pretrain_loss(p, {}), UsageError);
}

TEST(Objectives, SftWithEmptyPromptEqualsPretrainLoss) {
  const auto p = init_model<double>(micro(), 3);
  const TokenSequence y{2, 4, kEos};
  EXPECT_NEAR(sft_loss(p, {ft({}, y)}), pretrain_loss(p, {y}), 1e-12);
}

TEST(Objectives, SftScoresOnlyTheTarget) {
  const auto p = init_model<double>(micro(), 3);
  const Example ex = ft({2, 3, 4}, {5, kEos});
  EXPECT_NEAR(sft_loss(p, {ex}), -conditional_logprob(p, ex.prompt, ex.target) / 2.0, 1e-12);
  // relabelling masked prompt positions never changes the loss
  auto lb = pack_examples<double>(pointers<double>(std::vector<Example>{ex}), 8);
  auto loss_with = [&](const LossBatch<double>& b) {
    ad::Tape<double> tape(false);
    return mixed_loss(p.config, bind_constant(tape, p.arrays), b, LossSpec{}).total.value().values[0];
  };
  const double before = loss_with(lb);
  for (std::size_t r = 0; r < lb.packed.rows(); ++r)
    if (lb.finetune_mask[r] == 0) lb.packed.targets[r] = (lb.packed.targets[r] + 2) % 5;
  EXPECT_EQ(loss_with(lb), before);
}

TEST(Objectives, EmptyTargetsAreRejected) {
  EXPECT_THROW(ft({2}, {}), UsageError);
  EXPECT_THROW(make_example({2}, {3}, LossKind::all_token, Origin::cfs), UsageError);
}

TEST(Objectives, MixedLossReductions) {
  const auto p = init_model<double>(micro(), 4);
  const std::vector<Example> only_ft{ft({2, 3}, {4, kEos}), ft({5}, {5, 5, kEos})};
  EXPECT_NEAR(mixed_loss(p, only_ft, LossSpec{}), sft_loss(p, only_ft), 1e-12);
  EXPECT_NEAR(mixed_loss(p, only_ft, LossSpec{0.0, 2.5, 0.0}), sft_loss(p, only_ft), 1e-12);

  const std::vector<TokenSequence> xs{{3, 3, 2, kEos}, {4, kEos}};
  const std::vector<Example> only_aug{aug(xs[0]), aug(xs[1], Origin::replay)};
  EXPECT_NEAR(mixed_loss(p, only_aug, LossSpec{0.0, 0.4, 0.0}), 0.4 * pretrain_loss(p, xs), 1e-12);

  // ratio path is one pooled token mean
  const auto all = mixed_examples();
  double nll = 0, tokens = 0;
  for (const auto& e : all) {
    if (e.kind == LossKind::all_token) {
      nll -= sequence_logprob(p, e.target);
      tokens += static_cast<double>(e.target.size());
    } else {
      nll -= conditional_logprob(p, e.prompt, e.target);
      tokens += static_cast<double>(e.target.size());
    }
  }
  EXPECT_NEAR(mixed_loss(p, all, LossSpec{}), nll / tokens, 1e-12);
  EXPECT_THROW(LossSpec({1.0, 1.0, 0.0}).validate(), UsageError);
}

TEST(Objectives, WeightedPathGradientIsLinearInComponents) {
  const auto p = init_model<double>(micro(), 5);
  const auto all = mixed_examples();
  const auto lb = pack_examples<double>(pointers<double>(all), 8);
  const double lambda = 0.7;
  const auto g_mix = gradients(p, [&](ad::Tape<double>&, const Weights<double>& w) {
    return mixed_loss(p.config, w, lb, LossSpec{0.0, lambda, 0.0}).total;
  });
  std::vector<const Example*> fts, augs;
  for (const auto& e : all) (e.origin == Origin::finetune ? fts : augs).push_back(&e);
  const auto g_ft = gradients(p, [&](ad::Tape<double>&, const Weights<double>& w) { return sft_loss(p.config, w, fts); });
  const auto g_aug =
      gradients(p, [&](ad::Tape<double>&, const Weights<double>& w) { return sft_loss(p.config, w, augs); });
  for (std::size_t i = 0; i < g_mix.size(); ++i)
    for (std::size_t j = 0; j < g_mix[i].size(); ++j)
      EXPECT_NEAR(g_mix[i].values[j], g_ft[i].values[j] + lambda * g_aug[i].values[j], 1e-12);
}

TEST(Objectives, L2PenaltyValueAndGradient) {
  const auto ref = init_model<double>(micro(), 5);
  auto p = init_model<double>(micro(), 6);
  EXPECT_EQ(l2_penalty(ref, ref, 0.1), 0.0);
  double ss = 0;
  for (std::size_t i = 0; i < p.size(); ++i)
    for (std::size_t j = 0; j < p.arrays[i].size(); ++j) {
      const double d = p.arrays[i].values[j] - ref.arrays[i].values[j];
      ss += d * d;
    }
  EXPECT_NEAR(l2_penalty(p, ref, 0.01), 0.01 * ss, 1e-12);
  const auto g = gradients(p, [&](ad::Tape<double>&, const Weights<double>& w) { return l2_penalty(w, ref.arrays, 0.01); });
  for (std::size_t i = 0; i < g.size(); ++i)
    for (std::size_t j = 0; j < g[i].size(); ++j)
      EXPECT_NEAR(g[i].values[j], 2 * 0.01 * (p.arrays[i].values[j] - ref.arrays[i].values[j]), 1e-15);
  auto bad = ref;
  bad.arrays.pop_back();
  EXPECT_THROW(l2_penalty(p, bad, 0.1), UsageError);
}

TEST(Objectives, GradCheckSftMixedAndL2) {
  const auto p = init_model<double>(micro(5, 6), 21);
  const auto ref = init_model<double>(micro(5, 6), 22);
  const std::vector<Example> batch{ft({2, 3}, {4, kEos}), aug({3, 4, kEos}), ft({4, 4}, {2, 3, 2, 3})};
  const auto lb = pack_examples<double>(pointers<double>(batch), 6);
  for (const LossSpec spec : {LossSpec{}, LossSpec{0.0, 0.5, 0.0}, LossSpec{1.0, 0.0, 0.05}}) {
    auto params = p.arrays;
    auto loss = [&](ad::Tape<double>&, std::span<const ad::Var<double>> vars) {
      const Weights<double> w(vars.begin(), vars.end());
      auto total = mixed_loss(p.config, w, lb, spec).total;
      if (spec.l2_coeff > 0) total = ad::add(total, l2_penalty(w, ref.arrays, spec.l2_coeff));
      return total;
    };
    EXPECT_LT(ad::grad_check(loss, params, 1e-5), 1e-4);
  }
}

TEST(Objectives, LearningRateSchedule) {
  const double peak = 1e-3;
  // 3% of 1000 steps
  EXPECT_DOUBLE_EQ(lr_at(30, 1000, peak, 0.03), peak);
  EXPECT_DOUBLE_EQ(lr_at(15, 1000, peak, 0.03), peak / 2);
  EXPECT_DOUBLE_EQ(lr_at(0, 1000, peak, 0.03), 0.0);
  EXPECT_NEAR(lr_at(1000, 1000, peak, 0.03), 0.0, 1e-20);
  EXPECT_NEAR(lr_at(515, 1000, peak, 0.03), peak / 2, 1e-15);
  EXPECT_NEAR(lr_at(40, 100, peak, 0.2), peak * 0.5 * (1 + std::cos(std::numbers::pi * 0.25)), 1e-15);
  EXPECT_THROW(lr_at(1001, 1000, peak, 0.03), UsageError);
  EXPECT_DOUBLE_EQ(lr_at(5, 10, peak, 0.0), peak * 0.5 * (1 + std::cos(std::numbers::pi * 0.5)));
}

TEST(Objectives, AdamWFirstStepIsSignedLearningRate) {
  TrainConfig cfg;
  cfg.weight_decay = 0.01;
  std::vector<ad::Array<double>> params{ad::Array<double>({3}, {1.0, -2.0, 0.5})};
  const std::vector<ad::Array<double>> grads{ad::Array<double>({3}, {0.3, -4.0, 1e-3})};
  AdamW<double> opt(params, cfg);
  opt.step(params, grads, 0.1);
  const double expect[] = {1.0 - 0.1 * (0.3 / (0.3 + 1e-8) + 0.01 * 1.0),
                           -2.0 - 0.1 * (-4.0 / (4.0 + 1e-8) + 0.01 * -2.0),
                           0.5 - 0.1 * (1e-3 / (1e-3 + 1e-8) + 0.01 * 0.5)};
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(params[0].values[i], expect[i], 1e-12);
}

TEST(Objectives, ZeroStepsReturnsInputUnchanged) {
  const auto p = init_model<float>(micro(), 1);
  std::vector<Example> data{ft({2}, {3, kEos})};
  TrainConfig cfg;
  cfg.steps = 0;
  cfg.batch_size = 4;
  TrainingStream s(data, 0, 4, 1);
  const auto r = train(p, s, LossSpec{}, cfg);
  EXPECT_EQ(r.params, p);
  EXPECT_TRUE(r.history.empty());
}

TEST(Objectives, TrainingIsBitDeterministicAndStepParityHolds) {
  const auto p = init_model<float>(micro(), 1);
  std::vector<Example> small{ft({2}, {3, kEos}), ft({4}, {5, kEos})};
  std::vector<Example> large = small;
  for (int i = 0; i < 7; ++i) large.push_back(aug({2, 3, 4, kEos}));
  TrainConfig cfg;
  cfg.steps = 25;
  cfg.batch_size = 4;
  cfg.peak_lr = 1e-2;
  auto run = [&](const std::vector<Example>& d) {
    TrainingStream s(d, cfg.steps, cfg.batch_size, 9);
    return train(p, s, LossSpec{}, cfg);
  };
  const auto a = run(small), b = run(small), c = run(large);
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(a.history.size(), 25u);
  EXPECT_EQ(c.history.size(), 25u);
  for (std::size_t k = 0; k < 25; ++k) {
    EXPECT_EQ(a.history[k].step, k + 1);
    EXPECT_DOUBLE_EQ(a.history[k].lr, lr_at(k + 1, 25, 1e-2, 0.03));
  }
  TrainingStream wrong(small, 10, 4, 9);
  EXPECT_THROW(train(p, wrong, LossSpec{}, cfg), UsageError);
}

TEST(Objectives, DivergenceGuardAborts) {
  const auto p = init_model<float>(micro(), 1);
  std::vector<Example> data{ft({2, 3}, {4, kEos})};
  TrainConfig cfg;
  cfg.steps = 50;
  cfg.batch_size = 1;
  cfg.peak_lr = 1e36;
  cfg.warmup_frac = 0;
  TrainingStream s(data, cfg.steps, 1, 1);
  EXPECT_THROW(train(p, s, LossSpec{}, cfg), NumericalError);
}

// From random init, the addition table alone is learnable in 500 steps.
TEST(Objectives, AdditionAloneIsLearnedAndLossDecreases) {
  const auto p = init_model<float>(ModelConfig{}, 3);
  TrainConfig cfg;
  cfg.steps = 500;
  cfg.peak_lr = 1e-3;
  auto data = gen_finetune_dataset(1, 2000);
  TrainingStream s(data, cfg.steps, cfg.batch_size, 4);
  const auto r = train(p, s, LossSpec{}, cfg);
  EXPECT_LT(mean_loss(r.history, 450, 500), mean_loss(r.history, 0, 50));
  EXPECT_GT(exact_match(r.params, addition_table()), 0.9);
  // the trained model answers "3 + 4 =" with a digit
  const auto ys = sample_conditional(r.params, {tok::digit(3), tok::kPlus, tok::digit(4), tok::kEquals},
                                     contextual_defaults(), 200);
  std::size_t digit_first = 0;
  for (const auto& y : ys) digit_first += y[0] >= tok::digit(0) && y[0] <= tok::digit(9);
  EXPECT_GT(static_cast<double>(digit_first) / 200, 0.9);
}
