#pragma once

// End-to-end desk pipeline: base pretraining, every mitigation method, evaluation,
// KL checks and the comparison grid with its run tree.

#include <algorithm>
#include <atomic>
#include <exception>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "forgetlab/divergence.hpp"
#include "forgetlab/errors.hpp"
#include "forgetlab/io.hpp"
#include "forgetlab/metrics.hpp"
#include "forgetlab/model.hpp"
#include "forgetlab/objectives.hpp"
#include "forgetlab/sampling.hpp"
#include "forgetlab/tasks.hpp"
#include "forgetlab/weightspace.hpp"

namespace forgetlab {

inline constexpr int kExperimentFormatVersion = 1;
// Emittable desk tokens (everything but BOS).
inline constexpr std::size_t kDeskEmittable = 23;

inline const std::vector<std::string>& known_methods() {
  static const std::vector<std::string> m{"base", "ft", "cfs", "cs", "replay", "l2", "lora", "wise-ft"};
  return m;
}

struct PretrainSettings {
  std::size_t steps = 3000;
  double lr = 1e-3;
  std::size_t batch_size = 32;
  std::size_t corpus_size = 50000;
  std::uint64_t seed = 1;
};

struct EvalSettings {
  std::size_t heldout = 500;
  std::size_t reverse = 200;
  std::size_t generations = 200;
  std::uint64_t seed = 99;
};

struct KlSettings {
  int max_len = 4;
  std::size_t samples = 2000;
  std::uint64_t seed = 7;
};

struct ExperimentConfig {
  ModelConfig model;
  PretrainSettings pretrain;
  std::size_t finetune_size = 2000;
  std::uint64_t finetune_seed = 1;
  TrainConfig train = [] {
    TrainConfig t;
    t.peak_lr = 1e-3;
    return t;
  }();

  std::string method = "ft";
  double percentage = 100.0;  // augmentation share for cfs / cs / replay
  double cfs_temperature = 1.0;
  double cfs_top_p = 0.95;
  double cs_temperature = 0.6;
  double cs_top_p = 0.95;
  double l2_coeff = 1e-3;
  std::vector<double> l2_grid{0.0, 1e-3, 1e-2, 1e-1};
  int lora_rank = 4;
  double lora_alpha = 0.0;  // 0: equal to the rank
  double wise_alpha = 0.5;
  std::vector<double> wise_grid{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};

  std::vector<std::string> methods = known_methods();
  std::vector<std::uint64_t> seeds{1, 2, 3};
  EvalSettings eval;
  KlSettings kl;
  std::string output_dir = "runs";
  int jobs = 1;

  void validate() const {
    model.validate();
    require(model.vocab_size == static_cast<int>(Vocabulary::desk().size()),
            "experiment: the desk tasks need vocab_size 24");
    require(model.max_len >= kDeskMaxLen, "experiment: the desk tasks need max_len >= 32");
    require(std::find(known_methods().begin(), known_methods().end(), method) != known_methods().end(),
            "experiment: unknown method '" + method + "'");
    for (const auto& m : methods)
      require(std::find(known_methods().begin(), known_methods().end(), m) != known_methods().end(),
              "experiment: unknown method '" + m + "' in methods");
    require(!methods.empty(), "experiment: methods list is empty");
    require(std::set<std::string>(methods.begin(), methods.end()).size() == methods.size(),
            "experiment: methods must be distinct");
    require(!seeds.empty(), "experiment: seeds list is empty");
    require(std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() == seeds.size(),
            "experiment: seeds must be distinct");
    require(percentage >= 0, "experiment: percentage must be >= 0");
    require(l2_coeff >= 0, "experiment: l2_coeff must be >= 0");
    for (double c : l2_grid) require(c >= 0, "experiment: l2 grid values must be >= 0");
    require(lora_rank >= 1, "experiment: lora rank must be >= 1");
    require(wise_alpha >= 0 && wise_alpha <= 1, "experiment: wise-ft alpha must lie in [0, 1]");
    for (double a : wise_grid) require(a >= 0 && a <= 1, "experiment: wise-ft grid values must lie in [0, 1]");
    require(finetune_size >= 1 && pretrain.corpus_size >= 1, "experiment: dataset sizes must be >= 1");
    require(eval.heldout >= 1 && eval.reverse >= 1, "experiment: evaluation sets must be nonempty");
    require(jobs >= 1, "experiment: jobs must be >= 1");
    SamplerConfig{cfs_temperature, cfs_top_p, 0, 0}.validate();
    SamplerConfig{cs_temperature, cs_top_p, 0, 0}.validate();
    train.validate();
  }
};

// ---- config file --------------------------------------------------------------

namespace detail {

template <class F>
void each_key(const Json& j, const std::string& where, F&& f) {
  if (!j.is_object()) throw UsageError("config: '" + where + "' must be an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!f(it.key(), *it)) throw UsageError("config: unknown key '" + where + "." + it.key() + "'");
}

}  // namespace detail

inline ExperimentConfig experiment_config_from_json(const Json& j, ExperimentConfig c = {}) {
  try {
    detail::each_key(j, "", [&](const std::string& k, const Json& v) {
      if (k == "format_version") {
        if (v.get<int>() != kExperimentFormatVersion)
          throw IncompatibleError("config: unsupported format_version " + v.dump());
      } else if (k == "model") {
        c.model = model_config_from_json(v, c.model);
      } else if (k == "pretrain") {
        detail::each_key(v, k, [&](const std::string& kk, const Json& vv) {
          if (kk == "steps") c.pretrain.steps = vv.get<std::size_t>();
          else if (kk == "lr") c.pretrain.lr = vv.get<double>();
          else if (kk == "batch_size") c.pretrain.batch_size = vv.get<std::size_t>();
          else if (kk == "corpus_size") c.pretrain.corpus_size = vv.get<std::size_t>();
          else if (kk == "seed") c.pretrain.seed = vv.get<std::uint64_t>();
          else return false;
          return true;
        });
      } else if (k == "finetune") {
        detail::each_key(v, k, [&](const std::string& kk, const Json& vv) {
          if (kk == "size") c.finetune_size = vv.get<std::size_t>();
          else if (kk == "seed") c.finetune_seed = vv.get<std::uint64_t>();
          else return false;
          return true;
        });
      } else if (k == "train") {
        detail::each_key(v, k, [&](const std::string& kk, const Json& vv) {
          if (kk == "steps") c.train.steps = vv.get<std::size_t>();
          else if (kk == "batch_size") c.train.batch_size = vv.get<std::size_t>();
          else if (kk == "lr") c.train.peak_lr = vv.get<double>();
          else if (kk == "warmup_frac") c.train.warmup_frac = vv.get<double>();
          else if (kk == "clip_norm") c.train.clip_norm = vv.get<double>();
          else if (kk == "weight_decay") c.train.weight_decay = vv.get<double>();
          else if (kk == "beta1") c.train.beta1 = vv.get<double>();
          else if (kk == "beta2") c.train.beta2 = vv.get<double>();
          else if (kk == "adam_eps") c.train.adam_eps = vv.get<double>();
          else return false;
          return true;
        });
      } else if (k == "method") {
        c.method = v.get<std::string>();
      } else if (k == "percentage") {
        c.percentage = v.get<double>();
      } else if (k == "cfs") {
        detail::each_key(v, k, [&](const std::string& kk, const Json& vv) {
          if (kk == "temperature") c.cfs_temperature = vv.get<double>();
          else if (kk == "top_p") c.cfs_top_p = vv.get<double>();
          else return false;
          return true;
        });
      } else if (k == "cs") {
        detail::each_key(v, k, [&](const std::string& kk, const Json& vv) {
          if (kk == "temperature") c.cs_temperature = vv.get<double>();
          else if (kk == "top_p") c.cs_top_p = vv.get<double>();
          else return false;
          return true;
        });
      } else if (k == "l2") {
        detail::each_key(v, k, [&](const std::string& kk, const Json& vv) {
          if (kk == "coeff") c.l2_coeff = vv.get<double>();
          else if (kk == "grid") c.l2_grid = vv.get<std::vector<double>>();
          else return false;
          return true;
        });
      } else if (k == "lora") {
        detail::each_key(v, k, [&](const std::string& kk, const Json& vv) {
          if (kk == "rank") c.lora_rank = vv.get<int>();
          else if (kk == "alpha") c.lora_alpha = vv.get<double>();
          else return false;
          return true;
        });
      } else if (k == "wise_ft") {
        detail::each_key(v, k, [&](const std::string& kk, const Json& vv) {
          if (kk == "alpha") c.wise_alpha = vv.get<double>();
          else if (kk == "grid") c.wise_grid = vv.get<std::vector<double>>();
          else return false;
          return true;
        });
      } else if (k == "methods") {
        c.methods = v.get<std::vector<std::string>>();
      } else if (k == "seeds") {
        c.seeds = v.get<std::vector<std::uint64_t>>();
      } else if (k == "eval") {
        detail::each_key(v, k, [&](const std::string& kk, const Json& vv) {
          if (kk == "heldout") c.eval.heldout = vv.get<std::size_t>();
          else if (kk == "reverse") c.eval.reverse = vv.get<std::size_t>();
          else if (kk == "generations") c.eval.generations = vv.get<std::size_t>();
          else if (kk == "seed") c.eval.seed = vv.get<std::uint64_t>();
          else return false;
          return true;
        });
      } else if (k == "kl_check") {
        detail::each_key(v, k, [&](const std::string& kk, const Json& vv) {
          if (kk == "max_len") c.kl.max_len = vv.get<int>();
          else if (kk == "samples") c.kl.samples = vv.get<std::size_t>();
          else if (kk == "seed") c.kl.seed = vv.get<std::uint64_t>();
          else return false;
          return true;
        });
      } else if (k == "output_dir") {
        c.output_dir = v.get<std::string>();
      } else if (k == "jobs") {
        c.jobs = v.get<int>();
      } else {
        return false;
      }
      return true;
    });
  } catch (const Json::exception& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
  return c;
}

inline Json to_json(const ExperimentConfig& c) {
  Json j;
  j["format_version"] = kExperimentFormatVersion;
  j["model"] = to_json(c.model);
  j["pretrain"] = Json{{"steps", c.pretrain.steps},
                       {"lr", c.pretrain.lr},
                       {"batch_size", c.pretrain.batch_size},
                       {"corpus_size", c.pretrain.corpus_size},
                       {"seed", c.pretrain.seed}};
  j["finetune"] = Json{{"size", c.finetune_size}, {"seed", c.finetune_seed}};
  j["train"] = Json{{"steps", c.train.steps},         {"batch_size", c.train.batch_size},
                    {"lr", c.train.peak_lr},          {"warmup_frac", c.train.warmup_frac},
                    {"clip_norm", c.train.clip_norm}, {"weight_decay", c.train.weight_decay},
                    {"beta1", c.train.beta1},         {"beta2", c.train.beta2},
                    {"adam_eps", c.train.adam_eps}};
  j["method"] = c.method;
  j["percentage"] = c.percentage;
  j["cfs"] = Json{{"temperature", c.cfs_temperature}, {"top_p", c.cfs_top_p}};
  j["cs"] = Json{{"temperature", c.cs_temperature}, {"top_p", c.cs_top_p}};
  j["l2"] = Json{{"coeff", c.l2_coeff}, {"grid", c.l2_grid}};
  j["lora"] = Json{{"rank", c.lora_rank}, {"alpha", c.lora_alpha}};
  j["wise_ft"] = Json{{"alpha", c.wise_alpha}, {"grid", c.wise_grid}};
  j["methods"] = c.methods;
  j["seeds"] = c.seeds;
  j["eval"] = Json{{"heldout", c.eval.heldout},
                   {"reverse", c.eval.reverse},
                   {"generations", c.eval.generations},
                   {"seed", c.eval.seed}};
  j["kl_check"] = Json{{"max_len", c.kl.max_len}, {"samples", c.kl.samples}, {"seed", c.kl.seed}};
  j["output_dir"] = c.output_dir;
  j["jobs"] = c.jobs;
  return j;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  return experiment_config_from_json(parse_json(read_file(path), "config " + path.string()));
}

// FNV-1a over the canonical JSON of everything that shapes the run (not where it is written).
inline std::string experiment_hash(const ExperimentConfig& c) {
  Json j = to_json(c);
  j.erase("output_dir");
  j.erase("jobs");
  return hex64(fnv1a(j.dump()));
}

// ---- pipeline pieces ----------------------------------------------------------

struct PretrainResult {
  Parameters<float> params;
  std::vector<StepRecord> history;
};

inline PretrainResult run_pretrain(const ExperimentConfig& cfg) {
  cfg.model.validate();
  std::vector<Example> corpus;
  corpus.reserve(cfg.pretrain.corpus_size);
  for (auto& x : gen_pretrain_corpus(cfg.pretrain.seed, cfg.pretrain.corpus_size, cfg.model.max_len))
    corpus.push_back(all_token_example(std::move(x), Origin::replay));
  TrainConfig tc = cfg.train;
  tc.steps = cfg.pretrain.steps;
  tc.batch_size = cfg.pretrain.batch_size;
  tc.peak_lr = cfg.pretrain.lr;
  const auto init = init_model<float>(cfg.model, cfg.model.init_seed);
  if (tc.steps == 0) return {init, {}};
  TrainingStream stream(std::move(corpus), tc.steps, tc.batch_size, derive_seed(cfg.pretrain.seed, "pretrain-shuffle"));
  auto r = train(init, stream, LossSpec{}, tc);
  return {std::move(r.params), std::move(r.history)};
}

inline std::vector<Example> finetune_set(const ExperimentConfig& cfg) {
  return gen_finetune_dataset(cfg.finetune_seed, cfg.finetune_size);
}

struct MethodResult {
  std::string method;
  std::uint64_t seed = 0;
  Parameters<float> params;  // dense weights used for evaluation (LoRA merged)
  std::optional<LoraAdapter<float>> adapter;
  std::vector<StepRecord> history;
};

inline SamplerConfig cfs_sampler(const ExperimentConfig& cfg, std::uint64_t seed) {
  return {cfg.cfs_temperature, cfg.cfs_top_p, 0, derive_seed(seed, "cfs")};
}

inline SamplerConfig cs_sampler(const ExperimentConfig& cfg, std::uint64_t seed) {
  return {cfg.cs_temperature, cfg.cs_top_p, 0, derive_seed(seed, "cs")};
}

// Augmentation examples for a method (empty for methods without one).
inline std::vector<Example> augmentation_for(const std::string& method, const Parameters<float>& base,
                                             const std::vector<Example>& finetune, const ExperimentConfig& cfg,
                                             std::uint64_t seed) {
  MixSpec ms;
  ms.percentage = cfg.percentage;
  const std::size_t count = ms.augmentation_count(finetune.size());
  if (method == "cfs") return build_cfs_dataset(base, count, cfs_sampler(cfg, seed));
  if (method == "cs") {
    if (count > finetune.size())
      throw UsageError("cs: contextual data has one example per fine-tuning prompt; percentage must be <= 100");
    auto cs = build_cs_dataset(base, finetune, cs_sampler(cfg, seed));
    cs.resize(count);
    return cs;
  }
  if (method == "replay") return build_replay_mix(seed, count, cfg.model.max_len);
  return {};
}

inline TrainingStream training_stream(const std::string& method, const std::vector<Example>& finetune,
                                      const std::vector<Example>& aug, const ExperimentConfig& cfg,
                                      std::uint64_t seed) {
  MixSpec ms;
  ms.percentage = (method == "cfs" || method == "cs" || method == "replay") ? cfg.percentage : 0.0;
  ms.step_budget = cfg.train.steps;
  ms.batch_size = cfg.train.batch_size;
  ms.seed = seed;
  return mix_datasets(finetune, aug, ms);
}

// One training pipeline from θ*. Wise-FT needs the FT weights and goes through wise_ft.
inline MethodResult run_method(const Parameters<float>& base, const std::string& method, const ExperimentConfig& cfg,
                               std::uint64_t seed, const std::vector<Example>* finetune_override = nullptr) {
  MethodResult out{method, seed, base, std::nullopt, {}};
  if (method == "base") return out;
  if (method == "wise-ft") throw UsageError("wise-ft is a post-hoc transform of two checkpoints");
  if (std::find(known_methods().begin(), known_methods().end(), method) == known_methods().end())
    throw UsageError("unknown method '" + method + "'");
  const auto finetune = finetune_override ? *finetune_override : finetune_set(cfg);
  if (finetune.empty()) throw UsageError("fine-tuning set is empty");
  const auto aug = augmentation_for(method, base, finetune, cfg, seed);
  auto stream = training_stream(method, finetune, aug, cfg, seed);
  if (method == "lora") {
    const auto init = lora_wrap(base, cfg.lora_rank, cfg.lora_alpha, derive_seed(seed, "lora"));
    auto r = train_lora(base, init, stream, LossSpec{}, cfg.train);
    out.params = lora_merge(base, r.adapter);
    out.adapter = std::move(r.adapter);
    out.history = std::move(r.history);
    return out;
  }
  LossSpec spec;
  if (method == "l2") spec.l2_coeff = cfg.l2_coeff;
  auto r = train(base, stream, spec, cfg.train, &base);
  out.params = std::move(r.params);
  out.history = std::move(r.history);
  return out;
}

// Fixed evaluation sets shared by every run of a config.
struct EvalSets {
  std::vector<TokenSequence> heldout;
  std::vector<Example> reverse;
  std::vector<Example> addition;
};

inline EvalSets eval_sets(const EvalSettings& e, int max_len = kDeskMaxLen) {
  return {gen_markov_heldout(e.seed, e.heldout, max_len), gen_reverse_eval(e.seed, e.reverse), addition_table()};
}

inline MetricsReport evaluate(const Parameters<float>& params, const EvalSets& sets, const EvalSettings& e,
                              const std::string& method, std::uint64_t seed) {
  MetricsReport r;
  r.method = method;
  r.seed = seed;
  r.old_nll = perplexity(params, sets.heldout);
  r.old_em = exact_match(params, sets.reverse);
  r.new_em = exact_match(params, sets.addition);
  SamplerConfig sc = context_free_defaults();
  sc.seed = derive_seed(e.seed, "marker-generations");
  const auto gens = e.generations > 0 ? sample_context_free(params, sc, e.generations) : std::vector<TokenSequence>{};
  const auto ms = marker_stats(gens, tok::kSep, Vocabulary::desk());
  r.marker_mean = ms.mean_occurrences;
  r.gen_len_mean = ms.mean_length;
  r.config_hash = config_hash(params.config, Vocabulary::desk());
  return r;
}

// Exact KL(a||b) on the truncated space plus, when n > 0, a Monte-Carlo estimate from
// exact samples of a (T = 1, no truncation).
inline KLReport kl_check(const Parameters<float>& a, const Parameters<float>& b, int max_len, std::size_t n,
                         std::uint64_t seed) {
  if (a.config.vocab_size != b.config.vocab_size) throw IncompatibleError("kl-check: vocabularies differ");
  const auto pa = cast<double>(a);
  const auto pb = cast<double>(b);
  const StringSpace space = space_for(pa, max_len);
  space.validate();
  KLReport r;
  r.exact_kl = exact_kl(pa, pb, space);
  if (n == 0) return r;
  const auto samples = sample_context_free(pa, SamplerConfig{1.0, 1.0, max_len, seed}, n);
  const auto mc = mc_kl(pa, pb, samples, max_len);
  r.mc_estimate = mc.mc_estimate;
  r.std_error = mc.std_error;
  r.n_samples = mc.n_samples;
  return r;
}

// ---- run tree -----------------------------------------------------------------

inline void write_run(const std::filesystem::path& dir, const ExperimentConfig& cfg, const Checkpoint& ck,
                      const std::vector<StepRecord>& history, const std::vector<MetricsReport>& metrics,
                      const std::optional<Checkpoint>& adapter = std::nullopt) {
  Json snapshot = to_json(cfg);
  snapshot.erase("output_dir");
  snapshot.erase("jobs");
  write_file(dir / "config.json", snapshot.dump(2) + "\n");
  save_checkpoint(dir / "checkpoint.json", ck);
  if (adapter) save_checkpoint(dir / "adapter.json", *adapter);
  write_file(dir / "history.csv", history_csv(history));
  write_file(dir / "metrics.csv", metrics_csv(metrics));
}

// Runs jobs [0, n) on up to `workers` threads; every job writes only its own slot.
inline void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& job) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        job(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const auto count = std::min<std::size_t>(static_cast<std::size_t>(std::max(workers, 1)), n);
  std::vector<std::thread> threads;
  for (std::size_t t = 1; t < count; ++t) threads.emplace_back(worker);
  worker();
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

struct TrendPoint {
  std::string kind;  // l2 | wise-ft
  std::uint64_t seed = 0;
  double x = 0;
  double distance = 0;  // ‖θ - θ*‖₂
  MetricsReport metrics;
};

struct KlRow {
  std::uint64_t seed = 0;
  std::string method;
  KLReport report;
};

struct GridResult {
  MetricsReport base;
  std::vector<MetricsReport> runs;
  TradeoffReport report;
  std::vector<TrendPoint> trends;
  std::vector<KlRow> kl;
  std::vector<std::string> failures;
};

inline std::string trends_csv(const std::vector<TrendPoint>& t) {
  std::string out = "kind,seed,x,distance,old_nll,old_em,new_em,old_composite\n";
  for (const auto& p : t)
    out += p.kind + "," + std::to_string(p.seed) + "," + fmt_double(p.x) + "," + fmt_double(p.distance) + "," +
           fmt_double(p.metrics.old_nll) + "," + fmt_double(p.metrics.old_em) + "," + fmt_double(p.metrics.new_em) +
           "," + fmt_double(old_task_composite(p.metrics, kDeskEmittable)) + "\n";
  return out;
}

inline std::string plot_csv(const std::vector<MetricsReport>& runs) {
  std::string out = "method,x,y,seed\n";
  for (const auto& r : runs)
    out += r.method + "," + fmt_double(r.new_em) + "," + fmt_double(old_task_composite(r, kDeskEmittable)) + "," +
           std::to_string(r.seed) + "\n";
  return out;
}

inline std::string kl_csv(const std::vector<KlRow>& rows) {
  std::string out = "seed,method,exact_kl,mc_estimate,std_error,n_samples\n";
  for (const auto& r : rows)
    out += std::to_string(r.seed) + "," + r.method + "," + fmt_double(*r.report.exact_kl) + "," +
           (r.report.n_samples ? fmt_double(r.report.mc_estimate) : "") + "," +
           (r.report.n_samples ? fmt_double(r.report.std_error) : "") + "," + std::to_string(r.report.n_samples) +
           "\n";
  return out;
}

inline std::string seed_dir(const std::string& name, std::uint64_t seed) {
  return name + "-seed" + std::to_string(seed);
}

inline std::string grid_value_name(double x) {
  std::string s = fmt_double(x);
  for (char& c : s)
    if (c == '+') c = 'p';
  return s;
}

// Base pretraining once, then every method x seed, the l2 and wise-ft sweeps, and the KL
// check of CFS and FT against θ*. A failed run is recorded and the rest still complete.
inline GridResult run_grid(const ExperimentConfig& cfg, const std::function<void(const std::string&)>& log = {}) {
  cfg.validate();
  namespace fs = std::filesystem;
  const fs::path root = cfg.output_dir;
  const Vocabulary vocab = Vocabulary::desk();
  auto say = [&](const std::string& s) {
    if (log) log(s);
  };
  std::mutex say_mu;
  auto say_locked = [&](const std::string& s) {
    std::lock_guard<std::mutex> lock(say_mu);
    say(s);
  };

  GridResult out;
  const auto sets = eval_sets(cfg.eval, cfg.model.max_len);

  say("pretraining base model");
  const auto base = run_pretrain(cfg);
  const Checkpoint base_ck = model_checkpoint(base.params, vocab, "pretrain");
  const std::string base_hash = checkpoint_hash(base_ck);
  out.base = evaluate(base.params, sets, cfg.eval, "base", 0);
  write_run(root / "base", cfg, base_ck, base.history, {out.base});

  const bool want_wise = std::find(cfg.methods.begin(), cfg.methods.end(), "wise-ft") != cfg.methods.end();
  const bool want_l2 = std::find(cfg.methods.begin(), cfg.methods.end(), "l2") != cfg.methods.end();
  const bool want_kl = std::find(cfg.methods.begin(), cfg.methods.end(), "cfs") != cfg.methods.end() &&
                       std::find(cfg.methods.begin(), cfg.methods.end(), "ft") != cfg.methods.end();

  // Training jobs: the listed methods (FT also whenever Wise-FT needs it) plus the extra l2 sweep points.
  struct Job {
    std::string method;
    std::uint64_t seed;
    std::optional<double> l2;  // sweep point
  };
  std::vector<Job> jobs;
  for (std::uint64_t seed : cfg.seeds) {
    for (const auto& m : cfg.methods)
      if (m != "base" && m != "wise-ft") jobs.push_back({m, seed, std::nullopt});
    if (want_wise && std::find(cfg.methods.begin(), cfg.methods.end(), "ft") == cfg.methods.end())
      jobs.push_back({"ft", seed, std::nullopt});
    if (want_l2)
      for (double c : cfg.l2_grid)
        if (c != 0 && c != cfg.l2_coeff) jobs.push_back({"l2", seed, c});
  }
  std::vector<std::optional<MethodResult>> trained(jobs.size());
  std::vector<std::optional<MetricsReport>> job_metrics(jobs.size());
  std::vector<std::string> job_errors(jobs.size());
  const auto finetune = finetune_set(cfg);
  parallel_for(jobs.size(), cfg.jobs, [&](std::size_t i) {
    const Job& job = jobs[i];
    ExperimentConfig rc = cfg;
    rc.method = job.method;
    if (job.l2) rc.l2_coeff = *job.l2;
    const std::string name = job.l2 ? "l2-" + grid_value_name(*job.l2) : job.method;
    const fs::path dir = root / (job.l2 ? "sweeps" : "runs") / seed_dir(name, job.seed);
    say_locked("training " + seed_dir(name, job.seed));
    try {
      auto r = run_method(base.params, job.method, rc, job.seed, &finetune);
      const auto m = evaluate(r.params, sets, cfg.eval, job.method, job.seed);
      std::optional<Checkpoint> adapter;
      if (r.adapter) adapter = adapter_checkpoint(*r.adapter, vocab, "train --method lora", base_hash);
      write_run(dir, rc, model_checkpoint(r.params, vocab, "train --method " + job.method, base_hash), r.history, {m},
                adapter);
      trained[i] = std::move(r);
      job_metrics[i] = m;
    } catch (const std::exception& e) {
      job_errors[i] = seed_dir(name, job.seed) + ": " + e.what();
      write_file(dir / "error.txt", std::string(e.what()) + "\n");
    }
  });
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    if (!job_errors[i].empty()) out.failures.push_back(job_errors[i]);
    if (job_metrics[i] && !jobs[i].l2) out.runs.push_back(*job_metrics[i]);
  }

  auto slot = [&](const std::string& method, std::uint64_t seed, std::optional<double> l2) -> std::optional<std::size_t> {
    for (std::size_t i = 0; i < jobs.size(); ++i)
      if (jobs[i].method == method && jobs[i].seed == seed && jobs[i].l2 == l2 && trained[i]) return i;
    return std::nullopt;
  };
  auto find = [&](const std::string& method, std::uint64_t seed, std::optional<double> l2) -> const MethodResult* {
    const auto i = slot(method, seed, l2);
    return i ? &*trained[*i] : nullptr;
  };

  // Runs of methods outside cfg.methods (FT trained only for Wise-FT) stay out of the report.
  std::erase_if(out.runs, [&](const MetricsReport& r) {
    return std::find(cfg.methods.begin(), cfg.methods.end(), r.method) == cfg.methods.end();
  });
  if (std::find(cfg.methods.begin(), cfg.methods.end(), "base") != cfg.methods.end())
    for (std::uint64_t seed : cfg.seeds) {
      auto m = out.base;
      m.seed = seed;
      out.runs.push_back(m);
    }

  // Post-hoc jobs: Wise-FT per seed and alpha, and the l2 sweep distances.
  struct PostJob {
    std::uint64_t seed;
    double alpha;
  };
  std::vector<PostJob> post;
  if (want_wise)
    for (std::uint64_t seed : cfg.seeds) {
      std::vector<double> alphas = cfg.wise_grid;
      if (std::find(alphas.begin(), alphas.end(), cfg.wise_alpha) == alphas.end()) alphas.push_back(cfg.wise_alpha);
      for (double a : alphas) post.push_back({seed, a});
    }
  std::vector<std::optional<TrendPoint>> wise_points(post.size());
  parallel_for(post.size(), cfg.jobs, [&](std::size_t i) {
    const auto* ft = find("ft", post[i].seed, std::nullopt);
    if (!ft) return;
    const auto w = wise_ft(base.params, ft->params, post[i].alpha);
    TrendPoint p{"wise-ft", post[i].seed, post[i].alpha, parameter_distance(w, base.params),
                 evaluate(w, sets, cfg.eval, "wise-ft", post[i].seed)};
    if (post[i].alpha == cfg.wise_alpha) {
      ExperimentConfig rc = cfg;
      rc.method = "wise-ft";
      write_run(root / "runs" / seed_dir("wise-ft", post[i].seed), rc,
                model_checkpoint(w, vocab, "train --method wise-ft",
                                 checkpoint_hash(model_checkpoint(ft->params, vocab, "train --method ft", base_hash))),
                {}, {p.metrics});
    }
    wise_points[i] = std::move(p);
  });
  for (std::size_t i = 0; i < post.size(); ++i) {
    if (!wise_points[i]) {
      out.failures.push_back(seed_dir("wise-ft", post[i].seed) + ": fine-tuned weights unavailable");
      continue;
    }
    if (wise_points[i]->x == cfg.wise_alpha) out.runs.push_back(wise_points[i]->metrics);
    if (std::find(cfg.wise_grid.begin(), cfg.wise_grid.end(), wise_points[i]->x) != cfg.wise_grid.end())
      out.trends.push_back(*wise_points[i]);
  }
  if (want_l2)
    for (std::uint64_t seed : cfg.seeds)
      for (double c : cfg.l2_grid) {
        const auto i = c == 0                ? slot("ft", seed, std::nullopt)
                       : c == cfg.l2_coeff ? slot("l2", seed, std::nullopt)
                                             : slot("l2", seed, c);
        if (!i) continue;
        out.trends.push_back({"l2", seed, c, parameter_distance(trained[*i]->params, base.params), *job_metrics[*i]});
      }

  if (want_kl)
    for (std::uint64_t seed : cfg.seeds)
      for (const char* m : {"cfs", "ft"}) {
        const auto* r = find(m, seed, std::nullopt);
        if (!r) continue;
        say("kl-check " + seed_dir(m, seed));
        out.kl.push_back({seed, m, kl_check(base.params, r->params, cfg.kl.max_len, cfg.kl.samples,
                                            derive_seed(cfg.kl.seed, seed))});
      }

  if (out.runs.empty()) throw NumericalError("experiment: every run failed");
  out.report = tradeoff_report(out.runs);
  std::sort(out.runs.begin(), out.runs.end(),
            [](const auto& a, const auto& b) { return std::tie(a.method, a.seed) < std::tie(b.method, b.seed); });
  write_file(root / "report.csv", out.report.csv());
  write_file(root / "summary.txt", out.report.summary());
  write_file(root / "plot_data.csv", plot_csv(out.runs));
  write_file(root / "trends.csv", trends_csv(out.trends));
  if (!out.kl.empty()) write_file(root / "kl.csv", kl_csv(out.kl));
  std::string failures;
  for (const auto& f : out.failures) failures += f + "\n";
  write_file(root / "failures.txt", failures);
  return out;
}

}  // namespace forgetlab
