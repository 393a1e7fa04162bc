// forgetlab: pretrain, generate, train, eval, kl-check, experiment, report.
// Exit codes: 0 success, 1 usage error, 2 numerical failure, 3 incompatibility.

#include <chrono>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "forgetlab/experiment.hpp"

using namespace forgetlab;
namespace fs = std::filesystem;

namespace {

struct ConfigFlags {
  std::string config_path;
  std::optional<std::size_t> steps;
  std::optional<double> lr;
  std::optional<std::size_t> batch_size;

  void add(CLI::App* app) {
    app->add_option("--config", config_path, "Experiment config file (JSON)");
    app->add_option("--steps", steps, "Optimizer steps");
    app->add_option("--lr", lr, "Peak learning rate");
    app->add_option("--batch-size", batch_size, "Batch size");
  }

  ExperimentConfig load() const {
    return config_path.empty() ? ExperimentConfig{} : load_experiment_config(config_path);
  }
};

void log(const std::string& s) { std::cerr << "[forgetlab] " << s << std::endl; }

Vocabulary desk() { return Vocabulary::desk(); }

// The command's model section must describe the checkpoint's architecture; without a config
// file the checkpoint's own architecture is adopted.
void adopt_model(ExperimentConfig& cfg, const Checkpoint& ck, bool from_file) {
  if (from_file) require_compatible(ck, cfg.model, desk());
  if (!(ck.vocab == desk())) throw IncompatibleError("checkpoint vocabulary is not the desk vocabulary");
  cfg.model = ck.config;
}

std::string quoted_command(int argc, char** argv) {
  std::string s;
  for (int i = 1; i < argc; ++i) {
    if (i > 1) s += ' ';
    s += argv[i];
  }
  return s;
}

int run(int argc, char** argv) {
  CLI::App app{"Forgetting-mitigation lab for tiny language models"};
  app.require_subcommand(1);

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "Train the base model on the synthetic pretraining corpus");
  ConfigFlags pre_flags;
  pre_flags.add(pre);
  std::string pre_out;
  std::optional<std::uint64_t> pre_seed;
  std::optional<std::size_t> pre_corpus;
  pre->add_option("--out-dir", pre_out, "Run directory")->required();
  pre->add_option("--seed", pre_seed, "Corpus and shuffle seed");
  pre->add_option("--corpus-size", pre_corpus, "Pretraining corpus size");

  // generate
  auto* gen = app.add_subcommand("generate", "Sample continuations from a checkpoint");
  std::string gen_ck, gen_mode = "context-free", gen_prompt, gen_out;
  std::size_t gen_n = 10;
  std::optional<double> gen_t;
  double gen_top_p = 0.95;
  int gen_max_len = 0;
  std::uint64_t gen_seed = 0;
  gen->add_option("--checkpoint", gen_ck, "Model checkpoint")->required();
  gen->add_option("--mode", gen_mode, "context-free | conditional")
      ->check(CLI::IsMember({"context-free", "conditional"}));
  gen->add_option("--prompt", gen_prompt, "Space-separated prompt tokens (conditional mode)");
  gen->add_option("-n,--n", gen_n, "Number of sequences");
  gen->add_option("--temperature", gen_t, "Sampling temperature (default 1.0 context-free, 0.6 conditional)");
  gen->add_option("--top-p", gen_top_p, "Nucleus mass");
  gen->add_option("--max-len", gen_max_len, "Length cap including the prompt (0 = model context)");
  gen->add_option("--seed", gen_seed, "Sampling seed");
  gen->add_option("--out", gen_out, "Output JSONL file")->required();

  // train
  auto* tr = app.add_subcommand("train", "Fine-tune a base checkpoint with one method");
  ConfigFlags tr_flags;
  tr_flags.add(tr);
  std::string tr_base, tr_method = "ft", tr_out, tr_data, tr_ft;
  std::optional<double> tr_pct, tr_l2, tr_alpha, tr_lora_alpha, tr_cfs_t, tr_cfs_p;
  std::optional<int> tr_rank;
  std::uint64_t tr_seed = 1;
  tr->add_option("--base", tr_base, "Base checkpoint")->required();
  tr->add_option("--method", tr_method, "ft | cfs | cs | replay | l2 | lora | wise-ft")
      ->check(CLI::IsMember({"ft", "cfs", "cs", "replay", "l2", "lora", "wise-ft"}));
  tr->add_option("--out-dir", tr_out, "Run directory")->required();
  tr->add_option("--seed", tr_seed, "Run seed (shuffle, sampling, adapter init)");
  tr->add_option("--percentage", tr_pct, "Augmentation examples as a percentage of the fine-tuning set");
  tr->add_option("--temperature", tr_cfs_t, "Context-free sampling temperature");
  tr->add_option("--top-p", tr_cfs_p, "Context-free nucleus mass");
  tr->add_option("--l2-coeff", tr_l2, "Parameter penalty coefficient");
  tr->add_option("--lora-rank", tr_rank, "Adapter rank");
  tr->add_option("--lora-alpha", tr_lora_alpha, "Adapter alpha (0 = rank)");
  tr->add_option("--data", tr_data, "Fine-tuning set (JSONL) instead of the generated addition set");
  tr->add_option("--finetuned", tr_ft, "Fine-tuned checkpoint (wise-ft)");
  tr->add_option("--alpha", tr_alpha, "Wise-FT weight on the base checkpoint");

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on the old and new tasks");
  std::string ev_config, ev_ck, ev_adapter, ev_method = "eval", ev_out;
  std::uint64_t ev_seed = 0;
  ev->add_option("--config", ev_config, "Experiment config file (eval section)");
  ev->add_option("--checkpoint", ev_ck, "Model checkpoint (the base when --adapter is given)")->required();
  ev->add_option("--adapter", ev_adapter, "LoRA adapter checkpoint");
  ev->add_option("--method", ev_method, "Method label for the metrics row");
  ev->add_option("--seed", ev_seed, "Seed label for the metrics row");
  ev->add_option("--out", ev_out, "Metrics CSV (default: stdout)");

  // kl-check
  auto* kl = app.add_subcommand("kl-check", "Exact and Monte-Carlo KL(a || b) on a truncated string space");
  std::string kl_a, kl_b, kl_out;
  int kl_len = 4;
  std::size_t kl_n = 0;
  std::uint64_t kl_seed = 0;
  kl->add_option("--a", kl_a, "Reference checkpoint (samples come from it)")->required();
  kl->add_option("--b", kl_b, "Comparison checkpoint")->required();
  kl->add_option("--max-len", kl_len, "Maximum string length of the space");
  kl->add_option("--samples", kl_n, "Monte-Carlo samples (0 = exact only)");
  kl->add_option("--seed", kl_seed, "Sampling seed");
  kl->add_option("--out", kl_out, "Report JSON (default: stdout)");

  // experiment
  auto* ex = app.add_subcommand("experiment", "Run the full comparison grid");
  std::string ex_config, ex_out;
  std::vector<std::uint64_t> ex_seeds;
  std::vector<std::string> ex_methods;
  std::optional<int> ex_jobs;
  ex->add_option("--config", ex_config, "Experiment config file (JSON)");
  ex->add_option("--out-dir", ex_out, "Report directory (overrides output_dir)");
  ex->add_option("--seeds", ex_seeds, "Seeds")->delimiter(',');
  ex->add_option("--methods", ex_methods, "Methods")->delimiter(',');
  ex->add_option("--jobs", ex_jobs, "Worker threads");

  // report
  auto* rep = app.add_subcommand("report", "Merge metrics CSVs into a trade-off report");
  std::vector<std::string> rep_inputs;
  std::string rep_out;
  rep->add_option("metrics", rep_inputs, "Metrics CSV files")->required();
  rep->add_option("--out", rep_out, "Report CSV (summary goes to stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }
  const std::string command = quoted_command(argc, argv);
  const Vocabulary vocab = desk();

  if (*pre) {
    ExperimentConfig cfg = pre_flags.load();
    if (pre_flags.steps) cfg.pretrain.steps = *pre_flags.steps;
    if (pre_flags.lr) cfg.pretrain.lr = *pre_flags.lr;
    if (pre_flags.batch_size) cfg.pretrain.batch_size = *pre_flags.batch_size;
    if (pre_seed) cfg.pretrain.seed = *pre_seed;
    if (pre_corpus) cfg.pretrain.corpus_size = *pre_corpus;
    cfg.method = "base";
    cfg.validate();
    log("pretraining " + std::to_string(cfg.pretrain.steps) + " steps");
    const auto r = run_pretrain(cfg);
    const auto ck = model_checkpoint(r.params, vocab, command);
    const auto m = evaluate(r.params, eval_sets(cfg.eval, cfg.model.max_len), cfg.eval, "base", cfg.pretrain.seed);
    write_run(pre_out, cfg, ck, r.history, {m});
    std::cout << "checkpoint " << (fs::path(pre_out) / "checkpoint.json").string() << " hash " << checkpoint_hash(ck)
              << "\nold_nll " << fmt_double(m.old_nll) << " old_em " << fmt_double(m.old_em) << "\n";
    return 0;
  }

  if (*gen) {
    const Checkpoint ck = load_checkpoint(gen_ck);
    if (!(ck.vocab == vocab)) throw IncompatibleError("generate: checkpoint vocabulary is not the desk vocabulary");
    const auto params = parameters_of(ck);
    const bool conditional = gen_mode == "conditional";
    const TokenSequence prompt = conditional ? vocab.tokenize(gen_prompt) : TokenSequence{};
    if (!conditional && !gen_prompt.empty()) throw UsageError("generate: --prompt needs --mode conditional");
    const SamplerConfig base = conditional ? contextual_defaults() : context_free_defaults();
    const SamplerConfig sc{gen_t.value_or(base.temperature), gen_top_p, gen_max_len, gen_seed};
    sc.validate();
    const auto outs = gen_n == 0 ? std::vector<TokenSequence>{} : sample_conditional(params, prompt, sc, gen_n);
    write_file(gen_out, generations_jsonl(prompt, outs, vocab));
    return 0;
  }

  if (*tr) {
    ExperimentConfig cfg = tr_flags.load();
    const Checkpoint base_ck = load_checkpoint(tr_base);
    adopt_model(cfg, base_ck, !tr_flags.config_path.empty());
    if (tr_flags.steps) cfg.train.steps = *tr_flags.steps;
    if (tr_flags.lr) cfg.train.peak_lr = *tr_flags.lr;
    if (tr_flags.batch_size) cfg.train.batch_size = *tr_flags.batch_size;
    if (tr_pct) cfg.percentage = *tr_pct;
    if (tr_cfs_t) cfg.cfs_temperature = *tr_cfs_t;
    if (tr_cfs_p) cfg.cfs_top_p = *tr_cfs_p;
    if (tr_l2) cfg.l2_coeff = *tr_l2;
    if (tr_rank) cfg.lora_rank = *tr_rank;
    if (tr_lora_alpha) cfg.lora_alpha = *tr_lora_alpha;
    if (tr_alpha) cfg.wise_alpha = *tr_alpha;
    cfg.method = tr_method;
    cfg.validate();
    const auto base = parameters_of(base_ck);
    const std::string parent = checkpoint_hash(base_ck);
    const auto sets = eval_sets(cfg.eval, cfg.model.max_len);

    if (tr_method == "wise-ft") {
      if (tr_ft.empty()) throw UsageError("train: wise-ft needs --finetuned");
      const Checkpoint ft_ck = load_checkpoint(tr_ft);
      require_compatible(ft_ck, base.config, vocab);
      const auto w = wise_ft(base, parameters_of(ft_ck), cfg.wise_alpha);
      const auto m = evaluate(w, sets, cfg.eval, "wise-ft", tr_seed);
      write_run(tr_out, cfg, model_checkpoint(w, vocab, command, checkpoint_hash(ft_ck)), {}, {m});
      return 0;
    }
    std::optional<std::vector<Example>> data;
    if (!tr_data.empty()) data = examples_from_jsonl(read_file(tr_data), vocab);
    log("training " + tr_method + " for " + std::to_string(cfg.train.steps) + " steps");
    auto r = run_method(base, tr_method, cfg, tr_seed, data ? &*data : nullptr);
    const auto m = evaluate(r.params, sets, cfg.eval, tr_method, tr_seed);
    std::optional<Checkpoint> adapter;
    if (r.adapter) adapter = adapter_checkpoint(*r.adapter, vocab, command, parent);
    const auto ck = model_checkpoint(r.params, vocab, command, parent);
    write_run(tr_out, cfg, ck, r.history, {m}, adapter);
    std::cout << "checkpoint " << (fs::path(tr_out) / "checkpoint.json").string() << " hash " << checkpoint_hash(ck)
              << "\nold_nll " << fmt_double(m.old_nll) << " old_em " << fmt_double(m.old_em) << " new_em "
              << fmt_double(m.new_em) << "\n";
    return 0;
  }

  if (*ev) {
    ExperimentConfig cfg = ev_config.empty() ? ExperimentConfig{} : load_experiment_config(ev_config);
    const Checkpoint ck = load_checkpoint(ev_ck);
    adopt_model(cfg, ck, !ev_config.empty());
    auto params = parameters_of(ck);
    if (!ev_adapter.empty()) {
      const Checkpoint ack = load_checkpoint(ev_adapter);
      require_compatible(ack, params.config, vocab);
      params = lora_merge(params, adapter_of(ack));
    }
    const auto m = evaluate(params, eval_sets(cfg.eval, cfg.model.max_len), cfg.eval, ev_method, ev_seed);
    const std::string csv = metrics_csv({m});
    if (ev_out.empty())
      std::cout << csv;
    else
      write_file(ev_out, csv);
    return 0;
  }

  if (*kl) {
    const Checkpoint a = load_checkpoint(kl_a);
    const Checkpoint b = load_checkpoint(kl_b);
    if (!(a.vocab == b.vocab)) throw IncompatibleError("kl-check: checkpoints use different vocabularies");
    require_compatible(b, a.config, a.vocab);
    const auto r = kl_check(parameters_of(a), parameters_of(b), kl_len, kl_n, kl_seed);
    Json j = to_json(r);
    j["max_len"] = kl_len;
    j["a"] = checkpoint_hash(a);
    j["b"] = checkpoint_hash(b);
    const std::string text = j.dump(2) + "\n";
    if (kl_out.empty())
      std::cout << text;
    else
      write_file(kl_out, text);
    return 0;
  }

  if (*ex) {
    ExperimentConfig cfg = ex_config.empty() ? ExperimentConfig{} : load_experiment_config(ex_config);
    if (!ex_out.empty()) cfg.output_dir = ex_out;
    if (!ex_seeds.empty()) cfg.seeds = ex_seeds;
    if (!ex_methods.empty()) cfg.methods = ex_methods;
    if (ex_jobs) cfg.jobs = *ex_jobs;
    const auto t0 = std::chrono::steady_clock::now();
    const auto g = run_grid(cfg, log);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << g.report.summary();
    for (const auto& k : g.kl)
      std::cout << "KL(base || " << k.method << ", seed " << k.seed << ") = " << fmt_double(*k.report.exact_kl) << "\n";
    log("grid finished in " + std::to_string(static_cast<int>(secs)) + " s");
    if (!g.failures.empty()) {
      for (const auto& f : g.failures) std::cerr << "failed: " << f << "\n";
      return 2;
    }
    return 0;
  }

  if (*rep) {
    std::vector<MetricsReport> runs;
    for (const auto& path : rep_inputs) {
      auto rows = metrics_from_csv(read_file(path));
      runs.insert(runs.end(), rows.begin(), rows.end());
    }
    const auto report = tradeoff_report(runs);
    if (!rep_out.empty()) write_file(rep_out, report.csv());
    std::cout << report.summary();
    return 0;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 2;
  } catch (const IncompatibleError& e) {
    std::cerr << "incompatible: " << e.what() << "\n";
    return 3;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
