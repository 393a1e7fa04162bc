#pragma once

// On-disk formats: JSON checkpoints (models and adapters), JSONL datasets and
// generations, KL reports, and the CSV artifacts of a run.

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "forgetlab/divergence.hpp"
#include "forgetlab/errors.hpp"
#include "forgetlab/metrics.hpp"
#include "forgetlab/model.hpp"
#include "forgetlab/objectives.hpp"
#include "forgetlab/rng.hpp"
#include "forgetlab/tasks.hpp"
#include "forgetlab/vocab.hpp"
#include "forgetlab/weightspace.hpp"

namespace forgetlab {

using Json = nlohmann::ordered_json;

inline constexpr int kCheckpointFormatVersion = 1;

inline std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
  return buf;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw UsageError("cannot write '" + path.string() + "'");
  out << bytes;
  if (!out) throw UsageError("write failed for '" + path.string() + "'");
}

inline Json parse_json(const std::string& text, const std::string& what) {
  try {
    return Json::parse(text);
  } catch (const Json::exception& e) {
    throw UsageError(what + ": malformed JSON (" + e.what() + ")");
  }
}

// ---- model config -------------------------------------------------------------

inline Json to_json(const ModelConfig& c) {
  return Json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model}, {"n_layers", c.n_layers},
              {"n_heads", c.n_heads},       {"d_ff", c.d_ff},       {"max_len", c.max_len},
              {"init_seed", c.init_seed},   {"init_scale", c.init_scale}};
}

inline ModelConfig model_config_from_json(const Json& j, ModelConfig c = {}) {
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const auto& k = it.key();
      if (k == "vocab_size") c.vocab_size = it->get<int>();
      else if (k == "d_model") c.d_model = it->get<int>();
      else if (k == "n_layers") c.n_layers = it->get<int>();
      else if (k == "n_heads") c.n_heads = it->get<int>();
      else if (k == "d_ff") c.d_ff = it->get<int>();
      else if (k == "max_len") c.max_len = it->get<int>();
      else if (k == "init_seed") c.init_seed = it->get<std::uint64_t>();
      else if (k == "init_scale") c.init_scale = it->get<double>();
      else throw UsageError("model config: unknown key '" + k + "'");
    }
  } catch (const Json::exception& e) {
    throw UsageError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

// Architecture plus vocabulary; what a checkpoint must agree on to be usable by a command.
inline std::string config_hash(const ModelConfig& c, const Vocabulary& v) {
  Json j{{"model", to_json(c)}, {"vocabulary", v.tokens()}};
  j["model"].erase("init_seed");
  j["model"].erase("init_scale");
  return hex64(fnv1a(j.dump()));
}

// ---- checkpoints --------------------------------------------------------------

struct Provenance {
  std::string command;
  std::string config_hash;
  std::string parent_hash;  // empty when there is no parent
  bool operator==(const Provenance&) const = default;
};

struct Tensor {
  std::string name;
  ad::Array<float> array;
  bool operator==(const Tensor&) const = default;
};

struct Checkpoint {
  std::string kind = "model";  // model | lora-adapter
  ModelConfig config;
  Vocabulary vocab = Vocabulary::desk();
  Provenance provenance;
  Json extra = Json::object();  // kind-specific metadata
  std::vector<Tensor> tensors;
  bool operator==(const Checkpoint&) const = default;
};

inline Json tensor_json(const Tensor& t) {
  Json values = Json::array();
  for (float x : t.array.values) values.push_back(static_cast<double>(x));
  return Json{{"name", t.name}, {"shape", t.array.shape}, {"values", std::move(values)}};
}

inline std::string serialize(const Checkpoint& ck) {
  Json j;
  j["format"] = "forgetlab-checkpoint";
  j["format_version"] = kCheckpointFormatVersion;
  j["kind"] = ck.kind;
  j["precision"] = "float32";
  j["config"] = to_json(ck.config);
  j["vocabulary"] = ck.vocab.tokens();
  j["provenance"] = Json{{"command", ck.provenance.command},
                         {"config_hash", ck.provenance.config_hash},
                         {"parent_hash", ck.provenance.parent_hash}};
  j["extra"] = ck.extra;
  Json tensors = Json::array();
  for (const auto& t : ck.tensors) tensors.push_back(tensor_json(t));
  j["tensors"] = std::move(tensors);
  return j.dump(1) + "\n";
}

inline std::string checkpoint_hash(const Checkpoint& ck) { return hex64(fnv1a(serialize(ck))); }

inline Checkpoint deserialize_checkpoint(const std::string& text) {
  const Json j = parse_json(text, "checkpoint");
  try {
    if (j.at("format") != "forgetlab-checkpoint") throw IncompatibleError("not a checkpoint file");
    if (j.at("format_version").get<int>() != kCheckpointFormatVersion)
      throw IncompatibleError("unsupported checkpoint format version " + j.at("format_version").dump());
    if (j.at("precision") != "float32") throw IncompatibleError("unsupported checkpoint precision");
    Checkpoint ck;
    ck.kind = j.at("kind").get<std::string>();
    if (ck.kind != "model" && ck.kind != "lora-adapter") throw IncompatibleError("unknown checkpoint kind " + ck.kind);
    ck.config = model_config_from_json(j.at("config"));
    ck.vocab = Vocabulary(j.at("vocabulary").get<std::vector<std::string>>());
    if (static_cast<int>(ck.vocab.size()) != ck.config.vocab_size)
      throw IncompatibleError("checkpoint vocabulary size disagrees with its model config");
    const auto& p = j.at("provenance");
    ck.provenance = {p.at("command").get<std::string>(), p.at("config_hash").get<std::string>(),
                     p.at("parent_hash").get<std::string>()};
    if (ck.provenance.config_hash != config_hash(ck.config, ck.vocab))
      throw IncompatibleError("checkpoint config hash does not match its stored config");
    ck.extra = j.at("extra");
    for (const auto& t : j.at("tensors")) {
      Tensor tensor{t.at("name").get<std::string>(), ad::Array<float>(t.at("shape").get<ad::Shape>())};
      const auto& values = t.at("values");
      if (values.size() != tensor.array.values.size())
        throw IncompatibleError("tensor '" + tensor.name + "' has the wrong number of values");
      for (std::size_t i = 0; i < values.size(); ++i) tensor.array.values[i] = static_cast<float>(values[i].get<double>());
      ck.tensors.push_back(std::move(tensor));
    }
    return ck;
  } catch (const Json::exception& e) {
    throw IncompatibleError(std::string("checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) { write_file(path, serialize(ck)); }
inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return deserialize_checkpoint(read_file(path)); }

inline Checkpoint model_checkpoint(const Parameters<float>& p, const Vocabulary& vocab, std::string command,
                                   std::string parent_hash = "") {
  if (static_cast<int>(vocab.size()) != p.config.vocab_size)
    throw IncompatibleError("vocabulary size disagrees with the model config");
  Checkpoint ck;
  ck.config = p.config;
  ck.vocab = vocab;
  ck.provenance = {std::move(command), config_hash(p.config, vocab), std::move(parent_hash)};
  for (std::size_t i = 0; i < p.size(); ++i) ck.tensors.push_back({p.names[i], p.arrays[i]});
  return ck;
}

inline Parameters<float> parameters_of(const Checkpoint& ck) {
  if (ck.kind != "model") throw IncompatibleError("expected a model checkpoint, got " + ck.kind);
  const auto shapes = parameter_shapes(ck.config);
  if (shapes.size() != ck.tensors.size()) throw IncompatibleError("checkpoint tensors do not match its config");
  Parameters<float> p;
  p.config = ck.config;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    if (ck.tensors[i].name != shapes[i].first || ck.tensors[i].array.shape != shapes[i].second)
      throw IncompatibleError("checkpoint tensor '" + ck.tensors[i].name + "' does not match the architecture");
    p.names.push_back(ck.tensors[i].name);
    p.arrays.push_back(ck.tensors[i].array);
  }
  return p;
}

inline Checkpoint adapter_checkpoint(const LoraAdapter<float>& a, const Vocabulary& vocab, std::string command,
                                     std::string parent_hash) {
  Checkpoint ck;
  ck.kind = "lora-adapter";
  ck.config = a.config;
  ck.vocab = vocab;
  ck.provenance = {std::move(command), config_hash(a.config, vocab), std::move(parent_hash)};
  ck.extra = Json{{"rank", a.rank}, {"alpha", a.alpha}, {"targets", a.targets}};
  for (std::size_t i = 0; i < a.targets.size(); ++i) ck.tensors.push_back({a.targets[i] + ".lora_a", a.a[i]});
  for (std::size_t i = 0; i < a.targets.size(); ++i) ck.tensors.push_back({a.targets[i] + ".lora_b", a.b[i]});
  return ck;
}

inline LoraAdapter<float> adapter_of(const Checkpoint& ck) {
  if (ck.kind != "lora-adapter") throw IncompatibleError("expected a lora-adapter checkpoint, got " + ck.kind);
  LoraAdapter<float> a;
  try {
    a.config = ck.config;
    a.rank = ck.extra.at("rank").get<int>();
    a.alpha = ck.extra.at("alpha").get<double>();
    a.targets = ck.extra.at("targets").get<std::vector<std::string>>();
  } catch (const Json::exception& e) {
    throw IncompatibleError(std::string("adapter metadata: ") + e.what());
  }
  const std::size_t n = a.targets.size();
  if (ck.tensors.size() != 2 * n) throw IncompatibleError("adapter tensor count does not match its targets");
  for (std::size_t i = 0; i < n; ++i) {
    a.a.push_back(ck.tensors[i].array);
    a.b.push_back(ck.tensors[n + i].array);
  }
  return a;
}

// Hard error unless the checkpoint was built for exactly this architecture and vocabulary.
inline void require_compatible(const Checkpoint& ck, const ModelConfig& c, const Vocabulary& v) {
  const std::string expected = config_hash(c, v);
  if (ck.provenance.config_hash != expected)
    throw IncompatibleError("config hash mismatch: checkpoint " + ck.provenance.config_hash + ", command " + expected);
}

// ---- datasets and generations (JSONL) -----------------------------------------

inline std::string examples_jsonl(const std::vector<Example>& xs, const Vocabulary& v) {
  std::string out;
  for (const auto& x : xs) {
    Json j{{"origin", origin_name(x.origin)},   {"loss", loss_kind_name(x.kind)},
           {"prompt_ids", x.prompt},            {"target_ids", x.target},
           {"prompt", v.detokenize(x.prompt)}, {"target", v.detokenize(x.target)}};
    out += j.dump() + "\n";
  }
  return out;
}

inline std::vector<std::string> jsonl_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) lines.push_back(line);
  return lines;
}

inline Origin origin_from_name(const std::string& s) {
  for (Origin o : {Origin::finetune, Origin::cfs, Origin::cs, Origin::replay, Origin::eval})
    if (s == origin_name(o)) return o;
  throw UsageError("unknown example origin '" + s + "'");
}

inline std::vector<Example> examples_from_jsonl(const std::string& text, const Vocabulary& v) {
  std::vector<Example> out;
  for (const auto& line : jsonl_lines(text)) {
    const Json j = parse_json(line, "dataset line");
    try {
      const std::string loss = j.value("loss", std::string("masked-target"));
      if (loss != "all-token" && loss != "masked-target") throw UsageError("unknown loss kind '" + loss + "'");
      out.push_back(make_example(v.tokenize(j.value("prompt", std::string())), v.tokenize(j.at("target").get<std::string>()),
                                 loss == "all-token" ? LossKind::all_token : LossKind::masked_target,
                                 origin_from_name(j.value("origin", std::string("finetune")))));
    } catch (const Json::exception& e) {
      throw UsageError(std::string("dataset line: ") + e.what());
    }
  }
  return out;
}

inline std::string generations_jsonl(const TokenSequence& prompt, const std::vector<TokenSequence>& outs,
                                     const Vocabulary& v) {
  std::string s;
  for (std::size_t i = 0; i < outs.size(); ++i) {
    Json j{{"index", i},
           {"prompt_ids", prompt},
           {"completion_ids", outs[i]},
           {"prompt", v.detokenize(prompt)},
           {"completion", v.detokenize(outs[i])}};
    s += j.dump() + "\n";
  }
  return s;
}

inline std::vector<TokenSequence> generations_from_jsonl(const std::string& text, const Vocabulary& v) {
  std::vector<TokenSequence> out;
  for (const auto& line : jsonl_lines(text)) {
    const Json j = parse_json(line, "generation line");
    try {
      out.push_back(v.tokenize(j.at("completion").get<std::string>()));
    } catch (const Json::exception& e) {
      throw UsageError(std::string("generation line: ") + e.what());
    }
  }
  return out;
}

// ---- reports ------------------------------------------------------------------

inline Json to_json(const KLReport& r) {
  Json j;
  j["exact_kl"] = r.exact_kl ? Json(*r.exact_kl) : Json(nullptr);
  j["estimator"] = estimator_name(r.kind);
  j["n_samples"] = r.n_samples;
  if (r.n_samples > 0) {
    j["mc_estimate"] = r.mc_estimate;
    j["std_error"] = r.std_error;
  } else {
    j["mc_estimate"] = nullptr;
    j["std_error"] = nullptr;
  }
  return j;
}

inline std::string optional_field(const std::optional<double>& x) { return x ? fmt_double(*x) : ""; }

inline std::string history_csv(const std::vector<StepRecord>& h) {
  std::string out = "step,lr,loss,loss_ft,loss_aug\n";
  for (const auto& r : h)
    out += std::to_string(r.step) + "," + fmt_double(r.lr) + "," + fmt_double(r.loss) + "," +
           optional_field(r.finetune_loss) + "," + optional_field(r.augmentation_loss) + "\n";
  return out;
}

inline std::string metrics_csv(const std::vector<MetricsReport>& runs) {
  std::string out = "method,seed,old_nll,old_em,new_em,marker_mean,gen_len_mean,config_hash\n";
  for (const auto& r : runs)
    out += r.method + "," + std::to_string(r.seed) + "," + fmt_double(r.old_nll) + "," + fmt_double(r.old_em) + "," +
           fmt_double(r.new_em) + "," + fmt_double(r.marker_mean) + "," + fmt_double(r.gen_len_mean) + "," +
           r.config_hash + "\n";
  return out;
}

inline std::vector<MetricsReport> metrics_from_csv(const std::string& text) {
  std::vector<MetricsReport> out;
  auto lines = jsonl_lines(text);
  if (lines.empty() || lines[0].rfind("method,seed,", 0) != 0) throw UsageError("metrics CSV: missing header");
  for (std::size_t i = 1; i < lines.size(); ++i) {
    std::vector<std::string> f;
    std::stringstream ss(lines[i]);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() == 7) f.emplace_back();
    if (f.size() != 8) throw UsageError("metrics CSV: bad row " + std::to_string(i));
    if (f[1] == "mean" || f[1] == "sd") continue;
    try {
      out.push_back({f[0], std::stoull(f[1]), std::stod(f[2]), std::stod(f[3]), std::stod(f[4]), std::stod(f[5]),
                     std::stod(f[6]), f[7]});
    } catch (const std::exception&) {
      throw UsageError("metrics CSV: bad number in row " + std::to_string(i));
    }
  }
  return out;
}

}  // namespace forgetlab
