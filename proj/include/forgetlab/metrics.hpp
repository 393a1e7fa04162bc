#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "forgetlab/errors.hpp"
#include "forgetlab/model.hpp"
#include "forgetlab/sampling.hpp"
#include "forgetlab/tasks.hpp"

namespace forgetlab {

// Shortest round-trip decimal, positional unless that gets long.
inline std::string fmt_double(double x) {
  char buf[400];
  auto res = std::to_chars(buf, buf + sizeof buf, x, std::chars_format::fixed);
  if (res.ec == std::errc{} && res.ptr - buf <= 12) return std::string(buf, res.ptr);
  res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

struct MetricsReport {
  std::string method;
  std::uint64_t seed = 0;
  double old_nll = 0;       // held-out Markov NLL, nats/token
  double old_em = 0;        // reverse-task exact match
  double new_em = 0;        // addition exact match
  double marker_mean = 0;   // separator occurrences per context-free generation
  double gen_len_mean = 0;  // tokens per context-free generation
  std::string config_hash;
};

// Total NLL / total counted tokens (EOS included).
template <std::floating_point T>
double perplexity(const Parameters<T>& params, const std::vector<TokenSequence>& heldout) {
  if (heldout.empty()) throw UsageError("perplexity: empty held-out set");
  const auto lps = batch_sequence_logprobs(params, heldout);
  double nll = 0;
  std::size_t tokens = 0;
  for (std::size_t i = 0; i < heldout.size(); ++i) {
    nll -= lps[i];
    tokens += heldout[i].size();
  }
  return nll / static_cast<double>(tokens);
}

inline SamplerConfig greedy_config() { return SamplerConfig{0.0, 1.0, 0, 0}; }

// Greedy continuation must reproduce the target exactly, EOS position included.
template <std::floating_point T>
double exact_match(const Parameters<T>& params, const std::vector<Example>& eval_set) {
  if (eval_set.empty()) throw UsageError("exact_match: empty evaluation set");
  std::size_t hits = 0;
  for (const auto& ex : eval_set) {
    if (ex.target.empty()) throw UsageError("exact_match: example with empty target");
    if (generate_one(params, ex.prompt, greedy_config(), 0) == ex.target) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(eval_set.size());
}

struct MarkerStats {
  double mean_occurrences = 0;
  double mean_length = 0;
};

inline MarkerStats marker_stats(const std::vector<TokenSequence>& responses, TokenId marker, const Vocabulary& vocab) {
  if (!vocab.contains(marker)) throw UsageError("marker_stats: marker is not in the vocabulary");
  if (responses.empty()) return {};
  std::size_t count = 0, length = 0;
  for (const auto& r : responses) {
    length += r.size();
    for (TokenId t : r) count += t == marker;
  }
  const double n = static_cast<double>(responses.size());
  return {static_cast<double>(count) / n, static_cast<double>(length) / n};
}

// Single higher-is-better number for the old capabilities: mean of reverse EM and the
// likelihood score 1 - old_nll / ln(emittable tokens).
inline double old_task_composite(const MetricsReport& r, std::size_t emittable_tokens) {
  return 0.5 * r.old_em + 0.5 * (1.0 - r.old_nll / std::log(static_cast<double>(emittable_tokens)));
}

struct TradeoffRow {
  std::string method;
  std::string seed;  // "mean" / "sd" on aggregate rows
  double old_nll = 0, old_em = 0, new_em = 0, marker_mean = 0, gen_len_mean = 0;
  std::string config_hash;
};

struct TradeoffReport {
  std::vector<TradeoffRow> rows;        // one per (method, seed), sorted
  std::vector<TradeoffRow> aggregates;  // per method: mean row then sd row

  std::string csv() const {
    std::ostringstream out;
    out << "method,seed,old_nll,old_em,new_em,marker_mean,gen_len_mean,config_hash\n";
    auto emit = [&](const TradeoffRow& r) {
      out << r.method << ',' << r.seed << ',' << fmt_double(r.old_nll) << ',' << fmt_double(r.old_em) << ','
          << fmt_double(r.new_em) << ',' << fmt_double(r.marker_mean) << ',' << fmt_double(r.gen_len_mean) << ','
          << r.config_hash << '\n';
    };
    for (const auto& r : rows) emit(r);
    for (const auto& r : aggregates) emit(r);
    return out.str();
  }

  std::string summary() const {
    std::ostringstream out;
    out << std::fixed << std::setprecision(4);
    out << "method        runs  old_nll          old_em           new_em\n";
    for (std::size_t i = 0; i + 1 < aggregates.size(); i += 2) {
      const auto& m = aggregates[i];
      const auto& s = aggregates[i + 1];
      std::size_t runs = 0;
      for (const auto& r : rows) runs += r.method == m.method;
      out << std::left << std::setw(14) << m.method << std::setw(6) << runs << m.old_nll << " +- " << s.old_nll
          << "  " << m.old_em << " +- " << s.old_em << "  " << m.new_em << " +- " << s.new_em << '\n';
    }
    return out.str();
  }

  const TradeoffRow& mean_of(const std::string& method) const {
    for (const auto& r : aggregates)
      if (r.method == method && r.seed == "mean") return r;
    throw UsageError("no runs for method '" + method + "'");
  }
};

// Rows ordered by (method, seed); aggregate mean and sample sd (0 for a single run).
inline TradeoffReport tradeoff_report(std::vector<MetricsReport> runs) {
  if (runs.empty()) throw UsageError("tradeoff_report: no runs");
  std::sort(runs.begin(), runs.end(),
            [](const auto& a, const auto& b) { return std::tie(a.method, a.seed) < std::tie(b.method, b.seed); });
  TradeoffReport rep;
  std::map<std::string, std::vector<const MetricsReport*>> groups;
  for (const auto& r : runs) {
    rep.rows.push_back({r.method, std::to_string(r.seed), r.old_nll, r.old_em, r.new_em, r.marker_mean, r.gen_len_mean,
                        r.config_hash});
    groups[r.method].push_back(&r);
  }
  for (const auto& [method, members] : groups) {
    const double n = static_cast<double>(members.size());
    auto stat = [&](auto field) {
      double mean = 0;
      for (const auto* r : members) mean += r->*field;
      mean /= n;
      double ss = 0;
      for (const auto* r : members) ss += (r->*field - mean) * (r->*field - mean);
      return std::make_pair(mean, members.size() > 1 ? std::sqrt(ss / (n - 1)) : 0.0);
    };
    TradeoffRow mean{method, "mean", 0, 0, 0, 0, 0, members.front()->config_hash};
    TradeoffRow sd{method, "sd", 0, 0, 0, 0, 0, members.front()->config_hash};
    std::tie(mean.old_nll, sd.old_nll) = stat(&MetricsReport::old_nll);
    std::tie(mean.old_em, sd.old_em) = stat(&MetricsReport::old_em);
    std::tie(mean.new_em, sd.new_em) = stat(&MetricsReport::new_em);
    std::tie(mean.marker_mean, sd.marker_mean) = stat(&MetricsReport::marker_mean);
    std::tie(mean.gen_len_mean, sd.gen_len_mean) = stat(&MetricsReport::gen_len_mean);
    rep.aggregates.push_back(mean);
    rep.aggregates.push_back(sd);
  }
  return rep;
}

}  // namespace forgetlab
