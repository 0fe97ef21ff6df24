// Copyright 2026 The upoc2 Authors
// SPDX-License-Identifier: Apache-2.0

#include "upoc2/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "json.hpp"
#include "upoc2/errors.hpp"

namespace upoc2 {

namespace {

using NgramCounts = std::map<TokenList, std::size_t>;

NgramCounts ngrams(const TokenList& tokens, std::size_t n) {
  NgramCounts out;
  if (tokens.size() < n) return out;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    out[TokenList(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                  tokens.begin() + static_cast<std::ptrdiff_t>(i + n))] += 1;
  }
  return out;
}

}  // namespace

BleuResult bleu(const std::vector<TokenList>& hypotheses, const std::vector<TokenList>& references,
                std::size_t max_n) {
  if (hypotheses.empty()) throw ContractError("bleu: empty corpus");
  if (hypotheses.size() != references.size()) {
    throw ContractError("bleu: " + std::to_string(hypotheses.size()) + " hypotheses for " +
                        std::to_string(references.size()) + " references");
  }
  if (max_n < 1 || max_n > 4) throw ContractError("bleu: max_n must lie in [1, 4]");
  BleuResult r;
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    r.hyp_length += hypotheses[s].size();
    r.ref_length += references[s].size();
    for (std::size_t n = 1; n <= max_n; ++n) {
      const NgramCounts h = ngrams(hypotheses[s], n);
      const NgramCounts ref = ngrams(references[s], n);
      for (const auto& [g, c] : h) {
        r.totals[n] += c;
        auto it = ref.find(g);
        if (it != ref.end()) r.matches[n] += std::min(c, it->second);
      }
    }
  }
  if (r.hyp_length == 0) {
    r.brevity_penalty = 0;
  } else if (r.hyp_length < r.ref_length) {
    r.brevity_penalty = std::exp(1.0 - static_cast<double>(r.ref_length) / static_cast<double>(r.hyp_length));
  }
  for (std::size_t n = 2; n <= max_n; ++n) r.smoothed = r.smoothed || r.matches[n] == 0;
  double log_sum = 0;
  bool zero = false;
  for (std::size_t n = 1; n <= max_n; ++n) {
    double p;
    if (n >= 2 && r.smoothed) {
      p = static_cast<double>(r.matches[n] + 1) / static_cast<double>(r.totals[n] + 1);
    } else {
      p = r.totals[n] ? static_cast<double>(r.matches[n]) / static_cast<double>(r.totals[n]) : 0.0;
    }
    if (p <= 0) zero = true;
    if (!zero) log_sum += std::log(p);
    r.bleu[n] = zero ? 0.0 : r.brevity_penalty * std::exp(log_sum / static_cast<double>(n));
  }
  return r;
}

std::vector<double> cider_segments(const std::vector<TokenList>& hypotheses,
                                   const std::vector<std::vector<TokenList>>& references) {
  if (hypotheses.empty()) throw ContractError("cider: empty corpus");
  if (hypotheses.size() != references.size()) throw ContractError("cider: hypothesis/reference count mismatch");
  const std::size_t segments = hypotheses.size();
  const double log_n = std::log(static_cast<double>(segments));
  std::vector<double> scores(segments, 0.0);
  for (std::size_t n = 1; n <= 4; ++n) {
    std::map<TokenList, std::size_t> df;
    std::vector<std::vector<NgramCounts>> ref_counts(segments);
    for (std::size_t s = 0; s < segments; ++s) {
      std::set<TokenList> seen;
      for (const auto& ref : references[s]) {
        ref_counts[s].push_back(ngrams(ref, n));
        for (const auto& [g, c] : ref_counts[s].back()) seen.insert(g);
      }
      for (const auto& g : seen) df[g] += 1;
    }
    auto vectorize = [&](const NgramCounts& counts) {
      std::map<TokenList, double> v;
      std::size_t total = 0;
      for (const auto& [g, c] : counts) total += c;
      for (const auto& [g, c] : counts) {
        auto it = df.find(g);
        const double d = it == df.end() ? 0.0 : static_cast<double>(it->second);
        v[g] = static_cast<double>(c) / static_cast<double>(total) * (log_n - std::log(1.0 + d));
      }
      return v;
    };
    auto norm = [](const std::map<TokenList, double>& v) {
      double s = 0;
      for (const auto& [g, x] : v) s += x * x;
      return std::sqrt(s);
    };
    for (std::size_t s = 0; s < segments; ++s) {
      if (references[s].empty()) throw ContractError("cider: segment " + std::to_string(s) + " has no reference");
      const auto h = vectorize(ngrams(hypotheses[s], n));
      const double hn = norm(h);
      double acc = 0;
      for (const auto& rc : ref_counts[s]) {
        const auto r = vectorize(rc);
        const double rn = norm(r);
        if (hn == 0 || rn == 0) continue;
        double dot = 0;
        for (const auto& [g, x] : h) {
          auto it = r.find(g);
          if (it != r.end()) dot += x * it->second;
        }
        acc += dot / (hn * rn);
      }
      scores[s] += acc / static_cast<double>(references[s].size());
    }
  }
  for (auto& s : scores) s = 10.0 * s / 4.0;
  return scores;
}

double cider(const std::vector<TokenList>& hypotheses, const std::vector<std::vector<TokenList>>& references) {
  const auto seg = cider_segments(hypotheses, references);
  double sum = 0;
  for (double s : seg) sum += s;
  return sum / static_cast<double>(seg.size());
}

MetricsReport score_corpus(const std::vector<TokenList>& hypotheses, const std::vector<TokenList>& references) {
  const BleuResult b = bleu(hypotheses, references, 4);
  std::vector<std::vector<TokenList>> refs;
  refs.reserve(references.size());
  for (const auto& r : references) refs.push_back({r});
  MetricsReport m;
  m.bleu = b.bleu;
  m.brevity_penalty = b.brevity_penalty;
  m.smoothed = b.smoothed;
  m.cider = cider(hypotheses, refs);
  m.n_segments = hypotheses.size();
  return m;
}

std::string report_to_json(const MetricsReport& report) {
  nlohmann::json j;
  for (int n = 1; n <= 4; ++n) j["bleu"][std::to_string(n)] = report.bleu[n];
  j["brevity_penalty"] = report.brevity_penalty;
  j["cider"] = report.cider;
  j["n_segments"] = report.n_segments;
  j["smoothed"] = report.smoothed;
  return j.dump(1);
}

}  // namespace upoc2
