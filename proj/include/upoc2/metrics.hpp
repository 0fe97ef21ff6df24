// Copyright 2026 The upoc2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

namespace upoc2 {

using TokenList = std::vector<std::string>;

struct BleuResult {
  std::array<double, 5> bleu{};  // bleu[n] for n = 1..4; bleu[0] unused
  double brevity_penalty = 1.0;
  bool smoothed = false;
  std::array<std::size_t, 5> matches{};  // clipped n-gram matches per order
  std::array<std::size_t, 5> totals{};   // hypothesis n-grams per order
  std::size_t hyp_length = 0;
  std::size_t ref_length = 0;
};

// Corpus-level BLEU with one reference per hypothesis. BLEU@n is the
// geometric mean of the clipped precisions of orders 1..n times the
// brevity penalty. When some order n >= 2 has no match, every order
// n >= 2 is add-one smoothed and `smoothed` is set.
BleuResult bleu(const std::vector<TokenList>& hypotheses, const std::vector<TokenList>& references,
                std::size_t max_n = 4);

// CIDEr: tf-idf vectors of 1..4-grams, idf = log(N / (1 + df)) with df
// counted over the segments' reference sets; cosine per reference
// averaged, then averaged over n, times 10. Returns per-segment scores.
std::vector<double> cider_segments(const std::vector<TokenList>& hypotheses,
                                   const std::vector<std::vector<TokenList>>& references);
double cider(const std::vector<TokenList>& hypotheses, const std::vector<std::vector<TokenList>>& references);

struct MetricsReport {
  std::array<double, 5> bleu{};
  double brevity_penalty = 1.0;
  double cider = 0;
  std::size_t n_segments = 0;
  bool smoothed = false;
};

MetricsReport score_corpus(const std::vector<TokenList>& hypotheses, const std::vector<TokenList>& references);
std::string report_to_json(const MetricsReport& report);

}  // namespace upoc2
