// Copyright 2026 The upoc2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "upoc2/data.hpp"
#include "upoc2/metrics.hpp"
#include "upoc2/model.hpp"
#include "upoc2/rng.hpp"

namespace upoc2 {

enum class DecodeMode { kGreedy, kSample };

struct DecodeConfig {
  std::size_t max_len = 16;  // emitted tokens including [EOS]
  DecodeMode mode = DecodeMode::kGreedy;
  double temperature = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

DecodeMode parse_decode_mode(const std::string& name);

struct Translation {
  std::vector<std::int64_t> ids;  // between [SOS] and [EOS], exclusive
  std::vector<std::string> tokens;
  bool terminated = false;  // false when max_len ran out before [EOS]
};

// [MASK]-feed decoding: the target starts as [SOS]; each round appends
// [MASK], reads the prediction at that slot under the causal target mask
// and writes the chosen token in its place. [PAD], [SOS] and [MASK] are
// never emitted. max_len is clamped to the position table.
Translation translate(const Parameters& params, const ModelConfig& cfg, const Vocabulary& vocab,
                      const std::vector<std::vector<float>>& images, const std::vector<std::string>& src_tokens,
                      const DecodeConfig& dcfg, Rng* rng = nullptr);

struct Evaluation {
  MetricsReport report;
  std::vector<std::string> ids;
  std::vector<TokenList> hypotheses;
  std::vector<std::uint8_t> terminated;
};

// Translates every triplet (sharded over `workers` threads) and scores
// against the stored targets. Sampling uses one stream per segment, so the
// result does not depend on the worker count.
Evaluation evaluate_corpus(const Parameters& params, const ModelConfig& cfg, const Vocabulary& vocab,
                           const std::vector<Triplet>& triplets, const DecodeConfig& dcfg, std::size_t workers = 1);

// One JSON object {"id", "hyp"} per line.
std::string hypotheses_jsonl(const Evaluation& evaluation);

}  // namespace upoc2
