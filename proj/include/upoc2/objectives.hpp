// Copyright 2026 The upoc2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "upoc2/batch.hpp"
#include "upoc2/data.hpp"
#include "upoc2/model.hpp"
#include "upoc2/rng.hpp"

namespace upoc2 {

struct MaskingOptions {
  double rate = 0.15;
  double mask_prob = 0.8;    // replace with [MASK]
  double random_prob = 0.1;  // replace with a random vocabulary word; the rest stay unchanged
  // Select the 15% within each sentence instead of jointly over both.
  bool per_sentence = false;
};

// Branch counters, summed over calls.
struct MaskingStats {
  std::size_t maskable = 0;
  std::size_t selected = 0;
  std::size_t masked = 0;
  std::size_t randomized = 0;
  std::size_t kept = 0;
};

// round-half-up(rate * n), at least 1 (for n >= 1).
std::size_t masked_count(std::size_t maskable, double rate);

// Masks word tokens of both sentences ([SOS]/[EOS] never chosen). Returns
// nullopt (skip the sample) when there is nothing to mask.
std::optional<Example> apply_mtlm_masking(const Triplet& triplet, Rng& rng, const Vocabulary& vocab,
                                          const SequenceLimits& limits, const MaskingOptions& opts = {},
                                          MaskingStats* stats = nullptr);
std::optional<Example> mask_words(Example example, Rng& rng, std::size_t vocab_size, bool source, bool target,
                                  bool include_target_eos, const MaskingOptions& opts, MaskingStats* stats);

// Target-only masking for fine-tuning. The target [EOS] is a candidate so
// the model learns where translations end.
std::optional<Example> apply_pmt_masking(const Triplet& triplet, Rng& rng, const Vocabulary& vocab,
                                         const SequenceLimits& limits, const MaskingOptions& opts = {},
                                         MaskingStats* stats = nullptr);

struct IsmSample {
  Example example;
  int label = 0;  // 1 = matched pair
  std::size_t anchor = 0;
  std::size_t source_from = 0;
};

// Positive with probability 1/2; otherwise the anchor's source is replaced
// by a different source from the same category (any other triplet when the
// category has no other distinct source). Target reduced to [SOS].
IsmSample sample_ism_pair(const Corpus& corpus, Rng& rng, const Vocabulary& vocab, const SequenceLimits& limits);

// Masks every source word that spells an attribute; target reduced to [SOS].
// nullopt when no source word matches.
std::optional<Example> apply_attp_masking(const Triplet& triplet, const Vocabulary& vocab,
                                          const AttributeVocabulary& attr_vocab, const SequenceLimits& limits);

// Mean cross-entropy over labeled positions; task must be MTLM or PMT.
Tensor masked_token_loss(const MaskedBatch& batch, const Parameters& params, const ModelConfig& cfg,
                         const ForwardOptions& opts = {});
Tensor mtlm_loss(const MaskedBatch& batch, const Parameters& params, const ModelConfig& cfg,
                 const ForwardOptions& opts = {});
Tensor pmt_loss(const MaskedBatch& batch, const Parameters& params, const ModelConfig& cfg,
                const ForwardOptions& opts = {});

// -[l log s + (1-l) log(1-s)], averaged over the batch.
Tensor ism_loss(const Tensor& scores, std::span<const int> labels);

// -(1/|C|) sum_c log softmax(logits)[c] per row (raw sum when !normalize),
// averaged over rows. logits [B, V_attr].
Tensor attp_loss(const Tensor& logits, const std::vector<std::vector<std::int64_t>>& attributes,
                 bool normalize = true);

// Forward plus the loss of batch.task.
Tensor task_loss(const MaskedBatch& batch, const Parameters& params, const ModelConfig& cfg,
                 const ForwardOptions& opts = {}, bool attp_normalize = true);

// Deterministic interleaving that realizes integer proportions exactly in
// every cycle (smooth weighted round robin).
class TaskSchedule {
 public:
  explicit TaskSchedule(std::vector<std::pair<TaskKind, std::size_t>> proportions);
  static TaskSchedule pretraining(bool with_attributes = true);  // 9:2:1 or 3:1

  TaskKind at(std::uint64_t cursor) const { return pattern_[cursor % pattern_.size()]; }
  std::uint64_t cursor() const { return cursor_; }
  void set_cursor(std::uint64_t c) { cursor_ = c; }
  const std::vector<TaskKind>& pattern() const { return pattern_; }
  const std::vector<std::pair<TaskKind, std::size_t>>& proportions() const { return proportions_; }

  TaskKind next() { return at(cursor_++); }

 private:
  std::vector<std::pair<TaskKind, std::size_t>> proportions_;
  std::vector<TaskKind> pattern_;
  std::uint64_t cursor_ = 0;
};

inline TaskKind next_task(TaskSchedule& schedule) { return schedule.next(); }

struct BatchDraw {
  MaskedBatch batch;
  std::size_t skipped = 0;
};

// Draws batch_size uniformly chosen samples of `kind` from `corpus`, redrawing
// on skip signals.
BatchDraw draw_task_batch(TaskKind kind, const Corpus& corpus, Rng& rng, const Vocabulary& vocab,
                          const SequenceLimits& limits, std::size_t batch_size, const MaskingOptions& opts = {});

}  // namespace upoc2
