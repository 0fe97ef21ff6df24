// Copyright 2026 The upoc2 Authors
// SPDX-License-Identifier: Apache-2.0

#include "upoc2/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "upoc2/errors.hpp"
#include "upoc2/ops.hpp"

namespace upoc2 {

std::size_t masked_count(std::size_t maskable, double rate) {
  if (maskable == 0) return 0;
  const auto n = static_cast<std::size_t>(std::floor(rate * static_cast<double>(maskable) + 0.5));
  return std::clamp<std::size_t>(n, 1, maskable);
}

namespace {

struct Slot {
  bool source;
  std::size_t index;
};

void choose(std::vector<Slot>& candidates, std::size_t count, Rng& rng) {
  for (std::size_t k = 0; k < count; ++k) {
    const auto j = k + rng.uniform_int(candidates.size() - k);
    std::swap(candidates[k], candidates[j]);
  }
  candidates.resize(count);
}

}  // namespace

std::optional<Example> mask_words(Example ex, Rng& rng, std::size_t vocab_size, bool source, bool target,
                                  bool include_target_eos, const MaskingOptions& opts, MaskingStats* stats) {
  if (vocab_size <= static_cast<std::size_t>(kNumReserved)) throw ContractError("mask_words: vocabulary has no words");
  std::vector<Slot> src_slots, tgt_slots;
  if (source) {
    for (std::size_t i = 1; i + 1 < ex.src_ids.size(); ++i) src_slots.push_back({true, i});
  }
  if (target) {
    for (std::size_t i = 1; i + 1 < ex.tgt_ids.size(); ++i) tgt_slots.push_back({false, i});
    if (include_target_eos && ex.tgt_ids.size() >= 2) tgt_slots.push_back({false, ex.tgt_ids.size() - 1});
  }
  std::vector<Slot> chosen;
  if (opts.per_sentence) {
    for (auto* group : {&src_slots, &tgt_slots}) {
      if (group->empty()) continue;
      choose(*group, masked_count(group->size(), opts.rate), rng);
      chosen.insert(chosen.end(), group->begin(), group->end());
    }
  } else {
    chosen = src_slots;
    chosen.insert(chosen.end(), tgt_slots.begin(), tgt_slots.end());
    const std::size_t maskable = chosen.size();
    choose(chosen, masked_count(maskable, opts.rate), rng);
  }
  if (stats) stats->maskable += src_slots.size() + tgt_slots.size();
  if (chosen.empty()) return std::nullopt;
  // Draw order follows slot position so the stream does not depend on the shuffle.
  std::sort(chosen.begin(), chosen.end(), [](const Slot& a, const Slot& b) {
    if (a.source != b.source) return a.source;
    return a.index < b.index;
  });
  const std::uint64_t words = vocab_size - static_cast<std::size_t>(kNumReserved);
  for (const auto& s : chosen) {
    auto& id = s.source ? ex.src_ids[s.index] : ex.tgt_ids[s.index];
    auto& label = s.source ? ex.src_labels[s.index] : ex.tgt_labels[s.index];
    label = id;
    const double u = rng.uniform();
    if (u < opts.mask_prob) {
      id = kMaskId;
      if (stats) ++stats->masked;
    } else if (u < opts.mask_prob + opts.random_prob) {
      id = kNumReserved + static_cast<std::int64_t>(rng.uniform_int(words));
      if (stats) ++stats->randomized;
    } else {
      if (stats) ++stats->kept;
    }
    if (stats) ++stats->selected;
  }
  return ex;
}

std::optional<Example> apply_mtlm_masking(const Triplet& triplet, Rng& rng, const Vocabulary& vocab,
                                          const SequenceLimits& limits, const MaskingOptions& opts,
                                          MaskingStats* stats) {
  return mask_words(make_example(triplet, vocab, limits), rng, vocab.size(), true, true, false, opts, stats);
}

std::optional<Example> apply_pmt_masking(const Triplet& triplet, Rng& rng, const Vocabulary& vocab,
                                         const SequenceLimits& limits, const MaskingOptions& opts,
                                         MaskingStats* stats) {
  return mask_words(make_example(triplet, vocab, limits), rng, vocab.size(), false, true, true, opts, stats);
}

namespace {

void reduce_target_to_sos(Example& ex) {
  ex.tgt_ids = {kSosId};
  ex.tgt_labels = {kIgnoreId};
}

}  // namespace

IsmSample sample_ism_pair(const Corpus& corpus, Rng& rng, const Vocabulary& vocab, const SequenceLimits& limits) {
  const std::size_t n = corpus.triplets.size();
  if (n < 2) throw ContractError("sample_ism_pair: corpus needs at least two triplets");
  IsmSample s;
  s.anchor = rng.uniform_int(n);
  const Triplet& anchor = corpus.triplets[s.anchor];
  s.label = rng.bernoulli(0.5) ? 1 : 0;
  s.source_from = s.anchor;
  if (s.label == 0) {
    std::vector<std::size_t> pool;
    for (auto i : corpus.category_index.at(anchor.category)) {
      if (i != s.anchor && corpus.triplets[i].src_tokens != anchor.src_tokens) pool.push_back(i);
    }
    if (pool.empty()) {
      for (std::size_t i = 0; i < n; ++i) {
        if (i != s.anchor && corpus.triplets[i].src_tokens != anchor.src_tokens) pool.push_back(i);
      }
    }
    if (pool.empty()) throw ContractError("sample_ism_pair: no triplet with a different source sentence");
    s.source_from = pool[rng.uniform_int(pool.size())];
  }
  Triplet mixed = anchor;
  mixed.src_tokens = corpus.triplets[s.source_from].src_tokens;
  s.example = make_example(mixed, vocab, limits);
  reduce_target_to_sos(s.example);
  s.example.match_label = s.label;
  return s;
}

std::optional<Example> apply_attp_masking(const Triplet& triplet, const Vocabulary& vocab,
                                          const AttributeVocabulary& attr_vocab, const SequenceLimits& limits) {
  if (triplet.attributes.empty()) return std::nullopt;
  std::set<std::string> words;
  std::vector<std::int64_t> ids;
  for (const auto& a : triplet.attributes) {
    for (const auto& w : tokenize(a)) words.insert(w);
    const auto id = attr_vocab.id(a);
    if (!id) throw IndexError("apply_attp_masking: attribute '" + a + "' not in the attribute vocabulary");
    ids.push_back(*id);
  }
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());

  Example ex = make_example(triplet, vocab, limits);
  const std::size_t kept = ex.src_ids.size() - 2;
  bool any = false;
  for (std::size_t i = 0; i < kept; ++i) {
    std::string w = triplet.src_tokens[i];
    std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (words.count(w)) {
      ex.src_ids[i + 1] = kMaskId;
      any = true;
    }
  }
  if (!any) return std::nullopt;
  reduce_target_to_sos(ex);
  ex.attr_labels = std::move(ids);
  return ex;
}

Tensor masked_token_loss(const MaskedBatch& batch, const Parameters& params, const ModelConfig& cfg,
                         const ForwardOptions& opts) {
  if (batch.task != TaskKind::kMtlm && batch.task != TaskKind::kPmt) {
    throw ContractError("masked_token_loss: batch task is " + task_name(batch.task));
  }
  std::vector<std::size_t> rows;
  std::vector<std::int64_t> labels;
  const std::size_t tok = batch.token_slots();
  for (std::size_t b = 0; b < batch.batch_size; ++b) {
    for (std::size_t k = 0; k < tok; ++k) {
      const auto l = batch.mlm_labels[b * tok + k];
      if (l == kIgnoreId) continue;
      rows.push_back(batch.row_of_token_slot(b, k));
      labels.push_back(l);
    }
  }
  if (rows.empty()) throw ContractError("masked_token_loss: batch has no masked positions");
  const EncodedSequence enc = forward(batch, params, cfg, opts);
  return cross_entropy_masked(mlm_logits(enc, rows, params), labels, kIgnoreId);
}

Tensor mtlm_loss(const MaskedBatch& batch, const Parameters& params, const ModelConfig& cfg,
                 const ForwardOptions& opts) {
  if (batch.task != TaskKind::kMtlm) throw ContractError("mtlm_loss: batch task is " + task_name(batch.task));
  return masked_token_loss(batch, params, cfg, opts);
}

Tensor pmt_loss(const MaskedBatch& batch, const Parameters& params, const ModelConfig& cfg,
                const ForwardOptions& opts) {
  if (batch.task != TaskKind::kPmt) throw ContractError("pmt_loss: batch task is " + task_name(batch.task));
  return masked_token_loss(batch, params, cfg, opts);
}

Tensor ism_loss(const Tensor& scores, std::span<const int> labels) { return binary_cross_entropy(scores, labels); }

Tensor attp_loss(const Tensor& logits, const std::vector<std::vector<std::int64_t>>& attributes, bool normalize) {
  if (logits.rank() != 2 || logits.dim(0) != attributes.size()) {
    throw DimensionError("attp_loss: logits " + shape_str(logits.shape()) + " for " +
                         std::to_string(attributes.size()) + " attribute sets");
  }
  const std::size_t v = logits.dim(1);
  std::vector<std::size_t> flat;
  std::vector<Real> weights;
  const Real per_row = 1.0 / static_cast<Real>(attributes.size());
  for (std::size_t b = 0; b < attributes.size(); ++b) {
    if (attributes[b].empty()) throw ContractError("attp_loss: empty attribute set in row " + std::to_string(b));
    const Real w = normalize ? per_row / static_cast<Real>(attributes[b].size()) : per_row;
    for (auto c : attributes[b]) {
      if (c < 0 || static_cast<std::size_t>(c) >= v) {
        throw IndexError("attp_loss: attribute id " + std::to_string(c) + " outside [0, " + std::to_string(v) + ")");
      }
      flat.push_back(b * v + static_cast<std::size_t>(c));
      weights.push_back(-w);
    }
  }
  const Tensor logp = pick(log_softmax_lastdim(logits), flat);
  return sum(mul(logp, Tensor({weights.size()}, weights)));
}

Tensor task_loss(const MaskedBatch& batch, const Parameters& params, const ModelConfig& cfg,
                 const ForwardOptions& opts, bool attp_normalize) {
  switch (batch.task) {
    case TaskKind::kMtlm:
    case TaskKind::kPmt:
      return masked_token_loss(batch, params, cfg, opts);
    case TaskKind::kIsm: {
      const EncodedSequence enc = forward(batch, params, cfg, opts);
      return ism_loss(match_score(enc, params), batch.match_labels);
    }
    case TaskKind::kAttp: {
      const EncodedSequence enc = forward(batch, params, cfg, opts);
      return attp_loss(attribute_logits(enc, params), batch.attr_labels, attp_normalize);
    }
  }
  throw ContractError("task_loss: unknown task");
}

TaskSchedule::TaskSchedule(std::vector<std::pair<TaskKind, std::size_t>> proportions) {
  for (const auto& p : proportions) {
    if (p.second > 0) proportions_.push_back(p);
  }
  if (proportions_.empty()) throw ContractError("TaskSchedule: no task with positive weight");
  std::size_t total = 0;
  for (const auto& p : proportions_) total += p.second;
  std::vector<long long> current(proportions_.size(), 0);
  for (std::size_t step = 0; step < total; ++step) {
    std::size_t best = 0;
    for (std::size_t i = 0; i < proportions_.size(); ++i) {
      current[i] += static_cast<long long>(proportions_[i].second);
      if (current[i] > current[best]) best = i;
    }
    current[best] -= static_cast<long long>(total);
    pattern_.push_back(proportions_[best].first);
  }
}

TaskSchedule TaskSchedule::pretraining(bool with_attributes) {
  if (with_attributes) return TaskSchedule({{TaskKind::kMtlm, 9}, {TaskKind::kIsm, 2}, {TaskKind::kAttp, 1}});
  return TaskSchedule({{TaskKind::kMtlm, 3}, {TaskKind::kIsm, 1}});
}

BatchDraw draw_task_batch(TaskKind kind, const Corpus& corpus, Rng& rng, const Vocabulary& vocab,
                          const SequenceLimits& limits, std::size_t batch_size, const MaskingOptions& opts) {
  if (corpus.triplets.empty()) throw ContractError("draw_task_batch: empty corpus");
  BatchDraw out;
  std::vector<Example> examples;
  const std::size_t max_skips = 1000 * std::max<std::size_t>(batch_size, 1);
  while (examples.size() < batch_size) {
    std::optional<Example> ex;
    if (kind == TaskKind::kIsm) {
      ex = sample_ism_pair(corpus, rng, vocab, limits).example;
    } else {
      const Triplet& t = corpus.triplets[rng.uniform_int(corpus.triplets.size())];
      switch (kind) {
        case TaskKind::kMtlm: ex = apply_mtlm_masking(t, rng, vocab, limits, opts); break;
        case TaskKind::kPmt: ex = apply_pmt_masking(t, rng, vocab, limits, opts); break;
        case TaskKind::kAttp: ex = apply_attp_masking(t, vocab, corpus.attribute_vocab, limits); break;
        default: throw ContractError("draw_task_batch: unknown task");
      }
    }
    if (!ex) {
      if (++out.skipped > max_skips) {
        throw ContractError("draw_task_batch: no usable " + task_name(kind) + " samples in corpus");
      }
      continue;
    }
    examples.push_back(std::move(*ex));
  }
  out.batch = collate(examples, kind);
  return out;
}

}  // namespace upoc2
