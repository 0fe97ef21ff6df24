// Copyright 2026 The upoc2 Authors
// SPDX-License-Identifier: Apache-2.0

#include "upoc2/decode.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <thread>

#include "json.hpp"
#include "upoc2/errors.hpp"
#include "upoc2/ops.hpp"

namespace upoc2 {

void DecodeConfig::validate() const {
  if (max_len < 1) throw ContractError("decode config: max_len must be >= 1");
  if (!(temperature > 0)) throw ContractError("decode config: temperature must be > 0");
}

DecodeMode parse_decode_mode(const std::string& name) {
  if (name == "greedy") return DecodeMode::kGreedy;
  if (name == "sample") return DecodeMode::kSample;
  throw ContractError("unknown decode mode '" + name + "'");
}

namespace {

bool emittable(std::int64_t id) { return id != kPadId && id != kSosId && id != kMaskId; }

std::int64_t choose(std::span<const Real> logits, const DecodeConfig& dcfg, Rng* rng) {
  if (dcfg.mode == DecodeMode::kGreedy) {
    std::int64_t best = -1;
    for (std::size_t i = 0; i < logits.size(); ++i) {
      const auto id = static_cast<std::int64_t>(i);
      if (emittable(id) && (best < 0 || logits[i] > logits[static_cast<std::size_t>(best)])) best = id;
    }
    return best;
  }
  if (!rng) throw ContractError("translate: sample mode needs an rng");
  Real top = -std::numeric_limits<Real>::infinity();
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (emittable(static_cast<std::int64_t>(i))) top = std::max(top, logits[i]);
  }
  std::vector<Real> w(logits.size(), 0.0);
  Real total = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!emittable(static_cast<std::int64_t>(i))) continue;
    w[i] = std::exp((logits[i] - top) / dcfg.temperature);
    total += w[i];
  }
  Real u = rng->uniform() * total;
  std::int64_t last = -1;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (w[i] <= 0) continue;
    last = static_cast<std::int64_t>(i);
    if (u < w[i]) return last;
    u -= w[i];
  }
  return last;
}

}  // namespace

Translation translate(const Parameters& params, const ModelConfig& cfg, const Vocabulary& vocab,
                      const std::vector<std::vector<float>>& images, const std::vector<std::string>& src_tokens,
                      const DecodeConfig& dcfg, Rng* rng) {
  dcfg.validate();
  NoGradGuard guard;
  Triplet t;
  t.src_tokens = src_tokens;
  t.image_features = images;
  Example ex = make_example(t, vocab, cfg.limits);
  ex.tgt_ids = {kSosId};
  // Target slots 1 .. max_tgt_tokens + 1 have positions.
  const std::size_t budget = std::min(dcfg.max_len, cfg.limits.max_tgt_tokens + 1);
  Translation out;
  while (out.ids.size() < budget) {
    ex.tgt_ids.push_back(kMaskId);
    ex.tgt_labels.assign(ex.tgt_ids.size(), kIgnoreId);
    const MaskedBatch batch = collate({ex}, TaskKind::kPmt);
    const EncodedSequence enc = forward(batch, params, cfg);
    const std::size_t row = batch.row_of_token_slot(0, batch.src_slots + ex.tgt_ids.size() - 1);
    const Tensor logits = mlm_logits(enc, std::span<const std::size_t>(&row, 1), params);
    const std::int64_t id = choose(logits.data(), dcfg, rng);
    if (id == kEosId) {
      out.terminated = true;
      break;
    }
    ex.tgt_ids.back() = id;
    out.ids.push_back(id);
  }
  out.tokens = vocab.decode(out.ids);
  return out;
}

Evaluation evaluate_corpus(const Parameters& params, const ModelConfig& cfg, const Vocabulary& vocab,
                           const std::vector<Triplet>& triplets, const DecodeConfig& dcfg, std::size_t workers) {
  if (triplets.empty()) throw ContractError("evaluate_corpus: no triplets");
  dcfg.validate();
  const std::size_t n = triplets.size();
  Evaluation ev;
  ev.hypotheses.resize(n);
  ev.terminated.resize(n);
  workers = std::clamp<std::size_t>(workers, 1, n);
  auto run = [&](std::size_t shard) {
    for (std::size_t i = shard; i < n; i += workers) {
      Rng rng(derive_seed(dcfg.seed, i));
      const Translation tr =
          translate(params, cfg, vocab, triplets[i].image_features, triplets[i].src_tokens, dcfg, &rng);
      ev.hypotheses[i] = tr.tokens;
      ev.terminated[i] = tr.terminated;
    }
  };
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          run(w);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  std::vector<TokenList> refs;
  for (const auto& t : triplets) {
    ev.ids.push_back(t.id);
    refs.push_back(t.tgt_tokens);
  }
  ev.report = score_corpus(ev.hypotheses, refs);
  return ev;
}

std::string hypotheses_jsonl(const Evaluation& evaluation) {
  std::string out;
  for (std::size_t i = 0; i < evaluation.hypotheses.size(); ++i) {
    nlohmann::json j;
    j["id"] = evaluation.ids[i];
    j["hyp"] = evaluation.hypotheses[i];
    out += j.dump() + "\n";
  }
  return out;
}

}  // namespace upoc2
