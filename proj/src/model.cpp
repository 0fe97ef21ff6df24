// Copyright 2026 The upoc2 Authors
// SPDX-License-Identifier: Apache-2.0

#include "upoc2/model.hpp"

#include <cmath>
#include <unordered_map>

#include "json.hpp"
#include "upoc2/errors.hpp"
#include "upoc2/ops.hpp"

namespace upoc2 {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

void ModelConfig::validate() const {
  const auto fail = [](const std::string& msg) { throw ContractError("model config: " + msg); };
  if (hidden == 0 || heads == 0) fail("hidden size and heads must be positive");
  if (hidden % heads != 0) fail("hidden size " + std::to_string(hidden) + " not divisible by " + std::to_string(heads) + " heads");
  if (layers_cross == 0) fail("cross encoder needs at least one layer");
  if (vocab_size <= static_cast<std::size_t>(kNumReserved)) fail("vocab_size must exceed the reserved ids");
  if (attr_vocab_size == 0) fail("attr_vocab_size must be positive");
  if (feature_dim == 0) fail("feature_dim must be positive");
  if (limits.max_images == 0 || limits.max_src_tokens == 0 || limits.max_tgt_tokens == 0) fail("sequence limits must be positive");
  if (!(dropout >= 0 && dropout < 1)) fail("dropout must be in [0, 1)");
  if (!(init_std > 0) || !(ln_eps > 0)) fail("init_std and ln_eps must be positive");
  if (share_src_tgt_encoders && layers_source != layers_target) {
    fail("shared source/target encoders need equal depths (L_s=" + std::to_string(layers_source) +
         ", L_t=" + std::to_string(layers_target) + ")");
  }
}

ModelConfig ModelConfig::clean() { return ModelConfig{}; }

ModelConfig ModelConfig::noisy() {
  ModelConfig c;
  c.layers_image = c.layers_source = c.layers_target = 0;
  c.layers_cross = 6;
  return c;
}

ModelConfig ModelConfig::paper_clean() {
  ModelConfig c;
  c.hidden = 512;
  c.heads = 8;
  return c;
}

ModelConfig ModelConfig::paper_noisy() {
  ModelConfig c = noisy();
  c.hidden = 512;
  c.heads = 8;
  return c;
}

ModelConfig ModelConfig::preset(const std::string& name) {
  if (name == "clean") return clean();
  if (name == "noisy") return noisy();
  if (name == "paper-clean") return paper_clean();
  if (name == "paper-noisy") return paper_noisy();
  throw ContractError("unknown model preset '" + name + "'");
}

std::string model_config_to_json(const ModelConfig& c) {
  json j;
  j["layers_image"] = c.layers_image;
  j["layers_source"] = c.layers_source;
  j["layers_target"] = c.layers_target;
  j["layers_cross"] = c.layers_cross;
  j["hidden"] = c.hidden;
  j["heads"] = c.heads;
  j["ff_hidden"] = c.ff_hidden;
  j["feature_dim"] = c.feature_dim;
  j["vocab_size"] = c.vocab_size;
  j["attr_vocab_size"] = c.attr_vocab_size;
  j["max_images"] = c.limits.max_images;
  j["max_src_tokens"] = c.limits.max_src_tokens;
  j["max_tgt_tokens"] = c.limits.max_tgt_tokens;
  j["share_src_tgt_encoders"] = c.share_src_tgt_encoders;
  j["dropout"] = c.dropout;
  j["init_std"] = c.init_std;
  j["ln_eps"] = c.ln_eps;
  return j.dump(2);
}

ModelConfig model_config_from_json(const std::string& text) {
  const json j = json::parse(text);
  ModelConfig c;
  c.layers_image = j.at("layers_image");
  c.layers_source = j.at("layers_source");
  c.layers_target = j.at("layers_target");
  c.layers_cross = j.at("layers_cross");
  c.hidden = j.at("hidden");
  c.heads = j.at("heads");
  c.ff_hidden = j.at("ff_hidden");
  c.feature_dim = j.at("feature_dim");
  c.vocab_size = j.at("vocab_size");
  c.attr_vocab_size = j.at("attr_vocab_size");
  c.limits.max_images = j.at("max_images");
  c.limits.max_src_tokens = j.at("max_src_tokens");
  c.limits.max_tgt_tokens = j.at("max_tgt_tokens");
  c.share_src_tgt_encoders = j.at("share_src_tgt_encoders");
  c.dropout = j.at("dropout");
  c.init_std = j.at("init_std");
  c.ln_eps = j.at("ln_eps");
  return c;
}

// ---------------------------------------------------------------------------
// Parameters

namespace {

void add_stack_shapes(std::map<std::string, Shape>& shapes, const std::string& stack, std::size_t layers,
                      const ModelConfig& cfg) {
  const std::size_t h = cfg.hidden, f = cfg.ff_size();
  for (std::size_t l = 0; l < layers; ++l) {
    const std::string p = stack + ".layer" + std::to_string(l);
    for (const char* w : {"q", "k", "v", "o"}) {
      shapes[p + ".attn." + w + ".weight"] = {h, h};
      shapes[p + ".attn." + w + ".bias"] = {h};
    }
    shapes[p + ".ln1.gain"] = {h};
    shapes[p + ".ln1.bias"] = {h};
    shapes[p + ".ff1.weight"] = {h, f};
    shapes[p + ".ff1.bias"] = {f};
    shapes[p + ".ff2.weight"] = {f, h};
    shapes[p + ".ff2.bias"] = {h};
    shapes[p + ".ln2.gain"] = {h};
    shapes[p + ".ln2.bias"] = {h};
  }
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

bool starts_with(const std::string& s, const std::string& prefix) { return s.rfind(prefix, 0) == 0; }

const std::string kSourcePrefix = "source_encoder.";
const std::string kTargetPrefix = "target_encoder.";

}  // namespace

std::map<std::string, Shape> expected_parameter_shapes(const ModelConfig& cfg) {
  const std::size_t h = cfg.hidden;
  std::map<std::string, Shape> shapes;
  shapes["token_embedding"] = {cfg.vocab_size, h};
  shapes["output_bias"] = {cfg.vocab_size};
  shapes["image_projection.weight"] = {cfg.feature_dim, h};
  shapes["image_projection.bias"] = {h};
  shapes["modality_embedding"] = {3, h};
  shapes["position_embedding"] = {cfg.position_table_size(), h};
  shapes["match_head.weight"] = {h, 1};
  shapes["match_head.bias"] = {1};
  shapes["attr_head.weight"] = {h, cfg.attr_vocab_size};
  shapes["attr_head.bias"] = {cfg.attr_vocab_size};
  add_stack_shapes(shapes, "image_encoder", cfg.layers_image, cfg);
  add_stack_shapes(shapes, "source_encoder", cfg.layers_source, cfg);
  add_stack_shapes(shapes, "target_encoder", cfg.layers_target, cfg);
  add_stack_shapes(shapes, "cross_encoder", cfg.layers_cross, cfg);
  return shapes;
}

Parameters Parameters::initialize(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  Parameters p;
  const bool shared = cfg.share_src_tgt_encoders && cfg.layers_target > 0;
  p.shared_src_tgt_ = shared;
  for (const auto& [name, shape] : expected_parameter_shapes(cfg)) {
    if (shared && starts_with(name, kTargetPrefix)) continue;
    Tensor t = Tensor::zeros(shape, true);
    if (ends_with(name, ".gain")) {
      for (auto& v : t.data()) v = 1.0;
    } else if (!ends_with(name, "bias")) {
      for (auto& v : t.data()) v = rng.truncated_normal(cfg.init_std);
    }
    p.named_[name] = t;
  }
  if (shared) {
    for (const auto& [name, shape] : expected_parameter_shapes(cfg)) {
      if (starts_with(name, kTargetPrefix)) {
        p.named_[name] = p.named_.at(kSourcePrefix + name.substr(kTargetPrefix.size()));
      }
    }
  }
  return p;
}

const Tensor& Parameters::get(const std::string& name) const {
  auto it = named_.find(name);
  if (it == named_.end()) throw ContractError("no parameter named '" + name + "'");
  return it->second;
}

ParameterSet Parameters::unique() const {
  ParameterSet out;
  std::unordered_map<const TensorImpl*, bool> seen;
  for (const auto& [name, t] : named_) {
    if (seen.emplace(t.impl().get(), true).second) out.push_back({name, t});
  }
  return out;
}

Parameters Parameters::clone() const {
  Parameters p;
  p.shared_src_tgt_ = shared_src_tgt_;
  std::unordered_map<const TensorImpl*, Tensor> copies;
  for (const auto& [name, t] : named_) {
    auto it = copies.find(t.impl().get());
    if (it == copies.end()) it = copies.emplace(t.impl().get(), t.clone()).first;
    p.named_[name] = it->second;
  }
  return p;
}

void split_shared_encoders(Parameters& params, const ModelConfig& cfg) {
  if (!params.shared_src_tgt() || cfg.layers_target == 0) return;
  std::vector<std::string> names;
  for (const auto& [name, t] : params.named()) {
    if (starts_with(name, kTargetPrefix)) names.push_back(name);
  }
  for (const auto& name : names) params.set(name, params.get(name).clone());
  params.set_shared_src_tgt(false);
}

// ---------------------------------------------------------------------------
// Input representation and masks

Tensor embed_inputs(const MaskedBatch& batch, const Parameters& params, const ModelConfig& cfg) {
  if (batch.feature_dim != cfg.feature_dim) {
    throw DimensionError("embed_inputs: image features of dimension " + std::to_string(batch.feature_dim) +
                         ", model expects " + std::to_string(cfg.feature_dim));
  }
  const std::size_t b = batch.batch_size, n = batch.image_slots, tok = batch.token_slots(), t = batch.total_slots();
  const std::size_t h = cfg.hidden;
  if (n == 0 || batch.src_slots == 0 || batch.tgt_slots == 0) throw ContractError("embed_inputs: empty segment");

  Tensor feats({b, n, cfg.feature_dim}, batch.image_features);
  Tensor img = linear(feats, params.get("image_projection.weight"), params.get("image_projection.bias"));

  std::vector<std::int64_t> token_pos(b * tok);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t k = 0; k < tok; ++k) token_pos[i * tok + k] = batch.position_ids[i * t + n + k];
  Tensor words = add(gather_rows(params.get("token_embedding"), batch.input_ids),
                     gather_rows(params.get("position_embedding"), token_pos));
  Tensor x = concat({img, reshape(words, {b, tok, h})}, 1);
  Tensor modality = reshape(gather_rows(params.get("modality_embedding"), batch.modality_ids), {b, t, h});
  return add(x, modality);
}

Tensor build_attention_mask(TaskKind kind, const SegmentLengths& lengths, std::size_t image_slots,
                            std::size_t src_slots, std::size_t tgt_slots) {
  switch (kind) {
    case TaskKind::kMtlm:
    case TaskKind::kIsm:
    case TaskKind::kAttp:
    case TaskKind::kPmt:
      break;
    default:
      throw ContractError("build_attention_mask: unknown task kind " + std::to_string(static_cast<int>(kind)));
  }
  if (lengths.image_count == 0 || lengths.src_length == 0 || lengths.tgt_length == 0) {
    throw ContractError("build_attention_mask: every segment needs at least one position");
  }
  if (lengths.image_count > image_slots || lengths.src_length > src_slots || lengths.tgt_length > tgt_slots) {
    throw ContractError("build_attention_mask: segment longer than its slots");
  }
  const bool sos_only = kind == TaskKind::kIsm || kind == TaskKind::kAttp;
  const std::size_t tgt_visible = sos_only ? 1 : lengths.tgt_length;
  const std::size_t t = image_slots + src_slots + tgt_slots;
  const std::size_t y0 = image_slots + src_slots;
  const auto is_pad = [&](std::size_t i) {
    if (i < image_slots) return i >= lengths.image_count;
    if (i < y0) return i - image_slots >= lengths.src_length;
    return i - y0 >= tgt_visible;
  };
  Tensor mask = Tensor::zeros({t, t});
  for (std::size_t q = 0; q < t; ++q) {
    const bool q_pad = is_pad(q);
    for (std::size_t k = 0; k < t; ++k) {
      bool allowed;
      if (q_pad) {
        allowed = q == k;  // pad rows only see themselves so their softmax stays defined
      } else if (is_pad(k)) {
        allowed = false;
      } else if (kind == TaskKind::kPmt) {
        if (q < y0) allowed = k < y0;
        else allowed = k < y0 || k <= q;
      } else {
        allowed = true;
      }
      mask.at(q * t + k) = allowed ? 1.0 : 0.0;
    }
  }
  return mask;
}

Tensor build_batch_attention_mask(const MaskedBatch& batch) {
  const std::size_t t = batch.total_slots();
  std::vector<Real> values(batch.batch_size * t * t);
  for (std::size_t b = 0; b < batch.batch_size; ++b) {
    Tensor m = build_attention_mask(batch.task, batch.lengths[b], batch.image_slots, batch.src_slots, batch.tgt_slots);
    for (std::size_t i = 0; i < t * t; ++i) values[b * t * t + i] = m.at(i) > 0 ? 0.0 : kMaskedValue;
  }
  return Tensor({batch.batch_size, 1, t, t}, std::move(values));
}

namespace {

// [B, 1, T, T] -> [B, 1, len, len] diagonal block starting at `start`.
Tensor diagonal_block(const Tensor& mask, std::size_t start, std::size_t len) {
  const std::size_t b = mask.dim(0), t = mask.dim(2);
  std::vector<Real> values(b * len * len);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t q = 0; q < len; ++q)
      for (std::size_t k = 0; k < len; ++k)
        values[(i * len + q) * len + k] = mask.at((i * t + start + q) * t + start + k);
  return Tensor({b, 1, len, len}, std::move(values));
}

}  // namespace

// ---------------------------------------------------------------------------
// Encoder

Tensor self_attention(const Tensor& x, const Tensor& mask, const AttentionWeights& w, std::size_t heads) {
  const std::size_t h = x.dim(2);
  const Tensor q = split_heads(linear(x, w.q_w, w.q_b), heads);
  const Tensor k = split_heads(linear(x, w.k_w, w.k_b), heads);
  const Tensor v = split_heads(linear(x, w.v_w, w.v_b), heads);
  const Real inv_sqrt = 1.0 / std::sqrt(static_cast<Real>(h / heads));
  const Tensor scores = scale(matmul(q, k, /*transpose_b=*/true), inv_sqrt);
  const Tensor probs = softmax_lastdim(scores, mask);
  return linear(merge_heads(matmul(probs, v)), w.o_w, w.o_b);
}

Tensor encoder_layer(const Tensor& x, const Tensor& mask, const Parameters& params, const std::string& prefix,
                     const ModelConfig& cfg, const ForwardOptions& opts) {
  const auto p = [&](const std::string& name) -> const Tensor& { return params.get(prefix + "." + name); };
  const bool drop = opts.training && cfg.dropout > 0;
  if (drop && !opts.rng) throw ContractError("encoder_layer: training with dropout needs an rng");
  const AttentionWeights w{p("attn.q.weight"), p("attn.q.bias"), p("attn.k.weight"), p("attn.k.bias"),
                           p("attn.v.weight"), p("attn.v.bias"), p("attn.o.weight"), p("attn.o.bias")};
  Tensor attn = self_attention(x, mask, w, cfg.heads);
  if (drop) attn = dropout(attn, cfg.dropout, *opts.rng);
  const Tensor h1 = layer_norm(add(x, attn), p("ln1.gain"), p("ln1.bias"), cfg.ln_eps);
  Tensor ff = linear(relu(linear(h1, p("ff1.weight"), p("ff1.bias"))), p("ff2.weight"), p("ff2.bias"));
  if (drop) ff = dropout(ff, cfg.dropout, *opts.rng);
  return layer_norm(add(h1, ff), p("ln2.gain"), p("ln2.bias"), cfg.ln_eps);
}

namespace {

Tensor run_stack(Tensor x, const Tensor& mask, const Parameters& params, const std::string& stack,
                 std::size_t layers, const ModelConfig& cfg, const ForwardOptions& opts) {
  for (std::size_t l = 0; l < layers; ++l) {
    x = encoder_layer(x, mask, params, stack + ".layer" + std::to_string(l), cfg, opts);
  }
  return x;
}

}  // namespace

EncodedSequence forward(const MaskedBatch& batch, const Parameters& params, const ModelConfig& cfg,
                        const ForwardOptions& opts) {
  Tensor x = embed_inputs(batch, params, cfg);
  if (opts.training && cfg.dropout > 0) {
    if (!opts.rng) throw ContractError("forward: training with dropout needs an rng");
    x = dropout(x, cfg.dropout, *opts.rng);
  }
  const Tensor mask = build_batch_attention_mask(batch);
  const std::size_t n = batch.image_slots, ts = batch.src_slots, tt = batch.tgt_slots;
  if (cfg.layers_image + cfg.layers_source + cfg.layers_target > 0) {
    Tensor img = run_stack(narrow(x, 1, 0, n), diagonal_block(mask, 0, n), params, "image_encoder",
                           cfg.layers_image, cfg, opts);
    Tensor src = run_stack(narrow(x, 1, n, ts), diagonal_block(mask, n, ts), params, "source_encoder",
                           cfg.layers_source, cfg, opts);
    Tensor tgt = run_stack(narrow(x, 1, n + ts, tt), diagonal_block(mask, n + ts, tt), params, "target_encoder",
                           cfg.layers_target, cfg, opts);
    x = concat({img, src, tgt}, 1);
  }
  x = run_stack(x, mask, params, "cross_encoder", cfg.layers_cross, cfg, opts);

  EncodedSequence enc;
  enc.hidden = x;
  enc.batch_size = batch.batch_size;
  enc.image_slots = n;
  enc.src_slots = ts;
  enc.tgt_slots = tt;
  enc.pad = batch.pad_flags();
  for (std::size_t b = 0; b < batch.batch_size; ++b) {
    enc.target_sos.push_back(batch.lengths[b].tgt_length > 0 && batch.input_ids[b * batch.token_slots() + ts] == kSosId);
  }
  return enc;
}

// ---------------------------------------------------------------------------
// Heads

namespace {

Tensor flat_hidden(const EncodedSequence& enc) {
  return reshape(enc.hidden, {enc.batch_size * enc.total_slots(), enc.hidden.dim(2)});
}

Tensor sos_states(const EncodedSequence& enc) {
  std::vector<std::int64_t> rows;
  for (std::size_t b = 0; b < enc.batch_size; ++b) {
    if (enc.tgt_slots == 0 || !enc.target_sos[b]) {
      throw ContractError("item " + std::to_string(b) + " has no target [SOS] slot");
    }
    rows.push_back(static_cast<std::int64_t>(b * enc.total_slots() + enc.tgt_offset()));
  }
  return gather_rows(flat_hidden(enc), rows);
}

}  // namespace

Tensor mlm_logits(const EncodedSequence& enc, std::span<const std::size_t> rows, const Parameters& params) {
  std::vector<std::int64_t> idx;
  const std::size_t t = enc.total_slots();
  for (auto r : rows) {
    if (r >= enc.batch_size * t) throw IndexError("mlm_logits: row " + std::to_string(r) + " outside batch");
    if (r % t < enc.image_slots) throw ContractError("mlm_logits: row " + std::to_string(r) + " is an image slot");
    idx.push_back(static_cast<std::int64_t>(r));
  }
  const Tensor states = gather_rows(flat_hidden(enc), idx);
  return add_bias(matmul(states, params.get("token_embedding"), /*transpose_b=*/true), params.get("output_bias"));
}

Tensor match_score(const EncodedSequence& enc, const Parameters& params) {
  const Tensor logit = linear(sos_states(enc), params.get("match_head.weight"), params.get("match_head.bias"));
  return reshape(sigmoid(logit), {enc.batch_size});
}

Tensor attribute_logits(const EncodedSequence& enc, const Parameters& params) {
  return linear(sos_states(enc), params.get("attr_head.weight"), params.get("attr_head.bias"));
}

}  // namespace upoc2
