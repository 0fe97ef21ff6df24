// Copyright 2026 The upoc2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "upoc2/batch.hpp"
#include "upoc2/data.hpp"
#include "upoc2/optim.hpp"
#include "upoc2/rng.hpp"
#include "upoc2/tensor.hpp"

namespace upoc2 {

struct ModelConfig {
  std::size_t layers_image = 1;   // L_v
  std::size_t layers_source = 1;  // L_s
  std::size_t layers_target = 1;  // L_t
  std::size_t layers_cross = 3;   // L_c
  std::size_t hidden = 64;        // H
  std::size_t heads = 4;          // A
  std::size_t ff_hidden = 0;      // 0 means 4 * hidden
  std::size_t feature_dim = 16;   // D_img
  std::size_t vocab_size = 0;
  std::size_t attr_vocab_size = 1;
  SequenceLimits limits;
  bool share_src_tgt_encoders = true;
  double dropout = 0.1;
  double init_std = 0.02;
  double ln_eps = 1e-5;

  std::size_t ff_size() const { return ff_hidden ? ff_hidden : 4 * hidden; }
  std::size_t position_table_size() const {
    return std::max(limits.max_src_tokens, limits.max_tgt_tokens) + 2;
  }
  // Throws ContractError describing the first violated invariant.
  void validate() const;

  // Desk-scale presets (H=64, A=4) and the paper-scale ones (H=512, A=8).
  static ModelConfig clean();
  static ModelConfig noisy();
  static ModelConfig paper_clean();
  static ModelConfig paper_noisy();
  static ModelConfig preset(const std::string& name);
};

std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

// Named model weights. When source and target encoders are shared, every
// target_encoder.* entry holds the same storage as its source_encoder.* twin.
class Parameters {
 public:
  Parameters() = default;
  static Parameters initialize(const ModelConfig& cfg, Rng& rng);

  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const { return named_.count(name) > 0; }
  void set(const std::string& name, Tensor t) { named_[name] = std::move(t); }
  const std::map<std::string, Tensor>& named() const { return named_; }

  bool shared_src_tgt() const { return shared_src_tgt_; }
  void set_shared_src_tgt(bool shared) { shared_src_tgt_ = shared; }

  // One entry per distinct storage, in name order.
  ParameterSet unique() const;
  // Deep copy (sharing structure preserved).
  Parameters clone() const;

 private:
  std::map<std::string, Tensor> named_;
  bool shared_src_tgt_ = false;
};

std::map<std::string, Shape> expected_parameter_shapes(const ModelConfig& cfg);

struct ForwardOptions {
  bool training = false;  // enables dropout
  Rng* rng = nullptr;     // dropout source, required when training with dropout > 0
};

struct EncodedSequence {
  Tensor hidden;  // [B, T_total, H]
  std::size_t batch_size = 0;
  std::size_t image_slots = 0, src_slots = 0, tgt_slots = 0;
  std::vector<std::uint8_t> pad;  // [B * T_total]
  std::vector<std::uint8_t> target_sos;  // per item: target slot 0 holds [SOS]

  std::size_t total_slots() const { return image_slots + src_slots + tgt_slots; }
  // Start index of the V, X, Y segments.
  std::size_t image_offset() const { return 0; }
  std::size_t src_offset() const { return image_slots; }
  std::size_t tgt_offset() const { return image_slots + src_slots; }
};

// Image slots: linear(feature) + modality[IMG]. Token slots: token embedding
// + modality[SRC|TGT] + position[i], positions restarting per sentence.
Tensor embed_inputs(const MaskedBatch& batch, const Parameters& params, const ModelConfig& cfg);

// 1 where query row may attend to key column, [T_total, T_total].
Tensor build_attention_mask(TaskKind kind, const SegmentLengths& lengths, std::size_t image_slots,
                            std::size_t src_slots, std::size_t tgt_slots);
// Additive masks for every item, [B, 1, T_total, T_total].
Tensor build_batch_attention_mask(const MaskedBatch& batch);

struct AttentionWeights {
  Tensor q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b;
};

// Multi-head scaled dot-product self-attention; x [B, T, H], mask additive [B, 1, T, T].
Tensor self_attention(const Tensor& x, const Tensor& mask, const AttentionWeights& w, std::size_t heads);

// One post-norm transformer layer of stack `prefix` (e.g. "cross_encoder.layer0").
Tensor encoder_layer(const Tensor& x, const Tensor& mask, const Parameters& params, const std::string& prefix,
                     const ModelConfig& cfg, const ForwardOptions& opts);

EncodedSequence forward(const MaskedBatch& batch, const Parameters& params, const ModelConfig& cfg,
                        const ForwardOptions& opts = {});

// Rows are flat indices into [B * T_total]; each must be a token slot.
Tensor mlm_logits(const EncodedSequence& enc, std::span<const std::size_t> rows, const Parameters& params);
// sigmoid score per item from the target [SOS] state, [B].
Tensor match_score(const EncodedSequence& enc, const Parameters& params);
// Attribute logits per item from the target [SOS] state, [B, V_attr].
Tensor attribute_logits(const EncodedSequence& enc, const Parameters& params);

// Gives the target encoder its own deep copy of the source encoder weights.
// No-op when already separate or when there is no target encoder.
void split_shared_encoders(Parameters& params, const ModelConfig& cfg);

}  // namespace upoc2
