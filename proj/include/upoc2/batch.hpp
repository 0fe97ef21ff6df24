// Copyright 2026 The upoc2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "upoc2/tensor.hpp"

namespace upoc2 {

enum class TaskKind { kMtlm = 0, kIsm = 1, kAttp = 2, kPmt = 3 };

inline constexpr std::int64_t kIgnoreId = -1;

// Reserved vocabulary ids.
inline constexpr std::int64_t kPadId = 0;
inline constexpr std::int64_t kSosId = 1;
inline constexpr std::int64_t kEosId = 2;
inline constexpr std::int64_t kMaskId = 3;
inline constexpr std::int64_t kUnkId = 4;
inline constexpr std::int64_t kNumReserved = 5;

// Modality rows.
inline constexpr std::int64_t kImageModality = 0;
inline constexpr std::int64_t kSourceModality = 1;
inline constexpr std::int64_t kTargetModality = 2;

std::string task_name(TaskKind kind);
TaskKind parse_task(const std::string& name);

// One sample before padding. Sentences include their [SOS]/[EOS].
struct Example {
  std::vector<std::vector<float>> images;
  std::vector<std::int64_t> src_ids;
  std::vector<std::int64_t> tgt_ids;
  // Original ids at prediction positions, kIgnoreId elsewhere; parallel to the ids.
  std::vector<std::int64_t> src_labels;
  std::vector<std::int64_t> tgt_labels;
  int match_label = -1;
  std::vector<std::int64_t> attr_labels;
  bool truncated = false;
};

// Per-item segment lengths, counting specials; image_count counts feature vectors.
struct SegmentLengths {
  std::size_t image_count = 0;
  std::size_t src_length = 0;
  std::size_t tgt_length = 0;
};

// Padded model input for a single task. Every item occupies
// image_slots + src_slots + tgt_slots positions laid out as [V | X | Y].
struct MaskedBatch {
  TaskKind task = TaskKind::kMtlm;
  std::size_t batch_size = 0;
  std::size_t image_slots = 0;
  std::size_t src_slots = 0;
  std::size_t tgt_slots = 0;
  std::size_t feature_dim = 0;

  std::vector<Real> image_features;  // [B, image_slots, feature_dim], zero in pad slots
  std::vector<SegmentLengths> lengths;
  std::vector<std::int64_t> input_ids;     // [B, src_slots + tgt_slots]
  std::vector<std::int64_t> modality_ids;  // [B, total_slots]
  std::vector<std::int64_t> position_ids;  // [B, total_slots], 0 on image slots
  std::vector<std::int64_t> mlm_labels;    // [B, src_slots + tgt_slots]
  std::vector<int> match_labels;           // ISM
  std::vector<std::vector<std::int64_t>> attr_labels;  // ATTP
  std::vector<std::uint8_t> truncated;

  std::size_t token_slots() const { return src_slots + tgt_slots; }
  std::size_t total_slots() const { return image_slots + src_slots + tgt_slots; }
  // Row index into the flattened [B * total_slots] hidden states.
  std::size_t row_of_token_slot(std::size_t item, std::size_t token_slot) const {
    return item * total_slots() + image_slots + token_slot;
  }
  std::size_t target_sos_row(std::size_t item) const { return row_of_token_slot(item, src_slots); }
  // 1 where a position is padding, [B * total_slots].
  std::vector<std::uint8_t> pad_flags() const;
};

}  // namespace upoc2
