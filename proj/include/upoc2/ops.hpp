// Copyright 2026 The upoc2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "upoc2/rng.hpp"
#include "upoc2/tensor.hpp"

namespace upoc2 {

// Additive value placed on forbidden attention links.
inline constexpr Real kMaskedValue = -1e9;
// Mask entries at or below this are treated as forbidden.
inline constexpr Real kMaskedThreshold = -1e8;

// Matrix product.
//  * b of rank 2: a is [..., k], b is [k, n] (or [n, k] when transpose_b),
//    leading dims of a are flattened, result is [..., n].
//  * b of rank >= 3: batched over identical leading dims,
//    a [..., m, k] x b [..., k, n] -> [..., m, n].
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Real factor);
// x [..., n] + bias [n] broadcast over the leading dims.
Tensor add_bias(const Tensor& x, const Tensor& bias);
// x [.., n] @ weight [n, m] + bias [m].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

// Softmax over the last dimension. `mask` is additive and broadcastable to
// x (numpy rules). A slice whose entries are all masked is a contract error.
Tensor softmax_lastdim(const Tensor& x, const std::optional<Tensor>& mask = std::nullopt);
Tensor log_softmax_lastdim(const Tensor& x);

// Normalizes each last-dimension slice to zero mean, unit variance, then
// applies gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Real eps = 1e-5);

// Mean over labeled rows of -log softmax(logits)[label]. logits [..., V],
// one label per row; rows labeled `ignore_id` are skipped. All rows ignored
// gives exactly 0 with a zero gradient.
Tensor cross_entropy_masked(const Tensor& logits, std::span<const std::int64_t> labels,
                            std::int64_t ignore_id);

// Mean over elements of -[l log s + (1 - l) log(1 - s)].
Tensor binary_cross_entropy(const Tensor& scores, std::span<const int> labels);

// Rows of a rank-2 table: table [N, H], ids -> [ids.size(), H].
Tensor gather_rows(const Tensor& table, std::span<const std::int64_t> ids);
// Flat elements: x (any shape), indices -> [indices.size()].
Tensor pick(const Tensor& x, std::span<const std::size_t> indices);

Tensor reshape(const Tensor& x, Shape shape);
Tensor narrow(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);

// [B, T, H] -> [B, heads, T, H / heads] and back.
Tensor split_heads(const Tensor& x, std::size_t heads);
Tensor merge_heads(const Tensor& x);

// Inverted dropout; identity when rate == 0.
Tensor dropout(const Tensor& x, Real rate, Rng& rng);

}  // namespace upoc2
