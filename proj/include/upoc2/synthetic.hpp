// Copyright 2026 The upoc2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "upoc2/data.hpp"

namespace upoc2 {

// Toy product-description translation task. Each sentence names a colour, a
// material and the category noun, padded with filler words and "jargon"
// words. The target language maps every source type to one target type,
// except the K jargon types whose target depends on a hidden bit that only
// the image features reveal.
//
// Image features are concatenated one-hot blocks [colour | material | bit]
// plus N(0, sigma^2) noise, so every latent class has its own mean.
struct SynthSpec {
  std::size_t triplets = 500;
  std::size_t validation = 50;  // taken after the training triplets
  std::size_t test = 50;
  std::size_t categories = 4;
  std::size_t colors = 6;
  std::size_t materials = 6;
  std::size_t fillers = 24;
  std::size_t ambiguous = 8;  // K
  double ambiguous_rate = 0.3;  // chance that a free slot holds a jargon word
  std::size_t feature_dim = 16;
  double sigma = 0.1;
  std::size_t min_tokens = 4;
  std::size_t max_tokens = 12;
  std::size_t min_images = 1;
  std::size_t max_images = 4;

  // Throws ContractError naming the offending field.
  void validate() const;
};

Corpus generate_synthetic_corpus(const SynthSpec& spec, std::uint64_t seed);

// Same corpus with every image feature set to zero.
Corpus zero_image_features(Corpus corpus);

bool is_ambiguous_source_token(const std::string& token);

struct AmbiguityScore {
  std::size_t total = 0;
  std::size_t correct = 0;
  double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

// Position-wise check of jargon translations; the toy language is monotone,
// so hypothesis position i must equal reference position i.
AmbiguityScore score_ambiguous(const std::vector<Triplet>& triplets,
                               const std::vector<std::vector<std::string>>& hypotheses);

}  // namespace upoc2
