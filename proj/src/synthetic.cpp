// Copyright 2026 The upoc2 Authors
// SPDX-License-Identifier: Apache-2.0

#include "upoc2/synthetic.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>

#include "upoc2/errors.hpp"
#include "upoc2/rng.hpp"

namespace upoc2 {

namespace {

const std::vector<std::string> kColors = {"red", "blue", "green", "black", "white", "pink",
                                          "grey", "brown", "navy", "beige", "gold", "purple"};
const std::vector<std::string> kMaterials = {"cotton", "silk", "denim", "wool", "linen", "leather",
                                             "velvet", "satin", "lace", "chiffon", "knit", "suede"};
const std::vector<std::string> kNouns = {"dress", "shirt", "skirt", "coat", "jacket", "sweater",
                                         "blouse", "jeans", "scarf", "boots"};

std::string named(const std::vector<std::string>& list, std::size_t i, const char* stem) {
  return i < list.size() ? list[i] : stem + std::to_string(i);
}

std::string target_of(const std::string& src) { return "~" + src; }

std::string id_of(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "syn%05zu", i);
  return buf;
}

}  // namespace

void SynthSpec::validate() const {
  auto fail = [](const std::string& what) { throw ContractError("synthetic spec: " + what); };
  if (sigma < 0) fail("sigma must be >= 0");
  if (categories == 0) fail("categories must be positive");
  if (colors == 0 || materials == 0) fail("colors and materials must be positive");
  if (fillers == 0 && ambiguous == 0) fail("need filler or ambiguous word types");
  if (ambiguous_rate < 0 || ambiguous_rate > 1) fail("ambiguous_rate must lie in [0, 1]");
  if (min_tokens < 3 || min_tokens > max_tokens) fail("need 3 <= min_tokens <= max_tokens");
  if (min_images == 0 || min_images > max_images) fail("need 1 <= min_images <= max_images");
  if (feature_dim < colors + materials + 2) {
    fail("feature_dim must be at least colors + materials + 2 (" + std::to_string(colors + materials + 2) + ")");
  }
  if (validation + test > triplets) fail("validation + test exceed triplets");
}

Corpus generate_synthetic_corpus(const SynthSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  Corpus corpus;
  const std::size_t n_train = spec.triplets - spec.validation - spec.test;
  for (std::size_t i = 0; i < spec.triplets; ++i) {
    Triplet t;
    t.id = id_of(i);
    const std::size_t category = i % spec.categories;
    t.category = named(kNouns, category, "item");
    const std::size_t color = rng.uniform_int(spec.colors);
    const std::size_t material = rng.uniform_int(spec.materials);
    const std::size_t bit = rng.uniform_int(2);
    const std::string color_word = named(kColors, color, "color");
    const std::string material_word = named(kMaterials, material, "fabric");
    t.attributes = {color_word, material_word};

    const std::size_t length = spec.min_tokens + rng.uniform_int(spec.max_tokens - spec.min_tokens + 1);
    std::vector<std::string> words = {color_word, material_word, t.category};
    while (words.size() < length) {
      const bool jargon = spec.ambiguous > 0 && (spec.fillers == 0 || rng.uniform() < spec.ambiguous_rate);
      if (jargon) {
        words.push_back("j" + std::to_string(rng.uniform_int(spec.ambiguous)));
      } else {
        words.push_back("w" + std::to_string(rng.uniform_int(spec.fillers)));
      }
    }
    for (std::size_t k = words.size(); k > 1; --k) std::swap(words[k - 1], words[rng.uniform_int(k)]);
    t.src_tokens = words;
    for (const auto& w : words) {
      t.tgt_tokens.push_back(is_ambiguous_source_token(w) ? target_of(w) + (bit ? "b" : "a") : target_of(w));
    }

    const std::size_t n_images = spec.min_images + rng.uniform_int(spec.max_images - spec.min_images + 1);
    for (std::size_t j = 0; j < n_images; ++j) {
      std::vector<float> v(spec.feature_dim);
      for (auto& x : v) x = static_cast<float>(spec.sigma * rng.normal());
      v[color] += 1.0f;
      v[spec.colors + material] += 1.0f;
      v[spec.colors + spec.materials + bit] += 1.0f;
      t.feature_ids.push_back(t.id + "_img" + std::to_string(j));
      t.image_features.push_back(std::move(v));
    }
    if (i < n_train) {
      corpus.splits.train.push_back(t.id);
    } else if (i < n_train + spec.validation) {
      corpus.splits.validation.push_back(t.id);
    } else {
      corpus.splits.test.push_back(t.id);
    }
    corpus.triplets.push_back(std::move(t));
  }
  corpus.build_indexes();
  return corpus;
}

Corpus zero_image_features(Corpus corpus) {
  for (auto& t : corpus.triplets) {
    for (auto& v : t.image_features) std::fill(v.begin(), v.end(), 0.0f);
  }
  return corpus;
}

bool is_ambiguous_source_token(const std::string& token) {
  if (token.size() < 2 || token[0] != 'j') return false;
  return std::all_of(token.begin() + 1, token.end(), [](unsigned char c) { return std::isdigit(c); });
}

AmbiguityScore score_ambiguous(const std::vector<Triplet>& triplets,
                               const std::vector<std::vector<std::string>>& hypotheses) {
  if (triplets.size() != hypotheses.size()) throw ContractError("score_ambiguous: count mismatch");
  AmbiguityScore s;
  for (std::size_t i = 0; i < triplets.size(); ++i) {
    const auto& t = triplets[i];
    for (std::size_t p = 0; p < t.src_tokens.size() && p < t.tgt_tokens.size(); ++p) {
      if (!is_ambiguous_source_token(t.src_tokens[p])) continue;
      ++s.total;
      if (p < hypotheses[i].size() && hypotheses[i][p] == t.tgt_tokens[p]) ++s.correct;
    }
  }
  return s;
}

}  // namespace upoc2
