// Copyright 2026 The upoc2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "upoc2/batch.hpp"

namespace upoc2 {

struct Triplet {
  std::string id;
  std::string category;
  std::vector<std::string> attributes;
  std::vector<std::string> src_tokens;
  std::vector<std::string> tgt_tokens;
  std::vector<std::string> feature_ids;
  std::vector<std::vector<float>> image_features;  // resolved from feature_ids
};

// Shared source/target token table. Ids 0..4 are [PAD] [SOS] [EOS] [MASK] [UNK].
class Vocabulary {
 public:
  Vocabulary();
  explicit Vocabulary(const std::vector<std::string>& regular_tokens);

  std::int64_t id(const std::string& token) const;  // [UNK] when absent
  bool contains(const std::string& token) const { return index_.count(token) > 0; }
  const std::string& token(std::int64_t id) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<std::int64_t> encode(const std::vector<std::string>& tokens) const;
  std::vector<std::string> decode(const std::vector<std::int64_t>& ids) const;

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int64_t> index_;
};

// Sorted attribute labels; ids are positions in the sorted list.
class AttributeVocabulary {
 public:
  AttributeVocabulary() = default;
  explicit AttributeVocabulary(std::vector<std::string> labels);
  std::optional<std::int64_t> id(const std::string& label) const;
  const std::vector<std::string>& labels() const { return labels_; }
  std::size_t size() const { return labels_.size(); }

 private:
  std::vector<std::string> labels_;
  std::unordered_map<std::string, std::int64_t> index_;
};

struct Splits {
  std::vector<std::string> train, validation, test;
};

class FeatureTable {
 public:
  FeatureTable() = default;
  explicit FeatureTable(std::size_t dim) : dim_(dim) {}
  std::size_t dim() const { return dim_; }
  std::size_t size() const { return ids_.size(); }
  void add(const std::string& id, std::vector<float> vector);  // duplicate id is an error
  const std::vector<float>* find(const std::string& id) const;
  const std::vector<std::string>& ids() const { return ids_; }

 private:
  std::size_t dim_ = 0;
  std::vector<std::string> ids_;
  std::unordered_map<std::string, std::vector<float>> vectors_;
};

struct Corpus {
  std::vector<Triplet> triplets;
  Splits splits;
  std::map<std::string, std::vector<std::size_t>> category_index;
  std::unordered_map<std::string, std::size_t> id_index;
  AttributeVocabulary attribute_vocab;

  // Rebuilds the category/id indexes and attribute vocabulary; checks splits.
  void build_indexes();
  // Triplets of one split ("train", "validation", "test"), indexes rebuilt.
  Corpus subset(const std::string& split) const;
  std::size_t feature_dim() const;
};

// Maximum lengths. Sentence limits exclude [SOS]/[EOS].
struct SequenceLimits {
  std::size_t max_images = 8;
  std::size_t max_src_tokens = 16;
  std::size_t max_tgt_tokens = 16;
};

Corpus load_corpus(const std::filesystem::path& corpus_path, const std::filesystem::path& features_path);
void save_corpus(const Corpus& corpus, const std::filesystem::path& corpus_path);
FeatureTable feature_table_of(const Corpus& corpus);
Splits load_splits(const std::filesystem::path& path);
void save_splits(const Splits& splits, const std::filesystem::path& path);

FeatureTable load_image_features(const std::filesystem::path& path);
void save_image_features(const FeatureTable& table, const std::filesystem::path& path);

// Token types across both languages with count >= min_count, ordered by
// (count desc, token asc).
Vocabulary build_vocab(const Corpus& corpus, std::size_t min_count = 1);
void save_vocab(const Vocabulary& vocab, const std::filesystem::path& path);
Vocabulary load_vocab(const std::filesystem::path& path);

std::vector<std::string> tokenize(const std::string& text);

// Adds specials, maps tokens, truncates to the limits (flagged).
Example make_example(const Triplet& triplet, const Vocabulary& vocab, const SequenceLimits& limits);
// Pads a list of examples to common slot counts.
MaskedBatch collate(const std::vector<Example>& examples, TaskKind task);
MaskedBatch collate(const std::vector<Triplet>& triplets, const Vocabulary& vocab, const SequenceLimits& limits);

}  // namespace upoc2
