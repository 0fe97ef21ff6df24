// Copyright 2026 The upoc2 Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "upoc2/data.hpp"
#include "upoc2/errors.hpp"
#include "upoc2/synthetic.hpp"

namespace upoc2 {
namespace {

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("upoc2_data_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Triplet triplet(const std::string& id, std::vector<std::string> src, std::vector<std::string> tgt,
                std::size_t images = 1) {
  Triplet t;
  t.id = id;
  t.category = "dress";
  t.attributes = {"red"};
  t.src_tokens = std::move(src);
  t.tgt_tokens = std::move(tgt);
  for (std::size_t i = 0; i < images; ++i) {
    t.feature_ids.push_back(id + "_f" + std::to_string(i));
    t.image_features.push_back({0.25f * static_cast<float>(i), -1.0f, 3.5f});
  }
  return t;
}

Corpus corpus_of(std::vector<Triplet> ts) {
  Corpus c;
  c.triplets = std::move(ts);
  c.build_indexes();
  return c;
}

void save_all(const Corpus& c, const fs::path& dir) {
  save_corpus(c, dir / "corpus.jsonl");
  save_image_features(feature_table_of(c), dir / "features.bin");
}

TEST(Corpus, RoundTripPreservesFields) {
  const fs::path d = scratch_dir("rt");
  const Corpus c = corpus_of({triplet("a", {"red", "silk"}, {"~red", "~silk"}, 2), triplet("b", {"w1"}, {"~w1"}, 3)});
  save_all(c, d);
  const Corpus l = load_corpus(d / "corpus.jsonl", d / "features.bin");
  ASSERT_EQ(l.triplets.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    const auto &x = c.triplets[i], &y = l.triplets[i];
    EXPECT_EQ(x.id, y.id);
    EXPECT_EQ(x.category, y.category);
    EXPECT_EQ(x.attributes, y.attributes);
    EXPECT_EQ(x.src_tokens, y.src_tokens);
    EXPECT_EQ(x.tgt_tokens, y.tgt_tokens);
    EXPECT_EQ(x.feature_ids, y.feature_ids);
    EXPECT_EQ(x.image_features, y.image_features);
  }
  EXPECT_EQ(l.category_index.at("dress").size(), 2u);
}

TEST(Corpus, EmptyIsValid) {
  const fs::path d = scratch_dir("empty");
  save_all(Corpus{}, d);
  EXPECT_TRUE(load_corpus(d / "corpus.jsonl", d / "features.bin").triplets.empty());
}

TEST(Corpus, MissingFeatureNamesTriplet) {
  const fs::path d = scratch_dir("missing");
  save_all(corpus_of({triplet("a", {"x"}, {"y"})}), d);
  std::ofstream(d / "corpus.jsonl", std::ios::app)
      << R"({"id":"zz","category":"c","attributes":[],"src":["x"],"tgt":["y"],"feature_ids":["nope"]})" << "\n";
  try {
    load_corpus(d / "corpus.jsonl", d / "features.bin");
    FAIL();
  } catch (const FormatError& e) {
    const std::string m = e.what();
    EXPECT_NE(m.find("'zz'"), std::string::npos) << m;
    EXPECT_NE(m.find("nope"), std::string::npos) << m;
  }
}

TEST(Corpus, MalformedLineReportsLineNumber) {
  const fs::path d = scratch_dir("malformed");
  save_all(corpus_of({triplet("a", {"x"}, {"y"}), triplet("b", {"x"}, {"y"})}), d);
  std::ofstream(d / "corpus.jsonl", std::ios::app) << "{\"id\": 3,\n";
  try {
    load_corpus(d / "corpus.jsonl", d / "features.bin");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("corpus.jsonl:3"), std::string::npos) << e.what();
  }
}

TEST(Corpus, SplitsMustBeDisjointAndResolve) {
  Corpus c = corpus_of({triplet("a", {"x"}, {"y"}), triplet("b", {"x"}, {"y"})});
  c.splits.train = {"a"};
  c.splits.test = {"a"};
  EXPECT_THROW(c.build_indexes(), FormatError);
  c.splits.test = {"q"};
  EXPECT_THROW(c.build_indexes(), FormatError);
  c.splits.test = {"b"};
  c.build_indexes();
  EXPECT_EQ(c.subset("test").triplets.front().id, "b");
  const fs::path d = scratch_dir("splits");
  save_splits(c.splits, d / "s.json");
  EXPECT_EQ(load_splits(d / "s.json").test, c.splits.test);
}

TEST(Vocab, MinCountAndOrdering) {
  const Corpus c = corpus_of({triplet("a", {"a", "a", "b"}, {"q"}), triplet("b", {"a", "c"}, {"c"})});
  const Vocabulary v = build_vocab(c, 2);
  EXPECT_TRUE(v.contains("a"));
  EXPECT_TRUE(v.contains("c"));
  EXPECT_FALSE(v.contains("b"));
  EXPECT_EQ(v.id("b"), kUnkId);
  EXPECT_EQ(v.token(kNumReserved), "a");
  EXPECT_EQ(v.token(kNumReserved + 1), "c");
  const Vocabulary all = build_vocab(c, 1);
  // Ties broken alphabetically; target-only "q" shares the table.
  EXPECT_EQ(all.tokens(), (std::vector<std::string>{"[PAD]", "[SOS]", "[EOS]", "[MASK]", "[UNK]", "a", "c", "b", "q"}));
  EXPECT_EQ(build_vocab(c, 1), all);
  EXPECT_THROW(build_vocab(c, 0), ContractError);
}

TEST(Vocab, SaveLoad) {
  const fs::path d = scratch_dir("vocab");
  const Vocabulary v(std::vector<std::string>{"x", "y", "~x"});
  save_vocab(v, d / "v.txt");
  EXPECT_EQ(load_vocab(d / "v.txt"), v);
}

TEST(Collate, LengthsThreeAndFive) {
  const Vocabulary v(std::vector<std::string>{"a", "b", "c", "d", "e"});
  const Corpus c = corpus_of({triplet("p", {"a", "b", "c"}, {"a"}, 1), triplet("q", {"a", "b", "c", "d", "e"}, {"b"}, 3)});
  const MaskedBatch b = collate(c.triplets, v, {});
  EXPECT_EQ(b.src_slots, 7u);
  EXPECT_EQ(b.image_slots, 3u);
  const std::size_t ts = b.token_slots();
  std::size_t pads = 0;
  for (std::size_t k = 0; k < b.src_slots; ++k) pads += b.input_ids[k] == kPadId;
  EXPECT_EQ(pads, 2u);
  EXPECT_EQ(b.input_ids[0], kSosId);
  EXPECT_EQ(b.input_ids[4], kEosId);
  EXPECT_EQ(b.input_ids[ts + 6], kEosId);
  // Pad flags: image slots 1-2 of item 0 and its two source pads.
  const auto pad = b.pad_flags();
  EXPECT_EQ(pad[0], 0);
  EXPECT_EQ(pad[1], 1);
  EXPECT_EQ(pad[2], 1);
  EXPECT_EQ(pad[b.row_of_token_slot(0, 5)], 1);
  EXPECT_EQ(pad[b.row_of_token_slot(0, 6)], 1);
  EXPECT_EQ(pad[b.row_of_token_slot(1, 6)], 0);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(b.image_features[1 * b.feature_dim + k], 0.0);
    EXPECT_EQ(b.image_features[2 * b.feature_dim + k], 0.0);
  }
  // Modality and restarted position ids.
  const std::size_t n = b.total_slots();
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(b.modality_ids[n + k], kImageModality);
    EXPECT_EQ(b.position_ids[n + k], 0);
  }
  for (std::size_t k = 0; k < 7; ++k) {
    EXPECT_EQ(b.modality_ids[n + 3 + k], kSourceModality);
    EXPECT_EQ(b.position_ids[n + 3 + k], static_cast<std::int64_t>(k));
  }
  EXPECT_EQ(b.modality_ids[n + 3 + 7], kTargetModality);
  EXPECT_EQ(b.position_ids[n + 3 + 7], 0);
}

TEST(Collate, EmptyTargetIsJustSos) {
  const Vocabulary v(std::vector<std::string>{"a"});
  Example ex = make_example(triplet("p", {"a"}, {}), v, {});
  ex.tgt_ids = {kSosId};
  ex.tgt_labels = {kIgnoreId};
  const MaskedBatch b = collate({ex}, TaskKind::kPmt);
  EXPECT_EQ(b.tgt_slots, 1u);
  EXPECT_EQ(b.input_ids[b.src_slots], kSosId);
}

TEST(Collate, TruncationKeepsSpecialsAndFlags) {
  const Vocabulary v(std::vector<std::string>{"a", "b", "c", "d"});
  SequenceLimits lim;
  lim.max_src_tokens = 2;
  lim.max_images = 1;
  const Example ex = make_example(triplet("p", {"a", "b", "c", "d"}, {"a"}, 3), v, lim);
  EXPECT_EQ(ex.src_ids, (std::vector<std::int64_t>{kSosId, v.id("a"), v.id("b"), kEosId}));
  EXPECT_EQ(ex.images.size(), 1u);
  EXPECT_TRUE(ex.truncated);
  EXPECT_FALSE(make_example(triplet("q", {"a"}, {"a"}), v, lim).truncated);
}

TEST(Collate, IdempotentOnEqualLengths) {
  const Vocabulary v(std::vector<std::string>{"a", "b"});
  const Corpus c = corpus_of({triplet("p", {"a", "b"}, {"a"}, 2), triplet("q", {"b", "a"}, {"b"}, 2)});
  const MaskedBatch b = collate(c.triplets, v, {});
  std::vector<Example> ex;
  for (const auto& t : c.triplets) ex.push_back(make_example(t, v, {}));
  const MaskedBatch again = collate(ex, TaskKind::kMtlm);
  EXPECT_EQ(b.input_ids, again.input_ids);
  EXPECT_EQ(b.image_features, again.image_features);
  EXPECT_EQ(b.src_slots, 4u);
}

TEST(Features, EmptyAndRoundTrip) {
  const fs::path d = scratch_dir("feat");
  save_image_features(FeatureTable(7), d / "e.bin");
  EXPECT_EQ(load_image_features(d / "e.bin").size(), 0u);
  FeatureTable t(3);
  t.add("x", {1.0f, -0.0f, 1e-30f});
  t.add("y", {3.25f, std::nextafter(1.0f, 2.0f), -7.0f});
  t.add("z", {0.1f, 0.2f, 0.3f});
  save_image_features(t, d / "t.bin");
  const FeatureTable l = load_image_features(d / "t.bin");
  ASSERT_EQ(l.ids(), t.ids());
  for (const auto& id : t.ids()) {
    const auto &a = *t.find(id), &b = *l.find(id);
    ASSERT_EQ(a.size(), b.size());
    EXPECT_EQ(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)), 0);
  }
  const std::string raw = slurp(d / "t.bin");
  EXPECT_EQ(raw.substr(0, 8), "UPOCFEAT");
}

TEST(Features, TruncatedPayloadReportsOffset) {
  const fs::path d = scratch_dir("trunc");
  FeatureTable t(512);
  t.add("v", std::vector<float>(512, 0.5f));
  save_image_features(t, d / "t.bin");
  fs::resize_file(d / "t.bin", fs::file_size(d / "t.bin") - 4);
  try {
    load_image_features(d / "t.bin");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("byte offset"), std::string::npos) << e.what();
  }
  std::string raw = slurp(d / "t.bin");
  raw[0] = 'X';
  std::ofstream(d / "bad.bin", std::ios::binary) << raw;
  EXPECT_THROW(load_image_features(d / "bad.bin"), FormatError);
}

TEST(Synthetic, ByteIdenticalUnderSeed) {
  SynthSpec s;
  s.triplets = 200;
  const fs::path a = scratch_dir("syn_a"), b = scratch_dir("syn_b");
  save_all(generate_synthetic_corpus(s, 7), a);
  save_all(generate_synthetic_corpus(s, 7), b);
  EXPECT_EQ(slurp(a / "corpus.jsonl"), slurp(b / "corpus.jsonl"));
  EXPECT_EQ(slurp(a / "features.bin"), slurp(b / "features.bin"));
  save_all(generate_synthetic_corpus(s, 8), b);
  EXPECT_NE(slurp(a / "corpus.jsonl"), slurp(b / "corpus.jsonl"));
}

TEST(Synthetic, SpecErrors) {
  SynthSpec s;
  s.sigma = -0.1;
  EXPECT_THROW(generate_synthetic_corpus(s, 1), ContractError);
  s = SynthSpec{};
  s.feature_dim = 4;
  EXPECT_THROW(generate_synthetic_corpus(s, 1), ContractError);
}

TEST(Synthetic, StructuralContract) {
  SynthSpec s;
  s.triplets = 400;
  const Corpus c = generate_synthetic_corpus(s, 3);
  EXPECT_EQ(c.splits.train.size(), 300u);
  EXPECT_EQ(c.splits.validation.size(), 50u);
  EXPECT_EQ(c.splits.test.size(), 50u);
  std::set<std::string> attrs;
  for (std::size_t i = 0; i < c.triplets.size(); ++i) {
    const auto& t = c.triplets[i];
    EXPECT_GE(t.src_tokens.size(), 4u);
    EXPECT_LE(t.src_tokens.size(), 12u);
    EXPECT_EQ(t.src_tokens.size(), t.tgt_tokens.size());
    EXPECT_GE(t.image_features.size(), 1u);
    EXPECT_LE(t.image_features.size(), 4u);
    EXPECT_EQ(t.category, c.triplets[i % 4].category);
    for (const auto& a : t.attributes) {
      EXPECT_NE(std::find(t.src_tokens.begin(), t.src_tokens.end(), a), t.src_tokens.end());
      attrs.insert(a);
    }
  }
  EXPECT_EQ(attrs.size(), s.colors + s.materials);
  EXPECT_EQ(c.attribute_vocab.size(), attrs.size());
}

TEST(Synthetic, MappingIsFunctionalExceptJargon) {
  SynthSpec s;
  s.triplets = 2000;
  const Corpus c = generate_synthetic_corpus(s, 4);
  std::map<std::string, std::set<std::string>> images;
  for (const auto& t : c.triplets)
    for (std::size_t k = 0; k < t.src_tokens.size(); ++k) images[t.src_tokens[k]].insert(t.tgt_tokens[k]);
  std::size_t ambiguous = 0;
  for (const auto& [src, tgts] : images) {
    if (is_ambiguous_source_token(src)) {
      ++ambiguous;
      EXPECT_EQ(tgts.size(), 2u) << src;
    } else {
      EXPECT_EQ(tgts.size(), 1u) << src;
    }
  }
  EXPECT_EQ(ambiguous, s.ambiguous);

  s.ambiguous = 0;
  const Corpus plain = generate_synthetic_corpus(s, 4);
  std::map<std::string, std::set<std::string>> fwd, back;
  for (const auto& t : plain.triplets)
    for (std::size_t k = 0; k < t.src_tokens.size(); ++k) {
      fwd[t.src_tokens[k]].insert(t.tgt_tokens[k]);
      back[t.tgt_tokens[k]].insert(t.src_tokens[k]);
    }
  for (const auto& [k, v] : fwd) EXPECT_EQ(v.size(), 1u) << k;
  for (const auto& [k, v] : back) EXPECT_EQ(v.size(), 1u) << k;
}

// Empirical source-token marginals against the generator's distribution.
TEST(Synthetic, SourceMarginals) {
  SynthSpec s;
  s.triplets = 4000;
  const Corpus c = generate_synthetic_corpus(s, 5);
  std::map<std::string, double> count;
  double free_slots = 0, total = 0;
  for (const auto& t : c.triplets) {
    for (const auto& w : t.src_tokens) count[w] += 1;
    free_slots += static_cast<double>(t.src_tokens.size() - 3);
    total += static_cast<double>(t.src_tokens.size());
  }
  const double n = static_cast<double>(c.triplets.size());
  EXPECT_NEAR(total / n, 8.0, 0.15);  // uniform on 4..12
  auto within = [](double observed, double expected) {
    EXPECT_NEAR(observed, expected, 5 * std::sqrt(expected)) << "expected " << expected;
  };
  for (const char* w : {"red", "blue", "green", "black", "white", "pink"}) within(count[w], n / 6);
  for (const char* w : {"cotton", "silk"}) within(count[w], n / 6);
  for (std::size_t k = 0; k < s.ambiguous; ++k) within(count["j" + std::to_string(k)], free_slots * 0.3 / 8);
  for (std::size_t k = 0; k < s.fillers; ++k) within(count["w" + std::to_string(k)], free_slots * 0.7 / 24);
}

TEST(Synthetic, ClassesSeparatedInFeatureSpace) {
  SynthSpec s;
  s.triplets = 1000;
  const Corpus c = generate_synthetic_corpus(s, 6);
  const std::size_t bit_col = s.colors + s.materials;
  double sum[2][2] = {{0, 0}, {0, 0}};
  double cnt[2] = {0, 0};
  std::size_t both[2] = {0, 0};
  for (const auto& t : c.triplets) {
    int bit = -1;
    for (const auto& w : t.tgt_tokens) {
      if (w.size() > 2 && w[1] == 'j') bit = w.back() == 'b';
    }
    if (bit < 0) continue;
    ++both[bit];
    for (const auto& v : t.image_features) {
      sum[bit][0] += v[bit_col];
      sum[bit][1] += v[bit_col + 1];
      cnt[bit] += 1;
    }
  }
  EXPECT_GT(both[0], 0u);
  EXPECT_GT(both[1], 0u);
  EXPECT_NEAR(sum[0][0] / cnt[0], 1.0, 0.02);
  EXPECT_NEAR(sum[0][1] / cnt[0], 0.0, 0.02);
  EXPECT_NEAR(sum[1][0] / cnt[1], 0.0, 0.02);
  EXPECT_NEAR(sum[1][1] / cnt[1], 1.0, 0.02);
  const Corpus z = zero_image_features(c);
  for (const auto& t : z.triplets)
    for (const auto& v : t.image_features)
      for (float x : v) EXPECT_EQ(x, 0.0f);
}

TEST(Synthetic, AmbiguityScoring) {
  Triplet t;
  t.src_tokens = {"w1", "j2", "j0"};
  t.tgt_tokens = {"~w1", "~j2a", "~j0a"};
  const AmbiguityScore s = score_ambiguous({t}, {{"~w1", "~j2a", "~j0b"}});
  EXPECT_EQ(s.total, 2u);
  EXPECT_EQ(s.correct, 1u);
  EXPECT_EQ(score_ambiguous({t}, {{"~w1"}}).correct, 0u);
  EXPECT_TRUE(is_ambiguous_source_token("j12"));
  EXPECT_FALSE(is_ambiguous_source_token("jx"));
  EXPECT_FALSE(is_ambiguous_source_token("w3"));
}

}  // namespace
}  // namespace upoc2
