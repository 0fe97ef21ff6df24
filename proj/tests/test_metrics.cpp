// Copyright 2026 The upoc2 Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "metric_oracles.hpp"
#include "test_util.hpp"
#include "upoc2/decode.hpp"
#include "upoc2/errors.hpp"
#include "upoc2/metrics.hpp"
#include "upoc2/objectives.hpp"
#include "upoc2/ops.hpp"

namespace upoc2 {
namespace {

TokenList toks(const std::string& s) { return tokenize(s); }

TEST(Bleu, IdentityIsOne) {
  const std::vector<TokenList> h = {toks("a b c d e"), toks("x y z w")};
  const BleuResult r = bleu(h, h);
  for (int n = 1; n <= 4; ++n) EXPECT_DOUBLE_EQ(r.bleu[n], 1.0);
  EXPECT_DOUBLE_EQ(r.brevity_penalty, 1.0);
  EXPECT_FALSE(r.smoothed);
}

TEST(Bleu, ClippedUnigram) {
  const BleuResult r = bleu({toks("the the the")}, {toks("the cat")});
  EXPECT_EQ(r.matches[1], 1u);
  EXPECT_EQ(r.totals[1], 3u);
  EXPECT_NEAR(r.bleu[1], 1.0 / 3.0, 1e-12);
  // Bigram precision is zero, so n >= 2 use add-one counts: 1/3, 1/2, 1/1.
  EXPECT_TRUE(r.smoothed);
  EXPECT_NEAR(r.bleu[2], 1.0 / 3.0, 1e-12);
  EXPECT_NEAR(r.bleu[3], std::cbrt(1.0 / 18.0), 1e-12);
  EXPECT_NEAR(r.bleu[4], std::pow(1.0 / 18.0, 0.25), 1e-12);
}

TEST(Bleu, BrevityPenalty) {
  const BleuResult r = bleu({toks("a b c d")}, {toks("a b c d e")});
  EXPECT_NEAR(r.brevity_penalty, 0.7788007830714049, 1e-12);
  EXPECT_NEAR(r.bleu[4], r.brevity_penalty, 1e-12);
  EXPECT_DOUBLE_EQ(bleu({TokenList{}}, {toks("a")}).bleu[1], 0.0);
}

TEST(Bleu, CorpusLevelPooling) {
  const BleuResult r = bleu({toks("a b c"), toks("x y")}, {toks("a b d"), toks("x y")});
  // p1 4/5, p2 2/3 -> 3/4 and p3 0/1 -> 1/2 after add-one, p4 1/1.
  EXPECT_TRUE(r.smoothed);
  EXPECT_NEAR(r.bleu[1], 0.8, 1e-12);
  EXPECT_NEAR(r.bleu[2], std::sqrt(0.8 * 0.75), 1e-12);
  EXPECT_NEAR(r.bleu[4], std::pow(0.3, 0.25), 1e-12);
}

// Pooled precisions can rise with n, so BLEU@2 exceeds BLEU@1 here.
TEST(Bleu, HigherOrderCanExceedLower) {
  const BleuResult r = bleu({toks("x"), toks("a b")}, {toks("y"), toks("a b")}, 2);
  EXPECT_FALSE(r.smoothed);
  EXPECT_NEAR(r.bleu[1], 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(r.bleu[2], std::sqrt(2.0 / 3.0), 1e-12);
  EXPECT_GT(r.bleu[2], r.bleu[1]);
}

TEST(Bleu, Errors) {
  EXPECT_THROW(bleu({}, {}), ContractError);
  EXPECT_THROW(bleu({toks("a")}, {}), ContractError);
}

TEST(Bleu, SegmentOrderInvariance) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<TokenList> h, r;
    for (int s = 0; s < 6; ++s) {
      TokenList a, b;
      const auto la = 1 + rng.uniform_int(6), lb = 1 + rng.uniform_int(6);
      for (std::size_t i = 0; i < la; ++i) a.push_back(std::string(1, static_cast<char>('a' + rng.uniform_int(4))));
      for (std::size_t i = 0; i < lb; ++i) b.push_back(std::string(1, static_cast<char>('a' + rng.uniform_int(4))));
      h.push_back(a);
      r.push_back(b);
    }
    const BleuResult x = bleu(h, r);
    std::vector<std::size_t> perm = {5, 2, 0, 4, 1, 3};
    std::vector<TokenList> hp, rp;
    for (auto i : perm) {
      hp.push_back(h[i]);
      rp.push_back(r[i]);
    }
    const BleuResult y = bleu(hp, rp);
    for (int n = 1; n <= 4; ++n) EXPECT_DOUBLE_EQ(x.bleu[n], y.bleu[n]);
    for (int n = 1; n <= 4; ++n) EXPECT_GE(x.bleu[n], 0.0);
    for (int n = 1; n <= 4; ++n) EXPECT_LE(x.bleu[n], 1.0);
  }
}

TEST(Bleu, IdentityUpToShortestLength) {
  const std::vector<TokenList> h = {toks("a b"), toks("c d e f")};
  const BleuResult r = bleu(h, h, 2);
  EXPECT_DOUBLE_EQ(r.bleu[1], 1.0);
  EXPECT_DOUBLE_EQ(r.bleu[2], 1.0);
}

TEST(Cider, MatchesBruteForceOracle) {
  const std::vector<TokenList> h = {toks("a red silk dress with buttons"), toks("blue cotton shirt"),
                                    toks("a red dress")};
  const std::vector<std::vector<TokenList>> r = {
      {toks("a red silk dress with long buttons"), toks("red silk dress")},
      {toks("a blue cotton shirt for men")},
      {toks("the red dress"), toks("a red skirt"), toks("red dress a")}};
  EXPECT_NEAR(cider(h, r), testing::cider_oracle(h, r), 1e-6);
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<TokenList> hh;
    std::vector<std::vector<TokenList>> rr;
    for (int s = 0; s < 3; ++s) {
      auto sent = [&] {
        TokenList t;
        const auto len = rng.uniform_int(7);
        for (std::size_t i = 0; i < len; ++i) t.push_back(std::string(1, static_cast<char>('a' + rng.uniform_int(5))));
        return t;
      };
      hh.push_back(sent());
      rr.push_back({});
      for (std::size_t k = 0; k < 1 + rng.uniform_int(3); ++k) rr.back().push_back(sent());
    }
    EXPECT_NEAR(cider(hh, rr), testing::cider_oracle(hh, rr), 1e-6);
  }
}

TEST(Cider, IdentityAndDisjoint) {
  const std::vector<TokenList> h = {toks("a b c d"), toks("e f g h"), toks("i j k l")};
  std::vector<std::vector<TokenList>> r;
  for (const auto& x : h) r.push_back({x});
  for (double s : cider_segments(h, r)) EXPECT_NEAR(s, 10.0, 1e-12);
  const std::vector<TokenList> other = {toks("m n"), toks("o p"), toks("q r")};
  EXPECT_DOUBLE_EQ(cider(other, r), 0.0);
  EXPECT_DOUBLE_EQ(cider_segments({TokenList{}, h[1], h[2]}, r)[0], 0.0);
}

TEST(Cider, OrderInvarianceAndErrors) {
  const std::vector<TokenList> h = {toks("a b"), toks("b c d"), toks("a c")};
  const std::vector<std::vector<TokenList>> r = {{toks("a b c")}, {toks("b c")}, {toks("c a")}};
  const auto s = cider_segments(h, r);
  const auto p = cider_segments({h[2], h[0], h[1]}, {r[2], r[0], r[1]});
  EXPECT_NEAR(s[0], p[1], 1e-12);
  EXPECT_NEAR(s[1], p[2], 1e-12);
  EXPECT_NEAR(s[2], p[0], 1e-12);
  EXPECT_THROW(cider({}, {}), ContractError);
}

TEST(Report, JsonFields) {
  const MetricsReport m = score_corpus({toks("a b c d")}, {toks("a b c d")});
  const std::string j = report_to_json(m);
  for (const char* key : {"\"bleu\"", "\"1\"", "\"4\"", "\"brevity_penalty\"", "\"cider\"", "\"n_segments\"",
                          "\"smoothed\""}) {
    EXPECT_NE(j.find(key), std::string::npos) << key;
  }
  EXPECT_EQ(m.n_segments, 1u);
}

TEST(Decode, MaxLenOneAndDeterminism) {
  const auto f = testing::make_fixture();
  Rng rng(2);
  const Parameters p = Parameters::initialize(f.cfg, rng);
  const auto& t = f.corpus.triplets[0];
  DecodeConfig d;
  d.max_len = 1;
  EXPECT_LE(translate(p, f.cfg, f.vocab, t.image_features, t.src_tokens, d).ids.size(), 1u);
  d.max_len = 6;
  const Translation a = translate(p, f.cfg, f.vocab, t.image_features, t.src_tokens, d);
  const Translation b = translate(p, f.cfg, f.vocab, t.image_features, t.src_tokens, d);
  EXPECT_EQ(a.ids, b.ids);
  EXPECT_LE(a.ids.size(), 6u);
  for (auto id : a.ids) {
    EXPECT_GE(id, kEosId);
    EXPECT_NE(id, kMaskId);
  }
  EXPECT_EQ(a.terminated, a.ids.size() < 6u);
  d.max_len = 0;
  EXPECT_THROW(d.validate(), ContractError);
}

TEST(Decode, EvaluationIndependentOfWorkers) {
  const auto f = testing::make_fixture();
  Rng rng(2);
  const Parameters p = Parameters::initialize(f.cfg, rng);
  DecodeConfig d;
  d.mode = DecodeMode::kSample;
  d.temperature = 2.0;
  d.seed = 5;
  d.max_len = 5;
  const std::vector<Triplet> ts(f.corpus.triplets.begin(), f.corpus.triplets.begin() + 9);
  const Evaluation a = evaluate_corpus(p, f.cfg, f.vocab, ts, d, 1);
  const Evaluation b = evaluate_corpus(p, f.cfg, f.vocab, ts, d, 3);
  EXPECT_EQ(a.hypotheses, b.hypotheses);
  EXPECT_EQ(a.report.n_segments, 9u);
  EXPECT_EQ(report_to_json(a.report), report_to_json(b.report));
}

// The decode-time distribution at step m is the one pmt_loss scores at a
// masked position m with the same prefix.
TEST(Decode, ConsistentWithPmtLoss) {
  const auto f = testing::make_fixture();
  Rng rng(6);
  const Parameters p = Parameters::initialize(f.cfg, rng);
  DecodeConfig d;
  d.max_len = 5;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& t = f.corpus.triplets[i];
    const Translation tr = translate(p, f.cfg, f.vocab, t.image_features, t.src_tokens, d);
    std::vector<std::int64_t> emitted = tr.ids;
    if (tr.terminated) emitted.push_back(kEosId);
    for (std::size_t m = 0; m < emitted.size(); ++m) {
      Example ex = make_example(t, f.vocab, f.cfg.limits);
      ex.tgt_ids = {kSosId};
      ex.tgt_ids.insert(ex.tgt_ids.end(), emitted.begin(), emitted.begin() + static_cast<std::ptrdiff_t>(m));
      ex.tgt_ids.push_back(kMaskId);
      ex.tgt_ids.push_back(kNumReserved);  // arbitrary future token
      ex.tgt_labels.assign(ex.tgt_ids.size(), kIgnoreId);
      double best_loss = 1e300;
      std::int64_t best = -1;
      double chosen_loss = 0;
      for (std::int64_t v = kEosId; v < static_cast<std::int64_t>(f.vocab.size()); ++v) {
        if (v == kMaskId) continue;
        ex.tgt_labels[m + 1] = v;
        const double l = pmt_loss(collate({ex}, TaskKind::kPmt), p, f.cfg).item();
        if (l < best_loss) {
          best_loss = l;
          best = v;
        }
        if (v == emitted[m]) chosen_loss = l;
      }
      EXPECT_EQ(best, emitted[m]) << "segment " << i << " step " << m;
      EXPECT_NEAR(chosen_loss, best_loss, 1e-6);
    }
  }
}

}  // namespace
}  // namespace upoc2
