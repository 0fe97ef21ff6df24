// Copyright 2026 The upoc2 Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "grad_cases.hpp"
#include "test_util.hpp"
#include "upoc2/checkpoint.hpp"
#include "upoc2/errors.hpp"
#include "upoc2/gradcheck.hpp"
#include "upoc2/objectives.hpp"
#include "upoc2/ops.hpp"
#include "upoc2/training.hpp"

namespace upoc2 {
namespace {

using testing::Fixture;
using testing::make_fixture;

std::vector<Real> row(const Tensor& t, std::size_t index, std::size_t width) {
  return {t.data().begin() + static_cast<std::ptrdiff_t>(index * width),
          t.data().begin() + static_cast<std::ptrdiff_t>((index + 1) * width)};
}

Parameters init(const ModelConfig& cfg, std::uint64_t seed = 1) {
  Rng rng(seed);
  return Parameters::initialize(cfg, rng);
}

std::vector<Example> examples(const Fixture& f, std::size_t count) {
  std::vector<Example> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(make_example(f.corpus.triplets[i], f.vocab, f.cfg.limits));
  return out;
}

TEST(Embed, ZeroImageGivesModalityRow) {
  Fixture f = make_fixture();
  Parameters p = init(f.cfg);
  std::vector<Example> ex = examples(f, 1);
  for (auto& v : ex[0].images) std::fill(v.begin(), v.end(), 0.0f);
  const MaskedBatch b = collate(ex, TaskKind::kMtlm);
  const Tensor e = embed_inputs(b, p, f.cfg);
  const std::size_t h = f.cfg.hidden;
  EXPECT_EQ(row(e, 0, h), row(p.get("modality_embedding"), kImageModality, h));
}

TEST(Embed, SameTokenDiffersOnlyByPosition) {
  Fixture f = make_fixture();
  Parameters p = init(f.cfg);
  std::vector<Example> ex = examples(f, 1);
  ex[0].src_ids[0] = ex[0].src_ids[1];
  const MaskedBatch b = collate(ex, TaskKind::kMtlm);
  const Tensor e = embed_inputs(b, p, f.cfg);
  const std::size_t h = f.cfg.hidden, n = b.image_slots;
  const auto a = row(e, n + 0, h), c = row(e, n + 1, h);
  const auto p0 = row(p.get("position_embedding"), 0, h), p1 = row(p.get("position_embedding"), 1, h);
  for (std::size_t i = 0; i < h; ++i) EXPECT_NEAR(a[i] - c[i], p0[i] - p1[i], 1e-12);
}

TEST(Embed, ImagePermutationPermutesSlots) {
  Fixture f = make_fixture();
  Parameters p = init(f.cfg);
  std::vector<Example> ex = examples(f, 1);
  ex[0].images = {ex[0].images[0], ex[0].images[0], ex[0].images[0]};
  ex[0].images[1][0] += 1.0f;
  ex[0].images[2][1] -= 2.0f;
  std::vector<Example> rev = ex;
  std::reverse(rev[0].images.begin(), rev[0].images.end());
  const std::size_t h = f.cfg.hidden;
  const Tensor a = embed_inputs(collate(ex, TaskKind::kMtlm), p, f.cfg);
  const Tensor r = embed_inputs(collate(rev, TaskKind::kMtlm), p, f.cfg);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(row(a, k, h), row(r, 2 - k, h));
  for (std::size_t k = 3; k < a.numel() / h; ++k) EXPECT_EQ(row(a, k, h), row(r, k, h));
}

TEST(Embed, FeatureDimensionMismatch) {
  Fixture f = make_fixture();
  Parameters p = init(f.cfg);
  std::vector<Example> ex = examples(f, 1);
  for (auto& v : ex[0].images) v.push_back(0.0f);
  EXPECT_THROW(embed_inputs(collate(ex, TaskKind::kMtlm), p, f.cfg), DimensionError);
}

TEST(AttentionMask, PmtIsCausalOverTarget) {
  const SegmentLengths len{2, 4, 3};
  const Tensor m = build_attention_mask(TaskKind::kPmt, len, 2, 4, 3);
  const std::size_t t = 9, y0 = 6;
  for (std::size_t q = 0; q < 3; ++q)
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(m.at((y0 + q) * t + y0 + k), k <= q ? 1.0 : 0.0);
  // V and X rows see no target position; target rows see all of V and X.
  for (std::size_t q = 0; q < y0; ++q)
    for (std::size_t k = 0; k < t; ++k) EXPECT_EQ(m.at(q * t + k), k < y0 ? 1.0 : 0.0);
  for (std::size_t q = y0; q < t; ++q)
    for (std::size_t k = 0; k < y0; ++k) EXPECT_EQ(m.at(q * t + k), 1.0);
}

TEST(AttentionMask, IsmLeavesOnlySosAttendable) {
  const SegmentLengths len{1, 3, 5};
  const Tensor m = build_attention_mask(TaskKind::kIsm, len, 1, 3, 5);
  const std::size_t t = 9, y0 = 4;
  for (std::size_t q = 0; q < y0 + 1; ++q) {
    std::size_t visible_y = 0;
    for (std::size_t k = y0; k < t; ++k) visible_y += m.at(q * t + k) > 0;
    EXPECT_EQ(visible_y, 1u);
    EXPECT_EQ(m.at(q * t + y0), 1.0);
  }
}

TEST(AttentionMask, MtlmIsAllOnesOverNonPad) {
  const SegmentLengths len{2, 3, 2};
  const Tensor m = build_attention_mask(TaskKind::kMtlm, len, 3, 4, 2);
  const std::size_t t = 9;
  auto pad = [](std::size_t i) { return i == 2 || i == 6; };
  for (std::size_t q = 0; q < t; ++q)
    for (std::size_t k = 0; k < t; ++k) {
      if (pad(q)) {
        EXPECT_EQ(m.at(q * t + k), q == k ? 1.0 : 0.0);
      } else {
        EXPECT_EQ(m.at(q * t + k), pad(k) ? 0.0 : 1.0);
        EXPECT_EQ(m.at(q * t + k), m.at(k * t + q));
      }
    }
}

TEST(AttentionMask, UnknownKindIsContractError) {
  EXPECT_THROW(build_attention_mask(static_cast<TaskKind>(17), {1, 1, 1}, 1, 1, 1), ContractError);
}

TEST(Forward, NoisyConfigHasNoIndependentStacks) {
  Fixture f = make_fixture();
  ModelConfig noisy = ModelConfig::noisy();
  EXPECT_EQ(noisy.layers_image + noisy.layers_source + noisy.layers_target, 0u);
  EXPECT_EQ(noisy.layers_cross, 6u);
  noisy.vocab_size = f.cfg.vocab_size;
  noisy.attr_vocab_size = f.cfg.attr_vocab_size;
  noisy.feature_dim = f.cfg.feature_dim;
  noisy.hidden = 16;
  noisy.heads = 2;
  noisy.limits = f.cfg.limits;
  for (const auto& [name, shape] : expected_parameter_shapes(noisy)) {
    EXPECT_EQ(name.find("image_encoder"), std::string::npos);
    EXPECT_EQ(name.find("source_encoder"), std::string::npos);
  }
  Parameters p = init(noisy);
  const MaskedBatch b = collate(examples(f, 2), TaskKind::kMtlm);
  // Output equals the cross stack applied to the embeddings.
  const EncodedSequence enc = forward(b, p, noisy);
  Tensor x = embed_inputs(b, p, noisy);
  const Tensor mask = build_batch_attention_mask(b);
  for (std::size_t l = 0; l < 6; ++l) x = encoder_layer(x, mask, p, "cross_encoder.layer" + std::to_string(l), noisy, {});
  EXPECT_EQ(std::vector<Real>(enc.hidden.data().begin(), enc.hidden.data().end()),
            std::vector<Real>(x.data().begin(), x.data().end()));
}

TEST(Forward, PmtFutureTokensDoNotLeakBackwards) {
  Fixture f = make_fixture();
  Parameters p = init(f.cfg);
  std::vector<Example> ex = examples(f, 1);
  const MaskedBatch a = collate(ex, TaskKind::kPmt);
  const std::size_t m = 2;
  for (std::size_t k = m + 1; k < ex[0].tgt_ids.size(); ++k) ex[0].tgt_ids[k] = kNumReserved + 1;
  const MaskedBatch b = collate(ex, TaskKind::kPmt);
  const EncodedSequence ea = forward(a, p, f.cfg), eb = forward(b, p, f.cfg);
  const std::size_t h = f.cfg.hidden;
  for (std::size_t k = 0; k <= m; ++k) {
    const std::size_t r = a.row_of_token_slot(0, a.src_slots + k);
    EXPECT_EQ(row(ea.hidden, r, h), row(eb.hidden, r, h));
  }
  const std::size_t later = a.row_of_token_slot(0, a.src_slots + m + 1);
  EXPECT_NE(row(ea.hidden, later, h), row(eb.hidden, later, h));
}

TEST(Forward, MtlmPerturbationReachesEveryPosition) {
  Fixture f = make_fixture();
  Parameters p = init(f.cfg);
  std::vector<Example> ex = examples(f, 1);
  const MaskedBatch a = collate(ex, TaskKind::kMtlm);
  ex[0].tgt_ids.back() = ex[0].tgt_ids.back() == kNumReserved ? kNumReserved + 1 : kNumReserved;
  const MaskedBatch b = collate(ex, TaskKind::kMtlm);
  const EncodedSequence ea = forward(a, p, f.cfg), eb = forward(b, p, f.cfg);
  const std::size_t h = f.cfg.hidden;
  const auto pad = a.pad_flags();
  for (std::size_t r = 0; r < a.total_slots(); ++r) {
    if (!pad[r]) {
      EXPECT_NE(row(ea.hidden, r, h), row(eb.hidden, r, h)) << "row " << r;
    }
  }
}

TEST(Forward, PadIsolation) {
  Fixture f = make_fixture();
  Parameters p = init(f.cfg);
  for (TaskKind kind : {TaskKind::kMtlm, TaskKind::kPmt}) {
    std::vector<Example> one = examples(f, 1);
    // A partner with more images and longer sentences forces padding onto item 0.
    Example longer = one[0];
    longer.images.push_back(longer.images[0]);
    longer.src_ids.insert(longer.src_ids.begin() + 1, kNumReserved + 2);
    longer.tgt_ids.insert(longer.tgt_ids.begin() + 1, kNumReserved + 3);
    longer.src_labels.push_back(kIgnoreId);
    longer.tgt_labels.push_back(kIgnoreId);
    const MaskedBatch alone = collate(one, kind);
    const MaskedBatch padded = collate({one[0], longer}, kind);
    ASSERT_GT(padded.total_slots(), alone.total_slots());
    const EncodedSequence ea = forward(alone, p, f.cfg), ep = forward(padded, p, f.cfg);
    const std::size_t h = f.cfg.hidden;
    auto check = [&](std::size_t ra, std::size_t rp) {
      const auto x = row(ea.hidden, ra, h), y = row(ep.hidden, rp, h);
      for (std::size_t i = 0; i < h; ++i) EXPECT_NEAR(x[i], y[i], 1e-6);
    };
    for (std::size_t k = 0; k < alone.lengths[0].image_count; ++k) check(k, k);
    for (std::size_t k = 0; k < alone.token_slots(); ++k) {
      const std::size_t slot = k < alone.src_slots ? k : padded.src_slots + (k - alone.src_slots);
      check(alone.row_of_token_slot(0, k), padded.row_of_token_slot(0, slot));
    }
  }
}

TEST(Attention, HeadsMatchSingleLoopOracle) {
  Rng rng(8);
  const std::size_t t = 2, h = 4, heads = 2, dh = h / heads;
  const Tensor x = testing::random_tensor({1, t, h}, rng, 1.0, false);
  AttentionWeights w;
  for (Tensor* m : {&w.q_w, &w.k_w, &w.v_w, &w.o_w}) *m = testing::random_tensor({h, h}, rng, 0.5, false);
  for (Tensor* b : {&w.q_b, &w.k_b, &w.v_b, &w.o_b}) *b = testing::random_tensor({h}, rng, 0.5, false);
  const Tensor mask = Tensor::zeros({1, 1, t, t});
  const Tensor y = self_attention(x, mask, w, heads);

  auto proj = [&](const Tensor& wt, const Tensor& bt, std::size_t pos, std::size_t j) {
    double s = bt.at(j);
    for (std::size_t i = 0; i < h; ++i) s += x.at(pos * h + i) * wt.at(i * h + j);
    return s;
  };
  std::vector<double> concat(t * h, 0.0);
  for (std::size_t a = 0; a < heads; ++a) {
    for (std::size_t q = 0; q < t; ++q) {
      std::vector<double> score(t);
      for (std::size_t k = 0; k < t; ++k) {
        double dot = 0;
        for (std::size_t d = 0; d < dh; ++d) dot += proj(w.q_w, w.q_b, q, a * dh + d) * proj(w.k_w, w.k_b, k, a * dh + d);
        score[k] = dot / std::sqrt(static_cast<double>(dh));
      }
      const double mx = std::max(score[0], score[1]);
      const double z = std::exp(score[0] - mx) + std::exp(score[1] - mx);
      for (std::size_t d = 0; d < dh; ++d) {
        double acc = 0;
        for (std::size_t k = 0; k < t; ++k) acc += std::exp(score[k] - mx) / z * proj(w.v_w, w.v_b, k, a * dh + d);
        concat[q * h + a * dh + d] = acc;
      }
    }
  }
  for (std::size_t q = 0; q < t; ++q) {
    for (std::size_t j = 0; j < h; ++j) {
      double s = w.o_b.at(j);
      for (std::size_t i = 0; i < h; ++i) s += concat[q * h + i] * w.o_w.at(i * h + j);
      EXPECT_NEAR(y.at(q * h + j), s, 1e-6);
    }
  }
}

EncodedSequence fake_encoding(const Tensor& hidden) {
  EncodedSequence e;
  e.hidden = hidden;
  e.batch_size = 1;
  e.image_slots = 1;
  e.src_slots = 1;
  e.tgt_slots = 1;
  e.pad = {0, 0, 0};
  e.target_sos = {1};
  return e;
}

TEST(Heads, MlmLogitsExamples) {
  ModelConfig cfg = ModelConfig::clean();
  cfg.hidden = 8;
  cfg.heads = 2;
  cfg.vocab_size = 8;
  cfg.feature_dim = 4;
  Parameters p = init(cfg);
  // Orthonormal embedding rows.
  Tensor emb = p.get("token_embedding");
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j) emb.at(i * 8 + j) = i == j ? 1.0 : 0.0;
  Tensor ob = p.get("output_bias");
  for (auto& v : ob.data()) v = 0;
  Tensor hidden = Tensor::zeros({1, 3, 8});
  for (std::size_t j = 0; j < 8; ++j) hidden.at(8 + j) = emb.at(6 * 8 + j);
  const std::vector<std::size_t> rows = {1, 2};
  const Tensor logits = mlm_logits(fake_encoding(hidden), rows, p);
  EXPECT_EQ(logits.shape(), (Shape{2, 8}));
  std::size_t best = 0;
  for (std::size_t v = 0; v < 8; ++v) best = logits.at(v) > logits.at(best) ? v : best;
  EXPECT_EQ(best, 6u);
  for (std::size_t v = 0; v < 8; ++v) EXPECT_EQ(logits.at(8 + v), 0.0);
  const std::vector<std::size_t> image_row = {0};
  EXPECT_THROW(mlm_logits(fake_encoding(hidden), image_row, p), ContractError);
}

TEST(Heads, TyingSharesOneStorage) {
  Fixture f = make_fixture();
  Parameters p = init(f.cfg);
  for (const auto& [name, shape] : p.named()) {
    if (name != "token_embedding") {
      EXPECT_NE(shape.shape(), (Shape{f.cfg.vocab_size, f.cfg.hidden})) << name;
    }
  }
  Rng rng(3);
  const Tensor hidden = testing::random_tensor({1, 3, f.cfg.hidden}, rng, 1.0, false);
  const std::vector<std::size_t> rows = {2};
  const Tensor before = mlm_logits(fake_encoding(hidden), rows, p);
  Tensor emb = p.get("token_embedding");
  const std::size_t tok = 7;
  for (std::size_t j = 0; j < f.cfg.hidden; ++j) emb.at(tok * f.cfg.hidden + j) += 0.5;
  const Tensor after = mlm_logits(fake_encoding(hidden), rows, p);
  double expected = 0;
  for (std::size_t j = 0; j < f.cfg.hidden; ++j) expected += 0.5 * hidden.at(2 * f.cfg.hidden + j);
  for (std::size_t v = 0; v < f.cfg.vocab_size; ++v) {
    EXPECT_NEAR(after.at(v) - before.at(v), v == tok ? expected : 0.0, 1e-12);
  }
}

TEST(Heads, MatchAndAttributeExamples) {
  Fixture f = make_fixture();
  Parameters p = init(f.cfg);
  for (auto* name : {"match_head.weight", "match_head.bias", "attr_head.weight", "attr_head.bias"}) {
    Tensor t = p.get(name);
    for (auto& v : t.data()) v = 0;
  }
  const MaskedBatch b = collate(examples(f, 2), TaskKind::kIsm);
  const EncodedSequence enc = forward(b, p, f.cfg);
  const Tensor s = match_score(enc, p);
  EXPECT_EQ(s.shape(), (Shape{2}));
  EXPECT_EQ(s.at(0), 0.5);
  Tensor mb = p.get("match_head.bias");
  mb.at(0) = 10;
  EXPECT_GT(match_score(enc, p).at(0), 0.9999);
  const Tensor a = attribute_logits(enc, p);
  EXPECT_EQ(a.shape(), (Shape{2, f.cfg.attr_vocab_size}));
  const Tensor pr = softmax_lastdim(a);
  for (Real v : pr.data()) EXPECT_NEAR(v, 1.0 / static_cast<double>(f.cfg.attr_vocab_size), 1e-12);
}

TEST(Heads, MissingSosIsContractError) {
  Fixture f = make_fixture();
  Parameters p = init(f.cfg);
  std::vector<Example> ex = examples(f, 1);
  ex[0].tgt_ids[0] = kMaskId;
  const EncodedSequence enc = forward(collate(ex, TaskKind::kIsm), p, f.cfg);
  EXPECT_THROW(match_score(enc, p), ContractError);
  EXPECT_THROW(attribute_logits(enc, p), ContractError);
}

TEST(Heads, MatchScoreIgnoresPaddedTarget) {
  Fixture f = make_fixture();
  Parameters p = init(f.cfg);
  std::vector<Example> ex = examples(f, 1);
  const double s0 = match_score(forward(collate(ex, TaskKind::kIsm), p, f.cfg), p).at(0);
  for (std::size_t k = 1; k < ex[0].tgt_ids.size(); ++k) ex[0].tgt_ids[k] = kNumReserved + static_cast<std::int64_t>(k);
  const double s1 = match_score(forward(collate(ex, TaskKind::kIsm), p, f.cfg), p).at(0);
  EXPECT_EQ(s0, s1);
}

TEST(Heads, AttributeLogitsSeeImages) {
  Fixture f = make_fixture();
  Parameters p = init(f.cfg);
  const auto ex = apply_attp_masking(f.corpus.triplets[0], f.vocab, f.corpus.attribute_vocab, f.cfg.limits);
  ASSERT_TRUE(ex.has_value());
  std::vector<Example> v = {*ex};
  const Tensor a = attribute_logits(forward(collate(v, TaskKind::kAttp), p, f.cfg), p);
  v[0].images[0][0] += 1.0f;
  const Tensor b = attribute_logits(forward(collate(v, TaskKind::kAttp), p, f.cfg), p);
  EXPECT_NE(std::vector<Real>(a.data().begin(), a.data().end()), std::vector<Real>(b.data().begin(), b.data().end()));
}

TEST(Sharing, SplitGivesIdenticalThenDivergingEncoders) {
  Fixture f = make_fixture();
  Parameters p = init(f.cfg);
  ASSERT_TRUE(p.shared_src_tgt());
  const std::string src = "source_encoder.layer0.attn.q.weight", tgt = "target_encoder.layer0.attn.q.weight";
  EXPECT_TRUE(p.get(src).same_storage(p.get(tgt)));
  split_shared_encoders(p, f.cfg);
  EXPECT_FALSE(p.get(src).same_storage(p.get(tgt)));
  for (const auto& [name, t] : p.named()) {
    if (name.rfind("target_encoder.", 0) != 0) continue;
    const Tensor& s = p.get("source_encoder." + name.substr(15));
    EXPECT_EQ(std::vector<Real>(t.data().begin(), t.data().end()), std::vector<Real>(s.data().begin(), s.data().end()));
  }
  // One PMT step: target-side gradients differ from source-side ones.
  TrainConfig tcfg;
  tcfg.max_steps = 1;
  tcfg.warmup_steps = 0;
  tcfg.finetune_lr = 1e-2;
  tcfg.batch_size = 4;
  tcfg.f64 = true;
  Session s;
  s.params = p;
  const TrainResult r = finetune(f.corpus, Corpus{}, f.vocab, f.cfg, tcfg, s);
  EXPECT_NE(std::vector<Real>(r.session.params.get(src).data().begin(), r.session.params.get(src).data().end()),
            std::vector<Real>(r.session.params.get(tgt).data().begin(), r.session.params.get(tgt).data().end()));
}

TEST(Sharing, SplitIsNoOpWhenSeparateOrNoisy) {
  Fixture f = make_fixture();
  ModelConfig noisy = f.cfg;
  noisy.layers_image = noisy.layers_source = noisy.layers_target = 0;
  Parameters p = init(noisy);
  const std::size_t before = p.unique().size();
  split_shared_encoders(p, noisy);
  EXPECT_EQ(p.unique().size(), before);
  ModelConfig separate = f.cfg;
  separate.share_src_tgt_encoders = false;
  Parameters q = init(separate);
  const auto names = q.unique().size();
  split_shared_encoders(q, separate);
  EXPECT_EQ(q.unique().size(), names);
}

TEST(Init, DeterministicUnderSeed) {
  Fixture f = make_fixture();
  const Parameters a = init(f.cfg, 77), b = init(f.cfg, 77);
  for (const auto& [name, t] : a.named()) {
    EXPECT_EQ(std::vector<Real>(t.data().begin(), t.data().end()),
              std::vector<Real>(b.get(name).data().begin(), b.get(name).data().end()))
        << name;
  }
  for (const auto& [name, t] : a.named()) {
    if (name.find("bias") != std::string::npos) {
      for (Real v : t.data()) EXPECT_EQ(v, 0.0) << name;
    } else if (name.find(".gain") == std::string::npos) {
      for (Real v : t.data()) EXPECT_LE(std::abs(v), 2 * f.cfg.init_std) << name;
    }
  }
}

TEST(Config, Presets) {
  EXPECT_EQ(ModelConfig::paper_clean().hidden, 512u);
  EXPECT_EQ(ModelConfig::paper_clean().heads, 8u);
  EXPECT_EQ(ModelConfig::paper_clean().layers_cross, 3u);
  EXPECT_EQ(ModelConfig::paper_clean().layers_image, 1u);
  EXPECT_EQ(ModelConfig::paper_noisy().layers_source, 0u);
  EXPECT_EQ(ModelConfig::paper_noisy().layers_cross, 6u);
  ModelConfig bad = ModelConfig::clean();
  bad.vocab_size = 10;
  bad.heads = 3;
  EXPECT_THROW(bad.validate(), ContractError);
  ModelConfig c = ModelConfig::clean();
  c.vocab_size = 30;
  EXPECT_EQ(model_config_to_json(model_config_from_json(model_config_to_json(c))), model_config_to_json(c));
}

TEST(Checkpoint, RoundTripBitExact) {
  Fixture f = make_fixture();
  const Parameters p = init(f.cfg);
  const auto dir = std::filesystem::temp_directory_path() / "upoc2_ckpt_test";
  std::filesystem::create_directories(dir);
  // Values representable in f32 survive the 32-bit container; anything survives the 64-bit one.
  Parameters p32 = p.clone();
  for (auto& e : p32.unique())
    for (auto& v : e.tensor.data()) v = static_cast<float>(v);
  save_parameters(p32, dir / "a.ckpt", Precision::kF32);
  save_parameters(p, dir / "b.ckpt", Precision::kF64);
  const Parameters l32 = load_parameters(dir / "a.ckpt", f.cfg), l64 = load_parameters(dir / "b.ckpt", f.cfg);
  for (const auto& [name, t] : p.named()) {
    EXPECT_EQ(std::vector<Real>(l64.get(name).data().begin(), l64.get(name).data().end()),
              std::vector<Real>(t.data().begin(), t.data().end()));
    EXPECT_EQ(std::vector<Real>(l32.get(name).data().begin(), l32.get(name).data().end()),
              std::vector<Real>(p32.get(name).data().begin(), p32.get(name).data().end()));
  }
  EXPECT_TRUE(l64.shared_src_tgt());
  EXPECT_TRUE(l64.get("source_encoder.layer0.ff1.weight").same_storage(l64.get("target_encoder.layer0.ff1.weight")));
  // Header layout.
  const auto arrays = load_arrays(dir / "a.ckpt");
  EXPECT_EQ(arrays.size(), p.unique().size());
  std::ifstream in(dir / "a.ckpt", std::ios::binary);
  char magic[9] = {};
  in.read(magic, 8);
  EXPECT_STREQ(magic, "UPOC2CKP");
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), 4);
  EXPECT_EQ(version, 1u);
}

TEST(Checkpoint, MismatchListsDimensions) {
  Fixture f = make_fixture();
  const auto dir = std::filesystem::temp_directory_path() / "upoc2_ckpt_test";
  std::filesystem::create_directories(dir);
  save_parameters(init(f.cfg), dir / "m.ckpt", Precision::kF32);
  ModelConfig other = f.cfg;
  other.hidden = 24;
  try {
    load_parameters(dir / "m.ckpt", other);
    FAIL();
  } catch (const ContractError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("token_embedding"), std::string::npos);
    EXPECT_NE(msg.find(shape_str({f.cfg.vocab_size, 24})), std::string::npos) << msg;
  }
}

TEST(Checkpoint, TruncatedFileIsFormatError) {
  Fixture f = make_fixture();
  const auto dir = std::filesystem::temp_directory_path() / "upoc2_ckpt_test";
  std::filesystem::create_directories(dir);
  save_parameters(init(f.cfg), dir / "t.ckpt", Precision::kF32);
  std::filesystem::resize_file(dir / "t.ckpt", std::filesystem::file_size(dir / "t.ckpt") - 3);
  EXPECT_THROW(load_parameters(dir / "t.ckpt", f.cfg), FormatError);
}

// Full clean-config forward plus the masked-word loss, every parameter tensor.
TEST(ModelGradients, CleanConfigMtlmLoss) {
  for (std::uint64_t seed = 0; seed < 2; ++seed) {
    const GradCheckReport r = testing::model_gradient_report(seed);
    EXPECT_TRUE(r.passed) << r.describe();
  }
}

TEST(ModelGradients, MatchAndAttributeLosses) {
  Fixture f = make_fixture(12, 3, 8, 2);
  f.cfg.ff_hidden = 12;
  Parameters p = init(f.cfg, 3);
  Rng rng(3);
  std::vector<Example> ism;
  for (std::size_t i = 0; i < 2; ++i) {
    IsmSample s = sample_ism_pair(f.corpus, rng, f.vocab, f.cfg.limits);
    ism.push_back(s.example);
  }
  std::vector<Example> attp;
  for (std::size_t i = 0; attp.size() < 2 && i < f.corpus.triplets.size(); ++i) {
    if (auto e = apply_attp_masking(f.corpus.triplets[i], f.vocab, f.corpus.attribute_vocab, f.cfg.limits)) attp.push_back(*e);
  }
  ASSERT_EQ(attp.size(), 2u);
  std::vector<Tensor> inputs;
  for (const auto& e : p.unique()) inputs.push_back(e.tensor);
  GradCheckOptions o;
  o.max_coords_per_input = 4;
  for (const auto& batch : {collate(ism, TaskKind::kIsm), collate(attp, TaskKind::kAttp)}) {
    const GradCheckReport r = check_gradients([&] { return task_loss(batch, p, f.cfg); }, inputs, 1e-4, o);
    EXPECT_TRUE(r.passed) << r.describe();
  }
}

}  // namespace
}  // namespace upoc2
