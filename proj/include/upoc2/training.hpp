// Copyright 2026 The upoc2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "upoc2/checkpoint.hpp"
#include "upoc2/data.hpp"
#include "upoc2/model.hpp"
#include "upoc2/objectives.hpp"
#include "upoc2/optim.hpp"
#include "upoc2/rng.hpp"

namespace upoc2 {

struct TrainConfig {
  std::size_t max_steps = 2000;
  std::size_t warmup_steps = 100;
  double base_lr = 1e-4;
  double finetune_lr = 6e-5;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  std::size_t log_every = 1;
  std::size_t ckpt_every = 0;  // 0: only at the end
  std::size_t eval_every = 100;  // fine-tuning validation interval
  bool select_by_bleu = false;   // keep the best validation BLEU@4 instead of the lowest PMT loss
  double clip_norm = 1.0;
  bool f64 = false;
  std::vector<TaskKind> tasks = {TaskKind::kMtlm, TaskKind::kIsm, TaskKind::kAttp};
  bool attp_normalize = true;
  MaskingOptions masking;

  void validate() const;
};

std::vector<TaskKind> parse_task_list(const std::string& csv);
std::string task_list_str(const std::vector<TaskKind>& tasks);

// 9:2:1 restricted to the chosen tasks; {MTLM, ISM} gives 3:1.
TaskSchedule schedule_for_tasks(const std::vector<TaskKind>& tasks);

// base * min(step / warmup, sqrt(warmup / step)); constant when warmup is 0.
double lr_at(std::size_t step, double base_lr, std::size_t warmup_steps);

struct TrainState {
  std::uint64_t step = 0;
  AdamState adam;
  std::uint64_t cursor = 0;
  Rng rng;
  double best_validation = 0;
  bool has_best = false;
};

// Parameters plus optimisation state; the unit that gets checkpointed.
struct Session {
  Parameters params;
  TrainState state;
  std::optional<Parameters> best;  // fine-tuning only
};

struct StepRecord {
  std::uint64_t step = 0;
  TaskKind task = TaskKind::kMtlm;
  double loss = 0;
  double lr = 0;
  std::size_t skipped = 0;
};

struct TrainResult {
  Session session;
  std::vector<StepRecord> log;
  std::map<std::string, std::size_t> task_counts;
  std::size_t skipped = 0;
  std::vector<std::pair<std::uint64_t, double>> validation;  // (step, PMT loss or BLEU@4)
};

struct RunHooks {
  std::ostream* log = nullptr;  // one JSON object per logged step
  // Checkpoint prefix: writes <prefix>.ckpt, .meta.json, .state.json, .optim.ckpt.
  std::filesystem::path checkpoint_prefix;
  std::uint64_t stop_after_step = 0;  // 0: run to max_steps
};

// Fresh parameters (seeded from tcfg.seed) and state.
Session start_session(const ModelConfig& cfg, const TrainConfig& tcfg);
// Fine-tuning session from pre-trained weights: encoders split, optimiser reset.
Session finetune_session(Parameters pretrained, const ModelConfig& cfg, const TrainConfig& tcfg);

TrainResult pretrain(const Corpus& train, const Vocabulary& vocab, const ModelConfig& cfg, const TrainConfig& tcfg,
                     Session session, const RunHooks& hooks = {});

// PMT-only loop at finetune_lr; keeps the parameters with the lowest
// validation PMT loss (or highest greedy BLEU@4 with select_by_bleu) in
// session.best when validation is non-empty.
TrainResult finetune(const Corpus& train, const Corpus& validation, const Vocabulary& vocab, const ModelConfig& cfg,
                     const TrainConfig& tcfg, Session session, const RunHooks& hooks = {});

// Mean PMT loss over a fixed masking of every triplet (seeded, no dropout).
double validation_pmt_loss(const Corpus& corpus, const Vocabulary& vocab, const Parameters& params,
                           const ModelConfig& cfg, const TrainConfig& tcfg);

struct ModelBundle {
  ModelConfig cfg;
  Vocabulary vocab;
  AttributeVocabulary attributes;
  Parameters params;
};

std::filesystem::path meta_path_of(const std::filesystem::path& ckpt);
void save_model(const std::filesystem::path& ckpt, const ModelConfig& cfg, const Vocabulary& vocab,
                const AttributeVocabulary& attributes, const Parameters& params, Precision precision);
ModelBundle load_model(const std::filesystem::path& ckpt);

// Full session checkpoint under `prefix`.
void save_session(const std::filesystem::path& prefix, const Session& session, const ModelConfig& cfg,
                  const Vocabulary& vocab, const AttributeVocabulary& attributes, bool f64);
struct LoadedSession {
  ModelBundle model;
  Session session;
};
LoadedSession load_session(const std::filesystem::path& prefix);

}  // namespace upoc2
