// Copyright 2026 The upoc2 Authors
// SPDX-License-Identifier: Apache-2.0

#include "upoc2/training.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "json.hpp"
#include "upoc2/decode.hpp"
#include "upoc2/errors.hpp"
#include "upoc2/ops.hpp"

namespace upoc2 {

using json = nlohmann::json;

namespace detail {
std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& contents);
}  // namespace detail

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw ContractError("train config: " + what); };
  if (max_steps == 0) fail("max_steps must be positive");
  if (warmup_steps > max_steps) fail("warmup_steps (" + std::to_string(warmup_steps) + ") exceeds max_steps (" +
                                     std::to_string(max_steps) + ")");
  if (!(base_lr > 0) || !(finetune_lr > 0)) fail("learning rates must be positive");
  if (batch_size == 0) fail("batch_size must be positive");
  if (!(clip_norm > 0)) fail("clip_norm must be positive");
  if (tasks.empty()) fail("no pre-training task selected");
  if (masking.rate <= 0 || masking.rate > 1) fail("masking rate must lie in (0, 1]");
}

std::vector<TaskKind> parse_task_list(const std::string& csv) {
  std::vector<TaskKind> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const TaskKind k = parse_task(item);
    if (k == TaskKind::kPmt) throw ContractError("pmt is not a pre-training task");
    if (std::find(out.begin(), out.end(), k) != out.end()) throw ContractError("task '" + item + "' listed twice");
    out.push_back(k);
  }
  if (out.empty()) throw ContractError("empty task list");
  std::sort(out.begin(), out.end());
  return out;
}

std::string task_list_str(const std::vector<TaskKind>& tasks) {
  std::string s;
  for (auto t : tasks) s += (s.empty() ? "" : ",") + task_name(t);
  return s;
}

TaskSchedule schedule_for_tasks(const std::vector<TaskKind>& tasks) {
  const bool mtlm = std::count(tasks.begin(), tasks.end(), TaskKind::kMtlm) > 0;
  const bool ism = std::count(tasks.begin(), tasks.end(), TaskKind::kIsm) > 0;
  const bool attp = std::count(tasks.begin(), tasks.end(), TaskKind::kAttp) > 0;
  if (mtlm && ism && !attp) return TaskSchedule::pretraining(false);
  std::vector<std::pair<TaskKind, std::size_t>> w;
  if (mtlm) w.emplace_back(TaskKind::kMtlm, 9);
  if (ism) w.emplace_back(TaskKind::kIsm, 2);
  if (attp) w.emplace_back(TaskKind::kAttp, 1);
  return TaskSchedule(w);
}

double lr_at(std::size_t step, double base_lr, std::size_t warmup_steps) {
  if (warmup_steps == 0) return base_lr;
  const double s = static_cast<double>(std::max<std::size_t>(step, 1));
  const double w = static_cast<double>(warmup_steps);
  return base_lr * std::min(s / w, std::sqrt(w / s));
}

namespace {

void round_params_to_f32(const Parameters& params) {
  for (auto& p : params.unique()) {
    for (auto& v : p.tensor.data()) v = static_cast<Real>(static_cast<float>(v));
  }
}

std::size_t label_count(const MaskedBatch& b) {
  return static_cast<std::size_t>(std::count_if(b.mlm_labels.begin(), b.mlm_labels.end(),
                                                [](std::int64_t l) { return l != kIgnoreId; }));
}

void log_step(const RunHooks& hooks, const TrainConfig& tcfg, const StepRecord& r) {
  if (!hooks.log || tcfg.log_every == 0 || r.step % tcfg.log_every != 0) return;
  json j;
  j["step"] = r.step;
  j["task"] = task_name(r.task);
  j["loss"] = r.loss;
  j["lr"] = r.lr;
  j["skipped"] = r.skipped;
  *hooks.log << j.dump() << "\n";
  hooks.log->flush();
}

// One optimisation step on `batch`; returns the loss.
double optimise(const MaskedBatch& batch, Session& s, const ModelConfig& cfg, const TrainConfig& tcfg, double lr) {
  ForwardOptions fo;
  fo.training = cfg.dropout > 0;
  fo.rng = &s.state.rng;
  const Tensor loss = task_loss(batch, s.params, cfg, fo, tcfg.attp_normalize);
  const double value = loss.item();
  backward(loss);
  const ParameterSet set = s.params.unique();
  fill_missing_grads(set);
  clip_grad_norm(set, tcfg.clip_norm);
  adam_step(set, s.state.adam, lr);
  return value;
}

template <typename Draw>
TrainResult run_loop(Session session, const ModelConfig& cfg, const TrainConfig& tcfg, const RunHooks& hooks,
                     const Vocabulary& vocab, const AttributeVocabulary& attrs, double base_lr,
                     const TaskSchedule& schedule, Draw draw, const std::function<void(TrainResult&)>& evaluate,
                     std::size_t eval_every) {
  TrainResult result;
  result.session = std::move(session);
  Session& s = result.session;
  s.state.adam.round_to_f32 = !tcfg.f64;
  auto checkpoint = [&] {
    if (!hooks.checkpoint_prefix.empty()) save_session(hooks.checkpoint_prefix, s, cfg, vocab, attrs, tcfg.f64);
  };
  while (s.state.step < tcfg.max_steps) {
    if (hooks.stop_after_step && s.state.step >= hooks.stop_after_step) break;
    const std::uint64_t step = s.state.step + 1;
    const TaskKind kind = schedule.at(s.state.cursor);
    BatchDraw d = draw(kind, s.state.rng);
    StepRecord r;
    r.step = step;
    r.task = kind;
    r.lr = lr_at(step, base_lr, tcfg.warmup_steps);
    r.skipped = d.skipped;
    r.loss = optimise(d.batch, s, cfg, tcfg, r.lr);
    s.state.cursor += 1;
    s.state.step = step;
    result.log.push_back(r);
    result.task_counts[task_name(kind)] += 1;
    result.skipped += d.skipped;
    log_step(hooks, tcfg, r);
    if (evaluate && eval_every && (step % eval_every == 0 || step == tcfg.max_steps)) evaluate(result);
    if (tcfg.ckpt_every && step % tcfg.ckpt_every == 0) checkpoint();
  }
  checkpoint();
  return result;
}

}  // namespace

Session start_session(const ModelConfig& cfg, const TrainConfig& tcfg) {
  cfg.validate();
  tcfg.validate();
  Session s;
  Rng init(derive_seed(tcfg.seed, 0));
  s.params = Parameters::initialize(cfg, init);
  if (!tcfg.f64) round_params_to_f32(s.params);
  s.state.rng = Rng(derive_seed(tcfg.seed, 1));
  return s;
}

Session finetune_session(Parameters pretrained, const ModelConfig& cfg, const TrainConfig& tcfg) {
  cfg.validate();
  tcfg.validate();
  Session s;
  s.params = pretrained.clone();
  split_shared_encoders(s.params, cfg);
  s.state.rng = Rng(derive_seed(tcfg.seed, 2));
  return s;
}

TrainResult pretrain(const Corpus& train, const Vocabulary& vocab, const ModelConfig& cfg, const TrainConfig& tcfg,
                     Session session, const RunHooks& hooks) {
  cfg.validate();
  tcfg.validate();
  const auto has = [&](TaskKind k) { return std::find(tcfg.tasks.begin(), tcfg.tasks.end(), k) != tcfg.tasks.end(); };
  if (train.triplets.empty()) throw ContractError("pretrain: empty training corpus");
  if (has(TaskKind::kIsm) && train.triplets.size() < 2) throw ContractError("pretrain: ISM needs two triplets");
  if (has(TaskKind::kAttp)) {
    const bool any = std::any_of(train.triplets.begin(), train.triplets.end(),
                                 [](const Triplet& t) { return !t.attributes.empty(); });
    if (!any) throw ContractError("pretrain: ATTP scheduled but the corpus has no attributes");
    if (cfg.attr_vocab_size < train.attribute_vocab.size()) {
      throw ContractError("pretrain: attr_vocab_size " + std::to_string(cfg.attr_vocab_size) + " < " +
                          std::to_string(train.attribute_vocab.size()) + " attribute labels");
    }
  }
  const TaskSchedule schedule = schedule_for_tasks(tcfg.tasks);
  auto draw = [&](TaskKind kind, Rng& rng) {
    return draw_task_batch(kind, train, rng, vocab, cfg.limits, tcfg.batch_size, tcfg.masking);
  };
  return run_loop(std::move(session), cfg, tcfg, hooks, vocab, train.attribute_vocab, tcfg.base_lr, schedule, draw,
                  nullptr, 0);
}

double validation_pmt_loss(const Corpus& corpus, const Vocabulary& vocab, const Parameters& params,
                           const ModelConfig& cfg, const TrainConfig& tcfg) {
  NoGradGuard guard;
  Rng rng(derive_seed(tcfg.seed, 3));
  double total = 0;
  std::size_t labels = 0;
  std::vector<Example> pending;
  auto flush = [&] {
    if (pending.empty()) return;
    const MaskedBatch b = collate(pending, TaskKind::kPmt);
    const std::size_t n = label_count(b);
    total += pmt_loss(b, params, cfg).item() * static_cast<double>(n);
    labels += n;
    pending.clear();
  };
  for (const auto& t : corpus.triplets) {
    auto ex = apply_pmt_masking(t, rng, vocab, cfg.limits, tcfg.masking);
    if (!ex) continue;
    pending.push_back(std::move(*ex));
    if (pending.size() == tcfg.batch_size) flush();
  }
  flush();
  Tape::current().clear();
  if (labels == 0) throw ContractError("validation_pmt_loss: nothing to score");
  return total / static_cast<double>(labels);
}

TrainResult finetune(const Corpus& train, const Corpus& validation, const Vocabulary& vocab, const ModelConfig& cfg,
                     const TrainConfig& tcfg, Session session, const RunHooks& hooks) {
  cfg.validate();
  tcfg.validate();
  if (train.triplets.empty()) throw ContractError("finetune: empty training corpus");
  split_shared_encoders(session.params, cfg);
  const TaskSchedule schedule({{TaskKind::kPmt, 1}});
  auto draw = [&](TaskKind kind, Rng& rng) {
    return draw_task_batch(kind, train, rng, vocab, cfg.limits, tcfg.batch_size, tcfg.masking);
  };
  std::function<void(TrainResult&)> evaluate;
  if (!validation.triplets.empty()) {
    evaluate = [&](TrainResult& r) {
      Session& s = r.session;
      double score = 0;
      bool better = false;
      if (tcfg.select_by_bleu) {
        NoGradGuard guard;
        score = evaluate_corpus(s.params, cfg, vocab, validation.triplets, DecodeConfig{}).report.bleu[4];
        Tape::current().clear();
        better = score > s.state.best_validation;
      } else {
        score = validation_pmt_loss(validation, vocab, s.params, cfg, tcfg);
        better = score < s.state.best_validation;
      }
      r.validation.emplace_back(s.state.step, score);
      if (!s.state.has_best || better) {
        s.state.best_validation = score;
        s.state.has_best = true;
        s.best = s.params.clone();
      }
    };
  }
  return run_loop(std::move(session), cfg, tcfg, hooks, vocab, train.attribute_vocab, tcfg.finetune_lr, schedule,
                  draw, evaluate, tcfg.eval_every);
}

std::filesystem::path meta_path_of(const std::filesystem::path& ckpt) {
  std::filesystem::path p = ckpt;
  p.replace_extension(".meta.json");
  return p;
}

void save_model(const std::filesystem::path& ckpt, const ModelConfig& cfg, const Vocabulary& vocab,
                const AttributeVocabulary& attributes, const Parameters& params, Precision precision) {
  save_parameters(params, ckpt, precision);
  json meta;
  meta["model"] = json::parse(model_config_to_json(cfg));
  meta["vocab"] = vocab.tokens();
  meta["attributes"] = attributes.labels();
  detail::write_file(meta_path_of(ckpt).string(), meta.dump(1) + "\n");
}

ModelBundle load_model(const std::filesystem::path& ckpt) {
  if (!std::filesystem::exists(ckpt)) throw std::runtime_error("checkpoint '" + ckpt.string() + "' not found");
  const auto meta_path = meta_path_of(ckpt);
  json meta;
  try {
    meta = json::parse(detail::read_file(meta_path.string()));
  } catch (const json::exception& e) {
    throw FormatError("model metadata '" + meta_path.string() + "': " + e.what());
  }
  ModelBundle b;
  b.cfg = model_config_from_json(meta.at("model").dump());
  const auto tokens = meta.at("vocab").get<std::vector<std::string>>();
  if (tokens.size() < static_cast<std::size_t>(kNumReserved)) throw FormatError("model metadata: vocabulary too short");
  b.vocab = Vocabulary(std::vector<std::string>(tokens.begin() + kNumReserved, tokens.end()));
  if (b.vocab.tokens() != tokens) {
    throw FormatError("model metadata: reserved tokens differ");
  }
  b.attributes = AttributeVocabulary(meta.at("attributes").get<std::vector<std::string>>());
  b.params = load_parameters(ckpt, b.cfg);
  return b;
}

namespace {
std::filesystem::path with_suffix(const std::filesystem::path& prefix, const std::string& suffix) {
  return std::filesystem::path(prefix.string() + suffix);
}
}  // namespace

void save_session(const std::filesystem::path& prefix, const Session& session, const ModelConfig& cfg,
                  const Vocabulary& vocab, const AttributeVocabulary& attributes, bool f64) {
  const Precision precision = f64 ? Precision::kF64 : Precision::kF32;
  if (prefix.has_parent_path()) std::filesystem::create_directories(prefix.parent_path());
  save_model(with_suffix(prefix, ".ckpt"), cfg, vocab, attributes, session.params, precision);
  if (session.best) save_model(with_suffix(prefix, ".best.ckpt"), cfg, vocab, attributes, *session.best, precision);

  const TrainState& st = session.state;
  std::vector<NamedArray> moments;
  const ParameterSet set = session.params.unique();
  for (std::size_t i = 0; i < st.adam.m.size(); ++i) {
    moments.push_back({"m/" + set.at(i).name, set.at(i).tensor.shape(), st.adam.m[i]});
    moments.push_back({"v/" + set.at(i).name, set.at(i).tensor.shape(), st.adam.v[i]});
  }
  save_arrays(moments, with_suffix(prefix, ".optim.ckpt"), Precision::kF64);

  json j;
  j["step"] = st.step;
  j["cursor"] = st.cursor;
  j["rng"] = st.rng.serialize();
  j["adam_step"] = st.adam.step;
  j["beta1"] = st.adam.beta1;
  j["beta2"] = st.adam.beta2;
  j["eps"] = st.adam.eps;
  j["round_to_f32"] = st.adam.round_to_f32;
  j["has_best"] = st.has_best;
  j["best_validation"] = st.best_validation;
  j["f64"] = f64;
  detail::write_file(with_suffix(prefix, ".state.json").string(), j.dump(1) + "\n");
}

LoadedSession load_session(const std::filesystem::path& prefix) {
  LoadedSession out;
  out.model = load_model(with_suffix(prefix, ".ckpt"));
  out.session.params = out.model.params;
  const auto best = with_suffix(prefix, ".best.ckpt");
  if (std::filesystem::exists(best)) out.session.best = load_model(best).params;

  const auto state_path = with_suffix(prefix, ".state.json");
  json j;
  try {
    j = json::parse(detail::read_file(state_path.string()));
  } catch (const json::exception& e) {
    throw FormatError("train state '" + state_path.string() + "': " + e.what());
  }
  TrainState& st = out.session.state;
  st.step = j.at("step").get<std::uint64_t>();
  st.cursor = j.at("cursor").get<std::uint64_t>();
  st.rng.deserialize(j.at("rng").get<std::string>());
  st.adam.step = j.at("adam_step").get<std::uint64_t>();
  st.adam.beta1 = j.at("beta1").get<double>();
  st.adam.beta2 = j.at("beta2").get<double>();
  st.adam.eps = j.at("eps").get<double>();
  st.adam.round_to_f32 = j.at("round_to_f32").get<bool>();
  st.has_best = j.at("has_best").get<bool>();
  st.best_validation = j.at("best_validation").get<double>();

  std::map<std::string, NamedArray> found;
  for (auto& a : load_arrays(with_suffix(prefix, ".optim.ckpt"))) found.emplace(a.name, std::move(a));
  if (!found.empty()) {
    for (const auto& p : out.session.params.unique()) {
      auto m = found.find("m/" + p.name);
      auto v = found.find("v/" + p.name);
      if (m == found.end() || v == found.end() || m->second.shape != p.tensor.shape()) {
        throw ContractError("optimizer state under '" + prefix.string() + "' does not match parameter '" + p.name + "'");
      }
      st.adam.m.push_back(m->second.values);
      st.adam.v.push_back(v->second.values);
    }
  }
  return out;
}

}  // namespace upoc2
