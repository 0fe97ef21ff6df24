// Copyright 2026 The upoc2 Authors
// SPDX-License-Identifier: Apache-2.0

#include "upoc2/run_config.hpp"

#include <charconv>
#include <cmath>

#include "json.hpp"

namespace upoc2 {

namespace detail {
std::string read_file(const std::string& path);
}

namespace {

KeySpec key(std::string k, std::string group, KeyType t, std::string def, std::string help,
            std::optional<double> minimum = std::nullopt) {
  return {std::move(k), std::move(group), t, std::move(def), std::move(help), minimum};
}

std::vector<KeySpec> make_schema() {
  using K = KeyType;
  return {
      key("config", "run", K::kString, "", "flat JSON config file"),
      key("out", "run", K::kString, "out", "output directory"),
      key("seed", "run", K::kInt, "0", "random seed", 0),
      key("workers", "run", K::kInt, "1", "evaluation threads", 1),
      key("f64", "run", K::kBool, "false", "64-bit checkpoints and bit-exact resume"),

      key("corpus", "paths", K::kString, "", "corpus JSONL"),
      key("features", "paths", K::kString, "", "image feature file"),
      key("splits", "paths", K::kString, "", "splits JSON (default: splits stored next to the corpus)"),
      key("init", "paths", K::kString, "", "pre-trained checkpoint for finetune (empty: from scratch)"),
      key("resume", "paths", K::kString, "", "session prefix to resume from"),
      key("ckpt", "paths", K::kString, "", "model checkpoint for translate/evaluate"),
      key("split", "paths", K::kString, "test", "split to translate or evaluate"),
      key("min_count", "paths", K::kInt, "1", "vocabulary min count", 1),

      key("preset", "model", K::kString, "clean", "model preset: clean, noisy, paper-clean, paper-noisy"),
      key("layers_image", "model", K::kInt, "1", "image encoder layers (L_v)", 0),
      key("layers_source", "model", K::kInt, "1", "source encoder layers (L_s)", 0),
      key("layers_target", "model", K::kInt, "1", "target encoder layers (L_t)", 0),
      key("layers_cross", "model", K::kInt, "3", "cross encoder layers (L_c)", 1),
      key("hidden", "model", K::kInt, "64", "hidden size H", 1),
      key("heads", "model", K::kInt, "4", "attention heads A", 1),
      key("ff_hidden", "model", K::kInt, "0", "feed-forward width (0: 4H)", 0),
      key("dropout", "model", K::kReal, "0.1", "dropout rate", 0),
      key("init_std", "model", K::kReal, "0.02", "truncated-normal init std"),
      key("share_encoders", "model", K::kBool, "true", "share source/target encoders during pre-training"),
      key("max_images", "model", K::kInt, "8", "images per triplet", 1),
      key("max_src_tokens", "model", K::kInt, "16", "source tokens (without specials)", 1),
      key("max_tgt_tokens", "model", K::kInt, "16", "target tokens (without specials)", 1),

      key("max_steps", "train", K::kInt, "2000", "optimisation steps", 1),
      key("warmup_steps", "train", K::kInt, "100", "warm-up steps", 0),
      key("base_lr", "train", K::kReal, "0.0001", "pre-training peak learning rate"),
      key("finetune_lr", "train", K::kReal, "6e-05", "fine-tuning peak learning rate"),
      key("batch_size", "train", K::kInt, "16", "batch size", 1),
      key("log_every", "train", K::kInt, "1", "log interval (0: silent)", 0),
      key("ckpt_every", "train", K::kInt, "0", "checkpoint interval (0: end only)", 0),
      key("eval_every", "train", K::kInt, "100", "validation interval while fine-tuning", 1),
      key("select_by_bleu", "train", K::kBool, "false", "fine-tuning keeps the best validation BLEU@4"),
      key("clip_norm", "train", K::kReal, "1", "global gradient norm clip"),
      key("tasks", "train", K::kString, "mtlm,ism,attp", "pre-training tasks: mtlm | mtlm,ism | mtlm,ism,attp"),
      key("attp_normalize", "train", K::kBool, "true", "divide the attribute loss by |C|"),
      key("mask_rate", "train", K::kReal, "0.15", "fraction of words masked"),
      key("per_sentence_masking", "train", K::kBool, "false", "select masked words per sentence"),

      key("max_len", "decode", K::kInt, "16", "longest translation", 1),
      key("decode_mode", "decode", K::kString, "greedy", "greedy or sample"),
      key("temperature", "decode", K::kReal, "1", "sampling temperature"),

      key("triplets", "synth", K::kInt, "500", "triplets to generate", 1),
      key("validation", "synth", K::kInt, "50", "validation triplets", 0),
      key("test", "synth", K::kInt, "50", "test triplets", 0),
      key("categories", "synth", K::kInt, "4", "product categories", 1),
      key("colors", "synth", K::kInt, "6", "colour attribute values", 1),
      key("materials", "synth", K::kInt, "6", "material attribute values", 1),
      key("fillers", "synth", K::kInt, "24", "unambiguous filler word types", 0),
      key("ambiguous", "synth", K::kInt, "8", "ambiguous word types K", 0),
      key("ambiguous_rate", "synth", K::kReal, "0.3", "chance a free slot holds an ambiguous word", 0),
      key("feature_dim", "synth", K::kInt, "16", "image feature dimension", 1),
      key("sigma", "synth", K::kReal, "0.1", "image feature noise", 0),
  };
}

std::string json_to_text(const nlohmann::json& v, KeyType t) {
  switch (t) {
    case KeyType::kInt:
      if (!v.is_number_integer()) return {};
      return std::to_string(v.get<long long>());
    case KeyType::kReal:
      if (!v.is_number()) return {};
      return v.dump();
    case KeyType::kBool:
      if (!v.is_boolean()) return {};
      return v.get<bool>() ? "true" : "false";
    case KeyType::kString:
      if (!v.is_string()) return {};
      return v.get<std::string>();
  }
  return {};
}

bool parse_int(const std::string& s, long long& out) {
  const auto r = std::from_chars(s.data(), s.data() + s.size(), out);
  return r.ec == std::errc() && r.ptr == s.data() + s.size() && !s.empty();
}

bool parse_real(const std::string& s, double& out) {
  try {
    std::size_t used = 0;
    out = std::stod(s, &used);
    return used == s.size() && std::isfinite(out);
  } catch (const std::exception&) {
    return false;
  }
}

bool parse_bool(const std::string& s, bool& out) {
  if (s == "true" || s == "1") return out = true, true;
  if (s == "false" || s == "0") return out = false, true;
  return false;
}

const std::set<std::string> kPaperPresets = {"paper-clean", "paper-noisy"};

}  // namespace

const std::vector<KeySpec>& config_schema() {
  static const std::vector<KeySpec> schema = make_schema();
  return schema;
}

const KeySpec* find_key(const std::string& k) {
  for (const auto& s : config_schema()) {
    if (s.key == k) return &s;
  }
  return nullptr;
}

std::string flag_of(const std::string& k) {
  std::string f = "--" + k;
  for (auto& c : f) c = c == '_' ? '-' : c;
  return f;
}

std::string type_name(KeyType t) {
  switch (t) {
    case KeyType::kInt: return "INT";
    case KeyType::kReal: return "FLOAT";
    case KeyType::kBool: return "BOOL";
    case KeyType::kString: return "TEXT";
  }
  return "?";
}

RunConfig::RunConfig() {
  for (const auto& s : config_schema()) values_[s.key] = s.default_value;
}

const KeySpec& RunConfig::spec(const std::string& k) const {
  const KeySpec* s = find_key(k);
  if (!s) throw ConfigError("unknown config key '" + k + "'");
  return *s;
}

void RunConfig::set(const std::string& k, const std::string& value, const std::string& origin) {
  const KeySpec& s = spec(k);
  const std::string where = origin + ": " + k;
  switch (s.type) {
    case KeyType::kInt: {
      long long v;
      if (!parse_int(value, v)) throw ConfigError(where + " expects an integer, got '" + value + "'");
      if (s.minimum && static_cast<double>(v) < *s.minimum) {
        throw ConfigError(where + " must be >= " + std::to_string(static_cast<long long>(*s.minimum)) + ", got " + value);
      }
      break;
    }
    case KeyType::kReal: {
      double v;
      if (!parse_real(value, v)) throw ConfigError(where + " expects a number, got '" + value + "'");
      if (s.minimum && v < *s.minimum) throw ConfigError(where + " must be >= " + nlohmann::json(*s.minimum).dump() + ", got " + value);
      break;
    }
    case KeyType::kBool: {
      bool v;
      if (!parse_bool(value, v)) throw ConfigError(where + " expects true or false, got '" + value + "'");
      break;
    }
    case KeyType::kString:
      break;
  }
  values_[k] = value;
  explicit_.insert(k);
}

void RunConfig::merge_json(const std::string& text, const std::string& origin) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError(origin + ": expected a flat JSON object");
  for (const auto& [k, v] : j.items()) {
    const KeySpec* s = find_key(k);
    if (!s) throw ConfigError(origin + ": unknown config key '" + k + "'");
    if (k == "config") throw ConfigError(origin + ": 'config' cannot be nested");
    const std::string text_value = json_to_text(v, s->type);
    if (text_value.empty() && s->type != KeyType::kString) {
      throw ConfigError(origin + ": " + k + " expects " + type_name(s->type) + ", got " + v.dump());
    }
    if (s->type == KeyType::kString && !v.is_string()) {
      throw ConfigError(origin + ": " + k + " expects TEXT, got " + v.dump());
    }
    set(k, text_value, origin);
  }
}

void RunConfig::merge_file(const std::filesystem::path& path) {
  std::string text;
  try {
    text = detail::read_file(path.string());
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  merge_json(text, path.string());
}

long long RunConfig::get_int(const std::string& k) const {
  if (spec(k).type != KeyType::kInt) throw ConfigError(k + " is not an integer key");
  long long v = 0;
  parse_int(values_.at(k), v);
  return v;
}

double RunConfig::get_real(const std::string& k) const {
  if (spec(k).type != KeyType::kReal) throw ConfigError(k + " is not a real key");
  double v = 0;
  parse_real(values_.at(k), v);
  return v;
}

bool RunConfig::get_bool(const std::string& k) const {
  if (spec(k).type != KeyType::kBool) throw ConfigError(k + " is not a boolean key");
  bool v = false;
  parse_bool(values_.at(k), v);
  return v;
}

const std::string& RunConfig::get_string(const std::string& k) const {
  if (spec(k).type != KeyType::kString) throw ConfigError(k + " is not a text key");
  return values_.at(k);
}

ModelConfig RunConfig::model_config() const {
  ModelConfig c;
  try {
    c = ModelConfig::preset(get_string("preset"));
  } catch (const std::exception& e) {
    throw ConfigError(std::string("preset: ") + e.what());
  }
  auto size = [&](const std::string& k, std::size_t& field) {
    if (explicitly_set(k)) field = static_cast<std::size_t>(get_int(k));
  };
  size("layers_image", c.layers_image);
  size("layers_source", c.layers_source);
  size("layers_target", c.layers_target);
  size("layers_cross", c.layers_cross);
  size("hidden", c.hidden);
  size("heads", c.heads);
  size("ff_hidden", c.ff_hidden);
  size("max_images", c.limits.max_images);
  size("max_src_tokens", c.limits.max_src_tokens);
  size("max_tgt_tokens", c.limits.max_tgt_tokens);
  if (explicitly_set("dropout")) c.dropout = get_real("dropout");
  if (explicitly_set("init_std")) c.init_std = get_real("init_std");
  if (explicitly_set("share_encoders")) c.share_src_tgt_encoders = get_bool("share_encoders");
  return c;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t;
  const bool paper = kPaperPresets.count(get_string("preset")) > 0;
  t.max_steps = static_cast<std::size_t>(get_int("max_steps"));
  t.warmup_steps = static_cast<std::size_t>(get_int("warmup_steps"));
  if (paper && !explicitly_set("max_steps")) t.max_steps = 250000;
  if (paper && !explicitly_set("warmup_steps")) t.warmup_steps = 10000;
  t.base_lr = get_real("base_lr");
  t.finetune_lr = get_real("finetune_lr");
  t.batch_size = static_cast<std::size_t>(get_int("batch_size"));
  t.seed = static_cast<std::uint64_t>(get_int("seed"));
  t.log_every = static_cast<std::size_t>(get_int("log_every"));
  t.ckpt_every = static_cast<std::size_t>(get_int("ckpt_every"));
  t.eval_every = static_cast<std::size_t>(get_int("eval_every"));
  t.clip_norm = get_real("clip_norm");
  t.select_by_bleu = get_bool("select_by_bleu");
  t.f64 = get_bool("f64");
  t.attp_normalize = get_bool("attp_normalize");
  t.masking.rate = get_real("mask_rate");
  t.masking.per_sentence = get_bool("per_sentence_masking");
  try {
    t.tasks = parse_task_list(get_string("tasks"));
  } catch (const std::exception& e) {
    throw ConfigError(std::string("tasks: ") + e.what());
  }
  return t;
}

DecodeConfig RunConfig::decode_config() const {
  DecodeConfig d;
  d.max_len = static_cast<std::size_t>(get_int("max_len"));
  d.temperature = get_real("temperature");
  d.seed = static_cast<std::uint64_t>(get_int("seed"));
  try {
    d.mode = parse_decode_mode(get_string("decode_mode"));
  } catch (const std::exception& e) {
    throw ConfigError(std::string("decode_mode: ") + e.what());
  }
  return d;
}

SynthSpec RunConfig::synth_spec() const {
  SynthSpec s;
  s.triplets = static_cast<std::size_t>(get_int("triplets"));
  s.validation = static_cast<std::size_t>(get_int("validation"));
  s.test = static_cast<std::size_t>(get_int("test"));
  s.categories = static_cast<std::size_t>(get_int("categories"));
  s.colors = static_cast<std::size_t>(get_int("colors"));
  s.materials = static_cast<std::size_t>(get_int("materials"));
  s.fillers = static_cast<std::size_t>(get_int("fillers"));
  s.ambiguous = static_cast<std::size_t>(get_int("ambiguous"));
  s.ambiguous_rate = get_real("ambiguous_rate");
  s.feature_dim = static_cast<std::size_t>(get_int("feature_dim"));
  s.sigma = get_real("sigma");
  return s;
}

}  // namespace upoc2
