// Copyright 2026 The upoc2 Authors
// SPDX-License-Identifier: Apache-2.0
//
// upoc2 command-line tool: gen-synthetic, pretrain, finetune, translate,
// evaluate. Exit status 0 on success, 1 on runtime failure, 2 on usage or
// configuration errors.

#include <deque>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>

#include "CLI11.hpp"
#include "upoc2/checkpoint.hpp"
#include "upoc2/data.hpp"
#include "upoc2/decode.hpp"
#include "upoc2/errors.hpp"
#include "upoc2/run_config.hpp"
#include "upoc2/synthetic.hpp"
#include "upoc2/training.hpp"

namespace fs = std::filesystem;
using namespace upoc2;

namespace {

// Captured flag text per key; bools in their own map.
struct FlagValues {
  std::map<std::string, std::string> text;
  std::map<std::string, bool> flags;
  std::map<std::string, CLI::Option*> options;
};

void register_keys(CLI::App& app, FlagValues& fv, const std::set<std::string>& groups,
                   const std::set<std::string>& extra = {}) {
  for (const auto& s : config_schema()) {
    if (!groups.count(s.group) && !extra.count(s.key)) continue;
    const std::string desc = s.help + " [" + type_name(s.type) + ", default " +
                             (s.default_value.empty() ? "\"\"" : s.default_value) + "]";
    CLI::Option* opt;
    if (s.type == KeyType::kBool) {
      opt = app.add_flag(flag_of(s.key), fv.flags[s.key], desc);
    } else {
      opt = app.add_option(flag_of(s.key), fv.text[s.key], desc);
      opt->type_name(type_name(s.type));
      opt->allow_extra_args(false);
    }
    fv.options[s.key] = opt;
  }
}

RunConfig resolve(const FlagValues& fv) {
  RunConfig cfg;
  if (fv.options.count("config") && fv.options.at("config")->count()) cfg.merge_file(fv.text.at("config"));
  for (const auto& [key, opt] : fv.options) {
    if (key == "config" || !opt->count()) continue;
    const std::string value = fv.text.count(key) ? fv.text.at(key) : (fv.flags.at(key) ? "true" : "false");
    cfg.set(key, value, flag_of(key));
  }
  return cfg;
}

const std::string& require_path(const RunConfig& cfg, const std::string& key) {
  const std::string& v = cfg.get_string(key);
  if (v.empty()) throw ConfigError(flag_of(key) + " is required");
  return v;
}

Corpus load_with_splits(const RunConfig& cfg) {
  const fs::path corpus_path = require_path(cfg, "corpus");
  Corpus corpus = load_corpus(corpus_path, require_path(cfg, "features"));
  fs::path splits = cfg.get_string("splits");
  if (splits.empty()) {
    const fs::path sibling = corpus_path.parent_path() / "splits.json";
    if (fs::exists(sibling)) splits = sibling;
  }
  if (!splits.empty()) {
    corpus.splits = load_splits(splits);
    corpus.build_indexes();
  }
  return corpus;
}

// A named split; the whole corpus when no splits are defined.
Corpus split_of(const Corpus& corpus, const std::string& name) {
  const Splits& s = corpus.splits;
  if (s.train.empty() && s.validation.empty() && s.test.empty()) return corpus;
  return corpus.subset(name);
}

void finish_model_config(ModelConfig& m, const Vocabulary& vocab, const Corpus& corpus) {
  m.vocab_size = vocab.size();
  m.attr_vocab_size = std::max<std::size_t>(1, corpus.attribute_vocab.size());
  m.feature_dim = corpus.feature_dim() ? corpus.feature_dim() : m.feature_dim;
}

int cmd_gen_synthetic(const RunConfig& cfg) {
  const SynthSpec spec = cfg.synth_spec();
  if (spec.sigma < 0) throw ConfigError("--sigma must be >= 0");
  try {
    spec.validate();
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
  const Corpus corpus = generate_synthetic_corpus(spec, static_cast<std::uint64_t>(cfg.get_int("seed")));
  const fs::path out = cfg.get_string("out");
  fs::create_directories(out);
  save_corpus(corpus, out / "corpus.jsonl");
  save_image_features(feature_table_of(corpus), out / "features.bin");
  save_splits(corpus.splits, out / "splits.json");
  std::cout << "wrote " << corpus.triplets.size() << " triplets to " << out.string() << "\n";
  return 0;
}

std::ofstream open_log(const fs::path& path, bool append) {
  std::ofstream log(path, append ? std::ios::app : std::ios::trunc);
  if (!log) throw std::runtime_error("cannot write " + path.string());
  return log;
}

void print_counts(const TrainResult& r) {
  std::cout << "steps " << r.session.state.step << ", tasks";
  for (const auto& [task, n] : r.task_counts) std::cout << " " << task << "=" << n;
  std::cout << ", skipped samples " << r.skipped << "\n";
}

int cmd_pretrain(const RunConfig& cfg) {
  TrainConfig tcfg = cfg.train_config();
  ModelConfig mcfg = cfg.model_config();
  const Corpus corpus = load_with_splits(cfg);
  const Corpus train = split_of(corpus, "train");
  const fs::path out = cfg.get_string("out");
  fs::create_directories(out);

  Session session;
  Vocabulary vocab;
  if (!cfg.get_string("resume").empty()) {
    LoadedSession loaded = load_session(cfg.get_string("resume"));
    vocab = loaded.model.vocab;
    mcfg = loaded.model.cfg;
    session = std::move(loaded.session);
  } else {
    vocab = build_vocab(train, static_cast<std::size_t>(cfg.get_int("min_count")));
    finish_model_config(mcfg, vocab, corpus);
    try {
      mcfg.validate();
      tcfg.validate();
    } catch (const ContractError& e) {
      throw ConfigError(e.what());
    }
    session = start_session(mcfg, tcfg);
  }
  std::ofstream log = open_log(out / "pretrain.log.jsonl", !cfg.get_string("resume").empty());
  RunHooks hooks;
  hooks.log = &log;
  hooks.checkpoint_prefix = out / "pretrain";
  const TrainResult r = pretrain(train, vocab, mcfg, tcfg, std::move(session), hooks);
  print_counts(r);
  std::cout << "checkpoint " << (out / "pretrain.ckpt").string() << "\n";
  return 0;
}

int cmd_finetune(const RunConfig& cfg) {
  TrainConfig tcfg = cfg.train_config();
  ModelConfig mcfg = cfg.model_config();
  const Corpus corpus = load_with_splits(cfg);
  const Corpus train = split_of(corpus, "train");
  Corpus validation;
  if (!corpus.splits.validation.empty()) validation = corpus.subset("validation");
  const fs::path out = cfg.get_string("out");
  fs::create_directories(out);

  Session session;
  Vocabulary vocab;
  if (!cfg.get_string("resume").empty()) {
    LoadedSession loaded = load_session(cfg.get_string("resume"));
    vocab = loaded.model.vocab;
    mcfg = loaded.model.cfg;
    session = std::move(loaded.session);
  } else if (!cfg.get_string("init").empty()) {
    const fs::path init = cfg.get_string("init");
    const ModelBundle pre = load_model(init);
    vocab = pre.vocab;
    finish_model_config(mcfg, vocab, corpus);
    mcfg.attr_vocab_size = pre.cfg.attr_vocab_size;
    // Loading against the resolved config reports every differing dimension.
    session = finetune_session(load_parameters(init, mcfg), mcfg, tcfg);
  } else {
    vocab = build_vocab(train, static_cast<std::size_t>(cfg.get_int("min_count")));
    finish_model_config(mcfg, vocab, corpus);
    try {
      mcfg.validate();
      tcfg.validate();
    } catch (const ContractError& e) {
      throw ConfigError(e.what());
    }
    session = start_session(mcfg, tcfg);
  }
  std::ofstream log = open_log(out / "finetune.log.jsonl", !cfg.get_string("resume").empty());
  RunHooks hooks;
  hooks.log = &log;
  hooks.checkpoint_prefix = out / "finetune";
  const TrainResult r = finetune(train, validation, vocab, mcfg, tcfg, std::move(session), hooks);
  const Parameters& chosen = r.session.best ? *r.session.best : r.session.params;
  save_model(out / "model.ckpt", mcfg, vocab, corpus.attribute_vocab, chosen,
             tcfg.f64 ? Precision::kF64 : Precision::kF32);
  print_counts(r);
  if (r.session.state.has_best) {
    std::cout << "best validation " << (tcfg.select_by_bleu ? "BLEU@4 " : "PMT loss ") << r.session.state.best_validation
              << "\n";
  }
  std::cout << "checkpoint " << (out / "model.ckpt").string() << "\n";
  return 0;
}

Evaluation run_translation(const RunConfig& cfg) {
  const ModelBundle model = load_model(require_path(cfg, "ckpt"));
  const Corpus corpus = load_with_splits(cfg);
  const Corpus part = split_of(corpus, cfg.get_string("split"));
  const DecodeConfig dcfg = cfg.decode_config();
  return evaluate_corpus(model.params, model.cfg, model.vocab, part.triplets, dcfg,
                         static_cast<std::size_t>(cfg.get_int("workers")));
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
}

int cmd_translate(const RunConfig& cfg) {
  const Evaluation ev = run_translation(cfg);
  const fs::path out = cfg.get_string("out");
  fs::create_directories(out);
  write_text(out / "hypotheses.jsonl", hypotheses_jsonl(ev));
  std::size_t open = 0;
  for (auto t : ev.terminated) open += t ? 0 : 1;
  std::cout << "translated " << ev.hypotheses.size() << " segments (" << open << " without [EOS]) to "
            << (out / "hypotheses.jsonl").string() << "\n";
  return 0;
}

int cmd_evaluate(const RunConfig& cfg) {
  const Evaluation ev = run_translation(cfg);
  const fs::path out = cfg.get_string("out");
  fs::create_directories(out);
  write_text(out / "hypotheses.jsonl", hypotheses_jsonl(ev));
  const std::string report = report_to_json(ev.report);
  write_text(out / "report.json", report + "\n");
  std::cout << report << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal pre-training and fine-tuning for product-oriented translation"};
  app.require_subcommand(1);
  struct Command {
    CLI::App* app;
    FlagValues flags;
    int (*run)(const RunConfig&);
  };
  std::deque<Command> commands;
  auto add = [&](const std::string& name, const std::string& desc, const std::set<std::string>& groups,
                 const std::set<std::string>& extra, int (*run)(const RunConfig&)) {
    commands.push_back({app.add_subcommand(name, desc), {}, run});
    register_keys(*commands.back().app, commands.back().flags, groups, extra);
  };
  const std::set<std::string> base = {"config", "out", "seed", "workers", "f64"};
  add("gen-synthetic", "write a synthetic corpus, feature file and splits", {"synth"}, base, cmd_gen_synthetic);
  add("pretrain", "pre-train with MTLM, ISM and ATTP", {"model", "train"},
      {"config", "out", "seed", "workers", "f64", "corpus", "features", "splits", "resume", "min_count"}, cmd_pretrain);
  add("finetune", "fine-tune on the translation task", {"model", "train"},
      {"config", "out", "seed", "workers", "f64", "corpus", "features", "splits", "init", "resume", "min_count"},
      cmd_finetune);
  add("translate", "decode a corpus split", {"decode"},
      {"config", "out", "seed", "workers", "f64", "ckpt", "corpus", "features", "splits", "split"}, cmd_translate);
  add("evaluate", "decode and score a corpus split", {"decode"},
      {"config", "out", "seed", "workers", "f64", "ckpt", "corpus", "features", "splits", "split"}, cmd_evaluate);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  for (auto& c : commands) {
    if (!c.app->parsed()) continue;
    RunConfig cfg;
    try {
      cfg = resolve(c.flags);
      cfg.model_config();
      cfg.train_config();
      cfg.decode_config();
    } catch (const ConfigError& e) {
      std::cerr << "error: " << e.what() << "\n";
      return 2;
    }
    try {
      return c.run(cfg);
    } catch (const ConfigError& e) {
      std::cerr << "error: " << e.what() << "\n";
      return 2;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      return 1;
    }
  }
  return 2;
}
