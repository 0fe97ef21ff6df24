// Copyright 2026 The upoc2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "upoc2/decode.hpp"
#include "upoc2/model.hpp"
#include "upoc2/synthetic.hpp"
#include "upoc2/training.hpp"

namespace upoc2 {

// Bad flag, bad config key or value: exit code 2 at the command line.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class KeyType { kInt, kReal, kBool, kString };

struct KeySpec {
  std::string key;    // config-file spelling; the flag is --key with '_' -> '-'
  std::string group;  // model, train, decode, synth, paths, run
  KeyType type;
  std::string default_value;
  std::string help;
  std::optional<double> minimum;
};

const std::vector<KeySpec>& config_schema();
const KeySpec* find_key(const std::string& key);
std::string flag_of(const std::string& key);
std::string type_name(KeyType type);

// Flat configuration. Resolution order: schema defaults, then the model
// preset, then the config file, then flags.
class RunConfig {
 public:
  RunConfig();

  // Reads a flat JSON object. Unknown keys and ill-typed values throw ConfigError.
  void merge_file(const std::filesystem::path& path);
  void merge_json(const std::string& text, const std::string& origin);
  // One override given as text, e.g. from a flag.
  void set(const std::string& key, const std::string& value, const std::string& origin);

  bool explicitly_set(const std::string& key) const { return explicit_.count(key) > 0; }
  long long get_int(const std::string& key) const;
  double get_real(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  const std::string& get_string(const std::string& key) const;

  // Preset first, explicit model keys on top. Vocabulary and feature sizes
  // are left for the caller.
  ModelConfig model_config() const;
  TrainConfig train_config() const;
  DecodeConfig decode_config() const;
  SynthSpec synth_spec() const;

 private:
  const KeySpec& spec(const std::string& key) const;
  std::map<std::string, std::string> values_;
  std::set<std::string> explicit_;
};

}  // namespace upoc2
