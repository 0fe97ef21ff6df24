// Copyright 2026 The upoc2 Authors
// SPDX-License-Identifier: Apache-2.0

#include "upoc2/data.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

#include "binary_io.hpp"
#include "json.hpp"
#include "upoc2/errors.hpp"

namespace upoc2 {

using json = nlohmann::json;

namespace detail {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "' for reading");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const std::string& path, const std::string& contents) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  if (!out) throw std::runtime_error("failed writing '" + path + "'");
}

}  // namespace detail

std::string task_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::kMtlm: return "mtlm";
    case TaskKind::kIsm: return "ism";
    case TaskKind::kAttp: return "attp";
    case TaskKind::kPmt: return "pmt";
  }
  throw ContractError("unknown task kind " + std::to_string(static_cast<int>(kind)));
}

TaskKind parse_task(const std::string& name) {
  if (name == "mtlm") return TaskKind::kMtlm;
  if (name == "ism") return TaskKind::kIsm;
  if (name == "attp") return TaskKind::kAttp;
  if (name == "pmt") return TaskKind::kPmt;
  throw ContractError("unknown task '" + name + "'");
}

std::vector<std::uint8_t> MaskedBatch::pad_flags() const {
  const std::size_t t = total_slots();
  std::vector<std::uint8_t> pad(batch_size * t, 0);
  for (std::size_t b = 0; b < batch_size; ++b) {
    const auto& len = lengths[b];
    for (std::size_t i = 0; i < image_slots; ++i) pad[b * t + i] = i >= len.image_count;
    for (std::size_t i = 0; i < src_slots; ++i) pad[b * t + image_slots + i] = i >= len.src_length;
    for (std::size_t i = 0; i < tgt_slots; ++i) pad[b * t + image_slots + src_slots + i] = i >= len.tgt_length;
  }
  return pad;
}

// ---------------------------------------------------------------------------
// Vocabularies

namespace {
const std::vector<std::string> kReservedTokens = {"[PAD]", "[SOS]", "[EOS]", "[MASK]", "[UNK]"};
}

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

Vocabulary::Vocabulary(const std::vector<std::string>& regular_tokens) : tokens_(kReservedTokens) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], static_cast<std::int64_t>(i));
  for (const auto& t : regular_tokens) {
    if (index_.count(t)) throw ContractError("vocabulary: duplicate or reserved token '" + t + "'");
    index_.emplace(t, static_cast<std::int64_t>(tokens_.size()));
    tokens_.push_back(t);
  }
}

std::int64_t Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token(std::int64_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw IndexError("vocabulary: id " + std::to_string(id) + " outside [0, " + std::to_string(tokens_.size()) + ")");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<std::int64_t> Vocabulary::encode(const std::vector<std::string>& tokens) const {
  std::vector<std::int64_t> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(id(t));
  return out;
}

std::vector<std::string> Vocabulary::decode(const std::vector<std::int64_t>& ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (auto i : ids) out.push_back(token(i));
  return out;
}

AttributeVocabulary::AttributeVocabulary(std::vector<std::string> labels) : labels_(std::move(labels)) {
  std::sort(labels_.begin(), labels_.end());
  labels_.erase(std::unique(labels_.begin(), labels_.end()), labels_.end());
  for (std::size_t i = 0; i < labels_.size(); ++i) index_.emplace(labels_[i], static_cast<std::int64_t>(i));
}

std::optional<std::int64_t> AttributeVocabulary::id(const std::string& label) const {
  auto it = index_.find(label);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

Vocabulary build_vocab(const Corpus& corpus, std::size_t min_count) {
  if (min_count < 1) throw ContractError("build_vocab: min_count must be >= 1");
  std::map<std::string, std::size_t> counts;
  for (const auto& t : corpus.triplets) {
    for (const auto& w : t.src_tokens) ++counts[w];
    for (const auto& w : t.tgt_tokens) ++counts[w];
  }
  std::vector<std::pair<std::string, std::size_t>> entries;
  const std::set<std::string> reserved(kReservedTokens.begin(), kReservedTokens.end());
  for (const auto& [w, c] : counts) {
    if (c >= min_count && !reserved.count(w)) entries.emplace_back(w, c);
  }
  std::stable_sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::vector<std::string> tokens;
  for (const auto& e : entries) tokens.push_back(e.first);
  return Vocabulary(tokens);
}

void save_vocab(const Vocabulary& vocab, const std::filesystem::path& path) {
  json j = vocab.tokens();
  detail::write_file(path.string(), j.dump() + "\n");
}

Vocabulary load_vocab(const std::filesystem::path& path) {
  const json j = json::parse(detail::read_file(path.string()));
  auto tokens = j.get<std::vector<std::string>>();
  if (tokens.size() < kReservedTokens.size() ||
      !std::equal(kReservedTokens.begin(), kReservedTokens.end(), tokens.begin())) {
    throw FormatError("vocabulary '" + path.string() + "' does not start with the reserved tokens");
  }
  return Vocabulary(std::vector<std::string>(tokens.begin() + static_cast<std::ptrdiff_t>(kReservedTokens.size()), tokens.end()));
}

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  std::string w;
  while (is >> w) {
    std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    out.push_back(w);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Feature files

void FeatureTable::add(const std::string& id, std::vector<float> vector) {
  if (vector.size() != dim_) {
    throw DimensionError("feature '" + id + "' has dimension " + std::to_string(vector.size()) + ", table expects " +
                         std::to_string(dim_));
  }
  if (vectors_.count(id)) throw ContractError("duplicate feature id '" + id + "'");
  ids_.push_back(id);
  vectors_.emplace(id, std::move(vector));
}

const std::vector<float>* FeatureTable::find(const std::string& id) const {
  auto it = vectors_.find(id);
  return it == vectors_.end() ? nullptr : &it->second;
}

namespace {
constexpr char kFeatureMagic[8] = {'U', 'P', 'O', 'C', 'F', 'E', 'A', 'T'};
constexpr std::uint32_t kFeatureVersion = 1;
}  // namespace

FeatureTable load_image_features(const std::filesystem::path& path) {
  const std::string raw = detail::read_file(path.string());
  detail::ByteReader in(raw, "feature file '" + path.string() + "'");
  if (in.bytes(8) != std::string(kFeatureMagic, 8)) in.fail("bad magic");
  const auto version = in.u32();
  if (version != kFeatureVersion) in.fail("unsupported version " + std::to_string(version));
  const auto dim = in.u32();
  const auto count = in.u32();
  FeatureTable table(dim);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = in.u16();
    std::string id = in.bytes(len);
    std::vector<float> v(dim);
    for (auto& x : v) x = in.f32();
    table.add(id, std::move(v));
  }
  if (!in.at_end()) in.fail("trailing bytes after " + std::to_string(count) + " entries");
  return table;
}

void save_image_features(const FeatureTable& table, const std::filesystem::path& path) {
  detail::ByteWriter out;
  out.bytes(kFeatureMagic, 8);
  out.u32(kFeatureVersion);
  out.u32(static_cast<std::uint32_t>(table.dim()));
  out.u32(static_cast<std::uint32_t>(table.size()));
  for (const auto& id : table.ids()) {
    if (id.size() > 0xffff) throw ContractError("feature id longer than 65535 bytes");
    out.u16(static_cast<std::uint16_t>(id.size()));
    out.bytes(id.data(), id.size());
    for (float x : *table.find(id)) out.f32(x);
  }
  detail::write_file(path.string(), out.str());
}

// ---------------------------------------------------------------------------
// Corpus files

void Corpus::build_indexes() {
  category_index.clear();
  id_index.clear();
  std::vector<std::string> attrs;
  for (std::size_t i = 0; i < triplets.size(); ++i) {
    const auto& t = triplets[i];
    if (!id_index.emplace(t.id, i).second) throw FormatError("duplicate triplet id '" + t.id + "'");
    category_index[t.category].push_back(i);
    attrs.insert(attrs.end(), t.attributes.begin(), t.attributes.end());
  }
  attribute_vocab = AttributeVocabulary(std::move(attrs));
  std::set<std::string> seen;
  for (const auto* list : {&splits.train, &splits.validation, &splits.test}) {
    for (const auto& id : *list) {
      if (!id_index.count(id)) throw FormatError("split references unknown triplet '" + id + "'");
      if (!seen.insert(id).second) throw FormatError("triplet '" + id + "' appears in more than one split");
    }
  }
}

Corpus Corpus::subset(const std::string& split) const {
  const std::vector<std::string>* ids = nullptr;
  if (split == "train") ids = &splits.train;
  else if (split == "validation") ids = &splits.validation;
  else if (split == "test") ids = &splits.test;
  else throw ContractError("unknown split '" + split + "'");
  Corpus out;
  for (const auto& id : *ids) out.triplets.push_back(triplets.at(id_index.at(id)));
  out.splits.train = split == "train" ? *ids : std::vector<std::string>{};
  out.splits.validation = split == "validation" ? *ids : std::vector<std::string>{};
  out.splits.test = split == "test" ? *ids : std::vector<std::string>{};
  AttributeVocabulary full = attribute_vocab;
  out.build_indexes();
  // Keep attribute ids stable across splits.
  out.attribute_vocab = full;
  return out;
}

std::size_t Corpus::feature_dim() const {
  for (const auto& t : triplets) {
    if (!t.image_features.empty()) return t.image_features.front().size();
  }
  return 0;
}

Corpus load_corpus(const std::filesystem::path& corpus_path, const std::filesystem::path& features_path) {
  const FeatureTable features = load_image_features(features_path);
  std::ifstream in(corpus_path);
  if (!in) throw std::runtime_error("cannot open corpus '" + corpus_path.string() + "'");
  Corpus corpus;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto where = corpus_path.string() + ":" + std::to_string(line_no);
    Triplet t;
    try {
      const json j = json::parse(line);
      t.id = j.at("id").get<std::string>();
      t.category = j.at("category").get<std::string>();
      t.attributes = j.at("attributes").get<std::vector<std::string>>();
      t.src_tokens = j.at("src").get<std::vector<std::string>>();
      t.tgt_tokens = j.at("tgt").get<std::vector<std::string>>();
      t.feature_ids = j.at("feature_ids").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
      throw FormatError(where + ": malformed triplet: " + e.what());
    }
    if (t.feature_ids.empty()) throw FormatError(where + ": triplet '" + t.id + "' has no images");
    for (const auto& fid : t.feature_ids) {
      const auto* v = features.find(fid);
      if (!v) throw FormatError(where + ": triplet '" + t.id + "' references missing feature id '" + fid + "'");
      t.image_features.push_back(*v);
    }
    corpus.triplets.push_back(std::move(t));
  }
  corpus.build_indexes();
  return corpus;
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& corpus_path) {
  std::string out;
  for (const auto& t : corpus.triplets) {
    json j;
    j["id"] = t.id;
    j["category"] = t.category;
    j["attributes"] = t.attributes;
    j["src"] = t.src_tokens;
    j["tgt"] = t.tgt_tokens;
    j["feature_ids"] = t.feature_ids;
    out += j.dump() + "\n";
  }
  detail::write_file(corpus_path.string(), out);
}

FeatureTable feature_table_of(const Corpus& corpus) {
  FeatureTable table(corpus.feature_dim());
  for (const auto& t : corpus.triplets) {
    if (t.feature_ids.size() != t.image_features.size()) {
      throw ContractError("triplet '" + t.id + "' has mismatched feature ids and vectors");
    }
    for (std::size_t i = 0; i < t.feature_ids.size(); ++i) {
      if (const auto* existing = table.find(t.feature_ids[i])) {
        if (*existing != t.image_features[i]) throw ContractError("feature id '" + t.feature_ids[i] + "' reused");
        continue;
      }
      table.add(t.feature_ids[i], t.image_features[i]);
    }
  }
  return table;
}

Splits load_splits(const std::filesystem::path& path) {
  try {
    const json j = json::parse(detail::read_file(path.string()));
    Splits s;
    s.train = j.at("train").get<std::vector<std::string>>();
    s.validation = j.at("validation").get<std::vector<std::string>>();
    s.test = j.at("test").get<std::vector<std::string>>();
    return s;
  } catch (const json::exception& e) {
    throw FormatError("splits file '" + path.string() + "': " + e.what());
  }
}

void save_splits(const Splits& splits, const std::filesystem::path& path) {
  json j;
  j["train"] = splits.train;
  j["validation"] = splits.validation;
  j["test"] = splits.test;
  detail::write_file(path.string(), j.dump() + "\n");
}

// ---------------------------------------------------------------------------
// Batching

namespace {

std::vector<std::int64_t> sentence_ids(const std::vector<std::string>& tokens, const Vocabulary& vocab,
                                       std::size_t limit, bool& truncated) {
  std::vector<std::int64_t> ids{kSosId};
  const std::size_t n = std::min(tokens.size(), limit);
  truncated = truncated || tokens.size() > limit;
  for (std::size_t i = 0; i < n; ++i) ids.push_back(vocab.id(tokens[i]));
  ids.push_back(kEosId);
  return ids;
}

}  // namespace

Example make_example(const Triplet& triplet, const Vocabulary& vocab, const SequenceLimits& limits) {
  Example ex;
  ex.src_ids = sentence_ids(triplet.src_tokens, vocab, limits.max_src_tokens, ex.truncated);
  ex.tgt_ids = sentence_ids(triplet.tgt_tokens, vocab, limits.max_tgt_tokens, ex.truncated);
  const std::size_t n = std::min(triplet.image_features.size(), limits.max_images);
  ex.truncated = ex.truncated || triplet.image_features.size() > limits.max_images;
  ex.images.assign(triplet.image_features.begin(), triplet.image_features.begin() + static_cast<std::ptrdiff_t>(n));
  ex.src_labels.assign(ex.src_ids.size(), kIgnoreId);
  ex.tgt_labels.assign(ex.tgt_ids.size(), kIgnoreId);
  return ex;
}

MaskedBatch collate(const std::vector<Example>& examples, TaskKind task) {
  if (examples.empty()) throw ContractError("collate: empty example list");
  MaskedBatch b;
  b.task = task;
  b.batch_size = examples.size();
  for (const auto& ex : examples) {
    if (ex.images.empty()) throw ContractError("collate: example without image features");
    if (ex.src_ids.empty() || ex.tgt_ids.empty()) throw ContractError("collate: sentence without [SOS]");
    if (ex.src_labels.size() != ex.src_ids.size() || ex.tgt_labels.size() != ex.tgt_ids.size()) {
      throw ContractError("collate: labels not parallel to ids");
    }
    b.image_slots = std::max(b.image_slots, ex.images.size());
    b.src_slots = std::max(b.src_slots, ex.src_ids.size());
    b.tgt_slots = std::max(b.tgt_slots, ex.tgt_ids.size());
  }
  b.feature_dim = examples.front().images.front().size();
  const std::size_t n = b.image_slots, ts = b.src_slots, tt = b.tgt_slots, d = b.feature_dim;
  const std::size_t tokens = ts + tt, total = n + ts + tt;
  b.image_features.assign(b.batch_size * n * d, 0.0);
  b.input_ids.assign(b.batch_size * tokens, kPadId);
  b.mlm_labels.assign(b.batch_size * tokens, kIgnoreId);
  b.modality_ids.assign(b.batch_size * total, 0);
  b.position_ids.assign(b.batch_size * total, 0);
  for (std::size_t i = 0; i < b.batch_size; ++i) {
    const auto& ex = examples[i];
    b.lengths.push_back({ex.images.size(), ex.src_ids.size(), ex.tgt_ids.size()});
    for (std::size_t k = 0; k < ex.images.size(); ++k) {
      if (ex.images[k].size() != d) {
        throw DimensionError("collate: image feature of dimension " + std::to_string(ex.images[k].size()) +
                             ", expected " + std::to_string(d));
      }
      std::copy(ex.images[k].begin(), ex.images[k].end(),
                b.image_features.begin() + static_cast<std::ptrdiff_t>((i * n + k) * d));
    }
    for (std::size_t k = 0; k < ts; ++k) {
      if (k < ex.src_ids.size()) {
        b.input_ids[i * tokens + k] = ex.src_ids[k];
        b.mlm_labels[i * tokens + k] = ex.src_labels[k];
      }
      b.modality_ids[i * total + n + k] = kSourceModality;
      b.position_ids[i * total + n + k] = static_cast<std::int64_t>(k);
    }
    for (std::size_t k = 0; k < tt; ++k) {
      if (k < ex.tgt_ids.size()) {
        b.input_ids[i * tokens + ts + k] = ex.tgt_ids[k];
        b.mlm_labels[i * tokens + ts + k] = ex.tgt_labels[k];
      }
      b.modality_ids[i * total + n + ts + k] = kTargetModality;
      b.position_ids[i * total + n + ts + k] = static_cast<std::int64_t>(k);
    }
    for (std::size_t k = 0; k < n; ++k) b.modality_ids[i * total + k] = kImageModality;
    b.match_labels.push_back(ex.match_label);
    b.attr_labels.push_back(ex.attr_labels);
    b.truncated.push_back(ex.truncated ? 1 : 0);
  }
  return b;
}

MaskedBatch collate(const std::vector<Triplet>& triplets, const Vocabulary& vocab, const SequenceLimits& limits) {
  std::vector<Example> examples;
  for (const auto& t : triplets) examples.push_back(make_example(t, vocab, limits));
  return collate(examples, TaskKind::kMtlm);
}

}  // namespace upoc2
