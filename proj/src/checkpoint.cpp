// Copyright 2026 The upoc2 Authors
// SPDX-License-Identifier: Apache-2.0

#include "upoc2/checkpoint.hpp"

#include <map>
#include <set>

#include "binary_io.hpp"
#include "upoc2/errors.hpp"

namespace upoc2 {

namespace {
constexpr char kMagic[8] = {'U', 'P', 'O', 'C', '2', 'C', 'K', 'P'};
constexpr std::uint32_t kVersionF32 = 1;
constexpr std::uint32_t kVersionF64 = 2;
const std::string kSourcePrefix = "source_encoder.";
const std::string kTargetPrefix = "target_encoder.";
}  // namespace

void save_arrays(const std::vector<NamedArray>& arrays, const std::filesystem::path& path, Precision precision) {
  detail::ByteWriter out;
  out.bytes(kMagic, 8);
  out.u32(precision == Precision::kF32 ? kVersionF32 : kVersionF64);
  out.u32(static_cast<std::uint32_t>(arrays.size()));
  for (const auto& a : arrays) {
    if (shape_numel(a.shape) != a.values.size()) throw ContractError("array '" + a.name + "' has inconsistent shape");
    out.u32(static_cast<std::uint32_t>(a.name.size()));
    out.bytes(a.name.data(), a.name.size());
    out.u32(static_cast<std::uint32_t>(a.shape.size()));
    for (auto d : a.shape) out.u32(static_cast<std::uint32_t>(d));
    for (Real v : a.values) {
      if (precision == Precision::kF32) {
        out.f32(static_cast<float>(v));
      } else {
        out.f64(v);
      }
    }
  }
  detail::write_file(path.string(), out.str());
}

std::vector<NamedArray> load_arrays(const std::filesystem::path& path) {
  const std::string raw = detail::read_file(path.string());
  detail::ByteReader in(raw, "checkpoint '" + path.string() + "'");
  if (in.bytes(8) != std::string(kMagic, 8)) in.fail("bad magic");
  const auto version = in.u32();
  if (version != kVersionF32 && version != kVersionF64) in.fail("unsupported version " + std::to_string(version));
  const auto count = in.u32();
  std::vector<NamedArray> arrays;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name = in.bytes(in.u32());
    const auto rank = in.u32();
    for (std::uint32_t r = 0; r < rank; ++r) a.shape.push_back(in.u32());
    const std::size_t n = shape_numel(a.shape);
    a.values.resize(n);
    for (auto& v : a.values) v = version == kVersionF32 ? static_cast<Real>(in.f32()) : in.f64();
    arrays.push_back(std::move(a));
  }
  if (!in.at_end()) in.fail("trailing bytes");
  return arrays;
}

void save_parameters(const Parameters& params, const std::filesystem::path& path, Precision precision) {
  std::vector<NamedArray> arrays;
  for (const auto& p : params.unique()) {
    arrays.push_back({p.name, p.tensor.shape(), std::vector<Real>(p.tensor.data().begin(), p.tensor.data().end())});
  }
  save_arrays(arrays, path, precision);
}

Parameters load_parameters(const std::filesystem::path& path, const ModelConfig& cfg) {
  cfg.validate();
  std::map<std::string, NamedArray> found;
  for (auto& a : load_arrays(path)) {
    const std::string name = a.name;
    found.emplace(name, std::move(a));
  }
  const auto expected = expected_parameter_shapes(cfg);
  bool has_target = false;
  for (const auto& [name, a] : found) has_target = has_target || name.rfind(kTargetPrefix, 0) == 0;
  const bool shared = cfg.layers_target > 0 && !has_target;

  std::vector<std::string> problems;
  Parameters params;
  params.set_shared_src_tgt(shared);
  for (const auto& [name, shape] : expected) {
    if (shared && name.rfind(kTargetPrefix, 0) == 0) continue;
    auto it = found.find(name);
    if (it == found.end()) {
      problems.push_back("missing '" + name + "' " + shape_str(shape));
      continue;
    }
    if (it->second.shape != shape) {
      problems.push_back("'" + name + "' is " + shape_str(it->second.shape) + ", config expects " + shape_str(shape));
      continue;
    }
    params.set(name, Tensor(shape, it->second.values, true));
  }
  for (const auto& [name, a] : found) {
    if (!expected.count(name)) problems.push_back("unexpected '" + name + "' " + shape_str(a.shape));
  }
  if (!problems.empty()) {
    std::string msg = "checkpoint '" + path.string() + "' does not match the model config:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ContractError(msg);
  }
  if (shared) {
    for (const auto& [name, shape] : expected) {
      if (name.rfind(kTargetPrefix, 0) == 0) {
        params.set(name, params.get(kSourcePrefix + name.substr(kTargetPrefix.size())));
      }
    }
  }
  return params;
}

}  // namespace upoc2
