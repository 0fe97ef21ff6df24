// Copyright 2026 The upoc2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "upoc2/model.hpp"

namespace upoc2 {

// Container layout, little-endian:
//   "UPOC2CKP" | version u32 | count u32 |
//   per entry: name length u32, UTF-8 name, rank u32, dims u32[rank], payload.
// Version 1 stores 32-bit float payloads; version 2 stores 64-bit ones.
struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<Real> values;
};

enum class Precision { kF32, kF64 };

void save_arrays(const std::vector<NamedArray>& arrays, const std::filesystem::path& path, Precision precision);
std::vector<NamedArray> load_arrays(const std::filesystem::path& path);

// Writes each distinct storage once; a shared target encoder is omitted and
// re-aliased on load.
void save_parameters(const Parameters& params, const std::filesystem::path& path, Precision precision);
// Throws ContractError listing every missing, unexpected or mis-shaped array.
Parameters load_parameters(const std::filesystem::path& path, const ModelConfig& cfg);

}  // namespace upoc2
