// Copyright 2026 The Sparrow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sparrow/model.hpp"
#include "sparrow/numkernel.hpp"

namespace sparrow {

// Binary layout (little endian):
//   "SPRW" | u32 version | 4-byte kind tag | u32 n_fields | i64 fields...
//   | u32 n_tensors | per tensor: u32 name_len, name, u32 ndims, u32 dims..., f32 data
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Matrix value;
};

struct Container {
  std::string kind;  // exactly 4 characters, e.g. "TRGT" or "DRFT"
  std::vector<std::int64_t> fields;
  std::vector<NamedTensor> tensors;

  const Matrix& tensor(const std::string& name) const;
};

void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);

std::vector<std::int64_t> config_fields(const ModelConfig& cfg);
ModelConfig config_from_fields(const std::vector<std::int64_t>& fields);

std::vector<NamedTensor> layer_tensors(const LayerWeights& w, const std::string& prefix);
void load_layer(LayerWeights& w, const Container& c, const std::string& prefix);

void save_target(const std::filesystem::path& path, const TargetModel& model);
TargetModel load_target(const std::filesystem::path& path);

}  // namespace sparrow
