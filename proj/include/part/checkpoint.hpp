// Copyright 2026 The PaRT Lab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "part/modular_net.hpp"

namespace part {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout (all integers little-endian):
//   "PART" | u32 version | u64 metadata length | metadata JSON |
//   parameter_blob() as little-endian IEEE-754 doubles
std::vector<std::uint8_t> encode_checkpoint(const ModuleGrid& grid);
ModuleGrid decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const ModuleGrid& grid, const std::filesystem::path& path);
ModuleGrid load_checkpoint(const std::filesystem::path& path);

}  // namespace part
