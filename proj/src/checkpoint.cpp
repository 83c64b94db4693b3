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

#include "part/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include "json.hpp"
#include "part/errors.hpp"

namespace part {

namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'P', 'A', 'R', 'T'};

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v, int bytes = 8) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(std::span<const std::uint8_t> in, std::size_t pos, int bytes = 8) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(in[pos + i]) << (8 * i);
  return v;
}

json metadata(const ModuleGrid& grid) {
  const auto& s = grid.shape();
  json tasks = json::array();
  for (std::size_t i = 0; i < grid.task_count(); ++i) {
    const auto& e = grid.tasks()[i];
    tasks.push_back({{"id", i},
                     {"classes", e.classes},
                     {"slice", {e.slice.start, e.slice.end}},
                     {"path", e.path.selection}});
  }
  json blocks = json::array();
  for (auto [l, m] : grid.frozen().blocks) blocks.push_back({l, m});
  return json{{"grid", {{"layers", s.layers}, {"modules", s.modules}, {"d_in", s.d_in}, {"d_hid", s.d_hid}}},
              {"norm_mode", to_string(grid.norm_mode())},
              {"seed", grid.seed()},
              {"tasks", tasks},
              {"frozen", {{"blocks", blocks}, {"tasks", grid.frozen().tasks}}},
              {"parameter_count", parameter_blob_size(grid)}};
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const ModuleGrid& grid) {
  const std::string meta = metadata(grid).dump();
  const std::vector<double> blob = parameter_blob(grid);
  std::vector<std::uint8_t> out;
  out.reserve(16 + meta.size() + blob.size() * 8);
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  put_u64(out, kCheckpointVersion, 4);
  put_u64(out, meta.size());
  out.insert(out.end(), meta.begin(), meta.end());
  for (double v : blob) put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

ModuleGrid decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw ParseError("not a checkpoint (bad magic)");
  }
  const auto version = static_cast<std::uint32_t>(get_u64(bytes, 4, 4));
  if (version != kCheckpointVersion) {
    throw ParseError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                     std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint64_t meta_len = get_u64(bytes, 8);
  if (meta_len > bytes.size() - 16) throw ParseError("checkpoint truncated in metadata");

  json meta;
  try {
    meta = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(meta_len));
    const auto& g = meta.at("grid");
    GridShape shape{g.at("layers").get<std::size_t>(), g.at("modules").get<std::size_t>(),
                    g.at("d_in").get<std::size_t>(), g.at("d_hid").get<std::size_t>()};
    std::vector<TaskEntry> tasks;
    for (const auto& t : meta.at("tasks")) {
      const auto slice = t.at("slice").get<std::vector<std::size_t>>();
      if (slice.size() != 2) throw ParseError("checkpoint task slice malformed");
      tasks.push_back(TaskEntry{t.at("classes").get<std::size_t>(), Slice{slice[0], slice[1]},
                                Path{t.at("path").get<std::vector<std::vector<std::size_t>>>()}});
    }
    FrozenSet frozen;
    for (const auto& b : meta.at("frozen").at("blocks")) {
      frozen.blocks.emplace(b.at(0).get<std::size_t>(), b.at(1).get<std::size_t>());
    }
    for (const auto& t : meta.at("frozen").at("tasks")) frozen.tasks.insert(t.get<std::size_t>());

    ModuleGrid grid = ModuleGrid::restore(shape, norm_mode_from_string(meta.at("norm_mode").get<std::string>()),
                                          meta.at("seed").get<std::uint64_t>(), std::move(tasks),
                                          std::move(frozen));
    const std::size_t count = parameter_blob_size(grid);
    if (meta.at("parameter_count").get<std::size_t>() != count) {
      throw ParseError("checkpoint parameter count disagrees with its grid description");
    }
    const std::size_t blob_pos = 16 + meta_len;
    if (bytes.size() - blob_pos != count * 8) throw ParseError("checkpoint parameter blob has the wrong length");
    std::vector<double> blob(count);
    for (std::size_t i = 0; i < count; ++i) blob[i] = std::bit_cast<double>(get_u64(bytes, blob_pos + 8 * i));
    set_parameter_blob(grid, blob);
    return grid;
  } catch (const json::exception& e) {
    throw ParseError(std::string("checkpoint metadata: ") + e.what());
  } catch (const InputError& e) {
    throw ParseError(std::string("checkpoint metadata: ") + e.what());
  }
}

void save_checkpoint(const ModuleGrid& grid, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(grid);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

ModuleGrid load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace part
