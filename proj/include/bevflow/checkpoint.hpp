#pragma once

#include <string>
#include <vector>

#include "bevflow/tensor.hpp"

namespace bevflow {

// Single-file parameter checkpoint:
//   bytes 0..7   magic "BIFT0001"
//   text header  one line per entry: <name> <rank> <dims...> <byte offset>
//                terminated by a line reading "DATA"
//   payload      raw little-endian float32, offsets relative to payload start
struct ManifestEntry {
    std::string name;
    Shape shape;
    int64_t offset = 0;
};

void save_checkpoint(const std::string& path, const std::vector<Parameter>& params);
std::vector<Parameter> load_checkpoint(const std::string& path);
std::vector<ManifestEntry> read_manifest(const std::string& path);

// Loads checkpoint values into an existing parameter set; names must match
// exactly (same set, same shapes).
void load_into(const std::string& path, std::vector<Parameter>& params);

}  // namespace bevflow
