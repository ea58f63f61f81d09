#pragma once

// Versioned checkpoint container:
//   "DCLRCKPT" | u32 version | u64 manifest length | manifest JSON | f32 data
// The manifest holds a free-form config object and a tensor table
// [{name, rows, cols, offset}] where offset counts floats into the data
// section. All integers and floats are little-endian.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dreamclear/nn.hpp"

namespace dreamclear {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
    std::string name;
    Matf value;
};

struct Checkpoint {
    nlohmann::json config = nlohmann::json::object();
    std::vector<NamedTensor> tensors;

    const NamedTensor* find(const std::string& name) const;
};

/// Writes to a temporary sibling and renames it into place.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Snapshot of every parameter (optionally under a prefix).
std::vector<NamedTensor> export_params(const ParamStore<float>& store, const std::string& prefix = "");
/// Rebuilds a store with the given tensors, skipping names with `skip_prefix`.
ParamStore<float> store_from_tensors(const std::vector<NamedTensor>& tensors, const std::string& skip_prefix = "");
/// Overwrites values of existing parameters; every store name must be present.
void load_params(ParamStore<float>& store, const std::vector<NamedTensor>& tensors);

}  // namespace dreamclear
