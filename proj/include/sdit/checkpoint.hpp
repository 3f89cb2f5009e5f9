#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "sdit/tensor.hpp"

namespace sdit {

// Serialized named-tensor table with a config header. Layout ("SAVC1"),
// little-endian:
//   magic[5] version:u32 config_digest:u64 config_len:u32 config_text
//   ntensors:u32
//   per tensor: name_len:u32 name ndims:u32 dims:u32[] dtype:u8(0=f64) offset:u64
//   data_bytes:u64 raw f64 data
struct Checkpoint {
    uint32_t version = 1;
    std::string config_text;  // canonical config string; digest = fnv1a64(text)
    std::vector<std::pair<std::string, Tensor>> tensors;

    uint64_t digest() const;
};

uint64_t fnv1a64(const std::string& text);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);
// Loads and rejects checkpoints whose config digest differs.
Checkpoint load_checkpoint(const std::string& path, const std::string& expected_config);

}  // namespace sdit
