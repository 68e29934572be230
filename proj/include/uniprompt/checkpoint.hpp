#pragma once

#include "uniprompt/common.hpp"

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace uniprompt {

struct NamedTensor {
  std::string name;
  Matrix value;
};

/// Binary layout:
///   u64 little-endian  header length H
///   H bytes            JSON object {name: [rows, cols], ...} in tensor order
///   payload            each tensor's row-major values as little-endian f64,
///                      concatenated in header order
std::string serialize_checkpoint(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> parse_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

/// FNV-1a over the serialized bytes; equal hashes <=> bit-identical tensors.
std::uint64_t checkpoint_hash(const std::vector<NamedTensor>& tensors);

}  // namespace uniprompt
