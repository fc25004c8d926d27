#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "lungct/tensor.hpp"

namespace lungct {

// Writes content to path atomically (temp file in the same directory + rename).
void atomic_write(const std::filesystem::path& path, const std::string& content);
std::string read_file(const std::filesystem::path& path);

// FNV-1a 64-bit over raw bytes; used for extractor fingerprints and manifest hashes.
std::uint64_t fnv1a64(const void* bytes, std::size_t n, std::uint64_t seed = 1469598103934665603ULL);
std::string to_hex(std::uint64_t v);

// Named-tensor binary container. Layout:
//   magic[4], version u32, count u32, then per entry:
//   name_len u32, name bytes, dtype u8 (0=f64, 1=f32), ndim u32, dims i64...,
//   payload. All little-endian.
struct TensorFileEntry {
  std::string name;
  Tensor tensor;
  bool as_float32 = false;  // storage precision; tensors are always double in memory
};

void write_tensor_file(const std::filesystem::path& path, const char magic[4], std::uint32_t version,
                       const std::vector<TensorFileEntry>& entries);

// Throws DataError on magic/version mismatch or truncation.
std::vector<TensorFileEntry> read_tensor_file(const std::filesystem::path& path, const char magic[4],
                                              std::uint32_t expected_version);

}  // namespace lungct
