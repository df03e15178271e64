#pragma once

#include "trapnet/dataset.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace trapnet {

// IDX container: 2 zero bytes, a type byte, a rank byte, big-endian u32
// extents, then row-major payload. Files may be gzip-compressed; that is
// detected from the content, not the name.

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

enum class IdxType : std::uint8_t { UInt8 = 0x08, Float32 = 0x0D };

/// Images and labels as a Dataset; pixels are scaled by 1/255.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, int num_classes = 10);

/// Any-rank IDX tensor. UInt8 payloads are scaled by 1/255, Float32 are read verbatim.
Tensor read_idx_tensor(const std::filesystem::path& path);
std::vector<int> read_idx_labels(const std::filesystem::path& path);

/// UInt8 writes round(255 * v) and requires values in [0,1]. A ".gz" suffix
/// selects gzip output.
void write_idx_tensor(const std::filesystem::path& path, const Tensor& t, IdxType type = IdxType::UInt8);
void write_idx_labels(const std::filesystem::path& path, std::span<const int> labels);

/// Raw (decompressed) bytes of a file.
std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);

}  // namespace trapnet
