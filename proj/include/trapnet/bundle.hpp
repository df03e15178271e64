#pragma once

#include "trapnet/detection.hpp"
#include "trapnet/model.hpp"
#include "trapnet/trapdoor.hpp"

#include <array>
#include <filesystem>
#include <optional>
#include <string>

namespace trapnet {

inline constexpr std::uint32_t kBundleVersion = 1;

/// Everything a pipeline stage hands to the next. Each part is optional.
struct ArtifactBundle {
  std::optional<Model> model;
  std::optional<TrapdoorRegistry> registry;
  std::optional<Detector> detector;
  /// The producing experiment config, as written on disk.
  std::string config_text;
};

using Digest = std::array<unsigned char, 32>;

std::string hex(const Digest& d);
Digest sha256(std::string_view bytes);

/// Serialised form: magic, version, length-prefixed named sections, then
/// the SHA-256 of all preceding bytes.
std::string encode_bundle(const ArtifactBundle& bundle);
/// Throws FormatError on bad magic, version, hash or truncation.
ArtifactBundle decode_bundle(std::string_view bytes);

/// Content hash of the encoded bundle (the trailing digest).
Digest bundle_hash(const ArtifactBundle& bundle);

/// Writes to a temporary sibling then renames over `path`.
void save_bundle(const ArtifactBundle& bundle, const std::filesystem::path& path);
ArtifactBundle load_bundle(const std::filesystem::path& path);

/// Atomic text write used for reports.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

}  // namespace trapnet
