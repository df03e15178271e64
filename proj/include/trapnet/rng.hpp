#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace trapnet {

using Rng = std::mt19937_64;

/// Independent stream seed for (module, purpose) under a master seed:
/// the first 8 bytes of SHA-256(master_seed || module || purpose).
/// Adding a new stream never perturbs existing ones.
std::uint64_t derive_seed(std::uint64_t master_seed, std::string_view module, std::string_view purpose);

inline Rng make_rng(std::uint64_t master_seed, std::string_view module, std::string_view purpose) {
  return Rng(derive_seed(master_seed, module, purpose));
}

}  // namespace trapnet
