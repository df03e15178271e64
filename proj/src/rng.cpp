#include "trapnet/rng.hpp"

#include <openssl/sha.h>

#include <array>
#include <string>

namespace trapnet {

std::uint64_t derive_seed(std::uint64_t master_seed, std::string_view module, std::string_view purpose) {
  std::string msg;
  for (int i = 7; i >= 0; --i) msg.push_back(char((master_seed >> (8 * i)) & 0xff));
  msg.append(module);
  msg.push_back('\0');
  msg.append(purpose);
  std::array<unsigned char, SHA256_DIGEST_LENGTH> digest{};
  SHA256(reinterpret_cast<const unsigned char*>(msg.data()), msg.size(), digest.data());
  std::uint64_t seed = 0;
  for (int i = 0; i < 8; ++i) seed = (seed << 8) | digest[std::size_t(i)];
  return seed;
}

}  // namespace trapnet
