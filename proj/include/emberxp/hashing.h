#pragma once

#include <cstdint>
#include <string_view>

namespace emberxp {

/// MurmurHash3 x86_32 of the token bytes with seed 0.
uint32_t Murmur3_32(std::string_view data, uint32_t seed = 0);

struct HashSlot {
  uint32_t index;
  int sign;  // -1 or +1

  bool operator==(const HashSlot&) const = default;
};

/// Signed hashing trick: index = h mod buckets, sign = -1 iff bit 31 of h is
/// set, with h = Murmur3_32(token). Stable across runs and platforms.
/// `buckets` must be at least 1.
HashSlot HashToken(std::string_view token, uint32_t buckets);

}  // namespace emberxp
