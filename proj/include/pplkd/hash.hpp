#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace pplkd {

// Lowercase hex SHA-256 of the input bytes.
std::string sha256_hex(std::string_view data);

// First 8 bytes of the SHA-256 digest, big-endian.
std::uint64_t fingerprint64(std::string_view data);

// splitmix64 finalizer; used to derive independent per-task rng streams.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a,
                                    std::uint64_t b = 0) {
  return mix64(mix64(mix64(seed) ^ a) ^ (b * 0x632be59bd9b4e019ULL));
}

}  // namespace pplkd
