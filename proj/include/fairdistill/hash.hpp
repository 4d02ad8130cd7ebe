#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace fd {

// 32-bit FNV-1a.
constexpr std::uint32_t fnv1a32(std::string_view bytes,
                                std::uint32_t h = 2166136261u) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 16777619u;
  }
  return h;
}

std::uint32_t fnv1a32_file(const std::filesystem::path& path);

std::string hex32(std::uint32_t h);

// splitmix64 finalizer; used for counter-based randomness (dropout masks,
// per-example seeds) so results do not depend on call order.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t a, std::uint64_t b) {
  return mix64(a ^ mix64(b + 0x632be59bd9b4e019ull));
}

}  // namespace fd
