#pragma once

#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <string_view>

namespace roivit {

// 64-bit FNV-1a. Stable across platforms; used for cache keys, config hashes
// and per-parameter seeds.
class Fnv1a {
 public:
  Fnv1a& update(std::span<const unsigned char> bytes) {
    for (unsigned char b : bytes) {
      state_ ^= b;
      state_ *= 0x100000001b3ULL;
    }
    return *this;
  }
  Fnv1a& update(std::string_view text) {
    return update(std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
  }
  std::uint64_t value() const { return state_; }
  std::string hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(state_));
    return buf;
  }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::uint64_t fnv1a(std::string_view text) { return Fnv1a().update(text).value(); }

}  // namespace roivit
