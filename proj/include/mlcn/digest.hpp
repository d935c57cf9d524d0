#pragma once

#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <string_view>

namespace mlcn {

/// 64-bit FNV-1a.
class Fnv1a {
 public:
  Fnv1a& update(std::span<const std::uint8_t> bytes) {
    for (auto b : bytes) {
      h_ ^= b;
      h_ *= 0x100000001b3ULL;
    }
    return *this;
  }
  Fnv1a& update(std::string_view s) {
    return update({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
  }
  template <class T>
  Fnv1a& update_pod(const T& v) {
    return update({reinterpret_cast<const std::uint8_t*>(&v), sizeof(T)});
  }
  std::uint64_t value() const { return h_; }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace mlcn
