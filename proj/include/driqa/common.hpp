#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace driqa {

inline constexpr const char* kVersionString = "driqa 0.1.0";

// Thrown on every anticipated error path (bad config, shape mismatch,
// violated precondition). The CLI maps these to a one-line message and
// a nonzero exit code instead of a stack trace.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

[[noreturn]] inline void fail(const std::string& msg) { throw Error(msg); }

inline void require(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

// FNV-1a, used to key RNG streams and to fingerprint configs/palettes.
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace driqa
