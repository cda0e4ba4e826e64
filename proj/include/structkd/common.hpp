#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace structkd {

/// Error categories surfaced by the library. The CLI maps Config to exit
/// code 2 and Numeric to exit code 3.
enum class ErrorKind { Shape, Domain, Config, Io, Numeric };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

#define SKD_CHECK(cond, kind, msg)                                  \
  do {                                                              \
    if (!(cond)) {                                                  \
      std::ostringstream skd_oss_;                                  \
      skd_oss_ << msg;                                              \
      throw ::structkd::Error(::structkd::ErrorKind::kind,          \
                              skd_oss_.str());                      \
    }                                                               \
  } while (0)

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

/// FNV-1a over raw bytes; used for manifest hashes and seed streams.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 1469598103934665603ull) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline uint64_t fnv1a(std::string_view s, uint64_t h = 1469598103934665603ull) {
  return fnv1a(s.data(), s.size(), h);
}

/// Derives an independent seed for a named RNG stream, so that consuming
/// randomness in one part of a run never shifts another part's sequence.
inline uint64_t stream_seed(uint64_t seed, std::string_view name) {
  uint64_t h = fnv1a(name);
  h ^= seed + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
  return h;
}

}  // namespace structkd
