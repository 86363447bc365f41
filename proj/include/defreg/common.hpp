#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace defreg {

// Error taxonomy. Each category maps to a distinct CLI exit code
// (see tools/defreg_cli.cpp and README).
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad parameter value, bad run configuration, unknown config key.
struct ConfigError : Error {
  using Error::Error;
};

// Mismatched shapes or cardinalities between inputs.
struct DimensionError : Error {
  using Error::Error;
};

// Rotation matrix fails the orthogonality / det(+1) check.
struct InvalidTransformError : Error {
  using Error::Error;
};

// File or record does not conform to an on-disk format.
struct FormatError : Error {
  using Error::Error;
};

// Row-level parse failure; message carries the 1-based line number.
struct ParseError : FormatError {
  using FormatError::FormatError;
};

struct IoError : Error {
  using Error::Error;
};

// Checkpoint and requested configuration disagree.
struct CompatibilityError : Error {
  using Error::Error;
};

// Training produced a non-finite loss.
struct DivergenceError : Error {
  using Error::Error;
};

// Operation invoked on an object whose state is not ready for it.
struct StateError : Error {
  using Error::Error;
};

// Generator cannot satisfy the requested property (e.g. overlap ratio).
struct GenerationError : Error {
  using Error::Error;
};

inline constexpr int kSchemaVersion = 1;

// FNV-1a, used to fingerprint run configurations in reports.
inline std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const char c : text) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hash_hex(std::uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[h & 0xf];
    h >>= 4;
  }
  return out;
}

}  // namespace defreg
