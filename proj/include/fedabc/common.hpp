#pragma once

#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>

namespace fedabc {

inline constexpr const char* kVersion = "0.1.0";

/// Error in user-supplied configuration (config file, CLI overrides).
/// The CLI maps this to exit code 2; everything else maps to 3.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Salts for deriving independent RNG streams from one experiment seed.
// Client streams use kClientSaltBase + client_id so that adding or removing
// clients never perturbs another client's draws.
inline constexpr std::uint64_t kInitSalt = 0x11;
inline constexpr std::uint64_t kSelectionSalt = 0x22;
inline constexpr std::uint64_t kPartitionSalt = 0x33;
inline constexpr std::uint64_t kBlobsDataSalt = 0x44;
inline constexpr std::uint64_t kIidPoolSalt = 0x55;
inline constexpr std::uint64_t kIidPickSalt = 0x66;
inline constexpr std::uint64_t kClientSaltBase = 0x1000;

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
  return splitmix64(seed ^ splitmix64(salt));
}

/// Shortest %g rendering at the given precision; 17 significant digits
/// round-trips any double exactly.
inline std::string format_double(double v, int precision = 17) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", precision, v);
  return buf;
}

}  // namespace fedabc
