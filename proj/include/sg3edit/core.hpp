#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace sg3 {

/// Number of per-layer codes fed to the synthesis network (w0 ... w15).
inline constexpr int kNumLayers = 16;

enum class ErrorCode {
  InvalidArgument,
  DimensionMismatch,
  NonFinite,
  DegenerateLandmarks,
  DegenerateLabels,
  DegenerateDirection,
  NoFaceDetected,
  OutOfBounds,
  InconsistentSpec,
  StageOrder,
  LockConflict,
  ClientUnavailable,
  InsufficientSamples,
  Divergence,
  Io,
  Format,
  NotFound,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::DegenerateLandmarks: return "DegenerateLandmarks";
    case ErrorCode::DegenerateLabels: return "DegenerateLabels";
    case ErrorCode::DegenerateDirection: return "DegenerateDirection";
    case ErrorCode::NoFaceDetected: return "NoFaceDetected";
    case ErrorCode::OutOfBounds: return "OutOfBounds";
    case ErrorCode::InconsistentSpec: return "InconsistentSpec";
    case ErrorCode::StageOrder: return "StageOrder";
    case ErrorCode::LockConflict: return "LockConflict";
    case ErrorCode::ClientUnavailable: return "ClientUnavailable";
    case ErrorCode::InsufficientSamples: return "InsufficientSamples";
    case ErrorCode::Divergence: return "Divergence";
    case ErrorCode::Io: return "Io";
    case ErrorCode::Format: return "Format";
    case ErrorCode::NotFound: return "NotFound";
  }
  return "Unknown";
}

/// Single exception type for the library; callers switch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) throw Error(code, message);
}

/// splitmix64 finalizer; derives independent stream seeds from (seed, index).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index = 0) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  return Rng(mix_seed(seed, stream));
}

/// Box-Muller normal draw. Avoids std::normal_distribution so streams are
/// identical across standard library implementations.
inline double normal(Rng& rng) {
  constexpr double kTwoPi = 6.283185307179586476925286766559;
  const double u1 = (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
  const double u2 = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
}

inline double uniform(Rng& rng, double lo = 0.0, double hi = 1.0) {
  return lo + (hi - lo) * (static_cast<double>(rng() >> 11) * 0x1.0p-53);
}

/// FNV-1a over raw bytes; used for artifact fingerprints.
inline std::uint64_t fnv1a(const void* data, std::size_t size,
                           std::uint64_t hash = 0xcbf29ce484222325ull) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    hash ^= bytes[i];
    hash *= 0x100000001b3ull;
  }
  return hash;
}

}  // namespace sg3
