// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace failnet {

/// Raised for inputs that violate an operation's preconditions.
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for malformed files and records.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Wraps an angle into (-pi, pi].
inline double wrap_angle(double a) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  if (a > -std::numbers::pi && a <= std::numbers::pi) return a;
  double r = std::fmod(a + std::numbers::pi, two_pi);
  if (r <= 0.0) r += two_pi;
  return r - std::numbers::pi;
}

/// Timestamped planar pose, the only externally observable vehicle signal.
struct Pose {
  double t = 0.0;
  double x = 0.0;
  double y = 0.0;
  double theta = 0.0;

  bool operator==(const Pose&) const = default;
};

enum class FailureMode : std::uint8_t {
  Nominal = 0,
  PeriodicControl = 1,
  LaneShift = 2,
  Speeding = 3,
  Reckless = 4,
};

inline constexpr std::array<FailureMode, 5> kAllModes = {
    FailureMode::Nominal, FailureMode::PeriodicControl, FailureMode::LaneShift,
    FailureMode::Speeding, FailureMode::Reckless};

inline constexpr std::string_view mode_name(FailureMode m) {
  switch (m) {
    case FailureMode::Nominal: return "Nominal";
    case FailureMode::PeriodicControl: return "Periodic";
    case FailureMode::LaneShift: return "LaneShift";
    case FailureMode::Speeding: return "Speeding";
    case FailureMode::Reckless: return "Reckless";
  }
  return "?";
}

inline std::optional<FailureMode> parse_mode(std::string_view s) {
  for (auto m : kAllModes)
    if (mode_name(m) == s) return m;
  return std::nullopt;
}

inline constexpr int mode_label(FailureMode m) { return m == FailureMode::Nominal ? 0 : 1; }

/// Formats a double with 9 significant digits, the precision used by every
/// text interchange format in this project.
std::string fmt9(double v);

/// Formats a double with round-trip (17 digit) precision.
std::string fmt17(double v);

/// Strict double parse of a whole token; nullopt on trailing garbage or
/// non-finite values.
std::optional<double> parse_double(std::string_view s);

std::optional<long long> parse_int(std::string_view s);

}  // namespace failnet
