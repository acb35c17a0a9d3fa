// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "failnet/core.hpp"

namespace failnet::eval {

/// Report column order after "All".
inline constexpr std::array<FailureMode, 5> kColumnOrder = {
    FailureMode::PeriodicControl, FailureMode::LaneShift, FailureMode::Reckless, FailureMode::Speeding,
    FailureMode::Nominal};

/// (TP + TN) / N with soft predictions thresholded at > 0.5.
double accuracy(std::span<const double> predictions, std::span<const int> labels);

struct ModeCount {
  std::size_t correct = 0;
  std::size_t total = 0;
  bool operator==(const ModeCount&) const = default;
};

struct Confusion {
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
  bool operator==(const Confusion&) const = default;
};

/// Failure columns count windows predicted Unsafe; Nominal counts Safe.
/// Modes without windows are absent from the map.
std::map<FailureMode, ModeCount> per_mode_counts(std::span<const double> predictions,
                                                 std::span<const FailureMode> modes);
std::map<FailureMode, std::optional<double>> per_mode_accuracy(std::span<const double> predictions,
                                                               std::span<const FailureMode> modes);

struct MethodResult {
  std::string name;
  std::size_t parameters = 0;
  std::map<FailureMode, ModeCount> modes;
  Confusion confusion;

  std::size_t total() const;
  double overall() const;
  std::optional<double> mode_accuracy(FailureMode m) const;
  bool operator==(const MethodResult&) const = default;
};

/// Scores one method; labels follow from the modes (Nominal is Safe).
MethodResult score_method(const std::string& name, std::size_t parameters, std::span<const double> predictions,
                          std::span<const FailureMode> modes);

struct EvalReport {
  std::string title;
  std::map<std::string, std::string> metadata;
  std::vector<MethodResult> methods;

  const MethodResult* find(const std::string& name) const;
  bool operator==(const EvalReport&) const = default;
};

std::string format_csv(const EvalReport& r);
EvalReport parse_csv(const std::string& text);
std::string format_table(const EvalReport& r);

/// Writes <stem>.csv and <stem>.txt into `dir`.
void emit_report(const EvalReport& r, const std::string& dir, const std::string& stem);

}  // namespace failnet::eval
