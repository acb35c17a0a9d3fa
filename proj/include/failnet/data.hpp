// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "failnet/core.hpp"
#include "failnet/sim.hpp"

namespace failnet::data {

/// L consecutive poses (oldest first) with the label of the source log.
struct PoseWindow {
  std::vector<Pose> poses;
  int label = 0;
  FailureMode mode = FailureMode::Nominal;
  std::string source;
};

enum class FeatureMode { Global, Egocentric };

std::string_view feature_mode_name(FeatureMode m);
FeatureMode parse_feature_mode(std::string_view s);

using Feature = std::array<double, 3>;

struct FeatureSeq {
  std::vector<Feature> steps;
  FeatureMode mode = FeatureMode::Global;
};

/// Uniformly spaced poses at `rate` Hz. Samples that fall on a log sample
/// are copied exactly; others are linearly interpolated in x, y and along
/// the shorter arc in theta.
std::vector<Pose> resample_poses(const sim::TrajectoryLog& log, double rate);

/// Sliding windows of length L. When `mask` is given, windows whose final
/// pose lies inside the mask disc are dropped.
std::vector<PoseWindow> make_windows(const std::vector<Pose>& series, std::size_t L,
                                     std::size_t stride, const sim::TrackMap* mask,
                                     FailureMode mode, const std::string& source);

FeatureSeq featurize(const PoseWindow& window, FeatureMode mode);
FeatureSeq featurize(const std::vector<Pose>& poses, FeatureMode mode);

struct DatasetSplit {
  std::vector<PoseWindow> train;
  std::vector<PoseWindow> validation;
  std::uint64_t seed = 0;
  double ratio = 0.8;
  std::vector<std::string> train_sources;
  std::vector<std::string> validation_sources;
  std::map<FailureMode, std::size_t> train_counts;
  std::map<FailureMode, std::size_t> validation_counts;
  std::vector<std::string> warnings;
};

/// Deterministic split at source-log granularity, stratified by mode.
DatasetSplit split_dataset(const std::vector<PoseWindow>& windows, double ratio,
                           std::uint64_t seed);

// --- dataset files --------------------------------------------------------

/// One record: `z,mode,L,` then L `x:y:theta` triples joined by `;`.
std::string format_window(const PoseWindow& w);
/// Parses one record; timestamps are reconstructed from `rate`.
PoseWindow parse_window(const std::string& line, double rate);

void write_windows(std::ostream& os, const std::vector<PoseWindow>& windows);
std::vector<PoseWindow> read_windows(std::istream& is, double rate);

struct SourceSpan {
  FailureMode mode = FailureMode::Nominal;
  std::string source;
  std::size_t first = 0;  // first record index in the mode file
  std::size_t count = 0;
};

/// Sidecar metadata written next to the per-mode dataset files.
struct DatasetMeta {
  double rate = 2.0;
  std::size_t L = 10;
  std::size_t stride = 1;
  FeatureMode feature_mode = FeatureMode::Egocentric;
  std::uint64_t seed = 0;
  std::map<FailureMode, std::size_t> counts;
  std::vector<SourceSpan> sources;
};

void write_meta(std::ostream& os, const DatasetMeta& meta);
DatasetMeta read_meta(std::istream& is);

/// Writes `<dir>/<Mode>.ds` for every mode plus `<dir>/dataset.meta`.
void save_dataset(const std::string& dir, const std::vector<PoseWindow>& windows,
                  DatasetMeta meta);
/// Loads windows from a dataset directory, restoring source ids.
std::vector<PoseWindow> load_dataset(const std::string& dir, DatasetMeta* meta_out = nullptr);

}  // namespace failnet::data
