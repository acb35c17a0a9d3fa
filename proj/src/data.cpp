// SPDX-License-Identifier: Apache-2.0
#include "failnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "failnet/rng.hpp"

namespace failnet::data {

namespace fs = std::filesystem;

std::string_view feature_mode_name(FeatureMode m) {
  return m == FeatureMode::Global ? "global" : "egocentric";
}

FeatureMode parse_feature_mode(std::string_view s) {
  if (s == "global") return FeatureMode::Global;
  if (s == "egocentric") return FeatureMode::Egocentric;
  throw InvalidInput("unknown feature mode '" + std::string(s) + "'");
}

std::vector<Pose> resample_poses(const sim::TrajectoryLog& log, double rate) {
  if (!(rate > 0)) throw InvalidInput("resample_poses: rate must be > 0");
  std::vector<Pose> out;
  const auto& s = log.samples;
  if (s.empty()) return out;
  constexpr double kAlign = 1e-9;
  const double t0 = s.front().t;
  const double t_end = s.back().t;
  std::size_t i = 0;
  for (long long k = 0;; ++k) {
    const double tk = t0 + static_cast<double>(k) / rate;
    if (tk > t_end + kAlign) break;
    while (i + 1 < s.size() && s[i + 1].t <= tk + kAlign) ++i;
    if (std::abs(s[i].t - tk) <= kAlign || i + 1 >= s.size()) {
      out.push_back({s[i].t, s[i].x, s[i].y, s[i].theta});
      continue;
    }
    const auto& a = s[i];
    const auto& b = s[i + 1];
    const double u = (tk - a.t) / (b.t - a.t);
    const double dth = wrap_angle(b.theta - a.theta);
    out.push_back({tk, a.x + u * (b.x - a.x), a.y + u * (b.y - a.y), wrap_angle(a.theta + u * dth)});
  }
  return out;
}

std::vector<PoseWindow> make_windows(const std::vector<Pose>& series, std::size_t L,
                                     std::size_t stride, const sim::TrackMap* mask,
                                     FailureMode mode, const std::string& source) {
  if (L < 2) throw InvalidInput("make_windows: L must be >= 2");
  if (stride < 1) throw InvalidInput("make_windows: stride must be >= 1");
  std::vector<PoseWindow> out;
  if (series.size() < L) return out;
  for (std::size_t start = 0; start + L <= series.size(); start += stride) {
    const Pose& last = series[start + L - 1];
    if (mask && mask->distance_to_center(last.x, last.y) <= mask->r_mask) continue;
    PoseWindow w;
    w.poses.assign(series.begin() + static_cast<std::ptrdiff_t>(start),
                   series.begin() + static_cast<std::ptrdiff_t>(start + L));
    w.label = mode_label(mode);
    w.mode = mode;
    w.source = source;
    out.push_back(std::move(w));
  }
  return out;
}

FeatureSeq featurize(const std::vector<Pose>& poses, FeatureMode mode) {
  FeatureSeq f;
  f.mode = mode;
  f.steps.reserve(poses.size());
  if (mode == FeatureMode::Global || poses.empty()) {
    for (const auto& p : poses) f.steps.push_back({p.x, p.y, p.theta});
    return f;
  }
  const Pose& o = poses.front();
  const double c = std::cos(o.theta);
  const double s = std::sin(o.theta);
  for (const auto& p : poses) {
    const double dx = p.x - o.x;
    const double dy = p.y - o.y;
    f.steps.push_back({c * dx + s * dy, -s * dx + c * dy, wrap_angle(p.theta - o.theta)});
  }
  f.steps.front() = {0.0, 0.0, 0.0};
  return f;
}

FeatureSeq featurize(const PoseWindow& window, FeatureMode mode) {
  return featurize(window.poses, mode);
}

DatasetSplit split_dataset(const std::vector<PoseWindow>& windows, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw InvalidInput("split_dataset: ratio must be in (0, 1)");
  DatasetSplit split;
  split.seed = seed;
  split.ratio = ratio;

  std::map<FailureMode, std::vector<std::string>> sources;
  for (const auto& w : windows) {
    auto& v = sources[w.mode];
    if (std::find(v.begin(), v.end(), w.source) == v.end()) v.push_back(w.source);
  }
  std::map<std::string, bool> in_train;
  for (auto& [mode, names] : sources) {
    std::sort(names.begin(), names.end());
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(mode)));
    for (std::size_t i = names.size(); i > 1; --i) std::swap(names[i - 1], names[rng.below(i)]);
    const std::size_t n = names.size();
    auto n_train = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
    // Keep every mode on both sides whenever there is more than one log.
    if (n >= 2) n_train = std::clamp<std::size_t>(n_train, 1, n - 1);
    else n_train = std::min<std::size_t>(n_train, n);
    for (std::size_t i = 0; i < n; ++i) {
      in_train[names[i]] = i < n_train;
      (i < n_train ? split.train_sources : split.validation_sources).push_back(names[i]);
    }
  }
  for (const auto& w : windows) {
    if (in_train.at(w.source)) {
      split.train.push_back(w);
      ++split.train_counts[w.mode];
    } else {
      split.validation.push_back(w);
      ++split.validation_counts[w.mode];
    }
  }
  for (const auto& [mode, names] : sources) {
    (void)names;
    if (!split.train_counts.count(mode))
      split.warnings.push_back("mode " + std::string(mode_name(mode)) + " absent from training split");
    if (!split.validation_counts.count(mode))
      split.warnings.push_back("mode " + std::string(mode_name(mode)) + " absent from validation split");
  }
  return split;
}

// ---------------------------------------------------------------------------
// Files

std::string format_window(const PoseWindow& w) {
  std::string s = std::to_string(w.label) + ',' + std::string(mode_name(w.mode)) + ',' +
                  std::to_string(w.poses.size()) + ',';
  for (std::size_t i = 0; i < w.poses.size(); ++i) {
    if (i) s += ';';
    s += fmt9(w.poses[i].x) + ':' + fmt9(w.poses[i].y) + ':' + fmt9(w.poses[i].theta);
  }
  return s;
}

PoseWindow parse_window(const std::string& line, double rate) {
  auto fail = [&](const std::string& why) { return FormatError("dataset record: " + why); };
  std::size_t p1 = line.find(',');
  std::size_t p2 = p1 == std::string::npos ? p1 : line.find(',', p1 + 1);
  std::size_t p3 = p2 == std::string::npos ? p2 : line.find(',', p2 + 1);
  if (p3 == std::string::npos) throw fail("expected `z,mode,L,` prefix");
  PoseWindow w;
  auto z = parse_int(std::string_view(line).substr(0, p1));
  auto mode = parse_mode(std::string_view(line).substr(p1 + 1, p2 - p1 - 1));
  auto len = parse_int(std::string_view(line).substr(p2 + 1, p3 - p2 - 1));
  if (!z || (*z != 0 && *z != 1)) throw fail("bad label");
  if (!mode) throw fail("bad mode");
  if (!len || *len < 1) throw fail("bad length");
  if (*z != mode_label(*mode)) throw fail("label does not match mode");
  w.label = static_cast<int>(*z);
  w.mode = *mode;
  std::stringstream ss(line.substr(p3 + 1));
  std::string triple;
  while (std::getline(ss, triple, ';')) {
    const auto c1 = triple.find(':');
    const auto c2 = c1 == std::string::npos ? c1 : triple.find(':', c1 + 1);
    if (c2 == std::string::npos) throw fail("bad pose triple");
    auto x = parse_double(std::string_view(triple).substr(0, c1));
    auto y = parse_double(std::string_view(triple).substr(c1 + 1, c2 - c1 - 1));
    auto th = parse_double(std::string_view(triple).substr(c2 + 1));
    if (!x || !y || !th) throw fail("bad pose value");
    w.poses.push_back({static_cast<double>(w.poses.size()) / rate, *x, *y, *th});
  }
  if (static_cast<long long>(w.poses.size()) != *len) throw fail("pose count does not match L");
  return w;
}

void write_windows(std::ostream& os, const std::vector<PoseWindow>& windows) {
  for (const auto& w : windows) os << format_window(w) << '\n';
}

std::vector<PoseWindow> read_windows(std::istream& is, double rate) {
  std::vector<PoseWindow> out;
  std::string line;
  while (std::getline(is, line))
    if (!line.empty()) out.push_back(parse_window(line, rate));
  return out;
}

void write_meta(std::ostream& os, const DatasetMeta& meta) {
  os << "failnet-dataset 1\n";
  os << "rate " << fmt17(meta.rate) << '\n';
  os << "L " << meta.L << '\n';
  os << "stride " << meta.stride << '\n';
  os << "feature_mode " << feature_mode_name(meta.feature_mode) << '\n';
  os << "seed " << meta.seed << '\n';
  for (const auto& [mode, n] : meta.counts) os << "count " << mode_name(mode) << ' ' << n << '\n';
  for (const auto& s : meta.sources)
    os << "source " << mode_name(s.mode) << ' ' << s.source << ' ' << s.first << ' ' << s.count << '\n';
}

DatasetMeta read_meta(std::istream& is) {
  DatasetMeta meta;
  std::string line;
  if (!std::getline(is, line) || line != "failnet-dataset 1") throw FormatError("dataset metadata: bad header");
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string key;
    ss >> key;
    if (key == "rate") ss >> meta.rate;
    else if (key == "L") ss >> meta.L;
    else if (key == "stride") ss >> meta.stride;
    else if (key == "feature_mode") {
      std::string v;
      ss >> v;
      meta.feature_mode = parse_feature_mode(v);
    } else if (key == "seed") ss >> meta.seed;
    else if (key == "count" || key == "source") {
      std::string m;
      ss >> m;
      auto mode = parse_mode(m);
      if (!mode) throw FormatError("dataset metadata: bad mode '" + m + "'");
      if (key == "count") {
        std::size_t n = 0;
        ss >> n;
        meta.counts[*mode] = n;
      } else {
        SourceSpan s;
        s.mode = *mode;
        ss >> s.source >> s.first >> s.count;
        meta.sources.push_back(s);
      }
    } else {
      throw FormatError("dataset metadata: unknown key '" + key + "'");
    }
    if (ss.fail()) throw FormatError("dataset metadata: malformed line '" + line + "'");
  }
  return meta;
}

void save_dataset(const std::string& dir, const std::vector<PoseWindow>& windows, DatasetMeta meta) {
  fs::create_directories(dir);
  meta.counts.clear();
  meta.sources.clear();
  for (auto mode : kAllModes) {
    std::vector<PoseWindow> subset;
    for (const auto& w : windows)
      if (w.mode == mode) subset.push_back(w);
    std::ofstream os(fs::path(dir) / (std::string(mode_name(mode)) + ".ds"));
    if (!os) throw std::runtime_error("cannot write dataset file in " + dir);
    write_windows(os, subset);
    meta.counts[mode] = subset.size();
    for (std::size_t i = 0; i < subset.size(); ++i) {
      if (meta.sources.empty() || meta.sources.back().mode != mode ||
          meta.sources.back().source != subset[i].source)
        meta.sources.push_back({mode, subset[i].source, i, 0});
      ++meta.sources.back().count;
    }
  }
  std::ofstream os(fs::path(dir) / "dataset.meta");
  if (!os) throw std::runtime_error("cannot write dataset metadata in " + dir);
  write_meta(os, meta);
}

std::vector<PoseWindow> load_dataset(const std::string& dir, DatasetMeta* meta_out) {
  std::ifstream ms(fs::path(dir) / "dataset.meta");
  if (!ms) throw std::runtime_error("missing dataset metadata: " + (fs::path(dir) / "dataset.meta").string());
  DatasetMeta meta = read_meta(ms);
  std::vector<PoseWindow> all;
  for (auto mode : kAllModes) {
    const auto path = fs::path(dir) / (std::string(mode_name(mode)) + ".ds");
    std::ifstream is(path);
    if (!is) throw std::runtime_error("missing dataset file: " + path.string());
    auto ws = read_windows(is, meta.rate);
    for (const auto& s : meta.sources) {
      if (s.mode != mode) continue;
      if (s.first + s.count > ws.size()) throw FormatError("dataset metadata: source span out of range");
      for (std::size_t i = s.first; i < s.first + s.count; ++i) ws[i].source = s.source;
    }
    for (auto& w : ws) {
      if (w.mode != mode) throw FormatError("dataset file " + path.string() + " mixes modes");
      all.push_back(std::move(w));
    }
  }
  if (meta_out) *meta_out = meta;
  return all;
}

}  // namespace failnet::data
