// SPDX-License-Identifier: Apache-2.0
#include "failnet/eval.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace failnet::eval {

namespace {

constexpr const char* kManualNote = "Reckless column: stochastic surrogate for the manual (human-driven) failure mode";

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

std::size_t need_count(const std::string& s) {
  auto v = parse_int(s);
  if (!v || *v < 0) throw FormatError("report: bad count '" + s + "'");
  return static_cast<std::size_t>(*v);
}

std::string percent(std::optional<double> v) {
  if (!v) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * *v);
  return buf;
}

}  // namespace

double accuracy(std::span<const double> predictions, std::span<const int> labels) {
  if (predictions.empty()) throw InvalidInput("accuracy: empty input");
  if (predictions.size() != labels.size()) throw InvalidInput("accuracy: length mismatch");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw InvalidInput("accuracy: labels must be 0 or 1");
    correct += static_cast<std::size_t>((predictions[i] > 0.5) == (labels[i] == 1));
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

std::map<FailureMode, ModeCount> per_mode_counts(std::span<const double> predictions,
                                                 std::span<const FailureMode> modes) {
  if (predictions.size() != modes.size()) throw InvalidInput("per_mode_accuracy: length mismatch");
  std::map<FailureMode, ModeCount> out;
  for (std::size_t i = 0; i < modes.size(); ++i) {
    auto& c = out[modes[i]];
    ++c.total;
    c.correct += static_cast<std::size_t>((predictions[i] > 0.5) == (mode_label(modes[i]) == 1));
  }
  return out;
}

std::map<FailureMode, std::optional<double>> per_mode_accuracy(std::span<const double> predictions,
                                                               std::span<const FailureMode> modes) {
  const auto counts = per_mode_counts(predictions, modes);
  std::map<FailureMode, std::optional<double>> out;
  for (FailureMode m : kAllModes) {
    auto it = counts.find(m);
    out[m] = it == counts.end() ? std::nullopt
                                : std::optional<double>(static_cast<double>(it->second.correct) /
                                                        static_cast<double>(it->second.total));
  }
  return out;
}

std::size_t MethodResult::total() const {
  std::size_t n = 0;
  for (const auto& [m, c] : modes) n += c.total;
  return n;
}

double MethodResult::overall() const {
  std::size_t n = 0, k = 0;
  for (const auto& [m, c] : modes) {
    n += c.total;
    k += c.correct;
  }
  return n ? static_cast<double>(k) / static_cast<double>(n) : 0.0;
}

std::optional<double> MethodResult::mode_accuracy(FailureMode m) const {
  auto it = modes.find(m);
  if (it == modes.end() || it->second.total == 0) return std::nullopt;
  return static_cast<double>(it->second.correct) / static_cast<double>(it->second.total);
}

MethodResult score_method(const std::string& name, std::size_t parameters, std::span<const double> predictions,
                          std::span<const FailureMode> modes) {
  MethodResult r;
  r.name = name;
  r.parameters = parameters;
  r.modes = per_mode_counts(predictions, modes);
  for (std::size_t i = 0; i < modes.size(); ++i) {
    const bool unsafe = predictions[i] > 0.5;
    if (mode_label(modes[i]) == 1)
      (unsafe ? r.confusion.tp : r.confusion.fn) += 1;
    else
      (unsafe ? r.confusion.fp : r.confusion.tn) += 1;
  }
  return r;
}

const MethodResult* EvalReport::find(const std::string& name) const {
  for (const auto& m : methods)
    if (m.name == name) return &m;
  return nullptr;
}

std::string format_csv(const EvalReport& r) {
  std::ostringstream os;
  os << "# title: " << r.title << '\n';
  os << "# " << kManualNote << '\n';
  for (const auto& [k, v] : r.metadata) os << "# meta " << k << ": " << v << '\n';
  os << "method,params,All";
  for (FailureMode m : kColumnOrder) os << ',' << mode_name(m);
  os << ",tp,tn,fp,fn";
  for (FailureMode m : kColumnOrder) os << ',' << mode_name(m) << "_correct," << mode_name(m) << "_total";
  os << '\n';
  for (const auto& m : r.methods) {
    if (m.name.find(',') != std::string::npos) throw InvalidInput("report: method names cannot contain commas");
    os << m.name << ',' << m.parameters << ',' << fmt9(m.overall());
    for (FailureMode mode : kColumnOrder) {
      auto a = m.mode_accuracy(mode);
      os << ',' << (a ? fmt9(*a) : "");
    }
    os << ',' << m.confusion.tp << ',' << m.confusion.tn << ',' << m.confusion.fp << ',' << m.confusion.fn;
    for (FailureMode mode : kColumnOrder) {
      auto it = m.modes.find(mode);
      if (it == m.modes.end())
        os << ",,";
      else
        os << ',' << it->second.correct << ',' << it->second.total;
    }
    os << '\n';
  }
  return os.str();
}

EvalReport parse_csv(const std::string& text) {
  EvalReport r;
  std::istringstream is(text);
  std::string line;
  bool header = false;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line.rfind("# title: ", 0) == 0) {
      r.title = line.substr(9);
      continue;
    }
    if (line.rfind("# meta ", 0) == 0) {
      const auto colon = line.find(": ", 7);
      if (colon == std::string::npos) throw FormatError("report: bad metadata line");
      r.metadata[line.substr(7, colon - 7)] = line.substr(colon + 2);
      continue;
    }
    if (line[0] == '#') continue;
    if (!header) {
      if (line.rfind("method,params,All", 0) != 0) throw FormatError("report: missing column header");
      header = true;
      continue;
    }
    const auto f = split(line, ',');
    constexpr std::size_t kFields = 3 + 5 + 4 + 10;
    if (f.size() != kFields) throw FormatError("report: expected " + std::to_string(kFields) + " fields");
    MethodResult m;
    m.name = f[0];
    m.parameters = need_count(f[1]);
    m.confusion = {need_count(f[8]), need_count(f[9]), need_count(f[10]), need_count(f[11])};
    for (std::size_t k = 0; k < kColumnOrder.size(); ++k) {
      const auto& c = f[12 + 2 * k];
      const auto& t = f[13 + 2 * k];
      if (c.empty() && t.empty()) continue;
      m.modes[kColumnOrder[k]] = {need_count(c), need_count(t)};
    }
    r.methods.push_back(std::move(m));
  }
  if (!header) throw FormatError("report: missing column header");
  return r;
}

std::string format_table(const EvalReport& r) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> head{"Method", "# params", "All"};
  for (FailureMode m : kColumnOrder) head.emplace_back(mode_name(m));
  rows.push_back(head);
  for (const auto& m : r.methods) {
    std::vector<std::string> row{m.name, std::to_string(m.parameters),
                                 m.total() ? percent(m.overall()) : "-"};
    for (FailureMode mode : kColumnOrder) row.push_back(percent(m.mode_accuracy(mode)));
    rows.push_back(row);
  }
  std::vector<std::size_t> width(head.size(), 0);
  for (const auto& row : rows)
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());

  std::ostringstream os;
  if (!r.title.empty()) os << r.title << '\n';
  os << kManualNote << '\n';
  for (const auto& [k, v] : r.metadata) os << k << ": " << v << '\n';
  os << '\n';
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t c = 0; c < rows[i].size(); ++c) {
      const auto& cell = rows[i][c];
      const std::string pad(width[c] - cell.size(), ' ');
      os << (c ? "  " : "") << (c == 0 ? cell + pad : pad + cell);
    }
    os << '\n';
    if (i == 0) {
      std::size_t total = 0;
      for (auto w : width) total += w;
      os << std::string(total + 2 * (width.size() - 1), '-') << '\n';
    }
  }
  return os.str();
}

void emit_report(const EvalReport& r, const std::string& dir, const std::string& stem) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw FormatError("cannot create report directory " + dir + ": " + ec.message());
  const auto base = std::filesystem::path(dir) / stem;
  for (const auto& [ext, body] : {std::pair{".csv", format_csv(r)}, std::pair{".txt", format_table(r)}}) {
    const auto path = base.string() + ext;
    std::ofstream os(path);
    if (!os) throw FormatError("cannot write " + path);
    os << body;
    if (!os) throw FormatError("write failed: " + path);
  }
}

}  // namespace failnet::eval
