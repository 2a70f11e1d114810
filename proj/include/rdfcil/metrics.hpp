#pragma once

// Incremental accuracy bookkeeping and persistence.
//
// metrics.csv   one row per completed phase:
//               phase,n_learned_classes,A_i,cumulative_avg,timestamp
// report.json   one RunReport per run directory (see to_json below)
//
// Cross-seed aggregation uses the sample standard deviation (n - 1).

#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "rdfcil/errors.hpp"

namespace rdfcil {

inline double average_incremental(const std::vector<double>& accuracies) {
  detail::require(!accuracies.empty(), "average_incremental: empty accuracy list");
  double sum = 0.0;
  for (double a : accuracies) {
    detail::require(a >= 0.0 && a <= 1.0, "average_incremental: accuracy ", a, " outside [0, 1]");
    sum += a;
  }
  return sum / static_cast<double>(accuracies.size());
}

// Streaming accuracy over prediction/label batches.
class AccuracyMeter {
 public:
  void update(const torch::Tensor& predictions, const torch::Tensor& labels) {
    detail::require(predictions.sizes() == labels.sizes(), "AccuracyMeter: shape mismatch");
    correct_ += (predictions.to(torch::kLong) == labels.to(torch::kLong)).sum().item<std::int64_t>();
    total_ += labels.numel();
  }
  std::int64_t correct() const noexcept { return correct_; }
  std::int64_t total() const noexcept { return total_; }
  double value() const { return total_ == 0 ? 0.0 : static_cast<double>(correct_) / static_cast<double>(total_); }

 private:
  std::int64_t correct_ = 0;
  std::int64_t total_ = 0;
};

struct RunReport {
  std::string variant = "full";
  std::string dataset;
  std::string protocol;
  int n_tasks = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> ablation_flags;  // enabled flags, sorted
  std::vector<double> accuracies;           // A_1..A_k (k < n_tasks while incomplete)
  std::vector<double> phase_seconds;
  std::vector<std::int64_t> learned_classes;  // classes seen after each phase

  bool complete() const { return n_tasks > 0 && static_cast<int>(accuracies.size()) == n_tasks; }
  double last() const { return accuracies.empty() ? 0.0 : accuracies.back(); }
  double average() const { return average_incremental(accuracies); }

  // Runs that may be averaged together share this key.
  std::string group_key() const {
    std::ostringstream k;
    k << variant << '|' << dataset << '|' << protocol << '|' << n_tasks << '|';
    for (const auto& f : ablation_flags) k << f << ',';
    return k.str();
  }
};

inline nlohmann::json to_json(const RunReport& r) {
  return {{"variant", r.variant},       {"dataset", r.dataset},   {"protocol", r.protocol},
          {"n_tasks", r.n_tasks},       {"seed", r.seed},         {"ablation_flags", r.ablation_flags},
          {"accuracies", r.accuracies}, {"phase_seconds", r.phase_seconds},
          {"learned_classes", r.learned_classes}};
}

inline RunReport report_from_json(const nlohmann::json& j) {
  RunReport r;
  r.variant = j.at("variant").get<std::string>();
  r.dataset = j.at("dataset").get<std::string>();
  r.protocol = j.at("protocol").get<std::string>();
  r.n_tasks = j.at("n_tasks").get<int>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.ablation_flags = j.at("ablation_flags").get<std::vector<std::string>>();
  r.accuracies = j.at("accuracies").get<std::vector<double>>();
  r.phase_seconds = j.at("phase_seconds").get<std::vector<double>>();
  r.learned_classes = j.value("learned_classes", std::vector<std::int64_t>{});
  return r;
}

// Written to a temporary file and renamed so readers never see half a record.
inline void write_report(const std::filesystem::path& file, const RunReport& r) {
  auto tmp = file;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << to_json(r).dump(2) << '\n';
  }
  std::filesystem::rename(tmp, file);
}

inline std::optional<RunReport> read_report(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) return std::nullopt;
  try {
    return report_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception&) {
    return std::nullopt;
  }
}

// ---------------------------------------------------------------------------
// metrics.csv

struct MetricsRow {
  int phase = 0;
  std::int64_t n_learned_classes = 0;
  double accuracy = 0.0;
  double cumulative_average = 0.0;
  std::string timestamp;
};

inline const char* metrics_header() { return "phase,n_learned_classes,A_i,cumulative_avg,timestamp"; }

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream o;
  o << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return o.str();
}

inline std::string format_metrics_row(const MetricsRow& r) {
  std::ostringstream o;
  o << r.phase << ',' << r.n_learned_classes << ',' << std::setprecision(17) << r.accuracy << ','
    << r.cumulative_average << ',' << r.timestamp;
  return o.str();
}

// Appends one complete line per call; the header is written on first use.
inline void append_metrics_row(const std::filesystem::path& file, const MetricsRow& r) {
  const bool fresh = !std::filesystem::exists(file) || std::filesystem::file_size(file) == 0;
  std::ofstream out(file, std::ios::app);
  if (!out) throw std::runtime_error("cannot append to " + file.string());
  if (fresh) out << metrics_header() << '\n';
  out << format_metrics_row(r) << '\n';
}

// Reads complete rows only: a trailing line without newline or with the wrong
// column count (an interrupted writer) is ignored.
inline std::vector<MetricsRow> read_metrics(const std::filesystem::path& file) {
  std::vector<MetricsRow> rows;
  std::ifstream in(file);
  if (!in) return rows;
  std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::size_t start = 0;
  bool header = true;
  while (true) {
    const auto nl = content.find('\n', start);
    if (nl == std::string::npos) break;
    const auto line = content.substr(start, nl - start);
    start = nl + 1;
    if (header) {
      header = false;
      continue;
    }
    std::vector<std::string> cols;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cols.push_back(c);
    if (cols.size() != 5) continue;
    try {
      rows.push_back({std::stoi(cols[0]), std::stoll(cols[1]), std::stod(cols[2]), std::stod(cols[3]), cols[4]});
    } catch (const std::exception&) {
      continue;
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Aggregation across seeds

struct MeanStd {
  double mean = 0.0;
  std::optional<double> std;  // absent for a single run
};

inline MeanStd mean_std(const std::vector<double>& v) {
  detail::require(!v.empty(), "mean_std: empty sample");
  MeanStd out;
  for (double x : v) out.mean += x;
  out.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - out.mean) * (x - out.mean);
    out.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return out;
}

// Values are fractions; printed as percent with two decimals.
inline std::string format_percent(const MeanStd& m) {
  std::ostringstream o;
  o << std::fixed << std::setprecision(2) << m.mean * 100.0;
  if (m.std) o << " ± " << *m.std * 100.0;
  return o.str();
}

struct AggregateRow {
  std::string key;
  std::string variant;
  std::size_t runs = 0;
  MeanStd last;     // A_N
  MeanStd average;  // mean of A_i
  std::vector<MeanStd> per_phase;
};

inline AggregateRow aggregate_runs(const std::vector<RunReport>& reports) {
  detail::require(!reports.empty(), "aggregate_runs: no reports");
  const auto key = reports.front().group_key();
  std::vector<double> last, avg;
  const auto phases = reports.front().accuracies.size();
  std::vector<std::vector<double>> per(phases);
  for (const auto& r : reports) {
    detail::require(r.group_key() == key, "aggregate_runs: mixed configurations '", key, "' and '",
                    r.group_key(), "'");
    detail::require(r.accuracies.size() == phases && phases > 0, "aggregate_runs: runs differ in phase count");
    last.push_back(r.last());
    avg.push_back(r.average());
    for (std::size_t i = 0; i < phases; ++i) per[i].push_back(r.accuracies[i]);
  }
  AggregateRow row;
  row.key = key;
  row.variant = reports.front().variant;
  row.runs = reports.size();
  row.last = mean_std(last);
  row.average = mean_std(avg);
  for (auto& p : per) row.per_phase.push_back(mean_std(p));
  return row;
}

// Groups by configuration and aggregates each group, in first-seen order.
inline std::vector<AggregateRow> aggregate_groups(const std::vector<RunReport>& reports) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<RunReport>> groups;
  for (const auto& r : reports) {
    auto k = r.group_key();
    if (!groups.count(k)) order.push_back(k);
    groups[k].push_back(r);
  }
  std::vector<AggregateRow> rows;
  for (const auto& k : order) rows.push_back(aggregate_runs(groups[k]));
  return rows;
}

// Markdown table: one row per configuration, A_N and mean A_i columns.
inline std::string format_table(const std::vector<AggregateRow>& rows) {
  std::ostringstream o;
  o << "| Variant | Runs | A_N (%) | Avg A_i (%) |\n|---|---|---|---|\n";
  for (const auto& r : rows) {
    o << "| " << r.variant << " | " << r.runs << " | " << format_percent(r.last) << " | "
      << format_percent(r.average) << " |\n";
  }
  return o.str();
}

}  // namespace rdfcil
