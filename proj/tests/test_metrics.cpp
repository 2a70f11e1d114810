#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "rdfcil/metrics.hpp"

using namespace rdfcil;

namespace {

RunReport report(std::vector<double> acc, std::uint64_t seed = 0, std::string variant = "full") {
  RunReport r;
  r.variant = std::move(variant);
  r.dataset = "digits";
  r.protocol = "equal";
  r.n_tasks = static_cast<int>(acc.size());
  r.seed = seed;
  r.accuracies = std::move(acc);
  r.phase_seconds.assign(r.accuracies.size(), 1.0);
  return r;
}

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("rdfcil_metrics_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST(AverageIncremental, Examples) {
  EXPECT_DOUBLE_EQ(average_incremental({1.0}), 1.0);
  EXPECT_NEAR(average_incremental({0.5, 0.7, 0.9}), 0.7, 1e-15);
  EXPECT_NEAR(average_incremental({0.9, 0.5, 0.7}), average_incremental({0.5, 0.7, 0.9}), 1e-15);
  EXPECT_THROW(average_incremental({}), std::invalid_argument);
  EXPECT_THROW(average_incremental({1.2}), std::invalid_argument);
}

TEST(AccuracyMeter, CountsMatches) {
  AccuracyMeter m;
  m.update(torch::tensor({1, 2, 3}), torch::tensor({1, 0, 3}));
  m.update(torch::tensor({4}), torch::tensor({4}));
  EXPECT_EQ(m.correct(), 3);
  EXPECT_EQ(m.total(), 4);
  EXPECT_DOUBLE_EQ(m.value(), 0.75);
}

TEST(Aggregate, SampleStd) {
  auto row = aggregate_runs({report({0.50}, 0), report({0.52}, 1), report({0.54}, 2)});
  EXPECT_EQ(format_percent(row.last), "52.00 ± 2.00");
  EXPECT_EQ(row.runs, 3u);
}

TEST(Aggregate, IdenticalAndSingleRuns) {
  auto same = aggregate_runs({report({0.6, 0.4}, 0), report({0.6, 0.4}, 1)});
  ASSERT_TRUE(same.last.std.has_value());
  EXPECT_EQ(*same.last.std, 0.0);
  auto single = aggregate_runs({report({0.6, 0.4})});
  EXPECT_FALSE(single.last.std.has_value());
  EXPECT_EQ(format_percent(single.last), "40.00");
}

TEST(Aggregate, RejectsMixedConfigurations) {
  EXPECT_THROW(aggregate_runs({report({0.5}), report({0.5}, 1, "no_hkd")}), std::invalid_argument);
  auto rows = aggregate_groups({report({0.5}), report({0.4}, 0, "no_hkd"), report({0.7}, 1)});
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].variant, "full");
  EXPECT_EQ(rows[0].runs, 2u);
}

TEST(Report, JsonRoundTrip) {
  auto dir = scratch("json");
  std::filesystem::create_directories(dir);
  auto r = report({0.9, 0.8, 0.7}, 4);
  r.ablation_flags = {"no_chr"};
  r.learned_classes = {2, 4, 6};
  write_report(dir / "report.json", r);
  auto back = read_report(dir / "report.json");
  ASSERT_TRUE(back.has_value());
  EXPECT_EQ(back->accuracies, r.accuracies);
  EXPECT_EQ(back->learned_classes, r.learned_classes);
  EXPECT_EQ(back->group_key(), r.group_key());
  EXPECT_TRUE(back->complete());
  EXPECT_FALSE(read_report(dir / "missing.json").has_value());
}

TEST(MetricsCsv, AppendAndReadBack) {
  auto dir = scratch("csv");
  std::filesystem::create_directories(dir);
  const auto f = dir / "metrics.csv";
  append_metrics_row(f, {1, 2, 0.1, 0.1, "t1"});
  append_metrics_row(f, {2, 4, 0.3, 0.2, "t2"});
  {
    std::ofstream out(f, std::ios::app);
    out << "3,6,0.5";  // interrupted write
  }
  auto rows = read_metrics(f);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[1].phase, 2);
  EXPECT_EQ(rows[1].n_learned_classes, 4);
  EXPECT_DOUBLE_EQ(rows[1].accuracy, 0.3);
  std::ifstream in(f);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "phase,n_learned_classes,A_i,cumulative_avg,timestamp");
}

TEST(MetricsCsv, FullPrecisionRoundTrip) {
  MetricsRow r{1, 10, 1.0 / 3.0, 2.0 / 7.0, "x"};
  auto dir = scratch("precision");
  std::filesystem::create_directories(dir);
  append_metrics_row(dir / "m.csv", r);
  auto back = read_metrics(dir / "m.csv");
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0].accuracy, r.accuracy);
  EXPECT_EQ(back[0].cumulative_average, r.cumulative_average);
}

TEST(Table, OneRowPerConfiguration) {
  auto rows = aggregate_groups({report({0.5, 0.3}), report({0.5, 0.2}, 0, "no_rkd")});
  auto t = format_table(rows);
  EXPECT_NE(t.find("| full | 1 | 30.00 | 40.00 |"), std::string::npos);
  EXPECT_NE(t.find("| no_rkd | 1 | 20.00 | 35.00 |"), std::string::npos);
}
