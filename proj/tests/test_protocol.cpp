#include <numeric>
#include <set>

#include <gtest/gtest.h>

#include "rdfcil/config.hpp"
#include "rdfcil/protocol.hpp"

using namespace rdfcil;

namespace {

DatasetSplits blobs(std::int64_t classes) {
  BlobOptions o;
  o.n_classes = classes;
  o.train_per_class = 6;
  o.test_per_class = 4;
  o.size = 8;
  return make_blobs(o);
}

std::vector<std::int64_t> repeat(std::int64_t v, std::size_t n) { return std::vector<std::int64_t>(n, v); }

}  // namespace

TEST(SplitEqual, Sizes) {
  EXPECT_EQ(split_equal(100, 5, 0).task_sizes, repeat(20, 5));
  EXPECT_EQ(split_equal(100, 20, 7).task_sizes, repeat(5, 20));
  EXPECT_THROW(split_equal(100, 7, 0), std::invalid_argument);
}

TEST(SplitEqual, SeededOrder) {
  auto a = split_equal(100, 10, 1993);
  auto b = split_equal(100, 10, 1993);
  auto c = split_equal(100, 10, 1994);
  EXPECT_EQ(a.class_order, b.class_order);
  EXPECT_NE(a.class_order, c.class_order);
  auto sorted = a.class_order;
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::int64_t> iota(100);
  std::iota(iota.begin(), iota.end(), 0);
  EXPECT_EQ(sorted, iota);
}

TEST(SplitHalf, Sizes) {
  std::vector<std::int64_t> six{50, 10, 10, 10, 10, 10};
  EXPECT_EQ(split_half_then_equal(100, 6).task_sizes, six);
  auto t26 = repeat(2, 26);
  t26[0] = 50;
  EXPECT_EQ(split_half_then_equal(100, 26).task_sizes, t26);
  auto t11 = repeat(10, 11);
  t11[0] = 100;
  EXPECT_EQ(split_half_then_equal(200, 11).task_sizes, t11);
  EXPECT_THROW(split_half_then_equal(100, 8), std::invalid_argument);
  EXPECT_THROW(split_half_then_equal(101, 2), std::invalid_argument);
}

TEST(Schedule, TasksAreDisjointAndCover) {
  auto s = split_half_then_equal(20, 6, 3);
  std::set<std::int64_t> seen;
  std::int64_t total = 0;
  for (int t = 1; t <= s.n_tasks(); ++t) {
    for (auto c : s.classes_of(t)) {
      EXPECT_TRUE(seen.insert(c).second);
      EXPECT_EQ(s.task_of(c), t);
    }
    total += s.size(t);
  }
  EXPECT_EQ(total, 20);
  EXPECT_EQ(s.learned(3), 14);
  EXPECT_THROW(s.offset(0), std::invalid_argument);
  EXPECT_THROW(s.size(7), std::invalid_argument);
}

TEST(Protocol, ByName) {
  EXPECT_EQ(make_protocol("half", 12, 4, 0).task_sizes, (std::vector<std::int64_t>{6, 2, 2, 2}));
  EXPECT_EQ(make_protocol("equal", 12, 4, 0).task_sizes, repeat(3, 4));
  EXPECT_THROW(make_protocol("other", 10, 2, 0), std::invalid_argument);
}

TEST(Views, CumulativeMatchesFilter) {
  auto d = blobs(8);
  auto s = split_equal(8, 4, 5);
  for (int i = 1; i <= 4; ++i) {
    auto v = cumulative_test_view(s, d, i);
    std::set<std::int64_t> allowed(s.class_order.begin(), s.class_order.begin() + s.learned(i));
    std::vector<std::int64_t> expected;
    auto lab = d.test->labels.accessor<std::int64_t, 1>();
    for (std::int64_t k = 0; k < d.test->size(); ++k) {
      if (allowed.count(lab[k])) expected.push_back(k);
    }
    ASSERT_EQ(v.size(), static_cast<std::int64_t>(expected.size()));
    for (std::size_t k = 0; k < expected.size(); ++k) {
      EXPECT_EQ(v.indices()[static_cast<std::int64_t>(k)].item<std::int64_t>(), expected[k]);
      EXPECT_EQ(v.labels()[static_cast<std::int64_t>(k)].item<std::int64_t>(),
                s.global_index_of[static_cast<std::size_t>(lab[expected[k]])]);
    }
  }
  EXPECT_EQ(cumulative_test_view(s, d, 1).size(), task_test_view(s, d, 1).size());
  EXPECT_EQ(cumulative_test_view(s, d, 4).size(), d.test->size());
  EXPECT_THROW(cumulative_test_view(s, d, 0), std::invalid_argument);
  EXPECT_THROW(cumulative_test_view(s, d, 5), std::invalid_argument);
}

TEST(Views, LocalLabels) {
  auto d = blobs(6);
  auto s = split_equal(6, 3, 1);
  auto v = task_train_view(s, d, 2, LabelMode::local);
  EXPECT_EQ(v.labels().min().item<std::int64_t>(), 0);
  EXPECT_EQ(v.labels().max().item<std::int64_t>(), 1);
  auto g = task_train_view(s, d, 2, LabelMode::global);
  EXPECT_TRUE(torch::equal(g.labels(), v.labels() + 2));
}

TEST(Views, BatchesAreNormalizedImages) {
  auto d = blobs(4);
  auto s = split_equal(4, 2, 0);
  auto v = task_train_view(s, d, 1);
  auto b = v.batch(torch::arange(3, torch::kLong));
  EXPECT_EQ(b.images.sizes(), torch::IntArrayRef({3, 3, 8, 8}));
  EXPECT_EQ(b.images.scalar_type(), torch::kFloat);
}

TEST(EpochBatches, CoverEverySampleOnce) {
  auto rng = at::make_generator<at::CPUGeneratorImpl>(9);
  auto batches = epoch_batches(23, 5, rng);
  std::set<std::int64_t> seen;
  std::int64_t n = 0;
  for (const auto& b : batches) {
    for (std::int64_t i = 0; i < b.size(0); ++i) seen.insert(b[i].item<std::int64_t>());
    n += b.size(0);
  }
  EXPECT_EQ(n, 23);
  EXPECT_EQ(seen.size(), 23u);
  EXPECT_EQ(epoch_batches(23, 5, rng, 4).size(), 4u);
}

TEST(Data, BundledDigitsLoad) {
  DatasetConfig cfg;
  cfg.name = "digits";
  auto d = load_dataset(cfg);
  EXPECT_EQ(d.train->n_classes, 10);
  EXPECT_EQ(d.train->shape, (ImageShape{3, 8, 8}));
  EXPECT_EQ(d.train->size(), 1442);
  EXPECT_EQ(d.test->size(), 355);
}

TEST(Data, RestrictClasses) {
  auto d = blobs(5);
  auto r = restrict_classes(d, {3, 1});
  EXPECT_EQ(r.train->n_classes, 2);
  EXPECT_EQ(r.train->size(), 12);
  EXPECT_THROW(restrict_classes(d, {1, 1}), std::invalid_argument);
}
