#include <gtest/gtest.h>

#include "oracles.hpp"
#include "rdfcil/checkpoint.hpp"
#include "rdfcil/hash.hpp"
#include "rdfcil/model.hpp"

using namespace rdfcil;

namespace {

using Parts = std::vector<std::int64_t>;

BackboneOptions tiny_backbone() {
  BackboneOptions b;
  b.widths = {4, 8};
  b.blocks = {1, 1};
  b.input = {3, 8, 8};
  return b;
}

}  // namespace

TEST(Head, ExpandKeepsOldRows) {
  torch::manual_seed(0);
  ClassificationHead head(16, Parts{10});
  auto bigger = expand_head(head, 5);
  EXPECT_EQ(bigger->class_count(), 15);
  EXPECT_TRUE(torch::equal(bigger->weight().narrow(0, 0, 10), head->weight()));
  EXPECT_EQ(head->class_count(), 10);
}

TEST(Head, HalfSplitPartitions) {
  ClassificationHead head(8, Parts{50});
  auto bigger = expand_head(head, 10);
  auto r = bigger->task_ranges();
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r[0], (std::pair<std::int64_t, std::int64_t>{0, 50}));
  EXPECT_EQ(r[1], (std::pair<std::int64_t, std::int64_t>{50, 60}));
}

TEST(Head, ExpansionLeavesOldLogits) {
  torch::manual_seed(1);
  ClassificationHead head(6, Parts{2});
  auto x = torch::randn({3, 6});
  auto before = head->forward(x);
  auto after = expand_head(head, 2)->forward(x);
  EXPECT_TRUE(torch::allclose(after.narrow(1, 0, 2), before, 0.0, 1e-7));
}

TEST(Head, RejectsNonPositiveExpansion) {
  ClassificationHead head(4, Parts{2});
  EXPECT_THROW(expand_head(head, 0), std::invalid_argument);
  EXPECT_THROW(expand_head(head, -3), std::invalid_argument);
}

TEST(Head, SlicesConcatenateToFullOutput) {
  ClassificationHead head(5, Parts{3, 4});
  auto x = torch::randn({2, 5});
  auto joined = torch::cat({head->logits_range(x, 0, 3), head->logits_range(x, 3, 4)}, 1);
  EXPECT_TRUE(torch::allclose(joined, head->forward(x)));
  EXPECT_THROW(head->logits_range(x, 2, 6), std::invalid_argument);
}

TEST(Model, EmbedDimStableAcrossExpansion) {
  IncrementalClassifier m(tiny_backbone(), Parts{2});
  auto x = torch::randn({2, 3, 8, 8});
  m->eval();
  const auto d = m->features(x).size(1);
  m->expand(3);
  EXPECT_EQ(m->features(x).size(1), d);
  EXPECT_EQ(m->forward(x).size(1), 5);
}

TEST(Model, EvalForwardIsDeterministic) {
  IncrementalClassifier m(tiny_backbone(), Parts{3});
  m->eval();
  auto x = torch::randn({4, 3, 8, 8});
  EXPECT_TRUE(torch::equal(m->forward(x), m->forward(x)));
}

TEST(Model, RejectsWrongInputShape) {
  IncrementalClassifier m(tiny_backbone(), Parts{3});
  EXPECT_THROW(m->forward(torch::randn({2, 3, 9, 8})), std::invalid_argument);
  EXPECT_THROW(m->forward(torch::randn({2, 1, 8, 8})), std::invalid_argument);
  ModelSnapshot s(m, 1);
  EXPECT_THROW(predict(s, torch::randn({3, 8, 8})), std::invalid_argument);
}

TEST(Model, CapturesBatchNormInputsInLayerOrder) {
  IncrementalClassifier m(tiny_backbone(), Parts{2});
  m->eval();
  auto out = m->forward_all(torch::randn({2, 3, 8, 8}), true);
  auto layers = m->extractor->bn_layers();
  ASSERT_EQ(out.bn_inputs.size(), layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    EXPECT_EQ(out.bn_inputs[i].size(1), layers[i]->running_mean.size(0));
  }
}

TEST(Snapshot, UnaffectedByLiveUpdates) {
  torch::manual_seed(2);
  IncrementalClassifier m(tiny_backbone(), Parts{3});
  m->eval();
  ModelSnapshot snap(m, 1);
  auto x = torch::randn({5, 3, 8, 8});
  auto before = snap.logits(x);
  {
    torch::NoGradGuard g;
    for (auto& p : m->parameters()) p.add_(1.0);
  }
  m->train();
  m->forward(x);  // updates running statistics of the live model
  EXPECT_TRUE(torch::equal(snap.logits(x), before));
}

TEST(Snapshot, MatchesSourceOnRandomInputs) {
  torch::manual_seed(3);
  IncrementalClassifier m(tiny_backbone(), Parts{4});
  m->train();
  for (int i = 0; i < 3; ++i) m->forward(torch::randn({8, 3, 8, 8}));
  m->eval();
  ModelSnapshot snap(m, 1);
  double worst = 0;
  for (int i = 0; i < 100; ++i) {
    auto x = torch::randn({1, 3, 8, 8});
    worst = std::max(worst, (m->forward(x) - snap.logits(x)).abs().max().item<double>());
  }
  EXPECT_EQ(worst, 0.0);
}

TEST(Snapshot, UntrainedAndEmptyModels) {
  IncrementalClassifier m(tiny_backbone(), Parts{});
  ModelSnapshot empty(m, 0);
  EXPECT_EQ(empty.class_count(), 0);
  EXPECT_FALSE(empty.bn_records().empty());
  m->expand(2);
  ModelSnapshot fresh(m, 0);
  EXPECT_EQ(fresh.logits(torch::randn({2, 3, 8, 8})).size(1), 2);
}

TEST(Snapshot, NoGradientToParameters) {
  IncrementalClassifier m(tiny_backbone(), Parts{2});
  ModelSnapshot snap(m, 1);
  auto x = torch::randn({2, 3, 8, 8}).requires_grad_();
  snap.logits(x).sum().backward();
  EXPECT_TRUE(x.grad().defined());
  for (const auto& p : snap.module().parameters()) EXPECT_FALSE(p.requires_grad());
}

TEST(Predict, ArgmaxExamples) {
  auto l = torch::tensor({{0.1, 0.9, 0.3}, {0.5, 0.5, 0.2}, {0.2, 0.7, 0.7}});
  auto p = argmax_lowest(l);
  EXPECT_EQ(p[0].item<std::int64_t>(), 1);
  EXPECT_EQ(p[1].item<std::int64_t>(), 0);
  EXPECT_EQ(p[2].item<std::int64_t>(), 1);
}

TEST(Predict, MatchesScanOracle) {
  torch::manual_seed(4);
  IncrementalClassifier m(tiny_backbone(), Parts{3, 4});
  m->eval();
  auto x = torch::randn({20, 3, 8, 8});
  auto pred = predict(m, x);
  auto expected = oracle::argmax_scan(m->forward(x));
  for (std::int64_t i = 0; i < 20; ++i) EXPECT_EQ(pred[i].item<std::int64_t>(), expected[static_cast<std::size_t>(i)]);
}

TEST(Checkpoint, RoundTripPreservesOutputs) {
  torch::manual_seed(5);
  IncrementalClassifier m(tiny_backbone(), Parts{2, 2});
  m->train();
  m->forward(torch::randn({6, 3, 8, 8}));
  m->eval();
  ModelSnapshot snap(m, 2);
  auto file = std::filesystem::temp_directory_path() / "rdfcil_ckpt_test";
  save_checkpoint(file, snap, "abc123");
  auto loaded = load_checkpoint(file);
  EXPECT_EQ(loaded.phase, 2);
  EXPECT_EQ(loaded.config_hash, "abc123");
  EXPECT_EQ(loaded.snapshot.partitions(), snap.partitions());
  EXPECT_EQ(fingerprint(loaded.snapshot.module()), fingerprint(snap.module()));
  auto x = torch::randn({3, 3, 8, 8});
  EXPECT_TRUE(torch::equal(loaded.snapshot.logits(x), snap.logits(x)));
  std::filesystem::remove(file);
}

TEST(Fingerprint, SensitiveToBuffers) {
  IncrementalClassifier m(tiny_backbone(), Parts{2});
  const auto before = fingerprint(*m);
  m->train();
  m->forward(torch::randn({4, 3, 8, 8}));
  EXPECT_NE(fingerprint(*m), before);
}
