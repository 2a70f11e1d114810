#include <cmath>
#include <gtest/gtest.h>

#include "oracles.hpp"
#include "rdfcil/losses.hpp"

using namespace rdfcil;

namespace {

torch::TensorOptions f64() { return torch::TensorOptions().dtype(torch::kDouble); }

double value(const torch::Tensor& t) { return t.item<double>(); }

}  // namespace

TEST(AdaptiveFactors, TwoNewClassesGiveAlphaOne) {
  auto f = adaptive_factors(10, 2);
  EXPECT_DOUBLE_EQ(f.alpha, 1.0);
}

TEST(AdaptiveFactors, FiftyPlusTen) {
  auto f = adaptive_factors(50, 10);
  EXPECT_NEAR(f.beta, 2.2360679774997896964, 1e-12);
  EXPECT_NEAR(f.alpha, 2.5849625007211561815, 1e-12);
  // Hand arithmetic: (1 + 1/2.58496...) / 2.23607 * 0.5, 2.58496 * 2.23607 * {0.15, 0.5}.
  EXPECT_NEAR(f.effective_lce, 0.3101097152, 1e-8);
  EXPECT_NEAR(f.effective_hkd, 0.8670227806, 1e-8);
  EXPECT_NEAR(f.effective_rkd, 2.8900759355, 1e-8);
}

TEST(AdaptiveFactors, RejectsDegenerateCounts) {
  EXPECT_THROW(adaptive_factors(10, 1), std::invalid_argument);
  EXPECT_THROW(adaptive_factors(0, 4), std::invalid_argument);
}

TEST(KdBaseline, IdenticalLogitsGiveZero) {
  auto x = torch::randn({4, 6}, f64());
  EXPECT_NEAR(value(kd_baseline(x, x.clone(), 2.0)), 0.0, 1e-15);
}

TEST(KdBaseline, HandComputedKl) {
  auto old_l = torch::tensor({{1.0, 0.0}}, f64());
  auto new_l = torch::tensor({{0.0, 1.0}}, f64());
  const double p = std::exp(1.0) / (std::exp(1.0) + 1.0);
  const double expected = p * std::log(p / (1 - p)) + (1 - p) * std::log((1 - p) / p);
  EXPECT_NEAR(value(kd_baseline(old_l, new_l, 1.0)), expected, 1e-12);
}

TEST(KdBaseline, DecreasesWithTemperature) {
  auto old_l = torch::tensor({{2.0, -1.0, 0.5}}, f64());
  auto new_l = torch::tensor({{-0.5, 1.5, 0.0}}, f64());
  double prev = 1e9;
  for (double tau : {1.0, 2.0, 4.0, 8.0, 16.0}) {
    const double v = value(kd_baseline(old_l, new_l, tau));
    EXPECT_LT(v, prev);
    prev = v;
  }
  EXPECT_THROW(kd_baseline(old_l, new_l, 0.0), std::invalid_argument);
  EXPECT_THROW(kd_baseline(old_l, torch::zeros({1, 2}, f64()), 1.0), std::invalid_argument);
}

TEST(HkdLoss, Examples) {
  auto x = torch::randn({3, 5}, f64());
  EXPECT_EQ(value(hkd_loss(x, x.clone(), 5)), 0.0);
  EXPECT_DOUBLE_EQ(value(hkd_loss(torch::ones({2, 5}, f64()), torch::zeros({2, 5}, f64()), 5)), 1.0);
  EXPECT_THROW(hkd_loss(x, torch::zeros({3, 4}, f64()), 5), std::invalid_argument);
}

TEST(HkdLoss, MatchesElementwiseMean) {
  auto t = torch::randn({6, 7}, f64());
  auto s = torch::randn({6, 7}, f64());
  double sum = 0;
  for (int i = 0; i < 6; ++i) {
    for (int j = 0; j < 7; ++j) sum += std::fabs(t[i][j].item<double>() - s[i][j].item<double>());
  }
  EXPECT_NEAR(value(hkd_loss(t, s, 7)), sum / 42.0, 1e-14);
}

TEST(LceLoss, Examples) {
  auto labels = torch::tensor({0, 1, 2}, torch::kLong);
  auto extreme = torch::eye(3, f64()) * 100.0;
  EXPECT_NEAR(value(lce_loss(extreme, labels)), 0.0, 1e-12);
  EXPECT_NEAR(value(lce_loss(torch::zeros({3, 4}, f64()), labels)), std::log(4.0), 1e-12);
  EXPECT_THROW(lce_loss(torch::zeros({3, 2}, f64()), labels), std::invalid_argument);
  EXPECT_THROW(lce_loss(torch::zeros({3, 3}, f64()), torch::tensor({0, -1, 1}, torch::kLong)), std::invalid_argument);
}

TEST(LceLoss, OldHeadRowsGetNoGradient) {
  auto weight = torch::randn({7, 5}, f64()).requires_grad_();
  auto feats = torch::randn({4, 5}, f64());
  auto local = feats.matmul(weight.narrow(0, 4, 3).t());
  lce_loss(local, torch::tensor({0, 2, 1, 1}, torch::kLong)).backward();
  EXPECT_TRUE(weight.grad().narrow(0, 0, 4).eq(0).all().item<bool>());
  EXPECT_GT(weight.grad().narrow(0, 4, 3).abs().sum().item<double>(), 0.0);
}

TEST(AngleCos, Examples) {
  auto v = [](double a, double b) { return torch::tensor({a, b}, f64()); };
  EXPECT_NEAR(value(angle_cos(v(1, 0), v(0, 0), v(0, 1))), 0.0, 1e-15);
  EXPECT_NEAR(value(angle_cos(v(1, 0), v(0, 0), v(2, 0))), 1.0, 1e-15);
  auto c = angle_cos(v(0, 0), v(0, 0), v(1, 0));
  EXPECT_FALSE(std::isnan(value(c)));
  EXPECT_EQ(value(c), 0.0);
}

TEST(AngleCos, MatchesLongDoubleOracle) {
  torch::manual_seed(3);
  for (int rep = 0; rep < 10; ++rep) {
    auto p = torch::randn({3, 8}, f64());
    bool degenerate = false;
    auto r = oracle::rows(p);
    const double expected = static_cast<double>(oracle::cos_at(r[0], r[1], r[2], degenerate, 1e-6L));
    EXPECT_NEAR(value(angle_cos(p[0], p[1], p[2])), expected, 1e-10);
  }
}

TEST(RkdLoss, IdenticalSetsGiveZero) {
  torch::manual_seed(1);
  RelationTransforms tr(6);
  tr->to(torch::kDouble);
  {
    torch::NoGradGuard g;
    tr->psi->weight.copy_(tr->phi->weight);
    tr->psi->bias.copy_(tr->phi->bias);
  }
  auto f = torch::randn({5, 6}, f64());
  EXPECT_NEAR(value(rkd_loss(f, f.clone(), tr)), 0.0, 1e-14);
}

TEST(RkdLoss, StudentScaleInvariance) {
  torch::manual_seed(2);
  RelationTransforms tr(4);
  tr->to(torch::kDouble);
  auto old_f = torch::randn({6, 4}, f64());
  auto new_f = torch::randn({6, 4}, f64());
  // Biases start at zero, so psi is linear.
  EXPECT_NEAR(value(rkd_loss(old_f, new_f, tr)), value(rkd_loss(old_f, new_f * 3.0, tr)), 1e-12);
}

TEST(RkdLoss, MatchesTripleLoopOracle) {
  torch::manual_seed(4);
  for (std::int64_t b : {3, 4, 5, 6}) {
    auto t = torch::randn({b, 5}, f64());
    auto s = torch::randn({b, 3}, f64());
    EXPECT_NEAR(value(rkd_angle_loss(t, s)), oracle::rkd_brute_force(t, s), 1e-12) << "batch " << b;
  }
}

TEST(RkdLoss, DuplicatePointsAreFinite) {
  auto t = torch::randn({5, 4}, f64());
  t[2] = t[1].clone();
  auto s = torch::randn({5, 4}, f64()).requires_grad_();
  auto loss = rkd_angle_loss(t, s);
  loss.backward();
  EXPECT_TRUE(std::isfinite(value(loss)));
  EXPECT_TRUE(torch::isfinite(s.grad()).all().item<bool>());
  EXPECT_NEAR(value(loss), oracle::rkd_brute_force(t, s), 1e-12);
}

TEST(RkdLoss, SampledTripletsAreDeterministicAndClose) {
  torch::manual_seed(5);
  auto t = torch::randn({40, 6}, f64());
  auto s = torch::randn({40, 6}, f64());
  RelationOptions opt;
  opt.max_triplets = 20000;
  opt.seed = 11;
  const double a = value(rkd_angle_loss(t, s, opt));
  EXPECT_EQ(a, value(rkd_angle_loss(t, s, opt)));
  EXPECT_NEAR(a, value(rkd_angle_loss(t, s)), 0.02);
}

TEST(RkdLoss, RejectsSmallBatches) {
  RelationTransforms tr(4);
  auto f = torch::randn({2, 4});
  EXPECT_THROW(rkd_loss(f, f, tr), std::invalid_argument);
}

TEST(RelationTransforms, ShapesAndInit) {
  RelationTransforms tr(8);
  EXPECT_EQ(tr->phi->weight.sizes(), torch::IntArrayRef({16, 8}));
  EXPECT_EQ(tr->psi->weight.sizes(), torch::IntArrayRef({16, 8}));
  EXPECT_TRUE(tr->phi->bias.eq(0).all().item<bool>());
}

TEST(RrlLoss, Examples) {
  auto f = adaptive_factors(50, 10);
  EXPECT_EQ(value(rrl_loss({torch::zeros({}), torch::zeros({}), torch::zeros({})}, f)), 0.0);
  auto one = torch::ones({}, f64());
  EXPECT_NEAR(value(rrl_loss({one, one, one}, f)), f.effective_lce + f.effective_hkd + f.effective_rkd, 1e-12);
  EXPECT_NEAR(value(rrl_loss({one, one, one}, f)), 0.3101097152 + 0.8670227806 + 2.8900759355, 1e-7);
  auto lce = torch::tensor(0.7, f64());
  EXPECT_NEAR(value(rrl_loss({lce, {}, {}}, f)), 0.7 * f.effective_lce, 1e-7);
  EXPECT_EQ(value(rrl_loss({lce, {}, {}}, first_phase_factors())), value(lce));
}

TEST(GceLoss, EqualCountersGiveScaledCe) {
  auto logits = torch::randn({6, 4}, f64());
  auto labels = torch::tensor({0, 1, 2, 3, 1, 2}, torch::kLong);
  auto ce = torch::nn::functional::cross_entropy(logits, labels);
  EXPECT_NEAR(value(gce_loss(logits, labels, {5, 5, 5, 5})), value(ce) / 4.0, 1e-12);
}

TEST(GceLoss, InverseFrequencyWeights) {
  auto logits = torch::randn({4, 2}, f64());
  auto labels = torch::tensor({0, 1, 1, 0}, torch::kLong);
  // w = (1/100, 1/50), normalized to (1/3, 2/3).
  auto lsm = torch::log_softmax(logits, 1);
  double expected = 0;
  for (int i = 0; i < 4; ++i) {
    const auto y = labels[i].item<std::int64_t>();
    expected += (y == 0 ? 1.0 / 3.0 : 2.0 / 3.0) * -lsm[i][y].item<double>();
  }
  EXPECT_NEAR(value(gce_loss(logits, labels, {100, 50})), expected / 4.0, 1e-12);
}

TEST(GceLoss, PerfectLogitsAndErrors) {
  auto labels = torch::tensor({0, 1, 2}, torch::kLong);
  EXPECT_NEAR(value(gce_loss(torch::eye(3, f64()) * 200.0, labels, {3, 9, 1})), 0.0, 1e-12);
  EXPECT_THROW(gce_loss(torch::zeros({3, 3}, f64()), labels, {1, 0, 1}), invalid_state);
  EXPECT_THROW(gce_loss(torch::zeros({3, 3}, f64()), labels, {1, 1}), std::invalid_argument);
}

TEST(ClassCounters, Tallies) {
  ClassCounters c(4);
  c.update(torch::tensor({0, 3, 3, 1}, torch::kLong));
  c.update(torch::tensor({3}, torch::kLong));
  EXPECT_EQ(c.counts(), (std::vector<std::int64_t>{1, 1, 0, 3}));
  EXPECT_THROW(c.update(torch::tensor({4}, torch::kLong)), std::invalid_argument);
}

// Finite-difference checks on a handful of seeds per loss.
class LossGradients : public ::testing::TestWithParam<int> {};

TEST_P(LossGradients, HkdLceGce) {
  torch::manual_seed(GetParam());
  auto t = torch::randn({5, 6}, f64());
  auto s = torch::randn({5, 6}, f64()).requires_grad_();
  hkd_loss(t, s, 6).backward();
  auto fd = oracle::finite_difference([&](const torch::Tensor& x) { return value(hkd_loss(t, x, 6)); }, s);
  EXPECT_LT(oracle::relative_error(s.grad(), fd), 1e-3);

  auto logits = torch::randn({6, 4}, f64()).requires_grad_();
  auto labels = torch::randint(0, 4, {6}, torch::kLong);
  lce_loss(logits, labels).backward();
  fd = oracle::finite_difference([&](const torch::Tensor& x) { return value(lce_loss(x, labels)); }, logits);
  EXPECT_LT(oracle::relative_error(logits.grad(), fd), 1e-3);

  std::vector<std::int64_t> counts{7, 3, 12, 5};
  logits.mutable_grad() = torch::Tensor();
  gce_loss(logits, labels, counts).backward();
  fd = oracle::finite_difference([&](const torch::Tensor& x) { return value(gce_loss(x, labels, counts)); }, logits);
  EXPECT_LT(oracle::relative_error(logits.grad(), fd), 1e-3);
}

TEST_P(LossGradients, RkdThroughTransforms) {
  torch::manual_seed(GetParam());
  RelationTransforms tr(4);
  tr->to(torch::kDouble);
  auto old_f = torch::randn({5, 4}, f64());
  auto new_f = torch::randn({5, 4}, f64()).requires_grad_();
  rkd_loss(old_f, new_f, tr).backward();

  auto fd = oracle::finite_difference([&](const torch::Tensor& x) { return value(rkd_loss(old_f, x, tr)); }, new_f);
  EXPECT_LT(oracle::relative_error(new_f.grad(), fd), 1e-3);

  for (auto* lin : {&tr->phi, &tr->psi}) {
    auto& w = (*lin)->weight;
    auto analytic = w.grad().clone();
    const auto saved = w.detach().clone();
    auto num = oracle::finite_difference(
        [&](const torch::Tensor& x) {
          torch::NoGradGuard g;
          w.copy_(x);
          return value(rkd_loss(old_f, new_f, tr));
        },
        saved);
    {
      torch::NoGradGuard g;
      w.copy_(saved);
    }
    EXPECT_LT(oracle::relative_error(analytic, num), 1e-3);
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, LossGradients, ::testing::Values(1, 2, 3, 4, 5));
