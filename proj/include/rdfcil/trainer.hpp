#pragma once

// Per-phase pipeline.
//
// Phase 1 is ordinary supervised training on the first task. Every later
// phase i runs three stages:
//   1. fit a generator by inverting the frozen model of phase i-1;
//   2. expand the head and train extractor + head + relation transforms with
//      the composite loss (local CE on new data, L1 logit distillation on
//      synthetic data, angle-wise relational distillation on new data);
//   3. freeze the extractor and refine the head with the class-balanced
//      global CE on equal parts new and synthetic data.
// The model is then snapshotted and evaluated on all classes seen so far.
//
// Batch-norm convention during stage 2: new-data forwards run in training
// mode, synthetic-data forwards run in evaluation mode (running statistics),
// which is the mode the frozen teacher and test-time inference use. The two
// halves are back-propagated separately (the loss is a sum of per-half
// terms) because the training-mode forward updates running statistics in
// place.

#include <chrono>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "rdfcil/data.hpp"
#include "rdfcil/errors.hpp"
#include "rdfcil/losses.hpp"
#include "rdfcil/metrics.hpp"
#include "rdfcil/model.hpp"
#include "rdfcil/protocol.hpp"
#include "rdfcil/synthesizer.hpp"

namespace rdfcil {

struct AblationFlags {
  bool no_rkd = false;
  bool no_hkd = false;
  bool no_chr = false;
  bool global_ce = false;    // global CE on new + synthetic data instead of local CE
  bool baseline_kd = false;  // temperature KL instead of L1 logit matching
  bool finetune = false;     // naive fine-tuning: no synthesis, no distillation, no refinement

  std::vector<std::string> enabled() const {
    std::vector<std::string> out;
    if (baseline_kd) out.emplace_back("baseline_kd");
    if (finetune) out.emplace_back("finetune");
    if (global_ce) out.emplace_back("global_ce");
    if (no_chr) out.emplace_back("no_chr");
    if (no_hkd) out.emplace_back("no_hkd");
    if (no_rkd) out.emplace_back("no_rkd");
    return out;
  }
};

struct TrainConfig {
  std::int64_t epochs = 20;
  double lr = 0.1;
  std::vector<std::int64_t> milestones{10, 15};
  double lr_decay = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::int64_t batch_size = 64;
  std::int64_t chr_epochs = 10;
  double chr_lr = 0.005;
  LossBases bases{};
  double kd_tau = 2.0;
  std::int64_t rkd_max_triplets = 100000;
  AblationFlags ablation{};

  void validate() const {
    detail::require(epochs >= 1 && chr_epochs >= 0, "trainer epochs must be positive");
    detail::require(lr > 0 && chr_lr > 0 && lr_decay > 0, "trainer learning rates must be positive");
    detail::require(momentum >= 0 && weight_decay >= 0, "trainer momentum/weight_decay must be >= 0");
    detail::require(batch_size >= 3, "trainer.batch_size must be >= 3");
    detail::require(kd_tau > 0, "trainer.kd_tau must be > 0");
    detail::require(rkd_max_triplets >= 1, "trainer.rkd_max_triplets must be >= 1");
    for (std::size_t i = 1; i < milestones.size(); ++i) {
      detail::require(milestones[i] > milestones[i - 1], "trainer.milestones must be increasing");
    }
  }

  double lr_at(std::int64_t epoch) const {
    double r = lr;
    for (auto m : milestones) {
      if (epoch >= m) r *= lr_decay;
    }
    return r;
  }
};

// Mutable state carried from phase to phase. `phase` counts completed phases;
// `snapshot` is the frozen model at the end of the last completed phase.
struct PhaseState {
  int phase = 0;
  IncrementalClassifier model{nullptr};
  std::optional<ModelSnapshot> snapshot;
  GeneratorNet generator{nullptr};
  RelationTransforms transforms{nullptr};
  std::optional<ScaleFactors> factors;
  ClassCounters counters;
};

inline PhaseState make_initial_state(const BackboneOptions& backbone, std::uint64_t seed) {
  torch::manual_seed(seed);
  PhaseState s;
  s.model = IncrementalClassifier(backbone, std::vector<std::int64_t>{});
  return s;
}

struct PhaseContext {
  const TaskSchedule& schedule;
  const DatasetSplits& data;
  const TrainConfig& train;
  const SynthesisConfig& synth;
  std::uint64_t seed = 0;
  std::function<void(const std::string&)> log;

  void note(const std::string& msg) const {
    if (log) log(msg);
  }
};

// Raw component values plus the weighted total actually optimized.
struct RRLBreakdown {
  double lce = 0.0;
  double hkd = 0.0;
  double rkd = 0.0;
  double weighted_lce = 0.0;
  double weighted_hkd = 0.0;
  double weighted_rkd = 0.0;
  double total = 0.0;
};

struct PhaseResult {
  int phase = 0;
  std::int64_t n_learned_classes = 0;
  double accuracy = 0.0;
  double seconds = 0.0;
  RRLBreakdown rrl_last_epoch{};  // per-step mean over the final RRL epoch
  std::vector<std::int64_t> chr_counts;
  double synthesis_final_loss = 0.0;
};

inline std::uint64_t phase_seed(std::uint64_t seed, int phase) {
  return seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(phase) * 0xBF58476D1CE4E5B9ULL + 1;
}

namespace detail {

inline torch::Generator make_rng(std::uint64_t seed) { return at::make_generator<at::CPUGeneratorImpl>(seed); }

inline void set_lr(torch::optim::SGD& opt, double lr) {
  for (auto& g : opt.param_groups()) static_cast<torch::optim::SGDOptions&>(g.options()).lr(lr);
}

inline torch::optim::SGD make_sgd(std::vector<torch::Tensor> params, double lr, const TrainConfig& cfg) {
  return torch::optim::SGD(std::move(params),
                           torch::optim::SGDOptions(lr).momentum(cfg.momentum).weight_decay(cfg.weight_decay));
}

inline std::vector<torch::Tensor> concat_params(std::vector<torch::Tensor> a, const std::vector<torch::Tensor>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace detail

// Plain cross-entropy over every current class, global labels. Used for the
// first phase and for the naive fine-tuning baseline.
inline void supervised_train(IncrementalClassifier& model, const DatasetView& view, const AugmentOptions& aug,
                             const TrainConfig& cfg, torch::Generator& rng) {
  detail::require(view.mode() == LabelMode::global, "supervised_train expects global labels");
  auto opt = detail::make_sgd(model->parameters(), cfg.lr, cfg);
  model->train();
  for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    detail::set_lr(opt, cfg.lr_at(epoch));
    for (const auto& pos : epoch_batches(view.size(), cfg.batch_size, rng, 2)) {
      auto b = view.batch(pos, aug, rng);
      auto loss = torch::nn::functional::cross_entropy(model->forward(b.images), b.labels);
      detail::require_finite(loss.item<double>(), "supervised training");
      opt.zero_grad();
      loss.backward();
      opt.step();
    }
  }
}

// One representation-learning step on a batch of new-task data (local
// labels) and an equally sized synthetic batch.
inline RRLBreakdown rrl_step(PhaseState& state, const Batch& new_batch, torch::optim::Optimizer& opt,
                             const TrainConfig& cfg, std::int64_t n_prev, std::int64_t n_new,
                             torch::Generator& rng) {
  detail::require_state(state.snapshot.has_value() && !state.generator.is_empty(),
                        "rrl_step: no old snapshot/generator (phase 1 has no representation-learning stage)");
  detail::require_state(state.factors.has_value(), "rrl_step: scale factors not set");
  detail::require_state(!state.transforms.is_empty(), "rrl_step: relation transforms not initialized");
  const auto& ab = cfg.ablation;
  const auto& f = *state.factors;
  auto& model = state.model;
  const auto B = new_batch.images.size(0);
  const auto syn = sample(state.generator, *state.snapshot, B, rng);

  RRLBreakdown out;
  opt.zero_grad();

  // Synthetic half, evaluation-mode batch norm.
  const bool need_syn = !ab.no_hkd || ab.global_ce;
  if (need_syn) {
    model->eval();
    auto feats = model->features(syn.images);
    torch::Tensor part;
    if (!ab.no_hkd) {
      auto student_old = model->head->logits_range(feats, 0, n_prev);
      auto hkd = ab.baseline_kd ? kd_baseline(syn.teacher_logits, student_old, cfg.kd_tau)
                                : hkd_loss(syn.teacher_logits, student_old, n_prev);
      out.hkd = hkd.item<double>();
      out.weighted_hkd = f.effective_hkd * out.hkd;
      part = hkd * f.effective_hkd;
    }
    if (ab.global_ce) {
      // Half of the global CE mean over the 2B-sample union.
      auto ce = torch::nn::functional::cross_entropy(model->head->forward(feats), syn.labels) * 0.5;
      out.lce += ce.item<double>();
      out.weighted_lce += f.effective_lce * ce.item<double>();
      part = part.defined() ? part + ce * f.effective_lce : ce * f.effective_lce;
    }
    if (part.defined() && part.requires_grad()) part.backward();
  }

  // New-data half, training-mode batch norm.
  model->train();
  auto feats_new = model->features(new_batch.images);
  torch::Tensor lce;
  if (ab.global_ce) {
    lce = torch::nn::functional::cross_entropy(model->head->forward(feats_new), new_batch.labels + n_prev) * 0.5;
  } else {
    lce = lce_loss(model->head->logits_range(feats_new, n_prev, n_new), new_batch.labels);
  }
  out.lce += lce.item<double>();
  out.weighted_lce += f.effective_lce * lce.item<double>();
  auto part = lce * f.effective_lce;
  if (!ab.no_rkd) {
    torch::Tensor old_feats;
    {
      torch::NoGradGuard no_grad;
      old_feats = state.snapshot->features(new_batch.images);
    }
    RelationOptions ro;
    ro.max_triplets = cfg.rkd_max_triplets;
    ro.seed = static_cast<std::uint64_t>(
        torch::randint(std::numeric_limits<std::int32_t>::max(), {1}, rng, torch::TensorOptions().dtype(torch::kLong))
            .item<std::int64_t>());
    auto rkd = rkd_loss(old_feats, feats_new, state.transforms, ro);
    out.rkd = rkd.item<double>();
    out.weighted_rkd = f.effective_rkd * out.rkd;
    part = part + rkd * f.effective_rkd;
  }
  out.total = out.weighted_lce + out.weighted_hkd + out.weighted_rkd;
  detail::require_finite(out.total, "representation learning");
  part.backward();
  opt.step();
  return out;
}

// Head refinement with the extractor frozen (evaluation mode, no gradients).
// Returns the per-class counters accumulated over the loop.
inline ClassCounters chr_loop(PhaseState& state, const DatasetView& new_view, const AugmentOptions& aug,
                              const TrainConfig& cfg, torch::Generator& rng) {
  detail::require_state(state.snapshot.has_value() && !state.generator.is_empty(),
                        "chr_loop: no old snapshot/generator");
  detail::require(new_view.mode() == LabelMode::global, "chr_loop expects global labels");
  auto& model = state.model;
  ClassCounters counters(model->class_count());
  auto opt = detail::make_sgd(model->head->parameters(), cfg.chr_lr, cfg);
  model->extractor->eval();
  for (std::int64_t epoch = 0; epoch < cfg.chr_epochs; ++epoch) {
    for (const auto& pos : epoch_batches(new_view.size(), cfg.batch_size, rng, 2)) {
      auto b = new_view.batch(pos, aug, rng);
      auto syn = sample(state.generator, *state.snapshot, b.images.size(0), rng);
      auto labels = torch::cat({b.labels, syn.labels});
      counters.update(labels);
      torch::Tensor feats;
      {
        torch::NoGradGuard no_grad;
        feats = model->extractor->forward(torch::cat({b.images, syn.images}));
      }
      auto loss = gce_loss(model->head->forward(feats), labels, counters.counts());
      detail::require_finite(loss.item<double>(), "head refinement");
      opt.zero_grad();
      loss.backward();
      opt.step();
    }
  }
  model->train();
  state.counters = counters;
  return counters;
}

// Accuracy over a labeled view for any batch predictor.
inline double evaluate_view(const std::function<torch::Tensor(const torch::Tensor&)>& predict_fn,
                            const DatasetView& view, std::int64_t batch_size = 256) {
  AccuracyMeter meter;
  torch::NoGradGuard no_grad;
  for (std::int64_t start = 0; start < view.size(); start += batch_size) {
    const auto len = std::min(batch_size, view.size() - start);
    auto b = view.batch(torch::arange(start, start + len, torch::kLong));
    meter.update(predict_fn(b.images), b.labels);
  }
  return meter.value();
}

// A_i: accuracy on the test data of tasks 1..i, argmax over all learned classes.
inline double evaluate_phase(const ModelSnapshot& model, const TaskSchedule& schedule, const DatasetSplits& data,
                             int i) {
  detail::require(model.class_count() == schedule.learned(i), "evaluate_phase: model has ", model.class_count(),
                  " classes but tasks 1..", i, " have ", schedule.learned(i));
  return evaluate_view([&](const torch::Tensor& x) { return predict(model, x); },
                       cumulative_test_view(schedule, data, i));
}

inline double evaluate_phase(const std::function<torch::Tensor(const torch::Tensor&)>& predict_fn,
                             const TaskSchedule& schedule, const DatasetSplits& data, int i) {
  return evaluate_view(predict_fn, cumulative_test_view(schedule, data, i));
}

// Runs phase `i` (1-based). Phases must run in order.
inline PhaseResult run_phase(PhaseState& state, int i, const PhaseContext& ctx) {
  detail::require_state(i == state.phase + 1, "run_phase: phase ", i, " requested after ", state.phase,
                        " completed phases");
  detail::require_state(!state.model.is_empty(), "run_phase: state has no model");
  ctx.schedule.check_task(i);
  ctx.train.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const auto seed = phase_seed(ctx.seed, i);
  torch::manual_seed(seed);
  auto rng = detail::make_rng(seed);
  const auto& cfg = ctx.train;
  const auto n_prev = ctx.schedule.offset(i);
  const auto n_new = ctx.schedule.size(i);
  detail::require_state(state.model->class_count() == n_prev, "run_phase: model has ", state.model->class_count(),
                        " classes, expected ", n_prev);

  PhaseResult res;
  res.phase = i;
  res.n_learned_classes = n_prev + n_new;

  if (i == 1 || cfg.ablation.finetune) {
    state.model->expand(n_new);
    ctx.note("phase " + std::to_string(i) + ": supervised training on " + std::to_string(n_new) + " classes");
    supervised_train(state.model, task_train_view(ctx.schedule, ctx.data, i, LabelMode::global), ctx.data.augment,
                     cfg, rng);
  } else {
    // Stage 1: synthesizer.
    detail::require_state(state.snapshot.has_value(), "run_phase: missing old snapshot");
    const auto& train_ds = *ctx.data.train;
    auto gen_opts = generator_options_for(train_ds.shape, train_ds.mean, train_ds.stdev, ctx.synth);
    ctx.note("phase " + std::to_string(i) + ": synthesizer training (" + std::to_string(ctx.synth.steps) +
             " steps)");
    auto synth = train_synthesizer(*state.snapshot, gen_opts, ctx.synth, rng);
    state.generator = synth.generator;
    res.synthesis_final_loss = synth.loss_history.empty() ? 0.0 : synth.loss_history.back();

    // Stage 2: representation learning.
    state.model->expand(n_new);
    state.transforms = RelationTransforms(state.model->extractor->embed_dim());
    state.factors = adaptive_factors(n_prev, n_new, cfg.bases);
    auto params = state.model->parameters();
    if (!cfg.ablation.no_rkd) params = detail::concat_params(params, state.transforms->parameters());
    auto opt = detail::make_sgd(params, cfg.lr, cfg);
    auto view = task_train_view(ctx.schedule, ctx.data, i, LabelMode::local);
    ctx.note("phase " + std::to_string(i) + ": representation learning, alpha=" + std::to_string(state.factors->alpha) +
             " beta=" + std::to_string(state.factors->beta));
    for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      detail::set_lr(opt, cfg.lr_at(epoch));
      RRLBreakdown sum;
      int steps = 0;
      for (const auto& pos : epoch_batches(view.size(), cfg.batch_size, rng, 3)) {
        auto b = rrl_step(state, view.batch(pos, ctx.data.augment, rng), opt, cfg, n_prev, n_new, rng);
        sum.lce += b.lce;
        sum.hkd += b.hkd;
        sum.rkd += b.rkd;
        sum.weighted_lce += b.weighted_lce;
        sum.weighted_hkd += b.weighted_hkd;
        sum.weighted_rkd += b.weighted_rkd;
        sum.total += b.total;
        ++steps;
      }
      if (steps > 0 && epoch + 1 == cfg.epochs) {
        const double k = steps;
        res.rrl_last_epoch = {sum.lce / k,          sum.hkd / k,          sum.rkd / k, sum.weighted_lce / k,
                              sum.weighted_hkd / k, sum.weighted_rkd / k, sum.total / k};
      }
    }

    // Stage 3: head refinement.
    if (!cfg.ablation.no_chr && cfg.chr_epochs > 0) {
      ctx.note("phase " + std::to_string(i) + ": head refinement");
      auto counters = chr_loop(state, task_train_view(ctx.schedule, ctx.data, i, LabelMode::global),
                               ctx.data.augment, cfg, rng);
      res.chr_counts = counters.counts();
    }
  }

  state.model->eval();
  state.snapshot.emplace(state.model, i);
  state.model->train();
  state.phase = i;
  res.accuracy = evaluate_phase(*state.snapshot, ctx.schedule, ctx.data, i);
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  ctx.note("phase " + std::to_string(i) + ": A_i=" + std::to_string(res.accuracy));
  return res;
}

// Restores a state from a checkpointed snapshot so the next phase can run.
inline PhaseState resume_state(const ModelSnapshot& snap) {
  PhaseState s;
  s.phase = snap.phase();
  s.model = snap.thaw();
  s.snapshot.emplace(s.model, snap.phase());
  return s;
}

}  // namespace rdfcil
