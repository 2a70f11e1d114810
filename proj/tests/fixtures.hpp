#pragma once

// Small setups shared by the unit tests and the acceptance binary.

#include <cmath>
#include <memory>
#include <vector>

#include "rdfcil/trainer.hpp"

namespace fixture {

using namespace rdfcil;

struct Setup {
  DatasetSplits data;
  TaskSchedule schedule;
  BackboneOptions backbone;
  TrainConfig train;
  SynthesisConfig synth;
};

inline Setup toy_setup(std::int64_t classes = 4, int tasks = 2) {
  Setup s;
  BlobOptions bo;
  bo.n_classes = classes;
  bo.train_per_class = 30;
  bo.test_per_class = 10;
  s.data = make_blobs(bo);
  s.schedule = split_equal(classes, tasks, 0);
  s.backbone.widths = {8, 16};
  s.backbone.blocks = {1, 1};
  s.backbone.input = s.data.train->shape;
  s.train.epochs = 3;
  s.train.lr = 0.05;
  s.train.milestones = {2};
  s.train.batch_size = 16;
  s.train.chr_epochs = 2;
  s.synth.steps = 20;
  s.synth.batch_size = 16;
  s.synth.noise_dim = 16;
  s.synth.width = 16;
  return s;
}

inline PhaseContext context(const Setup& s, std::uint64_t seed = 0) {
  return {s.schedule, s.data, s.train, s.synth, seed, {}};
}

// State just before the first representation-learning step of phase 2.
inline PhaseState prepared_phase2(const Setup& s) {
  auto state = make_initial_state(s.backbone, 0);
  run_phase(state, 1, context(s));
  auto rng = rdfcil::detail::make_rng(5);
  const auto& ds = *s.data.train;
  state.generator =
      train_synthesizer(*state.snapshot, generator_options_for(ds.shape, ds.mean, ds.stdev, s.synth), s.synth, rng)
          .generator;
  state.model->expand(s.schedule.size(2));
  state.transforms = RelationTransforms(state.model->extractor->embed_dim());
  state.factors = adaptive_factors(s.schedule.offset(2), s.schedule.size(2));
  return state;
}

inline Batch first_batch(const Setup& s, int task, LabelMode mode) {
  auto v = task_train_view(s.schedule, s.data, task, mode);
  return v.batch(torch::arange(0, 12, torch::kLong));
}

// Split whose images encode their own index; stubs read it back with decode().
inline DatasetSplits indexed_split(std::int64_t classes, std::int64_t per_class) {
  auto ds = std::make_shared<ImageDataset>();
  ds->name = "indexed";
  ds->n_classes = classes;
  ds->shape = {1, 2, 2};
  ds->mean = {0.0};
  ds->stdev = {1.0 / 255.0};
  const auto n = classes * per_class;
  ds->images = torch::zeros({n, 1, 2, 2}, torch::kUInt8);
  ds->labels = torch::empty({n}, torch::kLong);
  for (std::int64_t i = 0; i < n; ++i) {
    ds->images[i][0][0][0] = i / 256;
    ds->images[i][0][0][1] = i % 256;
    ds->labels[i] = i % classes;
  }
  DatasetSplits d;
  d.train = ds;
  d.test = ds;
  return d;
}

inline std::vector<std::int64_t> decode(const torch::Tensor& x) {
  std::vector<std::int64_t> idx;
  for (std::int64_t i = 0; i < x.size(0); ++i) {
    idx.push_back(std::lround(x[i][0][0][0].item<double>()) * 256 + std::lround(x[i][0][0][1].item<double>()));
  }
  return idx;
}

}  // namespace fixture
