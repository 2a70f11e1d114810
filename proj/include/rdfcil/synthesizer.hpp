#pragma once

// Data-free synthesis of old-class images. A generator is fitted by inverting
// the frozen previous model: balanced predictions, confident predictions,
// batch-norm statistic matching and a smoothness prior. The trained generator
// then serves labeled synthetic batches to the representation-learning and
// head-refinement stages.

#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "rdfcil/errors.hpp"
#include "rdfcil/model.hpp"

namespace rdfcil {

struct SynthesisWeights {
  double diversity = 1.0;
  double content = 1.0;
  double stat = 5.0;
  double prior = 0.001;
};

struct SynthesisConfig {
  std::int64_t steps = 5000;
  std::int64_t batch_size = 128;
  double lr = 1e-3;
  double temp = 1000.0;  // content-loss temperature
  SynthesisWeights weights{};
  std::int64_t noise_dim = 256;
  std::int64_t width = 64;

  void validate() const {
    detail::require(steps > 0, "synthesizer.steps must be > 0");
    detail::require(batch_size >= 2, "synthesizer.batch_size must be >= 2");
    detail::require(lr > 0, "synthesizer.lr must be > 0");
    detail::require(temp > 0, "synthesizer.temp must be > 0");
    detail::require(weights.diversity >= 0 && weights.content >= 0 && weights.stat >= 0 && weights.prior >= 0,
                    "synthesizer weights must be >= 0");
    detail::require(noise_dim >= 1 && width >= 4, "synthesizer noise_dim/width too small");
  }
};

// Generated pixels are mapped into [low[c], high[c]] per channel, the range
// that normalized real images occupy.
struct GeneratorOptions {
  std::int64_t noise_dim = 256;
  std::int64_t width = 64;
  ImageShape output{};
  std::vector<double> low;
  std::vector<double> high;
};

// Range of ((0 - mean) / std, (1 - mean) / std) for each channel.
inline GeneratorOptions generator_options_for(const ImageShape& shape, const std::vector<double>& mean,
                                              const std::vector<double>& stdev, const SynthesisConfig& cfg) {
  detail::require(static_cast<std::int64_t>(mean.size()) == shape.channels &&
                      static_cast<std::int64_t>(stdev.size()) == shape.channels,
                  "generator: per-channel mean/std size does not match channel count");
  GeneratorOptions o;
  o.noise_dim = cfg.noise_dim;
  o.width = cfg.width;
  o.output = shape;
  for (std::size_t c = 0; c < mean.size(); ++c) {
    o.low.push_back((0.0 - mean[c]) / stdev[c]);
    o.high.push_back((1.0 - mean[c]) / stdev[c]);
  }
  return o;
}

// Linear projection to an (h/8, w/8) map, three upsample+conv+BN+LeakyReLU
// blocks, a final conv and a tanh rescaled into the normalized pixel range.
class GeneratorNetImpl : public torch::nn::Module {
 public:
  explicit GeneratorNetImpl(GeneratorOptions options) : options_(std::move(options)) {
    const auto& out = options_.output;
    detail::require(out.height % 8 == 0 && out.width % 8 == 0 && out.height > 0 && out.width > 0,
                    "generator: output height/width must be positive multiples of 8, got ", out.height, "x",
                    out.width);
    detail::require(static_cast<std::int64_t>(options_.low.size()) == out.channels &&
                        options_.high.size() == options_.low.size(),
                    "generator: pixel range must have one entry per channel");
    const auto w = options_.width;
    const std::int64_t h0 = out.height / 8, w0 = out.width / 8;
    fc_ = register_module("fc", torch::nn::Linear(options_.noise_dim, w * h0 * w0));
    bn0_ = register_module("bn0", torch::nn::BatchNorm2d(w));
    const std::vector<std::int64_t> chans{w, w, w / 2, w / 2};
    for (int i = 0; i < 3; ++i) {
      auto conv = torch::nn::Conv2d(torch::nn::Conv2dOptions(chans[i], chans[i + 1], 3).padding(1));
      auto bn = torch::nn::BatchNorm2d(chans[i + 1]);
      convs_.push_back(register_module("conv" + std::to_string(i), conv));
      bns_.push_back(register_module("bn" + std::to_string(i + 1), bn));
    }
    out_conv_ = register_module(
        "out_conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(chans.back(), out.channels, 3).padding(1)));

    auto lo = torch::tensor(options_.low, torch::kFloat).view({1, -1, 1, 1});
    auto hi = torch::tensor(options_.high, torch::kFloat).view({1, -1, 1, 1});
    center_ = register_buffer("center", (hi + lo) / 2);
    half_span_ = register_buffer("half_span", (hi - lo) / 2);
  }

  torch::Tensor forward(const torch::Tensor& z) {
    const auto& out = options_.output;
    auto h = fc_(z).view({z.size(0), options_.width, out.height / 8, out.width / 8});
    h = bn0_(h);
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      h = torch::nn::functional::interpolate(
          h, torch::nn::functional::InterpolateFuncOptions()
                 .scale_factor(std::vector<double>{2.0, 2.0})
                 .mode(torch::kNearest));
      h = torch::leaky_relu(bns_[i](convs_[i](h)), 0.2);
    }
    return center_ + half_span_ * torch::tanh(out_conv_(h));
  }

  const GeneratorOptions& options() const noexcept { return options_; }

 private:
  GeneratorOptions options_;
  torch::nn::Linear fc_{nullptr};
  torch::nn::BatchNorm2d bn0_{nullptr};
  std::vector<torch::nn::Conv2d> convs_;
  std::vector<torch::nn::BatchNorm2d> bns_;
  torch::nn::Conv2d out_conv_{nullptr};
  torch::Tensor center_;
  torch::Tensor half_span_;
};
TORCH_MODULE(GeneratorNet);

// ---------------------------------------------------------------------------
// Objectives

// Cross-entropy between the uniform distribution and the batch-mean softmax:
// -(1/K) sum_k log(mean_i p_ik). Minimum ln K at a uniform batch average.
inline torch::Tensor label_diversity_loss(const torch::Tensor& logits) {
  detail::require(logits.dim() == 2 && logits.size(0) >= 1 && logits.size(1) >= 1,
                  "label_diversity_loss: expected (N, K) logits, got ", logits.sizes());
  const auto n = static_cast<double>(logits.size(0));
  auto log_mean = torch::logsumexp(torch::log_softmax(logits, 1), 0) - std::log(n);
  return -log_mean.mean();
}

inline torch::Tensor content_loss(const torch::Tensor& logits, const torch::Tensor& labels, double temp) {
  detail::require(temp > 0, "content_loss: temperature must be positive, got ", temp);
  detail::require(logits.dim() == 2 && labels.dim() == 1 && logits.size(0) == labels.size(0),
                  "content_loss: shape mismatch ", logits.sizes(), " vs ", labels.sizes());
  return torch::nn::functional::cross_entropy(logits / temp, labels.to(torch::kLong));
}

// Per-channel mean and biased variance of each captured batch-norm input.
inline std::vector<BNStatRecord> batch_feature_stats(const std::vector<torch::Tensor>& bn_inputs) {
  std::vector<BNStatRecord> out;
  out.reserve(bn_inputs.size());
  for (const auto& x : bn_inputs) {
    auto flat = x.transpose(0, 1).reshape({x.size(1), -1});
    out.push_back({flat.mean(1), flat.var(1, /*unbiased=*/false) + 1e-8});
  }
  return out;
}

// Sum over layers of KL(N(mu_bn, var_bn) || N(mu_syn, var_syn)), averaged
// over channels within each layer.
inline torch::Tensor stat_alignment_loss(const std::vector<BNStatRecord>& synthetic,
                                         const std::vector<BNStatRecord>& records) {
  detail::require(synthetic.size() == records.size(), "stat_alignment_loss: ", synthetic.size(),
                  " synthetic layers vs ", records.size(), " batch-norm records");
  detail::require(!records.empty(), "stat_alignment_loss: no layers");
  torch::Tensor total;
  for (std::size_t l = 0; l < records.size(); ++l) {
    const auto& syn = synthetic[l];
    const auto& bn = records[l];
    detail::require(syn.mean.sizes() == bn.mean.sizes() && syn.var.sizes() == bn.var.sizes() &&
                        syn.mean.sizes() == syn.var.sizes(),
                    "stat_alignment_loss: layer ", l, " statistic shapes differ");
    detail::require_state(syn.var.min().item<double>() > 0, "stat_alignment_loss: layer ", l,
                          " has a nonpositive synthetic variance");
    detail::require_state(bn.var.min().item<double>() > 0, "stat_alignment_loss: layer ", l,
                          " has a nonpositive recorded variance");
    auto bn_mean = bn.mean.detach().to(syn.mean.dtype());
    auto bn_var = bn.var.detach().to(syn.var.dtype());
    auto kl = 0.5 * (torch::log(syn.var / bn_var) + (bn_var + (bn_mean - syn.mean).pow(2)) / syn.var - 1.0);
    total = total.defined() ? total + kl.mean() : kl.mean();
  }
  return total;
}

// Anisotropic total variation plus 1e-2 * squared L2 norm, per image, averaged
// over the batch.
inline torch::Tensor image_prior_loss(const torch::Tensor& images) {
  detail::require(images.dim() == 4 && images.size(0) >= 1, "image_prior_loss: expected (N, C, H, W), got ",
                  images.sizes());
  const auto n = static_cast<double>(images.size(0));
  auto dy = (images.narrow(2, 1, images.size(2) - 1) - images.narrow(2, 0, images.size(2) - 1)).abs().sum();
  auto dx = (images.narrow(3, 1, images.size(3) - 1) - images.narrow(3, 0, images.size(3) - 1)).abs().sum();
  auto l2 = images.pow(2).sum();
  return (dx + dy + 1e-2 * l2) / n;
}

struct SynthesisLosses {
  torch::Tensor diversity;
  torch::Tensor content;
  torch::Tensor stat;
  torch::Tensor prior;
  torch::Tensor total;
};

inline SynthesisLosses synthesis_objective(const ModelSnapshot& teacher, const torch::Tensor& images,
                                           const std::vector<BNStatRecord>& records,
                                           const SynthesisConfig& cfg) {
  auto out = teacher.forward_all(images, /*capture_bn=*/true);
  SynthesisLosses l;
  l.diversity = label_diversity_loss(out.logits);
  l.content = content_loss(out.logits, argmax_lowest(out.logits.detach()), cfg.temp);
  l.stat = stat_alignment_loss(batch_feature_stats(out.bn_inputs), records);
  l.prior = image_prior_loss(images);
  l.total = cfg.weights.diversity * l.diversity + cfg.weights.content * l.content + cfg.weights.stat * l.stat +
            cfg.weights.prior * l.prior;
  return l;
}

struct SynthesisResult {
  GeneratorNet generator{nullptr};
  std::vector<double> loss_history;  // total objective per step
};

// Fits a fresh generator against the frozen teacher with Adam. The teacher's
// parameters and running statistics are never modified.
inline SynthesisResult train_synthesizer(const ModelSnapshot& teacher, const GeneratorOptions& gen_options,
                                         const SynthesisConfig& cfg, torch::Generator& rng) {
  cfg.validate();
  detail::require(teacher.partitions().size() >= 1, "train_synthesizer: teacher covers no task");
  const auto records = teacher.bn_records();
  detail::require_state(!records.empty(), "train_synthesizer: teacher has no batch-norm statistics");
  detail::require(gen_options.output == teacher.backbone().input,
                  "train_synthesizer: generator output shape differs from the teacher input shape");

  SynthesisResult result{GeneratorNet(gen_options), {}};
  auto& gen = result.generator;
  gen->train();
  torch::optim::Adam opt(gen->parameters(), torch::optim::AdamOptions(cfg.lr));
  result.loss_history.reserve(static_cast<std::size_t>(cfg.steps));
  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    auto z = torch::randn({cfg.batch_size, gen_options.noise_dim}, rng, torch::TensorOptions());
    auto losses = synthesis_objective(teacher, gen->forward(z), records, cfg);
    const double total = losses.total.item<double>();
    detail::require_finite(total, "synthesizer training");
    opt.zero_grad();
    losses.total.backward();
    opt.step();
    result.loss_history.push_back(total);
  }
  gen->eval();
  return result;
}

struct SyntheticBatch {
  torch::Tensor images;
  torch::Tensor labels;          // teacher argmax, in [0, teacher classes)
  torch::Tensor teacher_logits;  // teacher outputs on images
};

inline SyntheticBatch sample(GeneratorNet& generator, const ModelSnapshot& teacher, std::int64_t n,
                             torch::Generator& rng) {
  detail::require(n >= 1, "sample: n must be >= 1, got ", n);
  torch::NoGradGuard no_grad;
  generator->eval();
  SyntheticBatch b;
  auto z = torch::randn({n, generator->options().noise_dim}, rng, torch::TensorOptions());
  b.images = generator->forward(z);
  b.teacher_logits = teacher.logits(b.images);
  b.labels = argmax_lowest(b.teacher_logits);
  return b;
}

}  // namespace rdfcil
