#pragma once

// Incremental classifier: residual feature extractor f, bias-free linear head
// theta with per-task partitions, frozen snapshots and prediction.

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "rdfcil/errors.hpp"

namespace rdfcil {

struct ImageShape {
  std::int64_t channels = 3;
  std::int64_t height = 32;
  std::int64_t width = 32;

  bool operator==(const ImageShape&) const = default;
};

// "cifar" stem: 3x3 conv, stride 1. "imagenet" stem: 7x7 conv stride 2 + max-pool.
// widths/blocks describe the residual stages; widths.back() is the embedding size.
// The desk default is 3 stages of one block each; {5,5,5} with widths {16,32,64}
// gives the 32-layer CIFAR network.
struct BackboneOptions {
  std::string stem = "cifar";
  std::vector<std::int64_t> widths{16, 32, 64};
  std::vector<std::int64_t> blocks{1, 1, 1};
  ImageShape input{};

  std::int64_t embed_dim() const { return widths.empty() ? 0 : widths.back(); }
};

// Running statistics of one batch-norm layer, in layer-depth order.
struct BNStatRecord {
  torch::Tensor mean;
  torch::Tensor var;
};

namespace detail {

inline torch::Tensor through_bn(torch::nn::BatchNorm2d& bn, const torch::Tensor& x,
                                std::vector<torch::Tensor>* captured) {
  if (captured != nullptr) captured->push_back(x);
  return bn->forward(x);
}

}  // namespace detail

class BasicBlockImpl : public torch::nn::Module {
 public:
  BasicBlockImpl(std::int64_t in, std::int64_t out, std::int64_t stride)
      : conv1(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false)),
        bn1(out),
        conv2(torch::nn::Conv2dOptions(out, out, 3).stride(1).padding(1).bias(false)),
        bn2(out) {
    register_module("conv1", conv1);
    register_module("bn1", bn1);
    register_module("conv2", conv2);
    register_module("bn2", bn2);
    if (stride != 1 || in != out) {
      shortcut_conv = register_module(
          "shortcut_conv",
          torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1).stride(stride).bias(false)));
      shortcut_bn = register_module("shortcut_bn", torch::nn::BatchNorm2d(out));
    }
  }

  torch::Tensor forward(const torch::Tensor& x, std::vector<torch::Tensor>* captured = nullptr) {
    auto out = torch::relu(detail::through_bn(bn1, conv1(x), captured));
    out = detail::through_bn(bn2, conv2(out), captured);
    auto skip = x;
    if (shortcut_conv) skip = detail::through_bn(shortcut_bn, shortcut_conv(x), captured);
    return torch::relu(out + skip);
  }

  // Same order as forward() visits them.
  void collect_bn(std::vector<torch::nn::BatchNorm2d>& out) const {
    out.push_back(bn1);
    out.push_back(bn2);
    if (shortcut_bn) out.push_back(shortcut_bn);
  }

  torch::nn::Conv2d conv1;
  torch::nn::BatchNorm2d bn1;
  torch::nn::Conv2d conv2;
  torch::nn::BatchNorm2d bn2;
  torch::nn::Conv2d shortcut_conv{nullptr};
  torch::nn::BatchNorm2d shortcut_bn{nullptr};
};
TORCH_MODULE(BasicBlock);

class FeatureExtractorImpl : public torch::nn::Module {
 public:
  explicit FeatureExtractorImpl(BackboneOptions options) : options_(std::move(options)) {
    detail::require(!options_.widths.empty() && options_.widths.size() == options_.blocks.size(),
                    "backbone widths/blocks must be non-empty and of equal length");
    detail::require(options_.stem == "cifar" || options_.stem == "imagenet",
                    "unknown backbone stem '", options_.stem, "'");
    const auto w0 = options_.widths.front();
    const bool big = options_.stem == "imagenet";
    stem_conv_ = register_module(
        "stem_conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(options_.input.channels, w0, big ? 7 : 3)
                                           .stride(big ? 2 : 1)
                                           .padding(big ? 3 : 1)
                                           .bias(false)));
    stem_bn_ = register_module("stem_bn", torch::nn::BatchNorm2d(w0));
    bn_layers_.push_back(stem_bn_);

    std::int64_t in = w0;
    for (std::size_t s = 0; s < options_.widths.size(); ++s) {
      for (std::int64_t b = 0; b < options_.blocks[s]; ++b) {
        const std::int64_t stride = (s > 0 && b == 0) ? 2 : 1;
        auto block = BasicBlock(in, options_.widths[s], stride);
        register_module("stage" + std::to_string(s) + "_block" + std::to_string(b), block);
        block->collect_bn(bn_layers_);
        blocks_.push_back(block);
        in = options_.widths[s];
      }
    }
  }

  torch::Tensor forward(const torch::Tensor& x, std::vector<torch::Tensor>* captured = nullptr) {
    auto h = torch::relu(detail::through_bn(stem_bn_, stem_conv_(x), captured));
    if (options_.stem == "imagenet") h = torch::max_pool2d(h, 3, 2, 1);
    for (auto& block : blocks_) h = block->forward(h, captured);
    return torch::adaptive_avg_pool2d(h, {1, 1}).flatten(1);
  }

  const BackboneOptions& options() const noexcept { return options_; }
  std::int64_t embed_dim() const noexcept { return options_.embed_dim(); }
  const std::vector<torch::nn::BatchNorm2d>& bn_layers() const noexcept { return bn_layers_; }

 private:
  BackboneOptions options_;
  torch::nn::Conv2d stem_conv_{nullptr};
  torch::nn::BatchNorm2d stem_bn_{nullptr};
  std::vector<BasicBlock> blocks_;
  std::vector<torch::nn::BatchNorm2d> bn_layers_;
};
TORCH_MODULE(FeatureExtractor);

// Bias-free linear head. Row j scores global class j (position in learning
// order); partitions hold the per-task class counts in learning order.
class ClassificationHeadImpl : public torch::nn::Module {
 public:
  ClassificationHeadImpl(std::int64_t embed_dim, std::vector<std::int64_t> partitions)
      : ClassificationHeadImpl(embed_dim, std::move(partitions), torch::Tensor{}) {}

  ClassificationHeadImpl(std::int64_t embed_dim, std::vector<std::int64_t> partitions,
                         torch::Tensor weight)
      : embed_dim_(embed_dim), partitions_(std::move(partitions)) {
    detail::require(embed_dim_ > 0, "head embed_dim must be positive");
    std::int64_t c = 0;
    for (auto k : partitions_) {
      detail::require(k >= 1, "head partition sizes must be >= 1");
      c += k;
    }
    if (!weight.defined()) {
      weight = init_rows(c, embed_dim_);
    } else {
      detail::require(weight.dim() == 2 && weight.size(0) == c && weight.size(1) == embed_dim_,
                      "head weight shape ", weight.sizes(), " does not match (", c, ", ", embed_dim_, ")");
    }
    weight_ = register_parameter("weight", weight);
  }

  // Same scheme for the initial head and for rows appended at expansion.
  static torch::Tensor init_rows(std::int64_t rows, std::int64_t embed_dim) {
    return torch::randn({rows, embed_dim}) * 0.01;
  }

  torch::Tensor forward(const torch::Tensor& features) { return features.matmul(weight_.t()); }

  // Logits of global classes [begin, begin+count). Gradients only reach those rows.
  torch::Tensor logits_range(const torch::Tensor& features, std::int64_t begin, std::int64_t count) {
    detail::require(begin >= 0 && count >= 0 && begin + count <= class_count(), "head range [", begin,
                    ", ", begin + count, ") outside [0, ", class_count(), ")");
    return features.matmul(weight_.narrow(0, begin, count).t());
  }

  std::int64_t class_count() const { return weight_.size(0); }
  std::int64_t embed_dim() const noexcept { return embed_dim_; }
  const std::vector<std::int64_t>& partitions() const noexcept { return partitions_; }

  // [begin, end) per task.
  std::vector<std::pair<std::int64_t, std::int64_t>> task_ranges() const {
    std::vector<std::pair<std::int64_t, std::int64_t>> out;
    std::int64_t begin = 0;
    for (auto k : partitions_) {
      out.emplace_back(begin, begin + k);
      begin += k;
    }
    return out;
  }

  const torch::Tensor& weight() const noexcept { return weight_; }

 private:
  std::int64_t embed_dim_;
  std::vector<std::int64_t> partitions_;
  torch::Tensor weight_;
};
TORCH_MODULE(ClassificationHead);

// Appends k freshly initialized rows and a new partition. The input head is
// left untouched; old rows are copied bit-exactly.
inline ClassificationHead expand_head(const ClassificationHead& head, std::int64_t k) {
  detail::require(k >= 1, "expand_head: new-class count must be >= 1, got ", k);
  torch::NoGradGuard no_grad;
  auto rows = ClassificationHeadImpl::init_rows(k, head->embed_dim())
                  .to(head->weight().dtype());
  auto weight = torch::cat({head->weight().detach().clone(), rows}, 0);
  auto parts = head->partitions();
  parts.push_back(k);
  return ClassificationHead(head->embed_dim(), std::move(parts), std::move(weight));
}

struct ForwardOutput {
  torch::Tensor features;
  torch::Tensor logits;
  std::vector<torch::Tensor> bn_inputs;  // filled only when requested
};

class IncrementalClassifierImpl : public torch::nn::Module {
 public:
  IncrementalClassifierImpl(BackboneOptions backbone, std::vector<std::int64_t> partitions)
      : extractor(FeatureExtractor(std::move(backbone))) {
    register_module("extractor", extractor);
    head = register_module("head", ClassificationHead(extractor->embed_dim(), std::move(partitions)));
  }

  void check_input(const torch::Tensor& x) const {
    const auto& in = extractor->options().input;
    detail::require(x.dim() == 4 && x.size(1) == in.channels && x.size(2) == in.height &&
                        x.size(3) == in.width,
                    "input batch shape ", x.sizes(), " does not match (N, ", in.channels, ", ",
                    in.height, ", ", in.width, ")");
  }

  torch::Tensor forward(const torch::Tensor& x) { return head->forward(features(x)); }

  torch::Tensor features(const torch::Tensor& x) {
    check_input(x);
    return extractor->forward(x);
  }

  ForwardOutput forward_all(const torch::Tensor& x, bool capture_bn = false) {
    check_input(x);
    ForwardOutput out;
    out.features = extractor->forward(x, capture_bn ? &out.bn_inputs : nullptr);
    out.logits = head->forward(out.features);
    return out;
  }

  void expand(std::int64_t k) { head = replace_module("head", expand_head(head, k)); }

  std::int64_t class_count() const { return head->class_count(); }
  const BackboneOptions& backbone() const noexcept { return extractor->options(); }

  FeatureExtractor extractor;
  ClassificationHead head{nullptr};
};
TORCH_MODULE(IncrementalClassifier);

// Copies every parameter and buffer (including batch-norm running statistics).
inline void copy_state(const torch::nn::Module& from, torch::nn::Module& to) {
  torch::NoGradGuard no_grad;
  auto src_p = from.named_parameters(true);
  auto dst_p = to.named_parameters(true);
  detail::require(src_p.size() == dst_p.size(), "copy_state: parameter count mismatch");
  for (auto& p : dst_p) p.value().copy_(src_p[p.key()]);
  auto src_b = from.named_buffers(true);
  auto dst_b = to.named_buffers(true);
  detail::require(src_b.size() == dst_b.size(), "copy_state: buffer count mismatch");
  for (auto& b : dst_b) b.value().copy_(src_b[b.key()]);
}

inline IncrementalClassifier clone_model(const IncrementalClassifier& model) {
  IncrementalClassifier copy(model->backbone(), model->head->partitions());
  auto dtype = model->head->weight().scalar_type();
  copy->to(dtype);
  copy_state(*model, *copy);
  copy->train(model->is_training());
  return copy;
}

// Argmax per row; ties resolve to the lowest class index.
inline torch::Tensor argmax_lowest(const torch::Tensor& logits) {
  detail::require(logits.dim() == 2 && logits.size(1) >= 1, "predict: logits must be (N, c>=1), got ",
                  logits.sizes());
  auto maxv = std::get<0>(logits.max(1, /*keepdim=*/true));
  auto idx = torch::arange(logits.size(1), torch::TensorOptions().dtype(torch::kLong))
                 .unsqueeze(0)
                 .expand_as(logits);
  auto masked = torch::where(logits == maxv, idx, torch::full_like(idx, logits.size(1)));
  return std::get<0>(masked.min(1));
}

// Frozen copy of (extractor, head) at the end of a phase. Evaluation mode,
// parameters detached from autograd. Gradients may still flow to the *input*,
// which is what model inversion needs.
class ModelSnapshot {
 public:
  ModelSnapshot(const IncrementalClassifier& live, int phase) : phase_(phase), model_(clone_model(live)) {
    model_->eval();
    for (auto& p : model_->parameters()) p.set_requires_grad(false);
  }

  int phase() const noexcept { return phase_; }
  std::int64_t class_count() const { return model_->class_count(); }
  const BackboneOptions& backbone() const noexcept { return model_->backbone(); }
  const std::vector<std::int64_t>& partitions() const { return model_->head->partitions(); }

  // Forward never touches running statistics (eval mode) and never records
  // gradients for the snapshot's own parameters.
  torch::Tensor logits(const torch::Tensor& x) const { return impl().forward(x); }
  torch::Tensor features(const torch::Tensor& x) const { return impl().features(x); }
  ForwardOutput forward_all(const torch::Tensor& x, bool capture_bn = false) const {
    return impl().forward_all(x, capture_bn);
  }

  std::vector<BNStatRecord> bn_records() const {
    std::vector<BNStatRecord> out;
    for (const auto& bn : model_->extractor->bn_layers()) {
      if (!bn->running_mean.defined() || !bn->running_var.defined()) continue;
      out.push_back({bn->running_mean.detach().clone(), bn->running_var.detach().clone()});
    }
    return out;
  }

  // Read-only access for fingerprints and checkpointing.
  const torch::nn::Module& module() const { return *model_; }
  // Fresh trainable copy (e.g. to resume training from a checkpointed phase).
  IncrementalClassifier thaw() const {
    auto m = clone_model(model_);
    for (auto& p : m->parameters()) p.set_requires_grad(true);
    m->train();
    return m;
  }

 private:
  IncrementalClassifierImpl& impl() const { return *model_.ptr(); }

  int phase_;
  IncrementalClassifier model_;
};

inline torch::Tensor predict(IncrementalClassifier& model, const torch::Tensor& x) {
  torch::NoGradGuard no_grad;
  return argmax_lowest(model->forward(x));
}

inline torch::Tensor predict(const ModelSnapshot& snap, const torch::Tensor& x) {
  torch::NoGradGuard no_grad;
  return argmax_lowest(snap.logits(x));
}

inline std::int64_t parameter_count(const torch::nn::Module& m) {
  std::int64_t n = 0;
  for (const auto& p : m.parameters()) n += p.numel();
  return n;
}

}  // namespace rdfcil
