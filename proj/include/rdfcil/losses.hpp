#pragma once

// Representation-learning and head-refinement objectives:
//   kd_baseline   temperature-softened KL between old and current old-class logits
//   hkd_loss      L1 match of old-class logits on synthetic data
//   lce_loss      cross-entropy over the new task's classifiers only
//   rkd_loss      angle-wise relational distillation through learnable transforms
//   gce_loss      class-balanced global cross-entropy used during head refinement
// plus the phase-adaptive scale factors that weight the first three.
//
// All functions are dtype-generic; the gradient tests run them in double.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include <torch/torch.h>

#include "rdfcil/errors.hpp"

namespace rdfcil {

// ---------------------------------------------------------------------------
// Scale factors

struct LossBases {
  double lce = 0.5;
  double hkd = 0.15;
  double rkd = 0.5;
};

struct ScaleFactors {
  LossBases bases{};
  double alpha = 1.0;  // log2(|new|/2 + 1): amount of new knowledge
  double beta = 1.0;   // sqrt(|prev|/|new|): difficulty of keeping old knowledge
  double effective_lce = 0.0;
  double effective_hkd = 0.0;
  double effective_rkd = 0.0;
};

inline ScaleFactors adaptive_factors(std::int64_t n_prev_classes, std::int64_t n_new_classes,
                                     const LossBases& bases = {}) {
  detail::require(n_prev_classes >= 1, "adaptive_factors: need at least one previous class, got ",
                  n_prev_classes);
  detail::require(n_new_classes >= 2, "adaptive_factors: need at least two new classes, got ",
                  n_new_classes);
  detail::require(bases.lce >= 0 && bases.hkd >= 0 && bases.rkd >= 0,
                  "adaptive_factors: base weights must be nonnegative");
  ScaleFactors f;
  f.bases = bases;
  f.alpha = std::log2(static_cast<double>(n_new_classes) / 2.0 + 1.0);
  f.beta = std::sqrt(static_cast<double>(n_prev_classes) / static_cast<double>(n_new_classes));
  f.effective_lce = (1.0 + 1.0 / f.alpha) / f.beta * bases.lce;
  f.effective_hkd = f.alpha * f.beta * bases.hkd;
  f.effective_rkd = f.alpha * f.beta * bases.rkd;
  return f;
}

// Phase 1 has no previous classes: the composite loss is the plain CE term.
inline ScaleFactors first_phase_factors(const LossBases& bases = {}) {
  ScaleFactors f;
  f.bases = bases;
  f.effective_lce = 1.0;
  return f;
}

// ---------------------------------------------------------------------------
// Logit distillation

inline torch::Tensor kd_baseline(const torch::Tensor& old_logits, const torch::Tensor& new_logits,
                                 double tau = 2.0) {
  detail::require(tau > 0, "kd_baseline: temperature must be positive, got ", tau);
  detail::require(old_logits.dim() == 2 && old_logits.sizes() == new_logits.sizes(),
                  "kd_baseline: shape mismatch ", old_logits.sizes(), " vs ", new_logits.sizes());
  auto log_p = torch::log_softmax(old_logits.detach() / tau, 1);
  auto log_q = torch::log_softmax(new_logits / tau, 1);
  return (log_p.exp() * (log_p - log_q)).sum(1).mean();
}

inline torch::Tensor hkd_loss(const torch::Tensor& teacher_old_logits,
                              const torch::Tensor& student_old_logits, std::int64_t n_old_classes) {
  detail::require(teacher_old_logits.dim() == 2 && teacher_old_logits.sizes() == student_old_logits.sizes(),
                  "hkd_loss: shape mismatch ", teacher_old_logits.sizes(), " vs ",
                  student_old_logits.sizes());
  detail::require(teacher_old_logits.size(1) == n_old_classes, "hkd_loss: expected ", n_old_classes,
                  " old-class columns, got ", teacher_old_logits.size(1));
  detail::require(teacher_old_logits.size(0) >= 1, "hkd_loss: empty batch");
  return (student_old_logits - teacher_old_logits.detach()).abs().sum() /
         static_cast<double>(teacher_old_logits.size(0) * n_old_classes);
}

// ---------------------------------------------------------------------------
// Classification

// new_logits_local: logits of the new task's classifiers only (N, |T_new|).
inline torch::Tensor lce_loss(const torch::Tensor& new_logits_local, const torch::Tensor& local_labels) {
  detail::require(new_logits_local.dim() == 2 && local_labels.dim() == 1 &&
                      new_logits_local.size(0) == local_labels.size(0),
                  "lce_loss: shape mismatch ", new_logits_local.sizes(), " vs ", local_labels.sizes());
  if (local_labels.numel() > 0) {
    const auto lo = local_labels.min().item<std::int64_t>();
    const auto hi = local_labels.max().item<std::int64_t>();
    detail::require(lo >= 0 && hi < new_logits_local.size(1), "lce_loss: local label range [", lo, ", ",
                    hi, "] outside [0, ", new_logits_local.size(1), ")");
  }
  return torch::nn::functional::cross_entropy(new_logits_local, local_labels);
}

// Running per-class sample counts for the class-balanced loss.
class ClassCounters {
 public:
  explicit ClassCounters(std::int64_t n_classes = 0) : counts_(static_cast<std::size_t>(n_classes), 0) {}

  void update(const torch::Tensor& labels) {
    auto l = labels.to(torch::kLong).contiguous().cpu();
    const auto* p = l.data_ptr<std::int64_t>();
    for (std::int64_t i = 0; i < l.numel(); ++i) {
      detail::require(p[i] >= 0 && p[i] < size(), "ClassCounters: label ", p[i], " outside [0, ",
                      size(), ")");
      ++counts_[static_cast<std::size_t>(p[i])];
    }
  }

  std::int64_t size() const noexcept { return static_cast<std::int64_t>(counts_.size()); }
  std::int64_t operator[](std::int64_t c) const { return counts_.at(static_cast<std::size_t>(c)); }
  const std::vector<std::int64_t>& counts() const noexcept { return counts_; }

 private:
  std::vector<std::int64_t> counts_;
};

// Per-sample CE weighted by w_y / sum_j w_j, w_y = 1/count_y, averaged over
// the batch. Classes that have not been presented yet (count 0) carry no
// weight in the normalizer.
inline torch::Tensor gce_loss(const torch::Tensor& all_logits, const torch::Tensor& global_labels,
                              const std::vector<std::int64_t>& class_counts) {
  detail::require(all_logits.dim() == 2 && global_labels.dim() == 1 &&
                      all_logits.size(0) == global_labels.size(0) && all_logits.size(0) >= 1,
                  "gce_loss: shape mismatch ", all_logits.sizes(), " vs ", global_labels.sizes());
  const auto c = all_logits.size(1);
  detail::require(static_cast<std::int64_t>(class_counts.size()) == c, "gce_loss: ", class_counts.size(),
                  " counters for ", c, " classes");
  std::vector<double> w(static_cast<std::size_t>(c), 0.0);
  double total = 0.0;
  for (std::size_t j = 0; j < w.size(); ++j) {
    if (class_counts[j] > 0) {
      w[j] = 1.0 / static_cast<double>(class_counts[j]);
      total += w[j];
    }
  }
  auto labels = global_labels.to(torch::kLong).contiguous().cpu();
  const auto* lp = labels.data_ptr<std::int64_t>();
  std::vector<double> sample_w(static_cast<std::size_t>(labels.numel()));
  for (std::int64_t i = 0; i < labels.numel(); ++i) {
    detail::require(lp[i] >= 0 && lp[i] < c, "gce_loss: label ", lp[i], " outside [0, ", c, ")");
    detail::require_state(class_counts[static_cast<std::size_t>(lp[i])] > 0,
                          "gce_loss: class ", lp[i], " is in the batch but its counter is zero");
    sample_w[static_cast<std::size_t>(i)] = w[static_cast<std::size_t>(lp[i])] / total;
  }
  auto weights = torch::tensor(sample_w, all_logits.options().requires_grad(false));
  auto ce = torch::nn::functional::cross_entropy(
      all_logits, global_labels.to(torch::kLong),
      torch::nn::functional::CrossEntropyFuncOptions().reduction(torch::kNone));
  return (weights * ce).mean();
}

// ---------------------------------------------------------------------------
// Relational distillation

struct RelationOptions {
  // Norms below this floor are replaced by it when forming unit edges.
  double norm_floor = 1e-8;
  // Triplets with any edge (teacher or student) shorter than this contribute zero.
  double min_edge = 1e-6;
  // Full enumeration when the admissible triplet count is at most this;
  // otherwise this many triplets are sampled uniformly (with replacement).
  std::int64_t max_triplets = 100000;
  std::uint64_t seed = 0;
};

// cos of the angle at r_b in the triangle (r_a, r_b, r_c), clamped to [-1, 1].
// Degenerate edges (shorter than min_edge) yield 0.
inline torch::Tensor angle_cos(const torch::Tensor& r_a, const torch::Tensor& r_b, const torch::Tensor& r_c,
                               const RelationOptions& opt = {}) {
  detail::require(r_a.dim() == 1 && r_a.sizes() == r_b.sizes() && r_b.sizes() == r_c.sizes(),
                  "angle_cos: expected three vectors of equal dimension");
  auto ab = r_a - r_b;
  auto cb = r_c - r_b;
  auto n_ab = ab.norm();
  auto n_cb = cb.norm();
  if (n_ab.item<double>() < opt.min_edge || n_cb.item<double>() < opt.min_edge) {
    return torch::zeros({}, r_a.options());
  }
  auto e_ab = ab / n_ab.clamp_min(opt.norm_floor);
  auto e_cb = cb / n_cb.clamp_min(opt.norm_floor);
  return (e_ab * e_cb).sum().clamp(-1.0, 1.0);
}

struct RelationAngles {
  torch::Tensor cos;         // (B, B, B) indexed [b][a][c]: angle at vertex b
  torch::Tensor edge_valid;  // (B, B) bool, edge (a, b) long enough
};

// All triplet angle cosines of a point set in one batched product.
inline RelationAngles relation_angles(const torch::Tensor& points, const RelationOptions& opt = {}) {
  detail::require(points.dim() == 2, "relation_angles: expected (B, D) points, got ", points.sizes());
  auto diff = points.unsqueeze(1) - points.unsqueeze(0);  // [a][b] = p_a - p_b
  // Clamp before sqrt keeps the zero diagonal differentiable.
  auto norm = (diff * diff).sum(-1).clamp_min(opt.norm_floor * opt.norm_floor).sqrt();
  auto unit = diff / norm.unsqueeze(-1);
  auto by_vertex = unit.transpose(0, 1);  // [b][a] = e^{ab}
  RelationAngles out;
  out.cos = torch::bmm(by_vertex, by_vertex.transpose(1, 2)).clamp(-1.0, 1.0);
  out.edge_valid = norm.detach() >= opt.min_edge;
  return out;
}

inline std::int64_t admissible_triplets(std::int64_t batch) {
  return batch < 3 ? 0 : batch * (batch - 1) * (batch - 2);
}

// Mean over pairwise-distinct triplets of |cos(t) - cos(s)| for two point
// sets of equal batch size (dimensions may differ).
inline torch::Tensor rkd_angle_loss(const torch::Tensor& teacher_points, const torch::Tensor& student_points,
                                    const RelationOptions& opt = {}) {
  detail::require(teacher_points.dim() == 2 && student_points.dim() == 2 &&
                      teacher_points.size(0) == student_points.size(0),
                  "rkd_loss: teacher ", teacher_points.sizes(), " and student ", student_points.sizes(),
                  " batches differ");
  const auto B = teacher_points.size(0);
  detail::require(B >= 3, "rkd_loss: batch size must be >= 3, got ", B);

  auto t = relation_angles(teacher_points, opt);
  auto s = relation_angles(student_points, opt);
  auto edges = t.edge_valid & s.edge_valid;                                    // [x][y]
  auto ev = edges.transpose(0, 1);                                             // [b][a]
  auto valid = ev.unsqueeze(2) & ev.unsqueeze(1);                              // [b][a][c]
  auto eye = torch::eye(B, torch::TensorOptions().dtype(torch::kBool));
  valid = valid & ~eye.unsqueeze(0) & ~eye.unsqueeze(2) & ~eye.unsqueeze(1);  // a!=b, b!=c, a!=c
  auto diff = (t.cos - s.cos).abs() * valid.to(t.cos.dtype());

  const auto total = admissible_triplets(B);
  if (total <= opt.max_triplets) return diff.sum() / static_cast<double>(total);

  // Uniform sampling of distinct-index triplets.
  std::mt19937_64 rng(opt.seed);
  std::vector<std::int64_t> flat;
  flat.reserve(static_cast<std::size_t>(opt.max_triplets));
  std::uniform_int_distribution<std::int64_t> pick(0, B - 1);
  while (static_cast<std::int64_t>(flat.size()) < opt.max_triplets) {
    const auto a = pick(rng), b = pick(rng), c = pick(rng);
    if (a == b || b == c || a == c) continue;
    flat.push_back((b * B + a) * B + c);
  }
  auto idx = torch::tensor(flat, torch::TensorOptions().dtype(torch::kLong));
  return diff.reshape({-1}).index_select(0, idx).mean();
}

// phi maps old-model features, psi maps current-model features; both d -> 2d, affine.
class RelationTransformsImpl : public torch::nn::Module {
 public:
  explicit RelationTransformsImpl(std::int64_t embed_dim)
      : phi(torch::nn::LinearOptions(embed_dim, 2 * embed_dim).bias(true)),
        psi(torch::nn::LinearOptions(embed_dim, 2 * embed_dim).bias(true)) {
    register_module("phi", phi);
    register_module("psi", psi);
    torch::NoGradGuard no_grad;
    const double std = 1.0 / std::sqrt(static_cast<double>(embed_dim));
    for (auto* l : {&phi, &psi}) {
      (*l)->weight.normal_(0.0, std);
      (*l)->bias.zero_();
    }
  }

  torch::nn::Linear phi;
  torch::nn::Linear psi;
};
TORCH_MODULE(RelationTransforms);

// t_k = phi(f_old(x_k)), s_k = psi(f(x_k)). Old features are detached.
inline torch::Tensor rkd_loss(const torch::Tensor& old_features, const torch::Tensor& new_features,
                              RelationTransforms& transforms, const RelationOptions& opt = {}) {
  detail::require(old_features.dim() == 2 && old_features.sizes() == new_features.sizes(),
                  "rkd_loss: feature shape mismatch ", old_features.sizes(), " vs ", new_features.sizes());
  detail::require(old_features.size(0) >= 3, "rkd_loss: batch size must be >= 3, got ", old_features.size(0));
  auto t = transforms->phi(old_features.detach());
  auto s = transforms->psi(new_features);
  return rkd_angle_loss(t, s, opt);
}

// ---------------------------------------------------------------------------
// Composite representation-learning loss

// Undefined components are skipped (ablations, first phase).
struct RRLComponents {
  torch::Tensor lce;
  torch::Tensor hkd;
  torch::Tensor rkd;
};

inline torch::Tensor rrl_loss(const RRLComponents& c, const ScaleFactors& f) {
  torch::Tensor total;
  auto add = [&total](const torch::Tensor& term, double w) {
    if (!term.defined()) return;
    auto weighted = term * w;
    total = total.defined() ? total + weighted : weighted;
  };
  add(c.lce, f.effective_lce);
  add(c.hkd, f.effective_hkd);
  add(c.rkd, f.effective_rkd);
  return total.defined() ? total : torch::zeros({});
}

}  // namespace rdfcil
