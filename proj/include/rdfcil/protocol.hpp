#pragma once

// Task schedules for the two class-incremental protocols and per-task views
// over a dataset.
//
// Class orders are shuffled with std::mt19937_64 seeded by the order seed and
// a Fisher-Yates pass using unbiased rejection sampling, so a seed gives the
// same order on every platform.

#include <algorithm>
#include <cstdint>
#include <limits>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "rdfcil/data.hpp"
#include "rdfcil/errors.hpp"

namespace rdfcil {

// Tasks are numbered from 1.
struct TaskSchedule {
  std::string protocol_name;
  std::uint64_t order_seed = 0;
  std::vector<std::int64_t> class_order;      // position in learning order -> class id
  std::vector<std::int64_t> task_sizes;       // |T_i|
  std::vector<std::int64_t> global_index_of;  // class id -> position in learning order

  int n_tasks() const noexcept { return static_cast<int>(task_sizes.size()); }
  std::int64_t n_classes() const noexcept { return static_cast<std::int64_t>(class_order.size()); }

  void check_task(int task) const {
    detail::require(task >= 1 && task <= n_tasks(), "task index ", task, " outside [1, ", n_tasks(), "]");
  }

  // First global index of task `task`.
  std::int64_t offset(int task) const {
    check_task(task);
    std::int64_t o = 0;
    for (int t = 1; t < task; ++t) o += task_sizes[static_cast<std::size_t>(t - 1)];
    return o;
  }

  std::int64_t size(int task) const {
    check_task(task);
    return task_sizes[static_cast<std::size_t>(task - 1)];
  }

  // |T_{1:task}|
  std::int64_t learned(int task) const { return offset(task) + size(task); }

  std::vector<std::int64_t> classes_of(int task) const {
    const auto o = offset(task);
    return {class_order.begin() + o, class_order.begin() + o + size(task)};
  }

  // 1-based task that contains class id c.
  int task_of(std::int64_t class_id) const {
    const auto g = global_index_of.at(static_cast<std::size_t>(class_id));
    std::int64_t end = 0;
    for (int t = 1; t <= n_tasks(); ++t) {
      end += task_sizes[static_cast<std::size_t>(t - 1)];
      if (g < end) return t;
    }
    throw invalid_state("class outside schedule");
  }
};

namespace detail {

inline std::uint64_t bounded(std::mt19937_64& rng, std::uint64_t bound) {
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t r;
  do {
    r = rng();
  } while (r >= limit);
  return r % bound;
}

inline std::vector<std::int64_t> shuffled_classes(std::int64_t n, std::uint64_t seed) {
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  std::mt19937_64 rng(seed);
  for (std::int64_t i = n - 1; i > 0; --i) {
    const auto j = static_cast<std::int64_t>(bounded(rng, static_cast<std::uint64_t>(i + 1)));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }
  return order;
}

inline TaskSchedule make_schedule(std::string name, std::uint64_t seed, std::vector<std::int64_t> sizes,
                                  std::int64_t n_classes) {
  TaskSchedule s;
  s.protocol_name = std::move(name);
  s.order_seed = seed;
  s.class_order = shuffled_classes(n_classes, seed);
  s.task_sizes = std::move(sizes);
  s.global_index_of.assign(static_cast<std::size_t>(n_classes), -1);
  for (std::int64_t pos = 0; pos < n_classes; ++pos) {
    s.global_index_of[static_cast<std::size_t>(s.class_order[static_cast<std::size_t>(pos)])] = pos;
  }
  return s;
}

}  // namespace detail

inline TaskSchedule split_equal(std::int64_t n_classes, int n_tasks, std::uint64_t seed) {
  detail::require(n_tasks >= 1 && n_classes >= n_tasks && n_classes % n_tasks == 0, "split_equal: ", n_tasks,
                  " tasks do not divide ", n_classes, " classes");
  std::vector<std::int64_t> sizes(static_cast<std::size_t>(n_tasks), n_classes / n_tasks);
  return detail::make_schedule("equal", seed, std::move(sizes), n_classes);
}

// Half the classes first, the rest split equally over the remaining N-1 tasks.
inline TaskSchedule split_half_then_equal(std::int64_t n_classes, int n_tasks, std::uint64_t seed = 0) {
  detail::require(n_tasks >= 2, "split_half_then_equal: need at least 2 tasks, got ", n_tasks);
  detail::require(n_classes >= 2 && n_classes % 2 == 0, "split_half_then_equal: class count ", n_classes,
                  " is not even");
  const auto half = n_classes / 2;
  detail::require(half % (n_tasks - 1) == 0, "split_half_then_equal: ", n_tasks - 1,
                  " incremental tasks do not divide ", half, " classes");
  std::vector<std::int64_t> sizes{half};
  sizes.resize(static_cast<std::size_t>(n_tasks), half / (n_tasks - 1));
  return detail::make_schedule("half", seed, std::move(sizes), n_classes);
}

inline TaskSchedule make_protocol(const std::string& name, std::int64_t n_classes, int n_tasks,
                                  std::uint64_t seed) {
  if (name == "equal") return split_equal(n_classes, n_tasks, seed);
  if (name == "half") return split_half_then_equal(n_classes, n_tasks, seed);
  throw std::invalid_argument("unknown protocol '" + name + "' (expected equal|half)");
}

enum class LabelMode { global, local };

struct Batch {
  torch::Tensor images;  // normalized float
  torch::Tensor labels;  // per the view's label mode
};

// Immutable selection of samples from one dataset split.
class DatasetView {
 public:
  DatasetView(std::shared_ptr<const ImageDataset> data, std::vector<std::int64_t> classes, LabelMode mode,
              const TaskSchedule& schedule, std::int64_t local_offset)
      : data_(std::move(data)), classes_(std::move(classes)), mode_(mode) {
    std::vector<char> member(static_cast<std::size_t>(data_->n_classes), 0);
    for (auto c : classes_) member.at(static_cast<std::size_t>(c)) = 1;
    auto lab = data_->labels.accessor<std::int64_t, 1>();
    std::vector<std::int64_t> idx, mapped;
    for (std::int64_t i = 0; i < data_->size(); ++i) {
      const auto c = lab[i];
      if (!member[static_cast<std::size_t>(c)]) continue;
      idx.push_back(i);
      const auto g = schedule.global_index_of[static_cast<std::size_t>(c)];
      mapped.push_back(mode_ == LabelMode::global ? g : g - local_offset);
    }
    indices_ = torch::tensor(idx, torch::kLong);
    labels_ = torch::tensor(mapped, torch::kLong);
  }

  std::int64_t size() const { return indices_.size(0); }
  LabelMode mode() const noexcept { return mode_; }
  const std::vector<std::int64_t>& classes() const noexcept { return classes_; }
  const torch::Tensor& indices() const noexcept { return indices_; }  // into the dataset
  const torch::Tensor& labels() const noexcept { return labels_; }
  const ImageDataset& dataset() const noexcept { return *data_; }

  // positions index into this view (0..size-1).
  Batch batch(const torch::Tensor& positions) const {
    return {data_->normalized(indices_.index_select(0, positions)), labels_.index_select(0, positions)};
  }

  Batch batch(const torch::Tensor& positions, const AugmentOptions& aug, torch::Generator& rng) const {
    auto b = batch(positions);
    b.images = augment_batch(b.images, aug, rng);
    return b;
  }

 private:
  std::shared_ptr<const ImageDataset> data_;
  std::vector<std::int64_t> classes_;
  LabelMode mode_;
  torch::Tensor indices_;
  torch::Tensor labels_;
};

inline DatasetView task_train_view(const TaskSchedule& s, const DatasetSplits& d, int task,
                                   LabelMode mode = LabelMode::local) {
  return DatasetView(d.train, s.classes_of(task), mode, s, s.offset(task));
}

inline DatasetView task_test_view(const TaskSchedule& s, const DatasetSplits& d, int task) {
  return DatasetView(d.test, s.classes_of(task), LabelMode::global, s, 0);
}

// Test samples of every class in tasks 1..i, global labels.
inline DatasetView cumulative_test_view(const TaskSchedule& s, const DatasetSplits& d, int i) {
  s.check_task(i);
  std::vector<std::int64_t> classes(s.class_order.begin(), s.class_order.begin() + s.learned(i));
  return DatasetView(d.test, std::move(classes), LabelMode::global, s, 0);
}

// Shuffled mini-batches of positions. A trailing batch smaller than min_batch is dropped.
inline std::vector<torch::Tensor> epoch_batches(std::int64_t n, std::int64_t batch_size, torch::Generator& rng,
                                                std::int64_t min_batch = 1) {
  auto perm = torch::randperm(n, rng, torch::TensorOptions().dtype(torch::kLong));
  std::vector<torch::Tensor> out;
  for (std::int64_t start = 0; start < n; start += batch_size) {
    const auto len = std::min(batch_size, n - start);
    if (len < min_batch) break;
    out.push_back(perm.narrow(0, start, len));
  }
  return out;
}

}  // namespace rdfcil
