#pragma once

// Image datasets held in memory as uint8 (N, C, H, W) plus class ids.
//
// Supported sources:
//   manifest  a directory with manifest.json and two record files; each record
//             is one label byte followed by C*H*W pixel bytes in CHW order
//   cifar100  the CIFAR-100 binary release (train.bin / test.bin, records of
//             coarse label, fine label, 3072 pixel bytes)
//   blobs     procedurally generated Gaussian blobs, one position/colour per class

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "rdfcil/errors.hpp"
#include "rdfcil/model.hpp"

namespace rdfcil {

struct ImageDataset {
  std::string name;
  std::int64_t n_classes = 0;
  ImageShape shape{};
  std::vector<double> mean;
  std::vector<double> stdev;
  torch::Tensor images;  // uint8 (N, C, H, W)
  torch::Tensor labels;  // int64 (N), class ids in [0, n_classes)

  std::int64_t size() const { return labels.defined() ? labels.size(0) : 0; }

  // Float images scaled to [0, 1] and normalized per channel.
  torch::Tensor normalized(const torch::Tensor& sample_indices) const {
    auto x = images.index_select(0, sample_indices).to(torch::kFloat).div_(255.0);
    auto m = torch::tensor(mean, torch::kFloat).view({1, -1, 1, 1});
    auto s = torch::tensor(stdev, torch::kFloat).view({1, -1, 1, 1});
    return (x - m) / s;
  }
};

struct AugmentOptions {
  std::int64_t crop_padding = 0;
  bool hflip = false;
};

struct DatasetSplits {
  std::shared_ptr<const ImageDataset> train;
  std::shared_ptr<const ImageDataset> test;
  AugmentOptions augment{};
};

// Random crop from a zero-padded copy (zero is the channel mean after
// normalization) and random horizontal flip, drawn per sample.
inline torch::Tensor augment_batch(const torch::Tensor& images, const AugmentOptions& aug, torch::Generator& rng) {
  if (aug.crop_padding <= 0 && !aug.hflip) return images;
  const auto n = images.size(0), h = images.size(2), w = images.size(3);
  const auto p = std::max<std::int64_t>(aug.crop_padding, 0);
  auto padded = p > 0 ? torch::constant_pad_nd(images, {p, p, p, p}, 0.0) : images;
  auto offsets = torch::randint(0, 2 * p + 1, {n, 2}, rng, torch::TensorOptions().dtype(torch::kLong));
  auto flips = torch::rand({n}, rng, torch::TensorOptions()) < 0.5;
  auto out = torch::empty_like(images);
  auto off = offsets.accessor<std::int64_t, 2>();
  auto flip = flips.accessor<bool, 1>();
  for (std::int64_t i = 0; i < n; ++i) {
    auto crop = padded[i].narrow(1, off[i][0], h).narrow(2, off[i][1], w);
    if (aug.hflip && flip[i]) crop = crop.flip({2});
    out[i].copy_(crop);
  }
  return out;
}

namespace detail {

inline std::vector<unsigned char> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// label_offset: byte index of the label used within each record.
inline ImageDataset parse_records(const std::vector<unsigned char>& bytes, std::size_t header, std::size_t label_at,
                                  const ImageShape& shape, const std::string& source) {
  const auto pixels = static_cast<std::size_t>(shape.channels * shape.height * shape.width);
  const auto record = header + pixels;
  require(bytes.size() % record == 0, source, ": size ", bytes.size(), " is not a multiple of record size ",
          record);
  const auto n = static_cast<std::int64_t>(bytes.size() / record);
  ImageDataset ds;
  ds.shape = shape;
  ds.images = torch::empty({n, shape.channels, shape.height, shape.width}, torch::kUInt8);
  ds.labels = torch::empty({n}, torch::kLong);
  auto* img = ds.images.data_ptr<std::uint8_t>();
  auto* lab = ds.labels.data_ptr<std::int64_t>();
  for (std::int64_t i = 0; i < n; ++i) {
    const auto* r = bytes.data() + static_cast<std::size_t>(i) * record;
    lab[i] = r[label_at];
    std::copy(r + header, r + record, img + static_cast<std::size_t>(i) * pixels);
  }
  return ds;
}

}  // namespace detail

inline DatasetSplits load_manifest_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("dataset manifest not found: " + (dir / "manifest.json").string());
  auto m = nlohmann::json::parse(in);
  ImageShape shape{m.at("channels").get<std::int64_t>(), m.at("height").get<std::int64_t>(),
                   m.at("width").get<std::int64_t>()};
  auto load = [&](const std::string& key) {
    auto file = dir / m.at(key).get<std::string>();
    auto ds = detail::parse_records(detail::read_bytes(file), 1, 0, shape, file.string());
    ds.name = m.at("name").get<std::string>();
    ds.n_classes = m.at("n_classes").get<std::int64_t>();
    ds.mean = m.at("mean").get<std::vector<double>>();
    ds.stdev = m.at("std").get<std::vector<double>>();
    detail::require(ds.labels.numel() == 0 || ds.labels.max().item<std::int64_t>() < ds.n_classes,
                    file.string(), ": label exceeds n_classes");
    return std::make_shared<const ImageDataset>(std::move(ds));
  };
  DatasetSplits s{load("train"), load("test"), {}};
  if (m.contains("augment")) {
    s.augment.crop_padding = m["augment"].value("crop_padding", std::int64_t{0});
    s.augment.hflip = m["augment"].value("hflip", false);
  }
  return s;
}

inline DatasetSplits load_cifar100_binary(const std::filesystem::path& dir) {
  const ImageShape shape{3, 32, 32};
  auto load = [&](const char* file) {
    auto ds = detail::parse_records(detail::read_bytes(dir / file), 2, 1, shape, (dir / file).string());
    ds.name = "cifar100";
    ds.n_classes = 100;
    ds.mean = {0.5071, 0.4867, 0.4408};
    ds.stdev = {0.2675, 0.2565, 0.2761};
    return std::make_shared<const ImageDataset>(std::move(ds));
  };
  return {load("train.bin"), load("test.bin"), {4, true}};
}

struct BlobOptions {
  std::int64_t n_classes = 10;
  std::int64_t train_per_class = 100;
  std::int64_t test_per_class = 30;
  std::int64_t size = 8;
  double noise = 0.15;
  std::uint64_t seed = 1234;
};

// Each class is a Gaussian blob with its own centre, radius and colour;
// samples jitter the centre and add pixel noise.
inline DatasetSplits make_blobs(const BlobOptions& o) {
  detail::require(o.n_classes >= 1 && o.n_classes <= 255, "blobs: n_classes must be in [1, 255]");
  detail::require(o.size >= 8 && o.size % 8 == 0, "blobs: size must be a positive multiple of 8");
  std::mt19937_64 rng(o.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  struct Proto {
    double cy, cx, radius;
    double colour[3];
  };
  std::vector<Proto> protos;
  for (std::int64_t k = 0; k < o.n_classes; ++k) {
    Proto p{};
    p.cy = (0.2 + 0.6 * unit(rng)) * static_cast<double>(o.size);
    p.cx = (0.2 + 0.6 * unit(rng)) * static_cast<double>(o.size);
    p.radius = (0.12 + 0.15 * unit(rng)) * static_cast<double>(o.size);
    for (double& c : p.colour) c = 0.2 + 0.8 * unit(rng);
    protos.push_back(p);
  }
  const ImageShape shape{3, o.size, o.size};
  auto build = [&](std::int64_t per_class) {
    ImageDataset ds;
    ds.name = "blobs";
    ds.n_classes = o.n_classes;
    ds.shape = shape;
    const auto n = per_class * o.n_classes;
    ds.images = torch::empty({n, 3, o.size, o.size}, torch::kUInt8);
    ds.labels = torch::empty({n}, torch::kLong);
    auto img = ds.images.accessor<std::uint8_t, 4>();
    auto lab = ds.labels.accessor<std::int64_t, 1>();
    std::int64_t i = 0;
    for (std::int64_t k = 0; k < o.n_classes; ++k) {
      const auto& p = protos[static_cast<std::size_t>(k)];
      for (std::int64_t s = 0; s < per_class; ++s, ++i) {
        const double cy = p.cy + 0.6 * gauss(rng), cx = p.cx + 0.6 * gauss(rng);
        for (std::int64_t y = 0; y < o.size; ++y) {
          for (std::int64_t x = 0; x < o.size; ++x) {
            const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
            const double g = std::exp(-d2 / (2 * p.radius * p.radius));
            for (int c = 0; c < 3; ++c) {
              const double v = std::clamp(g * p.colour[c] + o.noise * gauss(rng), 0.0, 1.0);
              img[i][c][y][x] = static_cast<std::uint8_t>(std::lround(v * 255.0));
            }
          }
        }
        lab[i] = k;
      }
    }
    return ds;
  };
  auto train = build(o.train_per_class);
  auto test = build(o.test_per_class);
  auto flat = train.images.to(torch::kDouble).div(255.0).transpose(0, 1).reshape({3, -1});
  for (int c = 0; c < 3; ++c) {
    train.mean.push_back(flat[c].mean().item<double>());
    train.stdev.push_back(flat[c].std(false).item<double>());
  }
  test.mean = train.mean;
  test.stdev = train.stdev;
  return {std::make_shared<const ImageDataset>(std::move(train)), std::make_shared<const ImageDataset>(std::move(test)),
          {1, false}};
}

// Keeps only the listed class ids and relabels them 0..k-1 in list order.
inline DatasetSplits restrict_classes(const DatasetSplits& s, const std::vector<std::int64_t>& class_list) {
  detail::require(!class_list.empty(), "class list is empty");
  auto filter = [&](const ImageDataset& src) {
    std::vector<std::int64_t> remap(static_cast<std::size_t>(src.n_classes), -1);
    for (std::size_t j = 0; j < class_list.size(); ++j) {
      const auto c = class_list[j];
      detail::require(c >= 0 && c < src.n_classes, "class list entry ", c, " outside [0, ", src.n_classes, ")");
      detail::require(remap[static_cast<std::size_t>(c)] < 0, "class list repeats class ", c);
      remap[static_cast<std::size_t>(c)] = static_cast<std::int64_t>(j);
    }
    auto lab = src.labels.accessor<std::int64_t, 1>();
    std::vector<std::int64_t> keep, relabel;
    for (std::int64_t i = 0; i < src.size(); ++i) {
      const auto r = remap[static_cast<std::size_t>(lab[i])];
      if (r >= 0) {
        keep.push_back(i);
        relabel.push_back(r);
      }
    }
    ImageDataset out = src;
    out.n_classes = static_cast<std::int64_t>(class_list.size());
    out.images = src.images.index_select(0, torch::tensor(keep, torch::kLong));
    out.labels = torch::tensor(relabel, torch::kLong);
    return std::make_shared<const ImageDataset>(std::move(out));
  };
  return {filter(*s.train), filter(*s.test), s.augment};
}

inline std::vector<std::int64_t> read_class_list(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot open class list " + file.string());
  std::vector<std::int64_t> out;
  for (std::int64_t c; in >> c;) out.push_back(c);
  return out;
}

}  // namespace rdfcil
