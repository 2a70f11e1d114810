#pragma once

// Experiment configuration: one JSON document.
//
// Resolution order (later wins): built-in defaults, the named preset, the
// config file, then command-line `--set key=value` overrides. Keys are dotted
// paths into the document; any key not present in the defaults is rejected.
// The fully resolved document is what gets written to config.lock.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "rdfcil/data.hpp"
#include "rdfcil/errors.hpp"
#include "rdfcil/hash.hpp"
#include "rdfcil/model.hpp"
#include "rdfcil/synthesizer.hpp"
#include "rdfcil/trainer.hpp"

#ifndef RDFCIL_BUNDLED_DATA_DIR
#define RDFCIL_BUNDLED_DATA_DIR "data"
#endif

namespace rdfcil {

using nlohmann::json;

inline json default_config() {
  return json::parse(R"({
    "preset": "desk",
    "threads": 1,
    "dataset": {
      "name": "digits",
      "path": "",
      "class_list": "",
      "augment_override": false,
      "crop_padding": 0,
      "hflip": false,
      "blobs": {"n_classes": 10, "train_per_class": 100, "test_per_class": 30,
                "size": 8, "noise": 0.15, "seed": 1234}
    },
    "protocol": {"name": "equal", "n_tasks": 5, "seeds": [0, 1, 2]},
    "model": {"stem": "cifar", "widths": [16, 32, 64], "blocks": [1, 1, 1]},
    "trainer": {
      "epochs": 20,
      "lr": 0.05,
      "milestones": [10, 15],
      "lr_decay": 0.1,
      "momentum": 0.9,
      "weight_decay": 0.0005,
      "batch_size": 64,
      "chr_epochs": 10,
      "chr_lr": 0.005,
      "kd_tau": 2.0,
      "rkd_max_triplets": 100000,
      "lambda": {"lce": 0.5, "hkd": 0.15, "rkd": 0.5},
      "ablation": {"no_rkd": false, "no_hkd": false, "no_chr": false,
                   "global_ce": false, "baseline_kd": false, "finetune": false}
    },
    "synthesizer": {
      "steps": 2000,
      "batch_size": 64,
      "lr": 0.001,
      "temp": 1000.0,
      "noise_dim": 256,
      "width": 64,
      "weights": {"diversity": 1.0, "content": 1.0, "stat": 5.0, "prior": 0.001}
    },
    "output": {"dir": "runs/default"}
  })");
}

// Preset values layered over the defaults. "desk" is the defaults themselves.
inline json preset_config(const std::string& name) {
  if (name == "desk") return json::object();
  if (name == "toy") {
    return json::parse(R"({
      "dataset": {"name": "blobs", "blobs": {"train_per_class": 40, "test_per_class": 15}},
      "protocol": {"n_tasks": 5, "seeds": [0]},
      "model": {"widths": [8, 16, 16]},
      "trainer": {"epochs": 2, "milestones": [1], "batch_size": 16, "chr_epochs": 1},
      "synthesizer": {"steps": 10, "batch_size": 16, "noise_dim": 32, "width": 16}
    })");
  }
  auto paper = [](const char* dataset, double wd) {
    json j = json::parse(R"({
      "model": {"stem": "cifar", "widths": [16, 32, 64], "blocks": [5, 5, 5]},
      "protocol": {"n_tasks": 10},
      "trainer": {"epochs": 160, "lr": 0.1, "milestones": [80, 120], "batch_size": 128,
                  "chr_epochs": 40, "chr_lr": 0.005},
      "synthesizer": {"steps": 5000, "batch_size": 128}
    })");
    j["dataset"]["name"] = dataset;
    j["trainer"]["weight_decay"] = wd;
    return j;
  };
  if (name == "cifar100-paper") return paper("cifar100", 5e-4);
  if (name == "tiny200-paper") return paper("tiny200", 2e-4);
  if (name == "imagenet100-paper") {
    return json::parse(R"({
      "dataset": {"name": "imagenet100"},
      "model": {"stem": "imagenet", "widths": [64, 128, 256, 512], "blocks": [2, 2, 2, 2]},
      "protocol": {"n_tasks": 10},
      "trainer": {"epochs": 90, "lr": 0.1, "milestones": [30, 60], "weight_decay": 0.0001, "batch_size": 64,
                  "chr_epochs": 30, "chr_lr": 0.005},
      "synthesizer": {"steps": 10000, "batch_size": 64}
    })");
  }
  throw config_error("preset", "unknown preset '" + name + "'");
}

namespace detail {

inline const char* kind(const json& j) {
  if (j.is_boolean()) return "boolean";
  if (j.is_number()) return "number";
  if (j.is_string()) return "string";
  if (j.is_array()) return "array";
  if (j.is_object()) return "object";
  return "null";
}

// Merges `patch` into `base`, rejecting keys or types the schema does not know.
inline void merge_checked(json& base, const json& patch, const json& schema, const std::string& prefix) {
  if (!patch.is_object()) throw config_error(prefix.empty() ? "<root>" : prefix, "expected an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const auto key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!schema.is_object() || !schema.contains(it.key())) throw config_error(key, "unknown key");
    const auto& expected = schema.at(it.key());
    if (expected.is_object()) {
      merge_checked(base[it.key()], it.value(), expected, key);
      continue;
    }
    if (std::string(kind(expected)) != kind(it.value())) {
      throw config_error(key, std::string("expected ") + kind(expected) + ", got " + kind(it.value()));
    }
    base[it.key()] = it.value();
  }
}

inline json path_patch(const std::string& dotted, json value) {
  std::vector<std::string> parts;
  std::stringstream ss(dotted);
  for (std::string p; std::getline(ss, p, '.');) {
    if (p.empty()) throw config_error(dotted, "malformed key");
    parts.push_back(p);
  }
  if (parts.empty()) throw config_error(dotted, "empty key");
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) value = json{{*it, std::move(value)}};
  return value;
}

}  // namespace detail

// "key=value"; the value is parsed as JSON when possible, otherwise taken as a string.
inline json parse_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw config_error(assignment, "override must look like key=value");
  const auto key = assignment.substr(0, eq);
  const auto raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, /*allow_exceptions=*/false);
  if (value.is_discarded()) value = raw;
  return detail::path_patch(key, std::move(value));
}

inline json resolve_config(const json& file, const std::vector<std::string>& overrides) {
  const auto defaults = default_config();
  std::vector<json> patches;
  for (const auto& o : overrides) patches.push_back(parse_override(o));

  std::string preset = "desk";
  if (file.is_object() && file.contains("preset")) {
    if (!file["preset"].is_string()) throw config_error("preset", "expected string");
    preset = file["preset"].get<std::string>();
  }
  for (const auto& p : patches) {
    if (p.contains("preset")) {
      if (!p["preset"].is_string()) throw config_error("preset", "expected string");
      preset = p["preset"].get<std::string>();
    }
  }
  json resolved = defaults;
  detail::merge_checked(resolved, preset_config(preset), defaults, "");
  if (!file.is_null()) detail::merge_checked(resolved, file, defaults, "");
  for (const auto& p : patches) detail::merge_checked(resolved, p, defaults, "");
  resolved["preset"] = preset;
  return resolved;
}

inline json load_config_file(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw config_error("--config", "cannot read " + file.string());
  try {
    return json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw config_error("--config", std::string("parse error: ") + e.what());
  }
}

struct DatasetConfig {
  std::string name;
  std::string path;
  std::string class_list;
  bool augment_override = false;
  AugmentOptions augment{};
  BlobOptions blobs{};
};

struct ProtocolConfig {
  std::string name = "equal";
  int n_tasks = 5;
  std::vector<std::uint64_t> seeds{0};
};

struct ExperimentConfig {
  json resolved;
  std::string preset;
  int threads = 1;
  DatasetConfig dataset;
  ProtocolConfig protocol;
  BackboneOptions backbone;  // input shape filled in from the dataset
  TrainConfig train;
  SynthesisConfig synth;
  std::filesystem::path output_dir;

  std::string lock_text() const { return resolved.dump(2) + "\n"; }

  // Identity of the experiment; where it is written does not count.
  std::string hash() const {
    auto j = resolved;
    if (j.contains("output")) j["output"].erase("dir");
    std::ostringstream o;
    o << std::hex << std::setw(16) << std::setfill('0') << fnv1a(j.dump());
    return o.str();
  }
};

namespace detail {

template <typename T>
T get_at(const json& j, const std::string& dotted) {
  const json* cur = &j;
  std::stringstream ss(dotted);
  for (std::string p; std::getline(ss, p, '.');) cur = &cur->at(p);
  try {
    return cur->get<T>();
  } catch (const json::exception& e) {
    throw config_error(dotted, e.what());
  }
}

}  // namespace detail

inline ExperimentConfig build_config(const json& resolved) {
  using detail::get_at;
  ExperimentConfig c;
  c.resolved = resolved;
  c.preset = get_at<std::string>(resolved, "preset");
  c.threads = get_at<int>(resolved, "threads");
  if (c.threads < 1) throw config_error("threads", "must be >= 1");

  auto& d = c.dataset;
  d.name = get_at<std::string>(resolved, "dataset.name");
  d.path = get_at<std::string>(resolved, "dataset.path");
  d.class_list = get_at<std::string>(resolved, "dataset.class_list");
  d.augment_override = get_at<bool>(resolved, "dataset.augment_override");
  d.augment.crop_padding = get_at<std::int64_t>(resolved, "dataset.crop_padding");
  d.augment.hflip = get_at<bool>(resolved, "dataset.hflip");
  d.blobs.n_classes = get_at<std::int64_t>(resolved, "dataset.blobs.n_classes");
  d.blobs.train_per_class = get_at<std::int64_t>(resolved, "dataset.blobs.train_per_class");
  d.blobs.test_per_class = get_at<std::int64_t>(resolved, "dataset.blobs.test_per_class");
  d.blobs.size = get_at<std::int64_t>(resolved, "dataset.blobs.size");
  d.blobs.noise = get_at<double>(resolved, "dataset.blobs.noise");
  d.blobs.seed = get_at<std::uint64_t>(resolved, "dataset.blobs.seed");

  c.protocol.name = get_at<std::string>(resolved, "protocol.name");
  if (c.protocol.name != "equal" && c.protocol.name != "half") {
    throw config_error("protocol.name", "expected 'equal' or 'half'");
  }
  c.protocol.n_tasks = get_at<int>(resolved, "protocol.n_tasks");
  if (c.protocol.n_tasks < 1) throw config_error("protocol.n_tasks", "must be >= 1");
  c.protocol.seeds = get_at<std::vector<std::uint64_t>>(resolved, "protocol.seeds");
  if (c.protocol.seeds.empty()) throw config_error("protocol.seeds", "needs at least one seed");

  c.backbone.stem = get_at<std::string>(resolved, "model.stem");
  c.backbone.widths = get_at<std::vector<std::int64_t>>(resolved, "model.widths");
  c.backbone.blocks = get_at<std::vector<std::int64_t>>(resolved, "model.blocks");
  if (c.backbone.stem != "cifar" && c.backbone.stem != "imagenet") {
    throw config_error("model.stem", "expected 'cifar' or 'imagenet'");
  }
  if (c.backbone.widths.empty() || c.backbone.widths.size() != c.backbone.blocks.size()) {
    throw config_error("model.widths", "widths and blocks must be non-empty and of equal length");
  }

  auto& t = c.train;
  t.epochs = get_at<std::int64_t>(resolved, "trainer.epochs");
  t.lr = get_at<double>(resolved, "trainer.lr");
  t.milestones = get_at<std::vector<std::int64_t>>(resolved, "trainer.milestones");
  t.lr_decay = get_at<double>(resolved, "trainer.lr_decay");
  t.momentum = get_at<double>(resolved, "trainer.momentum");
  t.weight_decay = get_at<double>(resolved, "trainer.weight_decay");
  t.batch_size = get_at<std::int64_t>(resolved, "trainer.batch_size");
  t.chr_epochs = get_at<std::int64_t>(resolved, "trainer.chr_epochs");
  t.chr_lr = get_at<double>(resolved, "trainer.chr_lr");
  t.kd_tau = get_at<double>(resolved, "trainer.kd_tau");
  t.rkd_max_triplets = get_at<std::int64_t>(resolved, "trainer.rkd_max_triplets");
  t.bases.lce = get_at<double>(resolved, "trainer.lambda.lce");
  t.bases.hkd = get_at<double>(resolved, "trainer.lambda.hkd");
  t.bases.rkd = get_at<double>(resolved, "trainer.lambda.rkd");
  t.ablation.no_rkd = get_at<bool>(resolved, "trainer.ablation.no_rkd");
  t.ablation.no_hkd = get_at<bool>(resolved, "trainer.ablation.no_hkd");
  t.ablation.no_chr = get_at<bool>(resolved, "trainer.ablation.no_chr");
  t.ablation.global_ce = get_at<bool>(resolved, "trainer.ablation.global_ce");
  t.ablation.baseline_kd = get_at<bool>(resolved, "trainer.ablation.baseline_kd");
  t.ablation.finetune = get_at<bool>(resolved, "trainer.ablation.finetune");
  try {
    t.validate();
  } catch (const std::invalid_argument& e) {
    throw config_error("trainer", e.what());
  }

  auto& s = c.synth;
  s.steps = get_at<std::int64_t>(resolved, "synthesizer.steps");
  s.batch_size = get_at<std::int64_t>(resolved, "synthesizer.batch_size");
  s.lr = get_at<double>(resolved, "synthesizer.lr");
  s.temp = get_at<double>(resolved, "synthesizer.temp");
  s.noise_dim = get_at<std::int64_t>(resolved, "synthesizer.noise_dim");
  s.width = get_at<std::int64_t>(resolved, "synthesizer.width");
  s.weights.diversity = get_at<double>(resolved, "synthesizer.weights.diversity");
  s.weights.content = get_at<double>(resolved, "synthesizer.weights.content");
  s.weights.stat = get_at<double>(resolved, "synthesizer.weights.stat");
  s.weights.prior = get_at<double>(resolved, "synthesizer.weights.prior");
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    throw config_error("synthesizer", e.what());
  }

  c.output_dir = get_at<std::string>(resolved, "output.dir");
  return c;
}

inline ExperimentConfig load_experiment(const std::filesystem::path& file, const std::vector<std::string>& overrides) {
  json doc = file.empty() ? json() : load_config_file(file);
  return build_config(resolve_config(doc, overrides));
}

// Dataset root: dataset.path if set, else $RDFCIL_DATA_ROOT/<name>, else the
// bundled data directory.
inline std::filesystem::path dataset_dir(const DatasetConfig& d) {
  if (!d.path.empty()) return d.path;
  if (const char* root = std::getenv("RDFCIL_DATA_ROOT"); root != nullptr && *root != '\0') {
    auto p = std::filesystem::path(root) / d.name;
    if (std::filesystem::exists(p)) return p;
  }
  return std::filesystem::path(RDFCIL_BUNDLED_DATA_DIR) / d.name;
}

inline DatasetSplits load_dataset(const DatasetConfig& d) {
  DatasetSplits s;
  if (d.name == "blobs") {
    s = make_blobs(d.blobs);
  } else if (d.name == "cifar100") {
    s = load_cifar100_binary(dataset_dir(d));
  } else {
    s = load_manifest_dataset(dataset_dir(d));
  }
  if (!d.class_list.empty()) s = restrict_classes(s, read_class_list(d.class_list));
  if (d.augment_override) s.augment = d.augment;
  return s;
}

}  // namespace rdfcil
