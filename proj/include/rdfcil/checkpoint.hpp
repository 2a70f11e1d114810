#pragma once

// Per-phase checkpoint and generator archives (libtorch zip archives).
//
// checkpoint keys
//   meta/format        "rdfcil-checkpoint-v1"
//   meta/phase         int
//   meta/config_hash   string
//   meta/backbone      backbone options as JSON text
//   meta/partitions    int64 tensor, per-task class counts
//   state/<name>       every extractor/head parameter and buffer (batch-norm
//                      running statistics included)
//
// generator keys
//   meta/format        "rdfcil-generator-v1"
//   meta/options       generator options as JSON text
//   state/<name>       parameters and buffers

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "rdfcil/errors.hpp"
#include "rdfcil/model.hpp"
#include "rdfcil/synthesizer.hpp"

namespace rdfcil {

inline nlohmann::json to_json(const BackboneOptions& b) {
  return {{"stem", b.stem},
          {"widths", b.widths},
          {"blocks", b.blocks},
          {"input", {b.input.channels, b.input.height, b.input.width}}};
}

inline BackboneOptions backbone_from_json(const nlohmann::json& j) {
  BackboneOptions b;
  b.stem = j.at("stem").get<std::string>();
  b.widths = j.at("widths").get<std::vector<std::int64_t>>();
  b.blocks = j.at("blocks").get<std::vector<std::int64_t>>();
  auto in = j.at("input").get<std::vector<std::int64_t>>();
  detail::require(in.size() == 3, "backbone input must have 3 entries");
  b.input = {in[0], in[1], in[2]};
  return b;
}

inline nlohmann::json to_json(const GeneratorOptions& g) {
  return {{"noise_dim", g.noise_dim},
          {"width", g.width},
          {"output", {g.output.channels, g.output.height, g.output.width}},
          {"low", g.low},
          {"high", g.high}};
}

inline GeneratorOptions generator_options_from_json(const nlohmann::json& j) {
  GeneratorOptions g;
  g.noise_dim = j.at("noise_dim").get<std::int64_t>();
  g.width = j.at("width").get<std::int64_t>();
  auto out = j.at("output").get<std::vector<std::int64_t>>();
  detail::require(out.size() == 3, "generator output must have 3 entries");
  g.output = {out[0], out[1], out[2]};
  g.low = j.at("low").get<std::vector<double>>();
  g.high = j.at("high").get<std::vector<double>>();
  return g;
}

namespace detail {

inline void write_state(torch::serialize::OutputArchive& ar, const torch::nn::Module& m) {
  for (const auto& p : m.named_parameters(true)) ar.write("state/" + p.key(), p.value().detach());
  for (const auto& b : m.named_buffers(true)) ar.write("state/" + b.key(), b.value().detach(), /*is_buffer=*/true);
}

inline void read_state(torch::serialize::InputArchive& ar, torch::nn::Module& m, const std::string& source) {
  torch::NoGradGuard no_grad;
  auto load = [&](const std::string& name, torch::Tensor& dst, bool buffer) {
    torch::Tensor t;
    require(ar.try_read("state/" + name, t, buffer), source, ": missing tensor '", name, "'");
    require(t.sizes() == dst.sizes(), source, ": tensor '", name, "' has shape ", t.sizes(), ", expected ",
            dst.sizes());
    dst.copy_(t);
  };
  for (auto& p : m.named_parameters(true)) load(p.key(), p.value(), false);
  for (auto& b : m.named_buffers(true)) load(b.key(), b.value(), true);
}

inline std::string read_string(torch::serialize::InputArchive& ar, const std::string& key, const std::string& source) {
  c10::IValue v;
  require(ar.try_read(key, v) && v.isString(), source, ": missing string '", key, "'");
  return v.toStringRef();
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& file, const ModelSnapshot& snap,
                            const std::string& config_hash) {
  torch::serialize::OutputArchive ar;
  ar.write("meta/format", c10::IValue(std::string("rdfcil-checkpoint-v1")));
  ar.write("meta/phase", c10::IValue(static_cast<std::int64_t>(snap.phase())));
  ar.write("meta/config_hash", c10::IValue(config_hash));
  ar.write("meta/backbone", c10::IValue(to_json(snap.backbone()).dump()));
  ar.write("meta/partitions", torch::tensor(snap.partitions(), torch::kLong));
  detail::write_state(ar, snap.module());
  ar.save_to(file.string());
}

struct CheckpointData {
  int phase = 0;
  std::string config_hash;
  ModelSnapshot snapshot;
};

inline CheckpointData load_checkpoint(const std::filesystem::path& file) {
  const auto src = file.string();
  torch::serialize::InputArchive ar;
  ar.load_from(src);
  detail::require(detail::read_string(ar, "meta/format", src) == "rdfcil-checkpoint-v1", src,
                  ": not a checkpoint archive");
  c10::IValue phase;
  detail::require(ar.try_read("meta/phase", phase) && phase.isInt(), src, ": missing phase");
  auto backbone = backbone_from_json(nlohmann::json::parse(detail::read_string(ar, "meta/backbone", src)));
  torch::Tensor parts;
  detail::require(ar.try_read("meta/partitions", parts), src, ": missing partitions");
  parts = parts.to(torch::kLong).contiguous();
  std::vector<std::int64_t> partitions(parts.data_ptr<std::int64_t>(),
                                       parts.data_ptr<std::int64_t>() + parts.numel());
  IncrementalClassifier model(backbone, partitions);
  detail::read_state(ar, *model, src);
  return {static_cast<int>(phase.toInt()), detail::read_string(ar, "meta/config_hash", src),
          ModelSnapshot(model, static_cast<int>(phase.toInt()))};
}

inline void save_generator(const std::filesystem::path& file, const GeneratorNet& gen) {
  torch::serialize::OutputArchive ar;
  ar.write("meta/format", c10::IValue(std::string("rdfcil-generator-v1")));
  ar.write("meta/options", c10::IValue(to_json(gen->options()).dump()));
  detail::write_state(ar, *gen);
  ar.save_to(file.string());
}

inline GeneratorNet load_generator(const std::filesystem::path& file) {
  const auto src = file.string();
  torch::serialize::InputArchive ar;
  ar.load_from(src);
  detail::require(detail::read_string(ar, "meta/format", src) == "rdfcil-generator-v1", src,
                  ": not a generator archive");
  GeneratorNet gen(generator_options_from_json(nlohmann::json::parse(detail::read_string(ar, "meta/options", src))));
  detail::read_state(ar, *gen, src);
  gen->eval();
  return gen;
}

}  // namespace rdfcil
