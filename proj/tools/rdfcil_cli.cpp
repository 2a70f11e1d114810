#include <cstdint>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <torch/torch.h>

#include "rdfcil/experiment.hpp"

namespace {

enum Exit { kOk = 0, kConfig = 1, kRuntime = 2 };

std::vector<std::string> overrides_from(const std::vector<std::string>& sets, const std::string& seeds,
                                        const std::string& out) {
  auto all = sets;
  if (!seeds.empty()) {
    std::string list = "[";
    std::stringstream ss(seeds);
    bool first = true;
    for (std::string s; std::getline(ss, s, ',');) {
      list += (first ? "" : ",") + s;
      first = false;
    }
    all.push_back("protocol.seeds=" + list + "]");
  }
  if (!out.empty()) all.push_back("output.dir=" + nlohmann::json(out).dump());
  return all;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Data-free class-incremental learning experiments"};
  app.require_subcommand(1);

  std::string config_path, seeds, out;
  std::vector<std::string> sets;
  bool quiet = false;
  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON config file (may be omitted)");
    cmd->add_option("--set", sets, "override a config key, key=value (repeatable)");
    cmd->add_option("--seeds", seeds, "comma-separated seeds, replaces protocol.seeds");
    cmd->add_option("--out", out, "output directory, replaces output.dir");
    cmd->add_flag("--quiet", quiet, "do not echo progress to stderr");
  };

  auto* run = app.add_subcommand("run", "run every phase for every seed");
  add_common(run);
  bool with_finetune = false;
  auto* ablate = app.add_subcommand("ablate", "run full / no_rkd / no_hkd / no_chr and tabulate");
  add_common(ablate);
  ablate->add_flag("--finetune", with_finetune, "add a naive fine-tuning row");

  std::vector<std::string> run_dirs;
  std::string report_out = ".";
  auto* report = app.add_subcommand("report", "aggregate completed runs into tables and curves");
  report->add_option("dirs", run_dirs, "run directories")->required();
  report->add_option("--out", report_out, "where report.md, curves.csv and curves.svg go");

  std::string preview_dir;
  std::int64_t grid = 8;
  std::uint64_t preview_seed = 0;
  auto* preview = app.add_subcommand("synth-preview", "write a PNG grid of generated samples per phase");
  preview->add_option("run_dir", preview_dir, "seed directory of a run")->required();
  preview->add_option("--grid", grid, "grid side length K (K x K samples)");
  preview->add_option("--seed", preview_seed, "noise seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kConfig;
  }

  try {
    if (*run || *ablate) {
      auto cfg = rdfcil::load_experiment(config_path, overrides_from(sets, seeds, out));
      torch::set_num_threads(cfg.threads);
      rdfcil::RunOptions opts{!quiet};
      if (*run) {
        for (const auto& r : rdfcil::cmd_run(cfg, opts)) {
          std::cout << "seed " << r.seed << ": A_N=" << r.last() << " avg=" << r.average() << '\n';
        }
      } else {
        auto res = rdfcil::cmd_ablate(cfg, with_finetune, opts);
        std::cout << rdfcil::format_table(res.rows);
      }
    } else if (*report) {
      std::vector<std::filesystem::path> dirs(run_dirs.begin(), run_dirs.end());
      auto res = rdfcil::cmd_report(dirs, report_out);
      for (const auto& w : res.warnings) std::cerr << "warning: " << w << '\n';
      std::cout << res.table;
    } else if (*preview) {
      for (const auto& f : rdfcil::synth_preview(preview_dir, grid, preview_seed)) std::cout << f.string() << '\n';
    }
  } catch (const rdfcil::config_error& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kOk;
}
