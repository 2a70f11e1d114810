#pragma once

// Run directories and the run / ablate / report / synth-preview commands.
//
// <out>/config.lock                 resolved configuration (all seeds)
// <out>/seed_<s>/config.lock        resolved configuration for that seed alone
// <out>/seed_<s>/phase_<i>/checkpoint
// <out>/seed_<s>/phase_<i>/generator   (phases >= 2 that fit a synthesizer)
// <out>/seed_<s>/metrics.csv
// <out>/seed_<s>/events.log
// <out>/seed_<s>/report.json
//
// A seed directory that already holds completed phases under the same
// configuration hash resumes after the last completed phase.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "rdfcil/checkpoint.hpp"
#include "rdfcil/config.hpp"
#include "rdfcil/metrics.hpp"
#include "rdfcil/plot.hpp"
#include "rdfcil/protocol.hpp"
#include "rdfcil/trainer.hpp"

namespace rdfcil {

namespace fs = std::filesystem;

class EventLog {
 public:
  explicit EventLog(const fs::path& file, bool echo = false) : out_(file, std::ios::app), echo_(echo) {}
  void operator()(const std::string& msg) {
    out_ << utc_timestamp() << ' ' << msg << '\n';
    out_.flush();
    if (echo_) std::cerr << msg << '\n';
  }

 private:
  std::ofstream out_;
  bool echo_;
};

inline void write_text(const fs::path& file, const std::string& text) {
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << text;
}

inline std::string read_text(const fs::path& file) {
  std::ifstream in(file);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// The configuration narrowed to one seed; its lock is enough to rerun that seed.
inline ExperimentConfig config_for_seed(const ExperimentConfig& base, std::uint64_t seed, const fs::path& dir) {
  auto j = base.resolved;
  j["protocol"]["seeds"] = json::array({seed});
  j["output"]["dir"] = dir.string();
  return build_config(j);
}

inline std::string variant_name(const AblationFlags& f) {
  auto flags = f.enabled();
  if (flags.empty()) return "full";
  std::string s;
  for (const auto& x : flags) s += (s.empty() ? "" : "+") + x;
  return s;
}

struct RunOptions {
  bool echo = false;  // mirror events to stderr
};

// Runs (or resumes) every phase of one seed inside `dir`.
inline RunReport run_seed(const ExperimentConfig& base, std::uint64_t seed, const fs::path& dir,
                          const DatasetSplits& data, const RunOptions& opts = {}) {
  fs::create_directories(dir);
  const auto cfg = config_for_seed(base, seed, dir);
  const auto lock = dir / "config.lock";
  const auto hash = cfg.hash();
  if (fs::exists(lock) && build_config(json::parse(read_text(lock))).hash() != hash) {
    throw config_error("output.dir", dir.string() + " already holds a run with a different configuration");
  }
  write_text(lock, cfg.lock_text());
  torch::set_num_threads(cfg.threads);

  EventLog log(dir / "events.log", opts.echo);
  auto schedule = make_protocol(cfg.protocol.name, data.train->n_classes, cfg.protocol.n_tasks, seed);
  auto backbone = cfg.backbone;
  backbone.input = data.train->shape;

  RunReport report;
  report.variant = variant_name(cfg.train.ablation);
  report.dataset = cfg.dataset.name;
  report.protocol = cfg.protocol.name;
  report.n_tasks = schedule.n_tasks();
  report.seed = seed;
  report.ablation_flags = cfg.train.ablation.enabled();

  // Resume from the last phase with both a checkpoint and a metrics row.
  auto rows = read_metrics(dir / "metrics.csv");
  PhaseState state;
  int done = 0;
  for (int i = static_cast<int>(rows.size()); i >= 1 && done == 0; --i) {
    const auto ckpt = dir / ("phase_" + std::to_string(i)) / "checkpoint";
    if (rows[static_cast<std::size_t>(i - 1)].phase != i || !fs::exists(ckpt)) continue;
    auto loaded = load_checkpoint(ckpt);
    if (loaded.config_hash != hash || loaded.phase != i) continue;
    state = resume_state(loaded.snapshot);
    done = i;
  }
  if (done > 0) {
    rows.resize(static_cast<std::size_t>(done));
    if (auto prev = read_report(dir / "report.json"); prev && prev->accuracies.size() >= rows.size()) {
      report.phase_seconds.assign(prev->phase_seconds.begin(),
                                  prev->phase_seconds.begin() + static_cast<std::ptrdiff_t>(
                                      std::min(prev->phase_seconds.size(), rows.size())));
    }
    for (const auto& r : rows) {
      report.accuracies.push_back(r.accuracy);
      report.learned_classes.push_back(r.n_learned_classes);
    }
    report.phase_seconds.resize(rows.size(), 0.0);
    // Rewrite metrics.csv without rows past the resume point.
    fs::remove(dir / "metrics.csv");
    for (const auto& r : rows) append_metrics_row(dir / "metrics.csv", r);
    log("resuming after phase " + std::to_string(done));
  } else {
    fs::remove(dir / "metrics.csv");
    state = make_initial_state(backbone, phase_seed(seed, 0));
    log("start seed=" + std::to_string(seed) + " config=" + hash + " variant=" + report.variant);
  }

  PhaseContext ctx{schedule, data, cfg.train, cfg.synth, seed, [&log](const std::string& m) { log(m); }};
  for (int i = done + 1; i <= schedule.n_tasks(); ++i) {
    auto res = run_phase(state, i, ctx);
    const auto phase_dir = dir / ("phase_" + std::to_string(i));
    fs::create_directories(phase_dir);
    save_checkpoint(phase_dir / "checkpoint", *state.snapshot, hash);
    if (i >= 2 && !state.generator.is_empty() && !cfg.train.ablation.finetune) {
      save_generator(phase_dir / "generator", state.generator);
    }
    report.accuracies.push_back(res.accuracy);
    report.phase_seconds.push_back(res.seconds);
    report.learned_classes.push_back(res.n_learned_classes);
    append_metrics_row(dir / "metrics.csv",
                       {i, res.n_learned_classes, res.accuracy, average_incremental(report.accuracies),
                        utc_timestamp()});
    write_report(dir / "report.json", report);
    if (i >= 2 && !cfg.train.ablation.finetune) {
      std::ostringstream m;
      m << "phase " << i << " rrl(last epoch) lce=" << res.rrl_last_epoch.lce << " hkd=" << res.rrl_last_epoch.hkd
        << " rkd=" << res.rrl_last_epoch.rkd << " total=" << res.rrl_last_epoch.total
        << " synth_loss=" << res.synthesis_final_loss;
      log(m.str());
    }
  }
  write_report(dir / "report.json", report);
  log("done A_N=" + std::to_string(report.last()) + " avg=" + std::to_string(report.average()));
  return report;
}

inline fs::path seed_dir(const fs::path& out, std::uint64_t seed) { return out / ("seed_" + std::to_string(seed)); }

inline std::vector<RunReport> cmd_run(const ExperimentConfig& cfg, const RunOptions& opts = {}) {
  auto data = load_dataset(cfg.dataset);
  fs::create_directories(cfg.output_dir);
  write_text(cfg.output_dir / "config.lock", cfg.lock_text());
  std::vector<RunReport> reports;
  for (auto seed : cfg.protocol.seeds) reports.push_back(run_seed(cfg, seed, seed_dir(cfg.output_dir, seed), data, opts));
  return reports;
}

struct AblationVariant {
  std::string name;
  AblationFlags flags;
};

// Rows in the order of the ablation table: full model first.
inline std::vector<AblationVariant> ablation_variants(bool with_finetune) {
  std::vector<AblationVariant> v{{"full", {}}, {"no_rkd", {}}, {"no_hkd", {}}, {"no_chr", {}}};
  v[1].flags.no_rkd = true;
  v[2].flags.no_hkd = true;
  v[3].flags.no_chr = true;
  if (with_finetune) {
    AblationVariant f{"finetune", {}};
    f.flags.finetune = true;
    v.push_back(f);
  }
  return v;
}

inline ExperimentConfig with_ablation(const ExperimentConfig& base, const AblationFlags& f, const fs::path& out) {
  auto j = base.resolved;
  auto& a = j["trainer"]["ablation"];
  a["no_rkd"] = f.no_rkd;
  a["no_hkd"] = f.no_hkd;
  a["no_chr"] = f.no_chr;
  a["global_ce"] = f.global_ce;
  a["baseline_kd"] = f.baseline_kd;
  a["finetune"] = f.finetune;
  j["output"]["dir"] = out.string();
  return build_config(j);
}

struct AblationResult {
  std::vector<AblationVariant> variants;
  std::vector<std::vector<RunReport>> reports;  // per variant, per seed
  std::vector<AggregateRow> rows;
};

inline AblationResult cmd_ablate(const ExperimentConfig& base, bool with_finetune = false, const RunOptions& opts = {}) {
  auto data = load_dataset(base.dataset);
  fs::create_directories(base.output_dir);
  write_text(base.output_dir / "config.lock", base.lock_text());
  AblationResult res;
  res.variants = ablation_variants(with_finetune);
  for (const auto& v : res.variants) {
    auto cfg = with_ablation(base, v.flags, base.output_dir / v.name);
    std::vector<RunReport> rs;
    for (auto seed : cfg.protocol.seeds) rs.push_back(run_seed(cfg, seed, seed_dir(cfg.output_dir, seed), data, opts));
    res.rows.push_back(aggregate_runs(rs));
    res.reports.push_back(std::move(rs));
  }
  write_text(base.output_dir / "ablation.md", format_table(res.rows));
  return res;
}

struct ReportOutput {
  std::vector<AggregateRow> rows;
  std::vector<std::string> warnings;
  std::string table;
};

// Collects report.json files under each directory (the directory itself and
// up to two levels below), drops incomplete runs with a warning, aggregates
// per configuration and writes report.md, curves.csv and curves.svg to `out`.
inline ReportOutput cmd_report(const std::vector<fs::path>& run_dirs, const fs::path& out) {
  std::vector<fs::path> files;
  for (const auto& d : run_dirs) {
    if (!fs::exists(d)) throw std::runtime_error("run directory not found: " + d.string());
    if (fs::exists(d / "report.json")) files.push_back(d / "report.json");
    for (auto it = fs::recursive_directory_iterator(d); it != fs::recursive_directory_iterator(); ++it) {
      if (it.depth() > 2) {
        it.disable_recursion_pending();
        continue;
      }
      if (it->is_regular_file() && it->path().filename() == "report.json" && it->path().parent_path() != d) {
        files.push_back(it->path());
      }
    }
  }
  std::sort(files.begin(), files.end());
  files.erase(std::unique(files.begin(), files.end()), files.end());

  ReportOutput res;
  std::vector<RunReport> reports;
  for (const auto& f : files) {
    auto r = read_report(f);
    if (!r) {
      res.warnings.push_back("unreadable report, excluded: " + f.string());
    } else if (!r->complete()) {
      res.warnings.push_back("incomplete run, excluded: " + f.parent_path().string());
    } else {
      reports.push_back(*r);
    }
  }
  if (reports.empty()) throw std::runtime_error("no completed runs found");
  res.rows = aggregate_groups(reports);
  res.table = format_table(res.rows);

  fs::create_directories(out);
  write_text(out / "report.md", res.table);
  std::vector<Curve> curves;
  std::ostringstream csv;
  csv << "variant,phase,n_learned_classes,mean_accuracy,std_accuracy\n";
  for (const auto& row : res.rows) {
    // Class counts from any member run of this group.
    const RunReport* member = nullptr;
    for (const auto& r : reports) {
      if (r.group_key() == row.key) {
        member = &r;
        break;
      }
    }
    Curve c;
    c.label = row.variant;
    for (std::size_t i = 0; i < row.per_phase.size(); ++i) {
      const auto classes = i < member->learned_classes.size() ? member->learned_classes[i]
                                                              : static_cast<std::int64_t>(i + 1);
      c.x.push_back(static_cast<double>(classes));
      c.y.push_back(row.per_phase[i].mean * 100.0);
      csv << row.variant << ',' << i + 1 << ',' << classes << ',' << row.per_phase[i].mean << ','
          << row.per_phase[i].std.value_or(0.0) << '\n';
    }
    curves.push_back(std::move(c));
  }
  write_text(out / "curves.csv", csv.str());
  write_curves_svg(out / "curves.svg", curves, "Incremental accuracy");
  return res;
}

// Writes phase_<i>/synth_preview.png (k x k samples) for every stored generator.
inline std::vector<fs::path> synth_preview(const fs::path& run_dir, std::int64_t k, std::uint64_t seed = 0) {
  detail::require(k >= 1, "synth-preview: grid size must be >= 1");
  std::vector<fs::path> written;
  for (int i = 2;; ++i) {
    const auto phase_dir = run_dir / ("phase_" + std::to_string(i));
    if (!fs::exists(phase_dir)) break;
    if (!fs::exists(phase_dir / "generator")) continue;
    auto gen = load_generator(phase_dir / "generator");
    auto rng = detail::make_rng(seed);
    torch::NoGradGuard no_grad;
    auto z = torch::randn({k * k, gen->options().noise_dim}, rng, torch::TensorOptions());
    auto x = gen->forward(z);
    const auto& o = gen->options();
    auto lo = torch::tensor(o.low, torch::kFloat).view({1, -1, 1, 1});
    auto hi = torch::tensor(o.high, torch::kFloat).view({1, -1, 1, 1});
    auto file = phase_dir / "synth_preview.png";
    write_png_grid(file, (x - lo) / (hi - lo), k, std::max<std::int64_t>(1, 64 / o.output.height));
    written.push_back(file);
  }
  return written;
}

}  // namespace rdfcil
