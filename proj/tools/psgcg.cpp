// SPDX-License-Identifier: Apache-2.0
//
// psgcg: command-line front end for the search engine.
//
//   psgcg run      --config cfg.json [--mode ps] [--seed 3] [--steps 200] [--out dir] [--scorer toy|bridge:CMD]
//   psgcg bench    --config cfg.json [--out dir]
//   psgcg validate [correlation|gradient|equivalence|all]
//   psgcg export-model --config cfg.json --out model.json

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "ps/harness.hpp"
#include "ps/validate.hpp"

namespace {

struct Overrides {
  std::string config;
  std::optional<std::string> mode;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
  std::optional<std::string> out;
  std::optional<std::string> scorer;
  bool sequential = false;
};

ps::ExperimentConfig load(const Overrides& o) {
  auto cfg = ps::load_config(o.config);
  if (o.mode) {
    cfg.mode = ps::parse_mode(*o.mode);
    if (ps::uses_draft(cfg.mode) && !cfg.draft) throw ps::ConfigError("--mode " + *o.mode + " requires a draft model in the config");
  }
  if (o.seed) cfg.seed = *o.seed;
  if (o.steps) {
    if (*o.steps < 1) throw ps::ConfigError("--steps must be >= 1");
    cfg.search.steps = *o.steps;
  }
  if (o.out) cfg.out_dir = *o.out;
  if (o.sequential) cfg.search.parallel = false;
  if (o.scorer) {
    const std::string& s = *o.scorer;
    if (s == "toy") {
      cfg.target.kind = ps::ModelKind::kToy;
    } else if (s.rfind("bridge:", 0) == 0 && s.size() > 7) {
      cfg.target.kind = ps::ModelKind::kBridge;
      cfg.target.command = s.substr(7);
    } else {
      throw ps::ConfigError("--scorer expects toy or bridge:<command>, got '" + s + "'");
    }
  }
  return cfg;
}

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--mode", o.mode, "gcg | ps | gcg-anneal | ps-anneal");
  cmd->add_option("--seed", o.seed, "run seed");
  cmd->add_option("--steps", o.steps, "maximum iterations");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--scorer", o.scorer, "target scorer: toy | bridge:<command>");
  cmd->add_flag("--sequential", o.sequential, "evaluate the draft batch and probe set one after the other");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Greedy coordinate gradient search with probe sampling"};
  app.require_subcommand(1);

  Overrides run_o, bench_o, export_o;
  auto* run_cmd = app.add_subcommand("run", "run one search and write run.jsonl + summary");
  add_common(run_cmd, run_o);
  auto* bench_cmd = app.add_subcommand("bench", "compare modes over seeds");
  add_common(bench_cmd, bench_o);
  std::string suite = "all";
  auto* validate_cmd = app.add_subcommand("validate", "run built-in invariant suites");
  validate_cmd->add_option("suite", suite, "correlation | gradient | equivalence | all");
  auto* export_cmd = app.add_subcommand("export-model", "write the configured target toy model as JSON");
  add_common(export_cmd, export_o);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run_cmd) {
      const auto cfg = load(run_o);
      const int rc = ps::run_experiment(cfg, cfg.out_dir);
      std::cout << std::filesystem::path(cfg.out_dir) / "summary.txt" << '\n';
      std::ifstream in(std::filesystem::path(cfg.out_dir) / "summary.txt");
      std::cout << in.rdbuf();
      return rc;
    }
    if (*bench_cmd) {
      const auto cfg = load(bench_o);
      const auto rep = ps::bench_compare(cfg);
      std::filesystem::create_directories(cfg.out_dir);
      const std::filesystem::path dir(cfg.out_dir);
      ps::write_text(dir / "bench.json", ps::bench_to_json(rep).dump(2) + "\n");
      ps::write_text(dir / "bench.txt", ps::bench_table(rep));
      std::cout << ps::bench_table(rep);
      for (const auto& r : rep.runs)
        if (r.error) return 1;
      return 0;
    }
    if (*validate_cmd) {
      bool ok = true;
      for (const auto& r : ps::checks::run_suite(suite)) {
        std::cout << (r.pass ? "PASS " : "FAIL ") << r.name << ": " << r.detail << '\n';
        ok = ok && r.pass;
      }
      return ok ? 0 : 1;
    }
    if (*export_cmd) {
      const auto cfg = load(export_o);
      const auto as = ps::assemble(cfg, cfg.seed, false);
      if (!as.target_params) throw ps::ConfigError("export-model needs a toy target");
      const std::string path = export_o.out.value_or("model.json");
      ps::save_toylm(*as.target_params, path);
      std::cout << path << '\n';
      return 0;
    }
  } catch (const ps::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const ps::ValidationError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
