// Command-line front end: trigact <stage> --config PATH --out DIR [--seed N] [--resume] [--parallel K]

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "trigact/experiment.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kConfig = 2;

int run(const std::string& stage, const std::string& config, const std::string& out, std::optional<std::uint64_t> seed,
        bool resume, std::size_t parallel) {
  auto cfg = trigact::load_experiment_config(config, seed);
  trigact::Experiment exp(std::move(cfg), trigact::RunOptions{out, resume, parallel});
  if (stage == "train") exp.train();
  else if (stage == "attack") exp.attack();
  else if (stage == "eval") exp.eval();
  else if (stage == "theory") exp.theory();
  else if (stage == "report") exp.report();
  else exp.all();
  const auto& c = exp.counters();
  spdlog::info("done: trained {} (cached {}), attacked {} (cached {}), eval cells {} (cached {}), theory {} (cached {})",
               c.trained, c.train_hits, c.attacked, c.attack_hits, c.evaluated, c.eval_hits, c.theory_runs,
               c.theory_hits);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Trigger-activated models: training, transfer attacks, evaluation and reports"};
  app.require_subcommand(1);
  std::string config, out = "runs/experiment";
  std::optional<std::uint64_t> seed;
  bool resume = false, verbose = false;
  std::size_t parallel = 0;
  for (const char* name : {"train", "attack", "eval", "theory", "report", "all"}) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", out, "artifact directory");
    sub->add_option("--seed", seed, "base seed mixed into every configured seed");
    sub->add_flag("--resume", resume, "reuse matching artifacts of a run with a different config");
    sub->add_option("--parallel", parallel, "worker threads for independent cells")->check(CLI::PositiveNumber);
    sub->add_flag("-v,--verbose", verbose, "debug logging");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kConfig;
  }
  spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);
  const std::string stage = app.get_subcommands().front()->get_name();
  try {
    return run(stage, config, out, seed, resume, parallel);
  } catch (const trigact::Error& e) {
    spdlog::error("{}", e.what());
    return e.exit_code();
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
}
