#include <cstdlib>
#include <filesystem>
#include <iostream>

#include <CLI11.hpp>
#include <Eigen/Core>

#include "kpsr/acceptance.hpp"
#include "kpsr/errors.hpp"
#include "kpsr/experiment.hpp"

namespace {

enum Exit { kOk = 0, kFailed = 1, kConfig = 2, kNumerical = 3, kInfeasible = 4 };

void apply_thread_cap() {
  if (const char* t = std::getenv("KPSR_THREADS")) {
    const int n = std::atoi(t);
    if (n > 0) Eigen::setNbThreads(n);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Kernel predictive-state models for risk-constrained control"};
  app.set_version_flag("--version", kpsr::kToolVersion);
  app.require_subcommand(1);

  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  bool resume = false;
  int stop_after = -1;
  std::vector<int> only;

  auto common = [&](CLI::App* c, bool config_required) {
    auto* o = c->add_option("--config", config, "experiment config (JSON)");
    if (config_required) o->required()->check(CLI::ExistingFile);
    c->add_option("--seed", seed, "override the config seed");
    c->add_option("--out", out, "override the output directory");
  };
  auto* gen = app.add_subcommand("generate", "simulate behaviour-policy trajectories");
  auto* fit = app.add_subcommand("fit", "fit the operator bundle");
  auto* trn = app.add_subcommand("train", "run constrained policy training");
  auto* evl = app.add_subcommand("evaluate", "compare the trained policy with exact oracles");
  auto* dia = app.add_subcommand("diagnose", "convergence-rate and link diagnostics");
  auto* all = app.add_subcommand("run-all", "run the full acceptance suite");
  for (auto* c : {gen, fit, trn, evl, dia}) common(c, true);
  trn->add_flag("--resume", resume, "continue from the checkpoint in the output directory");
  trn->add_option("--stop-after", stop_after, "stop after this many iterations (for testing resume)");
  all->add_option("--config", config, "config directory, or any config file inside it")->check(CLI::ExistingPath);
  all->add_option("--seed", seed, "override the seeds of the shipped configs");
  all->add_option("--out", out, "scratch directory");
  all->add_option("--only", only, "run only these criteria");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }
  apply_thread_cap();

  try {
    if (all->parsed()) {
      kpsr::AcceptanceOptions opt;
      if (!config.empty())
        opt.config_dir = std::filesystem::is_directory(config) ? config
                                                               : std::filesystem::path(config).parent_path().string();
      if (out) opt.work_dir = *out;
      opt.seed = seed;
      opt.only = only;
      const auto results = kpsr::run_acceptance(opt, std::cout);
      int passed = 0;
      for (const auto& r : results) passed += r.pass ? 1 : 0;
      std::cout << passed << "/" << results.size() << " criteria passed\n";
      return passed == static_cast<int>(results.size()) ? kOk : kFailed;
    }
    const kpsr::ExperimentConfig cfg = kpsr::load_config(config, seed, out);
    if (gen->parsed()) kpsr::cmd_generate(cfg);
    if (fit->parsed()) kpsr::cmd_fit(cfg);
    if (trn->parsed()) {
      const kpsr::TrainState s = kpsr::cmd_train(cfg, resume, stop_after);
      if (s.finished && !s.feasible) {
        std::cerr << "training finished with violated constraints\n";
        return kInfeasible;
      }
    }
    if (evl->parsed()) kpsr::cmd_evaluate(cfg);
    if (dia->parsed()) kpsr::cmd_diagnose(cfg);
  } catch (const kpsr::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const kpsr::InfeasibleError& e) {
    std::cerr << "infeasible: " << e.what() << "\n";
    return kInfeasible;
  } catch (const kpsr::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const kpsr::Error& e) {
    // Format, shape, oracle and argument errors all stem from the inputs the user supplied.
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  }
  return kOk;
}
