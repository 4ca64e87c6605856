#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "kpsr/env.hpp"
#include "kpsr/operators.hpp"
#include "kpsr/train.hpp"

namespace kpsr {

inline constexpr const char* kToolVersion = "kpsr 1.0.0";

struct FeatureConfig {
  KernelSpec spec;
  BlockMode mode = BlockMode::Tensor;
  bool bandwidth_auto = false;
  bool pad = false;
};

struct ExperimentConfig {
  std::string env_path;
  int W = 2;
  int L = 1;
  FeatureConfig history, test_actions, test_observations, action, observation;
  double lambda = 0.0;       // non-positive: default schedule
  double lambda_link = 0.0;  // non-positive: default schedule
  int episodes = 1000;
  int T = 20;
  double heldout = 0.1;
  int mc_samples = 1000;
  TrainConfig train;
  double min_history_freq = 0.02;
  int max_batch = 32;
  std::vector<int> k_grid{2000, 8000, 32000};
  int diagnose_seeds = 5;
  int eval_windows = 5000;
  long long max_domain_dim = 1LL << 20;
  std::uint64_t seed = 0;
  std::string out_dir;
  std::string canonical;  // canonical JSON the hash is computed from
  std::uint64_t hash = 0;

  std::string provenance() const;  // "config=<hash> version=<tool>"
  std::uint64_t stream(std::uint64_t id) const { return derive_seed(seed, id); }
};

// Seed streams derived from the single top-level seed.
namespace streams {
inline constexpr std::uint64_t data = 1, split = 2, features = 3, fit = 4, train = 5, diagnose = 6, evaluate = 7;
}

ExperimentConfig parse_config(const std::string& text, const std::string& base_dir,
                              std::optional<std::uint64_t> seed_override = std::nullopt,
                              std::optional<std::string> out_override = std::nullopt);
ExperimentConfig load_config(const std::string& path, std::optional<std::uint64_t> seed_override = std::nullopt,
                             std::optional<std::string> out_override = std::nullopt);

Environment make_environment(const ExperimentConfig& cfg);

// Builds the five feature maps, resolving median-heuristic bandwidths on the given windows.
SpaceMaps build_maps(const ExperimentConfig& cfg, const EnvDescriptor& d, const std::vector<WindowSample>& windows);

struct Dataset {
  std::vector<Trajectory> trajectories;
  DatasetSplit split;
  SpaceMaps maps;
  RegressionBlocks train, heldout;
};

// Generates episodes for the config's environment with a given seed.
std::vector<Trajectory> generate_trajectories(const ExperimentConfig& cfg, Environment& env, int episodes,
                                              std::uint64_t seed);
Dataset prepare_dataset(const ExperimentConfig& cfg, const EnvDescriptor& d, std::vector<Trajectory> trajs);

// ----- commands; each writes into cfg.out_dir -----

std::string trajectories_path(const ExperimentConfig& cfg);
std::string bundle_path(const ExperimentConfig& cfg);
std::string checkpoint_path(const ExperimentConfig& cfg);
std::string log_path(const ExperimentConfig& cfg);

void cmd_generate(const ExperimentConfig& cfg);
void cmd_fit(const ExperimentConfig& cfg);
// Returns the final training state; resume continues from the checkpoint if present.
TrainState cmd_train(const ExperimentConfig& cfg, bool resume = false, int stop_after = -1);
void cmd_evaluate(const ExperimentConfig& cfg);
void cmd_diagnose(const ExperimentConfig& cfg);

// ----- diagnostics helpers shared with the acceptance suite -----

// Least-squares slope of log(error) against log(K).
double loglog_slope(const std::vector<double>& K, const std::vector<double>& err);

// Root mean square L2 error of forward predictions against the exact test
// distribution over the given windows (tabular, one-hot observation blocks).
double forward_oracle_error(const TabularPOMDP& m, const OperatorBundle& bundle, const EmbeddingOperator& forward,
                            const std::vector<WindowSample>& windows);

// Converts a history block / action block of symbols to integer codes.
std::vector<int> symbols(const Block& b);

}  // namespace kpsr

namespace kpsr {

// Forward-operator oracle error against K, refit on fresh data per seed.
struct ErrorCurve {
  std::vector<int> K;
  std::vector<std::vector<double>> errors;  // [K index][seed]
  std::vector<double> mean;
  double slope = 0.0;  // least-squares slope of log mean error on log K
};

// Tabular environments use forward_oracle_error; linear-Gaussian ones with
// linear observation features use the relative error to the conditional mean.
ErrorCurve forward_error_curve(const ExperimentConfig& cfg, Environment& env);

// |BL| trace between consecutive link refits on cumulative policy rollouts:
// refit r uses the first r * episodes_per_refit episodes.
std::vector<double> bellman_trace(Environment& env, const OperatorBundle& bundle, const PolicyParams& policy,
                                  const std::vector<Eigen::VectorXd>& histories, int refits, int episodes_per_refit,
                                  double lambda_link, int mc_samples, std::uint64_t seed);

// Policy whose softmax concentrates on the chosen block code for each history;
// theta is the minimum-norm solution of theta [x_i; 1] = scale * e_{code_i}.
PolicyParams concentrated_policy(const OperatorBundle& bundle, const EnvDescriptor& d,
                                 const std::vector<Eigen::VectorXd>& histories, const std::vector<long long>& codes,
                                 double scale);

}  // namespace kpsr
