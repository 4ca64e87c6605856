#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "kpsr/links.hpp"
#include "kpsr/policy.hpp"

namespace kpsr {

// J = V - sum_i eta_i (C_i - Cbar_i)^+
double lagrangian(double V, const Eigen::VectorXd& C, const Eigen::VectorXd& Cbar, const Eigen::VectorXd& eta);

struct DualVars {
  Eigen::VectorXd eta;
  double beta0 = 0.5;
  double beta(int k) const;  // beta0 / sqrt(k)
};

// eta <- [eta + beta (C - Cbar)]^+
DualVars dual_step(const DualVars& d, const Eigen::VectorXd& C, const Eigen::VectorXd& Cbar, double beta);

// Start histories the policy is optimized over.
struct HistoryBatch {
  std::vector<Block> histories;
  std::vector<Eigen::VectorXd> features;
  std::vector<double> frequency;
};

// Distinct history suffixes whose empirical frequency is at least min_freq; if
// none qualifies (continuous data), max_batch histories drawn at random.
HistoryBatch select_histories(const std::vector<WindowSample>& windows, const FeatureMap& history_map, double min_freq,
                              int max_batch, std::uint64_t seed);

// Batch objective with common random numbers: every evaluation at any theta
// reuses the same uniforms / normals per history.
class BatchObjective {
 public:
  BatchObjective(const LinkWeights& links, const OperatorBundle& bundle, const std::vector<Eigen::VectorXd>& histories,
                 Eigen::VectorXd eta, Eigen::VectorXd cbar, int mc_samples, std::uint64_t seed);

  std::size_t size() const { return x_.size(); }
  const Eigen::VectorXd& features(std::size_t i) const { return x_[i]; }
  BlockEvaluator& evaluator(std::size_t i) { return evals_[i]; }
  const Eigen::VectorXd& cbar() const { return cbar_; }
  const Eigen::VectorXd& eta() const { return eta_; }

  // Monte Carlo per-history value and risks.
  ValueRisk history_value(const PolicyParams& p, std::size_t i);
  // Exact expectation over blocks under the model (discrete only).
  ValueRisk history_value_exact(const PolicyParams& p, std::size_t i);

  double evaluate(const PolicyParams& p);
  double evaluate_exact(const PolicyParams& p);
  // Score-function gradient with a mean baseline, normalized by M-1 so it is unbiased.
  Eigen::MatrixXd gradient(const PolicyParams& p);
  // Inverse of the regularized Gram matrix of the batch features. Policy features
  // of different histories are nearly collinear, so the raw gradient moves all
  // logits together; right-multiplying by this matrix decouples them.
  const Eigen::MatrixXd& preconditioner() const { return precond_; }

  // True when no block meets every constraint under the model (discrete only).
  bool no_feasible_block(const PolicyParams& p, std::size_t i);

 private:
  struct Draw {
    long long code = 0;
    Eigen::VectorXd action;  // continuous block
    Eigen::VectorXd noise;   // standard normals behind the continuous draw
  };
  std::vector<Draw> draws(const PolicyParams& p, std::size_t i) const;
  ValueRisk draw_value(const PolicyParams& p, std::size_t i, const Draw& d);

  const OperatorBundle* bundle_;
  std::vector<Eigen::VectorXd> x_;
  Eigen::MatrixXd precond_;
  std::vector<BlockEvaluator> evals_;
  Eigen::VectorXd eta_, cbar_;
  int mc_;
  std::uint64_t seed_;
};

struct StepResult {
  PolicyParams policy;
  double J_before = 0.0;
  double J_after = 0.0;
  double alpha = 0.0;
  bool accepted = false;
  Eigen::MatrixXd gradient;   // raw gradient of J
  Eigen::MatrixXd direction;  // preconditioned ascent direction
};

// Gradient ascent step with backtracking: halve alpha until the batch J does
// not decrease, at most max_halvings times.
StepResult policy_step(const PolicyParams& p, BatchObjective& obj, double alpha0, int max_halvings = 8);

struct TrainConfig {
  int iterations = 50;
  double alpha0 = 10.0;
  double beta0 = 0.5;
  int mc_samples = 1000;
  Eigen::VectorXd cbar;  // +infinity for an inactive constraint
  int link_episodes = 20000;
  double lambda_link = 0.0;  // non-positive selects the default schedule
  int checkpoint_every = 10;
  double feasibility_tol = 0.05;
  double sigma = 0.1;
  std::uint64_t seed = 0;
};

struct LogRow {
  int k = 0;
  double J = 0.0, V = 0.0;
  Eigen::VectorXd C, eta;
  double alpha = 0.0;
  bool accepted = false;
};

struct TrainState {
  int k = 0;
  PolicyParams policy;
  Eigen::VectorXd eta;
  LinkWeights links;
  std::vector<LogRow> rows;
  std::vector<int> flagged;  // batch indices with no feasible block (Case-1)
  std::uint64_t seed = 0;
  bool finished = false;
  bool feasible = false;
  std::string provenance;
};

constexpr std::uint32_t kCheckpointVersion = 1;
std::string serialize_state(const TrainState& s);
TrainState deserialize_state(const std::string& bytes);

struct TrainIO {
  std::string log_path;         // empty: no log file
  std::string checkpoint_path;  // empty: no checkpoints
  std::string comment;          // first log line, e.g. config hash and tool version
};

std::string format_log(const TrainState& s, const std::string& comment);

// Per-history value and risks of the current policy under the model (exact
// over blocks when discrete, Monte Carlo otherwise).
std::vector<ValueRisk> policy_values(const TrainState& s, const OperatorBundle& bundle, const HistoryBatch& batch,
                                     int mc_samples, std::uint64_t seed);

// Runs (or resumes) the primal-dual loop. stop_after >= 0 ends the run after
// that iteration without finishing, which is how interruption is simulated.
TrainState train(const TrainConfig& cfg, Environment& env, const OperatorBundle& bundle, const HistoryBatch& batch,
                 const TrainIO& io, const TrainState* resume = nullptr, int stop_after = -1);

}  // namespace kpsr
