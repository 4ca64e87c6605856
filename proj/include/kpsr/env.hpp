#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "kpsr/data.hpp"
#include "kpsr/rng.hpp"

namespace kpsr {

struct EnvDescriptor {
  bool discrete_actions = true;
  int num_actions = 0;  // discrete only
  int action_dim = 1;
  bool discrete_observations = true;
  int num_observations = 0;  // discrete only
  int observation_dim = 1;
  int num_risks = 0;
};

struct TabularPOMDP {
  int S = 0, O = 0, A = 0;
  std::vector<Eigen::MatrixXd> T;  // T[a](s', s)
  Eigen::MatrixXd emission;        // (o, s)
  Eigen::VectorXd reward;          // per state
  Eigen::MatrixXd risk;            // (i, s)
  Eigen::VectorXd initial;

  // Throws ConfigError when a stochastic slice is off by more than 1e-12 or
  // the emission matrix is rank deficient.
  void validate() const;
  double emission_min_singular_value() const;
};

struct LinearGaussianSystem {
  Eigen::MatrixXd A, B, C;
  double process_noise = 0.0;      // standard deviation per state component
  double observation_noise = 0.0;  // standard deviation per observation component
  Eigen::VectorXd initial_mean;
  Eigen::MatrixXd initial_cov;
  double behavior_action_std = 1.0;
  Eigen::MatrixXd reward_weight;  // reward = -s' Q s'

  void validate() const;
  Eigen::MatrixXd Q() const;
  Eigen::MatrixXd R() const;
};

class Environment {
 public:
  Environment(TabularPOMDP m, std::string name = "tabular");
  Environment(LinearGaussianSystem m, std::string name = "linear-gaussian");

  EnvDescriptor descriptor() const;
  const std::string& name() const { return name_; }
  std::uint64_t config_hash() const { return hash_; }
  void set_config_hash(std::uint64_t h) { hash_ = h; }

  void reset(std::uint64_t seed);
  StepRecord step(const Point& action);

  const TabularPOMDP* tabular() const { return std::get_if<TabularPOMDP>(&model_); }
  const LinearGaussianSystem* linear() const { return std::get_if<LinearGaussianSystem>(&model_); }

  int state() const { return s_; }
  const Eigen::VectorXd& continuous_state() const { return x_; }

 private:
  std::variant<TabularPOMDP, LinearGaussianSystem> model_;
  std::string name_;
  std::uint64_t hash_ = 0;
  Rng rng_{0};
  int s_ = 0;
  Eigen::VectorXd x_;
};

// Parses a structured-text (JSON) environment description with inline matrices.
Environment environment_from_json(const std::string& text);
Environment load_environment(const std::string& path);

// Behaviour policy: picks the next action given the records so far.
using BehaviorPolicy = std::function<Point(const std::vector<StepRecord>&, Rng&)>;
BehaviorPolicy uniform_behavior(const EnvDescriptor& d, double gaussian_std = 1.0);

std::vector<Trajectory> rollout(Environment& env, const BehaviorPolicy& behavior, int episodes, int T,
                                std::uint64_t seed);

// Draws the (W+1)-step action block a_{t-1:t+W-1} for a history suffix.
using BlockSampler = std::function<Block(const Block& history, Rng& rng)>;

// Each episode takes L behaviour steps and then executes one block from the
// sampler, so it yields exactly one window anchored at t = L.
std::vector<Trajectory> rollout_block_policy(Environment& env, const BehaviorPolicy& behavior, const BlockSampler& blocks,
                                             int L, int W, int episodes, std::uint64_t seed);

// ----- exact oracles for tabular models -----

Eigen::VectorXd stationary_distribution(const Eigen::MatrixXd& P);
Eigen::VectorXd action_averaged_stationary(const TabularPOMDP& m);

// Exact filter over an (action, observation) suffix from the initial distribution.
// Padded (empty) steps are skipped. Throws InvalidArgument on zero-probability histories.
Eigen::VectorXd belief_from_history(const TabularPOMDP& m, const Block& history);

void check_belief(const TabularPOMDP& m, const Eigen::VectorXd& belief);

// P(o-block | h, do(a-block)) by forward filtering; the action a_{t-1} precedes o_t.
double exact_test_probability(const TabularPOMDP& m, const Eigen::VectorXd& belief, const std::vector<int>& actions,
                              const std::vector<int>& observations);

// Full distribution over |O|^W observation blocks, first step most significant.
Eigen::VectorXd test_distribution(const TabularPOMDP& m, const Eigen::VectorXd& belief, const std::vector<int>& actions);

struct ValueRisk {
  double value = 0.0;
  Eigen::VectorXd risks;
};

constexpr double kDefaultEnumerationCap = 1e8;

ValueRisk exact_value_risk(const TabularPOMDP& m, const Eigen::VectorXd& belief, const std::vector<int>& block,
                           double cap = kDefaultEnumerationCap);

// Expectation over a distribution of blocks, given as probabilities indexed by
// the mixed-radix block code (first action most significant).
ValueRisk exact_value_risk(const TabularPOMDP& m, const Eigen::VectorXd& belief, const Eigen::VectorXd& block_probs,
                           int block_len, double cap = kDefaultEnumerationCap);

std::vector<int> decode_block(long long code, int radix, int len);
long long encode_block(const std::vector<int>& block, int radix);

// ----- linear-Gaussian oracles -----

struct GaussianState {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

// Lyapunov fixed point of the state covariance under i.i.d. behaviour actions.
Eigen::MatrixXd lgs_stationary_cov(const LinearGaussianSystem& s, double action_std);

// Kalman filter over history records (each step = concat(action, observation))
// starting from the initial prior; returns the filtered state after the last record.
GaussianState kalman_filter(const LinearGaussianSystem& s, const Block& history);

// E[o_{t..t+k-1} | h, do(a_{t-1..t+k-2})] = Gamma_k s_hat + U_k a, stacked.
Eigen::VectorXd lgs_conditional_mean(const LinearGaussianSystem& s, const Block& history, const Block& actions);

// Fixed point of the predicted-covariance Riccati recursion.
Eigen::MatrixXd riccati_fixed_point(const LinearGaussianSystem& s, int max_iter = 100000, double tol = 1e-15);

}  // namespace kpsr
