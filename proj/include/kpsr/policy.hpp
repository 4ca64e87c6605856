#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "kpsr/env.hpp"
#include "kpsr/operators.hpp"

namespace kpsr {

// Policy over open-loop (W+1)-step action blocks a_{t-1:t+W-1}. The input is
// x(h) = [P_{c (x) abar} F(phi^H(h) (x) Abar); 1], the predicted shifted
// observation embedding plus a bias.
struct PolicyParams {
  bool discrete = true;
  int num_actions = 0;  // discrete alphabet size
  int action_dim = 1;   // continuous action dimension
  int block_len = 0;    // W + 1
  double sigma = 0.1;   // continuous exploration scale
  Eigen::MatrixXd theta;

  long long num_blocks() const;
  int output_dim() const;
};

PolicyParams make_policy(const OperatorBundle& bundle, const EnvDescriptor& d, double sigma = 0.1);

Eigen::VectorXd policy_features(const OperatorBundle& bundle, const Eigen::VectorXd& h);

// Softmax block probabilities (discrete) for the given policy features.
Eigen::VectorXd block_probabilities(const PolicyParams& p, const Eigen::VectorXd& x);
// Gaussian mean of the stacked action block (continuous).
Eigen::VectorXd block_mean(const PolicyParams& p, const Eigen::VectorXd& x);

Block block_from_code(const PolicyParams& p, long long code);
Block block_from_vector(const PolicyParams& p, const Eigen::VectorXd& v);
Eigen::VectorXd block_to_vector(const Block& b);

// One draw from the policy, driven by a single uniform (discrete, inverse CDF)
// or a vector of standard normals (continuous).
long long sample_code(const Eigen::VectorXd& probs, double u);

Block policy_sample(const PolicyParams& p, const OperatorBundle& bundle, const Eigen::VectorXd& h, std::uint64_t seed);
Block policy_sample(const PolicyParams& p, const Eigen::VectorXd& x, Rng& rng);

void write_policy(ByteWriter& w, const PolicyParams& p);
PolicyParams read_policy(ByteReader& r);

}  // namespace kpsr
