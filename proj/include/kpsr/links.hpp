#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include <Eigen/Dense>

#include "kpsr/env.hpp"
#include "kpsr/operators.hpp"
#include "kpsr/policy.hpp"

namespace kpsr {

// Link features phi^H(h) (x) phi^o(o_t) (x) phi^O(o_{t+1:t+W}).
std::uint64_t link_space(const FitSpaces& s);
Design link_design(const RegressionBlocks& b);

// Ridge regression of the (W+1)-step return and of each risk sum onto the link
// features. The windows should come from the policy being evaluated.
LinkWeights fit_links(const RegressionBlocks& b, const FitSpaces& s, double lambda_link);

// Fits links on fresh rollouts of the policy: L behaviour steps then one block.
LinkWeights fit_links_on_policy(Environment& env, const OperatorBundle& bundle, const PolicyParams& policy,
                                int episodes, double lambda_link, std::uint64_t seed);

// Model value and risks of one action block at history features h:
// <g_h, sum_k c_k P(e_k (x) phi^a(a) (x) u) (x) e_k>.
ValueRisk block_value_risk(const LinkWeights& links, const OperatorBundle& bundle, const Eigen::VectorXd& h,
                           const Block& block);

// Caches per-block values for one history (discrete blocks are keyed by code).
class BlockEvaluator {
 public:
  BlockEvaluator(const LinkWeights& links, const OperatorBundle& bundle, Eigen::VectorXd h);
  ValueRisk operator()(const Block& block);
  ValueRisk code(long long code, const PolicyParams& p);
  const Eigen::VectorXd& history() const { return h_; }

 private:
  const LinkWeights* links_;
  const OperatorBundle* bundle_;
  Eigen::VectorXd h_;
  std::map<long long, ValueRisk> cache_;
};

struct ValueEstimate {
  double value = 0.0;
  Eigen::VectorXd risks;
  int mc_samples = 0;
  std::uint64_t seed = 0;
};

ValueEstimate eval_value(const LinkWeights& links, const OperatorBundle& bundle, const Eigen::VectorXd& h,
                         const PolicyParams& policy, int mc_samples, std::uint64_t seed);

// Mean over histories of V(links1, policy1) - V(links2, policy2), with common random numbers.
double bellman_loss(const LinkWeights& links1, const LinkWeights& links2, const std::vector<Eigen::VectorXd>& histories,
                    const PolicyParams& policy1, const PolicyParams& policy2, const OperatorBundle& bundle,
                    int mc_samples, std::uint64_t seed);

}  // namespace kpsr
