#include "kpsr/policy.hpp"

#include <cmath>

#include "kpsr/errors.hpp"

namespace kpsr {

long long PolicyParams::num_blocks() const {
  long long n = 1;
  for (int i = 0; i < block_len; ++i) n *= num_actions;
  return n;
}

int PolicyParams::output_dim() const {
  return discrete ? static_cast<int>(num_blocks()) : block_len * action_dim;
}

PolicyParams make_policy(const OperatorBundle& bundle, const EnvDescriptor& d, double sigma) {
  if (!(sigma > 0.0)) throw ConfigError("policy noise scale must be positive");
  PolicyParams p;
  p.discrete = d.discrete_actions;
  p.num_actions = d.num_actions;
  p.action_dim = d.action_dim;
  p.block_len = bundle.W + 1;
  p.sigma = sigma;
  if (p.discrete && std::pow(static_cast<double>(p.num_actions), p.block_len) > 1e6)
    throw ConfigError("too many action blocks for a softmax policy");
  p.theta = Eigen::MatrixXd::Zero(p.output_dim(), bundle.shifted.n + 1);
  return p;
}

Eigen::VectorXd policy_features(const OperatorBundle& bundle, const Eigen::VectorXd& h) {
  const Eigen::VectorXd c = bundle.one_step_predict(h, bundle.mean_action);
  const Eigen::VectorXd u = bundle.forward_predict(h, bundle.mean_test_actions);
  const Eigen::VectorXd x = bundle.shifted.apply(kron(c, bundle.mean_action), u);
  Eigen::VectorXd out(x.size() + 1);
  out << x, 1.0;
  return out;
}

Eigen::VectorXd block_probabilities(const PolicyParams& p, const Eigen::VectorXd& x) {
  if (!p.discrete) throw UnsupportedError("block probabilities exist only for discrete actions");
  if (x.size() != p.theta.cols()) throw ShapeError("policy features have the wrong length");
  Eigen::VectorXd z = p.theta * x;
  if (!z.allFinite()) throw NumericalError("policy logits are not finite");
  z.array() -= z.maxCoeff();
  Eigen::VectorXd e = z.array().exp();
  return e / e.sum();
}

Eigen::VectorXd block_mean(const PolicyParams& p, const Eigen::VectorXd& x) {
  if (p.discrete) throw UnsupportedError("block mean exists only for continuous actions");
  if (x.size() != p.theta.cols()) throw ShapeError("policy features have the wrong length");
  return p.theta * x;
}

Block block_from_code(const PolicyParams& p, long long code) {
  Block b;
  for (int a : decode_block(code, p.num_actions, p.block_len)) b.push_back(Point{static_cast<double>(a)});
  return b;
}

Block block_from_vector(const PolicyParams& p, const Eigen::VectorXd& v) {
  Block b;
  for (int i = 0; i < p.block_len; ++i) {
    Point a(static_cast<std::size_t>(p.action_dim));
    for (int j = 0; j < p.action_dim; ++j) a[static_cast<std::size_t>(j)] = v[i * p.action_dim + j];
    b.push_back(std::move(a));
  }
  return b;
}

Eigen::VectorXd block_to_vector(const Block& b) {
  std::vector<double> flat;
  for (const auto& a : b) flat.insert(flat.end(), a.begin(), a.end());
  return Eigen::Map<Eigen::VectorXd>(flat.data(), static_cast<Eigen::Index>(flat.size()));
}

long long sample_code(const Eigen::VectorXd& probs, double u) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  for (Eigen::Index i = probs.size() - 1; i >= 0; --i)
    if (probs[i] > 0.0) return i;
  return probs.size() - 1;
}

Block policy_sample(const PolicyParams& p, const Eigen::VectorXd& x, Rng& rng) {
  if (p.discrete) return block_from_code(p, sample_code(block_probabilities(p, x), rng.uniform()));
  Eigen::VectorXd mu = block_mean(p, x);
  for (Eigen::Index i = 0; i < mu.size(); ++i) mu[i] += p.sigma * rng.normal();
  return block_from_vector(p, mu);
}

Block policy_sample(const PolicyParams& p, const OperatorBundle& bundle, const Eigen::VectorXd& h, std::uint64_t seed) {
  Rng rng(seed, 0x706f6cULL);
  return policy_sample(p, policy_features(bundle, h), rng);
}

void write_policy(ByteWriter& w, const PolicyParams& p) {
  w.u8(p.discrete ? 1 : 0);
  w.i64(p.num_actions);
  w.i64(p.action_dim);
  w.i64(p.block_len);
  w.f64(p.sigma);
  w.mat(p.theta);
}

PolicyParams read_policy(ByteReader& r) {
  PolicyParams p;
  p.discrete = r.u8() != 0;
  p.num_actions = static_cast<int>(r.i64());
  p.action_dim = static_cast<int>(r.i64());
  p.block_len = static_cast<int>(r.i64());
  p.sigma = r.f64();
  p.theta = r.mat();
  return p;
}

}  // namespace kpsr
