#include "kpsr/links.hpp"

#include "kpsr/errors.hpp"

namespace kpsr {

std::uint64_t link_space(const FitSpaces& s) { return tensor_space(tensor_space(s.H, s.o), s.O); }

Design link_design(const RegressionBlocks& b) {
  return khatri_rao(khatri_rao(Design(b.H), Design(b.o)), Design(b.Os));
}

LinkWeights fit_links(const RegressionBlocks& b, const FitSpaces& s, double lambda_link) {
  if (b.size() < 1) throw ShapeError("cannot fit links on an empty window set");
  const Design X = link_design(b);
  Eigen::MatrixXd Y(1 + b.risks.rows(), static_cast<Eigen::Index>(b.size()));
  Y.row(0) = b.returns.transpose();
  if (b.risks.rows() > 0) Y.bottomRows(b.risks.rows()) = b.risks;
  const RidgeFit f = ridge_fit(Y, X, lambda_link);
  LinkWeights l;
  l.g = f.W.row(0).transpose();
  for (Eigen::Index i = 0; i < b.risks.rows(); ++i) l.m.push_back(f.W.row(1 + i).transpose());
  l.lambda = f.lambda;
  l.samples = static_cast<std::int64_t>(b.size());
  l.d_h = static_cast<int>(b.H.rows());
  l.d_o = static_cast<int>(b.o.rows());
  l.d_O = static_cast<int>(b.Os.rows());
  l.space = link_space(s);
  return l;
}

LinkWeights fit_links_on_policy(Environment& env, const OperatorBundle& bundle, const PolicyParams& policy,
                                int episodes, double lambda_link, std::uint64_t seed) {
  const auto& hmap = bundle.maps.history;
  BlockSampler sampler = [&](const Block& history, Rng& rng) {
    return policy_sample(policy, policy_features(bundle, hmap.features(history)), rng);
  };
  const auto trajs =
      rollout_block_policy(env, uniform_behavior(env.descriptor()), sampler, bundle.L, bundle.W, episodes, seed);
  const auto windows = make_windows(trajs, bundle.W, bundle.L);
  return fit_links(featurize_windows(windows, bundle.maps), bundle.spaces(), lambda_link);
}

namespace {

double contract(const Eigen::VectorXd& w, const Eigen::VectorXd& h, const Eigen::VectorXd& f, int d_o, int d_O) {
  // Weight index is (i_h * d_o + k) * d_O + j; f index is j * d_o + k.
  const Eigen::Map<const Eigen::MatrixXd> Wm(w.data(), static_cast<Eigen::Index>(d_o) * d_O, h.size());
  const Eigen::VectorXd gh = Wm * h;
  double v = 0.0;
  for (int k = 0; k < d_o; ++k)
    for (int j = 0; j < d_O; ++j) v += f[j * d_o + k] * gh[k * d_O + j];
  return v;
}

}  // namespace

ValueRisk block_value_risk(const LinkWeights& links, const OperatorBundle& bundle, const Eigen::VectorXd& h,
                           const Block& block) {
  const FitSpaces s = bundle.spaces();
  if (links.space != link_space(s)) throw SpaceMismatch("link weights were fit on other feature spaces");
  if (static_cast<int>(block.size()) != bundle.W + 1) throw ShapeError("action block must have W+1 steps");
  if (h.size() != links.d_h) throw ShapeError("history feature has the wrong length");
  const Eigen::VectorXd a = bundle.maps.action.features(Block{block[0]});
  const Eigen::VectorXd As = bundle.maps.test_actions.features(Block(block.begin() + 1, block.end()));
  const Eigen::VectorXd f = factorized_extended(bundle, h, a, As);
  ValueRisk out;
  out.value = contract(links.g, h, f, links.d_o, links.d_O);
  out.risks.resize(static_cast<Eigen::Index>(links.m.size()));
  for (std::size_t i = 0; i < links.m.size(); ++i)
    out.risks[static_cast<Eigen::Index>(i)] = contract(links.m[i], h, f, links.d_o, links.d_O);
  return out;
}

BlockEvaluator::BlockEvaluator(const LinkWeights& links, const OperatorBundle& bundle, Eigen::VectorXd h)
    : links_(&links), bundle_(&bundle), h_(std::move(h)) {}

ValueRisk BlockEvaluator::operator()(const Block& block) { return block_value_risk(*links_, *bundle_, h_, block); }

ValueRisk BlockEvaluator::code(long long code, const PolicyParams& p) {
  auto it = cache_.find(code);
  if (it != cache_.end()) return it->second;
  ValueRisk v = block_value_risk(*links_, *bundle_, h_, block_from_code(p, code));
  cache_.emplace(code, v);
  return v;
}

ValueEstimate eval_value(const LinkWeights& links, const OperatorBundle& bundle, const Eigen::VectorXd& h,
                         const PolicyParams& policy, int mc_samples, std::uint64_t seed) {
  if (mc_samples < 1) throw InvalidArgument("eval_value needs at least one Monte Carlo sample");
  BlockEvaluator ev(links, bundle, h);
  const Eigen::VectorXd x = policy_features(bundle, h);
  Rng rng(seed, 0x76616cULL);
  ValueEstimate out;
  out.risks = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(links.m.size()));
  out.mc_samples = mc_samples;
  out.seed = seed;
  Eigen::VectorXd probs;
  if (policy.discrete) probs = block_probabilities(policy, x);
  for (int i = 0; i < mc_samples; ++i) {
    ValueRisk vr = policy.discrete ? ev.code(sample_code(probs, rng.uniform()), policy) : ev(policy_sample(policy, x, rng));
    out.value += vr.value;
    out.risks += vr.risks;
  }
  out.value /= mc_samples;
  out.risks /= mc_samples;
  return out;
}

double bellman_loss(const LinkWeights& links1, const LinkWeights& links2, const std::vector<Eigen::VectorXd>& histories,
                    const PolicyParams& policy1, const PolicyParams& policy2, const OperatorBundle& bundle,
                    int mc_samples, std::uint64_t seed) {
  if (histories.empty()) throw InvalidArgument("Bellman loss needs at least one history");
  double acc = 0.0;
  for (std::size_t i = 0; i < histories.size(); ++i) {
    const std::uint64_t s = derive_seed(seed, i);
    acc += eval_value(links1, bundle, histories[i], policy1, mc_samples, s).value -
           eval_value(links2, bundle, histories[i], policy2, mc_samples, s).value;
  }
  return acc / static_cast<double>(histories.size());
}

}  // namespace kpsr
