#include <doctest.h>

#include "helpers.hpp"
#include "kpsr/errors.hpp"
#include "kpsr/links.hpp"
#include "kpsr/policy.hpp"

using namespace kpsr;
using namespace kpsr::testing;

namespace {

struct Fitted {
  TabData data;
  OperatorBundle bundle;
  LinkWeights links;
};

Fitted fit_all(const TabularPOMDP& m, int W, int episodes, int T, std::uint64_t seed, double lambda = 0.0,
               double lambda_link = 0.0) {
  Fitted f{tab_data(m, W, 1, episodes, T, seed), {}, {}};
  FitOptions opt;
  opt.lambda = lambda;
  f.bundle = fit_bundle(f.data.maps, W, 1, f.data.blocks, opt);
  f.links = fit_links(f.data.blocks, f.bundle.spaces(), lambda_link);
  return f;
}

std::vector<Eigen::VectorXd> all_histories(const TabularPOMDP& m, const SpaceMaps& maps) {
  std::vector<Eigen::VectorXd> out;
  for (int a = 0; a < m.A; ++a)
    for (int o = 0; o < m.O; ++o) out.push_back(maps.history.features(history_block({{a, o}})));
  return out;
}

}  // namespace

TEST_CASE("zero rewards give zero link weights and zero values") {
  auto m = sticky3();
  m.reward.setZero();
  m.risk.setZero();
  const auto f = fit_all(m, 1, 200, 20, 1);
  CHECK(f.links.g.cwiseAbs().maxCoeff() == 0.0);
  CHECK(f.links.m.size() == 1);
  const Eigen::VectorXd h = f.data.maps.history.features(history_block({{0, 1}}));
  const auto vr = block_value_risk(f.links, f.bundle, h, symbols_block({1, 0}));
  CHECK(vr.value == 0.0);
  CHECK(vr.risks[0] == 0.0);
}

TEST_CASE("unit rewards give a value of W+1") {
  auto m = sticky3();
  m.reward.setOnes();
  const auto f = fit_all(m, 2, 2000, 20, 2);
  for (int a = 0; a < 2; ++a)
    for (int o = 0; o < 3; ++o) {
      const Eigen::VectorXd h = f.data.maps.history.features(history_block({{a, o}}));
      for (const auto& block : {symbols_block({0, 0, 0}), symbols_block({1, 0, 1})})
        CHECK(block_value_risk(f.links, f.bundle, h, block).value == doctest::Approx(3.0).epsilon(0.05 / 3.0));
    }
}

// The one-step history must summarize the state well for the factorized
// prediction to be consistent, so this uses the low-noise model.
TEST_CASE("model block values approach the exact values on a tabular model") {
  const auto m = sticky3();
  const auto f = fit_all(m, 1, 3000, 20, 3);
  double worst = 0.0, worst_risk = 0.0;
  for (int a0 = 0; a0 < 2; ++a0)
    for (int o = 0; o < 3; ++o) {
      const Block hist = history_block({{a0, o}});
      const Eigen::VectorXd b = belief_from_history(m, hist);
      const Eigen::VectorXd h = f.data.maps.history.features(hist);
      for (int code = 0; code < 4; ++code) {
        const std::vector<int> block{code / 2, code % 2};
        const auto exact = exact_value_risk(m, b, block);
        const auto model = block_value_risk(f.links, f.bundle, h, symbols_block(block));
        worst = std::max(worst, std::abs(model.value - exact.value));
        worst_risk = std::max(worst_risk, std::abs(model.risks[0] - exact.risks[0]));
      }
    }
  CHECK(worst <= 0.05);
  CHECK(worst_risk <= 0.05);
}

TEST_CASE("deterministic cycle value is exact") {
  const auto f = fit_all(cycle3(), 2, 300, 20, 4, 1e-9, 1e-9);
  for (int a0 = 0; a0 < 2; ++a0)
    for (int o = 0; o < 3; ++o) {
      const Eigen::VectorXd h = f.data.maps.history.features(history_block({{a0, o}}));
      const auto vr = block_value_risk(f.links, f.bundle, h, symbols_block({0, 0, 0}));
      CHECK(vr.value == doctest::Approx(3.0).epsilon(1e-3 / 3.0));
      CHECK(vr.risks[0] == doctest::Approx(1.0).epsilon(1e-3));
    }
}

TEST_CASE("block value is linear in the link weights") {
  const auto f = fit_all(sticky3(), 1, 300, 20, 5);
  LinkWeights zero = f.links, mix = f.links;
  zero.g.setZero();
  mix.g = 2.0 * f.links.g + 0.5 * f.links.m[0];
  const Eigen::VectorXd h = f.data.maps.history.features(history_block({{1, 2}}));
  const Block block = symbols_block({0, 1});
  const auto base = block_value_risk(f.links, f.bundle, h, block);
  CHECK(block_value_risk(zero, f.bundle, h, block).value == 0.0);
  CHECK(block_value_risk(mix, f.bundle, h, block).value ==
        doctest::Approx(2.0 * base.value + 0.5 * base.risks[0]).epsilon(1e-12));
}

TEST_CASE("block evaluation checks its inputs") {
  const auto f = fit_all(sticky3(), 1, 100, 20, 6);
  const Eigen::VectorXd h = f.data.maps.history.features(history_block({{1, 2}}));
  CHECK_THROWS_AS(block_value_risk(f.links, f.bundle, h, symbols_block({0})), ShapeError);
  CHECK_THROWS_AS(block_value_risk(f.links, f.bundle, h.head(3), symbols_block({0, 1})), ShapeError);
  LinkWeights other = f.links;
  other.space ^= 1;
  CHECK_THROWS_AS(block_value_risk(other, f.bundle, h, symbols_block({0, 1})), SpaceMismatch);
}

TEST_CASE("Monte Carlo value of the uniform policy matches the block average") {
  const auto f = fit_all(sticky3(), 1, 300, 20, 7);
  const auto policy = make_policy(f.bundle, Environment(sticky3()).descriptor());
  const Eigen::VectorXd h = f.data.maps.history.features(history_block({{0, 0}}));
  double mean = 0.0;
  for (int code = 0; code < 4; ++code)
    mean += 0.25 * block_value_risk(f.links, f.bundle, h, symbols_block({code / 2, code % 2})).value;
  const auto est = eval_value(f.links, f.bundle, h, policy, 20000, 9);
  CHECK(est.mc_samples == 20000);
  CHECK(est.value == doctest::Approx(mean).epsilon(0.02));
  CHECK(eval_value(f.links, f.bundle, h, policy, 500, 9).value == eval_value(f.links, f.bundle, h, policy, 500, 9).value);
  CHECK_THROWS_AS(eval_value(f.links, f.bundle, h, policy, 0, 9), InvalidArgument);
}

TEST_CASE("Bellman loss vanishes for identical inputs and ignores the softmax bias") {
  const auto m = sticky3();
  const auto f = fit_all(m, 1, 300, 20, 8);
  auto policy = make_policy(f.bundle, Environment(m).descriptor());
  Rng rng(3);
  for (Eigen::Index i = 0; i < policy.theta.size(); ++i) policy.theta.data()[i] = rng.normal();
  const auto hs = all_histories(m, f.data.maps);
  CHECK(bellman_loss(f.links, f.links, hs, policy, policy, f.bundle, 200, 1) == 0.0);

  auto shifted = policy;
  shifted.theta.col(shifted.theta.cols() - 1).array() += 5.0;
  CHECK(std::abs(bellman_loss(f.links, f.links, hs, policy, shifted, f.bundle, 200, 1)) <= 1e-12);

  LinkWeights doubled = f.links;
  doubled.g *= 2.0;
  double mean_v = 0.0;
  for (std::size_t i = 0; i < hs.size(); ++i)
    mean_v += eval_value(f.links, f.bundle, hs[i], policy, 200, derive_seed(1, i)).value;
  mean_v /= static_cast<double>(hs.size());
  CHECK(bellman_loss(doubled, f.links, hs, policy, policy, f.bundle, 200, 1) == doctest::Approx(mean_v).epsilon(1e-12));
  CHECK_THROWS_AS(bellman_loss(f.links, f.links, {}, policy, policy, f.bundle, 200, 1), InvalidArgument);
}

TEST_CASE("links refit on policy rollouts track the exact value") {
  const auto m = sticky3(0.1, 0.05);
  const auto f = fit_all(m, 1, 1000, 20, 10);
  Environment env(m);
  const auto policy = make_policy(f.bundle, env.descriptor());
  const auto links = fit_links_on_policy(env, f.bundle, policy, 20000, 0.0, 11);
  CHECK(links.samples == 20000);
  const Block hist = history_block({{1, 1}});
  const Eigen::VectorXd h = f.data.maps.history.features(hist);
  const auto est = eval_value(links, f.bundle, h, policy, 4000, 12);
  const auto exact = exact_value_risk(m, belief_from_history(m, hist), Eigen::VectorXd::Constant(4, 0.25), 2);
  CHECK(std::abs(est.value - exact.value) <= 0.05);
}
