#include <doctest.h>

#include <limits>

#include "helpers.hpp"
#include "kpsr/errors.hpp"
#include "kpsr/policy.hpp"
#include "kpsr/train.hpp"

using namespace kpsr;
using namespace kpsr::testing;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

PolicyParams discrete_policy(int actions, int block_len, int features) {
  PolicyParams p;
  p.num_actions = actions;
  p.block_len = block_len;
  p.theta = Eigen::MatrixXd::Zero(p.output_dim(), features);
  return p;
}

struct Toy {
  TabularPOMDP model;
  TabData data;
  OperatorBundle bundle;
  LinkWeights links;
  HistoryBatch batch;
};

Toy toy(std::uint64_t seed = 1) {
  Toy t{sticky3(), {}, {}, {}, {}};
  t.data = tab_data(t.model, 1, 1, 1500, 20, seed);
  t.bundle = fit_bundle(t.data.maps, 1, 1, t.data.blocks, FitOptions{});
  t.links = fit_links(t.data.blocks, t.bundle.spaces(), 0.0);
  t.batch = select_histories(t.data.windows, t.data.maps.history, 0.02, 64, seed);
  return t;
}

void randomize(PolicyParams& p, double scale, std::uint64_t seed) {
  Rng rng(seed);
  for (Eigen::Index i = 0; i < p.theta.size(); ++i) p.theta.data()[i] = scale * rng.normal();
}

double cosine(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return (a.array() * b.array()).sum() / (a.norm() * b.norm());
}

// Exact value and risk of a trained policy at every batch history, with the best
// block value that meets the threshold.
struct Outcome {
  double value, risk, best;
};

std::vector<Outcome> outcomes(const Toy& t, const PolicyParams& p, double cbar) {
  std::vector<Outcome> out;
  for (std::size_t i = 0; i < t.batch.histories.size(); ++i) {
    const Eigen::VectorXd b = belief_from_history(t.model, t.batch.histories[i]);
    const Eigen::VectorXd probs = block_probabilities(p, policy_features(t.bundle, t.batch.features[i]));
    const auto vr = exact_value_risk(t.model, b, probs, p.block_len);
    double best = -kInf;
    for (long long c = 0; c < p.num_blocks(); ++c) {
      const auto bv = exact_value_risk(t.model, b, decode_block(c, p.num_actions, p.block_len));
      if (bv.risks[0] <= cbar) best = std::max(best, bv.value);
    }
    out.push_back({vr.value, vr.risks[0], best});
  }
  return out;
}

TrainConfig train_config(double cbar) {
  TrainConfig c;
  c.iterations = 25;
  c.alpha0 = 10.0;
  c.beta0 = 3.0;
  c.mc_samples = 400;
  c.cbar = Eigen::VectorXd::Constant(1, cbar);
  c.link_episodes = 5000;
  c.checkpoint_every = 5;
  c.seed = 17;
  return c;
}

}  // namespace

TEST_CASE("continuous policy sample collapses to its mean as the noise vanishes") {
  PolicyParams p;
  p.discrete = false;
  p.action_dim = 2;
  p.block_len = 3;
  p.sigma = 1e-12;
  p.theta = Eigen::MatrixXd::Random(6, 4);
  const Eigen::VectorXd x = Eigen::VectorXd::Random(4);
  Rng rng(2);
  const Block b = policy_sample(p, x, rng);
  REQUIRE(b.size() == 3);
  CHECK((block_to_vector(b) - block_mean(p, x)).cwiseAbs().maxCoeff() <= 1e-9);
  CHECK_THROWS_AS(block_probabilities(p, x), UnsupportedError);
}

TEST_CASE("zero parameters give the uniform block distribution") {
  const auto p = discrete_policy(2, 2, 3);
  CHECK(p.num_blocks() == 4);
  const Eigen::VectorXd x = Eigen::Vector3d(0.3, -1.0, 1.0);
  CHECK((block_probabilities(p, x).array() - 0.25).abs().maxCoeff() <= 1e-15);
  Rng rng(3);
  std::vector<int> counts(4, 0);
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const Block b = policy_sample(p, x, rng);
    ++counts[static_cast<std::size_t>(encode_block({static_cast<int>(b[0][0]), static_cast<int>(b[1][0])}, 2))];
  }
  const double sd = std::sqrt(n * 0.25 * 0.75);
  for (int c : counts) CHECK(std::abs(c - n * 0.25) <= 3.0 * sd);
}

TEST_CASE("policy samples are reproducible from the seed") {
  auto p = discrete_policy(3, 2, 2);
  randomize(p, 1.0, 4);
  const Eigen::VectorXd x = Eigen::Vector2d(0.5, 1.0);
  Rng a(9), b(9);
  for (int i = 0; i < 50; ++i) CHECK(policy_sample(p, x, a) == policy_sample(p, x, b));
  CHECK(sample_code(Eigen::Vector3d(0.2, 0.3, 0.5), 0.0) == 0);
  CHECK(sample_code(Eigen::Vector3d(0.2, 0.3, 0.5), 0.25) == 1);
  CHECK(sample_code(Eigen::Vector3d(0.2, 0.3, 0.0), 0.9999999999) == 1);
}

TEST_CASE("Lagrangian and dual step examples") {
  const Eigen::VectorXd one = Eigen::VectorXd::Ones(1);
  CHECK(lagrangian(3.0, Eigen::VectorXd::Constant(1, 1.5), one, one) == doctest::Approx(2.5));
  CHECK(lagrangian(3.0, Eigen::VectorXd::Constant(1, 0.5), one, one) == 3.0);
  CHECK(lagrangian(3.0, Eigen::VectorXd::Constant(1, 2.0), Eigen::VectorXd::Constant(1, kInf), one) == 3.0);
  CHECK_THROWS_AS(lagrangian(3.0, Eigen::Vector2d(1.0, 1.0), one, one), ShapeError);

  DualVars d{Eigen::VectorXd::Zero(1), 0.5};
  CHECK(d.beta(4) == doctest::Approx(0.25));
  CHECK(dual_step(d, Eigen::VectorXd::Constant(1, 2.0), one, 0.5).eta[0] == doctest::Approx(0.5));
  d.eta[0] = 0.2;
  CHECK(dual_step(d, Eigen::VectorXd::Zero(1), one, 0.5).eta[0] == 0.0);
  CHECK(dual_step(d, Eigen::VectorXd::Constant(1, 0.9), one, 1.0).eta[0] == doctest::Approx(0.1));
  CHECK_THROWS_AS(dual_step(d, one, one, 0.0), InvalidArgument);
  CHECK_THROWS_AS(d.beta(0), InvalidArgument);
}

TEST_CASE("constant block values give a zero step") {
  const auto t = toy();
  LinkWeights flat = t.links;
  flat.g.setZero();
  flat.m[0].setZero();
  BatchObjective obj(flat, t.bundle, t.batch.features, Eigen::VectorXd::Ones(1), Eigen::VectorXd::Zero(1), 100, 5);
  auto p = make_policy(t.bundle, Environment(t.model).descriptor());
  randomize(p, 0.5, 6);
  CHECK(obj.gradient(p).cwiseAbs().maxCoeff() == 0.0);
  const auto step = policy_step(p, obj, 10.0);
  CHECK(step.accepted);
  CHECK(step.policy.theta == p.theta);
  CHECK(step.J_after == step.J_before);
}

TEST_CASE("accepted steps never decrease the batch objective") {
  const auto t = toy();
  BatchObjective obj(t.links, t.bundle, t.batch.features, Eigen::VectorXd::Constant(1, 2.0),
                     Eigen::VectorXd::Constant(1, 1.0), 300, 7);
  auto p = make_policy(t.bundle, Environment(t.model).descriptor());
  for (int k = 0; k < 10; ++k) {
    const auto step = policy_step(p, obj, 50.0, 4);
    if (step.accepted) {
      CHECK(step.J_after >= step.J_before);
      CHECK(obj.evaluate(step.policy) == step.J_after);
    } else {
      CHECK(step.policy.theta == p.theta);
    }
    p = step.policy;
  }
  CHECK_THROWS_AS(policy_step(p, obj, 0.0), InvalidArgument);
}

TEST_CASE("score-function gradient agrees with finite differences of the exact objective") {
  const auto t = toy();
  BatchObjective obj(t.links, t.bundle, t.batch.features, Eigen::VectorXd::Zero(1), Eigen::VectorXd::Constant(1, kInf),
                     20000, 8);
  auto p = make_policy(t.bundle, Environment(t.model).descriptor());
  randomize(p, 0.5, 9);
  const Eigen::MatrixXd g = obj.gradient(p);
  Eigen::MatrixXd fd(g.rows(), g.cols());
  const double eps = 1e-5;
  for (Eigen::Index i = 0; i < g.size(); ++i) {
    PolicyParams up = p, down = p;
    up.theta.data()[i] += eps;
    down.theta.data()[i] -= eps;
    fd.data()[i] = (obj.evaluate_exact(up) - obj.evaluate_exact(down)) / (2.0 * eps);
  }
  CHECK(cosine(g, fd) >= 0.9);
}

TEST_CASE("inactive hinge leaves the gradient unchanged") {
  const auto t = toy();
  auto p = make_policy(t.bundle, Environment(t.model).descriptor());
  randomize(p, 0.5, 10);
  BatchObjective free(t.links, t.bundle, t.batch.features, Eigen::VectorXd::Zero(1), Eigen::VectorXd::Constant(1, 100.0),
                      200, 11);
  BatchObjective priced(t.links, t.bundle, t.batch.features, Eigen::VectorXd::Constant(1, 5.0),
                        Eigen::VectorXd::Constant(1, 100.0), 200, 11);
  CHECK(free.gradient(p) == priced.gradient(p));
  CHECK(free.evaluate(p) == priced.evaluate(p));
}

TEST_CASE("non-finite link weights are reported") {
  const auto t = toy();
  LinkWeights bad = t.links;
  bad.g.setConstant(std::numeric_limits<double>::quiet_NaN());
  BatchObjective obj(bad, t.bundle, t.batch.features, Eigen::VectorXd::Zero(1), Eigen::VectorXd::Constant(1, kInf), 50, 12);
  const auto p = make_policy(t.bundle, Environment(t.model).descriptor());
  CHECK_THROWS_AS(obj.gradient(p), NumericalError);
  CHECK_THROWS_AS(policy_step(p, obj, 1.0), NumericalError);
  CHECK_THROWS_AS(BatchObjective(t.links, t.bundle, t.batch.features, Eigen::VectorXd::Zero(1),
                                 Eigen::VectorXd::Zero(1), 1, 0),
                  InvalidArgument);
}

TEST_CASE("unconstrained training approaches the best open-loop block") {
  auto t = toy();
  Environment env(t.model);
  const auto s = train(train_config(kInf), env, t.bundle, t.batch, TrainIO{});
  CHECK(s.finished);
  CHECK(s.feasible);
  CHECK(s.rows.size() == 25);
  for (const auto& o : outcomes(t, s.policy, kInf)) CHECK(o.value >= o.best - 0.1);
}

TEST_CASE("constrained training meets the threshold") {
  auto t = toy();
  Environment env(t.model);
  const double cbar = 1.2;
  const auto s = train(train_config(cbar), env, t.bundle, t.batch, TrainIO{});
  CHECK(s.finished);
  CHECK(s.feasible);
  CHECK(s.flagged.empty());
  CHECK(s.rows.back().C[0] <= cbar + 0.05);
  for (const auto& o : outcomes(t, s.policy, cbar)) {
    CHECK(o.risk <= cbar + 0.05);
    CHECK(o.value >= o.best - 0.2);
  }
}

TEST_CASE("interrupted training resumes bit for bit") {
  auto t = toy();
  auto cfg = train_config(1.2);
  cfg.iterations = 8;
  cfg.checkpoint_every = 2;
  Environment env(t.model);
  const auto full = train(cfg, env, t.bundle, t.batch, TrainIO{});
  const auto part = train(cfg, env, t.bundle, t.batch, TrainIO{}, nullptr, 4);
  CHECK(part.k == 4);
  CHECK_FALSE(part.finished);
  const auto restored = deserialize_state(serialize_state(part));
  const auto resumed = train(cfg, env, t.bundle, t.batch, TrainIO{}, &restored);
  CHECK(serialize_state(resumed) == serialize_state(full));
  CHECK(format_log(resumed, "c") == format_log(full, "c"));

  auto other = cfg;
  other.seed = 18;
  CHECK_THROWS_AS(train(other, env, t.bundle, t.batch, TrainIO{}, &restored), ConfigError);
  std::string bytes = serialize_state(part);
  bytes[0] = 'X';
  CHECK_THROWS_AS(deserialize_state(bytes), FormatError);
}

TEST_CASE("frequent histories form the batch") {
  const auto t = toy();
  CHECK_FALSE(t.batch.histories.empty());
  double total = 0.0;
  for (double f : t.batch.frequency) {
    CHECK(f >= 0.02);
    total += f;
  }
  CHECK(total <= 1.0 + 1e-12);
  const auto all = select_histories(t.data.windows, t.data.maps.history, 2.0, 5, 3);
  CHECK(all.histories.size() == 5);
  CHECK_THROWS_AS(select_histories({}, t.data.maps.history, 0.1, 5, 3), InvalidArgument);
}
