#include <doctest.h>

#include <cstring>
#include <map>

#include "helpers.hpp"
#include "kpsr/errors.hpp"
#include "kpsr/operators.hpp"
#include "kpsr/rng.hpp"

using namespace kpsr;
using namespace kpsr::testing;

namespace {

Eigen::VectorXd unit(int n, int k) {
  Eigen::VectorXd e = Eigen::VectorXd::Zero(n);
  e[k] = 1.0;
  return e;
}

Eigen::VectorXd clip_normalize(Eigen::VectorXd p) {
  p = p.cwiseMax(0.0);
  const double s = p.sum();
  return s > 0.0 ? Eigen::VectorXd(p / s) : Eigen::VectorXd(Eigen::VectorXd::Constant(p.size(), 1.0 / p.size()));
}

int symbol(const Point& p) { return static_cast<int>(p.at(0)); }

std::vector<int> symbols(const Block& b) {
  std::vector<int> out;
  for (const auto& p : b) out.push_back(symbol(p));
  return out;
}

// Frequency-weighted mean TV between forward predictions and the exact test
// distribution over every (history, test-action) cell seen in the windows.
double forward_tv(const TabularPOMDP& m, const OperatorBundle& bundle, const std::vector<WindowSample>& windows) {
  std::map<std::pair<std::vector<double>, std::vector<int>>, std::pair<Block, int>> cells;
  for (const auto& w : windows) {
    std::vector<double> key;
    for (const auto& s : w.history) key.insert(key.end(), s.begin(), s.end());
    auto& c = cells[{key, symbols(w.test_actions)}];
    c.first = w.history;
    ++c.second;
  }
  double total = 0.0, weight = 0.0;
  for (const auto& [key, cell] : cells) {
    const auto& acts = key.second;
    const Eigen::VectorXd truth = test_distribution(m, belief_from_history(m, cell.first), acts);
    const Eigen::VectorXd h = bundle.maps.history.features(cell.first);
    const Eigen::VectorXd A = bundle.maps.test_actions.features(symbols_block(acts));
    total += cell.second * tv(clip_normalize(bundle.forward_predict(h, A)), truth);
    weight += cell.second;
  }
  return total / weight;
}

RegressionBlocks head(const RegressionBlocks& b, Eigen::Index K) {
  RegressionBlocks r;
  r.H = b.H.leftCols(K);
  r.A = b.A.leftCols(K);
  r.O = b.O.leftCols(K);
  r.a = b.a.leftCols(K);
  r.o = b.o.leftCols(K);
  r.Hs = b.Hs.leftCols(K);
  r.As = b.As.leftCols(K);
  r.Os = b.Os.leftCols(K);
  r.returns = b.returns.head(K);
  r.risks = b.risks.leftCols(K);
  return r;
}

}  // namespace

TEST_CASE("covariance of small samples") {
  Eigen::MatrixXd X(1, 2), Y(2, 2);
  X << 1.0, 2.0;
  Y << 3.0, 4.0, -1.0, 1.0;
  const Eigen::MatrixXd C = covariance(X, Y);
  REQUIRE(C.rows() == 1);
  REQUIRE(C.cols() == 2);
  CHECK(C(0, 0) == doctest::Approx(5.5));
  CHECK(C(0, 1) == doctest::Approx(0.5));
  CHECK_THROWS_AS(covariance(X, Eigen::MatrixXd(1, 3)), ShapeError);
}

TEST_CASE("conditional operator on one-hot data recovers empirical conditionals") {
  Rng rng(5);
  const int K = 20000;
  Eigen::MatrixXd X = Eigen::MatrixXd::Zero(3, K), Y = Eigen::MatrixXd::Zero(2, K);
  Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(3, 2);
  Eigen::MatrixXd P(3, 2);
  P << 0.7, 0.1, 0.2, 0.3, 0.1, 0.6;
  for (int k = 0; k < K; ++k) {
    const int y = static_cast<int>(rng.below(2));
    const int x = rng.categorical(P.col(y));
    X(x, k) = 1.0;
    Y(y, k) = 1.0;
    counts(x, y) += 1.0;
  }
  const auto op = conditional_operator(X, Y, 1e-8, 7, 9);
  CHECK(op.domain == 9);
  CHECK(op.codomain == 7);
  for (int y = 0; y < 2; ++y) {
    const Eigen::VectorXd empirical = counts.col(y) / counts.col(y).sum();
    CHECK((op.matrix.col(y) - empirical).cwiseAbs().maxCoeff() <= 1e-3);
  }
  CHECK(conditional_operator(X, Y, 1e9).matrix.norm() <= 1e-6);
  CHECK_THROWS_AS(conditional_operator(X, Y, 0.0), ConfigError);
}

TEST_CASE("conditional operator on linear Gaussian data matches least squares") {
  Rng rng(6);
  const int K = 20000;
  Eigen::MatrixXd X(1, K), Y(1, K);
  for (int k = 0; k < K; ++k) {
    Y(0, k) = rng.normal();
    X(0, k) = 2.0 * Y(0, k) + 0.5 * rng.normal();
  }
  const double ols = (X * Y.transpose())(0, 0) / (Y * Y.transpose())(0, 0);
  const auto op = conditional_operator(X, Y, 1e-8);
  CHECK(std::abs(op.matrix(0, 0) - ols) <= 0.02 * std::abs(ols));
  CHECK(std::abs(op.matrix(0, 0) - 2.0) <= 0.02 * 2.0);
}

TEST_CASE("kernel Bayes rule with a constant conditioning variable reduces to the plain operator") {
  Rng rng(8);
  const int K = 500;
  Eigen::MatrixXd X = Eigen::MatrixXd::Random(3, K), Y = Eigen::MatrixXd::Random(2, K);
  const Eigen::MatrixXd Z = Eigen::MatrixXd::Ones(1, K);
  const Eigen::VectorXd w = kbr_weights(Z, Eigen::VectorXd::Ones(1), 1e-3);
  CHECK((w.array() - 1.0).abs().maxCoeff() <= 1e-12);
  const auto a = kbr_conditional(X, Y, Z, Eigen::VectorXd::Ones(1), 1e-3);
  const auto b = conditional_operator(X, Y, 1e-3);
  CHECK((a.matrix - b.matrix).cwiseAbs().maxCoeff() <= 1e-10);
  CHECK_THROWS_AS(kbr_weights(Z, Eigen::VectorXd::Ones(2), 1e-3), ShapeError);
}

TEST_CASE("ridge fit reaches a stationary point") {
  Rng rng(9);
  Eigen::MatrixXd X(6, 400), Y(3, 400);
  for (Eigen::Index i = 0; i < X.size(); ++i) X.data()[i] = rng.normal();
  for (Eigen::Index i = 0; i < Y.size(); ++i) Y.data()[i] = rng.normal();
  for (double lambda : {1e-6, 1e-2, 1.0}) {
    const auto f = ridge_fit(Y, Design(X), lambda);
    CHECK(f.lambda == lambda);
    CHECK(f.gradient_norm <= 1e-8 * (1.0 + f.W.norm()));
    CHECK(f.loss >= 0.0);
  }
  const auto d = ridge_fit(Y, Design(X), 0.0);
  CHECK(d.lambda == doctest::Approx(default_lambda(X * X.transpose() / 400.0, 400)));
}

TEST_CASE("sparse and dense designs give the same fit") {
  const auto d = tab_data(sticky3(), 1, 1, 100, 20, 3);
  const Design HA = khatri_rao(Design(d.blocks.H), Design(d.blocks.A));
  CHECK(HA.is_sparse());
  const Design dense(Eigen::MatrixXd(khatri_rao(d.blocks.H, d.blocks.A)));
  const auto a = ridge_fit(d.blocks.O, HA, 1e-3);
  const auto b = ridge_fit(d.blocks.O, dense, 1e-3);
  CHECK((a.W - b.W).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("forward operator is exact on a deterministic model") {
  const auto m = cycle3();
  const auto d = tab_data(m, 1, 1, 200, 20, 4);
  const auto op = fit_forward(d.blocks, FitSpaces::of(d.maps), 1e-10);
  for (int a0 = 0; a0 < 2; ++a0)
    for (int o = 0; o < 3; ++o)
      for (int a = 0; a < 2; ++a) {
        const Eigen::VectorXd h = d.maps.history.features(history_block({{a0, o}}));
        const Eigen::VectorXd pred = op.matrix * kron(h, unit(2, a));
        const Eigen::VectorXd truth = test_distribution(m, belief_from_history(m, history_block({{a0, o}})), {a});
        CHECK((pred - truth).cwiseAbs().maxCoeff() <= 1e-6);
      }
}

TEST_CASE("forward operator approaches the exact test distribution") {
  const auto m = sticky3();
  const auto d = tab_data(m, 2, 2, 3200, 20, 5);
  REQUIRE(d.windows.size() >= 50000);
  FitOptions opt;
  const auto bundle = fit_bundle(d.maps, 2, 2, d.blocks, opt);
  CHECK(forward_tv(m, bundle, d.windows) <= 0.05);
}

TEST_CASE("forward error shrinks as the sample grows") {
  const auto m = sticky3(0.1, 0.05);
  const auto d = tab_data(m, 1, 1, 2800, 20, 6);
  double prev = 1.0;
  for (Eigen::Index K : {500, 5000, 50000}) {
    REQUIRE(static_cast<Eigen::Index>(d.blocks.size()) >= K);
    const auto sub = head(d.blocks, K);
    OperatorBundle b;
    b.maps = d.maps;
    b.forward = fit_forward(sub, FitSpaces::of(d.maps), 0.0);
    const std::vector<WindowSample> seen(d.windows.begin(), d.windows.begin() + K);
    const double err = forward_tv(m, b, seen);
    CHECK(err < prev);
    prev = err;
  }
}

TEST_CASE("one-step operator on an i.i.d. observation source") {
  Eigen::MatrixXd E(3, 1);
  E << 0.5, 0.3, 0.2;
  Eigen::MatrixXd T = Eigen::MatrixXd::Ones(1, 1);
  const auto m = tabular({T, T}, E, Eigen::VectorXd::Ones(1), Eigen::MatrixXd::Zero(1, 1));
  const auto d = tab_data(m, 1, 1, 1000, 20, 7);
  const auto op = fit_one_step(d.blocks, FitSpaces::of(d.maps), 0.0);
  for (int a0 = 0; a0 < 2; ++a0)
    for (int o = 0; o < 3; ++o)
      for (int a = 0; a < 2; ++a) {
        const Eigen::VectorXd h = d.maps.history.features(history_block({{a0, o}}));
        CHECK(tv(clip_normalize(op.matrix * kron(h, unit(2, a))), E.col(0)) <= 0.05);
      }
}

TEST_CASE("shifted operator composes to the direct refit on a deterministic model") {
  const auto d = tab_data(cycle3(), 1, 1, 200, 20, 8);
  FitOptions opt;
  opt.lambda = 1e-9;
  const auto b = fit_bundle(d.maps, 1, 1, d.blocks, opt);
  CHECK(composition_gap(d.blocks, b.forward, b.shifted, b.shifted_forward) <= 1e-3);
  CHECK(b.shifted.n == 3);
  CHECK(b.shifted.contract(kron(unit(3, 0), unit(2, 1))).rows() == 3);
  CHECK_THROWS_AS(b.shifted.contract(Eigen::VectorXd::Ones(2)), ShapeError);
}

TEST_CASE("extended operator marginalizes to the one-step operator") {
  const auto m = sticky3();
  const auto d = tab_data(m, 1, 1, 2000, 30, 9);
  FitOptions opt;
  const auto b = fit_bundle(d.maps, 1, 1, d.blocks, opt);
  const int d_o = m.O;
  for (int a0 = 0; a0 < 2; ++a0)
    for (int o = 0; o < 3; ++o) {
      const Eigen::VectorXd h = d.maps.history.features(history_block({{a0, o}}));
      for (int a = 0; a < 2; ++a)
        for (int as = 0; as < 2; ++as) {
          const Eigen::VectorXd ext = b.extended_predict(h, unit(2, as), unit(2, a));
          Eigen::VectorXd marginal = Eigen::VectorXd::Zero(d_o);
          for (Eigen::Index j = 0; j < ext.size(); ++j) marginal[j % d_o] += ext[j];
          CHECK(tv(clip_normalize(marginal), clip_normalize(b.one_step_predict(h, unit(2, a)))) <= 0.05);
          const Eigen::VectorXd fac = factorized_extended(b, h, unit(2, a), unit(2, as));
          CHECK((fac - ext).norm() <= 0.1 * std::max(ext.norm(), 1e-12));
        }
    }
}

TEST_CASE("prediction is linear and checks the input space") {
  EmbeddingOperator op;
  op.matrix = Eigen::MatrixXd::Random(3, 4);
  op.domain = 11;
  op.codomain = 12;
  const FeatureVector x{Eigen::VectorXd::Random(4), 11}, y{Eigen::VectorXd::Random(4), 11};
  const FeatureVector sum{x.values * 2.0 - y.values * 0.5, 11};
  const auto px = predict(op, x), py = predict(op, y);
  CHECK(px.space == 12);
  CHECK((predict(op, sum).values - (2.0 * px.values - 0.5 * py.values)).norm() <= 1e-12);
  CHECK(predict(op, FeatureVector{Eigen::VectorXd::Zero(4), 11}).values.norm() == 0.0);
  CHECK_THROWS_AS(predict(op, FeatureVector{x.values, 13}), SpaceMismatch);
  CHECK_THROWS_AS(predict(op, FeatureVector{Eigen::VectorXd::Zero(3), 11}), ShapeError);
}

TEST_CASE("bundle serialization round trip and rejection") {
  const auto d = tab_data(sticky3(), 1, 1, 100, 20, 10);
  FitOptions opt;
  opt.seed = 77;
  auto b = fit_bundle(d.maps, 1, 1, d.blocks, opt);
  b.provenance = "config=0123 version=test";
  const std::string bytes = serialize_bundle(b);
  const auto back = deserialize_bundle(bytes);
  CHECK(back.W == 1);
  CHECK(back.L == 1);
  CHECK(back.seed == 77);
  CHECK(back.samples == b.samples);
  CHECK(back.provenance == b.provenance);
  CHECK(back.forward.matrix == b.forward.matrix);
  CHECK(back.extended.matrix == b.extended.matrix);
  CHECK(back.shifted.unfolded == b.shifted.unfolded);
  CHECK(back.maps.history.id() == b.maps.history.id());
  CHECK(serialize_bundle(back) == bytes);

  std::string bad_version = bytes;
  const std::uint32_t v = kBundleVersion + 1;
  std::memcpy(bad_version.data() + 8, &v, sizeof v);
  CHECK_THROWS_AS(deserialize_bundle(bad_version), FormatError);
  CHECK_THROWS_AS(deserialize_bundle("not a bundle at all"), FormatError);
  CHECK_THROWS_AS(deserialize_bundle(bytes.substr(0, bytes.size() / 2)), FormatError);

  auto mixed = b;
  mixed.maps.observation = one_hot(5);
  CHECK_THROWS_AS(deserialize_bundle(serialize_bundle(mixed)), SpaceMismatch);
}

TEST_CASE("operator domain cap") {
  const auto d = tab_data(sticky3(), 1, 1, 20, 10, 11);
  FitOptions opt;
  opt.max_domain_dim = 10;
  CHECK_THROWS_AS(fit_bundle(d.maps, 1, 1, d.blocks, opt), ConfigError);
}
