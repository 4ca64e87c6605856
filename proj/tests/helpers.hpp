#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "kpsr/data.hpp"
#include "kpsr/env.hpp"
#include "kpsr/kernel.hpp"

namespace kpsr::testing {

inline Block symbols_block(const std::vector<int>& s) {
  Block b;
  for (int v : s) b.push_back(Point{static_cast<double>(v)});
  return b;
}

inline FeatureMap one_hot(int alphabet, int arity = 1, BlockMode mode = BlockMode::Tensor) {
  KernelSpec k;
  k.kind = KernelKind::OneHot;
  MapShape s;
  s.arity = arity;
  s.radices = {alphabet};
  s.mode = mode;
  return make_feature_map(k, s);
}

inline FeatureMap linear_map(int dim, int arity = 1, bool affine = false, BlockMode mode = BlockMode::Concat) {
  KernelSpec k;
  k.kind = KernelKind::Linear;
  k.affine = affine;
  MapShape s;
  s.arity = arity;
  s.input_dim = dim;
  s.mode = mode;
  return make_feature_map(k, s);
}

inline FeatureMap rbf_map(int dim, double bandwidth, int rff_dim, std::uint64_t seed = 3) {
  KernelSpec k;
  k.kind = KernelKind::RadialBasis;
  k.bandwidth = bandwidth;
  k.rff_dim = rff_dim;
  k.seed = seed;
  MapShape s;
  s.input_dim = dim;
  return make_feature_map(k, s);
}

// Tabular model with column-stochastic slices given row by row.
inline TabularPOMDP tabular(std::vector<Eigen::MatrixXd> T, Eigen::MatrixXd emission, Eigen::VectorXd reward,
                            Eigen::MatrixXd risk) {
  TabularPOMDP m;
  m.S = static_cast<int>(emission.cols());
  m.O = static_cast<int>(emission.rows());
  m.A = static_cast<int>(T.size());
  m.T = std::move(T);
  m.emission = std::move(emission);
  m.reward = std::move(reward);
  m.risk = std::move(risk);
  m.initial = action_averaged_stationary(m);
  m.validate();
  return m;
}

// Low-entropy 3-state, 4-observation, 2-action model: action 0 keeps the state,
// action 1 advances it, with small slip and observation noise.
inline TabularPOMDP sticky3(double slip = 0.02, double obs_noise = 0.01) {
  Eigen::MatrixXd stay = Eigen::MatrixXd::Constant(3, 3, slip / 2);
  Eigen::MatrixXd move = Eigen::MatrixXd::Constant(3, 3, slip / 2);
  for (int s = 0; s < 3; ++s) {
    stay(s, s) = 1.0 - slip;
    move((s + 1) % 3, s) = 1.0 - slip;
  }
  Eigen::MatrixXd E = Eigen::MatrixXd::Constant(4, 3, obs_noise / 3);
  E(0, 0) = E(1, 1) = E(2, 2) = 1.0 - obs_noise;
  E(3, 2) = 0.0;
  for (int s = 0; s < 3; ++s) E.col(s) /= E.col(s).sum();
  Eigen::MatrixXd c(1, 3);
  c << 0.0, 0.5, 1.0;
  return tabular({stay, move}, E, Eigen::Vector3d(0.2, 0.6, 1.0), c);
}

// Deterministic 3-cycle: action 0 advances by one, action 1 by two; identity observations.
inline TabularPOMDP cycle3() {
  Eigen::MatrixXd a0 = Eigen::MatrixXd::Zero(3, 3), a1 = Eigen::MatrixXd::Zero(3, 3);
  for (int s = 0; s < 3; ++s) {
    a0((s + 1) % 3, s) = 1.0;
    a1((s + 2) % 3, s) = 1.0;
  }
  Eigen::MatrixXd c(1, 3);
  c << 0.0, 1.0, 0.0;
  return tabular({a0, a1}, Eigen::MatrixXd::Identity(3, 3), Eigen::Vector3d(2.0, 0.0, 1.0), c);
}

inline double tv(const Eigen::VectorXd& p, const Eigen::VectorXd& q) { return 0.5 * (p - q).cwiseAbs().sum(); }

// One-hot map over L-step (action, observation) history suffixes.
inline FeatureMap history_one_hot(int actions, int observations, int L) {
  KernelSpec k;
  k.kind = KernelKind::OneHot;
  MapShape s;
  s.arity = L;
  s.radices = {actions, observations};
  s.mode = BlockMode::Tensor;
  return make_feature_map(k, s);
}

inline SpaceMaps one_hot_maps(const TabularPOMDP& m, int W, int L) {
  return SpaceMaps{history_one_hot(m.A, m.O, L), one_hot(m.A, W), one_hot(m.O, W), one_hot(m.A), one_hot(m.O)};
}

struct TabData {
  SpaceMaps maps;
  std::vector<WindowSample> windows;
  RegressionBlocks blocks;
};

// Uniform-behaviour rollouts of a tabular model, windowed and featurized with one-hot maps.
inline TabData tab_data(const TabularPOMDP& m, int W, int L, int episodes, int T, std::uint64_t seed) {
  Environment env(m);
  const auto trajs = rollout(env, uniform_behavior(env.descriptor()), episodes, T, seed);
  TabData d{one_hot_maps(m, W, L), make_windows(trajs, W, L), {}};
  d.blocks = featurize_windows(d.windows, d.maps);
  return d;
}

inline Block history_block(const std::vector<std::pair<int, int>>& steps) {
  Block b;
  for (auto [a, o] : steps) b.push_back(Point{static_cast<double>(a), static_cast<double>(o)});
  return b;
}

}  // namespace kpsr::testing
