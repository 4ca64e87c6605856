#include "kpsr/env.hpp"

#include <cmath>

#include <json.hpp>

#include "kpsr/bytes.hpp"
#include "kpsr/errors.hpp"

namespace kpsr {

using json = nlohmann::json;

namespace {

constexpr double kStochTol = 1e-12;

void check_stochastic_columns(const Eigen::MatrixXd& M, const std::string& what) {
  if ((M.array() < 0.0).any() || !M.allFinite()) throw ConfigError(what + " has negative or non-finite entries");
  for (Eigen::Index j = 0; j < M.cols(); ++j)
    if (std::abs(M.col(j).sum() - 1.0) > kStochTol)
      throw ConfigError(what + " column " + std::to_string(j) + " does not sum to 1");
}

int discrete_action(const Point& a, int n) {
  if (a.size() != 1) throw ShapeError("tabular action must be a single symbol");
  const int v = static_cast<int>(a[0]);
  if (static_cast<double>(v) != a[0] || v < 0 || v >= n) throw ShapeError("action symbol out of range");
  return v;
}

Eigen::VectorXd to_vec(const Point& p, Eigen::Index n, const char* what) {
  if (static_cast<Eigen::Index>(p.size()) != n) throw ShapeError(std::string(what) + " has the wrong dimension");
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = p[static_cast<std::size_t>(i)];
  return v;
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& C) {
  if (C.size() == 0) return C;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (C + C.transpose()));
  Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal();
}

}  // namespace

void TabularPOMDP::validate() const {
  if (S < 1 || O < 1 || A < 1) throw ConfigError("tabular model sizes must be positive");
  if (static_cast<int>(T.size()) != A) throw ConfigError("one transition matrix per action is required");
  for (int a = 0; a < A; ++a) {
    if (T[a].rows() != S || T[a].cols() != S) throw ConfigError("transition matrix must be S x S");
    check_stochastic_columns(T[a], "transition matrix " + std::to_string(a));
  }
  if (emission.rows() != O || emission.cols() != S) throw ConfigError("emission matrix must be O x S");
  check_stochastic_columns(emission, "emission matrix");
  if (reward.size() != S) throw ConfigError("reward vector must have one entry per state");
  if (risk.cols() != S) throw ConfigError("risk matrix must have one column per state");
  if (initial.size() != S) throw ConfigError("initial distribution has the wrong length");
  check_stochastic_columns(initial, "initial distribution");
  if (O < S) throw ConfigError("observation alphabet smaller than the state space");
  if (!(emission_min_singular_value() > 1e-6)) throw ConfigError("emission matrix is not of full column rank");
}

double TabularPOMDP::emission_min_singular_value() const {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(emission);
  return svd.singularValues().minCoeff();
}

void LinearGaussianSystem::validate() const {
  const auto n = A.rows();
  if (A.cols() != n || B.rows() != n || C.cols() != n || n < 1 || B.cols() < 1 || C.rows() < 1)
    throw ConfigError("linear-Gaussian matrices have inconsistent dimensions");
  if (process_noise < 0.0 || observation_noise < 0.0) throw ConfigError("noise scales must be nonnegative");
  if (initial_mean.size() != n || initial_cov.rows() != n || initial_cov.cols() != n)
    throw ConfigError("initial state distribution has the wrong dimension");
  if (reward_weight.rows() != n || reward_weight.cols() != n) throw ConfigError("reward weight must be n x n");
  if (!(behavior_action_std >= 0.0)) throw ConfigError("behaviour action scale must be nonnegative");
}

Eigen::MatrixXd LinearGaussianSystem::Q() const {
  return process_noise * process_noise * Eigen::MatrixXd::Identity(A.rows(), A.rows());
}

Eigen::MatrixXd LinearGaussianSystem::R() const {
  return observation_noise * observation_noise * Eigen::MatrixXd::Identity(C.rows(), C.rows());
}

Environment::Environment(TabularPOMDP m, std::string name) : model_(std::move(m)), name_(std::move(name)) {
  std::get<TabularPOMDP>(model_).validate();
}

Environment::Environment(LinearGaussianSystem m, std::string name) : model_(std::move(m)), name_(std::move(name)) {
  std::get<LinearGaussianSystem>(model_).validate();
}

EnvDescriptor Environment::descriptor() const {
  EnvDescriptor d;
  if (const auto* t = tabular()) {
    d.discrete_actions = true;
    d.num_actions = t->A;
    d.action_dim = 1;
    d.discrete_observations = true;
    d.num_observations = t->O;
    d.observation_dim = 1;
    d.num_risks = static_cast<int>(t->risk.rows());
  } else {
    const auto* l = linear();
    d.discrete_actions = false;
    d.action_dim = static_cast<int>(l->B.cols());
    d.discrete_observations = false;
    d.observation_dim = static_cast<int>(l->C.rows());
    d.num_risks = 0;
  }
  return d;
}

void Environment::reset(std::uint64_t seed) {
  rng_ = Rng(seed, 0x656e76ULL);
  if (const auto* t = tabular()) {
    s_ = rng_.categorical(t->initial);
  } else {
    const auto* l = linear();
    Eigen::VectorXd z(l->A.rows());
    for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = rng_.normal();
    x_ = l->initial_mean + psd_sqrt(l->initial_cov) * z;
  }
}

StepRecord Environment::step(const Point& action) {
  StepRecord r;
  r.action = action;
  if (const auto* t = tabular()) {
    const int a = discrete_action(action, t->A);
    s_ = rng_.categorical(t->T[a].col(s_));
    const int o = rng_.categorical(t->emission.col(s_));
    r.observation = Point{static_cast<double>(o)};
    r.reward = t->reward[s_];
    for (Eigen::Index i = 0; i < t->risk.rows(); ++i) r.risks.push_back(t->risk(i, s_));
    return r;
  }
  const auto* l = linear();
  const Eigen::VectorXd a = to_vec(action, l->B.cols(), "action");
  Eigen::VectorXd w(l->A.rows());
  for (Eigen::Index i = 0; i < w.size(); ++i) w[i] = rng_.normal();
  x_ = l->A * x_ + l->B * a + l->process_noise * w;
  Eigen::VectorXd v(l->C.rows());
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = rng_.normal();
  const Eigen::VectorXd o = l->C * x_ + l->observation_noise * v;
  r.observation.assign(o.data(), o.data() + o.size());
  r.reward = -x_.dot(l->reward_weight * x_);
  return r;
}

namespace {

Eigen::MatrixXd mat_from(const json& j, const std::string& what) {
  if (!j.is_array() || j.empty()) throw ConfigError(what + " must be a nonempty array of rows");
  const auto rows = static_cast<Eigen::Index>(j.size());
  if (!j[0].is_array()) throw ConfigError(what + " must be an array of rows");
  const auto cols = static_cast<Eigen::Index>(j[0].size());
  Eigen::MatrixXd M(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const auto& row = j[static_cast<std::size_t>(i)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols) throw ConfigError(what + " is ragged");
    for (Eigen::Index k = 0; k < cols; ++k) {
      if (!row[static_cast<std::size_t>(k)].is_number()) throw ConfigError(what + " has a non-numeric entry");
      M(i, k) = row[static_cast<std::size_t>(k)].get<double>();
    }
  }
  return M;
}

Eigen::VectorXd vec_from(const json& j, const std::string& what) {
  if (!j.is_array()) throw ConfigError(what + " must be an array");
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw ConfigError(what + " has a non-numeric entry");
    v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
  }
  return v;
}

const json& field(const json& j, const char* key) {
  if (!j.contains(key)) throw ConfigError(std::string("environment config lacks '") + key + "'");
  return j.at(key);
}

}  // namespace

Environment environment_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("environment config is not valid JSON: ") + e.what());
  }
  const std::string type = field(j, "type").get<std::string>();
  const std::string name = j.value("name", type);
  const std::uint64_t hash = fnv1a(j.dump());
  if (type == "tabular") {
    TabularPOMDP m;
    m.S = field(j, "states").get<int>();
    m.O = field(j, "observations").get<int>();
    m.A = field(j, "actions").get<int>();
    for (const auto& t : field(j, "transitions")) m.T.push_back(mat_from(t, "transition matrix"));
    m.emission = mat_from(field(j, "emissions"), "emission matrix");
    m.reward = vec_from(field(j, "rewards"), "rewards");
    if (j.contains("risks") && !j["risks"].empty())
      m.risk = mat_from(j["risks"], "risk matrix");
    else
      m.risk = Eigen::MatrixXd(0, m.S);
    const auto& init = j.contains("initial") ? j["initial"] : json("stationary");
    if (init.is_string()) {
      if (init.get<std::string>() != "stationary") throw ConfigError("unknown initial distribution");
      if (static_cast<int>(m.T.size()) != m.A) throw ConfigError("one transition matrix per action is required");
      m.initial = action_averaged_stationary(m);
    } else {
      m.initial = vec_from(init, "initial distribution");
    }
    Environment env(std::move(m), name);
    env.set_config_hash(hash);
    return env;
  }
  if (type == "linear-gaussian") {
    LinearGaussianSystem s;
    s.A = mat_from(field(j, "A"), "A");
    s.B = mat_from(field(j, "B"), "B");
    s.C = mat_from(field(j, "C"), "C");
    s.process_noise = field(j, "process_noise").get<double>();
    s.observation_noise = field(j, "observation_noise").get<double>();
    s.behavior_action_std = j.value("behavior_action_std", 1.0);
    s.reward_weight = j.contains("reward_weight") ? mat_from(j["reward_weight"], "reward weight")
                                                  : Eigen::MatrixXd::Identity(s.A.rows(), s.A.rows());
    const auto& init = j.contains("initial") ? j["initial"] : json("stationary");
    if (init.is_string()) {
      if (init.get<std::string>() != "stationary") throw ConfigError("unknown initial distribution");
      s.initial_mean = Eigen::VectorXd::Zero(s.A.rows());
      s.initial_cov = lgs_stationary_cov(s, s.behavior_action_std);
    } else {
      s.initial_mean = vec_from(field(init, "mean"), "initial mean");
      s.initial_cov = mat_from(field(init, "cov"), "initial covariance");
    }
    Environment env(std::move(s), name);
    env.set_config_hash(hash);
    return env;
  }
  throw ConfigError("unknown environment type: " + type);
}

Environment load_environment(const std::string& path) { return environment_from_json(read_file(path)); }

BehaviorPolicy uniform_behavior(const EnvDescriptor& d, double gaussian_std) {
  if (d.discrete_actions) {
    const int n = d.num_actions;
    return [n](const std::vector<StepRecord>&, Rng& rng) {
      return Point{static_cast<double>(rng.below(static_cast<std::uint64_t>(n)))};
    };
  }
  const int dim = d.action_dim;
  return [dim, gaussian_std](const std::vector<StepRecord>&, Rng& rng) {
    Point p(static_cast<std::size_t>(dim));
    for (auto& v : p) v = gaussian_std * rng.normal();
    return p;
  };
}

std::vector<Trajectory> rollout(Environment& env, const BehaviorPolicy& behavior, int episodes, int T,
                                std::uint64_t seed) {
  if (T < 1) throw ConfigError("episode length must be positive");
  std::vector<Trajectory> out;
  out.reserve(static_cast<std::size_t>(std::max(episodes, 0)));
  for (int e = 0; e < episodes; ++e) {
    env.reset(derive_seed(seed, 2 * static_cast<std::uint64_t>(e)));
    Rng brng(seed, 2 * static_cast<std::uint64_t>(e) + 1);
    Trajectory tr;
    tr.episode = e;
    tr.steps.reserve(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t) tr.steps.push_back(env.step(behavior(tr.steps, brng)));
    out.push_back(std::move(tr));
  }
  return out;
}

std::vector<Trajectory> rollout_block_policy(Environment& env, const BehaviorPolicy& behavior, const BlockSampler& blocks,
                                             int L, int W, int episodes, std::uint64_t seed) {
  std::vector<Trajectory> out;
  out.reserve(static_cast<std::size_t>(std::max(episodes, 0)));
  for (int e = 0; e < episodes; ++e) {
    env.reset(derive_seed(seed, 3 * static_cast<std::uint64_t>(e)));
    Rng brng(seed, 3 * static_cast<std::uint64_t>(e) + 1);
    Rng prng(seed, 3 * static_cast<std::uint64_t>(e) + 2);
    Trajectory tr;
    tr.episode = e;
    for (int t = 0; t < L; ++t) tr.steps.push_back(env.step(behavior(tr.steps, brng)));
    Block h;
    for (const auto& r : tr.steps) h.push_back(history_step(r));
    const Block acts = blocks(h, prng);
    if (static_cast<int>(acts.size()) != W + 1) throw ShapeError("block sampler returned a block of the wrong length");
    for (const auto& a : acts) tr.steps.push_back(env.step(a));
    out.push_back(std::move(tr));
  }
  return out;
}

Eigen::VectorXd stationary_distribution(const Eigen::MatrixXd& P) {
  const auto n = P.rows();
  Eigen::MatrixXd M = Eigen::MatrixXd::Identity(n, n) - P;
  M.row(n - 1).setOnes();
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n);
  rhs[n - 1] = 1.0;
  Eigen::VectorXd pi = M.fullPivLu().solve(rhs);
  pi = pi.cwiseMax(0.0);
  return pi / pi.sum();
}

Eigen::VectorXd action_averaged_stationary(const TabularPOMDP& m) {
  Eigen::MatrixXd P = Eigen::MatrixXd::Zero(m.S, m.S);
  for (const auto& t : m.T) P += t;
  return stationary_distribution(P / static_cast<double>(m.T.size()));
}

void check_belief(const TabularPOMDP& m, const Eigen::VectorXd& belief) {
  if (belief.size() != m.S || (belief.array() < 0.0).any() || !belief.allFinite() ||
      std::abs(belief.sum() - 1.0) > 1e-9)
    throw InvalidArgument("belief is not a probability distribution over the states");
}

Eigen::VectorXd belief_from_history(const TabularPOMDP& m, const Block& history) {
  Eigen::VectorXd b = m.initial;
  for (const auto& step : history) {
    if (step.empty()) continue;
    if (step.size() != 2) throw ShapeError("tabular history step must be (action, observation)");
    const int a = discrete_action(Point{step[0]}, m.A);
    const int o = static_cast<int>(step[1]);
    if (static_cast<double>(o) != step[1] || o < 0 || o >= m.O) throw ShapeError("observation symbol out of range");
    b = m.emission.row(o).transpose().cwiseProduct(m.T[a] * b);
    const double z = b.sum();
    if (!(z > 0.0)) throw InvalidArgument("history has probability zero under the model");
    b /= z;
  }
  return b;
}

double exact_test_probability(const TabularPOMDP& m, const Eigen::VectorXd& belief, const std::vector<int>& actions,
                              const std::vector<int>& observations) {
  check_belief(m, belief);
  if (actions.size() != observations.size()) throw ShapeError("action and observation blocks differ in length");
  Eigen::VectorXd d = belief;
  for (std::size_t k = 0; k < actions.size(); ++k) {
    const int a = actions[k], o = observations[k];
    if (a < 0 || a >= m.A || o < 0 || o >= m.O) throw ShapeError("symbol out of range");
    d = m.emission.row(o).transpose().cwiseProduct(m.T[a] * d);
  }
  return d.sum();
}

Eigen::VectorXd test_distribution(const TabularPOMDP& m, const Eigen::VectorXd& belief, const std::vector<int>& actions) {
  check_belief(m, belief);
  // Unnormalized forward messages, one per observation prefix.
  std::vector<Eigen::VectorXd> msgs{belief};
  for (int a : actions) {
    if (a < 0 || a >= m.A) throw ShapeError("action symbol out of range");
    std::vector<Eigen::VectorXd> next;
    next.reserve(msgs.size() * static_cast<std::size_t>(m.O));
    for (const auto& d : msgs) {
      const Eigen::VectorXd pred = m.T[a] * d;
      for (int o = 0; o < m.O; ++o) next.push_back(m.emission.row(o).transpose().cwiseProduct(pred));
    }
    msgs = std::move(next);
  }
  Eigen::VectorXd p(static_cast<Eigen::Index>(msgs.size()));
  for (std::size_t i = 0; i < msgs.size(); ++i) p[static_cast<Eigen::Index>(i)] = msgs[i].sum();
  return p;
}

std::vector<int> decode_block(long long code, int radix, int len) {
  std::vector<int> out(static_cast<std::size_t>(len));
  for (int i = len - 1; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = static_cast<int>(code % radix);
    code /= radix;
  }
  return out;
}

long long encode_block(const std::vector<int>& block, int radix) {
  long long c = 0;
  for (int a : block) c = c * radix + a;
  return c;
}

ValueRisk exact_value_risk(const TabularPOMDP& m, const Eigen::VectorXd& belief, const std::vector<int>& block,
                           double cap) {
  check_belief(m, belief);
  const double n = static_cast<double>(block.size());
  if (std::pow(static_cast<double>(m.S), n) * std::pow(static_cast<double>(m.A), n) > cap)
    throw ConfigError("horizon too long for exact enumeration");
  // Observations never change the latent marginal under an open-loop block,
  // so the expectation only needs the predicted state marginals.
  ValueRisk out;
  out.risks = Eigen::VectorXd::Zero(m.risk.rows());
  Eigen::VectorXd d = belief;
  for (int a : block) {
    if (a < 0 || a >= m.A) throw ShapeError("action symbol out of range");
    d = m.T[a] * d;
    out.value += m.reward.dot(d);
    out.risks += m.risk * d;
  }
  return out;
}

ValueRisk exact_value_risk(const TabularPOMDP& m, const Eigen::VectorXd& belief, const Eigen::VectorXd& block_probs,
                           int block_len, double cap) {
  const double nblocks = std::pow(static_cast<double>(m.A), block_len);
  if (static_cast<double>(block_probs.size()) != nblocks) throw ShapeError("block distribution has the wrong length");
  if ((block_probs.array() < 0.0).any() || std::abs(block_probs.sum() - 1.0) > 1e-9)
    throw InvalidArgument("block distribution is not a probability vector");
  ValueRisk out;
  out.risks = Eigen::VectorXd::Zero(m.risk.rows());
  for (Eigen::Index c = 0; c < block_probs.size(); ++c) {
    if (block_probs[c] == 0.0) continue;
    const auto vr = exact_value_risk(m, belief, decode_block(c, m.A, block_len), cap);
    out.value += block_probs[c] * vr.value;
    out.risks += block_probs[c] * vr.risks;
  }
  return out;
}

Eigen::MatrixXd lgs_stationary_cov(const LinearGaussianSystem& s, double action_std) {
  const Eigen::MatrixXd drive = action_std * action_std * s.B * s.B.transpose() + s.Q();
  Eigen::MatrixXd P = drive;
  for (int i = 0; i < 100000; ++i) {
    Eigen::MatrixXd next = s.A * P * s.A.transpose() + drive;
    const double diff = (next - P).norm();
    P = next;
    if (diff <= 1e-15 * (1.0 + P.norm())) return P;
  }
  throw NumericalError("state covariance does not converge; is A stable?");
}

GaussianState kalman_filter(const LinearGaussianSystem& s, const Block& history) {
  const auto m = s.B.cols();
  const auto p = s.C.rows();
  GaussianState g{s.initial_mean, s.initial_cov};
  const Eigen::MatrixXd Q = s.Q(), R = s.R();
  for (const auto& step : history) {
    if (step.empty()) continue;
    if (static_cast<Eigen::Index>(step.size()) != m + p) throw ShapeError("history step has the wrong dimension");
    Eigen::VectorXd a(m), o(p);
    for (Eigen::Index i = 0; i < m; ++i) a[i] = step[static_cast<std::size_t>(i)];
    for (Eigen::Index i = 0; i < p; ++i) o[i] = step[static_cast<std::size_t>(m + i)];
    g.mean = s.A * g.mean + s.B * a;
    g.cov = s.A * g.cov * s.A.transpose() + Q;
    if (g.cov.isZero(0.0)) {
      continue;  // state is known exactly; the observation carries no information
    }
    const Eigen::MatrixXd S = s.C * g.cov * s.C.transpose() + R;
    Eigen::LLT<Eigen::MatrixXd> llt(S);
    if (llt.info() != Eigen::Success) throw NumericalError("innovation covariance is singular");
    const Eigen::MatrixXd gain = llt.solve(s.C * g.cov).transpose();
    g.mean += gain * (o - s.C * g.mean);
    g.cov = g.cov - gain * s.C * g.cov;
    g.cov = 0.5 * (g.cov + g.cov.transpose());
  }
  return g;
}

Eigen::VectorXd lgs_conditional_mean(const LinearGaussianSystem& s, const Block& history, const Block& actions) {
  const auto m = s.B.cols();
  const auto p = s.C.rows();
  Eigen::VectorXd x = kalman_filter(s, history).mean;
  Eigen::VectorXd out(p * static_cast<Eigen::Index>(actions.size()));
  for (std::size_t k = 0; k < actions.size(); ++k) {
    x = s.A * x + s.B * to_vec(actions[k], m, "action");
    out.segment(static_cast<Eigen::Index>(k) * p, p) = s.C * x;
  }
  return out;
}

Eigen::MatrixXd riccati_fixed_point(const LinearGaussianSystem& s, int max_iter, double tol) {
  const Eigen::MatrixXd Q = s.Q(), R = s.R();
  Eigen::MatrixXd P = s.initial_cov;
  for (int i = 0; i < max_iter; ++i) {
    const Eigen::MatrixXd S = s.C * P * s.C.transpose() + R;
    const Eigen::MatrixXd filtered = P - P * s.C.transpose() * S.ldlt().solve(s.C * P);
    const Eigen::MatrixXd next = s.A * filtered * s.A.transpose() + Q;
    const double diff = (next - P).norm();
    P = next;
    if (diff <= tol * (1.0 + P.norm())) return P;
  }
  throw NumericalError("Riccati recursion did not converge");
}

}  // namespace kpsr
