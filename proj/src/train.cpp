#include "kpsr/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

#include "kpsr/errors.hpp"

namespace kpsr {

constexpr double kPreconditionerRidge = 1e-3;

double lagrangian(double V, const Eigen::VectorXd& C, const Eigen::VectorXd& Cbar, const Eigen::VectorXd& eta) {
  if (C.size() != Cbar.size() || C.size() != eta.size()) throw ShapeError("Lagrangian inputs differ in length");
  double J = V;
  for (Eigen::Index i = 0; i < C.size(); ++i) J -= eta[i] * std::max(C[i] - Cbar[i], 0.0);
  return J;
}

double DualVars::beta(int k) const {
  if (k < 1) throw InvalidArgument("dual iteration index starts at 1");
  return beta0 / std::sqrt(static_cast<double>(k));
}

DualVars dual_step(const DualVars& d, const Eigen::VectorXd& C, const Eigen::VectorXd& Cbar, double beta) {
  if (!(beta > 0.0)) throw InvalidArgument("dual step size must be positive");
  if (C.size() != Cbar.size() || C.size() != d.eta.size()) throw ShapeError("dual step inputs differ in length");
  DualVars out = d;
  for (Eigen::Index i = 0; i < C.size(); ++i) out.eta[i] = std::max(d.eta[i] + beta * (C[i] - Cbar[i]), 0.0);
  return out;
}

HistoryBatch select_histories(const std::vector<WindowSample>& windows, const FeatureMap& history_map, double min_freq,
                              int max_batch, std::uint64_t seed) {
  if (windows.empty()) throw InvalidArgument("no windows to draw start histories from");
  std::map<Block, std::size_t> counts;
  for (const auto& w : windows) ++counts[w.history];
  HistoryBatch b;
  const double n = static_cast<double>(windows.size());
  for (const auto& [h, c] : counts) {
    const double f = static_cast<double>(c) / n;
    if (f >= min_freq) {
      b.histories.push_back(h);
      b.frequency.push_back(f);
    }
  }
  if (b.histories.empty()) {
    Rng rng(seed, 0x62617463ULL);
    const int m = std::min<int>(max_batch, static_cast<int>(windows.size()));
    for (int i = 0; i < m; ++i) {
      b.histories.push_back(windows[rng.below(windows.size())].history);
      b.frequency.push_back(1.0 / n);
    }
  }
  for (const auto& h : b.histories) b.features.push_back(history_map.features(h));
  return b;
}

BatchObjective::BatchObjective(const LinkWeights& links, const OperatorBundle& bundle,
                               const std::vector<Eigen::VectorXd>& histories, Eigen::VectorXd eta, Eigen::VectorXd cbar,
                               int mc_samples, std::uint64_t seed)
    : bundle_(&bundle), eta_(std::move(eta)), cbar_(std::move(cbar)), mc_(mc_samples), seed_(seed) {
  if (mc_samples < 2) throw InvalidArgument("the baselined gradient needs at least two Monte Carlo samples");
  if (eta_.size() != cbar_.size() || eta_.size() != static_cast<Eigen::Index>(links.m.size()))
    throw ShapeError("multipliers, thresholds and risk links differ in count");
  for (const auto& h : histories) {
    x_.push_back(policy_features(bundle, h));
    evals_.emplace_back(links, bundle, h);
  }
  if (!x_.empty()) {
    const Eigen::Index n = x_.front().size();
    Eigen::MatrixXd G = Eigen::MatrixXd::Zero(n, n);
    for (const auto& x : x_) G += x * x.transpose();
    G /= static_cast<double>(x_.size());
    const double ridge = kPreconditionerRidge * G.diagonal().mean();
    G.diagonal().array() += ridge;
    precond_ = G.llt().solve(Eigen::MatrixXd::Identity(n, n));
  }
}

std::vector<BatchObjective::Draw> BatchObjective::draws(const PolicyParams& p, std::size_t i) const {
  Rng rng(seed_, i);
  std::vector<Draw> out(static_cast<std::size_t>(mc_));
  if (p.discrete) {
    const Eigen::VectorXd probs = block_probabilities(p, x_[i]);
    for (auto& d : out) d.code = sample_code(probs, rng.uniform());
  } else {
    const Eigen::VectorXd mu = block_mean(p, x_[i]);
    for (auto& d : out) {
      d.noise.resize(mu.size());
      for (Eigen::Index j = 0; j < mu.size(); ++j) d.noise[j] = rng.normal();
      d.action = mu + p.sigma * d.noise;
    }
  }
  return out;
}

ValueRisk BatchObjective::draw_value(const PolicyParams& p, std::size_t i, const Draw& d) {
  return p.discrete ? evals_[i].code(d.code, p) : evals_[i](block_from_vector(p, d.action));
}

ValueRisk BatchObjective::history_value(const PolicyParams& p, std::size_t i) {
  ValueRisk acc;
  acc.risks = Eigen::VectorXd::Zero(cbar_.size());
  for (const auto& d : draws(p, i)) {
    const ValueRisk v = draw_value(p, i, d);
    acc.value += v.value;
    acc.risks += v.risks;
  }
  acc.value /= mc_;
  acc.risks /= mc_;
  return acc;
}

ValueRisk BatchObjective::history_value_exact(const PolicyParams& p, std::size_t i) {
  if (!p.discrete) throw UnsupportedError("exact block expectation needs discrete actions");
  const Eigen::VectorXd probs = block_probabilities(p, x_[i]);
  ValueRisk acc;
  acc.risks = Eigen::VectorXd::Zero(cbar_.size());
  for (Eigen::Index c = 0; c < probs.size(); ++c) {
    const ValueRisk v = evals_[i].code(c, p);
    acc.value += probs[c] * v.value;
    acc.risks += probs[c] * v.risks;
  }
  return acc;
}

double BatchObjective::evaluate(const PolicyParams& p) {
  double J = 0.0;
  for (std::size_t i = 0; i < x_.size(); ++i) {
    const ValueRisk v = history_value(p, i);
    J += lagrangian(v.value, v.risks, cbar_, eta_);
  }
  return J / static_cast<double>(x_.size());
}

double BatchObjective::evaluate_exact(const PolicyParams& p) {
  double J = 0.0;
  for (std::size_t i = 0; i < x_.size(); ++i) {
    const ValueRisk v = history_value_exact(p, i);
    J += lagrangian(v.value, v.risks, cbar_, eta_);
  }
  return J / static_cast<double>(x_.size());
}

Eigen::MatrixXd BatchObjective::gradient(const PolicyParams& p) {
  Eigen::MatrixXd G = Eigen::MatrixXd::Zero(p.theta.rows(), p.theta.cols());
  for (std::size_t i = 0; i < x_.size(); ++i) {
    const auto ds = draws(p, i);
    std::vector<ValueRisk> vals;
    vals.reserve(ds.size());
    Eigen::VectorXd Cmean = Eigen::VectorXd::Zero(cbar_.size());
    for (const auto& d : ds) {
      vals.push_back(draw_value(p, i, d));
      Cmean += vals.back().risks;
    }
    Cmean /= mc_;
    // The hinge is differentiated at the current estimate of C_i(h).
    Eigen::VectorXd active = Eigen::VectorXd::Zero(cbar_.size());
    for (Eigen::Index c = 0; c < cbar_.size(); ++c)
      if (Cmean[c] > cbar_[c]) active[c] = eta_[c];
    std::vector<double> f(ds.size());
    double fbar = 0.0;
    for (std::size_t j = 0; j < ds.size(); ++j) {
      f[j] = vals[j].value - active.dot(vals[j].risks);
      fbar += f[j];
    }
    fbar /= mc_;
    Eigen::VectorXd score_sum = Eigen::VectorXd::Zero(p.theta.rows());
    if (p.discrete) {
      const Eigen::VectorXd probs = block_probabilities(p, x_[i]);
      double wsum = 0.0;
      for (std::size_t j = 0; j < ds.size(); ++j) {
        const double w = f[j] - fbar;
        score_sum[ds[j].code] += w;
        wsum += w;
      }
      score_sum -= wsum * probs;
    } else {
      for (std::size_t j = 0; j < ds.size(); ++j) score_sum += (f[j] - fbar) * ds[j].noise / p.sigma;
    }
    G += score_sum * x_[i].transpose() / static_cast<double>(mc_ - 1);
  }
  G /= static_cast<double>(x_.size());
  for (Eigen::Index r = 0; r < G.rows(); ++r)
    for (Eigen::Index c = 0; c < G.cols(); ++c)
      if (!std::isfinite(G(r, c)))
        throw NumericalError("policy gradient component (" + std::to_string(r) + ", " + std::to_string(c) +
                             ") is not finite");
  return G;
}

bool BatchObjective::no_feasible_block(const PolicyParams& p, std::size_t i) {
  if (!p.discrete) return false;
  for (long long c = 0; c < p.num_blocks(); ++c) {
    const ValueRisk v = evals_[i].code(c, p);
    if (((v.risks - cbar_).array() <= 0.0).all()) return false;
  }
  return true;
}

StepResult policy_step(const PolicyParams& p, BatchObjective& obj, double alpha0, int max_halvings) {
  if (!(alpha0 > 0.0)) throw InvalidArgument("step size must be positive");
  StepResult r;
  r.policy = p;
  r.J_before = obj.evaluate(p);
  if (!std::isfinite(r.J_before)) throw NumericalError("batch objective is not finite");
  r.gradient = obj.gradient(p);
  r.direction = obj.size() > 0 ? Eigen::MatrixXd(r.gradient * obj.preconditioner()) : r.gradient;
  r.J_after = r.J_before;
  double alpha = alpha0;
  for (int h = 0; h <= max_halvings; ++h, alpha *= 0.5) {
    PolicyParams cand = p;
    cand.theta += alpha * r.direction;
    const double J = obj.evaluate(cand);
    r.alpha = alpha;
    if (std::isfinite(J) && J >= r.J_before) {
      r.policy = std::move(cand);
      r.J_after = J;
      r.accepted = true;
      return r;
    }
  }
  return r;
}

namespace {

const char kCkptMagic[8] = {'K', 'P', 'S', 'R', 'C', 'K', 'P', 'T'};

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string serialize_state(const TrainState& s) {
  ByteWriter w;
  w.raw(kCkptMagic, sizeof kCkptMagic);
  w.u32(kCheckpointVersion);
  w.i64(s.k);
  write_policy(w, s.policy);
  w.vec(s.eta);
  write_links(w, s.links);
  w.u64(s.rows.size());
  for (const auto& r : s.rows) {
    w.i64(r.k);
    w.f64(r.J);
    w.f64(r.V);
    w.vec(r.C);
    w.vec(r.eta);
    w.f64(r.alpha);
    w.u8(r.accepted ? 1 : 0);
  }
  w.ints(s.flagged);
  w.u64(s.seed);
  w.u8(s.finished ? 1 : 0);
  w.u8(s.feasible ? 1 : 0);
  w.str(s.provenance);
  return w.as_string();
}

TrainState deserialize_state(const std::string& bytes) {
  ByteReader r(bytes);
  char magic[8];
  r.raw(magic, sizeof magic);
  if (std::string(magic, 8) != std::string(kCkptMagic, 8)) throw FormatError("not a training checkpoint");
  const auto version = r.u32();
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  TrainState s;
  s.k = static_cast<int>(r.i64());
  s.policy = read_policy(r);
  s.eta = r.vec();
  s.links = read_links(r);
  const auto n = r.u64();
  for (std::uint64_t i = 0; i < n; ++i) {
    LogRow row;
    row.k = static_cast<int>(r.i64());
    row.J = r.f64();
    row.V = r.f64();
    row.C = r.vec();
    row.eta = r.vec();
    row.alpha = r.f64();
    row.accepted = r.u8() != 0;
    s.rows.push_back(std::move(row));
  }
  s.flagged = r.ints();
  s.seed = r.u64();
  s.finished = r.u8() != 0;
  s.feasible = r.u8() != 0;
  s.provenance = r.str();
  if (!r.done()) throw FormatError("trailing bytes in checkpoint");
  return s;
}

std::string format_log(const TrainState& s, const std::string& comment) {
  std::string out;
  if (!comment.empty()) out += "# " + comment + "\n";
  const auto nc = s.eta.size();
  out += "k,J,V";
  for (Eigen::Index i = 1; i <= nc; ++i) out += ",C_" + std::to_string(i);
  for (Eigen::Index i = 1; i <= nc; ++i) out += ",eta_" + std::to_string(i);
  out += ",alpha,accepted\n";
  for (const auto& r : s.rows) {
    out += std::to_string(r.k) + "," + fmt(r.J) + "," + fmt(r.V);
    for (Eigen::Index i = 0; i < nc; ++i) out += "," + fmt(r.C[i]);
    for (Eigen::Index i = 0; i < nc; ++i) out += "," + fmt(r.eta[i]);
    out += "," + fmt(r.alpha) + "," + (r.accepted ? "1" : "0") + "\n";
  }
  if (s.finished) out += std::string("status,") + (s.feasible ? "feasible" : "infeasible") + "\n";
  return out;
}

namespace {

std::vector<std::size_t> active_indices(const TrainState& s, std::size_t n) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < n; ++i)
    if (std::find(s.flagged.begin(), s.flagged.end(), static_cast<int>(i)) == s.flagged.end()) out.push_back(i);
  return out;
}

void persist(const TrainState& s, const TrainIO& io) {
  if (!io.checkpoint_path.empty()) write_file(io.checkpoint_path, serialize_state(s));
  if (!io.log_path.empty()) write_file(io.log_path, format_log(s, io.comment));
}

}  // namespace

std::vector<ValueRisk> policy_values(const TrainState& s, const OperatorBundle& bundle, const HistoryBatch& batch,
                                     int mc_samples, std::uint64_t seed) {
  BatchObjective obj(s.links, bundle, batch.features, s.eta, Eigen::VectorXd::Zero(s.eta.size()),
                     std::max(mc_samples, 2), seed);
  std::vector<ValueRisk> out;
  for (std::size_t i = 0; i < obj.size(); ++i)
    out.push_back(s.policy.discrete ? obj.history_value_exact(s.policy, i) : obj.history_value(s.policy, i));
  return out;
}

TrainState train(const TrainConfig& cfg, Environment& env, const OperatorBundle& bundle, const HistoryBatch& batch,
                 const TrainIO& io, const TrainState* resume, int stop_after) {
  const int nc = static_cast<int>(cfg.cbar.size());
  if (nc != env.descriptor().num_risks) throw ConfigError("one constraint threshold per risk channel is required");
  if (cfg.iterations < 0 || cfg.checkpoint_every < 1) throw ConfigError("invalid iteration settings");
  if (batch.features.empty()) throw InvalidArgument("empty history batch");
  TrainState s;
  if (resume) {
    s = *resume;
    if (s.seed != cfg.seed) throw ConfigError("checkpoint was written with a different seed");
  } else {
    s.policy = make_policy(bundle, env.descriptor(), cfg.sigma);
    s.eta = Eigen::VectorXd::Zero(nc);
    s.seed = cfg.seed;
    s.provenance = io.comment;
  }
  DualVars dual{s.eta, cfg.beta0};
  while (s.k < cfg.iterations && !s.finished) {
    const int k = s.k + 1;
    TrainState prev = s;
    s.links = fit_links_on_policy(env, bundle, s.policy, cfg.link_episodes, cfg.lambda_link,
                                  derive_seed(cfg.seed, 0x4c494e4b00ULL + static_cast<std::uint64_t>(k)));
    {
      BatchObjective all(s.links, bundle, batch.features, s.eta, cfg.cbar, cfg.mc_samples,
                         derive_seed(cfg.seed, 0x4a00ULL + static_cast<std::uint64_t>(k)));
      for (std::size_t i = 0; i < all.size(); ++i) {
        const bool already = std::find(s.flagged.begin(), s.flagged.end(), static_cast<int>(i)) != s.flagged.end();
        if (!already && all.no_feasible_block(s.policy, i)) s.flagged.push_back(static_cast<int>(i));
      }
      std::sort(s.flagged.begin(), s.flagged.end());
    }
    const auto active = active_indices(s, batch.features.size());
    if (active.empty()) {
      s.k = k;
      s.finished = true;
      s.feasible = false;
      persist(s, io);
      return s;
    }
    std::vector<Eigen::VectorXd> feats;
    for (auto i : active) feats.push_back(batch.features[i]);
    BatchObjective obj(s.links, bundle, feats, s.eta, cfg.cbar, cfg.mc_samples,
                       derive_seed(cfg.seed, 0x4a00ULL + static_cast<std::uint64_t>(k)));
    StepResult step;
    try {
      step = policy_step(s.policy, obj, cfg.alpha0);
    } catch (const NumericalError&) {
      persist(prev, io);
      throw;
    }
    s.policy = step.policy;
    double V = 0.0;
    Eigen::VectorXd C = Eigen::VectorXd::Constant(nc, -std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < obj.size(); ++i) {
      const ValueRisk v = s.policy.discrete ? obj.history_value_exact(s.policy, i) : obj.history_value(s.policy, i);
      V += v.value;
      C = C.cwiseMax(v.risks);
    }
    V /= static_cast<double>(obj.size());
    if (!std::isfinite(V) || !std::isfinite(step.J_after)) {
      persist(prev, io);
      throw NumericalError("objective became non-finite at iteration " + std::to_string(k));
    }
    dual.eta = s.eta;
    dual = dual_step(dual, C, cfg.cbar, dual.beta(k));
    s.eta = dual.eta;
    s.rows.push_back(LogRow{k, step.J_after, V, C, s.eta, step.alpha, step.accepted});
    s.k = k;
    if (s.k == cfg.iterations) {
      s.finished = true;
      s.feasible = ((C - cfg.cbar).array() <= cfg.feasibility_tol).all();
    }
    if (s.finished || s.k % cfg.checkpoint_every == 0) persist(s, io);
    if (stop_after >= 0 && s.k >= stop_after) break;
  }
  if (cfg.iterations == 0 && !s.finished) {
    s.finished = true;
    s.feasible = true;
    persist(s, io);
  }
  return s;
}

}  // namespace kpsr
