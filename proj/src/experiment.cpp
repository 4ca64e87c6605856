#include "kpsr/experiment.hpp"

#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "kpsr/errors.hpp"
#include "kpsr/links.hpp"

namespace kpsr {

using json = nlohmann::json;
namespace fs = std::filesystem;

std::string ExperimentConfig::provenance() const { return "config=" + hex64(hash) + " version=" + kToolVersion; }

namespace {

void check_keys(const json& j, const std::vector<std::string>& allowed, const std::string& where) {
  for (const auto& [k, v] : j.items()) {
    (void)v;
    if (std::find(allowed.begin(), allowed.end(), k) == allowed.end())
      throw ConfigError("unknown key '" + k + "' in " + where);
  }
}

double ridge_value(const json& j, const char* key) {
  if (!j.contains(key)) return 0.0;
  const auto& v = j[key];
  if (v.is_string()) {
    if (v.get<std::string>() != "auto") throw ConfigError(std::string(key) + " must be \"auto\" or a positive number");
    return 0.0;
  }
  if (!v.is_number() || !(v.get<double>() > 0.0)) throw ConfigError(std::string(key) + " must be positive");
  return v.get<double>();
}

template <class T>
T get_or(const json& j, const char* key, T def) {
  if (!j.contains(key)) return def;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

FeatureConfig parse_feature(const json& j, const FeatureConfig& def, const std::string& where) {
  FeatureConfig f = def;
  if (j.is_null()) return f;
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  check_keys(j, {"kind", "mode", "bandwidth", "rff_dim", "seed", "affine", "pad"}, where);
  if (j.contains("kind")) f.spec.kind = kernel_kind_from_string(j["kind"].get<std::string>());
  if (j.contains("mode")) f.mode = block_mode_from_string(j["mode"].get<std::string>());
  if (j.contains("bandwidth")) {
    if (j["bandwidth"].is_string()) {
      if (j["bandwidth"].get<std::string>() != "auto") throw ConfigError(where + ".bandwidth must be \"auto\" or a number");
      f.bandwidth_auto = true;
    } else {
      f.spec.bandwidth = j["bandwidth"].get<double>();
      f.bandwidth_auto = false;
      if (!(f.spec.bandwidth > 0.0)) throw ConfigError(where + ".bandwidth must be positive");
    }
  } else if (f.spec.kind == KernelKind::RadialBasis) {
    f.bandwidth_auto = true;
  }
  f.spec.rff_dim = get_or<int>(j, "rff_dim", f.spec.rff_dim);
  f.spec.seed = get_or<std::uint64_t>(j, "seed", f.spec.seed);
  f.spec.affine = get_or<bool>(j, "affine", f.spec.affine);
  f.pad = get_or<bool>(j, "pad", f.pad);
  return f;
}

}  // namespace

ExperimentConfig parse_config(const std::string& text, const std::string& base_dir,
                              std::optional<std::uint64_t> seed_override, std::optional<std::string> out_override) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  check_keys(j,
             {"env", "W", "L", "features", "lambda", "lambda_link", "data", "mc_samples", "constraints", "train",
              "diagnose", "max_domain_dim", "seed", "out"},
             "config");
  ExperimentConfig c;
  if (!j.contains("env") || !j["env"].is_string()) throw ConfigError("config needs an 'env' path");
  fs::path env = j["env"].get<std::string>();
  if (env.is_relative()) env = fs::path(base_dir) / env;
  if (!fs::exists(env)) throw ConfigError("environment file not found: " + env.string());
  c.env_path = env.string();
  c.W = get_or<int>(j, "W", c.W);
  c.L = get_or<int>(j, "L", c.L);
  if (c.W < 1 || c.L < 1) throw ConfigError("W and L must be positive");
  c.lambda = ridge_value(j, "lambda");
  c.lambda_link = ridge_value(j, "lambda_link");

  const Environment e = load_environment(c.env_path);
  const EnvDescriptor d = e.descriptor();
  FeatureConfig disc;
  disc.spec.kind = KernelKind::OneHot;
  FeatureConfig lin;
  lin.spec.kind = KernelKind::Linear;
  lin.mode = BlockMode::Concat;
  lin.spec.affine = true;
  FeatureConfig lin_plain = lin;
  lin_plain.spec.affine = false;
  const json feats = j.value("features", json::object());
  check_keys(feats, {"history", "test_actions", "test_observations", "action", "observation"}, "features");
  auto pick = [&](const char* key, bool discrete, const FeatureConfig& cont) {
    return parse_feature(feats.value(key, json()), discrete ? disc : cont, std::string("features.") + key);
  };
  c.history = pick("history", d.discrete_actions && d.discrete_observations, lin);
  c.test_actions = pick("test_actions", d.discrete_actions, lin);
  c.test_observations = pick("test_observations", d.discrete_observations, lin_plain);
  c.action = pick("action", d.discrete_actions, lin);
  c.observation = pick("observation", d.discrete_observations, lin_plain);

  const json data = j.value("data", json::object());
  check_keys(data, {"episodes", "T", "heldout"}, "data");
  c.episodes = get_or<int>(data, "episodes", c.episodes);
  c.T = get_or<int>(data, "T", c.T);
  c.heldout = get_or<double>(data, "heldout", c.heldout);
  if (c.episodes < 0 || c.T < 1) throw ConfigError("data.episodes must be >= 0 and data.T >= 1");

  c.mc_samples = get_or<int>(j, "mc_samples", c.mc_samples);
  if (c.mc_samples < 2) throw ConfigError("mc_samples must be at least 2");

  c.train.cbar = Eigen::VectorXd::Constant(d.num_risks, std::numeric_limits<double>::infinity());
  if (j.contains("constraints")) {
    const auto& cs = j["constraints"];
    if (!cs.is_array() || static_cast<int>(cs.size()) != d.num_risks)
      throw ConfigError("constraints must list one threshold per risk channel (null = unconstrained)");
    for (std::size_t i = 0; i < cs.size(); ++i)
      if (!cs[i].is_null()) c.train.cbar[static_cast<Eigen::Index>(i)] = cs[i].get<double>();
  }
  const json tr = j.value("train", json::object());
  check_keys(tr,
             {"iterations", "alpha0", "beta0", "link_episodes", "checkpoint_every", "min_history_freq", "max_batch",
              "feasibility_tol", "sigma"},
             "train");
  c.train.iterations = get_or<int>(tr, "iterations", c.train.iterations);
  c.train.alpha0 = get_or<double>(tr, "alpha0", c.train.alpha0);
  c.train.beta0 = get_or<double>(tr, "beta0", c.train.beta0);
  c.train.link_episodes = get_or<int>(tr, "link_episodes", c.train.link_episodes);
  c.train.checkpoint_every = get_or<int>(tr, "checkpoint_every", c.train.checkpoint_every);
  c.train.feasibility_tol = get_or<double>(tr, "feasibility_tol", c.train.feasibility_tol);
  c.train.sigma = get_or<double>(tr, "sigma", c.train.sigma);
  c.min_history_freq = get_or<double>(tr, "min_history_freq", c.min_history_freq);
  c.max_batch = get_or<int>(tr, "max_batch", c.max_batch);
  if (c.train.iterations < 0 || c.train.checkpoint_every < 1 || !(c.train.alpha0 > 0.0) || !(c.train.beta0 > 0.0) ||
      c.train.link_episodes < 1 || c.max_batch < 1)
    throw ConfigError("invalid train settings");
  c.train.mc_samples = c.mc_samples;
  c.train.lambda_link = c.lambda_link;

  const json dg = j.value("diagnose", json::object());
  check_keys(dg, {"k_grid", "seeds", "eval_windows"}, "diagnose");
  c.k_grid = get_or<std::vector<int>>(dg, "k_grid", c.k_grid);
  c.diagnose_seeds = get_or<int>(dg, "seeds", c.diagnose_seeds);
  c.eval_windows = get_or<int>(dg, "eval_windows", c.eval_windows);
  if (c.k_grid.size() < 2 || c.diagnose_seeds < 1) throw ConfigError("diagnose needs at least two K values and one seed");
  c.max_domain_dim = get_or<long long>(j, "max_domain_dim", c.max_domain_dim);

  if (!j.contains("seed") && !seed_override) throw ConfigError("config needs an explicit 'seed'");
  c.seed = seed_override ? *seed_override : j["seed"].get<std::uint64_t>();
  c.out_dir = out_override ? *out_override : j.value("out", std::string("out"));
  c.train.seed = c.stream(streams::train);

  json canon = j;
  canon.erase("out");
  canon["seed"] = c.seed;
  canon["env"] = hex64(e.config_hash());
  c.canonical = canon.dump();
  c.hash = fnv1a(c.canonical);
  return c;
}

ExperimentConfig load_config(const std::string& path, std::optional<std::uint64_t> seed_override,
                             std::optional<std::string> out_override) {
  const std::string base = fs::path(path).parent_path().string();
  return parse_config(read_file(path), base.empty() ? "." : base, seed_override, out_override);
}

Environment make_environment(const ExperimentConfig& cfg) { return load_environment(cfg.env_path); }

namespace {

Eigen::VectorXd flat(const Block& b) {
  std::vector<double> v;
  for (const auto& p : b) v.insert(v.end(), p.begin(), p.end());
  return Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

FeatureMap build_one(const FeatureConfig& fc, int arity, const std::vector<int>& radices, int input_dim,
                     const std::vector<Block>& samples, std::uint64_t seed) {
  KernelSpec spec = fc.spec;
  if (spec.kind == KernelKind::RadialBasis && spec.seed == 0) spec.seed = seed;
  MapShape shape;
  shape.arity = arity;
  shape.mode = fc.mode;
  shape.pad = fc.pad;
  if (spec.kind == KernelKind::OneHot) {
    for (int r : radices)
      if (r < 1) throw ConfigError("one-hot features need a finite alphabet; use linear or radial-basis features");
    shape.radices = radices;
  } else {
    shape.input_dim = input_dim;
  }
  if (spec.kind == KernelKind::RadialBasis && fc.bandwidth_auto) {
    std::vector<Eigen::VectorXd> pts;
    for (const auto& b : samples) {
      if (fc.mode == BlockMode::Tensor) {
        pts.push_back(flat(b));
      } else {
        for (const auto& p : b)
          if (!p.empty()) pts.push_back(Eigen::Map<const Eigen::VectorXd>(p.data(), static_cast<Eigen::Index>(p.size())));
      }
    }
    spec.bandwidth = median_heuristic(pts, seed);
  }
  return make_feature_map(spec, shape);
}

}  // namespace

SpaceMaps build_maps(const ExperimentConfig& cfg, const EnvDescriptor& d, const std::vector<WindowSample>& windows) {
  std::vector<Block> H, A, O, a, o;
  for (const auto& w : windows) {
    H.push_back(w.history);
    A.push_back(w.test_actions);
    O.push_back(w.test_observations);
    a.push_back(Block{w.action});
    o.push_back(Block{w.observation});
  }
  const int na = d.discrete_actions ? d.num_actions : 0;
  const int no = d.discrete_observations ? d.num_observations : 0;
  const std::uint64_t s = cfg.stream(streams::features);
  SpaceMaps m{build_one(cfg.history, cfg.L, {na, no}, d.action_dim + d.observation_dim, H, derive_seed(s, 1)),
              build_one(cfg.test_actions, cfg.W, {na}, d.action_dim, A, derive_seed(s, 2)),
              build_one(cfg.test_observations, cfg.W, {no}, d.observation_dim, O, derive_seed(s, 3)),
              build_one(cfg.action, 1, {na}, d.action_dim, a, derive_seed(s, 4)),
              build_one(cfg.observation, 1, {no}, d.observation_dim, o, derive_seed(s, 5))};
  return m;
}

std::vector<Trajectory> generate_trajectories(const ExperimentConfig& cfg, Environment& env, int episodes,
                                              std::uint64_t seed) {
  const auto* l = env.linear();
  return rollout(env, uniform_behavior(env.descriptor(), l ? l->behavior_action_std : 1.0), episodes, cfg.T, seed);
}

Dataset prepare_dataset(const ExperimentConfig& cfg, const EnvDescriptor& d, std::vector<Trajectory> trajs) {
  Dataset ds;
  ds.trajectories = std::move(trajs);
  ds.split = split_dataset(make_windows(ds.trajectories, cfg.W, cfg.L), cfg.heldout, cfg.stream(streams::split));
  if (ds.split.train.empty()) throw ConfigError("no training windows; increase data.episodes or data.T");
  ds.maps = build_maps(cfg, d, ds.split.train);
  ds.train = featurize_windows(ds.split.train, ds.maps);
  ds.heldout = featurize_windows(ds.split.heldout, ds.maps);
  return ds;
}

std::string trajectories_path(const ExperimentConfig& cfg) { return (fs::path(cfg.out_dir) / "trajectories.csv").string(); }
std::string bundle_path(const ExperimentConfig& cfg) { return (fs::path(cfg.out_dir) / "bundle.kpsr").string(); }
std::string checkpoint_path(const ExperimentConfig& cfg) { return (fs::path(cfg.out_dir) / "checkpoint.kpsr").string(); }
std::string log_path(const ExperimentConfig& cfg) { return (fs::path(cfg.out_dir) / "train_log.csv").string(); }

namespace {

void ensure_out(const ExperimentConfig& cfg) {
  std::error_code ec;
  fs::create_directories(cfg.out_dir, ec);
  if (ec) throw ConfigError("cannot create output directory " + cfg.out_dir + ": " + ec.message());
}

void write_json(const std::string& path, json j, const ExperimentConfig& cfg) {
  j["config_hash"] = hex64(cfg.hash);
  j["tool_version"] = kToolVersion;
  write_file(path, j.dump(2) + "\n");
}

// Wall-clock information lives only in this sidecar so the real outputs stay byte-reproducible.
void stamp(const ExperimentConfig& cfg, const std::string& command) {
  std::ofstream f(fs::path(cfg.out_dir) / "timestamps.txt", std::ios::app);
  f << command << " " << static_cast<long long>(std::time(nullptr)) << "\n";
}

std::vector<Trajectory> load_data(const ExperimentConfig& cfg) {
  const auto p = trajectories_path(cfg);
  if (!fs::exists(p)) throw ConfigError("no trajectories at " + p + "; run 'generate' first");
  return load_trajectories(p);
}

OperatorBundle load_fitted(const ExperimentConfig& cfg) {
  const auto p = bundle_path(cfg);
  if (!fs::exists(p)) throw ConfigError("no operator bundle at " + p + "; run 'fit' first");
  return load_bundle(p);
}

json vec_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

const TabularPOMDP& require_tabular(const Environment& env, const char* what) {
  const auto* m = env.tabular();
  if (!m) throw NoOracleError(std::string(what) + " needs an environment with an exact tabular oracle");
  return *m;
}

}  // namespace

std::vector<int> symbols(const Block& b) {
  std::vector<int> out;
  for (const auto& p : b) {
    if (p.size() != 1) throw ShapeError("expected single-symbol steps");
    out.push_back(static_cast<int>(p[0]));
  }
  return out;
}

void cmd_generate(const ExperimentConfig& cfg) {
  ensure_out(cfg);
  Environment env = make_environment(cfg);
  const auto trajs = generate_trajectories(cfg, env, cfg.episodes, cfg.stream(streams::data));
  write_trajectories(trajectories_path(cfg), trajs, env.descriptor().num_risks, cfg.provenance());
  stamp(cfg, "generate");
}

void cmd_fit(const ExperimentConfig& cfg) {
  ensure_out(cfg);
  Environment env = make_environment(cfg);
  Dataset ds = prepare_dataset(cfg, env.descriptor(), load_data(cfg));
  FitOptions opt;
  opt.lambda = cfg.lambda;
  opt.seed = cfg.stream(streams::fit);
  opt.max_domain_dim = cfg.max_domain_dim;
  OperatorBundle b = fit_bundle(ds.maps, cfg.W, cfg.L, ds.train, opt);
  b.provenance = cfg.provenance();
  save_bundle(b, bundle_path(cfg));
  json r;
  r["samples"] = b.samples;
  r["heldout_samples"] = ds.heldout.size();
  r["losses"] = {{"one_step", b.one_step.loss},
                 {"forward", b.forward.loss},
                 {"shifted_forward", b.shifted_forward.loss},
                 {"shifted", b.shifted.loss},
                 {"extended", b.extended.loss}};
  r["lambda"] = {{"one_step", b.one_step.lambda},
                 {"forward", b.forward.lambda},
                 {"shifted_forward", b.shifted_forward.lambda},
                 {"shifted", b.shifted.lambda},
                 {"extended", b.extended.lambda}};
  if (ds.heldout.size() > 0) {
    r["composition_gap"] = composition_gap(ds.heldout, b.forward, b.shifted, b.shifted_forward);
    if (b.maps.observation.spec().kind == KernelKind::OneHot)
      r["extended_gap"] = extended_gap(b, ds.heldout);
    else
      r["extended_gap"] = nullptr;
  }
  write_json((fs::path(cfg.out_dir) / "fit_report.json").string(), r, cfg);
  stamp(cfg, "fit");
}

namespace {

HistoryBatch batch_for(const ExperimentConfig& cfg, const OperatorBundle& b) {
  const auto split = split_dataset(make_windows(load_data(cfg), cfg.W, cfg.L), cfg.heldout, cfg.stream(streams::split));
  return select_histories(split.train, b.maps.history, cfg.min_history_freq, cfg.max_batch, cfg.stream(streams::train));
}

}  // namespace

TrainState cmd_train(const ExperimentConfig& cfg, bool resume, int stop_after) {
  ensure_out(cfg);
  Environment env = make_environment(cfg);
  const OperatorBundle b = load_fitted(cfg);
  const HistoryBatch batch = batch_for(cfg, b);
  TrainIO io{log_path(cfg), checkpoint_path(cfg), cfg.provenance()};
  std::optional<TrainState> prev;
  if (resume && fs::exists(io.checkpoint_path)) prev = deserialize_state(read_file(io.checkpoint_path));
  TrainState s = train(cfg.train, env, b, batch, io, prev ? &*prev : nullptr, stop_after);
  stamp(cfg, "train");
  return s;
}

void cmd_evaluate(const ExperimentConfig& cfg) {
  ensure_out(cfg);
  Environment env = make_environment(cfg);
  const TabularPOMDP& m = require_tabular(env, "evaluate");
  const OperatorBundle b = load_fitted(cfg);
  const HistoryBatch batch = batch_for(cfg, b);
  PolicyParams policy = make_policy(b, env.descriptor(), cfg.train.sigma);
  std::vector<int> flagged;
  if (fs::exists(checkpoint_path(cfg))) {
    const TrainState s = deserialize_state(read_file(checkpoint_path(cfg)));
    policy = s.policy;
    flagged = s.flagged;
  }
  const std::uint64_t seed = cfg.stream(streams::evaluate);
  const LinkWeights links = fit_links_on_policy(env, b, policy, cfg.train.link_episodes, cfg.lambda_link, seed);
  json rows = json::array();
  double max_dv = 0.0, max_dc = 0.0;
  bool constraints_ok = true, optimal = true;
  for (std::size_t i = 0; i < batch.histories.size(); ++i) {
    const auto est = eval_value(links, b, batch.features[i], policy, cfg.mc_samples, derive_seed(seed, i));
    const Eigen::VectorXd belief = belief_from_history(m, batch.histories[i]);
    const Eigen::VectorXd probs = block_probabilities(policy, policy_features(b, batch.features[i]));
    const ValueRisk ex = exact_value_risk(m, belief, probs, b.W + 1);
    double best_safe = -std::numeric_limits<double>::infinity();
    for (long long c = 0; c < policy.num_blocks(); ++c) {
      const ValueRisk v = exact_value_risk(m, belief, decode_block(c, m.A, b.W + 1));
      if (((v.risks - cfg.train.cbar).array() <= 0.0).all()) best_safe = std::max(best_safe, v.value);
    }
    const bool is_flagged = std::find(flagged.begin(), flagged.end(), static_cast<int>(i)) != flagged.end();
    max_dv = std::max(max_dv, std::abs(est.value - ex.value));
    max_dc = std::max(max_dc, (est.risks - ex.risks).cwiseAbs().maxCoeff());
    if (!is_flagged && std::isfinite(best_safe)) {
      constraints_ok = constraints_ok && ((ex.risks - cfg.train.cbar).array() <= cfg.train.feasibility_tol).all();
      optimal = optimal && ex.value >= best_safe - 0.1;
    }
    json row;
    json hist = json::array();
    for (const auto& step : batch.histories[i]) hist.push_back(step);
    row["history"] = hist;
    row["model_value"] = est.value;
    row["model_risks"] = vec_json(est.risks);
    row["exact_value"] = ex.value;
    row["exact_risks"] = vec_json(ex.risks);
    row["best_safe_value"] = std::isfinite(best_safe) ? json(best_safe) : json(nullptr);
    row["flagged_infeasible"] = is_flagged;
    rows.push_back(row);
  }
  json r;
  r["histories"] = rows;
  r["max_value_gap"] = max_dv;
  r["max_risk_gap"] = max_dc;
  r["constraints_satisfied"] = constraints_ok;
  r["near_safe_optimal"] = optimal;
  write_json((fs::path(cfg.out_dir) / "evaluation.json").string(), r, cfg);
  stamp(cfg, "evaluate");
}

double loglog_slope(const std::vector<double>& K, const std::vector<double>& err) {
  if (K.size() != err.size() || K.size() < 2) throw InvalidArgument("slope fit needs at least two matching points");
  Eigen::MatrixXd X(static_cast<Eigen::Index>(K.size()), 2);
  Eigen::VectorXd y(static_cast<Eigen::Index>(K.size()));
  for (std::size_t i = 0; i < K.size(); ++i) {
    if (!(K[i] > 0.0) || !(err[i] > 0.0)) throw InvalidArgument("slope fit needs positive values");
    X(static_cast<Eigen::Index>(i), 0) = 1.0;
    X(static_cast<Eigen::Index>(i), 1) = std::log(K[i]);
    y[static_cast<Eigen::Index>(i)] = std::log(err[i]);
  }
  const Eigen::VectorXd beta = X.colPivHouseholderQr().solve(y);
  return beta[1];
}

double forward_oracle_error(const TabularPOMDP& m, const OperatorBundle& bundle, const EmbeddingOperator& forward,
                            const std::vector<WindowSample>& windows) {
  if (windows.empty()) throw InvalidArgument("no evaluation windows");
  if (bundle.maps.test_observations.spec().kind != KernelKind::OneHot ||
      bundle.maps.test_observations.shape().mode != BlockMode::Tensor)
    throw NoOracleError("oracle comparison needs one-hot tensor observation-block features");
  double acc = 0.0;
  for (const auto& w : windows) {
    const Eigen::VectorXd h = bundle.maps.history.features(w.history);
    const Eigen::VectorXd A = bundle.maps.test_actions.features(w.test_actions);
    const Eigen::VectorXd pred = forward.matrix * kron(h, A);
    const Eigen::VectorXd exact = test_distribution(m, belief_from_history(m, w.history), symbols(w.test_actions));
    acc += (pred - exact).squaredNorm();
  }
  return std::sqrt(acc / static_cast<double>(windows.size()));
}

std::vector<double> bellman_trace(Environment& env, const OperatorBundle& bundle, const PolicyParams& policy,
                                  const std::vector<Eigen::VectorXd>& histories, int refits, int episodes_per_refit,
                                  double lambda_link, int mc_samples, std::uint64_t seed) {
  std::vector<double> out;
  LinkWeights prev = fit_links_on_policy(env, bundle, policy, episodes_per_refit, lambda_link, seed);
  for (int r = 2; r <= refits + 1; ++r) {
    LinkWeights cur = fit_links_on_policy(env, bundle, policy, r * episodes_per_refit, lambda_link, seed);
    out.push_back(std::abs(bellman_loss(cur, prev, histories, policy, policy, bundle, mc_samples, derive_seed(seed, 77))));
    prev = std::move(cur);
  }
  return out;
}

PolicyParams concentrated_policy(const OperatorBundle& bundle, const EnvDescriptor& d,
                                 const std::vector<Eigen::VectorXd>& histories, const std::vector<long long>& codes,
                                 double scale) {
  if (histories.size() != codes.size() || histories.empty()) throw InvalidArgument("one block code per history");
  PolicyParams p = make_policy(bundle, d);
  Eigen::MatrixXd X(p.theta.cols(), static_cast<Eigen::Index>(histories.size()));
  Eigen::MatrixXd Y = Eigen::MatrixXd::Zero(p.theta.rows(), X.cols());
  for (std::size_t i = 0; i < histories.size(); ++i) {
    X.col(static_cast<Eigen::Index>(i)) = policy_features(bundle, histories[i]);
    Y(codes[i], static_cast<Eigen::Index>(i)) = scale;
  }
  // Minimum-norm solution of theta X = Y.
  p.theta = X.transpose().completeOrthogonalDecomposition().solve(Y.transpose()).transpose();
  return p;
}

ErrorCurve forward_error_curve(const ExperimentConfig& cfg, Environment& env) {
  const std::uint64_t seed = cfg.stream(streams::diagnose);
  const EnvDescriptor d = env.descriptor();
  const int per_episode = cfg.T - cfg.W - cfg.L;
  if (per_episode < 1) throw ConfigError("episodes are too short for the window sizes");
  const auto* tab = env.tabular();
  const auto* lin = env.linear();
  if (!tab && !(lin && cfg.test_observations.spec.kind == KernelKind::Linear))
    throw NoOracleError("diagnose needs a tabular environment or linear observation features on a linear-Gaussian one");
  const int kmax = *std::max_element(cfg.k_grid.begin(), cfg.k_grid.end());
  const int episodes = kmax / per_episode + 2;

  // Oracle evaluation windows, shared by all K and seeds.
  auto eval = make_windows(generate_trajectories(cfg, env, cfg.eval_windows / per_episode + 1, derive_seed(seed, 999)),
                           cfg.W, cfg.L);
  eval.resize(std::min<std::size_t>(eval.size(), static_cast<std::size_t>(cfg.eval_windows)));

  ErrorCurve c;
  c.K = cfg.k_grid;
  c.errors.assign(c.K.size(), {});
  for (int s = 0; s < cfg.diagnose_seeds; ++s) {
    const std::uint64_t ss = derive_seed(seed, static_cast<std::uint64_t>(s));
    const auto pool = split_dataset(make_windows(generate_trajectories(cfg, env, episodes, ss), cfg.W, cfg.L), 0.0, ss).train;
    for (std::size_t ki = 0; ki < c.K.size(); ++ki) {
      if (c.K[ki] < 1) throw ConfigError("K values must be positive");
      const std::vector<WindowSample> train(pool.begin(), pool.begin() + c.K[ki]);
      const SpaceMaps maps = build_maps(cfg, d, train);
      const EmbeddingOperator F = fit_forward(featurize_windows(train, maps), FitSpaces::of(maps), cfg.lambda);
      if (tab) {
        OperatorBundle shell;
        shell.maps = maps;
        c.errors[ki].push_back(forward_oracle_error(*tab, shell, F, eval));
      } else {
        double num = 0.0, den = 0.0;
        for (const auto& w : eval) {
          const Eigen::VectorXd pred =
              F.matrix * kron(maps.history.features(w.history), maps.test_actions.features(w.test_actions));
          const Eigen::VectorXd ex = lgs_conditional_mean(*lin, w.history, w.test_actions);
          num += (pred - ex).squaredNorm();
          den += ex.squaredNorm();
        }
        c.errors[ki].push_back(std::sqrt(num / den));
      }
    }
  }
  std::vector<double> Ks;
  for (std::size_t ki = 0; ki < c.K.size(); ++ki) {
    double m = 0.0;
    for (double e : c.errors[ki]) m += e;
    c.mean.push_back(m / static_cast<double>(c.errors[ki].size()));
    Ks.push_back(c.K[ki]);
  }
  c.slope = loglog_slope(Ks, c.mean);
  return c;
}

void cmd_diagnose(const ExperimentConfig& cfg) {
  ensure_out(cfg);
  Environment env = make_environment(cfg);
  const std::uint64_t seed = cfg.stream(streams::diagnose);
  const EnvDescriptor d = env.descriptor();
  const auto* tab = env.tabular();
  const ErrorCurve curve = forward_error_curve(cfg, env);
  json per_k = json::array();
  for (std::size_t i = 0; i < curve.K.size(); ++i)
    per_k.push_back({{"K", curve.K[i]}, {"errors", curve.errors[i]}, {"mean_error", curve.mean[i]}});
  json r;
  r["operator_errors"] = per_k;
  r["loglog_slope"] = curve.slope;
  r["seed"] = seed;

  if (tab && fs::exists(bundle_path(cfg)) && cfg.observation.spec.kind == KernelKind::OneHot) {
    const OperatorBundle b = load_fitted(cfg);
    const HistoryBatch batch = batch_for(cfg, b);
    const PolicyParams uniform = make_policy(b, d, cfg.train.sigma);
    const LinkWeights links = fit_links_on_policy(env, b, uniform, cfg.train.link_episodes, cfg.lambda_link, seed);
    double dv = 0.0, dc = 0.0;
    for (std::size_t i = 0; i < batch.histories.size(); ++i) {
      const auto est = eval_value(links, b, batch.features[i], uniform, cfg.mc_samples, derive_seed(seed, i));
      const Eigen::VectorXd probs = block_probabilities(uniform, policy_features(b, batch.features[i]));
      const ValueRisk ex = exact_value_risk(*tab, belief_from_history(*tab, batch.histories[i]), probs, b.W + 1);
      dv = std::max(dv, std::abs(est.value - ex.value));
      if (ex.risks.size() > 0) dc = std::max(dc, (est.risks - ex.risks).cwiseAbs().maxCoeff());
    }
    r["uniform_value_gap"] = dv;
    r["uniform_risk_gap"] = dc;
    r["bellman_trace"] = bellman_trace(env, b, uniform, batch.features, 10, std::max(1, cfg.train.link_episodes / 10),
                                       cfg.lambda_link, cfg.mc_samples, derive_seed(seed, 555));
  }
  if (fs::exists(checkpoint_path(cfg))) {
    const TrainState s = deserialize_state(read_file(checkpoint_path(cfg)));
    r["constraints_satisfied"] = s.finished ? json(s.feasible) : json(nullptr);
  } else {
    r["constraints_satisfied"] = nullptr;
  }
  write_json((fs::path(cfg.out_dir) / "diagnostics.json").string(), r, cfg);
  stamp(cfg, "diagnose");
}

}  // namespace kpsr
