#include "kpsr/data.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>

#include "kpsr/bytes.hpp"
#include "kpsr/errors.hpp"
#include "kpsr/rng.hpp"

namespace kpsr {

Point history_step(const StepRecord& r) {
  Point p = r.action;
  p.insert(p.end(), r.observation.begin(), r.observation.end());
  return p;
}

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_point(const Point& p) {
  if (p.size() == 1) return fmt_double(p[0]);
  std::string s = "[";
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (i) s += ';';
    s += fmt_double(p[i]);
  }
  return s + "]";
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = s.find(sep, start);
    out.push_back(s.substr(start, pos == std::string::npos ? std::string::npos : pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

double parse_double(const std::string& tok, std::size_t line) {
  double v = 0.0;
  const char* b = tok.data();
  const char* e = b + tok.size();
  auto res = std::from_chars(b, e, v);
  if (res.ec != std::errc() || res.ptr != e || !std::isfinite(v))
    throw FormatError("line " + std::to_string(line) + ": bad number '" + tok + "'");
  return v;
}

Point parse_point(const std::string& tok, std::size_t line) {
  if (tok.size() >= 2 && tok.front() == '[' && tok.back() == ']') {
    const std::string inner = tok.substr(1, tok.size() - 2);
    if (inner.empty()) throw FormatError("line " + std::to_string(line) + ": empty vector");
    Point p;
    for (const auto& part : split(inner, ';')) p.push_back(parse_double(part, line));
    return p;
  }
  return Point{parse_double(tok, line)};
}

}  // namespace

std::vector<Trajectory> parse_trajectories(const std::string& text) {
  std::vector<Trajectory> out;
  std::map<std::int64_t, std::size_t> index;
  std::vector<std::int64_t> last_t;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  long long risk_arity = -1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      if (line.rfind("episode,t,action,observation,reward", 0) != 0)
        throw FormatError("line " + std::to_string(lineno) + ": missing header row");
      header = true;
      risk_arity = static_cast<long long>(split(line, ',').size()) - 5;
      continue;
    }
    const auto f = split(line, ',');
    if (f.size() < 5) throw FormatError("line " + std::to_string(lineno) + ": expected at least 5 fields");
    const long long nr = static_cast<long long>(f.size()) - 5;
    if (nr != risk_arity) throw FormatError("line " + std::to_string(lineno) + ": inconsistent risk arity");
    const double ep_d = parse_double(f[0], lineno);
    const double t_d = parse_double(f[1], lineno);
    if (ep_d != std::floor(ep_d) || t_d != std::floor(t_d) || t_d < 0)
      throw FormatError("line " + std::to_string(lineno) + ": episode and t must be integers");
    const auto ep = static_cast<std::int64_t>(ep_d);
    const auto t = static_cast<std::int64_t>(t_d);
    StepRecord r;
    r.action = parse_point(f[2], lineno);
    r.observation = parse_point(f[3], lineno);
    r.reward = parse_double(f[4], lineno);
    for (std::size_t i = 5; i < f.size(); ++i) r.risks.push_back(parse_double(f[i], lineno));
    auto it = index.find(ep);
    if (it == index.end()) {
      it = index.emplace(ep, out.size()).first;
      out.push_back(Trajectory{ep, {}});
      last_t.push_back(-1);
    }
    if (t != last_t[it->second] + 1)
      throw FormatError("line " + std::to_string(lineno) + ": time index out of order");
    last_t[it->second] = t;
    out[it->second].steps.push_back(std::move(r));
  }
  return out;
}

std::vector<Trajectory> load_trajectories(const std::string& path) { return parse_trajectories(read_file(path)); }

std::string format_trajectories(const std::vector<Trajectory>& trajs, int num_risks, const std::string& comment) {
  std::string s;
  if (!comment.empty()) s += "# " + comment + "\n";
  s += "episode,t,action,observation,reward";
  for (int i = 1; i <= num_risks; ++i) s += ",risk_" + std::to_string(i);
  s += "\n";
  for (const auto& tr : trajs) {
    for (std::size_t t = 0; t < tr.steps.size(); ++t) {
      const auto& r = tr.steps[t];
      if (static_cast<int>(r.risks.size()) != num_risks) throw ShapeError("risk vector length differs from header");
      s += std::to_string(tr.episode) + "," + std::to_string(t) + "," + fmt_point(r.action) + "," +
           fmt_point(r.observation) + "," + fmt_double(r.reward);
      for (double c : r.risks) s += "," + fmt_double(c);
      s += "\n";
    }
  }
  return s;
}

void write_trajectories(const std::string& path, const std::vector<Trajectory>& trajs, int num_risks,
                        const std::string& comment) {
  write_file(path, format_trajectories(trajs, num_risks, comment));
}

std::vector<WindowSample> make_windows(const std::vector<Trajectory>& trajs, int W, int L) {
  if (W < 1 || L < 1) throw ConfigError("window length W and history length L must be positive");
  std::vector<WindowSample> out;
  for (std::size_t e = 0; e < trajs.size(); ++e) {
    const auto& st = trajs[e].steps;
    const int T = static_cast<int>(st.size());
    for (int t = L; t + W <= T - 1; ++t) {
      WindowSample w;
      w.trajectory = e;
      w.t = t;
      for (int j = t - L; j < t; ++j) w.history.push_back(history_step(st[j]));
      for (int j = t + 1 - L; j <= t; ++j) w.shifted_history.push_back(history_step(st[j]));
      w.action = st[t].action;
      w.observation = st[t].observation;
      for (int j = t; j < t + W; ++j) {
        w.test_actions.push_back(st[j].action);
        w.test_observations.push_back(st[j].observation);
        w.shifted_actions.push_back(st[j + 1].action);
        w.shifted_observations.push_back(st[j + 1].observation);
      }
      w.extended_risks.assign(st[t].risks.size(), 0.0);
      for (int j = t; j <= t + W; ++j) {
        w.extended_return += st[j].reward;
        if (st[j].risks.size() != w.extended_risks.size()) throw ShapeError("risk arity changes within an episode");
        for (std::size_t i = 0; i < st[j].risks.size(); ++i) w.extended_risks[i] += st[j].risks[i];
      }
      out.push_back(std::move(w));
    }
  }
  return out;
}

DatasetSplit split_dataset(std::vector<WindowSample> samples, double heldout_fraction, std::uint64_t seed) {
  if (!(heldout_fraction >= 0.0 && heldout_fraction < 1.0)) throw ConfigError("held-out fraction must lie in [0,1)");
  std::vector<std::size_t> perm(samples.size());
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(seed, 0x73706c6974ULL);
  for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  const auto n_held = static_cast<std::size_t>(std::floor(heldout_fraction * static_cast<double>(samples.size())));
  DatasetSplit s;
  s.seed = seed;
  for (std::size_t i = 0; i < perm.size(); ++i)
    (i < n_held ? s.heldout : s.train).push_back(std::move(samples[perm[i]]));
  return s;
}

RegressionBlocks featurize_windows(const std::vector<WindowSample>& samples, const SpaceMaps& maps) {
  const auto K = static_cast<Eigen::Index>(samples.size());
  RegressionBlocks b;
  b.H.resize(maps.history.output_dim(), K);
  b.Hs.resize(maps.history.output_dim(), K);
  b.A.resize(maps.test_actions.output_dim(), K);
  b.As.resize(maps.test_actions.output_dim(), K);
  b.O.resize(maps.test_observations.output_dim(), K);
  b.Os.resize(maps.test_observations.output_dim(), K);
  b.a.resize(maps.action.output_dim(), K);
  b.o.resize(maps.observation.output_dim(), K);
  b.returns.resize(K);
  const auto nc = samples.empty() ? 0 : static_cast<Eigen::Index>(samples[0].extended_risks.size());
  b.risks.resize(nc, K);
  for (Eigen::Index k = 0; k < K; ++k) {
    const auto& s = samples[static_cast<std::size_t>(k)];
    b.H.col(k) = maps.history.features(s.history);
    b.Hs.col(k) = maps.history.features(s.shifted_history);
    b.A.col(k) = maps.test_actions.features(s.test_actions);
    b.As.col(k) = maps.test_actions.features(s.shifted_actions);
    b.O.col(k) = maps.test_observations.features(s.test_observations);
    b.Os.col(k) = maps.test_observations.features(s.shifted_observations);
    b.a.col(k) = maps.action.features(Block{s.action});
    b.o.col(k) = maps.observation.features(Block{s.observation});
    b.returns[k] = s.extended_return;
    if (static_cast<Eigen::Index>(s.extended_risks.size()) != nc) throw ShapeError("inconsistent risk arity across samples");
    for (Eigen::Index i = 0; i < nc; ++i) b.risks(i, k) = s.extended_risks[static_cast<std::size_t>(i)];
  }
  return b;
}

}  // namespace kpsr
