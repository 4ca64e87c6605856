#include <doctest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "helpers.hpp"
#include "kpsr/bytes.hpp"
#include "kpsr/errors.hpp"
#include "kpsr/experiment.hpp"

using namespace kpsr;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

const fs::path kConfigs = fs::path(KPSR_SOURCE_DIR) / "configs";

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("kpsr_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

json bandit_config() {
  return json{{"env", "envs/bandit.json"},
              {"W", 1},
              {"L", 1},
              {"data", {{"episodes", 60}, {"T", 10}, {"heldout", 0.1}}},
              {"mc_samples", 50},
              {"constraints", {1.0}},
              {"train", {{"iterations", 3}, {"link_episodes", 300}, {"checkpoint_every", 1}}},
              {"diagnose", {{"k_grid", {100, 200}}, {"seeds", 2}, {"eval_windows", 200}}},
              {"seed", 5}};
}

ExperimentConfig parse(const json& j, const fs::path& out) {
  return parse_config(j.dump(), kConfigs.string(), std::nullopt, out.string());
}

// Writes the config next to the shipped ones so the relative env path resolves.
fs::path write_config(const json& j, const std::string& name) {
  const fs::path p = scratch(name) / "config.json";
  json copy = j;
  copy["env"] = (kConfigs / j.at("env").get<std::string>()).string();
  std::ofstream(p) << copy.dump(2);
  return p;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(KPSR_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("config parsing rejects bad input") {
  const fs::path out = scratch("parse");
  CHECK_NOTHROW(parse(bandit_config(), out));

  json unknown = bandit_config();
  unknown["episodez"] = 3;
  CHECK_THROWS_AS(parse(unknown, out), ConfigError);

  json nested = bandit_config();
  nested["train"]["speed"] = 1;
  CHECK_THROWS_AS(parse(nested, out), ConfigError);

  json missing_env = bandit_config();
  missing_env["env"] = "envs/does-not-exist.json";
  CHECK_THROWS_AS(parse(missing_env, out), ConfigError);

  json no_seed = bandit_config();
  no_seed.erase("seed");
  CHECK_THROWS_AS(parse(no_seed, out), ConfigError);
  CHECK(parse_config(no_seed.dump(), kConfigs.string(), 9, out.string()).seed == 9);

  json bad_mc = bandit_config();
  bad_mc["mc_samples"] = 1;
  CHECK_THROWS_AS(parse(bad_mc, out), ConfigError);

  CHECK_THROWS_AS(parse_config("{not json", kConfigs.string()), ConfigError);
}

TEST_CASE("config hash follows the seed but not the output directory") {
  const auto a = parse(bandit_config(), scratch("hash_a"));
  const auto b = parse(bandit_config(), scratch("hash_b"));
  CHECK(a.hash == b.hash);
  CHECK(a.provenance() == b.provenance());
  CHECK(a.provenance().find(kToolVersion) != std::string::npos);
  const auto c = parse_config(bandit_config().dump(), kConfigs.string(), 6, scratch("hash_c").string());
  CHECK(c.hash != a.hash);
  CHECK(a.stream(streams::data) != a.stream(streams::split));
}

TEST_CASE("shipped configs parse") {
  for (const char* name : {"tab3.json", "tab-iid.json", "tab-det.json", "bandit.json", "lgs1.json"}) {
    CAPTURE(name);
    CHECK_NOTHROW(load_config((kConfigs / name).string()));
  }
}

TEST_CASE("generate writes episodes times T rows, deterministically") {
  const auto cfg = parse(bandit_config(), scratch("gen_a"));
  cmd_generate(cfg);
  const auto trajs = load_trajectories(trajectories_path(cfg));
  REQUIRE(trajs.size() == 60);
  std::size_t rows = 0;
  for (const auto& t : trajs) rows += t.steps.size();
  CHECK(rows == 600);

  const auto again = parse(bandit_config(), scratch("gen_b"));
  cmd_generate(again);
  CHECK(read_file(trajectories_path(cfg)) == read_file(trajectories_path(again)));

  json none = bandit_config();
  none["data"]["episodes"] = 0;
  const auto empty = parse(none, scratch("gen_empty"));
  cmd_generate(empty);
  const std::string text = read_file(trajectories_path(empty));
  CHECK(text.find("episode,t,action,observation,reward,risk_1\n") != std::string::npos);
  CHECK(text.substr(text.find("episode,t")).find('\n') == text.substr(text.find("episode,t")).size() - 1);
  CHECK(load_trajectories(trajectories_path(empty)).empty());
}

TEST_CASE("fit report lists finite, non-negative losses") {
  const auto cfg = parse(bandit_config(), scratch("fit"));
  cmd_generate(cfg);
  cmd_fit(cfg);
  const json r = json::parse(read_file((fs::path(cfg.out_dir) / "fit_report.json").string()));
  REQUIRE(r.at("losses").size() == 5);
  for (const auto& [name, v] : r.at("losses").items()) {
    CAPTURE(name);
    REQUIRE(v.is_number());
    CHECK(std::isfinite(v.get<double>()));
    CHECK(v.get<double>() >= 0.0);
  }
  CHECK(r.at("config_hash").is_string());
  const auto bundle = load_bundle(bundle_path(cfg));
  CHECK(bundle.provenance == cfg.provenance());
}

TEST_CASE("training log schema") {
  const auto cfg = parse(bandit_config(), scratch("train"));
  cmd_generate(cfg);
  cmd_fit(cfg);
  const auto s = cmd_train(cfg);
  CHECK(s.finished);
  std::istringstream log(read_file(log_path(cfg)));
  std::string line;
  std::getline(log, line);
  CHECK(line == "# " + cfg.provenance());
  std::getline(log, line);
  CHECK(line == "k,J,V,C_1,eta_1,alpha,accepted");
  int rows = 0;
  std::string last;
  while (std::getline(log, line)) {
    if (line.rfind("status,", 0) == 0) {
      last = line;
      continue;
    }
    ++rows;
    CHECK(std::count(line.begin(), line.end(), ',') == 6);
  }
  CHECK(rows == 3);
  CHECK((last == "status,feasible" || last == "status,infeasible"));
  CHECK(fs::exists(checkpoint_path(cfg)));
}

TEST_CASE("log-log slope of an exact power law") {
  std::vector<double> K{100, 400, 1600, 6400}, err;
  for (double k : K) err.push_back(3.0 / std::sqrt(k));
  CHECK(loglog_slope(K, err) == doctest::Approx(-0.5).epsilon(1e-6));
  CHECK_THROWS(loglog_slope({1.0}, {1.0}));
}

TEST_CASE("oracle commands refuse environments without an oracle") {
  json j = json::parse(read_file((kConfigs / "lgs1.json").string()));
  j["data"]["episodes"] = 20;
  j["features"]["test_observations"] = {{"kind", "rbf"}, {"bandwidth", 1.0}, {"rff_dim", 16}};
  j.erase("out");
  const auto cfg = parse(j, scratch("lgs"));
  cmd_generate(cfg);
  CHECK_THROWS_AS(cmd_evaluate(cfg), NoOracleError);
  Environment env = make_environment(cfg);
  CHECK_THROWS_AS(forward_error_curve(cfg, env), NoOracleError);
}

TEST_CASE("command-line exit codes") {
  const fs::path cfg = write_config(bandit_config(), "exit");
  const std::string out = (cfg.parent_path() / "out").string();
  CHECK(run_cli("--version") == 0);
  CHECK(run_cli("generate --config " + cfg.string() + " --out " + out) == 0);
  CHECK(fs::exists(fs::path(out) / "trajectories.csv"));
  CHECK(run_cli("generate") == 2);
  CHECK(run_cli("no-such-command") == 2);
  CHECK(run_cli("generate --config /does/not/exist.json") == 2);

  json bad = bandit_config();
  bad["unknown"] = true;
  CHECK(run_cli("generate --config " + write_config(bad, "exit_bad").string()) == 2);
}
