#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "kpsr/kernel.hpp"

namespace kpsr {

// One logged step: the action that was taken and what it produced.
// Record t carries (a_{t-1}, o_t, r(s_t), c(s_t)).
struct StepRecord {
  Point action;
  Point observation;
  double reward = 0.0;
  std::vector<double> risks;

  bool operator==(const StepRecord&) const = default;
};

struct Trajectory {
  std::int64_t episode = 0;
  std::vector<StepRecord> steps;

  bool operator==(const Trajectory&) const = default;
};

// All blocks are re-derivable by index from the source trajectory; see make_windows.
struct WindowSample {
  std::size_t trajectory = 0;  // index into the trajectory list
  int t = 0;                   // anchor index
  Block history;               // records t-L .. t-1, each step = concat(action, observation)
  Point action;                // a_{t-1}
  Point observation;           // o_t
  Block test_actions;          // a_{t-1 .. t+W-2}
  Block test_observations;     // o_{t .. t+W-1}
  Block shifted_actions;       // a_{t .. t+W-1}
  Block shifted_observations;  // o_{t+1 .. t+W}
  Block shifted_history;       // records t+1-L .. t
  double extended_return = 0.0;       // rewards summed over t .. t+W
  std::vector<double> extended_risks;  // per-constraint sums over t .. t+W
};

struct DatasetSplit {
  std::vector<WindowSample> train;
  std::vector<WindowSample> heldout;
  std::uint64_t seed = 0;
};

Point history_step(const StepRecord& r);

// Text format: optional '#' comment lines, a header row, then
// `episode,t,action,observation,reward,risk_1,...`. Vectors are written `[v1;v2]`.
std::vector<Trajectory> load_trajectories(const std::string& path);
std::vector<Trajectory> parse_trajectories(const std::string& text);
std::string format_trajectories(const std::vector<Trajectory>& trajs, int num_risks,
                                const std::string& comment = "");
void write_trajectories(const std::string& path, const std::vector<Trajectory>& trajs, int num_risks,
                        const std::string& comment = "");

std::vector<WindowSample> make_windows(const std::vector<Trajectory>& trajs, int W, int L);

DatasetSplit split_dataset(std::vector<WindowSample> samples, double heldout_fraction, std::uint64_t seed);

struct SpaceMaps {
  FeatureMap history;            // φ^H over L-step suffixes
  FeatureMap test_actions;       // φ^𝒜 over W-step action blocks
  FeatureMap test_observations;  // φ^𝒪 over W-step observation blocks
  FeatureMap action;             // φ^a over single actions
  FeatureMap observation;        // φ^o over single observations
};

// Column-aligned feature matrices, one column per sample.
struct RegressionBlocks {
  Eigen::MatrixXd H, A, O, a, o, Hs, As, Os;
  Eigen::VectorXd returns;
  Eigen::MatrixXd risks;  // N_c x K
  std::size_t size() const { return static_cast<std::size_t>(H.cols()); }
};

RegressionBlocks featurize_windows(const std::vector<WindowSample>& samples, const SpaceMaps& maps);

}  // namespace kpsr
