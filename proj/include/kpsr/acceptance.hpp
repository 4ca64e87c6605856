#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace kpsr {

struct CriterionResult {
  int id = 0;
  std::string name;
  bool pass = false;
  std::string detail;  // measured values next to their thresholds
  double seconds = 0.0;
};

struct AcceptanceOptions {
  std::string config_dir = "configs";  // holds tab3.json, tab-iid.json, bandit.json, lgs1.json
  std::string work_dir = "out/acceptance";
  std::optional<std::uint64_t> seed;  // overrides the seeds of the shipped configs
  std::vector<int> only;               // empty: all criteria
};

// Runs the acceptance criteria in order and prints one line per criterion as it finishes.
std::vector<CriterionResult> run_acceptance(const AcceptanceOptions& opt, std::ostream& out);

std::string format_result(const CriterionResult& r);

}  // namespace kpsr
