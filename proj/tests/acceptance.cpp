#include <exception>
#include <iostream>

#include "kpsr/acceptance.hpp"

// Runs every acceptance criterion against the shipped configs and prints one
// pass/fail line per criterion. Exits nonzero if any criterion fails.
int main() {
  kpsr::AcceptanceOptions opt;
  opt.config_dir = KPSR_SOURCE_DIR "/configs";
  opt.work_dir = KPSR_WORK_DIR;
  try {
    const auto results = kpsr::run_acceptance(opt, std::cout);
    int passed = 0;
    for (const auto& r : results) passed += r.pass ? 1 : 0;
    std::cout << passed << "/" << results.size() << " criteria passed\n";
    return passed == static_cast<int>(results.size()) ? 0 : 1;
  } catch (const std::exception& e) {
    std::cout << "acceptance suite could not run: " << e.what() << "\n";
    return 1;
  }
}
