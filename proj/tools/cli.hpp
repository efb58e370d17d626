#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace wudi::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Entry point shared by the executable and the tests. Reports go to `out`,
/// progress and errors to `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

struct VerifyOptions {
    std::size_t seeds = 20;
    std::optional<double> lemma1_threshold;  // calibrated on the fly when empty
    std::uint64_t calibration_first_seed = 1000;
    std::size_t calibration_seeds = 20;
};

struct CheckResult {
    std::string name;
    bool passed = false;
    std::string detail;
    double seconds = 0.0;
};

/// Property suite behind `wudi verify`.
std::vector<CheckResult> run_verify_suite(const VerifyOptions& options, std::ostream& progress);

}  // namespace wudi::cli
