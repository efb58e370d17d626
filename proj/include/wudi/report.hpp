#pragma once

#include <json.hpp>

#include "wudi/checkpoint.hpp"
#include "wudi/diagnostics.hpp"
#include "wudi/solver.hpp"
#include "wudi/synth.hpp"

namespace wudi {

inline constexpr int kReportSchema = 1;

// Wall-clock values live under a top-level "timing" object so that reports
// can be compared byte-for-byte after dropping that one field.
nlohmann::json to_json(const MergeReport& report, bool include_timing = true);
nlohmann::json to_json(const ConsistencyReport& report);
nlohmann::json to_json(const InterferenceReport& report);
nlohmann::json to_json(const BoundCheckResult& result);
nlohmann::json to_json(const ReconstructionResult& result);
nlohmann::json to_json(const CompatibilityReport& report);
nlohmann::json to_json(const synth::Prop1Report& report);

}  // namespace wudi
