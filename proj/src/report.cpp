#include "wudi/report.hpp"

namespace wudi {

using nlohmann::json;

json to_json(const MergeReport& report, bool include_timing)
{
    const MergeConfig& c = report.config;
    json j;
    j["schema"] = kReportSchema;
    j["method"] = report.method;
    j["experts"] = report.experts;
    j["config"] = {{"epsilon", c.epsilon},
                   {"lambda", c.lambda},
                   {"omega", c.omega},
                   {"steps", c.steps},
                   {"learning_rate", c.learning_rate},
                   {"balanced", c.balanced},
                   {"nonlinear_policy", nonlinear_policy_name(c.nonlinear_policy)},
                   {"include", c.include_patterns},
                   {"exclude", c.exclude_patterns}};

    json layers = json::array();
    json timing_layers = json::object();
    for (const auto& l : report.layers) {
        json e = {{"name", l.name},
                  {"shape", {l.rows, l.cols}},
                  {"initial_loss", l.initial_loss},
                  {"final_loss", l.final_loss},
                  {"tau_m_norm", l.tau_m_norm},
                  {"final_gradient_norm", l.final_gradient_norm}};
        if (!l.loss_trace.empty()) e["loss_trace"] = l.loss_trace;
        layers.push_back(std::move(e));
        timing_layers[l.name] = l.seconds;
    }
    j["layers"] = std::move(layers);

    json excluded = json::array();
    for (const auto& [name, reason] : report.excluded) {
        excluded.push_back({{"name", name}, {"reason", reason}});
    }
    j["excluded"] = std::move(excluded);

    if (include_timing) {
        j["timing"] = {{"total_seconds", report.total_seconds}, {"layers", timing_layers}};
    }
    return j;
}

json to_json(const ConsistencyReport& report)
{
    return {{"layer", report.layer},
            {"delta_direction", report.delta_direction},
            {"delta_magnitude", report.delta_magnitude},
            {"samples", report.samples}};
}

json to_json(const InterferenceReport& report)
{
    json per_depth = json::array();
    for (std::size_t d = 0; d < report.depths(); ++d) per_depth.push_back(report.mean_at(d));
    return {{"relative_error", report.errors},
            {"mean_relative_error", per_depth},
            {"samples", report.samples}};
}

json to_json(const BoundCheckResult& result)
{
    return {{"lhs", result.lhs},
            {"omega1", result.omega1},
            {"omega2", result.omega2},
            {"rhs", result.rhs},
            {"satisfied", result.satisfied}};
}

json to_json(const ReconstructionResult& result)
{
    return {{"coefficients",
             std::vector<double>(result.coefficients.data(),
                                 result.coefficients.data() + result.coefficients.size())},
            {"residual_norm", result.residual.norm()},
            {"relative_residual", result.relative_residual}};
}

json to_json(const CompatibilityReport& report)
{
    json experts = json::array();
    for (const auto& e : report.experts) {
        experts.push_back({{"missing", e.missing},
                           {"extra", e.extra},
                           {"shape_mismatch", e.shape_mismatch},
                           {"compatible", e.compatible()}});
    }
    return {{"compatible", report.compatible()}, {"experts", experts}};
}

json to_json(const synth::Prop1Report& report)
{
    return {{"median_residual_true", report.median_true},
            {"median_residual_random", report.median_random},
            {"median_residual_initial", report.median_initial},
            {"direction_holds", report.direction_holds()},
            {"samples", report.residual_true.size()}};
}

}  // namespace wudi
