#include "wudi/solver.hpp"

#include <atomic>
#include <exception>
#include <thread>

namespace wudi {

AblationVariant parse_ablation_variant(std::string_view name)
{
    if (name == "random_gaussian") return AblationVariant::RandomGaussian;
    if (name == "row_subset") return AblationVariant::RowSubset;
    throw ConfigError("unknown ablation variant '" + std::string(name) + "'");
}

std::string_view ablation_variant_name(AblationVariant variant)
{
    return variant == AblationVariant::RandomGaussian ? "random_gaussian" : "row_subset";
}

std::uint64_t fnv1a(std::string_view text)
{
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

MatrixXd solve_layer(const std::vector<MatrixXd>& taus, const MergeConfig& cfg,
                     LayerReport* report, std::string_view layer)
{
    const auto start = std::chrono::steady_clock::now();
    const LayerProblem<double> reference = make_problem(taus, cfg.balanced);
    const LayerProblem<double> problem =
        cfg.ablate ? make_ablation_problem(reference,
                                           cfg.ablate_random_gaussian
                                               ? AblationVariant::RandomGaussian
                                               : AblationVariant::RowSubset,
                                           cfg.ablate_fraction, cfg.ablate_seed ^ fnv1a(layer))
                   : reference;

    MatrixXd tau_m;
    switch (cfg.method) {
    case MergeMethod::WudiGd: {
        GdResult<double> r = solve_gd(problem, cfg.steps, cfg.learning_rate);
        tau_m = std::move(r.tau_m);
        if (report != nullptr) {
            report->loss_trace = std::move(r.trace.losses);
        }
        break;
    }
    case MergeMethod::WudiCfs:
        tau_m = solve_closed_form(problem, cfg.omega);
        break;
    case MergeMethod::Average:
        tau_m = solve_baseline(taus, Baseline::Average);
        break;
    case MergeMethod::TaskArithmetic:
        tau_m = solve_baseline(taus, Baseline::TaskArithmetic, cfg.lambda);
        break;
    }

    if (report != nullptr) {
        report->rows = static_cast<std::size_t>(problem.rows());
        report->cols = static_cast<std::size_t>(problem.cols());
        report->initial_loss = loss(reference, sum_of_taus(reference));
        report->final_loss = loss(reference, tau_m);
        report->tau_m_norm = tau_m.norm();
        report->final_gradient_norm = loss_gradient(reference, tau_m).norm();
        report->seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
    return tau_m;
}

MergeResult merge_task_vectors(const Checkpoint& pretrained,
                               const LayerClassification& classification,
                               const std::vector<TaskVector>& taus, const MergeConfig& cfg)
{
    cfg.validate();
    if (taus.empty()) {
        throw ConfigError("merge needs at least one expert");
    }
    const auto start = std::chrono::steady_clock::now();
    const std::vector<std::string>& names = classification.eligible;
    for (const auto& tv : taus) {
        if (tv.layers.size() != names.size()) {
            throw IntegrityError("task vector " + std::to_string(tv.source_id) +
                                 " has a different layer set than the classification");
        }
        for (const auto& name : names) {
            if (tv.layers.count(name) == 0) {
                throw IntegrityError("task vector " + std::to_string(tv.source_id) +
                                     " lacks layer '" + name + "'");
            }
        }
    }

    std::vector<MatrixXd> solved(names.size());
    std::vector<LayerReport> reports(names.size());
    std::vector<std::exception_ptr> failures(names.size());
    std::atomic<std::size_t> next{0};

    auto worker = [&]() {
        for (std::size_t i = next++; i < names.size(); i = next++) {
            try {
                std::vector<MatrixXd> layer_taus;
                layer_taus.reserve(taus.size());
                for (const auto& tv : taus) layer_taus.push_back(tv.layers.at(names[i]));
                reports[i].name = names[i];
                solved[i] = solve_layer(layer_taus, cfg, &reports[i], names[i]);
            } catch (...) {
                failures[i] = std::current_exception();
            }
        }
    };

    const std::size_t width = std::min(cfg.threads, std::max<std::size_t>(names.size(), 1));
    if (width <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(width);
        for (std::size_t t = 0; t < width; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }

    for (std::size_t i = 0; i < names.size(); ++i) {
        if (!failures[i]) continue;
        try {
            std::rethrow_exception(failures[i]);
        } catch (const SingularityError& e) {
            throw SingularityError("layer '" + names[i] + "': " + e.what(), e.pivot());
        } catch (const DivergenceError& e) {
            throw DivergenceError("layer '" + names[i] + "': " + e.what(), e.iteration());
        } catch (const std::exception& e) {
            throw Error("layer '" + names[i] + "': " + e.what());
        }
    }

    MergeResult result;
    result.tau_m.source_id = 0;
    for (std::size_t i = 0; i < names.size(); ++i) {
        result.tau_m.layers.emplace(names[i], std::move(solved[i]));
    }
    result.merged = assemble_merged(pretrained, result.tau_m, cfg, taus);

    MergeReport& rep = result.report;
    rep.method = std::string(merge_method_name(cfg.method));
    rep.experts = taus.size();
    rep.config = cfg;
    rep.layers = std::move(reports);
    for (const auto& [name, reason] : classification.excluded) {
        rep.excluded.emplace_back(name, std::string(exclusion_reason_name(reason)));
    }
    rep.total_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result;
}

MergeResult merge(const Checkpoint& pretrained, const std::vector<Checkpoint>& experts,
                  const MergeConfig& cfg)
{
    cfg.validate();
    const CompatibilityReport compat = validate_compatible(pretrained, experts);
    if (!compat.compatible()) {
        throw IntegrityError("experts are not compatible with the pretrained checkpoint:\n" +
                             compat.describe());
    }
    const LayerClassification classification = classify_layers(pretrained, cfg);
    std::vector<TaskVector> taus;
    taus.reserve(experts.size());
    for (std::size_t i = 0; i < experts.size(); ++i) {
        taus.push_back(extract_task_vector(pretrained, experts[i], classification, i));
    }
    return merge_task_vectors(pretrained, classification, taus, cfg);
}

}  // namespace wudi
