#include "wudi/task_vector.hpp"

#include <algorithm>

namespace wudi {

std::string_view exclusion_reason_name(ExclusionReason reason)
{
    switch (reason) {
    case ExclusionReason::RankNot2: return "rank!=2";
    case ExclusionReason::PatternExcluded: return "pattern-excluded";
    case ExclusionReason::DimensionBelowThreshold: return "dimension-below-threshold";
    }
    return "?";
}

bool LayerClassification::is_eligible(const std::string& name) const
{
    return std::binary_search(eligible.begin(), eligible.end(), name);
}

NonlinearPolicy parse_nonlinear_policy(std::string_view name)
{
    if (name == "pretrained") return NonlinearPolicy::Pretrained;
    if (name == "mean") return NonlinearPolicy::Mean;
    if (name == "sum") return NonlinearPolicy::Sum;
    throw ConfigError("unknown non-linear policy '" + std::string(name) + "'");
}

std::string_view nonlinear_policy_name(NonlinearPolicy policy)
{
    switch (policy) {
    case NonlinearPolicy::Pretrained: return "pretrained";
    case NonlinearPolicy::Mean: return "mean";
    case NonlinearPolicy::Sum: return "sum";
    }
    return "?";
}

MergeMethod parse_merge_method(std::string_view name)
{
    if (name == "wudi-gd") return MergeMethod::WudiGd;
    if (name == "wudi-cfs") return MergeMethod::WudiCfs;
    if (name == "average") return MergeMethod::Average;
    if (name == "task-arith") return MergeMethod::TaskArithmetic;
    throw ConfigError("unknown merge method '" + std::string(name) + "'");
}

std::string_view merge_method_name(MergeMethod method)
{
    switch (method) {
    case MergeMethod::WudiGd: return "wudi-gd";
    case MergeMethod::WudiCfs: return "wudi-cfs";
    case MergeMethod::Average: return "average";
    case MergeMethod::TaskArithmetic: return "task-arith";
    }
    return "?";
}

void MergeConfig::validate() const
{
    if (steps < 1) throw ConfigError("steps must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be > 0");
    if (!(epsilon > 0.0 && epsilon <= 2.0)) throw ConfigError("epsilon must lie in (0, 2]");
    if (!(omega >= 0.0)) throw ConfigError("omega must be >= 0");
    if (method == MergeMethod::TaskArithmetic && !(lambda > 0.0)) {
        throw ConfigError("lambda must be > 0 for task arithmetic");
    }
    if (threads < 1) throw ConfigError("threads must be >= 1");
}

bool glob_match(std::string_view pattern, std::string_view text)
{
    std::size_t p = 0, t = 0;
    std::size_t star = std::string_view::npos, mark = 0;
    while (t < text.size()) {
        if (p < pattern.size() && (pattern[p] == '?' || pattern[p] == text[t])) {
            ++p;
            ++t;
        } else if (p < pattern.size() && pattern[p] == '*') {
            star = p++;
            mark = t;
        } else if (star != std::string_view::npos) {
            p = star + 1;
            t = ++mark;
        } else {
            return false;
        }
    }
    while (p < pattern.size() && pattern[p] == '*') ++p;
    return p == pattern.size();
}

LayerClassification classify_layers(const Checkpoint& pretrained, const MergeConfig& cfg)
{
    auto any_match = [](const std::vector<std::string>& patterns, const std::string& name) {
        return std::any_of(patterns.begin(), patterns.end(),
                           [&](const std::string& p) { return glob_match(p, name); });
    };

    LayerClassification out;
    for (const auto& [name, t] : pretrained.tensors) {
        if (t.rank() != 2) {
            out.excluded.emplace_back(name, ExclusionReason::RankNot2);
        } else if (!any_match(cfg.include_patterns, name) || any_match(cfg.exclude_patterns, name)) {
            out.excluded.emplace_back(name, ExclusionReason::PatternExcluded);
        } else if (std::min(t.shape[0], t.shape[1]) < 2) {
            out.excluded.emplace_back(name, ExclusionReason::DimensionBelowThreshold);
        } else {
            out.eligible.push_back(name);
        }
    }
    return out;
}

namespace {

Tensor tensor_delta(const std::string& name, const Tensor& expert, const Tensor& base)
{
    if (expert.shape != base.shape) {
        throw DimensionError("tensor '" + name + "': expert and pretrained shapes differ");
    }
    Tensor d = base;
    for (std::size_t i = 0; i < d.values.size(); ++i) {
        d.values[i] = expert.values[i] - base.values[i];
    }
    return d;
}

}  // namespace

TaskVector extract_task_vector(const Checkpoint& pretrained, const Checkpoint& expert,
                               const LayerClassification& classification, std::size_t source_id)
{
    TaskVector tv;
    tv.source_id = source_id;
    for (const auto& name : classification.eligible) {
        const MatrixXd base = pretrained.at(name).matrix();
        const MatrixXd tuned = expert.at(name).matrix();
        require_same_shape(tuned, base, name.c_str());
        tv.layers.emplace(name, tuned - base);
    }
    for (const auto& [name, reason] : classification.excluded) {
        tv.passthrough.emplace(name, tensor_delta(name, expert.at(name), pretrained.at(name)));
    }
    return tv;
}

MatrixXd restore_lora(const MatrixXd& a, const MatrixXd& b)
{
    if (b.cols() != a.rows()) {
        throw DimensionError("restore_lora: B " + shape_string(b) + " and A " + shape_string(a) +
                             " do not conform");
    }
    return matmul(b, a);
}

TaskVector extract_lora_task_vector(const Checkpoint& pretrained, const Checkpoint& lora,
                                    const LayerClassification& classification,
                                    std::size_t source_id, const LoraNaming& naming)
{
    auto layer_stem = [](const std::string& name) {
        constexpr std::string_view suffix = ".weight";
        if (name.size() > suffix.size() &&
            name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
            return name.substr(0, name.size() - suffix.size());
        }
        return name;
    };

    TaskVector tv;
    tv.source_id = source_id;
    for (const auto& name : classification.eligible) {
        const Tensor& base = pretrained.at(name);
        const std::string stem = layer_stem(name);
        const std::string a_name = stem + naming.a_suffix;
        const std::string b_name = stem + naming.b_suffix;
        const bool has_a = lora.contains(a_name);
        const bool has_b = lora.contains(b_name);
        if (has_a != has_b) {
            throw IntegrityError("layer '" + name + "': adapter has only one of " + a_name + "/" +
                                 b_name);
        }
        MatrixXd tau;
        if (has_a) {
            tau = restore_lora(lora.at(a_name).matrix(), lora.at(b_name).matrix());
            if (tau.rows() != base.shape[0] || tau.cols() != base.shape[1]) {
                throw DimensionError("layer '" + name + "': restored adapter " + shape_string(tau) +
                                     " does not match weight shape");
            }
        } else if (lora.contains(name)) {
            tau = lora.at(name).matrix() - base.matrix();
        } else {
            tau = MatrixXd::Zero(base.shape[0], base.shape[1]);
        }
        tv.layers.emplace(name, std::move(tau));
    }
    for (const auto& [name, reason] : classification.excluded) {
        const Tensor& base = pretrained.at(name);
        if (lora.contains(name)) {
            tv.passthrough.emplace(name, tensor_delta(name, lora.at(name), base));
        } else {
            Tensor zero = base;
            std::fill(zero.values.begin(), zero.values.end(), 0.0);
            tv.passthrough.emplace(name, std::move(zero));
        }
    }
    return tv;
}

Checkpoint assemble_merged(const Checkpoint& pretrained, const TaskVector& tau_m,
                           const MergeConfig& cfg, const std::vector<TaskVector>& expert_taus)
{
    for (const auto& [name, m] : tau_m.layers) {
        if (!pretrained.contains(name)) {
            throw IntegrityError("merged layer '" + name + "' not present in pretrained checkpoint");
        }
    }

    Checkpoint out;
    out.metadata = pretrained.metadata;
    for (const auto& [name, base] : pretrained.tensors) {
        Tensor t = base;
        auto layer = tau_m.layers.find(name);
        if (layer != tau_m.layers.end()) {
            const MatrixXd& delta = layer->second;
            if (base.rank() != 2 || delta.rows() != base.shape[0] || delta.cols() != base.shape[1]) {
                throw DimensionError("layer '" + name + "': merged task vector " +
                                     shape_string(delta) + " does not match weight shape");
            }
            for (std::size_t i = 0; i < t.values.size(); ++i) {
                t.values[i] = base.values[i] + cfg.epsilon * delta.data()[i];
            }
        } else if (cfg.nonlinear_policy != NonlinearPolicy::Pretrained && !expert_taus.empty()) {
            std::vector<double> acc(t.values.size(), 0.0);
            for (const auto& tv : expert_taus) {
                auto it = tv.passthrough.find(name);
                if (it == tv.passthrough.end()) continue;
                if (it->second.values.size() != acc.size()) {
                    throw DimensionError("tensor '" + name + "': passthrough delta has wrong size");
                }
                for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += it->second.values[i];
            }
            const double scale = cfg.nonlinear_policy == NonlinearPolicy::Mean
                                     ? cfg.epsilon / static_cast<double>(expert_taus.size())
                                     : cfg.epsilon;
            for (std::size_t i = 0; i < acc.size(); ++i) {
                t.values[i] = base.values[i] + scale * acc[i];
            }
        }
        out.tensors.emplace(name, std::move(t));
    }
    return out;
}

}  // namespace wudi
