#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "wudi/checkpoint.hpp"
#include "wudi/tensor.hpp"

namespace wudi {

/// Per-layer task vector of one expert: fine-tuned minus pretrained.
struct TaskVector {
    std::map<std::string, MatrixXd> layers;  // merge-eligible linear layers
    std::map<std::string, Tensor> passthrough;  // deltas of every other tensor
    std::size_t source_id = 0;
};

enum class ExclusionReason { RankNot2, PatternExcluded, DimensionBelowThreshold };

std::string_view exclusion_reason_name(ExclusionReason reason);

struct LayerClassification {
    std::vector<std::string> eligible;
    std::vector<std::pair<std::string, ExclusionReason>> excluded;

    bool is_eligible(const std::string& name) const;
};

enum class NonlinearPolicy { Pretrained, Mean, Sum };

NonlinearPolicy parse_nonlinear_policy(std::string_view name);
std::string_view nonlinear_policy_name(NonlinearPolicy policy);

enum class MergeMethod { WudiGd, WudiCfs, Average, TaskArithmetic };

MergeMethod parse_merge_method(std::string_view name);
std::string_view merge_method_name(MergeMethod method);

struct MergeConfig {
    MergeMethod method = MergeMethod::WudiGd;
    double epsilon = 1.0;
    double lambda = 0.3;
    double omega = 0.0;
    std::size_t steps = 300;
    double learning_rate = 1e-5;
    bool balanced = true;
    NonlinearPolicy nonlinear_policy = NonlinearPolicy::Pretrained;
    std::vector<std::string> include_patterns{"*"};
    std::vector<std::string> exclude_patterns{"*embed*", "*position*"};
    std::size_t threads = 1;

    // Subspace ablation: replace each guide matrix before solving (GD/CFS only).
    bool ablate = false;
    bool ablate_random_gaussian = false;  // otherwise row subset
    double ablate_fraction = 1.0;
    std::uint64_t ablate_seed = 0;

    /// Throws ConfigError when a field is out of range.
    void validate() const;
};

/// Shell-style wildcard match ('*' and '?').
bool glob_match(std::string_view pattern, std::string_view text);

LayerClassification classify_layers(const Checkpoint& pretrained, const MergeConfig& cfg);

TaskVector extract_task_vector(const Checkpoint& pretrained, const Checkpoint& expert,
                               const LayerClassification& classification,
                               std::size_t source_id = 0);

/// Dense task vector of a low-rank adapter: b · a.
MatrixXd restore_lora(const MatrixXd& a, const MatrixXd& b);

struct LoraNaming {
    std::string a_suffix = ".lora_A";
    std::string b_suffix = ".lora_B";
};

/// Task vector from an adapter checkpoint. For an eligible layer "x.weight"
/// the pair is looked up as "x.lora_A"/"x.lora_B"; layers without an adapter
/// get a zero task vector. Non-adapter tensors present in `lora` are treated
/// as full fine-tuned values.
TaskVector extract_lora_task_vector(const Checkpoint& pretrained, const Checkpoint& lora,
                                    const LayerClassification& classification,
                                    std::size_t source_id = 0, const LoraNaming& naming = {});

/// θ + ε·τ_m on eligible layers; other tensors follow cfg.nonlinear_policy.
Checkpoint assemble_merged(const Checkpoint& pretrained, const TaskVector& tau_m,
                           const MergeConfig& cfg, const std::vector<TaskVector>& expert_taus);

}  // namespace wudi
