#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "wudi/tensor.hpp"

namespace wudi {

/// Drift of one layer's inputs between the pretrained and a fine-tuned model.
struct ConsistencyReport {
    std::string layer;
    double delta_direction = 0.0;  // mean of 1 - cos, in [0, 2]
    double delta_magnitude = 0.0;  // mean of |‖x_exp‖ - ‖x_pre‖| / ‖x_pre‖
    std::size_t samples = 0;
};

ConsistencyReport input_consistency(const std::vector<VectorXd>& x_pre,
                                    const std::vector<VectorXd>& x_exp);

/// x = τᵀα + ε, with α the least-squares coefficients over the rows of τ.
struct ReconstructionResult {
    VectorXd coefficients;
    VectorXd residual;
    double relative_residual = 0.0;
};

/// Relative ridge added to ττᵀ before factoring, scaled by trace(ττᵀ)/rows.
inline constexpr double kReconstructionJitter = 1e-12;

ReconstructionResult reconstruct_input(const MatrixXd& tau, const VectorXd& x);

/// Both sides of the interference upper bound with reconstruction constants
/// estimated from the given samples.
struct BoundCheckResult {
    double lhs = 0.0;     // mean ‖δx‖²
    double omega1 = 0.0;  // mean (Σα² + 1)
    double omega2 = 0.0;  // mean (Σα² + 1)‖ε‖²
    double rhs = 0.0;     // ω¹‖δτᵀ‖²_F + ω²‖δ‖²_F
    bool satisfied = false;
};

inline constexpr double kBoundSlack = 1e-9;

BoundCheckResult check_theorem1(const MatrixXd& tau, const MatrixXd& delta,
                                const std::vector<VectorXd>& samples);

/// Named linear-layer weights.
using LayerParams = std::map<std::string, MatrixXd>;

/// Maps parameters and one input to the outputs after every layer prefix
/// (element d is the output of the first d+1 layers).
using PrefixEvaluator = std::function<std::vector<VectorXd>(const LayerParams&, const VectorXd&)>;

/// Stack of bias-free linear layers with a rectifier between consecutive
/// layers. Prefix outputs are pre-activation.
PrefixEvaluator relu_mlp_evaluator(std::vector<std::string> layer_order);

/// errors[i][d]: mean over task i's samples of
/// ‖f_d(x; θ+τ_m) − f_d(x; θ+τ_i)‖ / ‖f_d(x; θ+τ_i)‖.
struct InterferenceReport {
    std::vector<std::vector<double>> errors;
    std::vector<std::size_t> samples;

    std::size_t depths() const { return errors.empty() ? 0 : errors.front().size(); }
    /// Mean over tasks at one depth.
    double mean_at(std::size_t depth) const;
};

/// Parameters missing from a delta map are taken as unchanged.
LayerParams add_delta(const LayerParams& theta, const LayerParams& delta, double scale = 1.0);

InterferenceReport relative_interference(const PrefixEvaluator& model_apply,
                                         const LayerParams& theta, const LayerParams& tau_m,
                                         const std::vector<LayerParams>& tau_i,
                                         const std::vector<std::vector<VectorXd>>& samples);

}  // namespace wudi
