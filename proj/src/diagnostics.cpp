#include "wudi/diagnostics.hpp"

#include <cmath>

namespace wudi {

ConsistencyReport input_consistency(const std::vector<VectorXd>& x_pre,
                                    const std::vector<VectorXd>& x_exp)
{
    if (x_pre.size() != x_exp.size()) {
        throw DimensionError("input_consistency: " + std::to_string(x_pre.size()) +
                             " pretrained samples vs " + std::to_string(x_exp.size()) +
                             " expert samples");
    }
    if (x_pre.empty()) {
        throw DegenerateError("input_consistency: no samples");
    }
    ConsistencyReport r;
    r.samples = x_pre.size();
    for (std::size_t n = 0; n < x_pre.size(); ++n) {
        if (x_pre[n].size() != x_exp[n].size()) {
            throw DimensionError("input_consistency: sample " + std::to_string(n) +
                                 " has mismatched dimensions");
        }
        const double norm_pre = x_pre[n].norm();
        const double norm_exp = x_exp[n].norm();
        if (!(norm_pre > 0.0)) {
            throw DegenerateError("input_consistency: pretrained sample " + std::to_string(n) +
                                      " has zero norm",
                                  n);
        }
        if (!(norm_exp > 0.0)) {
            throw DegenerateError("input_consistency: expert sample " + std::to_string(n) +
                                      " has zero norm",
                                  n);
        }
        r.delta_direction += 1.0 - cosine(x_exp[n], x_pre[n]);
        r.delta_magnitude += std::abs(norm_exp - norm_pre) / norm_pre;
    }
    r.delta_direction /= static_cast<double>(r.samples);
    r.delta_magnitude /= static_cast<double>(r.samples);
    return r;
}

ReconstructionResult reconstruct_input(const MatrixXd& tau, const VectorXd& x)
{
    if (x.size() != tau.cols()) {
        throw DimensionError("reconstruct_input: sample length " + std::to_string(x.size()) +
                             " vs task vector " + shape_string(tau));
    }
    const double x_norm = x.norm();
    if (!(x_norm > 0.0)) {
        throw DegenerateError("reconstruct_input: zero sample");
    }

    ReconstructionResult r;
    MatrixXd gram = tau * tau.transpose();
    const double trace = gram.trace();
    if (!(trace > 0.0)) {
        r.coefficients = VectorXd::Zero(tau.rows());
    } else {
        gram.diagonal().array() += kReconstructionJitter * trace / static_cast<double>(tau.rows());
        const MatrixXd rhs = (tau * x).transpose();
        r.coefficients = solve_spd(gram, rhs).transpose();
    }
    r.residual = x - tau.transpose() * r.coefficients;
    r.relative_residual = r.residual.norm() / x_norm;
    return r;
}

BoundCheckResult check_theorem1(const MatrixXd& tau, const MatrixXd& delta,
                                const std::vector<VectorXd>& samples)
{
    require_same_shape(delta, tau, "check_theorem1");
    if (samples.empty()) {
        throw DegenerateError("check_theorem1: no samples");
    }
    BoundCheckResult r;
    for (std::size_t n = 0; n < samples.size(); ++n) {
        const VectorXd& x = samples[n];
        if (x.size() != tau.cols()) {
            throw DimensionError("check_theorem1: sample " + std::to_string(n) +
                                 " has wrong length");
        }
        ReconstructionResult rec;
        try {
            rec = reconstruct_input(tau, x);
        } catch (const DegenerateError&) {
            throw DegenerateError("check_theorem1: sample " + std::to_string(n) + " is zero", n);
        }
        const double s = rec.coefficients.squaredNorm() + 1.0;
        r.lhs += (delta * x).squaredNorm();
        r.omega1 += s;
        r.omega2 += s * rec.residual.squaredNorm();
    }
    const double count = static_cast<double>(samples.size());
    r.lhs /= count;
    r.omega1 /= count;
    r.omega2 /= count;
    r.rhs = r.omega1 * frobenius_norm_sq(MatrixXd(delta * tau.transpose())) +
            r.omega2 * frobenius_norm_sq(delta);
    r.satisfied = r.lhs <= r.rhs * (1.0 + kBoundSlack);
    return r;
}

PrefixEvaluator relu_mlp_evaluator(std::vector<std::string> layer_order)
{
    return [order = std::move(layer_order)](const LayerParams& params, const VectorXd& x) {
        std::vector<VectorXd> outputs;
        outputs.reserve(order.size());
        VectorXd h = x;
        for (std::size_t d = 0; d < order.size(); ++d) {
            auto it = params.find(order[d]);
            if (it == params.end()) {
                throw IntegrityError("evaluator: missing layer '" + order[d] + "'");
            }
            VectorXd z = matmul(it->second, h);
            outputs.push_back(z);
            h = z.cwiseMax(0.0);
        }
        return outputs;
    };
}

double InterferenceReport::mean_at(std::size_t depth) const
{
    if (errors.empty()) return 0.0;
    double s = 0.0;
    for (const auto& task : errors) s += task.at(depth);
    return s / static_cast<double>(errors.size());
}

LayerParams add_delta(const LayerParams& theta, const LayerParams& delta, double scale)
{
    LayerParams out = theta;
    for (const auto& [name, d] : delta) {
        auto it = out.find(name);
        if (it == out.end()) {
            throw IntegrityError("delta for unknown layer '" + name + "'");
        }
        require_same_shape(d, it->second, name.c_str());
        it->second += scale * d;
    }
    return out;
}

InterferenceReport relative_interference(const PrefixEvaluator& model_apply,
                                         const LayerParams& theta, const LayerParams& tau_m,
                                         const std::vector<LayerParams>& tau_i,
                                         const std::vector<std::vector<VectorXd>>& samples)
{
    if (tau_i.size() != samples.size()) {
        throw DimensionError("relative_interference: " + std::to_string(tau_i.size()) +
                             " task vectors vs " + std::to_string(samples.size()) + " sample sets");
    }
    const LayerParams merged = add_delta(theta, tau_m);
    InterferenceReport report;
    for (std::size_t i = 0; i < tau_i.size(); ++i) {
        if (samples[i].empty()) {
            throw DegenerateError("relative_interference: task " + std::to_string(i) +
                                  " has no samples");
        }
        const LayerParams expert = add_delta(theta, tau_i[i]);
        std::vector<double> acc;
        for (std::size_t n = 0; n < samples[i].size(); ++n) {
            const auto out_m = model_apply(merged, samples[i][n]);
            const auto out_e = model_apply(expert, samples[i][n]);
            if (acc.empty()) acc.assign(out_e.size(), 0.0);
            for (std::size_t d = 0; d < out_e.size(); ++d) {
                const double ref = out_e[d].norm();
                if (!(ref > 0.0)) {
                    throw DegenerateError("relative_interference: zero reference output for task " +
                                              std::to_string(i) + " sample " + std::to_string(n) +
                                              " at depth " + std::to_string(d),
                                          n);
                }
                acc[d] += (out_m[d] - out_e[d]).norm() / ref;
            }
        }
        for (double& v : acc) v /= static_cast<double>(samples[i].size());
        report.errors.push_back(std::move(acc));
        report.samples.push_back(samples[i].size());
    }
    return report;
}

}  // namespace wudi
