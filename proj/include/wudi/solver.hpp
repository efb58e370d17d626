#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "wudi/checkpoint.hpp"
#include "wudi/task_vector.hpp"
#include "wudi/tensor.hpp"

namespace wudi {

/// One linear layer's merging problem.
///
/// The objective is  Σ_i w_i ‖(τ_m − τ_i) G_iᵀ‖²_F  where G_i is the guide
/// matrix of task i. The guide is the task vector itself (G_i = τ_i) except in
/// the subspace ablations, which swap in random or row-subset matrices.
template <typename Scalar>
struct LayerProblem {
    std::vector<Matrix<Scalar>> taus;
    std::vector<Matrix<Scalar>> guides;
    std::vector<Scalar> weights;
    bool balanced = true;

    Eigen::Index rows() const { return taus.front().rows(); }
    Eigen::Index cols() const { return taus.front().cols(); }
    std::size_t tasks() const { return taus.size(); }
};

/// Builds a problem with G_i = τ_i. Balanced weights are 1/‖τ_i‖²_F; a task
/// whose vector is exactly zero contributes nothing to the objective and gets
/// weight 0.
template <typename Scalar>
LayerProblem<Scalar> make_problem(std::vector<Matrix<Scalar>> taus, bool balanced = true)
{
    if (taus.empty()) {
        throw DimensionError("layer problem needs at least one task vector");
    }
    for (const auto& t : taus) {
        require_same_shape(t, taus.front(), "layer problem");
    }
    LayerProblem<Scalar> p;
    p.balanced = balanced;
    p.weights.reserve(taus.size());
    for (const auto& t : taus) {
        const Scalar n2 = frobenius_norm_sq(t);
        p.weights.push_back(!balanced ? Scalar(1) : (n2 > Scalar(0) ? Scalar(1) / n2 : Scalar(0)));
    }
    p.guides = taus;
    p.taus = std::move(taus);
    return p;
}

namespace detail {

template <typename Scalar>
void require_conforming(const LayerProblem<Scalar>& problem, const Matrix<Scalar>& tau_m)
{
    if (problem.taus.empty()) {
        throw DimensionError("layer problem has no tasks");
    }
    if (tau_m.rows() != problem.rows() || tau_m.cols() != problem.cols()) {
        throw DimensionError("merged task vector " + shape_string(tau_m) +
                             " does not match task vectors " +
                             shape_string(problem.rows(), problem.cols()));
    }
}

/// Loss and (optionally) gradient in a single pass over tasks, sharing the
/// residual products (τ_m − τ_i) G_iᵀ.
template <typename Scalar>
Scalar loss_and_gradient(const LayerProblem<Scalar>& problem, const Matrix<Scalar>& tau_m,
                         Scalar omega, Matrix<Scalar>* gradient)
{
    require_conforming(problem, tau_m);
    Scalar total = 0;
    if (gradient != nullptr) {
        gradient->setZero(tau_m.rows(), tau_m.cols());
    }
    for (std::size_t i = 0; i < problem.tasks(); ++i) {
        const Scalar w = problem.weights[i];
        if (w == Scalar(0)) continue;
        const Matrix<Scalar> diff = tau_m - problem.taus[i];
        const Matrix<Scalar> residual = diff * problem.guides[i].transpose();
        total += w * (residual.squaredNorm() + omega * diff.squaredNorm());
        if (gradient != nullptr) {
            *gradient += (Scalar(2) * w) * (residual * problem.guides[i]);
            if (omega != Scalar(0)) {
                *gradient += (Scalar(2) * w * omega) * diff;
            }
        }
    }
    return total;
}

}  // namespace detail

/// Σ_i w_i ‖(τ_m − τ_i) G_iᵀ‖²_F
template <typename Scalar>
Scalar loss(const LayerProblem<Scalar>& problem, const Matrix<Scalar>& tau_m)
{
    return detail::loss_and_gradient<Scalar>(problem, tau_m, Scalar(0), nullptr);
}

template <typename Scalar>
Matrix<Scalar> loss_gradient(const LayerProblem<Scalar>& problem, const Matrix<Scalar>& tau_m)
{
    Matrix<Scalar> g;
    detail::loss_and_gradient<Scalar>(problem, tau_m, Scalar(0), &g);
    return g;
}

/// Objective with the ridge term: Σ_i w_i (‖(τ_m − τ_i) G_iᵀ‖² + ω‖τ_m − τ_i‖²).
template <typename Scalar>
Scalar regularized_loss(const LayerProblem<Scalar>& problem, const Matrix<Scalar>& tau_m,
                        Scalar omega)
{
    return detail::loss_and_gradient<Scalar>(problem, tau_m, omega, nullptr);
}

template <typename Scalar>
Matrix<Scalar> regularized_gradient(const LayerProblem<Scalar>& problem,
                                    const Matrix<Scalar>& tau_m, Scalar omega)
{
    Matrix<Scalar> g;
    detail::loss_and_gradient<Scalar>(problem, tau_m, omega, &g);
    return g;
}

/// Adam with bias correction and no weight decay.
template <typename Scalar>
struct AdamState {
    std::size_t step = 0;
    Matrix<Scalar> first_moment;
    Matrix<Scalar> second_moment;
    Scalar beta1 = Scalar(0.9);
    Scalar beta2 = Scalar(0.999);
    Scalar epsilon = Scalar(1e-8);

    AdamState(Eigen::Index rows, Eigen::Index cols)
        : first_moment(Matrix<Scalar>::Zero(rows, cols)),
          second_moment(Matrix<Scalar>::Zero(rows, cols))
    {
    }

    void update(Matrix<Scalar>& param, const Matrix<Scalar>& grad, Scalar lr)
    {
        ++step;
        first_moment = beta1 * first_moment + (Scalar(1) - beta1) * grad;
        second_moment =
            beta2 * second_moment + (Scalar(1) - beta2) * grad.cwiseProduct(grad);
        const Scalar c1 = Scalar(1) - std::pow(beta1, static_cast<Scalar>(step));
        const Scalar c2 = Scalar(1) - std::pow(beta2, static_cast<Scalar>(step));
        param.array() -= lr * (first_moment.array() / c1) /
                         ((second_moment.array() / c2).sqrt() + epsilon);
    }
};

struct SolveTrace {
    std::vector<double> losses;  // loss at the iterate before each update
    double final_loss = 0.0;
    double final_gradient_norm = 0.0;
    double seconds = 0.0;

    double initial_loss() const { return losses.empty() ? final_loss : losses.front(); }
};

template <typename Scalar>
struct GdResult {
    Matrix<Scalar> tau_m;
    SolveTrace trace;
};

template <typename Scalar>
Matrix<Scalar> sum_of_taus(const LayerProblem<Scalar>& problem)
{
    Matrix<Scalar> s = Matrix<Scalar>::Zero(problem.rows(), problem.cols());
    for (const auto& t : problem.taus) s += t;
    return s;
}

/// Adam on the layer loss, starting from Σ_i τ_i. Throws DivergenceError on a
/// non-finite loss.
template <typename Scalar>
GdResult<Scalar> solve_gd(const LayerProblem<Scalar>& problem, std::size_t steps, Scalar lr)
{
    if (steps < 1) throw ConfigError("solve_gd: steps must be >= 1");
    if (!(lr > Scalar(0))) throw ConfigError("solve_gd: learning rate must be > 0");

    const auto start = std::chrono::steady_clock::now();
    GdResult<Scalar> out;
    out.tau_m = sum_of_taus(problem);
    out.trace.losses.reserve(steps);

    AdamState<Scalar> adam(problem.rows(), problem.cols());
    Matrix<Scalar> grad;
    for (std::size_t n = 0; n < steps; ++n) {
        const Scalar l = detail::loss_and_gradient<Scalar>(problem, out.tau_m, Scalar(0), &grad);
        if (!std::isfinite(l) || !grad.allFinite()) {
            throw DivergenceError("solve_gd: non-finite loss at iteration " + std::to_string(n), n);
        }
        out.trace.losses.push_back(static_cast<double>(l));
        adam.update(out.tau_m, grad, lr);
    }
    const Scalar l = detail::loss_and_gradient<Scalar>(problem, out.tau_m, Scalar(0), &grad);
    if (!std::isfinite(l)) {
        throw DivergenceError("solve_gd: non-finite loss at iteration " + std::to_string(steps),
                              steps);
    }
    out.trace.final_loss = static_cast<double>(l);
    out.trace.final_gradient_norm = static_cast<double>(grad.norm());
    out.trace.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return out;
}

/// Normal-equation matrices of the ridge objective:
///   A = Σ_i w_i (G_iᵀ G_i + ω I),  B = Σ_i w_i (τ_i G_iᵀ G_i + ω τ_i).
template <typename Scalar>
struct NormalEquations {
    Matrix<Scalar> a;
    Matrix<Scalar> b;
};

template <typename Scalar>
NormalEquations<Scalar> normal_equations(const LayerProblem<Scalar>& problem, Scalar omega)
{
    const Eigen::Index d = problem.cols();
    NormalEquations<Scalar> ne{Matrix<Scalar>::Zero(d, d),
                               Matrix<Scalar>::Zero(problem.rows(), d)};
    for (std::size_t i = 0; i < problem.tasks(); ++i) {
        const Scalar w = problem.weights[i];
        if (w == Scalar(0)) continue;
        Matrix<Scalar> gram = problem.guides[i].transpose() * problem.guides[i];
        gram.diagonal().array() += omega;
        ne.a += w * gram;
        ne.b += w * (problem.taus[i] * gram);
    }
    return ne;
}

/// τ_m = B·A⁻¹ via Cholesky. A single task is its own minimizer and is
/// returned unchanged; a layer whose task vectors are all zero merges to zero.
/// Throws SingularityError when A is not positive definite.
template <typename Scalar>
Matrix<Scalar> solve_closed_form(const LayerProblem<Scalar>& problem, Scalar omega)
{
    if (!(omega >= Scalar(0))) throw ConfigError("solve_closed_form: omega must be >= 0");
    if (problem.tasks() == 1) {
        return problem.taus.front();
    }
    if (std::all_of(problem.weights.begin(), problem.weights.end(),
                    [](Scalar w) { return w == Scalar(0); })) {
        return Matrix<Scalar>::Zero(problem.rows(), problem.cols());
    }
    const NormalEquations<Scalar> ne = normal_equations(problem, omega);
    try {
        return solve_spd(ne.a, ne.b);
    } catch (const SingularityError& e) {
        throw SingularityError(std::string("closed-form system is singular; retry with a "
                                           "positive omega (e.g. --omega 1e-6): ") +
                                   e.what(),
                               e.pivot());
    }
}

enum class Baseline { Average, TaskArithmetic };

template <typename Scalar>
Matrix<Scalar> solve_baseline(const std::vector<Matrix<Scalar>>& taus, Baseline method,
                              Scalar lambda = Scalar(1))
{
    if (taus.empty()) throw DimensionError("baseline needs at least one task vector");
    Matrix<Scalar> s = Matrix<Scalar>::Zero(taus.front().rows(), taus.front().cols());
    for (const auto& t : taus) {
        require_same_shape(t, s, "baseline");
        s += t;
    }
    if (method == Baseline::Average) {
        return s / static_cast<Scalar>(taus.size());
    }
    if (!(lambda > Scalar(0))) throw ConfigError("task arithmetic needs lambda > 0");
    return lambda * s;
}

enum class AblationVariant { RandomGaussian, RowSubset };

AblationVariant parse_ablation_variant(std::string_view name);
std::string_view ablation_variant_name(AblationVariant variant);

/// Mean and sample standard deviation over all entries.
template <typename Scalar>
std::pair<Scalar, Scalar> entry_mean_std(const Matrix<Scalar>& m)
{
    const Scalar n = static_cast<Scalar>(m.size());
    const Scalar mean = m.mean();
    if (m.size() < 2) return {mean, Scalar(0)};
    const Scalar ss = (m.array() - mean).square().sum();
    return {mean, std::sqrt(ss / (n - Scalar(1)))};
}

/// Replaces each guide: a Gaussian matrix with τ_i's entry mean/std, or a
/// random subset of τ_i's rows (kept in their original order). Weights are
/// unchanged, i.e. still 1/‖τ_i‖²_F when balanced.
template <typename Scalar>
LayerProblem<Scalar> make_ablation_problem(const LayerProblem<Scalar>& problem,
                                           AblationVariant variant, double fraction,
                                           std::uint64_t seed)
{
    LayerProblem<Scalar> out = problem;
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < problem.tasks(); ++i) {
        const Matrix<Scalar>& tau = problem.taus[i];
        if (variant == AblationVariant::RandomGaussian) {
            const auto [mu, sigma] = entry_mean_std(tau);
            Matrix<Scalar> g(tau.rows(), tau.cols());
            if (tau.size() > 0 && (tau.array() == tau.data()[0]).all()) {
                g = tau;
            } else {
                std::normal_distribution<Scalar> dist(mu, sigma);
                for (Eigen::Index k = 0; k < g.size(); ++k) g.data()[k] = dist(rng);
            }
            out.guides[i] = std::move(g);
        } else {
            if (!(fraction > 0.0 && fraction <= 1.0)) {
                throw ConfigError("row subset fraction must lie in (0, 1]");
            }
            const auto keep = static_cast<Eigen::Index>(
                std::floor(fraction * static_cast<double>(tau.rows()) + 1e-9));
            if (keep < 1) {
                throw DegenerateError("row subset of fraction " + std::to_string(fraction) +
                                      " selects no rows");
            }
            std::vector<Eigen::Index> idx(static_cast<std::size_t>(tau.rows()));
            std::iota(idx.begin(), idx.end(), Eigen::Index{0});
            std::shuffle(idx.begin(), idx.end(), rng);
            idx.resize(static_cast<std::size_t>(keep));
            std::sort(idx.begin(), idx.end());
            Matrix<Scalar> sub(keep, tau.cols());
            for (Eigen::Index r = 0; r < keep; ++r) {
                sub.row(r) = tau.row(idx[static_cast<std::size_t>(r)]);
            }
            out.guides[i] = std::move(sub);
        }
    }
    return out;
}

template <typename Scalar>
Scalar ablation_loss(const LayerProblem<Scalar>& problem, const Matrix<Scalar>& tau_m,
                     AblationVariant variant, double fraction, std::uint64_t seed)
{
    return loss(make_ablation_problem(problem, variant, fraction, seed), tau_m);
}

// ---------------------------------------------------------------------------
// Whole-checkpoint merging

struct LayerReport {
    std::string name;
    std::size_t rows = 0;
    std::size_t cols = 0;
    double initial_loss = 0.0;  // at Σ_i τ_i
    double final_loss = 0.0;    // at the returned τ_m
    double tau_m_norm = 0.0;
    double final_gradient_norm = 0.0;
    std::vector<double> loss_trace;  // wudi-gd only
    double seconds = 0.0;
};

struct MergeReport {
    std::string method;
    std::size_t experts = 0;
    MergeConfig config;
    std::vector<LayerReport> layers;  // lexicographic by name
    std::vector<std::pair<std::string, std::string>> excluded;  // name, reason
    double total_seconds = 0.0;
};

struct MergeResult {
    Checkpoint merged;
    MergeReport report;
    TaskVector tau_m;
};

/// Stable 64-bit FNV-1a hash, used to derive per-layer ablation seeds.
std::uint64_t fnv1a(std::string_view text);

/// Solves one layer according to cfg. `layer` only seeds ablation sampling.
MatrixXd solve_layer(const std::vector<MatrixXd>& taus, const MergeConfig& cfg,
                     LayerReport* report = nullptr, std::string_view layer = {});

/// Merges precomputed task vectors. Every TaskVector must carry the same
/// layer names as `classification.eligible`.
MergeResult merge_task_vectors(const Checkpoint& pretrained,
                               const LayerClassification& classification,
                               const std::vector<TaskVector>& taus, const MergeConfig& cfg);

/// Validates compatibility, extracts task vectors and merges.
MergeResult merge(const Checkpoint& pretrained, const std::vector<Checkpoint>& experts,
                  const MergeConfig& cfg);

}  // namespace wudi
