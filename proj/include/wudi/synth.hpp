#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "wudi/checkpoint.hpp"
#include "wudi/diagnostics.hpp"
#include "wudi/task_vector.hpp"
#include "wudi/tensor.hpp"

namespace wudi::synth {

// Two-layer network: y = W2 · relu(W1 · x), no biases.
inline constexpr const char* kLayer1 = "l1.weight";
inline constexpr const char* kLayer2 = "l2.weight";

struct Dims {
    Eigen::Index input = 8;
    Eigen::Index hidden = 16;
    Eigen::Index output = 4;
};

/// One synthetic task of a family.
///
/// The family fixes an orthonormal input basis split into `domains` blocks.
/// Task inputs are Gaussian with unit scale along block `domain` and
/// `minor_scale` along every other basis direction, so different tasks have
/// mostly separate input domains. Targets come from a linear teacher shared by
/// the family and rotated by a task-specific orthogonal map.
struct SynthTask {
    std::uint64_t seed = 0;
    std::uint64_t family_seed = 0;
    Dims dims;
    Eigen::Index samples = 64;
    std::size_t domain = 0;
    std::size_t domains = 4;
    double minor_scale = 0.05;

    void validate() const;
};

struct TaskData {
    MatrixXd inputs;   // samples × input
    MatrixXd targets;  // samples × output
};

TaskData generate_task_data(const SynthTask& task);

struct FineTuneConfig {
    std::vector<double> learning_rates;  // η_t for t = 1..T
    bool self_check = true;              // finite-difference gradient check at iteration 0

    static FineTuneConfig constant(double eta, std::size_t iterations);
    std::size_t iterations() const { return learning_rates.size(); }
    void validate() const;
};

struct NetworkParams {
    MatrixXd w1;  // hidden × input
    MatrixXd w2;  // output × hidden

    static NetworkParams from_checkpoint(const Checkpoint& ckpt);
    Checkpoint to_checkpoint() const;
    LayerParams layers() const;
};

/// Deterministic random initialization (scaled Gaussian), stored as f64.
Checkpoint pretrain(std::uint64_t family_seed, const Dims& dims);

/// ½ Σ_n ‖W2 relu(W1 x_n) − y_n‖².
double task_loss(const NetworkParams& params, const TaskData& data);

/// Analytic gradient of task_loss.
NetworkParams task_gradient(const NetworkParams& params, const TaskData& data);

/// Rectified layer-2 inputs, one row per sample.
MatrixXd hidden_inputs(const NetworkParams& params, const MatrixXd& inputs);

struct SynthTrace {
    std::vector<NetworkParams> params;   // θ^0 .. θ^T
    std::vector<MatrixXd> layer2_inputs; // per iteration, samples × hidden
    std::vector<double> losses;          // L(θ^t)
    std::vector<double> learning_rates;  // η_1 .. η_T
    NetworkParams accumulated_update;    // Σ_t −η_t ∇L(θ^{t−1})

    std::size_t iterations() const { return learning_rates.size(); }
    /// θ^T − θ^0 per layer.
    NetworkParams task_vector() const;
};

struct FineTuneResult {
    Checkpoint expert;
    SynthTrace trace;
};

/// Full-batch gradient descent with hand-derived gradients.
/// Throws DivergenceError if the loss becomes non-finite.
FineTuneResult finetune(const Checkpoint& pretrained, const SynthTask& task,
                        const FineTuneConfig& cfg);

/// Input consistency of layer-2 inputs between iteration 0 and iteration T.
ConsistencyReport verify_lemma1(const SynthTrace& trace);

struct Prop1Report {
    std::vector<double> residual_true;    // per sample, against τ_2 rows
    std::vector<double> residual_random;  // per sample, against a matched Gaussian matrix
    std::vector<double> residual_initial; // iteration-0 inputs against τ_2 (reported only)
    double median_true = 0.0;
    double median_random = 0.0;
    double median_initial = 0.0;

    bool direction_holds() const { return median_true < median_random; }
};

/// Gaussian matrix with the per-row mean and standard deviation of `like`.
MatrixXd matched_gaussian(const MatrixXd& like, std::uint64_t seed);

Prop1Report verify_prop1(const SynthTrace& trace, std::uint64_t random_seed);

double median(std::vector<double> values);
double percentile(std::vector<double> values, double q);

/// Single-task run used for the input-consistency and subspace checks: task
/// seed `seed` on domain 0 of family `seed`.
struct SeedStudy {
    ConsistencyReport consistency;
    Prop1Report prop1;
};

struct FixtureOptions;
SeedStudy study_seed(std::uint64_t seed, const FixtureOptions& options);

/// 95th percentile of ΔDirection over the given seeds.
double calibrate_lemma1_threshold(const std::vector<std::uint64_t>& seeds,
                                  const FixtureOptions& options);

/// Several tasks fine-tuned from one pretrained network.
struct MergeFixture {
    Dims dims;
    Checkpoint pretrained;
    std::vector<SynthTask> tasks;
    std::vector<TaskData> data;
    std::vector<Checkpoint> experts;
    std::vector<SynthTrace> traces;
};

struct FixtureOptions {
    std::size_t tasks = 4;
    Dims dims;
    Eigen::Index samples = 64;
    double minor_scale = 0.05;
    FineTuneConfig finetune = FineTuneConfig::constant(1e-3, 100);
};

/// Task i uses input domain i mod 4 and seed `seed * 7919 + i + 1`.
MergeFixture make_merge_fixture(std::uint64_t seed, const FixtureOptions& options = {});

/// Mean relative interference of a merged checkpoint against each expert on
/// that expert's own training inputs.
InterferenceReport fixture_interference(const MergeFixture& fixture, const Checkpoint& merged);

/// Merge settings for desk-scale fixtures: λ = 1, ω = 1e-6, 300 Adam steps at
/// lr 3e-3 (a few percent of a typical task-vector entry, as 1e-5 is for real
/// checkpoints).
MergeConfig fixture_merge_config(MergeMethod method);

void write_trace_jsonl(const SynthTrace& trace, std::ostream& out);
/// Reads back the per-iteration layer-2 inputs written by write_trace_jsonl.
std::vector<MatrixXd> read_trace_jsonl(std::istream& in);

}  // namespace wudi::synth
