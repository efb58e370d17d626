#include "wudi/synth.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <random>
#include <string>

#include <json.hpp>

namespace wudi::synth {

namespace {

MatrixXd gaussian(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double stddev = 1.0)
{
    std::normal_distribution<double> dist(0.0, stddev);
    MatrixXd m(rows, cols);
    for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = dist(rng);
    return m;
}

MatrixXd random_orthogonal(Eigen::Index n, std::mt19937_64& rng)
{
    const MatrixXd g = gaussian(n, n, rng);
    Eigen::HouseholderQR<MatrixXd> qr(g);
    MatrixXd q = qr.householderQ();
    // Fix column signs so the distribution is Haar.
    const VectorXd diag = MatrixXd(qr.matrixQR().triangularView<Eigen::Upper>()).diagonal();
    for (Eigen::Index j = 0; j < n; ++j) {
        if (diag(j) < 0) q.col(j) = -q.col(j);
    }
    return q;
}

constexpr std::uint64_t kTeacherSalt = 0x9e3779b97f4a7c15ULL;

}  // namespace

void SynthTask::validate() const
{
    if (dims.input < 2 || dims.hidden < 2 || dims.output < 2) {
        throw ConfigError("synthetic task dimensions must all be >= 2");
    }
    if (samples < dims.input) {
        throw ConfigError("synthetic task needs at least as many samples as input dimensions");
    }
    if (domains < 1 || domain >= domains) {
        throw ConfigError("task domain index out of range");
    }
    if (static_cast<Eigen::Index>(domain) * std::max<Eigen::Index>(1, dims.input / static_cast<Eigen::Index>(domains)) >= dims.input) {
        throw ConfigError("too many domains for the input dimension");
    }
    if (!(minor_scale > 0.0)) {
        throw ConfigError("minor_scale must be > 0");
    }
}

TaskData generate_task_data(const SynthTask& task)
{
    task.validate();
    std::mt19937_64 family_rng(task.family_seed ^ kTeacherSalt);
    const MatrixXd teacher = gaussian(task.dims.output, task.dims.input, family_rng,
                                      1.0 / std::sqrt(static_cast<double>(task.dims.input)));
    const MatrixXd basis = random_orthogonal(task.dims.input, family_rng);

    std::mt19937_64 rng(task.seed);
    const MatrixXd rotation = random_orthogonal(task.dims.output, rng);

    const Eigen::Index block =
        std::max<Eigen::Index>(1, task.dims.input / static_cast<Eigen::Index>(task.domains));
    const Eigen::Index first = static_cast<Eigen::Index>(task.domain) * block;
    VectorXd scales = VectorXd::Constant(task.dims.input, task.minor_scale);
    scales.segment(first, std::min(block, task.dims.input - first)).setOnes();
    const MatrixXd mixing = basis * scales.asDiagonal();  // input × input

    TaskData data;
    const MatrixXd z = gaussian(task.samples, task.dims.input, rng);
    data.inputs = z * mixing.transpose();
    data.targets = data.inputs * (rotation * teacher).transpose();
    return data;
}

FineTuneConfig FineTuneConfig::constant(double eta, std::size_t iterations)
{
    FineTuneConfig cfg;
    cfg.learning_rates.assign(iterations, eta);
    return cfg;
}

void FineTuneConfig::validate() const
{
    if (learning_rates.empty()) {
        throw ConfigError("fine-tuning needs at least one iteration");
    }
    for (double eta : learning_rates) {
        if (!(eta >= 0.0) || !std::isfinite(eta)) {
            throw ConfigError("learning rates must be finite and non-negative");
        }
    }
}

NetworkParams NetworkParams::from_checkpoint(const Checkpoint& ckpt)
{
    return {ckpt.at(kLayer1).matrix(), ckpt.at(kLayer2).matrix()};
}

Checkpoint NetworkParams::to_checkpoint() const
{
    Checkpoint ckpt;
    ckpt.tensors.emplace(kLayer1, Tensor::from_matrix(w1, DType::F64));
    ckpt.tensors.emplace(kLayer2, Tensor::from_matrix(w2, DType::F64));
    return ckpt;
}

LayerParams NetworkParams::layers() const
{
    return {{kLayer1, w1}, {kLayer2, w2}};
}

Checkpoint pretrain(std::uint64_t family_seed, const Dims& dims)
{
    if (dims.input < 2 || dims.hidden < 2 || dims.output < 2) {
        throw ConfigError("network dimensions must all be >= 2");
    }
    std::mt19937_64 rng(family_seed);
    NetworkParams p;
    p.w1 = gaussian(dims.hidden, dims.input, rng, std::sqrt(2.0 / static_cast<double>(dims.input)));
    p.w2 = gaussian(dims.output, dims.hidden, rng, 1.0 / std::sqrt(static_cast<double>(dims.hidden)));
    Checkpoint ckpt = p.to_checkpoint();
    ckpt.metadata["family_seed"] = std::to_string(family_seed);
    return ckpt;
}

MatrixXd hidden_inputs(const NetworkParams& params, const MatrixXd& inputs)
{
    return (inputs * params.w1.transpose()).cwiseMax(0.0);
}

double task_loss(const NetworkParams& params, const TaskData& data)
{
    const MatrixXd out = hidden_inputs(params, data.inputs) * params.w2.transpose();
    return 0.5 * (out - data.targets).squaredNorm();
}

NetworkParams task_gradient(const NetworkParams& params, const TaskData& data)
{
    const MatrixXd pre = data.inputs * params.w1.transpose();    // N × hidden
    const MatrixXd hidden = pre.cwiseMax(0.0);
    const MatrixXd err = hidden * params.w2.transpose() - data.targets;  // N × output
    MatrixXd d_hidden = err * params.w2;                          // N × hidden
    d_hidden = (pre.array() > 0.0).select(d_hidden, 0.0);
    return {d_hidden.transpose() * data.inputs, err.transpose() * hidden};
}

NetworkParams SynthTrace::task_vector() const
{
    return {params.back().w1 - params.front().w1, params.back().w2 - params.front().w2};
}

namespace {

void finite_difference_check(const NetworkParams& params, const TaskData& data,
                             const NetworkParams& analytic)
{
    constexpr double h = 1e-5;
    double err2 = 0.0;
    double ref2 = 0.0;
    // A W1 coordinate whose ±h probe moves some pre-activation across zero
    // straddles a rectifier kink, where the loss is not differentiable.
    const MatrixXd pre = data.inputs * params.w1.transpose();
    auto straddles_kink = [&](Eigen::Index k) {
        const Eigen::Index row = k / params.w1.cols();
        const Eigen::Index col = k % params.w1.cols();
        return ((pre.col(row).array().abs() - h * data.inputs.col(col).array().abs()) <= 0.0).any();
    };
    auto probe = [&](MatrixXd NetworkParams::*member, const MatrixXd& grad) {
        NetworkParams p = params;
        MatrixXd& w = p.*member;
        for (Eigen::Index k = 0; k < w.size(); ++k) {
            if (member == &NetworkParams::w1 && straddles_kink(k)) continue;
            const double orig = w.data()[k];
            w.data()[k] = orig + h;
            const double up = task_loss(p, data);
            w.data()[k] = orig - h;
            const double down = task_loss(p, data);
            w.data()[k] = orig;
            const double fd = (up - down) / (2.0 * h);
            err2 += (fd - grad.data()[k]) * (fd - grad.data()[k]);
            ref2 += grad.data()[k] * grad.data()[k];
        }
    };
    probe(&NetworkParams::w1, analytic.w1);
    probe(&NetworkParams::w2, analytic.w2);
    if (std::sqrt(err2) > 1e-6 * std::max(1.0, std::sqrt(ref2))) {
        throw Error("finetune: analytic gradient disagrees with finite differences (error " +
                    std::to_string(std::sqrt(err2)) + ", norm " + std::to_string(std::sqrt(ref2)) +
                    ")");
    }
}

}  // namespace

FineTuneResult finetune(const Checkpoint& pretrained, const SynthTask& task,
                        const FineTuneConfig& cfg)
{
    cfg.validate();
    const TaskData data = generate_task_data(task);

    FineTuneResult result;
    SynthTrace& trace = result.trace;
    NetworkParams theta = NetworkParams::from_checkpoint(pretrained);
    if (theta.w1.cols() != task.dims.input || theta.w1.rows() != task.dims.hidden ||
        theta.w2.rows() != task.dims.output) {
        throw DimensionError("finetune: pretrained network does not match task dimensions");
    }
    trace.learning_rates = cfg.learning_rates;
    trace.accumulated_update = {MatrixXd::Zero(theta.w1.rows(), theta.w1.cols()),
                                MatrixXd::Zero(theta.w2.rows(), theta.w2.cols())};

    for (std::size_t t = 0; t <= cfg.iterations(); ++t) {
        const double l = task_loss(theta, data);
        if (!std::isfinite(l)) {
            throw DivergenceError("finetune: loss became non-finite at iteration " +
                                      std::to_string(t) + "; use a smaller learning rate",
                                  t);
        }
        trace.params.push_back(theta);
        trace.layer2_inputs.push_back(hidden_inputs(theta, data.inputs));
        trace.losses.push_back(l);
        if (t == cfg.iterations()) break;

        const NetworkParams grad = task_gradient(theta, data);
        if (t == 0 && cfg.self_check) {
            finite_difference_check(theta, data, grad);
        }
        const double eta = cfg.learning_rates[t];
        theta.w1 -= eta * grad.w1;
        theta.w2 -= eta * grad.w2;
        trace.accumulated_update.w1 -= eta * grad.w1;
        trace.accumulated_update.w2 -= eta * grad.w2;
    }

    result.expert = theta.to_checkpoint();
    result.expert.metadata = pretrained.metadata;
    result.expert.metadata["task_seed"] = std::to_string(task.seed);
    return result;
}

namespace {

std::vector<VectorXd> rows_of(const MatrixXd& m)
{
    std::vector<VectorXd> out;
    out.reserve(static_cast<std::size_t>(m.rows()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) out.emplace_back(m.row(r).transpose());
    return out;
}

}  // namespace

ConsistencyReport verify_lemma1(const SynthTrace& trace)
{
    if (trace.layer2_inputs.empty()) {
        throw DegenerateError("verify_lemma1: empty trace");
    }
    ConsistencyReport r = input_consistency(rows_of(trace.layer2_inputs.front()),
                                            rows_of(trace.layer2_inputs.back()));
    r.layer = kLayer2;
    return r;
}

MatrixXd matched_gaussian(const MatrixXd& like, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    MatrixXd out(like.rows(), like.cols());
    for (Eigen::Index r = 0; r < like.rows(); ++r) {
        const double mean = like.row(r).mean();
        double sd = 0.0;
        if (like.cols() > 1) {
            sd = std::sqrt((like.row(r).array() - mean).square().sum() /
                           static_cast<double>(like.cols() - 1));
        }
        if (sd > 0.0) {
            std::normal_distribution<double> dist(mean, sd);
            for (Eigen::Index c = 0; c < like.cols(); ++c) out(r, c) = dist(rng);
        } else {
            out.row(r).setConstant(mean);
        }
    }
    return out;
}

double median(std::vector<double> values)
{
    return percentile(std::move(values), 0.5);
}

double percentile(std::vector<double> values, double q)
{
    if (values.empty()) throw DegenerateError("percentile of an empty set");
    std::sort(values.begin(), values.end());
    const double pos = q * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = static_cast<std::size_t>(std::ceil(pos));
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

Prop1Report verify_prop1(const SynthTrace& trace, std::uint64_t random_seed)
{
    if (trace.params.size() < 2) {
        throw DegenerateError("verify_prop1: trace has no iterations");
    }
    const MatrixXd tau = trace.task_vector().w2;
    if (tau.rows() < 2) {
        throw DimensionError("verify_prop1: layer-2 task vector needs at least two rows");
    }
    const MatrixXd random = matched_gaussian(tau, random_seed);

    Prop1Report r;
    const MatrixXd& final_inputs = trace.layer2_inputs.back();
    const MatrixXd& initial_inputs = trace.layer2_inputs.front();
    for (Eigen::Index n = 0; n < final_inputs.rows(); ++n) {
        const VectorXd x = final_inputs.row(n).transpose();
        if (x.norm() == 0.0) continue;
        r.residual_true.push_back(reconstruct_input(tau, x).relative_residual);
        r.residual_random.push_back(reconstruct_input(random, x).relative_residual);
    }
    for (Eigen::Index n = 0; n < initial_inputs.rows(); ++n) {
        const VectorXd x = initial_inputs.row(n).transpose();
        if (x.norm() == 0.0) continue;
        r.residual_initial.push_back(reconstruct_input(tau, x).relative_residual);
    }
    if (r.residual_true.empty()) {
        throw DegenerateError("verify_prop1: every final-iteration input is zero");
    }
    r.median_true = median(r.residual_true);
    r.median_random = median(r.residual_random);
    r.median_initial = r.residual_initial.empty() ? 0.0 : median(r.residual_initial);
    return r;
}

MergeFixture make_merge_fixture(std::uint64_t seed, const FixtureOptions& options)
{
    MergeFixture f;
    f.dims = options.dims;
    f.pretrained = pretrain(seed, options.dims);
    for (std::size_t i = 0; i < options.tasks; ++i) {
        SynthTask task;
        task.seed = seed * 7919 + i + 1;
        task.family_seed = seed;
        task.dims = options.dims;
        task.samples = options.samples;
        task.domains = std::clamp<std::size_t>(options.tasks, 1, 4);
        task.domain = i % task.domains;
        task.minor_scale = options.minor_scale;
        FineTuneResult r = finetune(f.pretrained, task, options.finetune);
        f.tasks.push_back(task);
        f.data.push_back(generate_task_data(task));
        f.experts.push_back(std::move(r.expert));
        f.traces.push_back(std::move(r.trace));
    }
    return f;
}

SeedStudy study_seed(std::uint64_t seed, const FixtureOptions& options)
{
    SynthTask task;
    task.seed = seed;
    task.family_seed = seed;
    task.dims = options.dims;
    task.samples = options.samples;
    task.minor_scale = options.minor_scale;
    const FineTuneResult r = finetune(pretrain(seed, options.dims), task, options.finetune);
    return {verify_lemma1(r.trace), verify_prop1(r.trace, seed ^ 0x5bd1e995ULL)};
}

double calibrate_lemma1_threshold(const std::vector<std::uint64_t>& seeds,
                                  const FixtureOptions& options)
{
    std::vector<double> values;
    values.reserve(seeds.size());
    for (std::uint64_t s : seeds) values.push_back(study_seed(s, options).consistency.delta_direction);
    return percentile(std::move(values), 0.95);
}

InterferenceReport fixture_interference(const MergeFixture& fixture, const Checkpoint& merged)
{
    const NetworkParams base = NetworkParams::from_checkpoint(fixture.pretrained);
    const NetworkParams m = NetworkParams::from_checkpoint(merged);
    const LayerParams theta = base.layers();
    const LayerParams tau_m = {{kLayer1, m.w1 - base.w1}, {kLayer2, m.w2 - base.w2}};

    std::vector<LayerParams> tau_i;
    std::vector<std::vector<VectorXd>> samples;
    for (std::size_t i = 0; i < fixture.experts.size(); ++i) {
        const NetworkParams e = NetworkParams::from_checkpoint(fixture.experts[i]);
        tau_i.push_back({{kLayer1, e.w1 - base.w1}, {kLayer2, e.w2 - base.w2}});
        samples.push_back(rows_of(fixture.data[i].inputs));
    }
    return relative_interference(relu_mlp_evaluator({kLayer1, kLayer2}), theta, tau_m, tau_i,
                                 samples);
}

MergeConfig fixture_merge_config(MergeMethod method)
{
    MergeConfig cfg;
    cfg.method = method;
    cfg.lambda = 1.0;
    cfg.steps = 300;
    cfg.learning_rate = 3e-3;
    cfg.omega = 1e-6;
    return cfg;
}

void write_trace_jsonl(const SynthTrace& trace, std::ostream& out)
{
    for (std::size_t t = 0; t < trace.layer2_inputs.size(); ++t) {
        const MatrixXd& x = trace.layer2_inputs[t];
        nlohmann::json line;
        line["iteration"] = t;
        line["eta"] = t == 0 ? 0.0 : trace.learning_rates[t - 1];
        line["loss"] = trace.losses[t];
        line["rows"] = x.rows();
        line["cols"] = x.cols();
        line["inputs"] = std::vector<double>(x.data(), x.data() + x.size());
        out << line.dump() << '\n';
    }
}

std::vector<MatrixXd> read_trace_jsonl(std::istream& in)
{
    std::vector<MatrixXd> out;
    std::string text;
    while (std::getline(in, text)) {
        if (text.empty()) continue;
        const auto line = nlohmann::json::parse(text);
        const auto rows = line.at("rows").get<Eigen::Index>();
        const auto cols = line.at("cols").get<Eigen::Index>();
        const auto values = line.at("inputs").get<std::vector<double>>();
        if (static_cast<Eigen::Index>(values.size()) != rows * cols) {
            throw IntegrityError("trace line " + std::to_string(out.size()) +
                                 ": input count does not match shape");
        }
        out.emplace_back(Eigen::Map<const MatrixXd>(values.data(), rows, cols));
    }
    return out;
}

}  // namespace wudi::synth
