#include <chrono>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>

#include "cli.hpp"
#include "wudi/checkpoint.hpp"
#include "wudi/diagnostics.hpp"
#include "wudi/solver.hpp"
#include "wudi/synth.hpp"

namespace wudi::cli {

namespace {

using Clock = std::chrono::steady_clock;

MatrixXd gaussian(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng)
{
    std::normal_distribution<double> n(0.0, 1.0);
    MatrixXd m(rows, cols);
    for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = n(rng);
    return m;
}

std::size_t uniform(std::mt19937_64& rng, std::size_t lo, std::size_t hi)
{
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

// Random full-rank problem: enough rows in total to span every column.
LayerProblem<double> random_problem(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols,
                                    std::size_t tasks)
{
    std::vector<MatrixXd> taus;
    for (std::size_t i = 0; i < tasks; ++i) taus.push_back(gaussian(rows, cols, rng));
    return make_problem(std::move(taus));
}

double rel(const MatrixXd& a, const MatrixXd& b)
{
    return (a - b).norm() / std::max(b.norm(), 1e-300);
}

std::string fmt(double v)
{
    std::ostringstream s;
    s.precision(3);
    s << v;
    return s.str();
}

CheckResult check_gradient(std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    double worst = 0.0;
    for (int k = 0; k < 100; ++k) {
        const auto r = static_cast<Eigen::Index>(uniform(rng, 1, 16));
        const auto c = static_cast<Eigen::Index>(uniform(rng, 1, 32));
        const LayerProblem<double> p = random_problem(rng, r, c, uniform(rng, 1, 5));
        const MatrixXd t = gaussian(r, c, rng);
        const MatrixXd g = loss_gradient(p, t);
        MatrixXd fd(r, c);
        const double h = 1e-5;
        for (Eigen::Index e = 0; e < t.size(); ++e) {
            MatrixXd plus = t, minus = t;
            plus.data()[e] += h;
            minus.data()[e] -= h;
            fd.data()[e] = (loss(p, plus) - loss(p, minus)) / (2 * h);
        }
        worst = std::max(worst, rel(fd, g));
    }
    return {"gradient-finite-difference", worst <= 1e-6, "max rel err " + fmt(worst), 0.0};
}

CheckResult check_stationarity(std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    double worst = 0.0;
    for (int k = 0; k < 100; ++k) {
        const auto c = static_cast<Eigen::Index>(uniform(rng, 1, 12));
        const std::size_t n = uniform(rng, 1, 4);
        const auto r = std::max<Eigen::Index>(
            static_cast<Eigen::Index>(uniform(rng, 1, 12)),
            (c + static_cast<Eigen::Index>(n) - 1) / static_cast<Eigen::Index>(n));
        const LayerProblem<double> p = random_problem(rng, r, c, n);
        for (double omega : {1e-6, 1e-2, 1.0}) {
            const MatrixXd t = solve_closed_form(p, omega);
            const double b = normal_equations(p, omega).b.norm();
            worst = std::max(worst, regularized_gradient(p, t, omega).norm() / (1 + b));
        }
    }
    return {"closed-form-stationarity", worst <= 1e-8, "max residual " + fmt(worst), 0.0};
}

CheckResult check_hand_oracles()
{
    auto row = [](double a, double b) {
        MatrixXd m(1, 2);
        m << a, b;
        return m;
    };
    bool ok = true;
    const MatrixXd ones = row(1, 1);
    ok = ok && (solve_closed_form(make_problem<double>({row(1, 0), row(0, 1)}), 0.0) - ones).norm() <= 1e-12;
    LayerProblem<double> p = make_problem<double>({row(1, 0), row(1, 1)}, false);
    p.weights = {1.0, 0.5};
    ok = ok && (solve_closed_form(p, 0.0) - ones).norm() <= 1e-12;
    bool threw = false;
    try {
        solve_closed_form(make_problem<double>({row(1, 0), row(-1, 0)}), 0.0);
    } catch (const SingularityError&) {
        threw = true;
    }
    ok = ok && threw;
    return {"hand-oracles", ok, ok ? "3/3" : "mismatch", 0.0};
}

CheckResult check_gd_cfs(std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    double worst = 0.0;
    for (int k = 0; k < 20; ++k) {
        std::vector<MatrixXd> taus;
        for (int i = 0; i < 3; ++i) {
            const MatrixXd t = gaussian(4, 6, rng);
            taus.push_back(t / t.norm());
        }
        const LayerProblem<double> p = make_problem(std::move(taus));
        const MatrixXd gd = solve_gd(p, 2000, 1e-2).tau_m;
        worst = std::max(worst, rel(gd, solve_closed_form(p, 1e-8)));
    }
    return {"gd-closed-form-agreement", worst <= 1e-2, "max rel diff " + fmt(worst), 0.0};
}

CheckResult check_equivariance(std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    double scale = 0.0, perm_cfs = 0.0, perm_gd = 0.0, orth = 0.0;
    for (int k = 0; k < 50; ++k) {
        const auto c = static_cast<Eigen::Index>(uniform(rng, 2, 8));
        const auto r = static_cast<Eigen::Index>(uniform(rng, 2, 8));
        const std::size_t n = std::max<std::size_t>(
            uniform(rng, 2, 4), static_cast<std::size_t>((c + r - 1) / r));
        const LayerProblem<double> p = random_problem(rng, r, c, n);
        const MatrixXd base = solve_closed_form(p, 0.0);

        const double factor = 0.1 + 9.9 * std::uniform_real_distribution<double>()(rng);
        std::vector<MatrixXd> scaled, permuted, rotated;
        Eigen::PermutationMatrix<Eigen::Dynamic> perm(r);
        perm.setIdentity();
        std::shuffle(perm.indices().data(), perm.indices().data() + r, rng);
        const MatrixXd q = MatrixXd(Eigen::HouseholderQR<MatrixXd>(gaussian(c, c, rng)).householderQ());
        for (const auto& t : p.taus) {
            scaled.push_back(factor * t);
            permuted.push_back(perm * t);
            rotated.push_back(t * q);
        }
        scale = std::max(scale, rel(solve_closed_form(make_problem(scaled), 0.0), factor * base));
        const LayerProblem<double> pp = make_problem(permuted);
        perm_cfs = std::max(perm_cfs, rel(solve_closed_form(pp, 0.0), perm * base));
        perm_gd = std::max(perm_gd,
                           rel(solve_gd(pp, 200, 1e-2).tau_m, perm * solve_gd(p, 200, 1e-2).tau_m));
        orth = std::max(orth, rel(solve_closed_form(make_problem(rotated), 0.0), base * q));
    }
    const bool ok = scale <= 1e-9 && perm_cfs <= 1e-12 && perm_gd <= 1e-6 && orth <= 1e-8;
    return {"equivariance", ok,
            "scale " + fmt(scale) + ", perm " + fmt(perm_cfs) + "/" + fmt(perm_gd) + ", orth " +
                fmt(orth),
            0.0};
}

CheckResult check_bound(std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::size_t violations = 0;
    for (int k = 0; k < 200; ++k) {
        const auto r = static_cast<Eigen::Index>(uniform(rng, 1, 10));
        const auto d = static_cast<Eigen::Index>(uniform(rng, 1, 10));
        const MatrixXd tau = gaussian(r, d, rng);
        const MatrixXd delta = gaussian(r, d, rng);
        std::vector<VectorXd> xs;
        const std::size_t n = uniform(rng, 1, 20);
        for (std::size_t s = 0; s < n; ++s) xs.emplace_back(gaussian(d, 1, rng));
        if (!wudi::check_theorem1(tau, delta, xs).satisfied) ++violations;
    }
    return {"interference-bound", violations == 0, std::to_string(violations) + " violations", 0.0};
}

void check_subspace(const VerifyOptions& o, std::ostream& progress, std::vector<CheckResult>& out)
{
    const synth::FixtureOptions opts;
    double threshold = 0.0;
    if (o.lemma1_threshold) {
        threshold = *o.lemma1_threshold;
    } else {
        progress << "[verify] calibrating input-drift threshold\n";
        std::vector<std::uint64_t> cal(o.calibration_seeds);
        std::iota(cal.begin(), cal.end(), o.calibration_first_seed);
        threshold = synth::calibrate_lemma1_threshold(cal, opts);
    }
    std::vector<double> drift;
    std::size_t holds = 0;
    for (std::size_t s = 0; s < o.seeds; ++s) {
        const synth::SeedStudy st = synth::study_seed(s, opts);
        drift.push_back(st.consistency.delta_direction);
        if (st.prop1.direction_holds()) ++holds;
    }
    const double med = synth::median(drift);
    out.push_back({"input-consistency", med < threshold,
                   "median " + fmt(med) + " vs threshold " + fmt(threshold), 0.0});
    const std::size_t need = (o.seeds * 9 + 9) / 10;
    out.push_back({"subspace-direction", holds >= need,
                   std::to_string(holds) + "/" + std::to_string(o.seeds) + " seeds", 0.0});
}

void check_interference(const VerifyOptions& o, std::ostream& progress,
                        std::vector<CheckResult>& out)
{
    std::size_t vs_ta = 0, vs_avg = 0;
    for (std::size_t s = 0; s < o.seeds; ++s) {
        progress << "[verify] interference seed " << s << "\n";
        const synth::MergeFixture fx = synth::make_merge_fixture(s);
        auto final_error = [&](MergeMethod m) {
            const MergeResult r = merge(fx.pretrained, fx.experts, synth::fixture_merge_config(m));
            const InterferenceReport rep = synth::fixture_interference(fx, r.merged);
            return rep.mean_at(rep.depths() - 1);
        };
        const double wudi = final_error(MergeMethod::WudiGd);
        if (wudi < final_error(MergeMethod::TaskArithmetic)) ++vs_ta;
        if (wudi < final_error(MergeMethod::Average)) ++vs_avg;
    }
    const std::size_t need = (o.seeds * 9 + 9) / 10;
    const std::string of = "/" + std::to_string(o.seeds) + " seeds";
    out.push_back({"interference-vs-task-arith", vs_ta >= need, std::to_string(vs_ta) + of, 0.0});
    out.push_back({"interference-vs-average", vs_avg >= need, std::to_string(vs_avg) + of, 0.0});
}

Checkpoint as_f32(Checkpoint c)
{
    for (auto& [name, t] : c.tensors) {
        t.dtype = DType::F32;
        t = round_to_dtype(t);
    }
    return c;
}

CheckResult check_single_expert()
{
    const synth::MergeFixture fx = synth::make_merge_fixture(7, {1});
    const Checkpoint pre = as_f32(fx.pretrained);
    const Checkpoint expert = as_f32(fx.experts.front());
    bool ok = true;
    for (MergeMethod m : {MergeMethod::WudiGd, MergeMethod::WudiCfs, MergeMethod::Average,
                          MergeMethod::TaskArithmetic}) {
        MergeConfig cfg = synth::fixture_merge_config(m);
        cfg.lambda = 1.0;
        const Checkpoint merged = parse_checkpoint(serialize_checkpoint(merge(pre, {expert}, cfg).merged));
        for (const char* name : {synth::kLayer1, synth::kLayer2}) {
            ok = ok && merged.at(name).values == expert.at(name).values;
        }
    }
    return {"single-expert-identity", ok, ok ? "4/4 methods" : "mismatch", 0.0};
}

CheckResult check_threads(std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    Checkpoint pre;
    std::vector<Checkpoint> experts(3);
    for (int l = 0; l < 12; ++l) {
        const std::string name = "block." + std::to_string(l) + ".weight";
        const MatrixXd w = gaussian(6, 10, rng);
        pre.tensors.emplace(name, Tensor::from_matrix(w, DType::F32));
        for (auto& e : experts) {
            e.tensors.emplace(name, Tensor::from_matrix(w + 0.05 * gaussian(6, 10, rng), DType::F32));
        }
    }
    MergeConfig cfg = synth::fixture_merge_config(MergeMethod::WudiGd);
    cfg.threads = 1;
    const std::string one = serialize_checkpoint(merge(pre, experts, cfg).merged);
    cfg.threads = 8;
    const std::string eight = serialize_checkpoint(merge(pre, experts, cfg).merged);
    return {"thread-determinism", one == eight, one == eight ? "identical bytes" : "differs", 0.0};
}

CheckResult check_io(std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    bool ok = true;
    for (DType d : {DType::F32, DType::F64}) {
        Checkpoint c;
        c.tensors.emplace("a", round_to_dtype(Tensor::from_matrix(gaussian(5, 7, rng), d)));
        c.tensors.emplace("b", round_to_dtype(Tensor::from_matrix(gaussian(1, 3, rng), d)));
        const std::string bytes = serialize_checkpoint(c);
        const Checkpoint back = parse_checkpoint(bytes);
        ok = ok && serialize_checkpoint(back) == bytes;
        for (const auto& [name, t] : c.tensors) ok = ok && back.at(name).values == t.values;
    }
    std::size_t bad = 0;
    for (std::uint32_t bits = 0; bits < 0x10000; ++bits) {
        const double v = from_f16_bits(static_cast<std::uint16_t>(bits));
        if (!std::isfinite(v)) continue;
        if (to_f16_bits(v) != bits) ++bad;
    }
    ok = ok && bad == 0;
    return {"checkpoint-round-trip", ok, std::to_string(bad) + " f16 mismatches", 0.0};
}

}  // namespace

std::vector<CheckResult> run_verify_suite(const VerifyOptions& options, std::ostream& progress)
{
    std::vector<CheckResult> results;
    auto timed = [&](const std::function<void()>& body) {
        const auto start = Clock::now();
        const std::size_t before = results.size();
        body();
        const double secs = std::chrono::duration<double>(Clock::now() - start).count();
        for (std::size_t i = before; i < results.size(); ++i) results[i].seconds = secs;
    };
    auto single = [&](const std::function<CheckResult()>& f) {
        timed([&] {
            results.push_back(f());
            progress << "[verify] " << results.back().name << ": "
                     << (results.back().passed ? "pass" : "FAIL") << "\n";
        });
    };
    single([] { return check_gradient(101); });
    single([] { return check_stationarity(102); });
    single([] { return check_hand_oracles(); });
    single([] { return check_gd_cfs(104); });
    single([] { return check_equivariance(105); });
    single([] { return check_bound(106); });
    timed([&] { check_subspace(options, progress, results); });
    timed([&] { check_interference(options, progress, results); });
    single([] { return check_single_expert(); });
    single([] { return check_threads(110); });
    single([] { return check_io(111); });
    return results;
}

}  // namespace wudi::cli
