// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.
//
//   acceptance <path-to-wudi-binary>

#include <algorithm>
#include <chrono>
#include <cstring>
#include <numeric>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include <Eigen/SVD>
#include <json.hpp>

#include "oracles.hpp"
#include "wudi/checkpoint.hpp"
#include "wudi/diagnostics.hpp"
#include "wudi/errors.hpp"
#include "wudi/solver.hpp"
#include "wudi/synth.hpp"

using namespace wudi;
namespace fs = std::filesystem;

namespace {

struct Verdict {
    bool passed = false;
    std::string detail;
};

std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi)
{
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

std::string num(double v)
{
    std::ostringstream s;
    s.precision(3);
    s << v;
    return s.str();
}

std::vector<MatrixXd> random_taus(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, std::size_t n)
{
    std::vector<MatrixXd> t;
    for (std::size_t i = 0; i < n; ++i) t.push_back(oracle::random_matrix(r, c, rng));
    return t;
}

// Ridge normal equations assembled with the naive kernels.
std::pair<MatrixXd, MatrixXd> oracle_normal_equations(const std::vector<MatrixXd>& taus,
                                                      const std::vector<double>& w, double omega)
{
    const Eigen::Index c = taus.front().cols();
    MatrixXd a = MatrixXd::Zero(c, c);
    MatrixXd b = MatrixXd::Zero(taus.front().rows(), c);
    for (std::size_t i = 0; i < taus.size(); ++i) {
        const MatrixXd gram = oracle::matmul(oracle::transpose(taus[i]), taus[i]);
        a += w[i] * (gram + omega * MatrixXd::Identity(c, c));
        b += w[i] * (oracle::matmul(taus[i], gram) + omega * taus[i]);
    }
    return {a, b};
}

Verdict gradient_correctness()
{
    std::mt19937_64 rng(9001);
    double worst = 0.0;
    for (int k = 0; k < 100; ++k) {
        const auto r = static_cast<Eigen::Index>(pick(rng, 1, 16));
        const auto c = static_cast<Eigen::Index>(pick(rng, 1, 32));
        const auto taus = random_taus(rng, r, c, pick(rng, 1, 5));
        const MatrixXd t = oracle::random_matrix(r, c, rng);
        const auto w = oracle::balanced_weights(taus);
        const MatrixXd fd =
            oracle::central_difference([&](const MatrixXd& x) { return oracle::wudi_loss(taus, w, x); }, t);
        worst = std::max(worst, oracle::rel_diff(loss_gradient(make_problem(taus), t), fd));
    }
    return {worst <= 1e-6, "max relative error " + num(worst)};
}

Verdict closed_form_optimality()
{
    std::mt19937_64 rng(9002);
    double worst = 0.0;
    for (int k = 0; k < 100; ++k) {
        const auto c = static_cast<Eigen::Index>(pick(rng, 1, 12));
        const std::size_t n = pick(rng, 1, 4);
        const auto r = std::max<Eigen::Index>(static_cast<Eigen::Index>(pick(rng, 1, 12)),
                                              (c + static_cast<Eigen::Index>(n) - 1) /
                                                  static_cast<Eigen::Index>(n));
        const auto taus = random_taus(rng, r, c, n);
        const auto w = oracle::balanced_weights(taus);
        for (double omega : {1e-6, 1e-2, 1.0}) {
            const MatrixXd t = solve_closed_form(make_problem(taus), omega);
            const auto [a, b] = oracle_normal_equations(taus, w, omega);
            // ∇ = 2(τ_m A − B)
            const MatrixXd grad = 2.0 * (oracle::matmul(t, a) - b);
            worst = std::max(worst, std::sqrt(oracle::sum_sq(grad)) / (1 + std::sqrt(oracle::sum_sq(b))));
        }
    }
    return {worst <= 1e-8, "max scaled residual " + num(worst)};
}

Verdict hand_oracles()
{
    auto row = [](double a, double b) {
        MatrixXd m(1, 2);
        m << a, b;
        return m;
    };
    // Orthogonal unit rows: A = I, B = [1, 1].
    const MatrixXd ones = row(1, 1);
    const double e1 = oracle::max_abs(solve_closed_form(make_problem<double>({row(1, 0), row(0, 1)}), 0.0) - ones);
    // Rows [1,0] and [1,1] with weights 1 and 1/2: A = [[1.5,.5],[.5,.5]], B = [2, 1].
    LayerProblem<double> p = make_problem<double>({row(1, 0), row(1, 1)}, false);
    p.weights = {1.0, 0.5};
    MatrixXd a(2, 2);
    a << 1.5, 0.5, 0.5, 0.5;
    const MatrixXd expected = oracle::solve_2x2(a, row(2.0, 1.0));
    const double e2 = std::max(oracle::max_abs(solve_closed_form(p, 0.0) - expected),
                               oracle::max_abs(expected - ones));
    bool singular = false;
    try {
        solve_closed_form(make_problem<double>({row(1, 0), row(-1, 0)}), 0.0);
    } catch (const SingularityError&) {
        singular = true;
    }
    const bool ok = e1 <= 1e-12 && e2 <= 1e-12 && singular;
    return {ok, "errors " + num(e1) + ", " + num(e2) + ", rank-deficient " +
                    (singular ? "raised" : "not raised")};
}

Verdict gd_cfs_agreement()
{
    std::mt19937_64 rng(9004);
    double worst = 0.0;
    for (int k = 0; k < 20; ++k) {
        std::vector<MatrixXd> taus;
        for (int i = 0; i < 3; ++i) {
            const MatrixXd t = oracle::random_matrix(4, 6, rng);
            taus.push_back(t / std::sqrt(oracle::sum_sq(t)));
        }
        const LayerProblem<double> p = make_problem(taus);
        worst = std::max(worst, oracle::rel_diff(solve_gd(p, 2000, 1e-2).tau_m, solve_closed_form(p, 1e-8)));
    }
    return {worst <= 1e-2, "max relative difference " + num(worst)};
}

Verdict equivariances()
{
    std::mt19937_64 rng(9005);
    double scale = 0.0, perm_cfs = 0.0, perm_gd = 0.0, orth = 0.0;
    for (int k = 0; k < 50; ++k) {
        const auto c = static_cast<Eigen::Index>(pick(rng, 2, 8));
        const auto r = static_cast<Eigen::Index>(pick(rng, 2, 8));
        const std::size_t n =
            std::max<std::size_t>(pick(rng, 2, 4), static_cast<std::size_t>((c + r - 1) / r));
        const auto taus = random_taus(rng, r, c, n);
        const MatrixXd base = solve_closed_form(make_problem(taus), 0.0);
        const MatrixXd base_gd = solve_gd(make_problem(taus), 200, 1e-2).tau_m;

        const double factor = 0.1 + 9.9 * std::uniform_real_distribution<double>()(rng);
        std::vector<Eigen::Index> order(static_cast<std::size_t>(r));
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        auto permute = [&](const MatrixXd& m) {
            MatrixXd out(m.rows(), m.cols());
            for (Eigen::Index i = 0; i < r; ++i) out.row(i) = m.row(order[static_cast<std::size_t>(i)]);
            return out;
        };
        const MatrixXd q = oracle::random_orthogonal(c, rng);
        std::vector<MatrixXd> scaled, permuted, rotated;
        for (const auto& t : taus) {
            scaled.push_back(factor * t);
            permuted.push_back(permute(t));
            rotated.push_back(oracle::matmul(t, q));
        }
        scale = std::max(scale, oracle::rel_diff(solve_closed_form(make_problem(scaled), 0.0), factor * base));
        perm_cfs = std::max(perm_cfs, oracle::rel_diff(solve_closed_form(make_problem(permuted), 0.0), permute(base)));
        perm_gd = std::max(perm_gd, oracle::rel_diff(solve_gd(make_problem(permuted), 200, 1e-2).tau_m, permute(base_gd)));
        orth = std::max(orth, oracle::rel_diff(solve_closed_form(make_problem(rotated), 0.0), oracle::matmul(base, q)));
    }
    const bool ok = scale <= 1e-9 && perm_cfs <= 1e-12 && perm_gd <= 1e-6 && orth <= 1e-8;
    return {ok, "scale " + num(scale) + ", row-permutation " + num(perm_cfs) + " (cfs) " +
                    num(perm_gd) + " (gd), right-orthogonal " + num(orth)};
}

Verdict bound_check()
{
    std::mt19937_64 rng(9006);
    std::size_t violations = 0, oracle_violations = 0;
    for (int k = 0; k < 200; ++k) {
        const auto r = static_cast<Eigen::Index>(pick(rng, 1, 10));
        const auto d = static_cast<Eigen::Index>(pick(rng, 1, 10));
        const MatrixXd tau = oracle::random_matrix(r, d, rng);
        const MatrixXd delta = oracle::random_matrix(r, d, rng);
        std::vector<VectorXd> xs;
        const std::size_t n = pick(rng, 1, 20);
        for (std::size_t s = 0; s < n; ++s) xs.push_back(oracle::random_vector(d, rng));
        if (!check_theorem1(tau, delta, xs).satisfied) ++violations;

        // Independent evaluation with minimum-norm least-squares coefficients.
        const Eigen::JacobiSVD<MatrixXd> svd(tau.transpose(), Eigen::ComputeThinU | Eigen::ComputeThinV);
        const double dt = oracle::sum_sq(oracle::matmul(delta, oracle::transpose(tau)));
        const double dd = oracle::sum_sq(delta);
        double lhs = 0.0, rhs = 0.0;
        for (const auto& x : xs) {
            const VectorXd alpha = svd.solve(x);
            const VectorXd eps = x - tau.transpose() * alpha;
            lhs += oracle::sum_sq(oracle::matmul(delta, x)) / static_cast<double>(n);
            rhs += (alpha.squaredNorm() + 1) * (dt + dd * eps.squaredNorm()) / static_cast<double>(n);
        }
        if (lhs > rhs + kBoundSlack) ++oracle_violations;
    }
    return {violations == 0 && oracle_violations == 0,
            std::to_string(violations) + " violations, " + std::to_string(oracle_violations) +
                " in independent recomputation"};
}

Verdict subspace_properties()
{
    std::ifstream f(std::string(WUDI_FIXTURES_DIR) + "/lemma1_threshold.json");
    if (!f) return {false, "threshold file missing"};
    const double threshold = nlohmann::json::parse(f).at("threshold").get<double>();
    const synth::FixtureOptions opts;
    std::vector<double> drift;
    std::size_t holds = 0;
    for (std::uint64_t s = 0; s < 20; ++s) {
        const synth::SeedStudy st = synth::study_seed(s, opts);
        drift.push_back(st.consistency.delta_direction);
        if (st.prop1.median_true < st.prop1.median_random) ++holds;
    }
    std::sort(drift.begin(), drift.end());
    const double med = 0.5 * (drift[9] + drift[10]);
    const bool ok = med < threshold && holds >= 18;
    return {ok, "(a) median ΔDirection " + num(med) + " < " + num(threshold) + ", (b) " +
                    std::to_string(holds) + "/20 seeds"};
}

Verdict interference_reduction()
{
    std::size_t vs_ta = 0, vs_avg = 0;
    for (std::uint64_t s = 0; s < 20; ++s) {
        const synth::MergeFixture fx = synth::make_merge_fixture(s);
        auto final_error = [&](MergeMethod m) {
            MergeConfig cfg = synth::fixture_merge_config(m);
            cfg.lambda = 1.0;
            const InterferenceReport rep =
                synth::fixture_interference(fx, merge(fx.pretrained, fx.experts, cfg).merged);
            return rep.mean_at(rep.depths() - 1);
        };
        const double w = final_error(MergeMethod::WudiGd);
        if (w < final_error(MergeMethod::TaskArithmetic)) ++vs_ta;
        if (w < final_error(MergeMethod::Average)) ++vs_avg;
    }
    return {vs_ta >= 18 && vs_avg >= 18, "beats task arithmetic in " + std::to_string(vs_ta) +
                                             "/20, averaging in " + std::to_string(vs_avg) + "/20"};
}

Checkpoint stored_as(Checkpoint c, DType d)
{
    for (auto& [name, t] : c.tensors) {
        t.dtype = d;
        t = round_to_dtype(t);
    }
    return parse_checkpoint(serialize_checkpoint(c));
}

Verdict single_expert_identity()
{
    const synth::MergeFixture fx = synth::make_merge_fixture(7, {1});
    std::size_t exact = 0, total = 0;
    // Storage types narrower than the double-precision arithmetic.
    for (DType d : {DType::F32, DType::F16, DType::BF16}) {
        const Checkpoint pre = stored_as(fx.pretrained, d);
        const Checkpoint expert = stored_as(fx.experts.front(), d);
        for (MergeMethod m : {MergeMethod::WudiGd, MergeMethod::WudiCfs, MergeMethod::Average,
                              MergeMethod::TaskArithmetic}) {
            MergeConfig cfg = synth::fixture_merge_config(m);
            cfg.lambda = 1.0;
            cfg.epsilon = 1.0;
            const Checkpoint merged = parse_checkpoint(serialize_checkpoint(merge(pre, {expert}, cfg).merged));
            ++total;
            bool same = true;
            for (const char* name : {synth::kLayer1, synth::kLayer2}) {
                const auto& a = merged.at(name).values;
                const auto& b = expert.at(name).values;
                same = same && a.size() == b.size() &&
                       std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
            }
            if (same) ++exact;
        }
    }
    return {exact == total, std::to_string(exact) + "/" + std::to_string(total) +
                                " method/dtype pairs bit-exact"};
}

std::string read_bytes(const fs::path& p)
{
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

Verdict thread_determinism(const std::string& binary)
{
    const fs::path dir = fs::temp_directory_path() / "wudi_acceptance_threads";
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::mt19937_64 rng(9010);
    Checkpoint pre;
    std::vector<Checkpoint> experts(3);
    for (int l = 0; l < 12; ++l) {
        const std::string name = "blocks." + std::to_string(l) + ".mlp.weight";
        const MatrixXd w = oracle::random_matrix(8, 12, rng);
        pre.tensors.emplace(name, Tensor::from_matrix(w, DType::F32));
        for (auto& e : experts) {
            e.tensors.emplace(name, Tensor::from_matrix(w + oracle::random_matrix(8, 12, rng, 0.05), DType::F32));
        }
    }
    save_checkpoint(pre, dir / "pre.safetensors");
    std::string cmd = "\"" + binary + "\" merge --pretrained \"" + (dir / "pre.safetensors").string() + "\"";
    for (std::size_t i = 0; i < experts.size(); ++i) {
        const fs::path p = dir / ("e" + std::to_string(i) + ".safetensors");
        save_checkpoint(experts[i], p);
        cmd += " --expert \"" + p.string() + "\"";
    }
    cmd += " --method wudi-gd --steps 300 --lr 1e-3 --no-timing";
    std::vector<std::string> outputs;
    for (const char* threads : {"1", "8"}) {
        const fs::path out = dir / (std::string("m") + threads + ".safetensors");
        const fs::path rep = dir / (std::string("r") + threads + ".json");
        const std::string full = cmd + " --threads " + threads + " --out \"" + out.string() +
                                 "\" --report \"" + rep.string() + "\" 2>/dev/null";
        if (std::system(full.c_str()) != 0) {
            fs::remove_all(dir);
            return {false, "merge with --threads " + std::string(threads) + " failed"};
        }
        outputs.push_back(read_bytes(out));
        outputs.push_back(read_bytes(rep));
    }
    fs::remove_all(dir);
    const bool ok = !outputs[0].empty() && outputs[0] == outputs[2] && outputs[1] == outputs[3];
    return {ok, ok ? "checkpoints and reports byte-identical" : "outputs differ"};
}

// IEEE binary16 decoded from its fields.
double decode_half(std::uint16_t h)
{
    const int exponent = (h >> 10) & 0x1f;
    const int mantissa = h & 0x3ff;
    double v = exponent == 0 ? std::ldexp(mantissa, -24) : std::ldexp(1024 + mantissa, exponent - 25);
    return (h >> 15) != 0 ? -v : v;
}

Verdict checkpoint_io()
{
    std::mt19937_64 rng(9011);
    bool exact = true;
    for (DType d : {DType::F32, DType::F64}) {
        Checkpoint c;
        for (int i = 0; i < 6; ++i) {
            c.tensors.emplace("t" + std::to_string(i),
                              round_to_dtype(Tensor::from_matrix(
                                  oracle::random_matrix(static_cast<Eigen::Index>(pick(rng, 1, 9)),
                                                        static_cast<Eigen::Index>(pick(rng, 1, 9)), rng),
                                  d)));
        }
        const std::string bytes = serialize_checkpoint(c);
        const Checkpoint back = parse_checkpoint(bytes);
        exact = exact && serialize_checkpoint(back) == bytes;
        for (const auto& [name, t] : c.tensors) {
            exact = exact && std::memcmp(back.at(name).values.data(), t.values.data(),
                                         t.values.size() * sizeof(double)) == 0;
        }
    }
    std::size_t finite = 0, bad = 0;
    for (std::uint32_t bits = 0; bits < 0x10000; ++bits) {
        if (((bits >> 10) & 0x1f) == 0x1f) continue;
        ++finite;
        const auto h = static_cast<std::uint16_t>(bits);
        const double v = from_f16_bits(h);
        if (v != decode_half(h) || std::signbit(v) != ((bits >> 15) != 0) || to_f16_bits(v) != h) ++bad;
    }
    return {exact && bad == 0 && finite == 63488,
            std::string(exact ? "f32/f64 bit-exact" : "f32/f64 mismatch") + ", " +
                std::to_string(finite - bad) + "/" + std::to_string(finite) + " finite f16 patterns"};
}

}  // namespace

int main(int argc, char** argv)
{
    if (argc < 2) {
        std::cerr << "usage: acceptance <path-to-wudi>\n";
        return 2;
    }
    const std::string binary = argv[1];
    struct Criterion {
        int id;
        const char* name;
        double limit;  // seconds, 0 when unbounded
        std::function<Verdict()> run;
    };
    const std::vector<Criterion> criteria{
        {1, "gradient correctness", 10, gradient_correctness},
        {2, "closed-form optimality", 5, closed_form_optimality},
        {3, "hand-derived oracle instances", 0, hand_oracles},
        {4, "GD-CFS agreement", 30, gd_cfs_agreement},
        {5, "equivariances", 0, equivariances},
        {6, "interference bound", 10, bound_check},
        {7, "input consistency and subspace direction", 60, subspace_properties},
        {8, "interference reduction", 120, interference_reduction},
        {9, "single-expert identity", 0, single_expert_identity},
        {10, "determinism across thread counts", 0, [&] { return thread_determinism(binary); }},
        {11, "checkpoint I/O", 0, checkpoint_io},
    };
    int failures = 0;
    for (const auto& c : criteria) {
        const auto start = std::chrono::steady_clock::now();
        Verdict v;
        try {
            v = c.run();
        } catch (const std::exception& e) {
            v = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (c.limit > 0 && secs >= c.limit) {
            v.passed = false;
            v.detail += ", over the " + num(c.limit) + " s limit";
        }
        if (!v.passed) ++failures;
        std::cout << (v.passed ? "PASS" : "FAIL") << " criterion " << c.id << " (" << c.name
                  << "): " << v.detail << " [" << num(secs) << " s]\n";
    }
    std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed")
              << "\n";
    return failures == 0 ? 0 : 1;
}
