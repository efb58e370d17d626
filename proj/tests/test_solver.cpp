#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracles.hpp"
#include "wudi/errors.hpp"
#include "wudi/solver.hpp"

using namespace wudi;

namespace {

MatrixXd row(double a, double b)
{
    MatrixXd m(1, 2);
    m << a, b;
    return m;
}

std::vector<MatrixXd> random_taus(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, std::size_t n)
{
    std::vector<MatrixXd> t;
    for (std::size_t i = 0; i < n; ++i) t.push_back(oracle::random_matrix(r, c, rng));
    return t;
}

}  // namespace

TEST_CASE("loss: examples")
{
    CHECK(loss(make_problem<double>({row(3, 1)}), row(3, 1)) == 0.0);
    CHECK(loss(make_problem<double>({row(1, 0), row(0, 1)}), row(1, 1)) == 0.0);
    CHECK(loss(make_problem<double>({row(1, 0), row(-1, 0)}, false), row(0, 0)) == 2.0);
    CHECK_THROWS_AS(loss(make_problem<double>({row(1, 0)}), MatrixXd(MatrixXd::Zero(2, 2))), DimensionError);
}

TEST_CASE("loss: matches the naive oracle with balanced weights")
{
    std::mt19937_64 rng(1);
    for (int k = 0; k < 20; ++k) {
        const auto taus = random_taus(rng, 3, 5, 1 + k % 4);
        const MatrixXd t = oracle::random_matrix(3, 5, rng);
        const double ref = oracle::wudi_loss(taus, oracle::balanced_weights(taus), t);
        CHECK(std::abs(loss(make_problem(taus), t) - ref) <= 1e-12 * ref);
    }
}

TEST_CASE("make_problem: zero task vectors get zero weight")
{
    const LayerProblem<double> p = make_problem<double>({row(0, 0), row(2, 0)});
    CHECK(p.weights[0] == 0.0);
    CHECK(p.weights[1] == 0.25);
    CHECK(std::isfinite(loss(p, row(1, 1))));
}

TEST_CASE("loss_gradient: examples")
{
    std::mt19937_64 rng(2);
    const auto taus = random_taus(rng, 3, 4, 1);
    CHECK(oracle::max_abs(loss_gradient(make_problem(taus), taus[0])) <= 1e-12);

    // Δ orthogonal to the row span of τ₁.
    CHECK(loss_gradient(make_problem<double>({row(0, 1)}), MatrixXd(row(0, 1) + row(1, 0))) ==
          MatrixXd::Zero(1, 2));
}

TEST_CASE("loss_gradient: central differences on random instances")
{
    std::mt19937_64 rng(3);
    for (int k = 0; k < 30; ++k) {
        const auto taus = random_taus(rng, 3, 4, 1 + k % 5);
        const LayerProblem<double> p = make_problem(taus);
        const auto w = oracle::balanced_weights(taus);
        const MatrixXd t = oracle::random_matrix(3, 4, rng);
        const MatrixXd fd = oracle::central_difference(
            [&](const MatrixXd& x) { return oracle::wudi_loss(taus, w, x); }, t);
        CHECK(oracle::rel_diff(loss_gradient(p, t), fd) <= 1e-6);
    }
}

TEST_CASE("regularized objective: gradient and value")
{
    std::mt19937_64 rng(4);
    const auto taus = random_taus(rng, 2, 3, 3);
    const LayerProblem<double> p = make_problem(taus);
    const auto w = oracle::balanced_weights(taus);
    const double omega = 0.3;
    auto f = [&](const MatrixXd& x) {
        double s = oracle::wudi_loss(taus, w, x);
        for (std::size_t i = 0; i < taus.size(); ++i) s += w[i] * omega * oracle::sum_sq(x - taus[i]);
        return s;
    };
    const MatrixXd t = oracle::random_matrix(2, 3, rng);
    CHECK(std::abs(regularized_loss(p, t, omega) - f(t)) <= 1e-12 * f(t));
    CHECK(oracle::rel_diff(regularized_gradient(p, t, omega), oracle::central_difference(f, t)) <= 1e-6);
}

TEST_CASE("solve_gd: examples")
{
    std::mt19937_64 rng(5);
    const auto one = random_taus(rng, 3, 4, 1);
    const GdResult<double> r1 = solve_gd(make_problem(one), 50, 1e-2);
    CHECK(r1.tau_m == one[0]);

    const GdResult<double> r2 = solve_gd(make_problem<double>({row(1, 0), row(-1, 0)}, false), 20, 1e-2);
    CHECK(r2.tau_m == MatrixXd::Zero(1, 2));
    CHECK(r2.trace.losses.size() == 20);
    for (double l : r2.trace.losses) CHECK(l == 2.0);
    CHECK(r2.trace.final_loss == 2.0);

    CHECK_THROWS_AS(solve_gd(make_problem(one), 0, 1e-2), ConfigError);
    CHECK_THROWS_AS(solve_gd(make_problem(one), 1, 0.0), ConfigError);
}

TEST_CASE("solve_gd: divergence carries the iteration")
{
    std::vector<MatrixXd> taus{MatrixXd::Constant(2, 2, 1e200), MatrixXd::Constant(2, 2, -1e200)};
    LayerProblem<double> p = make_problem(taus, false);
    try {
        (void)solve_gd(p, 5, 1.0);
        FAIL("expected DivergenceError");
    } catch (const DivergenceError& e) {
        CHECK(e.iteration() == 0);
    }
}

TEST_CASE("solve_gd: final loss does not exceed initial loss")
{
    std::mt19937_64 rng(6);
    for (int k = 0; k < 20; ++k) {
        const auto taus = random_taus(rng, 4, 6, 3);
        const GdResult<double> r = solve_gd(make_problem(taus), 300, 1e-2);
        CHECK(r.trace.final_loss <= r.trace.initial_loss());
        CHECK(r.trace.losses.size() == 300);
    }
}

TEST_CASE("solve_closed_form: hand-derived instances")
{
    CHECK(oracle::max_abs(solve_closed_form(make_problem<double>({row(1, 0), row(0, 1)}), 0.0) - row(1, 1)) <= 1e-12);

    LayerProblem<double> p = make_problem<double>({row(1, 0), row(1, 1)}, false);
    p.weights = {1.0, 0.5};
    const NormalEquations<double> ne = normal_equations(p, 0.0);
    MatrixXd a(2, 2);
    a << 1.5, 0.5, 0.5, 0.5;
    CHECK(oracle::max_abs(ne.a - a) == 0.0);
    CHECK(oracle::max_abs(ne.b - row(2, 1)) == 0.0);
    CHECK(oracle::max_abs(solve_closed_form(p, 0.0) - row(1, 1)) <= 1e-12);
    CHECK(oracle::max_abs(oracle::solve_2x2(a, row(2, 1)) - row(1, 1)) <= 1e-12);

    try {
        (void)solve_closed_form(make_problem<double>({row(1, 0), row(-1, 0)}), 0.0);
        FAIL("expected SingularityError");
    } catch (const SingularityError& e) {
        CHECK(std::string(e.what()).find("--omega 1e-6") != std::string::npos);
    }
    CHECK_THROWS_AS(solve_closed_form(make_problem<double>({row(1, 0)}), -1.0), ConfigError);
    CHECK(solve_closed_form(make_problem<double>({row(0, 0), row(0, 0)}), 0.0) == MatrixXd::Zero(1, 2));
}

TEST_CASE("solve_closed_form: stationarity of the regularized objective")
{
    std::mt19937_64 rng(7);
    for (int k = 0; k < 30; ++k) {
        const auto taus = random_taus(rng, 3, 5, 2 + k % 3);
        const LayerProblem<double> p = make_problem(taus);
        for (double omega : {1e-6, 1e-2, 1.0}) {
            const MatrixXd t = solve_closed_form(p, omega);
            const double b = normal_equations(p, omega).b.norm();
            CHECK(regularized_gradient(p, t, omega).norm() <= 1e-8 * (1 + b));
        }
    }
}

TEST_CASE("solve_closed_form: monotone in omega")
{
    std::mt19937_64 rng(8);
    for (int k = 0; k < 20; ++k) {
        const LayerProblem<double> p = make_problem(random_taus(rng, 3, 5, 3));
        double prev = std::numeric_limits<double>::infinity();
        for (double omega : {0.0, 1e-4, 1e-2, 0.1, 1.0, 10.0, 100.0}) {
            const double n = solve_closed_form(p, omega).norm();
            CHECK(n <= prev * (1 + 1e-12));
            prev = n;
        }
    }
}

TEST_CASE("solve_closed_form: balanced equals unbalanced for equal norms")
{
    std::mt19937_64 rng(9);
    for (int k = 0; k < 20; ++k) {
        auto taus = random_taus(rng, 3, 4, 3);
        for (auto& t : taus) t /= t.norm();
        const MatrixXd b = solve_closed_form(make_problem(taus, true), 0.0);
        const MatrixXd u = solve_closed_form(make_problem(taus, false), 0.0);
        CHECK(oracle::rel_diff(b, u) <= 1e-8);
    }
}

TEST_CASE("solve_closed_form: disjoint row spans sum the task vectors")
{
    MatrixXd t1 = MatrixXd::Zero(2, 4), t2 = MatrixXd::Zero(2, 4);
    t1.leftCols(2) << 1, 2, 3, -1;
    t2.rightCols(2) << 0.5, 4, -2, 1;
    const LayerProblem<double> p = make_problem<double>({t1, t2});
    CHECK(oracle::max_abs(solve_closed_form(p, 0.0) - (t1 + t2)) <= 1e-12);
    CHECK(loss(p, MatrixXd(t1 + t2)) == 0.0);
}

TEST_CASE("equivariances")
{
    std::mt19937_64 rng(10);
    for (int k = 0; k < 20; ++k) {
        const auto taus = random_taus(rng, 4, 5, 3);
        const MatrixXd base = solve_closed_form(make_problem(taus), 0.0);
        const MatrixXd q = oracle::random_orthogonal(5, rng);
        Eigen::PermutationMatrix<Eigen::Dynamic> perm(4);
        perm.setIdentity();
        std::shuffle(perm.indices().data(), perm.indices().data() + 4, rng);
        std::vector<MatrixXd> scaled, permuted, rotated;
        for (const auto& t : taus) {
            scaled.push_back(2.5 * t);
            permuted.push_back(perm * t);
            rotated.push_back(oracle::matmul(t, q));
        }
        CHECK(oracle::rel_diff(solve_closed_form(make_problem(scaled), 0.0), 2.5 * base) <= 1e-9);
        CHECK(oracle::rel_diff(solve_closed_form(make_problem(permuted), 0.0), perm * base) <= 1e-12);
        CHECK(oracle::rel_diff(solve_closed_form(make_problem(rotated), 0.0), oracle::matmul(base, q)) <= 1e-8);
        const MatrixXd gd = solve_gd(make_problem(taus), 100, 1e-2).tau_m;
        CHECK(oracle::rel_diff(solve_gd(make_problem(permuted), 100, 1e-2).tau_m, perm * gd) <= 1e-6);
    }
}

TEST_CASE("baselines")
{
    CHECK(solve_baseline<double>({row(2, 0), row(0, 2)}, Baseline::Average) == row(1, 1));
    CHECK(oracle::max_abs(solve_baseline<double>({row(1, 0), row(0, 1)}, Baseline::TaskArithmetic, 0.3) -
                          row(0.3, 0.3)) == 0.0);
    CHECK(solve_baseline<double>({row(4, 5)}, Baseline::Average) == row(4, 5));
    CHECK_THROWS_AS(solve_baseline<double>({row(1, 0)}, Baseline::TaskArithmetic, 0.0), ConfigError);
}

TEST_CASE("ablation: examples")
{
    std::mt19937_64 rng(11);
    const auto taus = random_taus(rng, 5, 3, 2);
    const LayerProblem<double> p = make_problem(taus);
    const MatrixXd t = oracle::random_matrix(5, 3, rng);
    CHECK(std::abs(ablation_loss(p, t, AblationVariant::RowSubset, 1.0, 42) - loss(p, t)) <=
          1e-12 * loss(p, t));

    const LayerProblem<double> flat = make_problem<double>({MatrixXd::Constant(2, 3, 0.7)});
    const LayerProblem<double> g = make_ablation_problem(flat, AblationVariant::RandomGaussian, 1.0, 3);
    CHECK(g.guides[0] == MatrixXd::Constant(2, 3, 0.7));

    const LayerProblem<double> sub = make_ablation_problem(p, AblationVariant::RowSubset, 0.4, 5);
    CHECK(sub.guides[0].rows() == 2);
    CHECK(sub.weights == p.weights);
    CHECK_THROWS_AS(make_ablation_problem(p, AblationVariant::RowSubset, 0.1, 5), DegenerateError);
    CHECK_THROWS_AS(make_ablation_problem(p, AblationVariant::RowSubset, 0.0, 5), ConfigError);

    CHECK(ablation_loss(p, t, AblationVariant::RandomGaussian, 1.0, 9) ==
          ablation_loss(p, t, AblationVariant::RandomGaussian, 1.0, 9));
    CHECK(parse_ablation_variant(ablation_variant_name(AblationVariant::RowSubset)) == AblationVariant::RowSubset);
}

TEST_CASE("ablation: Gaussian guides match the entry mean and sample std")
{
    std::mt19937_64 rng(12);
    MatrixXd tau = oracle::random_matrix(40, 50, rng, 2.0);
    tau.array() += 0.5;
    const auto [mu, sigma] = entry_mean_std(tau);
    const LayerProblem<double> g =
        make_ablation_problem(make_problem<double>({tau}), AblationVariant::RandomGaussian, 1.0, 13);
    const auto [gm, gs] = entry_mean_std(g.guides[0]);
    CHECK(std::abs(gm - mu) < 0.1);
    CHECK(std::abs(gs - sigma) < 0.1);
}

TEST_CASE("ablation: golden value")
{
    MatrixXd t1(2, 3), t2(2, 3), m(2, 3);
    t1 << 0.3, -1.2, 0.8, 1.1, 0.4, -0.6;
    t2 << -0.5, 0.9, 0.2, 0.7, -1.3, 0.1;
    m << 0.1, 0.2, 0.3, 0.4, 0.5, 0.6;
    const LayerProblem<double> p = make_problem<double>({t1, t2});
    const double gaussian = ablation_loss(p, m, AblationVariant::RandomGaussian, 1.0, 2024);
    const double subset = ablation_loss(p, m, AblationVariant::RowSubset, 0.5, 2024);
    CHECK(gaussian == doctest::Approx(2.6209652139781952).epsilon(1e-12));
    CHECK(subset == doctest::Approx(2.590615306679136).epsilon(1e-12));

    // One kept row per task: the value must match one of the four row choices.
    bool matched = false;
    for (int k1 = 0; k1 < 2; ++k1) {
        for (int k2 = 0; k2 < 2; ++k2) {
            const double v = oracle::sum_sq(oracle::matmul(m - t1, oracle::transpose(t1.row(k1)))) /
                                 oracle::sum_sq(t1) +
                             oracle::sum_sq(oracle::matmul(m - t2, oracle::transpose(t2.row(k2)))) /
                                 oracle::sum_sq(t2);
            matched = matched || std::abs(v - subset) <= 1e-12 * v;
        }
    }
    CHECK(matched);
}

TEST_CASE("solve_layer honors the method")
{
    std::mt19937_64 rng(14);
    const auto taus = random_taus(rng, 3, 4, 2);
    MergeConfig cfg;
    cfg.method = MergeMethod::TaskArithmetic;
    cfg.lambda = 0.3;
    LayerReport rep;
    CHECK(oracle::max_abs(solve_layer(taus, cfg, &rep) - 0.3 * (taus[0] + taus[1])) <= 1e-15);
    CHECK(rep.rows == 3);
    CHECK(rep.cols == 4);
    CHECK(rep.loss_trace.empty());
    cfg.method = MergeMethod::WudiGd;
    cfg.steps = 7;
    solve_layer(taus, cfg, &rep);
    CHECK(rep.loss_trace.size() == 7);
}

TEST_CASE("merge: one expert reproduces it with every method")
{
    std::mt19937_64 rng(15);
    Checkpoint pre, exp;
    for (const char* name : {"a.weight", "b.weight"}) {
        const MatrixXd w = oracle::random_matrix(4, 5, rng);
        pre.tensors.emplace(name, round_to_dtype(Tensor::from_matrix(w, DType::F32)));
        exp.tensors.emplace(name, round_to_dtype(Tensor::from_matrix(w + 0.1 * oracle::random_matrix(4, 5, rng), DType::F32)));
    }
    for (auto m : {MergeMethod::WudiGd, MergeMethod::WudiCfs, MergeMethod::Average, MergeMethod::TaskArithmetic}) {
        MergeConfig cfg;
        cfg.method = m;
        cfg.lambda = 1.0;
        const Checkpoint merged = parse_checkpoint(serialize_checkpoint(merge(pre, {exp}, cfg).merged));
        CHECK(serialize_checkpoint(merged) == serialize_checkpoint(exp));
    }
}

TEST_CASE("merge: report, errors and threads")
{
    std::mt19937_64 rng(16);
    Checkpoint pre;
    std::vector<Checkpoint> experts(2);
    for (int l = 0; l < 6; ++l) {
        const std::string name = "layer" + std::to_string(l) + ".weight";
        const MatrixXd w = oracle::random_matrix(3, 4, rng);
        pre.tensors.emplace(name, Tensor::from_matrix(w, DType::F64));
        for (auto& e : experts) e.tensors.emplace(name, Tensor::from_matrix(w + oracle::random_matrix(3, 4, rng), DType::F64));
    }
    pre.tensors.emplace("norm", Tensor{DType::F64, {2}, {1, 1}});
    for (auto& e : experts) e.tensors.emplace("norm", Tensor{DType::F64, {2}, {2, 2}});

    MergeConfig cfg;
    cfg.steps = 20;
    const MergeResult r1 = merge(pre, experts, cfg);
    REQUIRE(r1.report.layers.size() == 6);
    CHECK(r1.report.layers.front().name == "layer0.weight");
    CHECK(r1.report.excluded.size() == 1);
    CHECK(r1.merged.at("norm").values == std::vector<double>{1, 1});
    cfg.threads = 4;
    const MergeResult r4 = merge(pre, experts, cfg);
    CHECK(serialize_checkpoint(r1.merged) == serialize_checkpoint(r4.merged));

    // A rank-deficient layer: both experts move along the same row.
    Checkpoint p2, e1, e2;
    p2.tensors.emplace("z.weight", Tensor{DType::F64, {2, 2}, {0, 0, 0, 0}});
    e1.tensors.emplace("z.weight", Tensor{DType::F64, {2, 2}, {1, 0, 0, 0}});
    e2.tensors.emplace("z.weight", Tensor{DType::F64, {2, 2}, {-1, 0, 0, 0}});
    MergeConfig cfs;
    cfs.method = MergeMethod::WudiCfs;
    try {
        merge(p2, {e1, e2}, cfs);
        FAIL("expected SingularityError");
    } catch (const SingularityError& e) {
        CHECK(std::string(e.what()).find("layer 'z.weight'") != std::string::npos);
    }
    cfs.omega = 1e-6;
    CHECK_NOTHROW(merge(p2, {e1, e2}, cfs));

    Checkpoint bad = e1;
    bad.tensors.emplace("extra", Tensor{DType::F64, {1}, {0}});
    CHECK_THROWS_AS(merge(p2, {bad}, cfs), IntegrityError);
}
