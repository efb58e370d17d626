#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include <Eigen/Dense>

#include "wudi/errors.hpp"

namespace wudi {

// Row-major so that a row is one output neuron of a linear layer.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using MatrixXd = Matrix<double>;
using VectorXd = Vector<double>;

inline std::string shape_string(Eigen::Index rows, Eigen::Index cols)
{
    return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
}

template <typename Derived>
std::string shape_string(const Eigen::MatrixBase<Derived>& m)
{
    return shape_string(m.rows(), m.cols());
}

template <typename DerivedA, typename DerivedB>
void require_same_shape(const Eigen::MatrixBase<DerivedA>& a,
                        const Eigen::MatrixBase<DerivedB>& b, const char* what)
{
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw DimensionError(std::string(what) + ": shape mismatch " + shape_string(a) +
                             " vs " + shape_string(b));
    }
}

template <typename DerivedA, typename DerivedB>
Matrix<typename DerivedA::Scalar> matmul(const Eigen::MatrixBase<DerivedA>& a,
                                         const Eigen::MatrixBase<DerivedB>& b)
{
    if (a.cols() != b.rows()) {
        throw DimensionError("matmul: cannot multiply " + shape_string(a) + " by " +
                             shape_string(b));
    }
    return a * b;
}

/// Sum of squared entries.
template <typename Derived>
typename Derived::Scalar frobenius_norm_sq(const Eigen::MatrixBase<Derived>& a)
{
    return a.squaredNorm();
}

/// Lower Cholesky factor L with a = L Lᵀ. Only the lower triangle of `a` is read.
/// Throws SingularityError carrying the index of the first pivot that is not
/// safely positive.
template <typename Derived>
Matrix<typename Derived::Scalar> cholesky_lower(const Eigen::MatrixBase<Derived>& a)
{
    using Scalar = typename Derived::Scalar;
    if (a.rows() != a.cols()) {
        throw DimensionError("cholesky: matrix is not square " + shape_string(a));
    }
    const Eigen::Index n = a.rows();
    const Scalar max_diag = n > 0 ? a.diagonal().cwiseAbs().maxCoeff() : Scalar(0);
    const Scalar floor = max_diag * Scalar(n) * std::numeric_limits<Scalar>::epsilon();

    Matrix<Scalar> lower = Matrix<Scalar>::Zero(n, n);
    for (Eigen::Index j = 0; j < n; ++j) {
        const Scalar d = a(j, j) - lower.row(j).head(j).squaredNorm();
        if (!(d > floor)) {
            throw SingularityError("cholesky: non-positive pivot " + std::to_string(j) +
                                       " (value " + std::to_string(d) + ")",
                                   static_cast<std::size_t>(j));
        }
        lower(j, j) = std::sqrt(d);
        for (Eigen::Index i = j + 1; i < n; ++i) {
            const Scalar s = lower.row(j).head(j).dot(lower.row(i).head(j));
            lower(i, j) = (a(i, j) - s) / lower(j, j);
        }
    }
    return lower;
}

/// Solves X·a = b for X where `a` is symmetric positive definite.
///
/// Equivalent to b·a⁻¹. Each row of `b` is solved independently against the
/// Cholesky factor of `a` by forward and back substitution.
template <typename DerivedA, typename DerivedB>
Matrix<typename DerivedA::Scalar> solve_spd(const Eigen::MatrixBase<DerivedA>& a,
                                            const Eigen::MatrixBase<DerivedB>& b)
{
    using Scalar = typename DerivedA::Scalar;
    if (a.rows() != a.cols()) {
        throw DimensionError("solve_spd: matrix is not square " + shape_string(a));
    }
    if (b.cols() != a.rows()) {
        throw DimensionError("solve_spd: right-hand side " + shape_string(b) +
                             " does not conform to " + shape_string(a));
    }
    const Scalar scale = std::max(Scalar(1), a.cwiseAbs().maxCoeff());
    if ((a - a.transpose()).cwiseAbs().maxCoeff() > Scalar(1e-8) * scale) {
        throw Error("solve_spd: matrix is not symmetric");
    }

    const Matrix<Scalar> lower = cholesky_lower(a);
    const Eigen::Index n = a.rows();
    Matrix<Scalar> x(b.rows(), n);
    Vector<Scalar> y(n);
    for (Eigen::Index r = 0; r < b.rows(); ++r) {
        for (Eigen::Index i = 0; i < n; ++i) {
            y(i) = (b(r, i) - lower.row(i).head(i).dot(y.head(i))) / lower(i, i);
        }
        for (Eigen::Index i = n - 1; i >= 0; --i) {
            const Eigen::Index tail = n - i - 1;
            x(r, i) = (y(i) - lower.col(i).tail(tail).dot(x.row(r).tail(tail).transpose())) /
                      lower(i, i);
        }
    }
    return x;
}

/// Cosine similarity clamped to [-1, 1].
template <typename DerivedU, typename DerivedV>
typename DerivedU::Scalar cosine(const Eigen::MatrixBase<DerivedU>& u,
                                 const Eigen::MatrixBase<DerivedV>& v)
{
    using Scalar = typename DerivedU::Scalar;
    if (u.size() != v.size()) {
        throw DimensionError("cosine: length mismatch " + std::to_string(u.size()) + " vs " +
                             std::to_string(v.size()));
    }
    const Scalar nu = u.norm();
    const Scalar nv = v.norm();
    if (!(nu > Scalar(0)) || !(nv > Scalar(0))) {
        throw DegenerateError("cosine: zero-norm vector");
    }
    const Scalar c = u.dot(v) / (nu * nv);
    return std::clamp(c, Scalar(-1), Scalar(1));
}

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& a)
{
    return a.allFinite();
}

}  // namespace wudi
