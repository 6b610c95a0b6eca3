#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <vector>

#include "nanmerge/errors.hpp"
#include "nanmerge/rng.hpp"

namespace nanmerge::lsq {

using Matrix = Eigen::MatrixXd;

/// One task's least-squares data with its cached normal-equation pieces
/// A = X^T X (Gram) and b = X^T Y (moment).
struct LsqTask {
    Matrix X;  // n x d
    Matrix Y;  // n x m
    Matrix A;  // d x d
    Matrix b;  // d x m
    Eigen::Index n = 0;

    Eigen::Index dim() const { return A.rows(); }
    Eigen::Index targets() const { return b.cols(); }
};

struct LsqSolution {
    Matrix W;  // d x m
};

/// Per-task d x d weighting matrices; sums to the identity.
struct MatrixCoefficients {
    std::vector<Matrix> omegas;
};

inline LsqTask make_task(const Matrix& X, const Matrix& Y) {
    if (X.rows() != Y.rows())
        throw DimensionMismatch("make_task: X has " + std::to_string(X.rows()) +
                                " rows, Y has " + std::to_string(Y.rows()));
    if (X.rows() < 1) throw DimensionMismatch("make_task: empty X");
    if (!X.allFinite() || !Y.allFinite())
        throw NonFiniteInput("make_task: non-finite input");
    LsqTask t;
    t.X = X;
    t.Y = Y;
    t.A = X.transpose() * X;
    t.b = X.transpose() * Y;
    t.n = X.rows();
    return t;
}

namespace detail {

/// SPD solve of (S + ridge I) W = B with escalating diagonal jitter before
/// giving up. Jitter starts at 1e-12 * trace(S)/d and grows x10, 3 attempts.
inline Matrix spd_solve(const Matrix& S, double ridge, const Matrix& B) {
    const Eigen::Index d = S.rows();
    Matrix M = S;
    if (ridge > 0.0) M.diagonal().array() += ridge;
    Eigen::LLT<Matrix> llt(M);
    if (llt.info() == Eigen::Success) {
        Matrix W = llt.solve(B);
        double resid = (M * W - B).norm();
        if (resid <= 1e-8 * (1.0 + B.norm())) return W;
    }
    // genuinely rank-deficient systems must not be rescued by jitter
    Eigen::SelfAdjointEigenSolver<Matrix> es(M);
    double lo = es.eigenvalues().minCoeff();
    double hi = es.eigenvalues().maxCoeff();
    if (lo <= 1e-12 * std::max(hi, 1.0))
        throw SingularGram("spd_solve: Gram matrix is rank-deficient (smallest pivot " +
                           std::to_string(lo) + ")");
    double jitter = 1e-12 * (std::abs(S.trace()) / double(d) + 1.0);
    for (int attempt = 0; attempt < 3; ++attempt, jitter *= 10.0) {
        Matrix Mj = M;
        Mj.diagonal().array() += jitter;
        Eigen::LLT<Matrix> lltj(Mj);
        if (lltj.info() != Eigen::Success) continue;
        Matrix W = lltj.solve(B);
        if ((M * W - B).norm() <= 1e-8 * (1.0 + B.norm())) return W;
    }
    throw SingularGram("spd_solve: Gram matrix is singular or too ill-conditioned");
}

}  // namespace detail

/// W = (A + ridge I)^-1 b.
inline LsqSolution solve_individual(const LsqTask& task, double ridge = 0.0) {
    if (ridge < 0.0) throw ValidationError("solve_individual: negative ridge");
    return {detail::spd_solve(task.A, ridge, task.b)};
}

namespace detail {

inline void check_consistent(const std::vector<LsqTask>& tasks) {
    if (tasks.empty()) throw EmptyInput("no tasks");
    for (const LsqTask& t : tasks) {
        if (t.dim() != tasks[0].dim() || t.targets() != tasks[0].targets())
            throw ShapeMismatch("tasks disagree on d or m");
    }
}

inline Matrix gram_sum(const std::vector<LsqTask>& tasks) {
    Matrix S = tasks[0].A;
    for (std::size_t i = 1; i < tasks.size(); ++i) S += tasks[i].A;
    return S;
}

}  // namespace detail

/// Joint solution over all tasks: W* = (sum A_i + ridge I)^-1 (sum b_i).
inline LsqSolution solve_joint(const std::vector<LsqTask>& tasks, double ridge = 0.0) {
    detail::check_consistent(tasks);
    Matrix bsum = tasks[0].b;
    for (std::size_t i = 1; i < tasks.size(); ++i) bsum += tasks[i].b;
    return {detail::spd_solve(detail::gram_sum(tasks), ridge, bsum)};
}

/// omega_i = (sum_j A_j + ridge I)^-1 (A_i + ridge/k I). The ridge is split
/// evenly across tasks so the omegas still sum to the identity.
inline MatrixCoefficients matrix_coefficients(const std::vector<LsqTask>& tasks,
                                              double ridge = 0.0) {
    detail::check_consistent(tasks);
    const double split = ridge / double(tasks.size());
    Matrix S = detail::gram_sum(tasks);
    MatrixCoefficients out;
    out.omegas.reserve(tasks.size());
    for (const LsqTask& t : tasks) {
        Matrix rhs = t.A;
        if (split > 0.0) rhs.diagonal().array() += split;
        out.omegas.push_back(detail::spd_solve(S, ridge, rhs));
    }
    return out;
}

/// W = sum_i omega_i * W_i, ascending index.
inline LsqSolution merge_solutions(const std::vector<LsqSolution>& solutions,
                                   const MatrixCoefficients& coeffs) {
    if (solutions.size() != coeffs.omegas.size())
        throw ShapeMismatch("merge_solutions: coefficient/solution count mismatch");
    if (solutions.empty()) throw EmptyInput("merge_solutions: no solutions");
    Matrix W = Matrix::Zero(solutions[0].W.rows(), solutions[0].W.cols());
    for (std::size_t i = 0; i < solutions.size(); ++i) {
        if (coeffs.omegas[i].cols() != solutions[i].W.rows())
            throw ShapeMismatch("merge_solutions: omega/solution dimension mismatch");
        W += coeffs.omegas[i] * solutions[i].W;
    }
    return {W};
}

/// Scalar sample-size weighting: W = sum_i (n_i / sum n) W_i.
inline LsqSolution sample_weighted_merge(const std::vector<LsqSolution>& solutions,
                                         const std::vector<long>& ns) {
    if (solutions.empty()) throw EmptyInput("sample_weighted_merge: no solutions");
    if (solutions.size() != ns.size())
        throw ShapeMismatch("sample_weighted_merge: count mismatch");
    double total = 0.0;
    for (long n : ns) {
        if (n <= 0) throw ValidationError("sample_weighted_merge: non-positive n");
        total += double(n);
    }
    Matrix W = Matrix::Zero(solutions[0].W.rows(), solutions[0].W.cols());
    for (std::size_t i = 0; i < solutions.size(); ++i)
        W += (double(ns[i]) / total) * solutions[i].W;
    return {W};
}

/// Synthetic task with spherical-Gaussian rows, optional unit-norm rows, and
/// Y = X W_true + noise at 0.01 relative scale. Bitwise reproducible for a
/// given (seed, n, d, m, normalize_rows).
inline LsqTask generate_isotropic_task(uint64_t seed, Eigen::Index n, Eigen::Index d,
                                       Eigen::Index m, bool normalize_rows) {
    if (n < 1 || d < 1 || m < 1)
        throw ValidationError("generate_isotropic_task: sizes must be >= 1");
    GaussianRng rng(seed);
    Matrix X(n, d);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < d; ++j) X(i, j) = rng.normal();
    if (normalize_rows) {
        for (Eigen::Index i = 0; i < n; ++i) {
            double norm = X.row(i).norm();
            if (norm == 0.0) X(i, 0) = norm = 1.0;  // measure-zero, but deterministic
            X.row(i) /= norm;
        }
    }
    Matrix W_true(d, m);
    for (Eigen::Index i = 0; i < d; ++i)
        for (Eigen::Index j = 0; j < m; ++j) W_true(i, j) = rng.normal();
    Matrix Y = X * W_true;
    const double noise_scale = 0.01 * Y.norm() / std::sqrt(double(n) * double(m));
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < m; ++j) Y(i, j) += noise_scale * rng.normal();
    return make_task(X, Y);
}

struct IsotropyPoint {
    long n;
    double coeff_error;  // max-entry |Omega_1 - (1/3) I|
};

/// Builds normalized task pairs of sizes (n, 2n) for each schedule point and
/// measures how far the first matrix coefficient is from its isotropic limit
/// n/(n+2n) = 1/3.
inline std::vector<IsotropyPoint> isotropy_experiment(uint64_t seed, Eigen::Index d,
                                                      Eigen::Index m,
                                                      const std::vector<long>& n_schedule) {
    for (std::size_t i = 1; i < n_schedule.size(); ++i)
        if (n_schedule[i] <= n_schedule[i - 1])
            throw ValidationError("isotropy_experiment: schedule must be strictly increasing");
    std::vector<IsotropyPoint> report;
    report.reserve(n_schedule.size());
    for (std::size_t i = 0; i < n_schedule.size(); ++i) {
        const long n = n_schedule[i];
        LsqTask t1 = generate_isotropic_task(derive_seed(seed, 2 * i), n, d, m, true);
        LsqTask t2 = generate_isotropic_task(derive_seed(seed, 2 * i + 1), 2 * n, d, m, true);
        MatrixCoefficients mc = matrix_coefficients({t1, t2}, 0.0);
        Matrix target = Matrix::Identity(d, d) / 3.0;
        double err = (mc.omegas[0] - target).cwiseAbs().maxCoeff();
        report.push_back({n, err});
    }
    return report;
}

}  // namespace nanmerge::lsq
