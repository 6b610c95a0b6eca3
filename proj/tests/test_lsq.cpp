#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "nanmerge/lsq.hpp"
#include "nanmerge/rng.hpp"

using namespace nanmerge;
using lsq::Matrix;

namespace {

// Test-only oracle: Gauss-Jordan inverse with partial pivoting. Kept
// independent of the Cholesky path the library uses.
Matrix gauss_jordan_inverse(Matrix a) {
    const Eigen::Index n = a.rows();
    Matrix inv = Matrix::Identity(n, n);
    for (Eigen::Index col = 0; col < n; ++col) {
        Eigen::Index pivot = col;
        for (Eigen::Index r = col + 1; r < n; ++r)
            if (std::abs(a(r, col)) > std::abs(a(pivot, col))) pivot = r;
        REQUIRE(std::abs(a(pivot, col)) > 0.0);
        a.row(col).swap(a.row(pivot));
        inv.row(col).swap(inv.row(pivot));
        double p = a(col, col);
        a.row(col) /= p;
        inv.row(col) /= p;
        for (Eigen::Index r = 0; r < n; ++r) {
            if (r == col) continue;
            double f = a(r, col);
            a.row(r) -= f * a.row(col);
            inv.row(r) -= f * inv.row(col);
        }
    }
    return inv;
}

Matrix random_matrix(GaussianRng& rng, Eigen::Index rows, Eigen::Index cols) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.normal();
    return m;
}

Matrix random_spd(GaussianRng& rng, Eigen::Index d) {
    Matrix x = random_matrix(rng, d + 4, d);
    return x.transpose() * x;
}

}  // namespace

TEST_CASE("make_task caches gram and moment") {
    SUBCASE("identity inputs") {
        Matrix i2 = Matrix::Identity(2, 2);
        lsq::LsqTask t = lsq::make_task(i2, i2);
        CHECK((t.A - i2).norm() == 0.0);
        CHECK((t.b - i2).norm() == 0.0);
        CHECK(t.n == 2);
    }
    SUBCASE("hand arithmetic") {
        Matrix x(1, 1), y(1, 1);
        x << 2.0;
        y << 6.0;
        lsq::LsqTask t = lsq::make_task(x, y);
        CHECK(t.A(0, 0) == 4.0);
        CHECK(t.b(0, 0) == 12.0);
    }
    SUBCASE("inconsistent row counts") {
        CHECK_THROWS_AS(lsq::make_task(Matrix::Zero(3, 2), Matrix::Zero(4, 1)),
                        DimensionMismatch);
    }
}

TEST_CASE("task invariants hold for generated tasks") {
    for (uint64_t seed : {1ull, 2ull, 3ull}) {
        lsq::LsqTask t = lsq::generate_isotropic_task(seed, 20, 5, 2, false);
        CHECK((t.A - t.A.transpose()).cwiseAbs().maxCoeff() <= 1e-10);
        CHECK((t.A - t.X.transpose() * t.X).cwiseAbs().maxCoeff() <= 1e-10);
        CHECK((t.b - t.X.transpose() * t.Y).cwiseAbs().maxCoeff() <= 1e-10);
        Eigen::LLT<Matrix> llt(t.A);
        CHECK(llt.info() == Eigen::Success);
    }
}

TEST_CASE("solve_individual") {
    SUBCASE("identity design matrix returns Y") {
        GaussianRng rng(5);
        Matrix y = random_matrix(rng, 4, 3);
        lsq::LsqTask t = lsq::make_task(Matrix::Identity(4, 4), y);
        CHECK((lsq::solve_individual(t).W - y).cwiseAbs().maxCoeff() <= 1e-12);
    }
    SUBCASE("hand arithmetic") {
        Matrix x(1, 1), y(1, 1);
        x << 2.0;
        y << 6.0;
        CHECK(lsq::solve_individual(lsq::make_task(x, y)).W(0, 0) ==
              doctest::Approx(3.0).epsilon(1e-14));
    }
    SUBCASE("rank-deficient gram throws") {
        Matrix x(3, 2);
        x << 1, 0, 2, 0, 3, 0;  // second column zero
        lsq::LsqTask t = lsq::make_task(x, Matrix::Ones(3, 1));
        CHECK_THROWS_AS(lsq::solve_individual(t, 0.0), SingularGram);
    }
}

TEST_CASE("solve_joint") {
    GaussianRng rng(7);
    SUBCASE("duplicated task equals individual") {
        lsq::LsqTask t = lsq::generate_isotropic_task(11, 12, 4, 2, false);
        auto joint = lsq::solve_joint({t, t});
        auto solo = lsq::solve_individual(t);
        CHECK((joint.W - solo.W).norm() <= 1e-10 * (1.0 + solo.W.norm()));
    }
    SUBCASE("single task degenerates to individual") {
        lsq::LsqTask t = lsq::generate_isotropic_task(12, 10, 3, 1, false);
        CHECK((lsq::solve_joint({t}).W - lsq::solve_individual(t).W).norm() <= 1e-12);
    }
    SUBCASE("matches brute-force stacked solve") {
        // oracle: stack X1,X2 row-wise, invert the stacked normal equations
        // with Gauss-Jordan
        lsq::LsqTask t1 = lsq::generate_isotropic_task(21, 9, 4, 2, false);
        lsq::LsqTask t2 = lsq::generate_isotropic_task(22, 14, 4, 2, false);
        Matrix xs(t1.n + t2.n, 4), ys(t1.n + t2.n, 2);
        xs << t1.X, t2.X;
        ys << t1.Y, t2.Y;
        Matrix expect = gauss_jordan_inverse(xs.transpose() * xs) * (xs.transpose() * ys);
        Matrix got = lsq::solve_joint({t1, t2}).W;
        CHECK((got - expect).norm() <= 1e-8 * (1.0 + expect.norm()));
    }
    SUBCASE("tasks must agree on d") {
        lsq::LsqTask t1 = lsq::generate_isotropic_task(1, 8, 3, 1, false);
        lsq::LsqTask t2 = lsq::generate_isotropic_task(2, 8, 4, 1, false);
        CHECK_THROWS_AS(lsq::solve_joint({t1, t2}), ShapeMismatch);
    }
}

TEST_CASE("matrix_coefficients") {
    SUBCASE("equal grams give I/2") {
        GaussianRng rng(31);
        Matrix a = random_spd(rng, 3);
        lsq::LsqTask t1, t2;
        t1.A = t2.A = a;
        t1.b = t2.b = Matrix::Zero(3, 1);
        auto mc = lsq::matrix_coefficients({t1, t2});
        CHECK((mc.omegas[0] - 0.5 * Matrix::Identity(3, 3)).cwiseAbs().maxCoeff() <= 1e-10);
        CHECK((mc.omegas[1] - 0.5 * Matrix::Identity(3, 3)).cwiseAbs().maxCoeff() <= 1e-10);
    }
    SUBCASE("diagonal hand arithmetic: 2I and I") {
        lsq::LsqTask t1, t2;
        t1.A = 2.0 * Matrix::Identity(2, 2);
        t2.A = Matrix::Identity(2, 2);
        t1.b = t2.b = Matrix::Zero(2, 1);
        auto mc = lsq::matrix_coefficients({t1, t2});
        CHECK((mc.omegas[0] - (2.0 / 3.0) * Matrix::Identity(2, 2)).cwiseAbs().maxCoeff() <=
              1e-12);
        CHECK((mc.omegas[1] - (1.0 / 3.0) * Matrix::Identity(2, 2)).cwiseAbs().maxCoeff() <=
              1e-12);
    }
    SUBCASE("partition of identity for random SPD groups, with and without ridge") {
        GaussianRng rng(33);
        for (int trial = 0; trial < 20; ++trial) {
            int k = 2 + int(rng.raw() % 4);
            std::vector<lsq::LsqTask> tasks(static_cast<std::size_t>(k));
            for (auto& t : tasks) {
                t.A = random_spd(rng, 4);
                t.b = Matrix::Zero(4, 1);
            }
            for (double ridge : {0.0, 1e-3}) {
                auto mc = lsq::matrix_coefficients(tasks, ridge);
                Matrix sum = Matrix::Zero(4, 4);
                for (const auto& o : mc.omegas) sum += o;
                CHECK((sum - Matrix::Identity(4, 4)).cwiseAbs().maxCoeff() <= 1e-8);
            }
        }
    }
    SUBCASE("two-task formula matches explicit-inverse oracle") {
        GaussianRng rng(35);
        for (int trial = 0; trial < 50; ++trial) {
            Eigen::Index d = 1 + Eigen::Index(rng.raw() % 8);
            lsq::LsqTask t1, t2;
            t1.A = random_spd(rng, d);
            t2.A = random_spd(rng, d);
            t1.b = t2.b = Matrix::Zero(d, 1);
            auto mc = lsq::matrix_coefficients({t1, t2});
            Matrix oracle = gauss_jordan_inverse(t1.A + t2.A) * t1.A;
            CHECK((mc.omegas[0] - oracle).cwiseAbs().maxCoeff() <= 1e-8);
        }
    }
}

TEST_CASE("merge_solutions") {
    GaussianRng rng(41);
    Matrix w1 = random_matrix(rng, 3, 2), w2 = random_matrix(rng, 3, 2);
    SUBCASE("selector coefficients") {
        lsq::MatrixCoefficients mc{{Matrix::Identity(3, 3), Matrix::Zero(3, 3)}};
        CHECK((lsq::merge_solutions({{w1}, {w2}}, mc).W - w1).norm() == 0.0);
    }
    SUBCASE("averaging identical solutions") {
        lsq::MatrixCoefficients mc{
            {0.5 * Matrix::Identity(3, 3), 0.5 * Matrix::Identity(3, 3)}};
        CHECK((lsq::merge_solutions({{w1}, {w1}}, mc).W - w1).cwiseAbs().maxCoeff() <= 1e-15);
    }
    SUBCASE("reconstructs the joint solution") {
        lsq::LsqTask t1 = lsq::generate_isotropic_task(51, 10, 4, 2, false);
        lsq::LsqTask t2 = lsq::generate_isotropic_task(52, 13, 4, 2, false);
        auto merged = lsq::merge_solutions(
            {lsq::solve_individual(t1), lsq::solve_individual(t2)},
            lsq::matrix_coefficients({t1, t2}));
        auto joint = lsq::solve_joint({t1, t2});
        CHECK((merged.W - joint.W).norm() <= 1e-8 * (1.0 + joint.W.norm()));
    }
}

TEST_CASE("joint objective optimality under perturbation") {
    GaussianRng rng(61);
    lsq::LsqTask t1 = lsq::generate_isotropic_task(61, 12, 5, 2, false);
    lsq::LsqTask t2 = lsq::generate_isotropic_task(62, 15, 5, 2, false);
    auto joint = lsq::solve_joint({t1, t2});
    auto objective = [&](const Matrix& w) {
        return (t1.X * w - t1.Y).squaredNorm() + (t2.X * w - t2.Y).squaredNorm();
    };
    double at_opt = objective(joint.W);
    for (int trial = 0; trial < 12; ++trial) {
        Matrix g = random_matrix(rng, 5, 2);
        CHECK(objective(joint.W + 1e-3 * g) >= at_opt);
    }
}

TEST_CASE("sample_weighted_merge") {
    Matrix w0 = Matrix::Zero(1, 1), w4 = Matrix::Constant(1, 1, 4.0);
    SUBCASE("equal everything") {
        Matrix w = Matrix::Constant(2, 2, 1.5);
        CHECK((lsq::sample_weighted_merge({{w}, {w}}, {5, 5}).W - w).norm() <= 1e-15);
    }
    SUBCASE("hand arithmetic 1:3") {
        CHECK(lsq::sample_weighted_merge({{w0}, {w4}}, {1, 3}).W(0, 0) ==
              doctest::Approx(3.0).epsilon(1e-15));
    }
    SUBCASE("single solution") {
        CHECK((lsq::sample_weighted_merge({{w4}}, {7}).W - w4).norm() == 0.0);
    }
    SUBCASE("empty input") {
        CHECK_THROWS_AS(lsq::sample_weighted_merge({}, {}), EmptyInput);
    }
}

TEST_CASE("generate_isotropic_task") {
    SUBCASE("normalized rows have unit norm") {
        lsq::LsqTask t = lsq::generate_isotropic_task(71, 30, 6, 1, true);
        for (Eigen::Index i = 0; i < t.n; ++i)
            CHECK(std::abs(t.X.row(i).norm() - 1.0) <= 1e-12);
    }
    SUBCASE("same seed is bitwise identical") {
        lsq::LsqTask a = lsq::generate_isotropic_task(72, 16, 4, 2, true);
        lsq::LsqTask b = lsq::generate_isotropic_task(72, 16, 4, 2, true);
        CHECK((a.A - b.A).cwiseAbs().maxCoeff() == 0.0);
        CHECK((a.Y - b.Y).cwiseAbs().maxCoeff() == 0.0);
    }
    SUBCASE("A/n approaches I/d as n grows") {
        const int d = 8;
        double prev = 1e300;
        int shrinks = 0;
        for (long n : {512L, 1024L, 2048L, 4096L}) {
            lsq::LsqTask t = lsq::generate_isotropic_task(73, n, d, 1, true);
            Matrix target = Matrix::Identity(d, d) / double(d);
            double err = (t.A / double(n) - target).cwiseAbs().maxCoeff();
            if (err < prev) ++shrinks;
            prev = err;
        }
        CHECK(shrinks >= 3);  // allow one non-monotone step, trend must hold
    }
}

TEST_CASE("isotropy_experiment") {
    SUBCASE("coeff_error shrinks from first to last schedule point") {
        auto report = lsq::isotropy_experiment(42, 8, 2, {256, 1024, 4096});
        REQUIRE(report.size() == 3);
        CHECK(report.back().coeff_error < report.front().coeff_error);
    }
    SUBCASE("identical tasks sit exactly at I/2") {
        lsq::LsqTask t = lsq::generate_isotropic_task(81, 64, 4, 1, true);
        auto mc = lsq::matrix_coefficients({t, t});
        CHECK((mc.omegas[0] - 0.5 * Matrix::Identity(4, 4)).cwiseAbs().maxCoeff() <= 1e-10);
    }
    SUBCASE("d=1 with unit-norm rows gives exact scalar n1/(n1+n2)") {
        Matrix x1 = Matrix::Ones(3, 1), x2 = Matrix::Ones(6, 1);
        x2(1, 0) = -1.0;  // rows are +-1, A is still the sample count
        lsq::LsqTask t1 = lsq::make_task(x1, Matrix::Zero(3, 1));
        lsq::LsqTask t2 = lsq::make_task(x2, Matrix::Zero(6, 1));
        auto mc = lsq::matrix_coefficients({t1, t2});
        CHECK(mc.omegas[0](0, 0) == doctest::Approx(3.0 / 9.0).epsilon(1e-14));
        CHECK(mc.omegas[1](0, 0) == doctest::Approx(6.0 / 9.0).epsilon(1e-14));
    }
    SUBCASE("schedule must be strictly increasing") {
        CHECK_THROWS_AS(lsq::isotropy_experiment(1, 4, 1, {256, 256}), ValidationError);
    }
}
