#pragma once

#include <algorithm>
#include <sstream>
#include <string>
#include <vector>

#include "nanmerge/lsq.hpp"
#include "nanmerge/report.hpp"
#include "nanmerge/rng.hpp"

namespace nanmerge::verify {

struct VerifyConfig {
    uint64_t seed = 42;
    std::vector<int> dims = {1, 4, 16};
    std::vector<int> task_counts = {2, 3, 5};
    std::vector<int> target_counts = {1, 3};
    int instances_per_combo = 20;
    std::vector<double> ridges = {0.0, 1e-3};
    std::vector<long> n_schedule = {256, 1024, 4096};
    int isotropy_d = 8;
    int isotropy_m = 2;
};

struct CheckResult {
    std::string name;
    bool passed = false;
    double max_error = 0.0;
    double tolerance = 0.0;
};

struct VerifyOutcome {
    std::vector<CheckResult> checks;
    std::vector<lsq::IsotropyPoint> isotropy;
    bool all_passed = true;
};

namespace detail {

inline double condition_estimate(const lsq::Matrix& S) {
    Eigen::SelfAdjointEigenSolver<lsq::Matrix> es(S);
    double lo = es.eigenvalues().minCoeff();
    double hi = es.eigenvalues().maxCoeff();
    if (lo <= 0.0) return 1e300;
    return hi / lo;
}

/// Random task set with the well-conditioning guard: anything with an
/// estimated condition above 1e10 is regenerated from a derived seed.
inline std::vector<lsq::LsqTask> conditioned_instance(uint64_t seed, int d, int k, int m) {
    for (uint64_t attempt = 0;; ++attempt) {
        uint64_t s = derive_seed(seed, attempt);
        std::vector<lsq::LsqTask> tasks;
        tasks.reserve(std::size_t(k));
        for (int i = 0; i < k; ++i) {
            long n = long(d) + 4 + 3 * i;
            tasks.push_back(
                lsq::generate_isotropic_task(derive_seed(s, uint64_t(i)), n, d, m, false));
        }
        lsq::Matrix S = tasks[0].A;
        for (std::size_t i = 1; i < tasks.size(); ++i) S += tasks[i].A;
        if (condition_estimate(S) <= 1e10) return tasks;
    }
}

}  // namespace detail

/// The theory checks behind the CLI `verify` command: the closed-form
/// merging identity, the partition of identity, and the sample-weighted
/// isotropy convergence.
inline VerifyOutcome run_verification(const VerifyConfig& cfg) {
    VerifyOutcome out;

    double identity_err = 0.0;
    double partition_err = 0.0;
    long instance_count = 0;
    for (int d : cfg.dims) {
        for (int k : cfg.task_counts) {
            for (int m : cfg.target_counts) {
                for (int inst = 0; inst < cfg.instances_per_combo; ++inst) {
                    uint64_t seed = derive_seed(
                        cfg.seed, uint64_t(d) * 1000003 + uint64_t(k) * 1009 +
                                      uint64_t(m) * 131 + uint64_t(inst));
                    auto tasks = detail::conditioned_instance(seed, d, k, m);
                    ++instance_count;

                    auto joint = lsq::solve_joint(tasks, 0.0);
                    std::vector<lsq::LsqSolution> solos;
                    solos.reserve(tasks.size());
                    for (const auto& t : tasks) solos.push_back(lsq::solve_individual(t, 0.0));
                    auto coeffs = lsq::matrix_coefficients(tasks, 0.0);
                    auto merged = lsq::merge_solutions(solos, coeffs);
                    double rel =
                        (merged.W - joint.W).norm() / std::max(joint.W.norm(), 1e-300);
                    identity_err = std::max(identity_err, rel);

                    for (double ridge : cfg.ridges) {
                        auto c = lsq::matrix_coefficients(tasks, ridge);
                        lsq::Matrix sum = lsq::Matrix::Zero(d, d);
                        for (const auto& omega : c.omegas) sum += omega;
                        double dev =
                            (sum - lsq::Matrix::Identity(d, d)).cwiseAbs().maxCoeff();
                        partition_err = std::max(partition_err, dev);
                    }
                }
            }
        }
    }
    out.checks.push_back({"exact_merging_identity (" + std::to_string(instance_count) +
                              " instances)",
                          identity_err <= 1e-8, identity_err, 1e-8});
    out.checks.push_back({"partition_of_identity (ridge 0 and 1e-3)", partition_err <= 1e-8,
                          partition_err, 1e-8});

    out.isotropy =
        lsq::isotropy_experiment(cfg.seed, cfg.isotropy_d, cfg.isotropy_m, cfg.n_schedule);
    bool converges = out.isotropy.size() < 2 ||
                     out.isotropy.back().coeff_error < out.isotropy.front().coeff_error;
    out.checks.push_back({"sample_weighted_convergence", converges,
                          out.isotropy.empty() ? 0.0 : out.isotropy.back().coeff_error, 0.0});

    for (const auto& c : out.checks) out.all_passed = out.all_passed && c.passed;
    return out;
}

inline std::string isotropy_csv(const std::vector<lsq::IsotropyPoint>& points) {
    std::ostringstream os;
    os << "n,coeff_error\n";
    for (const auto& p : points)
        os << p.n << "," << format_double(p.coeff_error) << "\n";
    return os.str();
}

}  // namespace nanmerge::verify
