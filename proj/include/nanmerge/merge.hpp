#pragma once

#include <fnmatch.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "nanmerge/checkpoint.hpp"
#include "nanmerge/lsq.hpp"
#include "nanmerge/tensor.hpp"

namespace nanmerge {

inline bool matches_any(const std::string& name, const std::vector<std::string>& patterns) {
    for (const std::string& p : patterns)
        if (fnmatch(p.c_str(), name.c_str(), 0) == 0) return true;
    return false;
}

namespace detail {

inline std::string join(const std::vector<std::string>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += ", ";
        s += v[i];
    }
    return s;
}

/// Mergeable key set after exclusion; throws KeyMismatch naming the
/// offending keys when the two sets differ.
inline std::vector<std::string> aligned_keys(const std::map<std::string, Tensor>& a,
                                             const std::map<std::string, Tensor>& b,
                                             const std::vector<std::string>& exclude,
                                             const std::string& label_a,
                                             const std::string& label_b) {
    std::vector<std::string> keys, only_a, only_b;
    auto it_a = a.begin();
    auto it_b = b.begin();
    while (it_a != a.end() || it_b != b.end()) {
        if (it_b == b.end() || (it_a != a.end() && it_a->first < it_b->first)) {
            if (!matches_any(it_a->first, exclude)) only_a.push_back(it_a->first);
            ++it_a;
        } else if (it_a == a.end() || it_b->first < it_a->first) {
            if (!matches_any(it_b->first, exclude)) only_b.push_back(it_b->first);
            ++it_b;
        } else {
            if (!matches_any(it_a->first, exclude)) keys.push_back(it_a->first);
            ++it_a;
            ++it_b;
        }
    }
    if (!only_a.empty() || !only_b.empty()) {
        std::string msg = "key sets differ:";
        if (!only_a.empty()) msg += " only in " + label_a + ": " + join(only_a) + ";";
        if (!only_b.empty()) msg += " only in " + label_b + ": " + join(only_b);
        throw KeyMismatch(msg);
    }
    return keys;
}

}  // namespace detail

/// tau = finetuned - base over the mergeable, non-excluded keys.
inline TaskVector extract_task_vector(const Checkpoint& base, const Checkpoint& finetuned,
                                      const std::vector<std::string>& exclude = {}) {
    auto keys = detail::aligned_keys(base.entries, finetuned.entries, exclude, "base",
                                     "finetuned");
    TaskVector tv;
    tv.base_fingerprint = fingerprint(base);
    for (const std::string& k : keys) {
        const Tensor& tb = base.entries.at(k);
        const Tensor& tf = finetuned.entries.at(k);
        if (tb.shape() != tf.shape())
            throw ShapeMismatch("extract_task_vector: shape mismatch at '" + k + "': " +
                                shape_string(tb.shape()) + " vs " + shape_string(tf.shape()));
        Tensor delta(tb.shape(), DType::F64);
        for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = tf[i] - tb[i];
        tv.entries.emplace(k, std::move(delta));
    }
    for (const auto& [name, t] : base.entries)
        if (matches_any(name, exclude)) tv.excluded_keys.push_back(name);
    return tv;
}

/// Inverse-norm merge coefficients: alpha_i = (1/norm_i) / sum_j (1/norm_j),
/// plus the global m/2 factor applied downstream when enabled.
struct NanCoefficients {
    std::vector<double> norms;
    std::vector<double> alphas;
    double scale = 1.0;
};

inline NanCoefficients nan_coefficients_from_norms(const std::vector<double>& norms,
                                                   bool apply_global_scale) {
    if (norms.empty()) throw EmptyInput("nan_coefficients: no models");
    NanCoefficients out;
    out.norms = norms;
    double inv_sum = 0.0;
    for (std::size_t i = 0; i < norms.size(); ++i) {
        if (!(norms[i] > 0.0))
            throw ZeroNormModel("nan_coefficients: model " + std::to_string(i) +
                                " has non-positive norm " + std::to_string(norms[i]));
        inv_sum += 1.0 / norms[i];
    }
    out.alphas.reserve(norms.size());
    for (double n : norms) out.alphas.push_back((1.0 / n) / inv_sum);
    out.scale = apply_global_scale ? double(norms.size()) / 2.0 : 1.0;
    return out;
}

inline double group_norm(const std::map<std::string, Tensor>& entries) {
    double acc = 0.0;
    for (const auto& [name, t] : entries) {
        if (!t.all_finite()) throw NonFiniteInput("group norm: non-finite value in '" + name + "'");
        for (double v : t.values()) acc += v * v;
    }
    return std::sqrt(acc);
}

inline NanCoefficients nan_coefficients(const std::vector<Checkpoint>& models,
                                        bool apply_global_scale) {
    std::vector<double> norms;
    norms.reserve(models.size());
    for (const Checkpoint& m : models) norms.push_back(group_norm(m.entries));
    return nan_coefficients_from_norms(norms, apply_global_scale);
}

inline NanCoefficients nan_coefficients(const std::vector<TaskVector>& taus,
                                        bool apply_global_scale) {
    std::vector<double> norms;
    norms.reserve(taus.size());
    for (const TaskVector& t : taus) norms.push_back(group_norm(t.entries));
    return nan_coefficients_from_norms(norms, apply_global_scale);
}

namespace detail {

inline void check_alignment(const std::vector<Checkpoint>& models,
                            const std::vector<std::string>& exclude) {
    for (std::size_t i = 1; i < models.size(); ++i) {
        auto keys = aligned_keys(models[0].entries, models[i].entries, exclude, "model 0",
                                 "model " + std::to_string(i));
        for (const std::string& k : keys) {
            if (models[0].entries.at(k).shape() != models[i].entries.at(k).shape())
                throw ShapeMismatch("shape mismatch at '" + k + "' between model 0 and model " +
                                    std::to_string(i));
        }
    }
}

}  // namespace detail

/// Per-key weighted average. Default weights are uniform 1/m. Excluded and
/// opaque tensors come from the first model.
inline Checkpoint weight_average(const std::vector<Checkpoint>& models,
                                 std::optional<std::vector<double>> weights = std::nullopt,
                                 const std::vector<std::string>& exclude = {}) {
    if (models.empty()) throw EmptyInput("weight_average: no models");
    detail::check_alignment(models, exclude);
    std::vector<double> w;
    if (weights) {
        w = *weights;
        if (w.size() != models.size()) throw BadWeights("weight_average: weight count mismatch");
        double sum = 0.0;
        for (double x : w) sum += x;
        if (std::abs(sum - 1.0) > 1e-9)
            throw BadWeights("weight_average: weights sum to " + std::to_string(sum));
    } else {
        w.assign(models.size(), 1.0 / double(models.size()));
    }
    Checkpoint out;
    out.opaque = models[0].opaque;
    for (const auto& [name, first] : models[0].entries) {
        if (matches_any(name, exclude)) {
            out.entries.emplace(name, first);
            continue;
        }
        std::vector<Tensor> column;
        column.reserve(models.size());
        for (const Checkpoint& m : models) column.push_back(m.entries.at(name));
        out.entries.emplace(name, elementwise_combine(column, w));
    }
    return out;
}

/// result = base + sum_i c_i * tau_i; keys absent from the task vectors
/// (excluded at extraction) are copied from the base unchanged.
inline Checkpoint task_arithmetic(const Checkpoint& base, const std::vector<TaskVector>& taus,
                                  const std::vector<double>& coefficients) {
    if (taus.size() != coefficients.size())
        throw ShapeMismatch("task_arithmetic: coefficient count mismatch");
    const std::uint64_t base_fp = fingerprint(base);
    for (std::size_t i = 0; i < taus.size(); ++i)
        if (taus[i].base_fingerprint != base_fp)
            throw BaseMismatch("task_arithmetic: task vector " + std::to_string(i) +
                               " was extracted from a different base");
    Checkpoint out = base;
    if (taus.empty()) return out;
    for (const auto& [name, delta0] : taus[0].entries) {
        auto it = out.entries.find(name);
        if (it == out.entries.end())
            throw KeyMismatch("task_arithmetic: tensor '" + name + "' not in base");
        Tensor acc(it->second.shape(), it->second.dtype());
        for (std::size_t k = 0; k < acc.size(); ++k) acc[k] = it->second[k];
        for (std::size_t i = 0; i < taus.size(); ++i) {
            auto dit = taus[i].entries.find(name);
            if (dit == taus[i].entries.end())
                throw KeyMismatch("task_arithmetic: tensor '" + name +
                                  "' missing from task vector " + std::to_string(i));
            const Tensor& d = dit->second;
            if (d.shape() != acc.shape())
                throw ShapeMismatch("task_arithmetic: shape mismatch at '" + name + "'");
            const double c = coefficients[i];
            for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += c * d[k];
        }
        it->second = std::move(acc);
    }
    return out;
}

namespace detail {

/// Keep the top ceil(trim_fraction * count) entries of a task vector by
/// absolute value, threshold global across all its tensors; zero the rest.
inline TaskVector trim_task_vector(const TaskVector& tau, double trim_fraction) {
    std::size_t count = 0;
    for (const auto& [name, t] : tau.entries) count += t.size();
    if (count == 0) return tau;
    std::size_t keep = std::size_t(std::ceil(trim_fraction * double(count)));
    if (keep >= count) return tau;
    std::vector<double> mags;
    mags.reserve(count);
    for (const auto& [name, t] : tau.entries)
        for (double v : t.values()) mags.push_back(std::abs(v));
    // threshold = keep-th largest magnitude; ties at the threshold all survive
    std::nth_element(mags.begin(), mags.begin() + (keep - 1), mags.end(),
                     std::greater<double>{});
    const double threshold = mags[keep - 1];
    TaskVector out = tau;
    for (auto& [name, t] : out.entries)
        for (double& v : t.values())
            if (std::abs(v) < threshold) v = 0.0;
    return out;
}

inline int sign_of(double v) { return (v > 0.0) - (v < 0.0); }

}  // namespace detail

/// TIES with separate weight vectors for sign election and the disjoint
/// mean. The public entry point passes the same coefficients for both; the
/// NAN post-reweight mode elects with the plain lambda weights and averages
/// with the reweighted ones.
inline Checkpoint ties_merge_weighted(const Checkpoint& base, const std::vector<TaskVector>& taus,
                                      double trim_fraction,
                                      const std::vector<double>& elect_coeffs,
                                      const std::vector<double>& mean_coeffs) {
    if (!(trim_fraction > 0.0 && trim_fraction <= 1.0))
        throw BadTrim("ties_merge: trim_fraction must be in (0, 1]");
    if (taus.size() != elect_coeffs.size() || taus.size() != mean_coeffs.size())
        throw ShapeMismatch("ties_merge: coefficient count mismatch");
    const std::uint64_t base_fp = fingerprint(base);
    for (std::size_t i = 0; i < taus.size(); ++i)
        if (taus[i].base_fingerprint != base_fp)
            throw BaseMismatch("ties_merge: task vector " + std::to_string(i) +
                               " was extracted from a different base");
    std::vector<TaskVector> trimmed;
    trimmed.reserve(taus.size());
    for (const TaskVector& tau : taus)
        trimmed.push_back(detail::trim_task_vector(tau, trim_fraction));

    Checkpoint out = base;
    if (taus.empty()) return out;
    for (const auto& [name, delta0] : trimmed[0].entries) {
        auto it = out.entries.find(name);
        if (it == out.entries.end())
            throw KeyMismatch("ties_merge: tensor '" + name + "' not in base");
        Tensor merged = it->second;
        for (std::size_t k = 0; k < merged.size(); ++k) {
            double elect_sum = 0.0;
            for (std::size_t i = 0; i < trimmed.size(); ++i)
                elect_sum += elect_coeffs[i] * trimmed[i].entries.at(name)[k];
            const int elected = detail::sign_of(elect_sum);
            if (elected == 0) continue;
            double num = 0.0, den = 0.0;
            for (std::size_t i = 0; i < trimmed.size(); ++i) {
                const double v = trimmed[i].entries.at(name)[k];
                if (detail::sign_of(v) == elected) {
                    num += mean_coeffs[i] * v;
                    den += mean_coeffs[i];
                }
            }
            if (den != 0.0) merged[k] += num / den;
        }
        it->second = std::move(merged);
    }
    return out;
}

inline Checkpoint ties_merge(const Checkpoint& base, const std::vector<TaskVector>& taus,
                             double trim_fraction, const std::vector<double>& coefficients) {
    return ties_merge_weighted(base, taus, trim_fraction, coefficients, coefficients);
}

/// Matrix-coefficient merging: tensors with supplied per-model Gram matrices
/// get the exact Omega_i weighting; everything else falls back to a uniform
/// average.
inline Checkpoint matrix_coefficient_merge(
    const std::vector<Checkpoint>& models,
    const std::map<std::string, std::vector<lsq::Matrix>>& grams,
    const std::vector<std::string>& exclude = {}) {
    if (models.empty()) throw EmptyInput("matrix_coefficient_merge: no models");
    detail::check_alignment(models, exclude);
    Checkpoint out = weight_average(models, std::nullopt, exclude);
    for (const auto& [name, gram_list] : grams) {
        auto it = out.entries.find(name);
        if (it == out.entries.end())
            throw GramShapeMismatch("matrix_coefficient_merge: no tensor named '" + name + "'");
        const Tensor& first = models[0].entries.at(name);
        if (first.shape().size() != 2)
            throw GramShapeMismatch("matrix_coefficient_merge: '" + name + "' is not 2-D");
        const Eigen::Index d = Eigen::Index(first.shape()[0]);
        const Eigen::Index cols = Eigen::Index(first.shape()[1]);
        if (gram_list.size() != models.size())
            throw GramShapeMismatch("matrix_coefficient_merge: need one Gram per model for '" +
                                    name + "'");
        std::vector<lsq::LsqTask> pseudo(models.size());
        for (std::size_t i = 0; i < models.size(); ++i) {
            if (gram_list[i].rows() != d || gram_list[i].cols() != d)
                throw GramShapeMismatch("matrix_coefficient_merge: Gram for '" + name +
                                        "' model " + std::to_string(i) +
                                        " does not match leading dimension");
            pseudo[i].A = gram_list[i];
            pseudo[i].b = lsq::Matrix::Zero(d, 1);
        }
        lsq::MatrixCoefficients mc = lsq::matrix_coefficients(pseudo, 0.0);
        std::vector<lsq::LsqSolution> ws;
        ws.reserve(models.size());
        for (const Checkpoint& m : models) {
            const Tensor& t = m.entries.at(name);
            lsq::Matrix W(d, cols);
            for (Eigen::Index r = 0; r < d; ++r)
                for (Eigen::Index c = 0; c < cols; ++c) W(r, c) = t[std::size_t(r * cols + c)];
            ws.push_back({std::move(W)});
        }
        lsq::Matrix merged = lsq::merge_solutions(ws, mc).W;
        Tensor result(first.shape(), it->second.dtype());
        for (Eigen::Index r = 0; r < d; ++r)
            for (Eigen::Index c = 0; c < cols; ++c) result[std::size_t(r * cols + c)] = merged(r, c);
        it->second = std::move(result);
    }
    return out;
}

enum class Strategy { average, task_arithmetic, ties, matrix_coefficient };
enum class NanMode { off, replace_coefficients, post_reweight };
enum class NormSource { task_vectors, full_weights };

struct MergeRecipe {
    Strategy strategy = Strategy::average;
    double lambda = 1.0;
    double trim_fraction = 0.2;
    NanMode nan_mode = NanMode::off;
    NormSource norm_source = NormSource::task_vectors;
    bool apply_global_scale = true;
    std::vector<std::string> exclude_patterns;
};

inline const char* to_string(Strategy s) {
    switch (s) {
        case Strategy::average: return "average";
        case Strategy::task_arithmetic: return "task_arithmetic";
        case Strategy::ties: return "ties";
        case Strategy::matrix_coefficient: return "matrix_coefficient";
    }
    return "?";
}

inline const char* to_string(NanMode m) {
    switch (m) {
        case NanMode::off: return "off";
        case NanMode::replace_coefficients: return "replace_coefficients";
        case NanMode::post_reweight: return "post_reweight";
    }
    return "?";
}

inline const char* to_string(NormSource s) {
    switch (s) {
        case NormSource::task_vectors: return "task_vectors";
        case NormSource::full_weights: return "full_weights";
    }
    return "?";
}

struct MergeReport {
    struct ModelRow {
        std::string model_id;
        double norm = 0.0;
        double alpha = 0.0;
        double effective_coefficient = 0.0;
    };
    std::vector<ModelRow> models;
    std::string strategy;
    double lambda = 0.0;
    double trim_fraction = 0.0;
    std::string nan_mode;
    std::string norm_source;
    std::vector<std::string> excluded_keys;
    std::vector<std::string> skipped_dtypes;  // "name:DTYPE" for opaque tensors
};

/// Dispatches a recipe over loaded checkpoints. `model_ids` are labels for
/// the report (file paths at the CLI, indices in tests).
inline std::pair<Checkpoint, MergeReport> run_recipe(
    const MergeRecipe& recipe, const std::optional<Checkpoint>& base,
    const std::vector<Checkpoint>& models, const std::vector<std::string>& model_ids = {},
    const std::map<std::string, std::vector<lsq::Matrix>>& grams = {}) {
    if (models.empty()) throw RecipeInvalid("run_recipe: no models");
    if (!std::isfinite(recipe.lambda)) throw RecipeInvalid("run_recipe: lambda is not finite");
    const bool needs_base =
        recipe.strategy == Strategy::task_arithmetic || recipe.strategy == Strategy::ties;
    if (needs_base && !base)
        throw RecipeInvalid(std::string("run_recipe: strategy ") + to_string(recipe.strategy) +
                            " requires a base checkpoint");
    const std::size_t m = models.size();

    MergeReport report;
    report.strategy = to_string(recipe.strategy);
    report.lambda = recipe.lambda;
    report.trim_fraction = recipe.trim_fraction;
    report.nan_mode = to_string(recipe.nan_mode);
    report.norm_source = to_string(recipe.norm_source);
    report.models.resize(m);
    for (std::size_t i = 0; i < m; ++i)
        report.models[i].model_id =
            i < model_ids.size() ? model_ids[i] : "model_" + std::to_string(i);
    for (const auto& [name, o] : models[0].opaque)
        report.skipped_dtypes.push_back(name + ":" + o.dtype);

    std::vector<TaskVector> taus;
    if (needs_base) {
        taus.reserve(m);
        for (const Checkpoint& model : models)
            taus.push_back(extract_task_vector(*base, model, recipe.exclude_patterns));
        report.excluded_keys = taus[0].excluded_keys;
    } else {
        for (const auto& [name, t] : models[0].entries)
            if (matches_any(name, recipe.exclude_patterns)) report.excluded_keys.push_back(name);
    }

    std::optional<NanCoefficients> nan;
    if (recipe.nan_mode != NanMode::off) {
        std::vector<double> norms;
        norms.reserve(m);
        if (recipe.norm_source == NormSource::task_vectors) {
            if (!needs_base && !base)
                throw RecipeInvalid("run_recipe: norm_source=task_vectors requires a base");
            if (taus.empty())
                for (const Checkpoint& model : models)
                    taus.push_back(extract_task_vector(*base, model, recipe.exclude_patterns));
            for (const TaskVector& t : taus) norms.push_back(group_norm(t.entries));
        } else {
            for (const Checkpoint& model : models) norms.push_back(group_norm(model.entries));
        }
        // plain averaging needs weights that sum to 1; the m/2 factor is
        // only meaningful in delta space
        const bool scale_on =
            recipe.apply_global_scale && recipe.strategy != Strategy::average;
        nan = nan_coefficients_from_norms(norms, scale_on);
        for (std::size_t i = 0; i < m; ++i) {
            report.models[i].norm = nan->norms[i];
            report.models[i].alpha = nan->alphas[i];
        }
    }

    Checkpoint merged;
    switch (recipe.strategy) {
        case Strategy::average: {
            std::optional<std::vector<double>> weights;
            if (nan) weights = nan->alphas;
            merged = weight_average(models, weights, recipe.exclude_patterns);
            for (std::size_t i = 0; i < m; ++i)
                report.models[i].effective_coefficient =
                    nan ? nan->alphas[i] : 1.0 / double(m);
            break;
        }
        case Strategy::task_arithmetic: {
            std::vector<double> coeffs(m, recipe.lambda);
            if (nan) {
                for (std::size_t i = 0; i < m; ++i) {
                    double c = nan->scale * nan->alphas[i];
                    coeffs[i] =
                        recipe.nan_mode == NanMode::post_reweight ? c * recipe.lambda : c;
                }
            }
            merged = task_arithmetic(*base, taus, coeffs);
            for (std::size_t i = 0; i < m; ++i)
                report.models[i].effective_coefficient = coeffs[i];
            break;
        }
        case Strategy::ties: {
            std::vector<double> elect(m, recipe.lambda), mean(m, recipe.lambda);
            if (nan) {
                for (std::size_t i = 0; i < m; ++i) {
                    double c = nan->scale * nan->alphas[i];
                    if (recipe.nan_mode == NanMode::post_reweight) {
                        mean[i] = c * recipe.lambda;  // election keeps plain lambda
                    } else {
                        elect[i] = c;
                        mean[i] = c;
                    }
                }
            }
            merged = ties_merge_weighted(*base, taus, recipe.trim_fraction, elect, mean);
            for (std::size_t i = 0; i < m; ++i)
                report.models[i].effective_coefficient = mean[i];
            break;
        }
        case Strategy::matrix_coefficient: {
            merged = matrix_coefficient_merge(models, grams, recipe.exclude_patterns);
            for (std::size_t i = 0; i < m; ++i)
                report.models[i].effective_coefficient = 1.0 / double(m);
            break;
        }
    }
    merged.metadata["merge_strategy"] = report.strategy;
    merged.metadata["nan_mode"] = report.nan_mode;
    return {std::move(merged), std::move(report)};
}

}  // namespace nanmerge
