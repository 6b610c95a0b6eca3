#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nanmerge/errors.hpp"
#include "nanmerge/merge.hpp"

namespace nanmerge {

/// A merge run as described on disk: the MergeRecipe fields plus file paths.
struct RecipeDocument {
    MergeRecipe recipe;
    std::optional<std::string> base_path;
    std::vector<std::string> model_paths;
    std::string output_path;
};

namespace detail {

inline Strategy parse_strategy(const std::string& s) {
    if (s == "average") return Strategy::average;
    if (s == "task_arithmetic") return Strategy::task_arithmetic;
    if (s == "ties") return Strategy::ties;
    if (s == "matrix_coefficient") return Strategy::matrix_coefficient;
    throw RecipeParseError("unknown strategy '" + s + "'");
}

inline NanMode parse_nan_mode(const std::string& s) {
    if (s == "off") return NanMode::off;
    if (s == "replace_coefficients") return NanMode::replace_coefficients;
    if (s == "post_reweight") return NanMode::post_reweight;
    throw RecipeParseError("unknown nan_mode '" + s + "'");
}

inline NormSource parse_norm_source(const std::string& s) {
    if (s == "task_vectors") return NormSource::task_vectors;
    if (s == "full_weights") return NormSource::full_weights;
    throw RecipeParseError("unknown norm_source '" + s + "'");
}

}  // namespace detail

/// Parses a JSON recipe document. Unknown keys are fatal; missing optional
/// keys take the documented defaults.
inline RecipeDocument parse_recipe_text(const std::string& text, const std::string& origin) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw RecipeParseError(origin + ": " + e.what());
    }
    if (!doc.is_object()) throw RecipeParseError(origin + ": recipe must be a JSON object");

    static const std::vector<std::string> known = {
        "strategy",       "lambda",          "trim_fraction", "nan_mode",
        "norm_source",    "apply_global_scale", "exclude_patterns",
        "base_path",      "model_paths",     "output_path"};
    for (auto it = doc.begin(); it != doc.end(); ++it) {
        if (std::find(known.begin(), known.end(), it.key()) == known.end())
            throw RecipeParseError(origin + ": unknown key '" + it.key() + "'");
    }

    RecipeDocument out;
    try {
        if (!doc.contains("strategy"))
            throw RecipeParseError(origin + ": missing required key 'strategy'");
        out.recipe.strategy = detail::parse_strategy(doc["strategy"].get<std::string>());
        if (doc.contains("lambda")) out.recipe.lambda = doc["lambda"].get<double>();
        if (doc.contains("trim_fraction"))
            out.recipe.trim_fraction = doc["trim_fraction"].get<double>();
        if (doc.contains("nan_mode"))
            out.recipe.nan_mode = detail::parse_nan_mode(doc["nan_mode"].get<std::string>());
        if (doc.contains("apply_global_scale"))
            out.recipe.apply_global_scale = doc["apply_global_scale"].get<bool>();
        if (doc.contains("exclude_patterns"))
            out.recipe.exclude_patterns =
                doc["exclude_patterns"].get<std::vector<std::string>>();
        if (doc.contains("base_path")) out.base_path = doc["base_path"].get<std::string>();
        if (!doc.contains("model_paths"))
            throw RecipeParseError(origin + ": missing required key 'model_paths'");
        out.model_paths = doc["model_paths"].get<std::vector<std::string>>();
        if (!doc.contains("output_path"))
            throw RecipeParseError(origin + ": missing required key 'output_path'");
        out.output_path = doc["output_path"].get<std::string>();
        if (doc.contains("norm_source")) {
            out.recipe.norm_source =
                detail::parse_norm_source(doc["norm_source"].get<std::string>());
        } else {
            out.recipe.norm_source =
                out.base_path ? NormSource::task_vectors : NormSource::full_weights;
        }
    } catch (const nlohmann::json::type_error& e) {
        throw RecipeParseError(origin + ": " + e.what());
    }

    // semantic checks
    if (out.model_paths.empty()) throw RecipeInvalid(origin + ": model_paths is empty");
    if (!std::isfinite(out.recipe.lambda)) throw RecipeInvalid(origin + ": lambda is not finite");
    if (!(out.recipe.trim_fraction > 0.0 && out.recipe.trim_fraction <= 1.0))
        throw RecipeInvalid(origin + ": trim_fraction must be in (0, 1]");
    const bool needs_base = out.recipe.strategy == Strategy::task_arithmetic ||
                            out.recipe.strategy == Strategy::ties;
    if (needs_base && !out.base_path)
        throw RecipeInvalid(origin + ": strategy '" +
                            std::string(to_string(out.recipe.strategy)) +
                            "' requires base_path");
    if (out.recipe.nan_mode != NanMode::off &&
        out.recipe.norm_source == NormSource::task_vectors && !out.base_path)
        throw RecipeInvalid(origin + ": norm_source 'task_vectors' requires base_path");
    return out;
}

inline RecipeDocument parse_recipe(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoFailure("cannot open recipe '" + path.string() + "'");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_recipe_text(text, path.string());
}

}  // namespace nanmerge
