// nanmerge: training-free checkpoint merging with inverse-norm coefficients.
//
// Subcommands: merge, coeffs, inspect, verify, diff. Data goes to stdout,
// logs to stderr. Exit codes: 0 success, 1 validation/recipe error,
// 2 I/O or format error, 3 numerical failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "nanmerge/merge.hpp"
#include "nanmerge/recipe.hpp"
#include "nanmerge/report.hpp"
#include "nanmerge/safetensors.hpp"
#include "nanmerge/verify.hpp"

namespace {

using namespace nanmerge;

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitIo = 2;
constexpr int kExitNumeric = 3;

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoFailure("cannot open '" + path + "' for writing");
    out << text;
    if (!out) throw IoFailure("write error on '" + path + "'");
}

// Applies `--set key=value` overrides on top of the recipe document's JSON
// before it is validated, so overrides obey the same strict schema.
std::string apply_overrides(const std::string& text, const std::vector<std::string>& sets,
                            const std::string& origin) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw RecipeParseError(origin + ": " + e.what());
    }
    for (const std::string& kv : sets) {
        auto eq = kv.find('=');
        if (eq == std::string::npos)
            throw RecipeParseError("--set expects key=value, got '" + kv + "'");
        std::string key = kv.substr(0, eq);
        std::string value = kv.substr(eq + 1);
        if (key == "lambda" || key == "trim_fraction") {
            try {
                doc[key] = std::stod(value);
            } catch (const std::exception&) {
                throw RecipeParseError("--set " + key + ": '" + value + "' is not a number");
            }
        } else if (key == "apply_global_scale") {
            if (value != "true" && value != "false")
                throw RecipeParseError("--set apply_global_scale: expected true or false");
            doc[key] = (value == "true");
        } else {
            doc[key] = value;
        }
    }
    return doc.dump();
}

int cmd_merge(const std::string& recipe_path, const std::vector<std::string>& sets,
              const std::string& report_path) {
    std::ifstream in(recipe_path);
    if (!in) throw IoFailure("cannot open recipe '" + recipe_path + "'");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (!sets.empty()) text = apply_overrides(text, sets, recipe_path);
    RecipeDocument doc = parse_recipe_text(text, recipe_path);

    std::optional<Checkpoint> base;
    if (doc.base_path) base = read_checkpoint(*doc.base_path);
    std::vector<Checkpoint> models;
    models.reserve(doc.model_paths.size());
    for (const std::string& p : doc.model_paths) models.push_back(read_checkpoint(p));

    auto [merged, report] = run_recipe(doc.recipe, base, models, doc.model_paths);
    write_checkpoint(merged, doc.output_path);
    std::cerr << "wrote " << doc.output_path << "\n";
    std::cout << report_to_text(report);
    if (!report_path.empty()) write_text_file(report_path, report_to_json(report).dump(2) + "\n");
    return kExitOk;
}

int cmd_coeffs(const std::string& base_path, const std::vector<std::string>& model_paths,
               const std::string& norm_source, bool no_scale, bool csv) {
    std::vector<Checkpoint> models;
    models.reserve(model_paths.size());
    for (const std::string& p : model_paths) models.push_back(read_checkpoint(p));

    if (models.size() >= 2) {
        AlignmentReport rep = validate_alignment(models);
        if (!rep.ok) {
            for (const auto& s : rep.missing) std::cerr << "alignment: " << s << "\n";
            for (const auto& s : rep.shape_conflicts) std::cerr << "alignment: " << s << "\n";
            for (const auto& s : rep.dtype_conflicts) std::cerr << "alignment: " << s << "\n";
            std::cerr << "error: checkpoints are not aligned\n";
            return kExitValidation;
        }
    }

    std::string source = norm_source;
    if (source.empty()) source = base_path.empty() ? "full_weights" : "task_vectors";
    std::vector<double> norms;
    if (source == "task_vectors") {
        if (base_path.empty())
            throw RecipeInvalid("norm source 'task_vectors' requires --base");
        Checkpoint base = read_checkpoint(base_path);
        for (const Checkpoint& m : models)
            norms.push_back(group_norm(extract_task_vector(base, m).entries));
    } else if (source == "full_weights") {
        for (const Checkpoint& m : models) norms.push_back(group_norm(m.entries));
    } else {
        throw RecipeInvalid("unknown norm source '" + source + "'");
    }
    NanCoefficients nc = nan_coefficients_from_norms(norms, !no_scale);

    if (csv) {
        std::cout << "model,norm,alpha,coefficient\n";
        for (std::size_t i = 0; i < models.size(); ++i)
            std::cout << model_paths[i] << "," << format_double(nc.norms[i]) << ","
                      << format_double(nc.alphas[i]) << ","
                      << format_double(nc.scale * nc.alphas[i]) << "\n";
    } else {
        std::cout << "scale: " << format_double(nc.scale) << "\n";
        for (std::size_t i = 0; i < models.size(); ++i)
            std::cout << model_paths[i] << "  norm=" << format_double(nc.norms[i])
                      << "  alpha=" << format_double(nc.alphas[i])
                      << "  coefficient=" << format_double(nc.scale * nc.alphas[i]) << "\n";
    }
    return kExitOk;
}

int cmd_inspect(const std::string& path, bool as_json) {
    Checkpoint ckpt = read_checkpoint(path);
    std::vector<Tensor> all;
    for (const auto& [name, t] : ckpt.entries) all.push_back(t);
    double total = frobenius_norm(all);

    if (as_json) {
        nlohmann::json tensors = nlohmann::json::array();
        for (const auto& [name, t] : ckpt.entries)
            tensors.push_back({{"name", name},
                               {"shape", t.shape()},
                               {"dtype", dtype_name(t.dtype())},
                               {"norm", frobenius_norm(t)}});
        for (const auto& [name, o] : ckpt.opaque)
            tensors.push_back({{"name", name}, {"shape", o.shape}, {"dtype", o.dtype}});
        nlohmann::json doc = {{"path", path}, {"tensors", tensors}, {"total_norm", total}};
        if (!ckpt.metadata.empty()) doc["metadata"] = ckpt.metadata;
        std::cout << doc.dump(2) << "\n";
    } else {
        for (const auto& [name, t] : ckpt.entries)
            std::cout << name << "  " << shape_string(t.shape()) << "  "
                      << dtype_name(t.dtype()) << "  norm=" << format_double(frobenius_norm(t))
                      << "\n";
        for (const auto& [name, o] : ckpt.opaque)
            std::cout << name << "  " << shape_string(o.shape) << "  " << o.dtype
                      << "  (not mergeable)\n";
        std::cout << "total_norm=" << format_double(total) << "\n";
    }
    return kExitOk;
}

int cmd_verify(const verify::VerifyConfig& cfg, const std::string& csv_out) {
    verify::VerifyOutcome outcome = verify::run_verification(cfg);
    for (const auto& c : outcome.checks)
        std::cout << (c.passed ? "PASS" : "FAIL") << "  " << c.name
                  << "  max_error=" << format_double(c.max_error)
                  << "  tolerance=" << format_double(c.tolerance) << "\n";
    if (!csv_out.empty()) write_text_file(csv_out, verify::isotropy_csv(outcome.isotropy));
    return outcome.all_passed ? kExitOk : kExitNumeric;
}

int cmd_diff(const std::string& path_a, const std::string& path_b) {
    Checkpoint a = read_checkpoint(path_a);
    Checkpoint b = read_checkpoint(path_b);

    std::vector<std::string> only_a, only_b;
    for (const auto& [name, t] : a.entries)
        if (!b.entries.count(name)) only_a.push_back(name);
    for (const auto& [name, t] : b.entries)
        if (!a.entries.count(name)) only_b.push_back(name);
    if (!only_a.empty() || !only_b.empty()) {
        for (const auto& k : only_a) std::cerr << "only in " << path_a << ": " << k << "\n";
        for (const auto& k : only_b) std::cerr << "only in " << path_b << ": " << k << "\n";
        return kExitValidation;
    }

    double total_sq = 0.0;
    for (const auto& [name, ta] : a.entries) {
        const Tensor& tb = b.entries.at(name);
        if (ta.shape() != tb.shape()) {
            std::cout << name << "  shape " << shape_string(ta.shape()) << " vs "
                      << shape_string(tb.shape()) << "\n";
            continue;
        }
        double acc = 0.0;
        for (std::size_t i = 0; i < ta.size(); ++i) {
            double d = ta[i] - tb[i];
            acc += d * d;
        }
        total_sq += acc;
        std::cout << name << "  delta_norm=" << format_double(std::sqrt(acc)) << "\n";
    }
    std::cout << "total_delta_norm=" << format_double(std::sqrt(total_sq)) << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"nanmerge: training-free model merging with inverse-norm coefficients"};
    app.require_subcommand(1);

    auto* merge = app.add_subcommand("merge", "run a merge recipe");
    std::string recipe_path, report_path;
    std::vector<std::string> sets;
    merge->add_option("recipe", recipe_path, "recipe file (JSON)")->required();
    merge->add_option("--set", sets, "override a recipe field, key=value");
    merge->add_option("--report", report_path, "write machine-readable report (JSON)");

    auto* coeffs = app.add_subcommand("coeffs", "print NAN coefficients for checkpoints");
    std::string coeffs_base, coeffs_source;
    std::vector<std::string> coeffs_models;
    bool coeffs_no_scale = false, coeffs_csv = false;
    coeffs->add_option("models", coeffs_models, "model checkpoints")->required();
    coeffs->add_option("--base", coeffs_base, "base checkpoint for task-vector norms");
    coeffs->add_option("--norm-source", coeffs_source, "task_vectors or full_weights");
    coeffs->add_flag("--no-scale", coeffs_no_scale, "disable the m/2 global scale");
    coeffs->add_flag("--csv", coeffs_csv, "emit model,norm,alpha,coefficient rows");

    auto* inspect = app.add_subcommand("inspect", "list tensors of a checkpoint");
    std::string inspect_path;
    bool inspect_json = false;
    inspect->add_option("checkpoint", inspect_path, "safetensors file")->required();
    inspect->add_flag("--json", inspect_json, "JSON output");

    auto* verify_cmd = app.add_subcommand("verify", "run the least-squares theory checks");
    nanmerge::verify::VerifyConfig cfg;
    std::string verify_csv;
    verify_cmd->add_option("--seed", cfg.seed, "random seed (default 42)");
    verify_cmd->add_option("--d", cfg.dims, "feature dimensions to test");
    verify_cmd->add_option("--tasks", cfg.task_counts, "task counts to test");
    verify_cmd->add_option("--m", cfg.target_counts, "target column counts to test");
    verify_cmd->add_option("--instances", cfg.instances_per_combo, "instances per combination");
    verify_cmd->add_option("--schedule", cfg.n_schedule, "isotropy sample-size schedule");
    verify_cmd->add_option("--csv-out", verify_csv, "write isotropy report CSV");

    auto* diff = app.add_subcommand("diff", "per-tensor delta norms between two checkpoints");
    std::string diff_a, diff_b;
    diff->add_option("a", diff_a, "first checkpoint")->required();
    diff->add_option("b", diff_b, "second checkpoint")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitValidation;
    }

    try {
        if (*merge) return cmd_merge(recipe_path, sets, report_path);
        if (*coeffs)
            return cmd_coeffs(coeffs_base, coeffs_models, coeffs_source, coeffs_no_scale,
                              coeffs_csv);
        if (*inspect) return cmd_inspect(inspect_path, inspect_json);
        if (*verify_cmd) return cmd_verify(cfg, verify_csv);
        if (*diff) return cmd_diff(diff_a, diff_b);
    } catch (const nanmerge::IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    } catch (const nanmerge::NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const nanmerge::ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    }
    return kExitValidation;
}
