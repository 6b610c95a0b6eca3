#pragma once

#include <cstdio>
#include <sstream>
#include <string>

#include <json.hpp>

#include "nanmerge/merge.hpp"

namespace nanmerge {

/// 17 significant digits: enough to round-trip any float64 exactly.
inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline nlohmann::json report_to_json(const MergeReport& rep) {
    nlohmann::json models = nlohmann::json::array();
    for (const auto& row : rep.models) {
        models.push_back({{"model_id", row.model_id},
                          {"norm", row.norm},
                          {"alpha", row.alpha},
                          {"effective_coefficient", row.effective_coefficient}});
    }
    return {{"models", models},
            {"strategy", rep.strategy},
            {"lambda", rep.lambda},
            {"trim_fraction", rep.trim_fraction},
            {"nan_mode", rep.nan_mode},
            {"norm_source", rep.norm_source},
            {"excluded_keys", rep.excluded_keys},
            {"skipped_dtypes", rep.skipped_dtypes}};
}

inline std::string report_to_text(const MergeReport& rep) {
    std::ostringstream os;
    os << "strategy: " << rep.strategy << "\n"
       << "lambda: " << format_double(rep.lambda) << "\n"
       << "trim_fraction: " << format_double(rep.trim_fraction) << "\n"
       << "nan_mode: " << rep.nan_mode << "\n"
       << "norm_source: " << rep.norm_source << "\n";
    os << "models:\n";
    for (const auto& row : rep.models) {
        os << "  " << row.model_id << "  norm=" << format_double(row.norm)
           << "  alpha=" << format_double(row.alpha)
           << "  coefficient=" << format_double(row.effective_coefficient) << "\n";
    }
    if (!rep.excluded_keys.empty()) {
        os << "excluded_keys:";
        for (const auto& k : rep.excluded_keys) os << " " << k;
        os << "\n";
    }
    if (!rep.skipped_dtypes.empty()) {
        os << "skipped_dtypes:";
        for (const auto& k : rep.skipped_dtypes) os << " " << k;
        os << "\n";
    }
    return os.str();
}

}  // namespace nanmerge
