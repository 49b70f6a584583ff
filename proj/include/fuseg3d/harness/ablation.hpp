#pragma once

#include <array>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "fuseg3d/core/config.hpp"
#include "fuseg3d/core/errors.hpp"
#include "fuseg3d/harness/trainer.hpp"

namespace fuseg3d::harness {

struct AblationVariant {
    std::string label;
    core::FullConfig config;
};

// Expands one sweep axis into fully validated configs. Every variant keeps the
// base settings except the swept parameter, so rows are comparable.
inline std::vector<AblationVariant> ablation_variants(const core::FullConfig& base,
                                                      const std::string& axis) {
    std::vector<AblationVariant> out;
    if (axis == "heads") {
        for (int h : {2, 4, 8, 16}) {
            core::FullConfig c = base;
            c.model.num_heads = h;
            out.push_back({"heads=" + std::to_string(h), c});
        }
    } else if (axis == "depths") {
        const std::array<std::array<int, 4>, 3> choices{
            {{2, 2, 2, 2}, {2, 4, 6, 8}, {3, 6, 9, 18}}};
        for (const auto& d : choices) {
            core::FullConfig c = base;
            c.model.depths = d;
            std::ostringstream lab;
            lab << "depths=(" << d[0] << ',' << d[1] << ',' << d[2] << ',' << d[3] << ')';
            out.push_back({lab.str(), c});
        }
    } else if (axis == "embed_dim") {
        for (int e : {12, 24, 48, 96}) {
            core::FullConfig c = base;
            c.model.embed_dim = e;
            out.push_back({"embed_dim=" + std::to_string(e), c});
        }
    } else if (axis == "msif_modules") {
        struct Wiring {
            const char* label;
            bool msf, cma, gfm;
        };
        const Wiring table[] = {{"Baseline", false, false, false}, {"MSF", true, false, false},
                                {"CMA", false, true, false},       {"GFM", true, false, true},
                                {"MSF+CMA", true, true, false},    {"Full", true, true, true}};
        for (const Wiring& w : table) {
            core::FullConfig c = base;
            c.msif.multi_scale = w.msf;
            c.msif.cross_attention = w.cma;
            c.msif.gated_fusion = w.gfm;
            out.push_back({w.label, c});
        }
    } else {
        throw core::ConfigError("ablate: unknown axis '" + axis +
                                "' (expected heads, depths, embed_dim, or msif_modules)");
    }
    for (const auto& v : out) v.config.validate();
    return out;
}

struct AblationRow {
    std::string label;
    std::int64_t parameter_count = 0;
    double mean_dsc = 0.0, mean_sensitivity = 0.0, mean_precision = 0.0;
    double final_train_loss = 0.0;
    int steps_run = 0;
};

struct AblationReport {
    std::string axis;
    std::vector<AblationRow> rows;
};

// Trains every variant of one axis on the same patients and scores it on the
// validation set (falling back to the training set when none is given).
inline AblationReport ablation_sweep(const core::FullConfig& base, const std::string& axis,
                                     const std::vector<PreparedPatient>& train_set,
                                     const std::vector<PreparedPatient>& val_set = {}) {
    AblationReport rep;
    rep.axis = axis;
    for (const AblationVariant& var : ablation_variants(base, axis)) {
        core::Rng rng(var.config.train.seed);
        nn::SegmentationModel model(var.config.model, var.config.msif, rng);
        const TrainResult res = train_model(model, train_set, val_set, var.config);
        const auto& score_set = val_set.empty() ? train_set : val_set;
        const EvalResult ev = evaluate_patients(model, score_set, var.config);

        AblationRow row;
        row.label = var.label;
        row.parameter_count = model.parameter_count();
        for (const PatientEval& e : ev.rows) {
            row.mean_dsc += e.scores.dice;
            row.mean_sensitivity += e.scores.sensitivity;
            row.mean_precision += e.scores.precision;
        }
        const double n = static_cast<double>(ev.rows.size());
        row.mean_dsc /= n;
        row.mean_sensitivity /= n;
        row.mean_precision /= n;
        row.final_train_loss = res.history.loss.back();
        row.steps_run = res.history.steps_run;
        rep.rows.push_back(std::move(row));
    }
    return rep;
}

inline std::string format_ablation_table(const AblationReport& rep) {
    std::ostringstream os;
    os << "axis: " << rep.axis << '\n';
    os << std::left << std::setw(18) << "variant" << std::right << std::setw(12) << "params"
       << std::setw(10) << "DSC" << std::setw(12) << "sens" << std::setw(12) << "prec"
       << std::setw(12) << "loss" << std::setw(8) << "steps" << '\n';
    os << std::fixed << std::setprecision(4);
    for (const AblationRow& r : rep.rows)
        os << std::left << std::setw(18) << r.label << std::right << std::setw(12)
           << r.parameter_count << std::setw(10) << r.mean_dsc << std::setw(12)
           << r.mean_sensitivity << std::setw(12) << r.mean_precision << std::setw(12)
           << r.final_train_loss << std::setw(8) << r.steps_run << '\n';
    return os.str();
}

inline void write_ablation_csv(const std::string& path, const AblationReport& rep) {
    std::ofstream f(path);
    if (!f) throw core::DataError("cannot write " + path);
    f << "variant,parameters,DSC,sensitivity,precision,final_train_loss,steps\n";
    f << std::setprecision(17);
    for (const AblationRow& r : rep.rows)
        f << r.label << ',' << r.parameter_count << ',' << r.mean_dsc << ','
          << r.mean_sensitivity << ',' << r.mean_precision << ',' << r.final_train_loss << ','
          << r.steps_run << '\n';
}

}  // namespace fuseg3d::harness
