#include <array>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fuseg3d/harness/ablation.hpp"
#include "fuseg3d/harness/trainer.hpp"

using namespace fuseg3d;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

core::FullConfig read_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw core::ConfigError("cannot open config: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw core::ConfigError("malformed config JSON in " + path + ": " + e.what());
    }
    core::FullConfig cfg = core::FullConfig::from_json(j);
    cfg.validate();
    return cfg;
}

harness::PhantomSpec phantom_spec_from_json(const json& j) {
    harness::PhantomSpec s;
    try {
        if (j.contains("shape")) s.shape = j.at("shape").get<std::array<std::int64_t, 3>>();
        if (j.contains("spacing_mm"))
            s.spacing_mm = j.at("spacing_mm").get<std::array<double, 3>>();
        s.num_lesions = j.value("num_lesions", s.num_lesions);
        s.lesion_radius_min_vox = j.value("lesion_radius_min_vox", s.lesion_radius_min_vox);
        s.lesion_radius_max_vox = j.value("lesion_radius_max_vox", s.lesion_radius_max_vox);
        s.lesion_suv_min = j.value("lesion_suv_min", s.lesion_suv_min);
        s.lesion_suv_max = j.value("lesion_suv_max", s.lesion_suv_max);
        s.background_suv = j.value("background_suv", s.background_suv);
        s.pet_noise_sigma = j.value("pet_noise_sigma", s.pet_noise_sigma);
        s.ct_base_hu = j.value("ct_base_hu", s.ct_base_hu);
        s.ct_texture_amp_hu = j.value("ct_texture_amp_hu", s.ct_texture_amp_hu);
        s.ct_lesion_delta_hu = j.value("ct_lesion_delta_hu", s.ct_lesion_delta_hu);
        s.ct_noise_sigma_hu = j.value("ct_noise_sigma_hu", s.ct_noise_sigma_hu);
        s.seed = j.value("seed", s.seed);
    } catch (const json::exception& e) {
        throw core::ConfigError(std::string("malformed phantom spec: ") + e.what());
    }
    s.validate();
    return s;
}

harness::PreparedPatient load_prepared(const std::string& dir, const std::string& id,
                                       const preprocess::PreprocessConfig& pp) {
    harness::PatientSample s = harness::load_patient(dir, id);
    std::optional<core::AcquisitionMeta> meta;
    if (s.pet.modality() == core::Modality::PET_RAW)
        meta = core::load_acquisition(harness::find_patient_file(dir, id, "pet"));
    harness::PreparedPatient p = harness::prepare_patient(s, pp, meta ? &*meta : nullptr);
    if (p.id.empty()) p.id = id;
    return p;
}

std::vector<harness::PreparedPatient> load_prepared_set(const std::string& dir,
                                                        const std::vector<std::string>& ids,
                                                        const preprocess::PreprocessConfig& pp) {
    std::vector<harness::PreparedPatient> out;
    out.reserve(ids.size());
    for (const std::string& id : ids) out.push_back(load_prepared(dir, id, pp));
    return out;
}

nn::SegmentationModel model_from_checkpoint(const harness::Checkpoint& ck) {
    core::Rng rng(ck.config.train.seed);
    nn::SegmentationModel m(ck.config.model, ck.config.msif, rng);
    nn::ParamMap pm = m.parameters();
    harness::apply_checkpoint(ck, pm);
    return m;
}

json history_json(const harness::TrainHistory& h) {
    return json{{"loss", h.loss},
                {"val_dsc", h.val_dsc},
                {"val_loss", h.val_loss},
                {"lr", h.lr},
                {"best_round", h.best_round},
                {"best_val_dsc", h.best_val_dsc},
                {"steps_run", h.steps_run},
                {"early_stopped", h.early_stopped}};
}

// Patient ids in `dir` that have a `<id>_<kind>.{nii,f3v}` volume.
std::vector<std::string> ids_with_suffix(const std::string& dir, const std::string& kind) {
    if (!fs::is_directory(dir)) throw core::DataError("not a directory: " + dir);
    std::vector<std::string> ids;
    for (const auto& ent : fs::directory_iterator(dir)) {
        const std::string name = ent.path().filename().string();
        for (const char* ext : {".nii", ".f3v"}) {
            const std::string suffix = "_" + kind + ext;
            if (name.size() > suffix.size() &&
                name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0)
                ids.push_back(name.substr(0, name.size() - suffix.size()));
        }
    }
    std::sort(ids.begin(), ids.end());
    return ids;
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (!fs::is_directory(dir)) throw core::DataError("cannot create directory " + dir);
}

int run_train(const std::string& cfg_path, const std::string& data_dir, int fold,
              const std::string& out_dir) {
    const core::FullConfig cfg = read_config(cfg_path);
    const auto ids = harness::list_patients(data_dir);
    if (ids.empty()) throw core::DataError("no patients found in " + data_dir);
    const auto folds = harness::make_folds(ids, cfg.train.folds, cfg.train.seed);
    if (fold < 0 || fold >= static_cast<int>(folds.size()))
        throw core::ConfigError("train: fold index out of range");
    const auto& split = folds[static_cast<std::size_t>(fold)];

    const auto train_set = load_prepared_set(data_dir, split.train_patient_ids, cfg.preprocess);
    const auto val_set = load_prepared_set(data_dir, split.test_patient_ids, cfg.preprocess);

    core::Rng rng(cfg.train.seed);
    nn::SegmentationModel model(cfg.model, cfg.msif, rng);
    std::cout << "fold " << fold << ": " << train_set.size() << " train / " << val_set.size()
              << " validation patients, " << model.parameter_count() << " parameters\n";
    const harness::TrainResult res = harness::train_model(model, train_set, val_set, cfg);

    ensure_dir(out_dir);
    const std::string tag = "fold_" + std::to_string(fold);
    const std::string ckpt = (fs::path(out_dir) / (tag + ".ckpt")).string();
    harness::save_checkpoint(ckpt, res.best);
    {
        std::ofstream f(fs::path(out_dir) / (tag + "_history.json"));
        if (!f) throw core::DataError("cannot write history for " + tag);
        f << history_json(res.history).dump(2) << '\n';
    }
    std::cout << "steps " << res.history.steps_run << (res.history.early_stopped ? " (early stop)" : "")
              << ", best validation DSC " << res.history.best_val_dsc << " at round "
              << res.history.best_round << '\n'
              << "checkpoint: " << ckpt << '\n';
    return 0;
}

int run_infer(const std::string& ckpt_path, const std::string& pet_path,
              const std::string& ct_path, const std::string& out_path) {
    const harness::Checkpoint ck = harness::load_checkpoint(ckpt_path);
    nn::SegmentationModel model = model_from_checkpoint(ck);

    const core::Volume3D pet = core::load_volume(pet_path, core::Modality::PET_SUV);
    const core::Volume3D ct = core::load_volume(ct_path, core::Modality::CT_HU);
    std::optional<core::AcquisitionMeta> meta = core::load_acquisition(pet_path);
    auto [suv, ctn] = preprocess::preprocess_pair(pet, ct, meta ? &*meta : nullptr,
                                                  ck.config.preprocess);
    const core::Volume3D prob = harness::infer_volume(model, suv, ctn, ck.config.train);
    if (const fs::path parent = fs::path(out_path).parent_path(); !parent.empty())
        ensure_dir(parent.string());
    core::save_volume(prob, out_path);
    std::cout << "probability map " << prob.height() << "x" << prob.width() << "x"
              << prob.depth() << " -> " << out_path << '\n';
    const double tmtv =
        stats::tmtv_ml(metrics::binarize(prob, ck.config.train.binarize_tau));
    std::cout << "TMTV at tau " << ck.config.train.binarize_tau << ": " << tmtv << " ml\n";
    return 0;
}

int run_eval(const std::string& ckpt_path, const std::string& data_dir,
             const std::string& out_dir, int fold) {
    const harness::Checkpoint ck = harness::load_checkpoint(ckpt_path);
    nn::SegmentationModel model = model_from_checkpoint(ck);
    const auto ids = harness::list_patients(data_dir);
    if (ids.empty()) throw core::DataError("no patients found in " + data_dir);
    const auto patients = load_prepared_set(data_dir, ids, ck.config.preprocess);
    const harness::EvalResult ev = harness::evaluate_patients(model, patients, ck.config, fold);

    ensure_dir(out_dir);
    harness::write_metrics_csv((fs::path(out_dir) / "metrics.csv").string(), ev.rows);
    stats::write_tmtv_csv((fs::path(out_dir) / "tmtv.csv").string(), ev.tmtv);
    double mean_dsc = 0.0;
    for (const auto& r : ev.rows) {
        std::cout << r.id << ": DSC " << r.scores.dice << ", sensitivity "
                  << r.scores.sensitivity << ", precision " << r.scores.precision << ", cTMTV "
                  << r.ctmtv_ml << " ml, gTMTV " << r.gtmtv_ml << " ml\n";
        mean_dsc += r.scores.dice;
    }
    std::cout << "mean DSC over " << ev.rows.size() << " patients: "
              << mean_dsc / static_cast<double>(ev.rows.size()) << '\n';
    if (ev.tmtv.size() >= 3) {
        const stats::AgreementReport rep = stats::fit_agreement(ev.tmtv);
        for (const auto& f : stats::emit_agreement_plots(rep, ev.tmtv, out_dir, "eval"))
            std::cout << "wrote " << f << '\n';
    }
    return 0;
}

int run_tmtv(const std::string& pred_dir, const std::string& gt_dir,
             const std::string& out_dir) {
    const auto ids = ids_with_suffix(pred_dir, "pred");
    if (ids.empty()) throw core::DataError("no *_pred volumes found in " + pred_dir);
    std::vector<stats::TMTVRecord> records;
    for (const std::string& id : ids) {
        core::Volume3D pred =
            core::load_volume(harness::find_patient_file(pred_dir, id, "pred"),
                              core::Modality::MASK);
        if (pred.modality() == core::Modality::PROB) pred = metrics::binarize(pred, 0.5);
        if (pred.modality() != core::Modality::MASK)
            throw core::DataError("prediction for " + id + " is not a mask or probability map");
        const core::Volume3D gt = core::load_volume(
            harness::find_patient_file(gt_dir, id, "gt"), core::Modality::MASK);
        records.push_back({id, stats::tmtv_ml(pred), stats::tmtv_ml(gt), 0});
    }
    ensure_dir(out_dir);
    stats::write_tmtv_csv((fs::path(out_dir) / "tmtv.csv").string(), records);
    for (const auto& r : records)
        std::cout << r.patient_id << ": cTMTV " << r.ctmtv_ml << " ml, gTMTV " << r.gtmtv_ml
                  << " ml\n";
    if (records.size() >= 3) {
        const stats::AgreementReport rep = stats::fit_agreement(records);
        std::cout << "slope " << rep.slope << ", intercept " << rep.intercept << " ml, R^2 "
                  << rep.r_squared << ", Pearson r " << rep.pearson_r << ", bias "
                  << rep.mean_diff << " ml\n";
        for (const auto& f : stats::emit_agreement_plots(rep, records, out_dir, "tmtv"))
            std::cout << "wrote " << f << '\n';
    }
    return 0;
}

int run_phantom(const std::string& spec_path, const std::string& out_dir) {
    std::ifstream in(spec_path);
    if (!in) throw core::ConfigError("cannot open phantom spec: " + spec_path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw core::ConfigError("malformed phantom spec JSON: " + std::string(e.what()));
    }
    const harness::PhantomSpec spec = phantom_spec_from_json(j);
    const int count = j.value("count", 5);
    if (count < 1) throw core::ConfigError("phantom: count must be >= 1");
    const auto ids = harness::write_phantom_dataset(spec, count, out_dir);
    std::cout << "wrote " << ids.size() << " phantoms to " << out_dir << " (" << ids.front()
              << " .. " << ids.back() << ")\n";
    return 0;
}

int run_ablate(const std::string& cfg_path, const std::string& data_dir,
               const std::string& axis, int fold, const std::string& out_dir) {
    const core::FullConfig cfg = read_config(cfg_path);
    const auto ids = harness::list_patients(data_dir);
    if (ids.empty()) throw core::DataError("no patients found in " + data_dir);
    const auto folds = harness::make_folds(ids, cfg.train.folds, cfg.train.seed);
    if (fold < 0 || fold >= static_cast<int>(folds.size()))
        throw core::ConfigError("ablate: fold index out of range");
    const auto& split = folds[static_cast<std::size_t>(fold)];
    const auto train_set = load_prepared_set(data_dir, split.train_patient_ids, cfg.preprocess);
    const auto val_set = load_prepared_set(data_dir, split.test_patient_ids, cfg.preprocess);

    const harness::AblationReport rep = harness::ablation_sweep(cfg, axis, train_set, val_set);
    std::cout << harness::format_ablation_table(rep);
    ensure_dir(out_dir);
    const std::string csv = (fs::path(out_dir) / ("ablation_" + axis + ".csv")).string();
    harness::write_ablation_csv(csv, rep);
    std::cout << "wrote " << csv << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dual-branch PET/CT lymphoma segmentation and TMTV toolkit"};
    app.require_subcommand(1);

    std::string cfg_path, data_dir, out_dir = ".", ckpt_path, pet_path, ct_path, out_path;
    std::string pred_dir, gt_dir, spec_path, axis, phantom_dir = "phantoms";
    int fold = 0;

    CLI::App* train = app.add_subcommand("train", "train one cross-validation fold");
    train->add_option("--config", cfg_path, "config JSON with {preprocess, model, msif, train}")
        ->required();
    train->add_option("--data", data_dir, "dataset directory")->required();
    train->add_option("--fold", fold, "fold index (default 0)");
    train->add_option("--out", out_dir, "output directory");

    CLI::App* infer = app.add_subcommand("infer", "stitched whole-volume inference");
    infer->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    infer->add_option("--pet", pet_path, "PET volume (.nii or .f3v)")->required();
    infer->add_option("--ct", ct_path, "CT volume (.nii or .f3v)")->required();
    infer->add_option("--out", out_path, "output probability volume")->required();

    CLI::App* eval = app.add_subcommand("eval", "per-patient metrics and TMTV records");
    eval->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    eval->add_option("--data", data_dir, "dataset directory")->required();
    eval->add_option("--out", out_dir, "output directory");
    eval->add_option("--fold", fold, "fold index recorded in TMTV rows");

    CLI::App* tmtv = app.add_subcommand("tmtv", "TMTV agreement from mask directories");
    tmtv->add_option("--pred-dir", pred_dir, "directory of <id>_pred volumes")->required();
    tmtv->add_option("--gt-dir", gt_dir, "directory of <id>_gt volumes")->required();
    tmtv->add_option("--out", out_dir, "output directory");

    CLI::App* phantom = app.add_subcommand("phantom", "generate a synthetic dataset");
    phantom->add_option("--spec", spec_path, "phantom spec JSON")->required();
    phantom->add_option("--out", phantom_dir, "output directory");

    CLI::App* ablate = app.add_subcommand("ablate", "sweep one configuration axis");
    ablate->add_option("--config", cfg_path, "config JSON")->required();
    ablate->add_option("--data", data_dir, "dataset directory")->required();
    ablate->add_option("--axis", axis, "heads | depths | embed_dim | msif_modules")->required();
    ablate->add_option("--fold", fold, "fold index (default 0)");
    ablate->add_option("--out", out_dir, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;  // bad usage is a config error
    }

    try {
        if (app.got_subcommand(train)) return run_train(cfg_path, data_dir, fold, out_dir);
        if (app.got_subcommand(infer)) return run_infer(ckpt_path, pet_path, ct_path, out_path);
        if (app.got_subcommand(eval)) return run_eval(ckpt_path, data_dir, out_dir, fold);
        if (app.got_subcommand(tmtv)) return run_tmtv(pred_dir, gt_dir, out_dir);
        if (app.got_subcommand(phantom)) return run_phantom(spec_path, phantom_dir);
        if (app.got_subcommand(ablate)) return run_ablate(cfg_path, data_dir, axis, fold, out_dir);
    } catch (const core::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const core::DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 3;
    } catch (const core::NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << '\n';
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
