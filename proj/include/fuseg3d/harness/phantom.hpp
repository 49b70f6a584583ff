#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "fuseg3d/core/io.hpp"
#include "fuseg3d/core/volume.hpp"

namespace fuseg3d::harness {

using core::ConfigError;
using core::Modality;
using core::Rng;
using core::Tensor;
using core::Volume3D;

struct PhantomSpec {
    std::array<std::int64_t, 3> shape{64, 64, 48};   // H, W, D voxels
    std::array<double, 3> spacing_mm{4.0, 4.0, 4.0};  // sx, sy, sz
    int num_lesions = 3;
    double lesion_radius_min_vox = 3.0;
    double lesion_radius_max_vox = 7.0;
    double lesion_suv_min = 4.0;
    double lesion_suv_max = 9.0;
    double background_suv = 0.5;
    double pet_noise_sigma = 0.05;
    double ct_base_hu = 30.0;
    double ct_texture_amp_hu = 25.0;
    double ct_lesion_delta_hu = 40.0;
    double ct_noise_sigma_hu = 4.0;
    std::uint64_t seed = 0;

    void validate() const {
        for (auto d : shape)
            if (d < 8) throw ConfigError("phantom: each grid dimension must be >= 8");
        for (auto s : spacing_mm)
            if (!(s > 0.0)) throw ConfigError("phantom: spacing must be positive");
        if (num_lesions < 0) throw ConfigError("phantom: num_lesions must be >= 0");
        if (!(lesion_radius_min_vox >= 1.0) || lesion_radius_max_vox < lesion_radius_min_vox)
            throw ConfigError("phantom: invalid lesion radius range");
        if (!(lesion_suv_min > background_suv) || lesion_suv_max < lesion_suv_min)
            throw ConfigError("phantom: lesion SUV range must exceed background");
        const double rmax = lesion_radius_max_vox;
        for (auto d : shape)
            if (static_cast<double>(d) < 2.0 * (rmax + 1.0))
                throw ConfigError("phantom: grid too small for lesion_radius_max_vox");
    }

    nlohmann::json to_json() const {
        return nlohmann::json{{"shape", shape},
                              {"spacing_mm", spacing_mm},
                              {"num_lesions", num_lesions},
                              {"lesion_radius_min_vox", lesion_radius_min_vox},
                              {"lesion_radius_max_vox", lesion_radius_max_vox},
                              {"lesion_suv_min", lesion_suv_min},
                              {"lesion_suv_max", lesion_suv_max},
                              {"background_suv", background_suv},
                              {"pet_noise_sigma", pet_noise_sigma},
                              {"ct_base_hu", ct_base_hu},
                              {"ct_texture_amp_hu", ct_texture_amp_hu},
                              {"ct_lesion_delta_hu", ct_lesion_delta_hu},
                              {"ct_noise_sigma_hu", ct_noise_sigma_hu},
                              {"seed", seed}};
    }

    static PhantomSpec from_json(const nlohmann::json& j) {
        PhantomSpec s;
        if (j.contains("shape")) s.shape = j.at("shape").get<std::array<std::int64_t, 3>>();
        if (j.contains("spacing_mm"))
            s.spacing_mm = j.at("spacing_mm").get<std::array<double, 3>>();
        if (j.contains("num_lesions")) s.num_lesions = j.at("num_lesions").get<int>();
        if (j.contains("lesion_radius_min_vox"))
            s.lesion_radius_min_vox = j.at("lesion_radius_min_vox").get<double>();
        if (j.contains("lesion_radius_max_vox"))
            s.lesion_radius_max_vox = j.at("lesion_radius_max_vox").get<double>();
        if (j.contains("lesion_suv_min")) s.lesion_suv_min = j.at("lesion_suv_min").get<double>();
        if (j.contains("lesion_suv_max")) s.lesion_suv_max = j.at("lesion_suv_max").get<double>();
        if (j.contains("background_suv")) s.background_suv = j.at("background_suv").get<double>();
        if (j.contains("pet_noise_sigma"))
            s.pet_noise_sigma = j.at("pet_noise_sigma").get<double>();
        if (j.contains("ct_base_hu")) s.ct_base_hu = j.at("ct_base_hu").get<double>();
        if (j.contains("ct_texture_amp_hu"))
            s.ct_texture_amp_hu = j.at("ct_texture_amp_hu").get<double>();
        if (j.contains("ct_lesion_delta_hu"))
            s.ct_lesion_delta_hu = j.at("ct_lesion_delta_hu").get<double>();
        if (j.contains("ct_noise_sigma_hu"))
            s.ct_noise_sigma_hu = j.at("ct_noise_sigma_hu").get<double>();
        if (j.contains("seed")) s.seed = j.at("seed").get<std::uint64_t>();
        return s;
    }
};

struct PhantomTriplet {
    Volume3D pet, ct, gt;
};

namespace phantomdetail {

struct Ellipsoid {
    double cy, cx, cz;  // center, voxel units
    double ry, rx, rz;  // semi-axes, voxel units
    double suv;
};

}  // namespace phantomdetail

// Synthetic co-registered PET/CT/mask triplet: lesions are ellipsoids with a
// smooth uptake profile peaking at the sampled SUV; the mask marks voxels
// whose center lies inside an ellipsoid; CT carries a low-frequency texture
// plus a density bump inside lesions. Fully deterministic per seed.
inline PhantomTriplet generate_phantom(const PhantomSpec& spec,
                                       const std::string& patient_id = "phantom") {
    spec.validate();
    const std::int64_t H = spec.shape[0], W = spec.shape[1], D = spec.shape[2];
    Rng rng(spec.seed);

    std::vector<phantomdetail::Ellipsoid> lesions;
    for (int l = 0; l < spec.num_lesions; ++l) {
        phantomdetail::Ellipsoid e;
        const double span = spec.lesion_radius_max_vox - spec.lesion_radius_min_vox;
        e.ry = spec.lesion_radius_min_vox + span * rng.uniform();
        e.rx = spec.lesion_radius_min_vox + span * rng.uniform();
        e.rz = spec.lesion_radius_min_vox + span * rng.uniform();
        const auto center = [&](double r, std::int64_t n) {
            const double lo = r + 1.0, hi = static_cast<double>(n) - 1.0 - r;
            return lo + (hi - lo) * rng.uniform();
        };
        e.cy = center(e.ry, H);
        e.cx = center(e.rx, W);
        e.cz = center(e.rz, D);
        e.suv = spec.lesion_suv_min + (spec.lesion_suv_max - spec.lesion_suv_min) * rng.uniform();
        lesions.push_back(e);
    }

    // Low-frequency CT texture: three fixed-order random cosine modes.
    struct Mode {
        double fy, fx, fz, phase;
    };
    std::array<Mode, 3> modes{};
    for (auto& m : modes) {
        m.fy = 1.0 + 2.0 * rng.uniform();
        m.fx = 1.0 + 2.0 * rng.uniform();
        m.fz = 1.0 + 2.0 * rng.uniform();
        m.phase = 2.0 * 3.14159265358979323846 * rng.uniform();
    }

    Tensor pet({H, W, D}), ct({H, W, D}), gt({H, W, D}, 0.0);
    constexpr double two_pi = 2.0 * 3.14159265358979323846;
    for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t x = 0; x < W; ++x)
            for (std::int64_t z = 0; z < D; ++z) {
                double suv = spec.background_suv;
                double hu = spec.ct_base_hu;
                for (const auto& m : modes)
                    hu += (spec.ct_texture_amp_hu / 3.0) *
                          std::cos(two_pi * (m.fy * y / static_cast<double>(H) +
                                             m.fx * x / static_cast<double>(W) +
                                             m.fz * z / static_cast<double>(D)) +
                                   m.phase);
                for (const auto& e : lesions) {
                    const double dy = (static_cast<double>(y) - e.cy) / e.ry;
                    const double dx = (static_cast<double>(x) - e.cx) / e.rx;
                    const double dz = (static_cast<double>(z) - e.cz) / e.rz;
                    const double r2 = dy * dy + dx * dx + dz * dz;
                    if (r2 <= 1.0) {
                        gt(y, x, z) = 1.0;
                        suv += (e.suv - spec.background_suv) * (1.0 - r2);
                        hu += spec.ct_lesion_delta_hu * (1.0 - r2);
                    }
                }
                pet(y, x, z) = std::max(0.0, suv + spec.pet_noise_sigma * rng.normal());
                ct(y, x, z) = hu + spec.ct_noise_sigma_hu * rng.normal();
            }

    return PhantomTriplet{
        Volume3D(std::move(pet), spec.spacing_mm, Modality::PET_SUV, patient_id),
        Volume3D(std::move(ct), spec.spacing_mm, Modality::CT_HU, patient_id),
        Volume3D(std::move(gt), spec.spacing_mm, Modality::MASK, patient_id)};
}

// Dataset directory layout: <id>_pet.nii / <id>_ct.nii / <id>_gt.nii triples.
struct PatientSample {
    Volume3D pet, ct, gt;
};

inline std::vector<std::string> list_patients(const std::string& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw core::DataError("not a directory: " + dir);
    std::vector<std::string> ids;
    for (const auto& ent : fs::directory_iterator(dir)) {
        const std::string name = ent.path().filename().string();
        for (const char* suffix : {"_pet.nii", "_pet.f3v"}) {
            const std::size_t len = std::strlen(suffix);
            if (name.size() > len && name.compare(name.size() - len, len, suffix) == 0)
                ids.push_back(name.substr(0, name.size() - len));
        }
    }
    std::sort(ids.begin(), ids.end());
    return ids;
}

inline std::string find_patient_file(const std::string& dir, const std::string& id,
                                     const std::string& kind) {
    namespace fs = std::filesystem;
    for (const char* ext : {".nii", ".f3v"}) {
        const fs::path p = fs::path(dir) / (id + "_" + kind + ext);
        if (fs::exists(p)) return p.string();
    }
    throw core::DataError("missing " + kind + " volume for patient " + id + " in " + dir);
}

inline PatientSample load_patient(const std::string& dir, const std::string& id) {
    PatientSample s{
        core::load_volume(find_patient_file(dir, id, "pet"), Modality::PET_SUV),
        core::load_volume(find_patient_file(dir, id, "ct"), Modality::CT_HU),
        core::load_volume(find_patient_file(dir, id, "gt"), Modality::MASK)};
    return s;
}

// Generates `count` phantoms (seed + index each) and writes the triples.
inline std::vector<std::string> write_phantom_dataset(const PhantomSpec& spec, int count,
                                                      const std::string& dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (!fs::is_directory(dir)) throw core::DataError("cannot create directory " + dir);
    std::vector<std::string> ids;
    for (int i = 0; i < count; ++i) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "phantom_%03d", i);
        PhantomSpec s = spec;
        s.seed = spec.seed + static_cast<std::uint64_t>(i);
        const PhantomTriplet t = generate_phantom(s, buf);
        core::save_volume(t.pet, (fs::path(dir) / (std::string(buf) + "_pet.nii")).string());
        core::save_volume(t.ct, (fs::path(dir) / (std::string(buf) + "_ct.nii")).string());
        core::save_volume(t.gt, (fs::path(dir) / (std::string(buf) + "_gt.nii")).string());
        ids.emplace_back(buf);
    }
    return ids;
}

}  // namespace fuseg3d::harness
