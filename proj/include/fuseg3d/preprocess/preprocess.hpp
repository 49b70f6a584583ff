#pragma once

#include <utility>

#include "fuseg3d/core/volume.hpp"

namespace fuseg3d::preprocess {

using core::AcquisitionMeta;
using core::ConfigError;
using core::DataError;
using core::Modality;
using core::Tensor;
using core::Volume3D;

struct PreprocessConfig {
    int target_inplane = 256;
    int crop_inplane = 224;
    double ct_window_level = 40.0;   // HU
    double ct_window_width = 400.0;  // HU
    double suv_clip = 0.0;           // optional upper clip on SUV; <= 0 disables

    void validate() const {
        if (crop_inplane > target_inplane)
            throw ConfigError("preprocess: crop_inplane must be <= target_inplane");
        if (!(ct_window_width > 0.0)) throw ConfigError("preprocess: ct_window_width must be > 0");
        if (target_inplane < 1) throw ConfigError("preprocess: target_inplane must be >= 1");
    }
};

// Body-weight-corrected SUV: v -> (RS*v + RI) / (A * exp(-0.693*(t1-t0)/T_half) / (W*1000)).
inline Volume3D suv_bw(const Volume3D& pet, const AcquisitionMeta& meta) {
    meta.validate();
    const double decayed =
        meta.injected_dose_bq * std::exp(-0.693 * (meta.t1_s - meta.t0_s) / meta.half_life_s);
    const double factor = (meta.weight_kg * 1000.0) / decayed;
    Tensor out(pet.data().shape());
    const Tensor& in = pet.data();
    for (std::int64_t i = 0; i < in.numel(); ++i)
        out[i] = (meta.rescale_slope * in[i] + meta.rescale_intercept) * factor;
    return pet.with_data(std::move(out), Modality::PET_SUV);
}

// Maps [level - width/2, level + width/2] onto [0, 1], clamped.
inline Volume3D ct_window(const Volume3D& ct, const PreprocessConfig& cfg) {
    if (ct.modality() != Modality::CT_HU)
        throw ConfigError("ct_window: input modality must be CT_HU");
    const double lo = cfg.ct_window_level - cfg.ct_window_width / 2.0;
    Tensor out(ct.data().shape());
    const Tensor& in = ct.data();
    for (std::int64_t i = 0; i < in.numel(); ++i)
        out[i] = std::clamp((in[i] - lo) / cfg.ct_window_width, 0.0, 1.0);
    return ct.with_data(std::move(out), Modality::CT_NORM);
}

namespace detail {

// Catmull-Rom kernel (a = -0.5).
inline double cubic_weight(double x) {
    constexpr double a = -0.5;
    x = std::abs(x);
    if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
    if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
    return 0.0;
}

inline std::int64_t mirror_index(std::int64_t i, std::int64_t n) {
    while (i < 0 || i >= n) {
        if (i < 0) i = -i - 1;
        if (i >= n) i = 2 * n - 1 - i;
    }
    return i;
}

// 1-D bicubic resampling plan: 4 taps per output sample, weights normalized
// so constants are preserved exactly.
struct ResamplePlan {
    std::vector<std::int64_t> taps;   // 4 per output
    std::vector<double> weights;      // 4 per output
    std::int64_t out_n;

    ResamplePlan(std::int64_t in_n, std::int64_t out_n_) : out_n(out_n_) {
        taps.resize(static_cast<std::size_t>(4 * out_n));
        weights.resize(static_cast<std::size_t>(4 * out_n));
        const double scale = static_cast<double>(in_n) / static_cast<double>(out_n);
        for (std::int64_t o = 0; o < out_n; ++o) {
            const double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
            const std::int64_t base = static_cast<std::int64_t>(std::floor(src));
            const double f = src - static_cast<double>(base);
            double wsum = 0.0;
            for (int t = 0; t < 4; ++t) {
                const std::int64_t it = base - 1 + t;
                const double w = cubic_weight(static_cast<double>(t - 1) - f);
                taps[static_cast<std::size_t>(4 * o + t)] = mirror_index(it, in_n);
                weights[static_cast<std::size_t>(4 * o + t)] = w;
                wsum += w;
            }
            for (int t = 0; t < 4; ++t) weights[static_cast<std::size_t>(4 * o + t)] /= wsum;
        }
    }
};

}  // namespace detail

// Resamples every axial slice to target x target with bicubic interpolation;
// slice count unchanged, in-plane spacing rescaled to preserve extent.
inline Volume3D resample_inplane(const Volume3D& v, int target) {
    if (target < 1) throw ConfigError("resample: target must be >= 1");
    const std::int64_t H = v.height(), W = v.width(), D = v.depth(), T = target;
    const detail::ResamplePlan rows(H, T), cols(W, T);

    Tensor mid({T, W, D});  // rows resampled
    const Tensor& in = v.data();
    for (std::int64_t oy = 0; oy < T; ++oy)
        for (std::int64_t x = 0; x < W; ++x)
            for (std::int64_t z = 0; z < D; ++z) {
                double acc = 0.0;
                for (int t = 0; t < 4; ++t)
                    acc += rows.weights[static_cast<std::size_t>(4 * oy + t)] *
                           in(rows.taps[static_cast<std::size_t>(4 * oy + t)], x, z);
                mid(oy, x, z) = acc;
            }
    Tensor out({T, T, D});
    for (std::int64_t y = 0; y < T; ++y)
        for (std::int64_t ox = 0; ox < T; ++ox)
            for (std::int64_t z = 0; z < D; ++z) {
                double acc = 0.0;
                for (int t = 0; t < 4; ++t)
                    acc += cols.weights[static_cast<std::size_t>(4 * ox + t)] *
                           mid(y, cols.taps[static_cast<std::size_t>(4 * ox + t)], z);
                out(y, ox, z) = acc;
            }
    const auto sp = v.spacing_mm();
    const std::array<double, 3> nsp{sp[0] * static_cast<double>(W) / static_cast<double>(T),
                                    sp[1] * static_cast<double>(H) / static_cast<double>(T),
                                    sp[2]};
    return Volume3D(std::move(out), nsp, v.modality(), v.patient_id());
}

// Central crop x crop region of every slice; start offset floor((size-crop)/2).
inline Volume3D center_crop(const Volume3D& v, int crop) {
    const std::int64_t H = v.height(), W = v.width(), D = v.depth(), C = crop;
    if (C > H || C > W) throw ConfigError("center_crop: crop larger than in-plane size");
    const std::int64_t oy = (H - C) / 2, ox = (W - C) / 2;
    Tensor out({C, C, D});
    const Tensor& in = v.data();
    for (std::int64_t y = 0; y < C; ++y)
        for (std::int64_t x = 0; x < C; ++x)
            for (std::int64_t z = 0; z < D; ++z) out(y, x, z) = in(y + oy, x + ox, z);
    return Volume3D(std::move(out), v.spacing_mm(), v.modality(), v.patient_id());
}

// Full pipeline: intensity transform -> resample -> crop, applied to a
// co-registered PET/CT pair with identical slice counts. PET_SUV / CT_NORM
// inputs skip the respective intensity step.
inline std::pair<Volume3D, Volume3D> preprocess_pair(const Volume3D& pet, const Volume3D& ct,
                                                     const AcquisitionMeta* meta,
                                                     const PreprocessConfig& cfg) {
    cfg.validate();
    if (pet.depth() != ct.depth())
        throw DataError("preprocess_pair: PET and CT slice counts differ");

    Volume3D suv = [&] {
        if (pet.modality() == Modality::PET_SUV) return pet;
        if (pet.modality() != Modality::PET_RAW)
            throw ConfigError("preprocess_pair: PET modality must be PET_RAW or PET_SUV");
        if (!meta) throw ConfigError("preprocess_pair: PET_RAW input needs acquisition metadata");
        return suv_bw(pet, *meta);
    }();
    if (cfg.suv_clip > 0.0) {
        Tensor t = suv.data().clone();
        for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = std::min(t[i], cfg.suv_clip);
        suv = suv.with_data(std::move(t), Modality::PET_SUV);
    }
    Volume3D ctn = [&] {
        if (ct.modality() == Modality::CT_NORM) return ct;
        return ct_window(ct, cfg);
    }();

    suv = center_crop(resample_inplane(suv, cfg.target_inplane), cfg.crop_inplane);
    ctn = center_crop(resample_inplane(ctn, cfg.target_inplane), cfg.crop_inplane);
    return {std::move(suv), std::move(ctn)};
}

}  // namespace fuseg3d::preprocess
