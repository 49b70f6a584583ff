#pragma once

#include <array>
#include <string>

#include "fuseg3d/core/errors.hpp"
#include "fuseg3d/core/tensor.hpp"

namespace fuseg3d::core {

enum class Modality { PET_RAW, PET_SUV, CT_HU, CT_NORM, MASK, PROB };

inline const char* modality_name(Modality m) {
    switch (m) {
        case Modality::PET_RAW: return "PET_RAW";
        case Modality::PET_SUV: return "PET_SUV";
        case Modality::CT_HU: return "CT_HU";
        case Modality::CT_NORM: return "CT_NORM";
        case Modality::MASK: return "MASK";
        case Modality::PROB: return "PROB";
    }
    return "?";
}

inline Modality modality_from_name(const std::string& s) {
    if (s == "PET_RAW") return Modality::PET_RAW;
    if (s == "PET_SUV") return Modality::PET_SUV;
    if (s == "CT_HU") return Modality::CT_HU;
    if (s == "CT_NORM") return Modality::CT_NORM;
    if (s == "MASK") return Modality::MASK;
    if (s == "PROB") return Modality::PROB;
    throw DataError("unknown modality tag: " + s);
}

// Scalar grid of shape (H, W, D) with physical voxel spacing in mm.
// spacing_mm = (sx, sy, sz): sx along W, sy along H, sz along D.
class Volume3D {
public:
    Volume3D() = default;

    Volume3D(Tensor data, std::array<double, 3> spacing_mm, Modality modality,
             std::string patient_id = "")
        : data_(std::move(data)),
          spacing_(spacing_mm),
          modality_(modality),
          patient_id_(std::move(patient_id)) {
        if (data_.dim() != 3) throw DataError("volume: data must be rank-3");
        for (double s : spacing_)
            if (!(s > 0.0)) throw DataError("volume: spacing components must be positive");
        validate_values();
    }

    const Tensor& data() const { return data_; }
    Tensor& data() { return data_; }
    const std::array<double, 3>& spacing_mm() const { return spacing_; }
    Modality modality() const { return modality_; }
    const std::string& patient_id() const { return patient_id_; }
    void set_patient_id(std::string id) { patient_id_ = std::move(id); }

    std::int64_t height() const { return data_.size(0); }
    std::int64_t width() const { return data_.size(1); }
    std::int64_t depth() const { return data_.size(2); }
    double voxel_volume_mm3() const { return spacing_[0] * spacing_[1] * spacing_[2]; }

    Volume3D with_data(Tensor t, Modality m) const {
        return Volume3D(std::move(t), spacing_, m, patient_id_);
    }
    Volume3D with_spacing(std::array<double, 3> sp) const {
        return Volume3D(data_, sp, modality_, patient_id_);
    }

private:
    void validate_values() const {
        if (modality_ == Modality::MASK) {
            for (std::int64_t i = 0; i < data_.numel(); ++i)
                if (data_[i] != 0.0 && data_[i] != 1.0)
                    throw DataError("volume: MASK values must be 0 or 1");
        } else if (modality_ == Modality::PROB) {
            for (std::int64_t i = 0; i < data_.numel(); ++i)
                if (!(data_[i] >= 0.0 && data_[i] <= 1.0))
                    throw DataError("volume: PROB values must lie in [0,1]");
        }
    }

    Tensor data_;
    std::array<double, 3> spacing_{1.0, 1.0, 1.0};
    Modality modality_ = Modality::PET_RAW;
    std::string patient_id_;
};

// PET acquisition parameters feeding the SUV computation.
struct AcquisitionMeta {
    double rescale_slope = 1.0;       // RS
    double rescale_intercept = 0.0;   // RI
    double injected_dose_bq = 0.0;    // A
    double half_life_s = 0.0;         // T1/2
    double t0_s = 0.0;                // injection time
    double t1_s = 0.0;                // acquisition time
    double weight_kg = 0.0;           // W

    void validate() const {
        if (!(injected_dose_bq > 0.0)) throw ConfigError("acquisition: injected dose must be > 0");
        if (!(half_life_s > 0.0)) throw ConfigError("acquisition: half-life must be > 0");
        if (!(weight_kg > 0.0)) throw ConfigError("acquisition: weight must be > 0");
        if (t1_s < t0_s) throw ConfigError("acquisition: t1 must not precede t0");
    }
};

}  // namespace fuseg3d::core
