#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>

#include <json.hpp>

#include "fuseg3d/core/volume.hpp"

namespace fuseg3d::core {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace niftidetail {

// NIfTI-1 single-file header (348 bytes + 4 pad), little-endian host assumed.
#pragma pack(push, 1)
struct Nifti1Header {
    std::int32_t sizeof_hdr;
    char data_type[10];
    char db_name[18];
    std::int32_t extents;
    std::int16_t session_error;
    char regular;
    char dim_info;
    std::int16_t dim[8];
    float intent_p1, intent_p2, intent_p3;
    std::int16_t intent_code;
    std::int16_t datatype;
    std::int16_t bitpix;
    std::int16_t slice_start;
    float pixdim[8];
    float vox_offset;
    float scl_slope;
    float scl_inter;
    std::int16_t slice_end;
    char slice_code;
    char xyzt_units;
    float cal_max, cal_min;
    float slice_duration;
    float toffset;
    std::int32_t glmax, glmin;
    char descrip[80];
    char aux_file[24];
    std::int16_t qform_code, sform_code;
    float quatern_b, quatern_c, quatern_d;
    float qoffset_x, qoffset_y, qoffset_z;
    float srow_x[4], srow_y[4], srow_z[4];
    char intent_name[16];
    char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(Nifti1Header) == 348, "NIfTI-1 header must be 348 bytes");

constexpr std::int16_t DT_UINT8 = 2;
constexpr std::int16_t DT_INT16 = 4;
constexpr std::int16_t DT_FLOAT32 = 16;
constexpr std::int16_t DT_FLOAT64 = 64;

}  // namespace niftidetail

inline fs::path sidecar_path(const fs::path& image_path) {
    fs::path p = image_path;
    p.replace_extension(".json");
    return p;
}

struct SidecarMeta {
    Modality modality;
    std::string patient_id;
    std::optional<AcquisitionMeta> acquisition;
};

inline void write_sidecar(const fs::path& image_path, const Volume3D& v,
                          const std::optional<AcquisitionMeta>& acq = std::nullopt) {
    json j;
    j["modality"] = modality_name(v.modality());
    j["patient_id"] = v.patient_id();
    if (acq) {
        j["acquisition"] = {{"rescale_slope", acq->rescale_slope},
                            {"rescale_intercept", acq->rescale_intercept},
                            {"injected_dose_bq", acq->injected_dose_bq},
                            {"half_life_s", acq->half_life_s},
                            {"t0_s", acq->t0_s},
                            {"t1_s", acq->t1_s},
                            {"weight_kg", acq->weight_kg}};
    }
    std::ofstream out(sidecar_path(image_path));
    if (!out) throw DataError("cannot write sidecar for " + image_path.string());
    out << j.dump(2) << '\n';
}

inline std::optional<SidecarMeta> read_sidecar(const fs::path& image_path) {
    const fs::path p = sidecar_path(image_path);
    std::ifstream in(p);
    if (!in) return std::nullopt;
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw DataError("malformed sidecar " + p.string() + ": " + e.what());
    }
    SidecarMeta m;
    m.modality = modality_from_name(j.value("modality", std::string("PET_RAW")));
    m.patient_id = j.value("patient_id", std::string());
    if (j.contains("acquisition")) {
        const auto& a = j["acquisition"];
        AcquisitionMeta acq;
        acq.rescale_slope = a.value("rescale_slope", 1.0);
        acq.rescale_intercept = a.value("rescale_intercept", 0.0);
        acq.injected_dose_bq = a.value("injected_dose_bq", 0.0);
        acq.half_life_s = a.value("half_life_s", 0.0);
        acq.t0_s = a.value("t0_s", 0.0);
        acq.t1_s = a.value("t1_s", 0.0);
        acq.weight_kg = a.value("weight_kg", 0.0);
        m.acquisition = acq;
    }
    return m;
}

namespace niftidetail {

inline void write_nifti(const fs::path& path, const Volume3D& v) {
    Nifti1Header h;
    std::memset(&h, 0, sizeof(h));
    h.sizeof_hdr = 348;
    h.regular = 'r';
    const std::int64_t H = v.height(), W = v.width(), D = v.depth();
    h.dim[0] = 3;
    h.dim[1] = static_cast<std::int16_t>(W);  // x (fastest in file)
    h.dim[2] = static_cast<std::int16_t>(H);  // y
    h.dim[3] = static_cast<std::int16_t>(D);  // z
    for (int a = 4; a < 8; ++a) h.dim[a] = 1;
    const bool as_u8 = v.modality() == Modality::MASK;
    h.datatype = as_u8 ? DT_UINT8 : DT_FLOAT64;
    h.bitpix = as_u8 ? 8 : 64;
    h.pixdim[0] = 1.0f;
    h.pixdim[1] = static_cast<float>(v.spacing_mm()[0]);
    h.pixdim[2] = static_cast<float>(v.spacing_mm()[1]);
    h.pixdim[3] = static_cast<float>(v.spacing_mm()[2]);
    h.vox_offset = 352.0f;
    h.scl_slope = 1.0f;
    h.scl_inter = 0.0f;
    h.xyzt_units = 2;  // millimetres
    h.sform_code = 1;
    h.srow_x[0] = h.pixdim[1];
    h.srow_y[1] = h.pixdim[2];
    h.srow_z[2] = h.pixdim[3];
    std::memcpy(h.magic, "n+1", 4);

    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open for writing: " + path.string());
    out.write(reinterpret_cast<const char*>(&h), sizeof(h));
    const char pad[4] = {0, 0, 0, 0};
    out.write(pad, 4);

    // file order: x fastest, then y, then z
    const Tensor& t = v.data();
    if (as_u8) {
        std::vector<std::uint8_t> buf(static_cast<std::size_t>(t.numel()));
        std::size_t n = 0;
        for (std::int64_t z = 0; z < D; ++z)
            for (std::int64_t y = 0; y < H; ++y)
                for (std::int64_t x = 0; x < W; ++x)
                    buf[n++] = static_cast<std::uint8_t>(t(y, x, z));
        out.write(reinterpret_cast<const char*>(buf.data()),
                  static_cast<std::streamsize>(buf.size()));
    } else {
        std::vector<double> buf(static_cast<std::size_t>(t.numel()));
        std::size_t n = 0;
        for (std::int64_t z = 0; z < D; ++z)
            for (std::int64_t y = 0; y < H; ++y)
                for (std::int64_t x = 0; x < W; ++x) buf[n++] = t(y, x, z);
        out.write(reinterpret_cast<const char*>(buf.data()),
                  static_cast<std::streamsize>(buf.size() * sizeof(double)));
    }
    if (!out) throw DataError("short write: " + path.string());
}

inline Volume3D read_nifti(const fs::path& path, Modality modality, std::string patient_id) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open: " + path.string());
    Nifti1Header h;
    in.read(reinterpret_cast<char*>(&h), sizeof(h));
    if (!in || h.sizeof_hdr != 348)
        throw DataError("corrupted or unsupported header: " + path.string());
    if (std::strncmp(h.magic, "n+1", 3) != 0)
        throw DataError("not a single-file NIfTI-1 image: " + path.string());
    if (h.dim[0] != 3) throw DataError("only 3-D images supported: " + path.string());
    const std::int64_t W = h.dim[1], H = h.dim[2], D = h.dim[3];
    if (W < 1 || H < 1 || D < 1) throw DataError("bad dimensions: " + path.string());
    if (!(h.pixdim[1] > 0.0f && h.pixdim[2] > 0.0f && h.pixdim[3] > 0.0f))
        throw DataError("missing or non-positive voxel spacing: " + path.string());

    in.seekg(static_cast<std::streamoff>(h.vox_offset), std::ios::beg);
    const std::int64_t n = W * H * D;
    std::vector<double> raw(static_cast<std::size_t>(n));
    auto read_as = [&](auto tag) {
        using T = decltype(tag);
        std::vector<T> buf(static_cast<std::size_t>(n));
        in.read(reinterpret_cast<char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(T)));
        if (!in) throw DataError("truncated voxel data: " + path.string());
        for (std::int64_t i = 0; i < n; ++i) raw[static_cast<std::size_t>(i)] =
            static_cast<double>(buf[static_cast<std::size_t>(i)]);
    };
    switch (h.datatype) {
        case DT_UINT8: read_as(std::uint8_t{}); break;
        case DT_INT16: read_as(std::int16_t{}); break;
        case DT_FLOAT32: read_as(float{}); break;
        case DT_FLOAT64: read_as(double{}); break;
        default: throw DataError("unsupported NIfTI datatype: " + path.string());
    }
    const double slope = (h.scl_slope == 0.0f) ? 1.0 : static_cast<double>(h.scl_slope);
    const double inter = static_cast<double>(h.scl_inter);
    Tensor t({H, W, D});
    std::size_t i = 0;
    for (std::int64_t z = 0; z < D; ++z)
        for (std::int64_t y = 0; y < H; ++y)
            for (std::int64_t x = 0; x < W; ++x) t(y, x, z) = slope * raw[i++] + inter;
    return Volume3D(std::move(t),
                    {static_cast<double>(h.pixdim[1]), static_cast<double>(h.pixdim[2]),
                     static_cast<double>(h.pixdim[3])},
                    modality, std::move(patient_id));
}

}  // namespace niftidetail

namespace rawdetail {

constexpr char MAGIC[8] = {'F', '3', 'D', 'V', 'O', 'L', '0', '1'};

inline void write_raw(const fs::path& path, const Volume3D& v) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open for writing: " + path.string());
    out.write(MAGIC, 8);
    const std::uint32_t mod = static_cast<std::uint32_t>(v.modality());
    out.write(reinterpret_cast<const char*>(&mod), 4);
    const std::uint32_t idlen = static_cast<std::uint32_t>(v.patient_id().size());
    out.write(reinterpret_cast<const char*>(&idlen), 4);
    out.write(v.patient_id().data(), idlen);
    const std::int64_t dims[3] = {v.height(), v.width(), v.depth()};
    out.write(reinterpret_cast<const char*>(dims), sizeof(dims));
    out.write(reinterpret_cast<const char*>(v.spacing_mm().data()), 3 * sizeof(double));
    out.write(reinterpret_cast<const char*>(v.data().data()),
              static_cast<std::streamsize>(v.data().numel() * sizeof(double)));
    if (!out) throw DataError("short write: " + path.string());
}

inline Volume3D read_raw(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open: " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, MAGIC, 8) != 0)
        throw DataError("corrupted header: " + path.string());
    std::uint32_t mod = 0, idlen = 0;
    in.read(reinterpret_cast<char*>(&mod), 4);
    in.read(reinterpret_cast<char*>(&idlen), 4);
    if (mod > static_cast<std::uint32_t>(Modality::PROB) || idlen > 4096)
        throw DataError("corrupted header: " + path.string());
    std::string id(idlen, '\0');
    in.read(id.data(), idlen);
    std::int64_t dims[3];
    in.read(reinterpret_cast<char*>(dims), sizeof(dims));
    std::array<double, 3> spacing;
    in.read(reinterpret_cast<char*>(spacing.data()), 3 * sizeof(double));
    if (!in || dims[0] < 1 || dims[1] < 1 || dims[2] < 1)
        throw DataError("corrupted header: " + path.string());
    Tensor t({dims[0], dims[1], dims[2]});
    in.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!in) throw DataError("truncated voxel data: " + path.string());
    return Volume3D(std::move(t), spacing, static_cast<Modality>(mod), std::move(id));
}

}  // namespace rawdetail

// Saves .nii (NIfTI-1 + JSON sidecar) or the toolkit's raw .f3v container,
// chosen by extension.
inline void save_volume(const Volume3D& v, const fs::path& path,
                        const std::optional<AcquisitionMeta>& acq = std::nullopt) {
    const auto ext = path.extension().string();
    if (ext == ".nii") {
        niftidetail::write_nifti(path, v);
        write_sidecar(path, v, acq);
    } else if (ext == ".f3v") {
        rawdetail::write_raw(path, v);
    } else {
        throw DataError("unsupported volume format: " + path.string());
    }
}

// Loads a volume; for NIfTI the modality comes from the sidecar, falling back
// to `fallback_modality` when no sidecar exists.
inline Volume3D load_volume(const fs::path& path,
                            std::optional<Modality> fallback_modality = std::nullopt) {
    if (!fs::exists(path)) throw DataError("no such file: " + path.string());
    const auto ext = path.extension().string();
    if (ext == ".f3v") return rawdetail::read_raw(path);
    if (ext != ".nii") throw DataError("unsupported volume format: " + path.string());
    auto meta = read_sidecar(path);
    Modality m;
    std::string pid;
    if (meta) {
        m = meta->modality;
        pid = meta->patient_id;
    } else if (fallback_modality) {
        m = *fallback_modality;
    } else {
        throw DataError("no sidecar and no modality flag for: " + path.string());
    }
    return niftidetail::read_nifti(path, m, std::move(pid));
}

inline std::optional<AcquisitionMeta> load_acquisition(const fs::path& image_path) {
    auto meta = read_sidecar(image_path);
    if (meta && meta->acquisition) return meta->acquisition;
    return std::nullopt;
}

}  // namespace fuseg3d::core
