#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fuseg3d/core/volume.hpp"

namespace fuseg3d::stats {

using core::ConfigError;
using core::DataError;
using core::Modality;
using core::Volume3D;

// Total metabolic tumor volume: positive-voxel count x voxel volume, in mL.
inline double tmtv_ml(const Volume3D& mask) {
    if (mask.modality() != Modality::MASK) throw DataError("tmtv: input modality must be MASK");
    std::int64_t count = 0;
    const auto& d = mask.data();
    for (std::int64_t i = 0; i < d.numel(); ++i) {
        if (d[i] != 0.0 && d[i] != 1.0) throw DataError("tmtv: mask is not binary");
        count += d[i] == 1.0 ? 1 : 0;
    }
    return static_cast<double>(count) * mask.voxel_volume_mm3() / 1000.0;
}

struct TMTVRecord {
    std::string patient_id;
    double ctmtv_ml = 0.0;
    double gtmtv_ml = 0.0;
    int fold_index = 0;
};

struct AgreementReport {
    double slope = 0.0, intercept = 0.0;
    double r_squared = 0.0, pearson_r = 0.0;
    double mean_diff = 0.0, sd_diff = 0.0;
    double loa_low = 0.0, loa_high = 0.0;  // mean_diff -/+ 1.96 * sample SD
    std::int64_t n = 0;
};

// OLS of cTMTV on gTMTV with intercept, Pearson r, and Bland-Altman
// statistics of the differences cTMTV - gTMTV (sample SD, n-1).
inline AgreementReport fit_agreement(const std::vector<TMTVRecord>& records) {
    const std::int64_t n = static_cast<std::int64_t>(records.size());
    if (n < 3) throw ConfigError("fit_agreement: need at least 3 records");
    long double gm = 0.0L, cm = 0.0L;
    for (const auto& r : records) {
        gm += r.gtmtv_ml;
        cm += r.ctmtv_ml;
    }
    gm /= n;
    cm /= n;
    long double sgg = 0.0L, scc = 0.0L, sgc = 0.0L;
    for (const auto& r : records) {
        const long double dg = r.gtmtv_ml - gm, dc = r.ctmtv_ml - cm;
        sgg += dg * dg;
        scc += dc * dc;
        sgc += dg * dc;
    }
    if (sgg == 0.0L) throw DataError("fit_agreement: degenerate variance in gTMTV");
    if (scc == 0.0L) throw DataError("fit_agreement: degenerate variance in cTMTV");

    AgreementReport rep;
    rep.n = n;
    const long double slope = sgc / sgg;
    rep.slope = static_cast<double>(slope);
    rep.intercept = static_cast<double>(cm - slope * gm);
    rep.pearson_r = static_cast<double>(sgc / std::sqrt(sgg * scc));
    long double ssres = 0.0L;
    for (const auto& r : records) {
        const long double e = r.ctmtv_ml - (cm + slope * (r.gtmtv_ml - gm));
        ssres += e * e;
    }
    rep.r_squared = static_cast<double>(1.0L - ssres / scc);

    long double dmean = 0.0L;
    for (const auto& r : records) dmean += r.ctmtv_ml - r.gtmtv_ml;
    dmean /= n;
    long double dvar = 0.0L;
    for (const auto& r : records) {
        const long double e = (r.ctmtv_ml - r.gtmtv_ml) - dmean;
        dvar += e * e;
    }
    rep.mean_diff = static_cast<double>(dmean);
    rep.sd_diff = static_cast<double>(std::sqrt(dvar / (n - 1)));
    rep.loa_low = rep.mean_diff - 1.96 * rep.sd_diff;
    rep.loa_high = rep.mean_diff + 1.96 * rep.sd_diff;
    return rep;
}

// Paired test statistic t = mean(a-b) / (SD(a-b)/sqrt(n)), sample SD.
inline double paired_t_statistic(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw ConfigError("paired_t: length mismatch");
    const std::int64_t n = static_cast<std::int64_t>(a.size());
    if (n < 2) throw ConfigError("paired_t: need at least 2 pairs");
    long double m = 0.0L;
    for (std::int64_t i = 0; i < n; ++i) m += a[static_cast<std::size_t>(i)] - b[static_cast<std::size_t>(i)];
    m /= n;
    long double v = 0.0L;
    for (std::int64_t i = 0; i < n; ++i) {
        const long double e = (a[static_cast<std::size_t>(i)] - b[static_cast<std::size_t>(i)]) - m;
        v += e * e;
    }
    const long double sd = std::sqrt(v / (n - 1));
    if (sd == 0.0L) return m == 0.0L ? 0.0 : throw DataError("paired_t: degenerate variance in differences");
    return static_cast<double>(m / (sd / std::sqrt(static_cast<long double>(n))));
}

inline nlohmann::json agreement_to_json(const AgreementReport& r) {
    return nlohmann::json{{"slope", r.slope},         {"intercept", r.intercept},
                          {"r_squared", r.r_squared}, {"pearson_r", r.pearson_r},
                          {"mean_diff", r.mean_diff}, {"sd_diff", r.sd_diff},
                          {"loa_low", r.loa_low},     {"loa_high", r.loa_high},
                          {"n", r.n}};
}

inline AgreementReport agreement_from_json(const nlohmann::json& j) {
    AgreementReport r;
    r.slope = j.at("slope").get<double>();
    r.intercept = j.at("intercept").get<double>();
    r.r_squared = j.at("r_squared").get<double>();
    r.pearson_r = j.at("pearson_r").get<double>();
    r.mean_diff = j.at("mean_diff").get<double>();
    r.sd_diff = j.at("sd_diff").get<double>();
    r.loa_low = j.at("loa_low").get<double>();
    r.loa_high = j.at("loa_high").get<double>();
    r.n = j.at("n").get<std::int64_t>();
    return r;
}

inline void write_tmtv_csv(const std::string& path, const std::vector<TMTVRecord>& records) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write " + path);
    f << "patient_id,fold,cTMTV_mL,gTMTV_mL\n";
    f << std::setprecision(17);
    for (const auto& r : records)
        f << r.patient_id << ',' << r.fold_index << ',' << r.ctmtv_ml << ',' << r.gtmtv_ml << '\n';
}

inline std::vector<TMTVRecord> read_tmtv_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot read " + path);
    std::string line;
    if (!std::getline(f, line)) throw DataError("empty CSV: " + path);
    std::vector<TMTVRecord> out;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string id, fold, c, g;
        if (!std::getline(ss, id, ',') || !std::getline(ss, fold, ',') ||
            !std::getline(ss, c, ',') || !std::getline(ss, g, ','))
            throw DataError("malformed CSV row in " + path + ": " + line);
        TMTVRecord r;
        r.patient_id = id;
        try {
            r.fold_index = std::stoi(fold);
            r.ctmtv_ml = std::stod(c);
            r.gtmtv_ml = std::stod(g);
        } catch (const std::exception&) {
            throw DataError("malformed CSV row in " + path + ": " + line);
        }
        out.push_back(std::move(r));
    }
    return out;
}

namespace plotdetail {

struct AxisMap {
    double lo, hi, p0, p1;  // data range -> pixel range
    double operator()(double v) const { return p0 + (v - lo) / (hi - lo) * (p1 - p0); }
};

inline AxisMap make_axis(double lo, double hi, double p0, double p1) {
    if (hi - lo < 1e-12) {
        lo -= 1.0;
        hi += 1.0;
    }
    const double pad = 0.08 * (hi - lo);
    return {lo - pad, hi + pad, p0, p1};
}

inline std::string fmt(double v) {
    std::ostringstream o;
    o << std::setprecision(4) << v;
    return o.str();
}

inline void svg_header(std::ostream& o, const std::string& title) {
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"480\" "
         "viewBox=\"0 0 640 480\">\n"
      << "<rect width=\"640\" height=\"480\" fill=\"white\"/>\n"
      << "<text x=\"320\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" << title
      << "</text>\n";
}

inline void svg_axes(std::ostream& o, const AxisMap& xm, const AxisMap& ym,
                     const std::string& xlabel, const std::string& ylabel) {
    o << "<line x1=\"70\" y1=\"420\" x2=\"600\" y2=\"420\" stroke=\"black\"/>\n"
      << "<line x1=\"70\" y1=\"40\" x2=\"70\" y2=\"420\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double fx = xm.lo + (xm.hi - xm.lo) * i / 4.0;
        const double fy = ym.lo + (ym.hi - ym.lo) * i / 4.0;
        o << "<text x=\"" << xm(fx) << "\" y=\"438\" text-anchor=\"middle\" font-size=\"11\">"
          << fmt(fx) << "</text>\n"
          << "<text x=\"62\" y=\"" << ym(fy) + 4
          << "\" text-anchor=\"end\" font-size=\"11\">" << fmt(fy) << "</text>\n";
    }
    o << "<text x=\"335\" y=\"465\" text-anchor=\"middle\" font-size=\"13\">" << xlabel
      << "</text>\n"
      << "<text x=\"18\" y=\"230\" text-anchor=\"middle\" font-size=\"13\" "
         "transform=\"rotate(-90 18 230)\">"
      << ylabel << "</text>\n";
}

}  // namespace plotdetail

// Scatter of cTMTV vs gTMTV with the fitted line and the identity line.
inline void write_regression_svg(const std::string& path, const std::vector<TMTVRecord>& records,
                                 const AgreementReport& rep) {
    using namespace plotdetail;
    double lo = 0.0, hi = 1.0;
    if (!records.empty()) {
        lo = hi = records.front().gtmtv_ml;
        for (const auto& r : records) {
            lo = std::min({lo, r.gtmtv_ml, r.ctmtv_ml});
            hi = std::max({hi, r.gtmtv_ml, r.ctmtv_ml});
        }
    }
    const AxisMap xm = make_axis(lo, hi, 70.0, 600.0);
    const AxisMap ym = make_axis(lo, hi, 420.0, 40.0);
    std::ofstream f(path);
    if (!f) throw DataError("cannot write " + path);
    svg_header(f, "Linear regression of cTMTV vs gTMTV");
    svg_axes(f, xm, ym, "gTMTV (mL)", "cTMTV (mL)");
    f << "<line x1=\"" << xm(xm.lo) << "\" y1=\"" << ym(xm.lo) << "\" x2=\"" << xm(xm.hi)
      << "\" y2=\"" << ym(xm.hi) << "\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>\n";
    f << "<line x1=\"" << xm(xm.lo) << "\" y1=\"" << ym(rep.intercept + rep.slope * xm.lo)
      << "\" x2=\"" << xm(xm.hi) << "\" y2=\"" << ym(rep.intercept + rep.slope * xm.hi)
      << "\" stroke=\"crimson\" stroke-width=\"1.5\"/>\n";
    for (const auto& r : records)
        f << "<circle cx=\"" << xm(r.gtmtv_ml) << "\" cy=\"" << ym(r.ctmtv_ml)
          << "\" r=\"3\" fill=\"steelblue\" fill-opacity=\"0.8\"/>\n";
    f << "<text x=\"90\" y=\"56\" font-size=\"12\">y = " << fmt(rep.slope) << "x + "
      << fmt(rep.intercept) << ",  R^2 = " << fmt(rep.r_squared) << ",  r = "
      << fmt(rep.pearson_r) << "</text>\n</svg>\n";
}

// Bland-Altman: differences vs means with mean line and limits of agreement.
inline void write_bland_altman_svg(const std::string& path,
                                   const std::vector<TMTVRecord>& records,
                                   const AgreementReport& rep) {
    using namespace plotdetail;
    double xlo = 0.0, xhi = 1.0, ylo = rep.loa_low, yhi = rep.loa_high;
    if (!records.empty()) {
        xlo = xhi = 0.5 * (records.front().ctmtv_ml + records.front().gtmtv_ml);
        for (const auto& r : records) {
            const double m = 0.5 * (r.ctmtv_ml + r.gtmtv_ml), d = r.ctmtv_ml - r.gtmtv_ml;
            xlo = std::min(xlo, m);
            xhi = std::max(xhi, m);
            ylo = std::min(ylo, d);
            yhi = std::max(yhi, d);
        }
    }
    const AxisMap xm = make_axis(xlo, xhi, 70.0, 600.0);
    const AxisMap ym = make_axis(ylo, yhi, 420.0, 40.0);
    std::ofstream f(path);
    if (!f) throw DataError("cannot write " + path);
    svg_header(f, "Bland-Altman agreement of cTMTV and gTMTV");
    svg_axes(f, xm, ym, "mean of cTMTV and gTMTV (mL)", "cTMTV - gTMTV (mL)");
    const auto hline = [&](double y, const char* color, const char* dash) {
        f << "<line x1=\"70\" y1=\"" << ym(y) << "\" x2=\"600\" y2=\"" << ym(y) << "\" stroke=\""
          << color << "\" stroke-dasharray=\"" << dash << "\"/>\n";
    };
    hline(rep.mean_diff, "crimson", "none");
    hline(rep.loa_low, "gray", "5 3");
    hline(rep.loa_high, "gray", "5 3");
    for (const auto& r : records)
        f << "<circle cx=\"" << xm(0.5 * (r.ctmtv_ml + r.gtmtv_ml)) << "\" cy=\""
          << ym(r.ctmtv_ml - r.gtmtv_ml) << "\" r=\"3\" fill=\"steelblue\" "
             "fill-opacity=\"0.8\"/>\n";
    f << "<text x=\"90\" y=\"56\" font-size=\"12\">mean " << fmt(rep.mean_diff) << ",  LoA ["
      << fmt(rep.loa_low) << ", " << fmt(rep.loa_high) << "]</text>\n</svg>\n";
}

// Writes regression_<tag>.svg, bland_altman_<tag>.svg, and stats_<tag>.json.
inline std::vector<std::string> emit_agreement_plots(const AgreementReport& rep,
                                                     const std::vector<TMTVRecord>& records,
                                                     const std::string& out_dir,
                                                     const std::string& tag) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (!fs::is_directory(out_dir)) throw DataError("cannot create directory " + out_dir);
    const std::string reg = (fs::path(out_dir) / ("regression_" + tag + ".svg")).string();
    const std::string ba = (fs::path(out_dir) / ("bland_altman_" + tag + ".svg")).string();
    const std::string js = (fs::path(out_dir) / ("stats_" + tag + ".json")).string();
    write_regression_svg(reg, records, rep);
    write_bland_altman_svg(ba, records, rep);
    std::ofstream f(js);
    if (!f) throw DataError("cannot write " + js);
    f << agreement_to_json(rep).dump(2) << '\n';
    return {reg, ba, js};
}

}  // namespace fuseg3d::stats
