#pragma once

#include "fuseg3d/ad/ops_nn.hpp"
#include "fuseg3d/core/volume.hpp"

namespace fuseg3d::metrics {

using core::DataError;
using core::Modality;
using core::Tensor;
using core::Volume3D;

// Strictly-greater thresholding of a probability map into a binary mask.
inline Volume3D binarize(const Volume3D& prob, double tau = 0.5) {
    if (prob.modality() != Modality::PROB)
        throw DataError("binarize: input modality must be PROB");
    Tensor out(prob.data().shape());
    const Tensor& in = prob.data();
    for (std::int64_t i = 0; i < in.numel(); ++i) out[i] = in[i] > tau ? 1.0 : 0.0;
    return prob.with_data(std::move(out), Modality::MASK);
}

struct ConfusionCounts {
    std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

inline ConfusionCounts confusion(const Volume3D& pred, const Volume3D& gt) {
    if (pred.modality() != Modality::MASK || gt.modality() != Modality::MASK)
        throw DataError("confusion: both inputs must be MASK volumes");
    if (pred.data().shape() != gt.data().shape())
        throw DataError("confusion: shape mismatch " + pred.data().shape_str() + " vs " +
                        gt.data().shape_str());
    ConfusionCounts c;
    const Tensor &p = pred.data(), &g = gt.data();
    for (std::int64_t i = 0; i < p.numel(); ++i) {
        const bool pp = p[i] > 0.5, gg = g[i] > 0.5;
        if (pp && gg) ++c.tp;
        else if (pp) ++c.fp;
        else if (gg) ++c.fn;
        else ++c.tn;
    }
    return c;
}

// Empty-vs-empty scores 1.0; empty-vs-nonempty scores 0.0.
inline double dsc(const ConfusionCounts& c) {
    const double den = static_cast<double>(2 * c.tp + c.fp + c.fn);
    if (den == 0.0) return 1.0;
    return 2.0 * static_cast<double>(c.tp) / den;
}

inline double sensitivity(const ConfusionCounts& c) {
    if (c.tp + c.fn == 0) return c.fp == 0 ? 1.0 : 0.0;
    return static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
}

inline double precision(const ConfusionCounts& c) {
    if (c.tp + c.fp == 0) return c.fn == 0 ? 1.0 : 0.0;
    return static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
}

struct SegmentationScores {
    double dice = 0.0, sensitivity = 0.0, precision = 0.0;
};

inline SegmentationScores score_pair(const Volume3D& prob, const Volume3D& gt, double tau = 0.5) {
    const ConfusionCounts c = confusion(binarize(prob, tau), gt);
    return {dsc(c), sensitivity(c), precision(c)};
}

// Soft Dice loss on plain volumes (no gradient): 1 - (2*sum(p*g)+eps)/(sum(p)+sum(g)+eps).
inline double dice_loss(const Volume3D& prob, const Volume3D& gt, double eps = 1e-5) {
    if (prob.data().shape() != gt.data().shape())
        throw DataError("dice_loss: shape mismatch");
    const Tensor &p = prob.data(), &g = gt.data();
    double num = 0.0, den = 0.0;
    for (std::int64_t i = 0; i < p.numel(); ++i) {
        num += p[i] * g[i];
        den += p[i] + g[i];
    }
    return 1.0 - (2.0 * num + eps) / (den + eps);
}

}  // namespace fuseg3d::metrics
