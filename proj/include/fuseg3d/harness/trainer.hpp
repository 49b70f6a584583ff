#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "fuseg3d/ad/autodiff.hpp"
#include "fuseg3d/ad/ops_nn.hpp"
#include "fuseg3d/core/config.hpp"
#include "fuseg3d/core/errors.hpp"
#include "fuseg3d/core/volume.hpp"
#include "fuseg3d/harness/data.hpp"
#include "fuseg3d/harness/optim.hpp"
#include "fuseg3d/harness/phantom.hpp"
#include "fuseg3d/metrics/metrics.hpp"
#include "fuseg3d/nn/model.hpp"
#include "fuseg3d/preprocess/preprocess.hpp"
#include "fuseg3d/stats/tmtv_stats.hpp"

namespace fuseg3d::harness {

using ad::Var;
using core::AcquisitionMeta;
using core::Modality;
using core::Tensor;
using core::Volume3D;

// ---- sample preparation -----------------------------------------------------

// Ground-truth masks follow the same geometric path as the images (resample,
// then crop) and are re-binarized at 0.5 afterwards. The intermediate is
// relabeled CT_HU because interpolation overshoot would violate the MASK/PROB
// range invariants.
inline Volume3D prepare_mask(const Volume3D& gt, const preprocess::PreprocessConfig& cfg) {
    Volume3D cont = gt.with_data(gt.data().clone(), Modality::CT_HU);
    cont = preprocess::center_crop(preprocess::resample_inplane(cont, cfg.target_inplane),
                                   cfg.crop_inplane);
    Tensor b = cont.data().clone();
    for (std::int64_t i = 0; i < b.numel(); ++i) b[i] = b[i] > 0.5 ? 1.0 : 0.0;
    return cont.with_data(std::move(b), Modality::MASK);
}

// A patient on the model grid: PET in SUV, CT normalized, mask aligned.
struct PreparedPatient {
    std::string id;
    Volume3D pet, ct, gt;
};

inline PreparedPatient prepare_patient(const PatientSample& s,
                                       const preprocess::PreprocessConfig& cfg,
                                       const AcquisitionMeta* meta = nullptr) {
    if (s.gt.depth() != s.pet.depth())
        throw core::DataError("prepare_patient: mask slice count differs from PET");
    auto [suv, ctn] = preprocess::preprocess_pair(s.pet, s.ct, meta, cfg);
    Volume3D gt = prepare_mask(s.gt, cfg);
    std::string id = s.pet.patient_id().empty() ? s.gt.patient_id() : s.pet.patient_id();
    return {std::move(id), std::move(suv), std::move(ctn), std::move(gt)};
}

// ---- sliding-window inference -----------------------------------------------

// Stitched full-volume probability map: depth-pad to one window, run every
// window under NoGrad, average overlaps, crop back. Deterministic and
// independent of window order by construction.
inline Volume3D infer_volume(nn::SegmentationModel& model, const Volume3D& pet,
                             const Volume3D& ct, const core::TrainConfig& tcfg) {
    if (pet.height() != ct.height() || pet.width() != ct.width() || pet.depth() != ct.depth())
        throw core::DataError("infer_volume: PET/CT dimensions differ");
    const std::int64_t H = pet.height(), W = pet.width(), D = pet.depth();
    const std::int64_t wd = tcfg.window_depth;
    const Tensor pt = pad_depth_to(pet.data(), wd);
    const Tensor ctn = pad_depth_to(ct.data(), wd);
    const std::int64_t Dp = pt.shape()[2];

    std::vector<std::pair<std::int64_t, Tensor>> outs;
    ad::NoGrad ng;
    for (std::int64_t off : window_offsets(Dp, wd, tcfg.effective_infer_stride())) {
        const Tensor pw = extract_window(pt, off, wd).reshaped({1, 1, H, W, wd});
        const Tensor cw = extract_window(ctn, off, wd).reshaped({1, 1, H, W, wd});
        const Var y = model.forward(Var(pw), Var(cw));
        outs.emplace_back(off, y.value().reshaped({H, W, wd}));
    }
    Tensor stitched = stitch_windows(H, W, Dp, std::move(outs));
    if (Dp != D) stitched = extract_window(stitched, 0, D);
    return Volume3D(std::move(stitched), pet.spacing_mm(), Modality::PROB, pet.patient_id());
}

// ---- evaluation ---------------------------------------------------------------

struct PatientEval {
    std::string id;
    metrics::SegmentationScores scores;
    double ctmtv_ml = 0.0, gtmtv_ml = 0.0;
};

struct EvalResult {
    std::vector<PatientEval> rows;
    std::vector<stats::TMTVRecord> tmtv;
};

inline EvalResult evaluate_patients(nn::SegmentationModel& model,
                                    const std::vector<PreparedPatient>& patients,
                                    const core::FullConfig& cfg, int fold_index = 0) {
    EvalResult res;
    for (const auto& p : patients) {
        const Volume3D prob = infer_volume(model, p.pet, p.ct, cfg.train);
        PatientEval e;
        e.id = p.id;
        e.scores = metrics::score_pair(prob, p.gt, cfg.train.binarize_tau);
        e.ctmtv_ml = stats::tmtv_ml(metrics::binarize(prob, cfg.train.binarize_tau));
        e.gtmtv_ml = stats::tmtv_ml(p.gt);
        res.tmtv.push_back({e.id, e.ctmtv_ml, e.gtmtv_ml, fold_index});
        res.rows.push_back(std::move(e));
    }
    return res;
}

inline void write_metrics_csv(const std::string& path, const std::vector<PatientEval>& rows) {
    std::ofstream f(path);
    if (!f) throw core::DataError("cannot write " + path);
    f << "patient_id,DSC,sensitivity,precision\n";
    f << std::setprecision(17);
    for (const auto& r : rows)
        f << r.id << ',' << r.scores.dice << ',' << r.scores.sensitivity << ','
          << r.scores.precision << '\n';
}

// ---- training -----------------------------------------------------------------

struct TrainSample {
    Tensor pet, ct, gt;  // one [H,W,window_depth] window per volume
};

struct TrainHistory {
    std::vector<double> loss;      // per optimizer step
    std::vector<double> val_dsc;   // per validation round
    std::vector<double> val_loss;  // soft Dice loss on stitched validation volumes
    std::vector<double> lr;        // learning rate in effect at each round
    int best_round = -1;
    double best_val_dsc = -1.0;
    int steps_run = 0;
    bool early_stopped = false;
};

struct TrainResult {
    TrainHistory history;
    Checkpoint best;
};

namespace traindetail {

struct WindowedPatient {
    Tensor pet, ct, gt;                 // depth-padded to >= window_depth
    std::vector<std::int64_t> offsets;  // non-overlapping, end-aligned
};

inline Tensor stack_windows(const std::vector<Tensor>& ws) {
    const auto& s = ws.front().shape();
    Tensor out({static_cast<std::int64_t>(ws.size()), 1, s[0], s[1], s[2]});
    const std::int64_t n = ws.front().numel();
    for (std::size_t b = 0; b < ws.size(); ++b)
        std::memcpy(out.data() + static_cast<std::int64_t>(b) * n, ws[b].data(),
                    static_cast<std::size_t>(n) * sizeof(double));
    return out;
}

}  // namespace traindetail

// Adam + Dice-loss training with reduce-on-plateau and early stopping, both
// driven by validation rounds every `steps_per_eval` steps. Window sampling
// runs on a producer thread behind a bounded queue; its RNG is independent of
// thread timing, so fixed seeds reproduce loss curves bitwise. When `val_set`
// is empty the training patients double as the validation set (single-sample
// overfit runs). `stop_at_dsc` ends training once validation DSC reaches it.
inline TrainResult train_model(nn::SegmentationModel& model,
                               const std::vector<PreparedPatient>& train_set,
                               const std::vector<PreparedPatient>& val_set,
                               const core::FullConfig& cfg,
                               std::optional<double> stop_at_dsc = std::nullopt) {
    cfg.validate();
    if (train_set.empty()) throw core::DataError("train: empty training set");
    const core::TrainConfig& tc = cfg.train;
    const std::vector<PreparedPatient>& vset = val_set.empty() ? train_set : val_set;

    std::vector<traindetail::WindowedPatient> windows;
    windows.reserve(train_set.size());
    for (const auto& p : train_set) {
        traindetail::WindowedPatient w;
        w.pet = pad_depth_to(p.pet.data(), tc.window_depth);
        w.ct = pad_depth_to(p.ct.data(), tc.window_depth);
        w.gt = pad_depth_to(p.gt.data(), tc.window_depth);
        w.offsets = window_offsets(w.pet.shape()[2], tc.window_depth, tc.window_depth);
        windows.push_back(std::move(w));
    }

    Adam opt(model.parameters(), tc);
    TrainHistory hist;

    const std::int64_t total_samples =
        static_cast<std::int64_t>(tc.max_steps) * tc.batch_size;
    BoundedQueue<TrainSample> queue(static_cast<std::size_t>(std::max(4, 2 * tc.batch_size)));
    std::thread producer([&windows, &queue, &tc, total_samples] {
        core::Rng rng(tc.seed ^ 0x9e3779b97f4a7c15ull);
        for (std::int64_t i = 0; i < total_samples; ++i) {
            const auto& w = windows[static_cast<std::size_t>(
                rng.index(static_cast<std::int64_t>(windows.size())))];
            const std::int64_t off = w.offsets[static_cast<std::size_t>(
                rng.index(static_cast<std::int64_t>(w.offsets.size())))];
            TrainSample s{extract_window(w.pet, off, tc.window_depth),
                          extract_window(w.ct, off, tc.window_depth),
                          extract_window(w.gt, off, tc.window_depth)};
            if (!queue.push(std::move(s))) return;  // consumer stopped early
        }
    });

    Checkpoint best;
    bool have_best = false;
    double best_val_loss = std::numeric_limits<double>::infinity();
    int rounds_since_dsc_gain = 0, rounds_since_loss_gain = 0;
    bool stop = false;

    for (int step = 1; step <= tc.max_steps && !stop; ++step) {
        std::vector<Tensor> bp, bc, bg;
        for (int b = 0; b < tc.batch_size; ++b) {
            auto s = queue.pop();
            if (!s) throw core::NumericalError("train: sample queue closed unexpectedly");
            bp.push_back(std::move(s->pet));
            bc.push_back(std::move(s->ct));
            bg.push_back(std::move(s->gt));
        }
        const Var pred = model.forward(Var(traindetail::stack_windows(bp)),
                                       Var(traindetail::stack_windows(bc)));
        const Var loss = ad::soft_dice_loss(pred, traindetail::stack_windows(bg),
                                            tc.loss_epsilon);
        const double lv = loss.value()[0];
        if (!std::isfinite(lv))
            throw core::NumericalError("train: non-finite loss at step " + std::to_string(step));
        hist.loss.push_back(lv);
        hist.steps_run = step;
        opt.zero_grad();
        ad::backward(loss);
        opt.step();

        if (step % tc.steps_per_eval != 0 && step != tc.max_steps) continue;

        double dsc_sum = 0.0, vloss_sum = 0.0;
        for (const auto& p : vset) {
            const Volume3D prob = infer_volume(model, p.pet, p.ct, tc);
            dsc_sum += metrics::score_pair(prob, p.gt, tc.binarize_tau).dice;
            vloss_sum += metrics::dice_loss(prob, p.gt, tc.loss_epsilon);
        }
        const double vd = dsc_sum / static_cast<double>(vset.size());
        const double vl = vloss_sum / static_cast<double>(vset.size());
        hist.val_dsc.push_back(vd);
        hist.val_loss.push_back(vl);
        hist.lr.push_back(opt.lr());
        const int round = static_cast<int>(hist.val_dsc.size()) - 1;

        if (vd > hist.best_val_dsc) {
            hist.best_val_dsc = vd;
            hist.best_round = round;
            best = snapshot(cfg, opt.params(), &opt);
            have_best = true;
            rounds_since_dsc_gain = 0;
        } else if (++rounds_since_dsc_gain >= tc.early_stop_patience) {
            hist.early_stopped = true;
            stop = true;
        }
        if (vl < best_val_loss) {
            best_val_loss = vl;
            rounds_since_loss_gain = 0;
        } else if (++rounds_since_loss_gain >= tc.plateau_patience) {
            opt.set_lr(opt.lr() * tc.plateau_factor);
            rounds_since_loss_gain = 0;
        }
        if (stop_at_dsc && vd >= *stop_at_dsc) stop = true;
    }

    queue.close();
    producer.join();
    if (!have_best) best = snapshot(cfg, opt.params(), &opt);
    return {std::move(hist), std::move(best)};
}

}  // namespace fuseg3d::harness
