#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "fuseg3d/core/errors.hpp"
#include "fuseg3d/preprocess/preprocess.hpp"

namespace fuseg3d::core {

struct ModelConfig {
    int patch_size = 2;
    int embed_dim = 24;
    int num_heads = 4;
    std::array<int, 4> depths{2, 2, 2, 2};
    int window_size = 7;
    int conv_stem_channels = 16;
    int in_channels = 1;  // per modality
    bool relative_position_bias = true;

    void validate() const {
        if (patch_size < 1) throw ConfigError("model: patch_size must be >= 1");
        if (window_size < 1) throw ConfigError("model: window_size must be >= 1");
        if (embed_dim < 1 || num_heads < 1 || embed_dim % num_heads != 0)
            throw ConfigError("model: embed_dim must be a positive multiple of num_heads");
        if (conv_stem_channels < 1) throw ConfigError("model: conv_stem_channels must be >= 1");
        if (in_channels < 1) throw ConfigError("model: in_channels must be >= 1");
        for (int d : depths)
            if (d < 1) throw ConfigError("model: every stage depth must be >= 1");
    }

    nlohmann::json to_json() const {
        return nlohmann::json{{"patch_size", patch_size},
                              {"embed_dim", embed_dim},
                              {"num_heads", num_heads},
                              {"depths", depths},
                              {"window_size", window_size},
                              {"conv_stem_channels", conv_stem_channels},
                              {"in_channels", in_channels},
                              {"relative_position_bias", relative_position_bias}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.patch_size = j.value("patch_size", c.patch_size);
        c.embed_dim = j.value("embed_dim", c.embed_dim);
        c.num_heads = j.value("num_heads", c.num_heads);
        if (j.contains("depths")) c.depths = j.at("depths").get<std::array<int, 4>>();
        c.window_size = j.value("window_size", c.window_size);
        c.conv_stem_channels = j.value("conv_stem_channels", c.conv_stem_channels);
        c.in_channels = j.value("in_channels", c.in_channels);
        c.relative_position_bias = j.value("relative_position_bias", c.relative_position_bias);
        return c;
    }
};

struct MsifConfig {
    std::vector<int> kernels{1, 3, 5};
    bool conventional_values = false;  // true: cross-attention takes V from the query modality
    int reduction_ratio = 4;
    // module toggles for the ablation wirings
    bool multi_scale = true;      // MSF: multi-kernel extraction + outer fusion conv
    bool cross_attention = true;  // CMA: windowed cross-attention + gated fusion + CBAM
    bool gated_fusion = true;     // GFM: gates inside the outer multi-scale fusion

    std::vector<int> active_kernels() const {
        return multi_scale ? kernels : std::vector<int>{3};
    }

    void validate() const {
        if (kernels.empty()) throw ConfigError("msif: kernels must be non-empty");
        for (int k : kernels)
            if (k < 1 || k % 2 == 0)
                throw ConfigError("msif: kernel sizes must be odd and >= 1");
        if (reduction_ratio < 1) throw ConfigError("msif: reduction_ratio must be >= 1");
    }

    nlohmann::json to_json() const {
        return nlohmann::json{{"kernels", kernels},
                              {"conventional_values", conventional_values},
                              {"reduction_ratio", reduction_ratio},
                              {"multi_scale", multi_scale},
                              {"cross_attention", cross_attention},
                              {"gated_fusion", gated_fusion}};
    }

    static MsifConfig from_json(const nlohmann::json& j) {
        MsifConfig c;
        if (j.contains("kernels")) c.kernels = j.at("kernels").get<std::vector<int>>();
        c.conventional_values = j.value("conventional_values", c.conventional_values);
        c.reduction_ratio = j.value("reduction_ratio", c.reduction_ratio);
        c.multi_scale = j.value("multi_scale", c.multi_scale);
        c.cross_attention = j.value("cross_attention", c.cross_attention);
        c.gated_fusion = j.value("gated_fusion", c.gated_fusion);
        return c;
    }
};

struct TrainConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    int window_depth = 32;
    int folds = 5;
    std::uint64_t seed = 0;
    int max_steps = 500;
    int steps_per_eval = 25;       // one validation round every N optimizer steps
    int early_stop_patience = 20;  // validation rounds without DSC improvement
    int plateau_patience = 10;     // validation rounds without loss improvement
    double plateau_factor = 0.5;
    double loss_epsilon = 1e-5;
    int batch_size = 1;
    int infer_stride = 0;  // 0 selects window_depth / 2
    double binarize_tau = 0.5;

    int effective_infer_stride() const {
        return infer_stride > 0 ? infer_stride : std::max(1, window_depth / 2);
    }

    void validate() const {
        if (!(lr > 0.0)) throw ConfigError("train: lr must be > 0");
        if (!(beta1 > 0.0 && beta1 < 1.0)) throw ConfigError("train: beta1 must be in (0,1)");
        if (!(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("train: beta2 must be in (0,1)");
        if (window_depth < 2) throw ConfigError("train: window_depth must be >= 2");
        if (folds < 2) throw ConfigError("train: folds must be >= 2");
        if (max_steps < 1) throw ConfigError("train: max_steps must be >= 1");
        if (steps_per_eval < 1) throw ConfigError("train: steps_per_eval must be >= 1");
        if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
        if (!(loss_epsilon > 0.0)) throw ConfigError("train: loss_epsilon must be > 0");
        if (!(plateau_factor > 0.0 && plateau_factor < 1.0))
            throw ConfigError("train: plateau_factor must be in (0,1)");
        if (!(binarize_tau > 0.0 && binarize_tau < 1.0))
            throw ConfigError("train: binarize_tau must be in (0,1)");
    }

    nlohmann::json to_json() const {
        return nlohmann::json{{"lr", lr},
                              {"beta1", beta1},
                              {"beta2", beta2},
                              {"adam_eps", adam_eps},
                              {"window_depth", window_depth},
                              {"folds", folds},
                              {"seed", seed},
                              {"max_steps", max_steps},
                              {"steps_per_eval", steps_per_eval},
                              {"early_stop_patience", early_stop_patience},
                              {"plateau_patience", plateau_patience},
                              {"plateau_factor", plateau_factor},
                              {"loss_epsilon", loss_epsilon},
                              {"batch_size", batch_size},
                              {"infer_stride", infer_stride},
                              {"binarize_tau", binarize_tau}};
    }

    static TrainConfig from_json(const nlohmann::json& j) {
        TrainConfig c;
        c.lr = j.value("lr", c.lr);
        c.beta1 = j.value("beta1", c.beta1);
        c.beta2 = j.value("beta2", c.beta2);
        c.adam_eps = j.value("adam_eps", c.adam_eps);
        c.window_depth = j.value("window_depth", c.window_depth);
        c.folds = j.value("folds", c.folds);
        c.seed = j.value("seed", c.seed);
        c.max_steps = j.value("max_steps", c.max_steps);
        c.steps_per_eval = j.value("steps_per_eval", c.steps_per_eval);
        c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
        c.plateau_patience = j.value("plateau_patience", c.plateau_patience);
        c.plateau_factor = j.value("plateau_factor", c.plateau_factor);
        c.loss_epsilon = j.value("loss_epsilon", c.loss_epsilon);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.infer_stride = j.value("infer_stride", c.infer_stride);
        c.binarize_tau = j.value("binarize_tau", c.binarize_tau);
        return c;
    }
};

// The single JSON config the CLI consumes: {preprocess, model, msif, train}.
struct FullConfig {
    preprocess::PreprocessConfig preprocess;
    ModelConfig model;
    MsifConfig msif;
    TrainConfig train;

    void validate() const {
        preprocess.validate();
        model.validate();
        msif.validate();
        train.validate();
    }

    nlohmann::json to_json() const {
        nlohmann::json p{{"target_inplane", preprocess.target_inplane},
                         {"crop_inplane", preprocess.crop_inplane},
                         {"ct_window_level", preprocess.ct_window_level},
                         {"ct_window_width", preprocess.ct_window_width},
                         {"suv_clip", preprocess.suv_clip}};
        return nlohmann::json{{"preprocess", p},
                              {"model", model.to_json()},
                              {"msif", msif.to_json()},
                              {"train", train.to_json()}};
    }

    static FullConfig from_json(const nlohmann::json& j) {
        FullConfig c;
        if (j.contains("preprocess")) {
            const auto& p = j.at("preprocess");
            c.preprocess.target_inplane = p.value("target_inplane", c.preprocess.target_inplane);
            c.preprocess.crop_inplane = p.value("crop_inplane", c.preprocess.crop_inplane);
            c.preprocess.ct_window_level =
                p.value("ct_window_level", c.preprocess.ct_window_level);
            c.preprocess.ct_window_width =
                p.value("ct_window_width", c.preprocess.ct_window_width);
            c.preprocess.suv_clip = p.value("suv_clip", c.preprocess.suv_clip);
        }
        if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
        if (j.contains("msif")) c.msif = MsifConfig::from_json(j.at("msif"));
        if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
        return c;
    }
};

}  // namespace fuseg3d::core
