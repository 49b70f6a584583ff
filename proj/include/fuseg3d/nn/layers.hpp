#pragma once

#include <string>
#include <utility>
#include <vector>

#include "fuseg3d/ad/ops_nn.hpp"

namespace fuseg3d::nn {

using ad::Var;
using core::Rng;
using core::Tensor;

// Ordered (name -> parameter) listing; order is the checkpoint order.
using ParamMap = std::vector<std::pair<std::string, Var>>;

inline void add_param(ParamMap& out, const std::string& name, const Var& v) {
    out.emplace_back(name, v);
}

inline Tensor trunc_normal_tensor(std::vector<std::int64_t> shape, Rng& rng, double sigma = 0.02) {
    Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.trunc_normal(sigma);
    return t;
}

struct Linear {
    Var w, b;
    bool has_bias = true;

    Linear() = default;
    Linear(std::int64_t cin, std::int64_t cout, Rng& rng, bool bias = true, bool zero_init = false)
        : has_bias(bias) {
        w = Var(zero_init ? Tensor({cin, cout}) : trunc_normal_tensor({cin, cout}, rng), true);
        if (bias) b = Var(Tensor({cout}), true);
    }

    Var forward(const Var& x) const { return ad::linear(x, w, has_bias ? b : Var()); }

    void collect(const std::string& p, ParamMap& out) const {
        add_param(out, p + ".weight", w);
        if (has_bias) add_param(out, p + ".bias", b);
    }
};

struct Conv3d {
    Var w, b;
    std::int64_t stride = 1, pad = 0;
    bool has_bias = true;

    Conv3d() = default;
    Conv3d(std::int64_t cin, std::int64_t cout, std::int64_t k, std::int64_t stride_,
           std::int64_t pad_, Rng& rng, bool bias = true, bool zero_init = false)
        : stride(stride_), pad(pad_), has_bias(bias) {
        w = Var(zero_init ? Tensor({cout, cin, k, k, k})
                          : trunc_normal_tensor({cout, cin, k, k, k}, rng),
                true);
        if (bias) b = Var(Tensor({cout}), true);
    }

    Var forward(const Var& x) const { return ad::conv3d(x, w, has_bias ? b : Var(), stride, pad); }

    void collect(const std::string& p, ParamMap& out) const {
        add_param(out, p + ".weight", w);
        if (has_bias) add_param(out, p + ".bias", b);
    }
};

struct ConvTranspose3d {
    Var w, b;
    std::int64_t stride = 2;

    ConvTranspose3d() = default;
    ConvTranspose3d(std::int64_t cin, std::int64_t cout, std::int64_t k, std::int64_t stride_,
                    Rng& rng)
        : stride(stride_) {
        w = Var(trunc_normal_tensor({cin, cout, k, k, k}, rng), true);
        b = Var(Tensor({cout}), true);
    }

    Var forward(const Var& x) const { return ad::conv_transpose3d(x, w, b, stride); }

    void collect(const std::string& p, ParamMap& out) const {
        add_param(out, p + ".weight", w);
        add_param(out, p + ".bias", b);
    }
};

struct LayerNorm {
    Var gamma, beta;
    double eps = 1e-5;

    LayerNorm() = default;
    explicit LayerNorm(std::int64_t c) {
        gamma = Var(Tensor({c}, 1.0), true);
        beta = Var(Tensor({c}), true);
    }

    // Normalizes the last axis.
    Var forward(const Var& x) const { return ad::layer_norm_lastdim(x, gamma, beta, eps); }

    // Normalizes the channel axis of [B, C, H, W, D].
    Var forward_channels(const Var& x) const {
        Var t = ad::permute(x, {0, 2, 3, 4, 1});
        t = ad::layer_norm_lastdim(t, gamma, beta, eps);
        return ad::permute(t, {0, 4, 1, 2, 3});
    }

    void collect(const std::string& p, ParamMap& out) const {
        add_param(out, p + ".weight", gamma);
        add_param(out, p + ".bias", beta);
    }
};

struct InstanceNorm3d {
    Var gamma, beta;
    double eps = 1e-5;

    InstanceNorm3d() = default;
    explicit InstanceNorm3d(std::int64_t c) {
        gamma = Var(Tensor({c}, 1.0), true);
        beta = Var(Tensor({c}), true);
    }

    Var forward(const Var& x) const { return ad::instance_norm(x, gamma, beta, eps); }

    void collect(const std::string& p, ParamMap& out) const {
        add_param(out, p + ".weight", gamma);
        add_param(out, p + ".bias", beta);
    }
};

// Pointwise conv + sigmoid, the gating unit used throughout fusion.
struct Gate {
    Conv3d conv;

    Gate() = default;
    Gate(std::int64_t c, Rng& rng) : conv(c, c, 1, 1, 0, rng) {}

    Var forward(const Var& x) const { return ad::sigmoid(conv.forward(x)); }

    void collect(const std::string& p, ParamMap& out) const { conv.collect(p + ".conv", out); }
};

}  // namespace fuseg3d::nn
