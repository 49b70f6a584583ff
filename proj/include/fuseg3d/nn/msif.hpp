#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "fuseg3d/core/config.hpp"
#include "fuseg3d/core/errors.hpp"
#include "fuseg3d/nn/layers.hpp"
#include "fuseg3d/nn/window_utils.hpp"

namespace fuseg3d::nn {

using core::DataError;
using core::MsifConfig;

// Channel attention: sigmoid weights from a shared two-layer MLP applied to
// both the average- and max-pooled channel descriptors.
struct ChannelAttention {
    Linear fc1, fc2;

    ChannelAttention() = default;
    ChannelAttention(std::int64_t c, std::int64_t reduction, Rng& rng)
        : fc1(c, std::max<std::int64_t>(1, c / reduction), rng),
          fc2(std::max<std::int64_t>(1, c / reduction), c, rng) {}

    Var forward(const Var& x) const {
        const Var a = fc2.forward(ad::relu(fc1.forward(ad::global_avg_pool(x))));
        const Var m = fc2.forward(ad::relu(fc1.forward(ad::global_max_pool(x))));
        return ad::scale_channels(x, ad::sigmoid(ad::add(a, m)));
    }

    void collect(const std::string& p, ParamMap& out) const {
        fc1.collect(p + ".fc1", out);
        fc2.collect(p + ".fc2", out);
    }
};

// Spatial attention: sigmoid map from a 7x7x7 conv over the channelwise
// mean and max maps.
struct SpatialAttention {
    Conv3d conv;

    SpatialAttention() = default;
    explicit SpatialAttention(Rng& rng) : conv(2, 1, 7, 1, 3, rng) {}

    Var forward(const Var& x) const {
        const Var maps = ad::concat_axis1({ad::channel_mean(x), ad::channel_max(x)});
        return ad::scale_spatial(x, ad::sigmoid(conv.forward(maps)));
    }

    void collect(const std::string& p, ParamMap& out) const { conv.collect(p + ".conv", out); }
};

namespace msifdetail {

// Pad + (optionally) roll + window-partition a [B, C, H, W, D] map into the
// token layout [B, nW, T, C] shared by both modalities of a branch.
inline Var to_tokens(const Var& x, const WindowGrid& g) {
    const auto& s = x.shape();
    Var t = ad::pad_end3d(x, g.Hp - s[2], g.Wp - s[3], g.Dp - s[4]);
    if (g.shifted()) t = ad::roll3d(t, g.shift[0], g.shift[1], g.shift[2]);
    return ad::window_partition5d(t, g.M);
}

inline Var to_volume(const Var& tokens, const WindowGrid& g, std::int64_t C, std::int64_t H,
                     std::int64_t W, std::int64_t D) {
    Var t = ad::window_reverse5d(tokens, g.M, C, g.Hp, g.Wp, g.Dp);
    if (g.shifted()) t = ad::roll3d(t, g.Hp - g.shift[0], g.Wp - g.shift[1], g.Dp - g.shift[2]);
    return ad::crop3d(t, 0, H, 0, W, 0, D);
}

// [B, nW, T, C] -> [B, nW, heads, T, C/heads]
inline Var split_heads(const Var& x, std::int64_t heads) {
    const auto& s = x.shape();
    return ad::permute(ad::reshape(x, {s[0], s[1], s[2], heads, s[3] / heads}),
                       {0, 1, 3, 2, 4});
}

inline Var merge_heads(const Var& x) {
    const auto& s = x.shape();  // [B, nW, heads, T, Dh]
    return ad::reshape(ad::permute(x, {0, 1, 3, 2, 4}), {s[0], s[1], s[3], s[2] * s[4]});
}

}  // namespace msifdetail

// One kernel branch of the fusion module: per-modality conv at kernel k,
// then either windowed cross-modal attention with gated fusion and
// channel/spatial attention, or (attention disabled) a plain normalized sum.
// Branch parity alternates regular and shifted window partitions.
struct MsifBranch {
    std::int64_t dim = 0, heads = 1, M = 7;
    bool shifted = false, use_attention = true, conventional_values = false;
    Conv3d conv_pet, conv_ct;
    Linear wq, wk, wv;  // shared across modalities, bias-free
    LayerNorm norm1, norm2;
    Gate gate1, gate2;
    Conv3d fuse;
    ChannelAttention channel_att;
    SpatialAttention spatial_att;

    MsifBranch() = default;
    MsifBranch(std::int64_t dim_, std::int64_t heads_, std::int64_t M_, std::int64_t kernel,
               bool shifted_, const MsifConfig& cfg, Rng& rng)
        : dim(dim_),
          heads(heads_),
          M(M_),
          shifted(shifted_),
          use_attention(cfg.cross_attention),
          conventional_values(cfg.conventional_values),
          conv_pet(dim_, dim_, kernel, 1, (kernel - 1) / 2, rng),
          conv_ct(dim_, dim_, kernel, 1, (kernel - 1) / 2, rng),
          norm1(dim_),
          norm2(dim_),
          fuse(dim_, dim_, 1, 1, 0, rng) {
        if (use_attention) {
            wq = Linear(dim_, dim_, rng, /*bias=*/false);
            wk = Linear(dim_, dim_, rng, /*bias=*/false);
            wv = Linear(dim_, dim_, rng, /*bias=*/false);
            gate1 = Gate(dim_, rng);
            gate2 = Gate(dim_, rng);
            channel_att = ChannelAttention(dim_, cfg.reduction_ratio, rng);
            spatial_att = SpatialAttention(rng);
        }
    }

    // Windowed cross-modal attention in the token layout [B, nW, T, C]:
    // Att1 attends modality-1 queries over modality-2 keys, Att2 the reverse;
    // values come from the query modality (or the key modality with
    // `conventional_values`). Projections are shared across modalities.
    std::pair<Var, Var> cross_attention(const Var& t1, const Var& t2,
                                        const Tensor& mask) const {
        const auto& ts = t1.shape();
        const Var flat1 = ad::reshape(t1, {ts[0] * ts[1] * ts[2], ts[3]});
        const Var flat2 = ad::reshape(t2, {ts[0] * ts[1] * ts[2], ts[3]});
        const auto proj = [&](const Linear& l, const Var& f) {
            return msifdetail::split_heads(ad::reshape(l.forward(f), ts), heads);
        };
        const Var q1 = proj(wq, flat1), k1 = proj(wk, flat1), v1 = proj(wv, flat1);
        const Var q2 = proj(wq, flat2), k2 = proj(wk, flat2), v2 = proj(wv, flat2);
        const double scale = 1.0 / std::sqrt(static_cast<double>(dim / heads));
        const Var att1 = msifdetail::merge_heads(
            ad::window_attention(q1, k2, conventional_values ? v2 : v1, Var(), mask, scale));
        const Var att2 = msifdetail::merge_heads(
            ad::window_attention(q2, k1, conventional_values ? v1 : v2, Var(), mask, scale));
        return {att1, att2};
    }

    Var forward(const Var& f_pet, const Var& f_ct) const {
        const Var fp = conv_pet.forward(f_pet);
        const Var fc = conv_ct.forward(f_ct);
        if (!use_attention)
            return fuse.forward(
                ad::add(norm1.forward_channels(fp), norm2.forward_channels(fc)));

        const auto& s = fp.shape();
        const std::int64_t H = s[2], W = s[3], D = s[4];
        const WindowGrid g = make_window_grid(H, W, D, M, shifted);
        const Tensor mask = build_attention_mask(g);

        const Var t1 = msifdetail::to_tokens(fp, g);
        const Var t2 = msifdetail::to_tokens(fc, g);
        const auto [att1, att2] = cross_attention(t1, t2, mask);

        const Var ff1 = norm1.forward(ad::mul(att1, t2));
        const Var ff2 = norm2.forward(ad::mul(att2, t1));
        const Var r1 = msifdetail::to_volume(ff1, g, dim, H, W, D);
        const Var r2 = msifdetail::to_volume(ff2, g, dim, H, W, D);
        const Var fused =
            fuse.forward(ad::add(gate1.forward(r1), gate2.forward(r2)));
        return spatial_att.forward(channel_att.forward(fused));
    }

    void collect(const std::string& p, ParamMap& out) const {
        conv_pet.collect(p + ".conv_pet", out);
        conv_ct.collect(p + ".conv_ct", out);
        if (use_attention) {
            wq.collect(p + ".wq", out);
            wk.collect(p + ".wk", out);
            wv.collect(p + ".wv", out);
        }
        norm1.collect(p + ".norm1", out);
        norm2.collect(p + ".norm2", out);
        if (use_attention) {
            gate1.collect(p + ".gate1", out);
            gate2.collect(p + ".gate2", out);
        }
        fuse.collect(p + ".fuse", out);
        if (use_attention) {
            channel_att.collect(p + ".channel_att", out);
            spatial_att.collect(p + ".spatial_att", out);
        }
    }
};

// Multi-Scale Information Fusion at one pyramid scale: per-kernel branches
// aggregated by (optionally gated) summation and a pointwise conv. With
// multi-scale disabled the single k=3 branch output is returned directly.
struct MsifModule {
    std::int64_t dim = 0;
    bool multi_scale = true, gated_fusion = true;
    std::vector<MsifBranch> branches;
    std::vector<Gate> scale_gates;
    Conv3d final_conv;

    MsifModule() = default;
    MsifModule(std::int64_t dim_, std::int64_t heads, std::int64_t M, const MsifConfig& cfg,
               Rng& rng)
        : dim(dim_), multi_scale(cfg.multi_scale), gated_fusion(cfg.gated_fusion) {
        cfg.validate();
        if (dim_ % heads != 0)
            throw core::ConfigError("msif: channels " + std::to_string(dim_) +
                                    " not divisible by num_heads " + std::to_string(heads));
        const auto kernels = cfg.active_kernels();
        for (std::size_t i = 0; i < kernels.size(); ++i)
            branches.emplace_back(dim_, heads, M, kernels[i], i % 2 == 1, cfg, rng);
        if (multi_scale) {
            if (gated_fusion)
                for (std::size_t i = 0; i < kernels.size(); ++i)
                    scale_gates.emplace_back(dim_, rng);
            final_conv = Conv3d(dim_, dim_, 1, 1, 0, rng);
        }
    }

    Var forward(const Var& f_pet, const Var& f_ct) const {
        if (f_pet.shape() != f_ct.shape())
            throw DataError("msif: modality feature shapes differ: " +
                            f_pet.value().shape_str() + " vs " + f_ct.value().shape_str());
        if (f_pet.shape().size() != 5 || f_pet.shape()[1] != dim)
            throw DataError("msif: expected [B," + std::to_string(dim) +
                            ",H,W,D], got " + f_pet.value().shape_str());
        std::vector<Var> outs;
        outs.reserve(branches.size());
        for (const auto& b : branches) outs.push_back(b.forward(f_pet, f_ct));
        if (!multi_scale) return outs[0];
        Var acc;
        for (std::size_t i = 0; i < outs.size(); ++i) {
            const Var term = gated_fusion ? scale_gates[i].forward(outs[i]) : outs[i];
            acc = acc.defined() ? ad::add(acc, term) : term;
        }
        return final_conv.forward(acc);
    }

    void collect(const std::string& p, ParamMap& out) const {
        for (std::size_t i = 0; i < branches.size(); ++i)
            branches[i].collect(p + ".branch" + std::to_string(i), out);
        for (std::size_t i = 0; i < scale_gates.size(); ++i)
            scale_gates[i].collect(p + ".scale_gate" + std::to_string(i), out);
        if (multi_scale) final_conv.collect(p + ".final", out);
    }

    std::int64_t parameter_count() const {
        ParamMap out;
        collect("msif", out);
        std::int64_t n = 0;
        for (const auto& [name, v] : out) n += v.numel();
        return n;
    }
};

}  // namespace fuseg3d::nn
