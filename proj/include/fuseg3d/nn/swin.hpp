#pragma once

#include <array>
#include <cmath>

#include "fuseg3d/core/config.hpp"
#include "fuseg3d/nn/layers.hpp"
#include "fuseg3d/nn/window_utils.hpp"

namespace fuseg3d::nn {

using core::ModelConfig;

// Multi-head self-attention over pre-partitioned windows [B, nW, T, C], with
// an optional learned relative-position bias shared across windows.
struct WindowAttention {
    std::int64_t dim = 0, heads = 0, M = 0;
    bool use_bias = true;
    Linear q_proj, k_proj, v_proj, out_proj;
    Var bias_table;  // [(2M-1)^3, heads], zero-initialized
    std::vector<std::int64_t> rel_index;

    WindowAttention() = default;
    WindowAttention(std::int64_t dim_, std::int64_t heads_, std::int64_t M_, bool use_bias_,
                    Rng& rng)
        : dim(dim_),
          heads(heads_),
          M(M_),
          use_bias(use_bias_),
          q_proj(dim_, dim_, rng),
          k_proj(dim_, dim_, rng),
          v_proj(dim_, dim_, rng),
          out_proj(dim_, dim_, rng) {
        const std::int64_t R = 2 * M_ - 1;
        if (use_bias) {
            bias_table = Var(Tensor({R * R * R, heads_}), true);
            rel_index = build_relative_index(M_);
        }
    }

    Var forward(const Var& xw, const Tensor& mask) const {
        const auto& s = xw.shape();  // [B, nW, T, C]
        const std::int64_t B = s[0], nW = s[1], T = s[2], C = s[3], Dh = C / heads;
        const Var flat = ad::reshape(xw, {B * nW * T, C});
        const auto split = [&](const Var& p) {
            return ad::permute(ad::reshape(p, {B, nW, T, heads, Dh}), {0, 1, 3, 2, 4});
        };
        const Var q = split(q_proj.forward(flat));
        const Var k = split(k_proj.forward(flat));
        const Var v = split(v_proj.forward(flat));
        Var bias;
        if (use_bias) bias = ad::gather_bias(bias_table, rel_index, {heads, T, T});
        const double scale = 1.0 / std::sqrt(static_cast<double>(Dh));
        const Var att = ad::window_attention(q, k, v, bias, mask, scale);
        const Var merged = ad::reshape(ad::permute(att, {0, 1, 3, 2, 4}), {B * nW * T, C});
        return ad::reshape(out_proj.forward(merged), {B, nW, T, C});
    }

    void collect(const std::string& p, ParamMap& out) const {
        q_proj.collect(p + ".q", out);
        k_proj.collect(p + ".k", out);
        v_proj.collect(p + ".v", out);
        out_proj.collect(p + ".proj", out);
        if (use_bias) add_param(out, p + ".bias_table", bias_table);
    }
};

// One W-MSA / SW-MSA block: pre-norm windowed attention and pre-norm MLP,
// both inside residual branches. The second MLP layer starts at zero so a
// freshly built block perturbs the identity only through attention.
struct SwinBlock {
    std::int64_t dim = 0, M = 0;
    bool shifted = false;
    LayerNorm norm1, norm2;
    WindowAttention attn;
    Linear fc1, fc2;

    SwinBlock() = default;
    SwinBlock(std::int64_t dim_, std::int64_t heads, std::int64_t M_, bool shifted_,
              bool use_bias, Rng& rng)
        : dim(dim_),
          M(M_),
          shifted(shifted_),
          norm1(dim_),
          norm2(dim_),
          attn(dim_, heads, M_, use_bias, rng),
          fc1(dim_, 4 * dim_, rng),
          fc2(4 * dim_, dim_, rng, true, /*zero_init=*/true) {}

    Var forward(const Var& x) const {
        const auto& s = x.shape();  // [B, C, H, W, D]
        const std::int64_t B = s[0], C = s[1], H = s[2], W = s[3], D = s[4];
        const WindowGrid g = make_window_grid(H, W, D, M, shifted);
        const Tensor mask = build_attention_mask(g);

        Var t = ad::permute(x, {0, 2, 3, 4, 1});
        t = norm1.forward(t);
        t = ad::permute(t, {0, 4, 1, 2, 3});
        t = ad::pad_end3d(t, g.Hp - H, g.Wp - W, g.Dp - D);
        if (g.shifted()) t = ad::roll3d(t, g.shift[0], g.shift[1], g.shift[2]);
        t = ad::window_partition5d(t, M);
        t = attn.forward(t, mask);
        t = ad::window_reverse5d(t, M, C, g.Hp, g.Wp, g.Dp);
        if (g.shifted())
            t = ad::roll3d(t, g.Hp - g.shift[0], g.Wp - g.shift[1], g.Dp - g.shift[2]);
        t = ad::crop3d(t, 0, H, 0, W, 0, D);
        const Var x1 = ad::add(x, t);

        Var m = ad::permute(x1, {0, 2, 3, 4, 1});
        m = norm2.forward(m);
        m = ad::reshape(m, {B * H * W * D, C});
        m = fc2.forward(ad::gelu(fc1.forward(m)));
        m = ad::permute(ad::reshape(m, {B, H, W, D, C}), {0, 4, 1, 2, 3});
        return ad::add(x1, m);
    }

    void collect(const std::string& p, ParamMap& out) const {
        norm1.collect(p + ".norm1", out);
        attn.collect(p + ".attn", out);
        norm2.collect(p + ".norm2", out);
        fc1.collect(p + ".mlp.fc1", out);
        fc2.collect(p + ".mlp.fc2", out);
    }
};

// Convolutional patch embedding: a strided conv stem followed by a pointwise
// projection to the token dimension. Inputs indivisible by the patch size are
// zero-padded at the high end first.
struct PatchEmbed {
    std::int64_t patch = 2;
    Conv3d stem, proj;

    PatchEmbed() = default;
    PatchEmbed(const ModelConfig& cfg, Rng& rng)
        : patch(cfg.patch_size),
          stem(cfg.in_channels, cfg.conv_stem_channels, cfg.patch_size, cfg.patch_size, 0, rng),
          proj(cfg.conv_stem_channels, cfg.embed_dim, 1, 1, 0, rng) {}

    Var forward(const Var& x) const {
        const auto& s = x.shape();
        const auto rem = [&](std::int64_t d) { return (patch - d % patch) % patch; };
        const Var p = ad::pad_end3d(x, rem(s[2]), rem(s[3]), rem(s[4]));
        return proj.forward(stem.forward(p));
    }

    void collect(const std::string& p, ParamMap& out) const {
        stem.collect(p + ".stem", out);
        proj.collect(p + ".proj", out);
    }
};

// Patch merging: concatenate 2x2x2 token neighbourhoods (8C channels) and
// project linearly to 2C. Odd extents are replicate-padded to even first.
struct PatchMerge {
    std::int64_t dim = 0;
    Linear reduce;

    PatchMerge() = default;
    PatchMerge(std::int64_t dim_, Rng& rng) : dim(dim_), reduce(8 * dim_, 2 * dim_, rng) {}

    Var forward(const Var& x) const {
        const auto& s = x.shape();
        Var t = ad::pad_end3d(x, s[2] % 2, s[3] % 2, s[4] % 2, ad::PadMode::Replicate);
        t = ad::space_to_depth2(t);
        const auto& m = t.shape();  // [B, 8C, H2, W2, D2]
        const std::int64_t B = m[0], H2 = m[2], W2 = m[3], D2 = m[4];
        t = ad::permute(t, {0, 2, 3, 4, 1});
        t = ad::reshape(t, {B * H2 * W2 * D2, 8 * dim});
        t = reduce.forward(t);
        t = ad::reshape(t, {B, H2, W2, D2, 2 * dim});
        return ad::permute(t, {0, 4, 1, 2, 3});
    }

    void collect(const std::string& p, ParamMap& out) const {
        reduce.collect(p + ".reduce", out);
    }
};

struct EncoderOutputs {
    Var stage0;                  // token grid after patch embedding
    std::array<Var, 4> pyramid;  // stage outputs with channels 2C, 4C, 8C, 16C
};

// One modality branch: patch embedding, then four stages of alternating
// W-MSA / SW-MSA blocks each followed by patch merging.
struct Encoder {
    struct Stage {
        std::vector<SwinBlock> blocks;
        PatchMerge merge;
    };
    PatchEmbed embed;
    std::array<Stage, 4> stages;

    Encoder() = default;
    Encoder(const ModelConfig& cfg, Rng& rng) : embed(cfg, rng) {
        std::int64_t dim = cfg.embed_dim;
        for (int i = 0; i < 4; ++i) {
            for (int b = 0; b < cfg.depths[static_cast<std::size_t>(i)]; ++b)
                stages[static_cast<std::size_t>(i)].blocks.emplace_back(
                    dim, cfg.num_heads, cfg.window_size, b % 2 == 1,
                    cfg.relative_position_bias, rng);
            stages[static_cast<std::size_t>(i)].merge = PatchMerge(dim, rng);
            dim *= 2;
        }
    }

    EncoderOutputs forward(const Var& x) const {
        EncoderOutputs out;
        Var t = embed.forward(x);
        out.stage0 = t;
        for (std::size_t i = 0; i < 4; ++i) {
            for (const auto& blk : stages[i].blocks) t = blk.forward(t);
            t = stages[i].merge.forward(t);
            out.pyramid[i] = t;
        }
        return out;
    }

    void collect(const std::string& p, ParamMap& out) const {
        embed.collect(p + ".embed", out);
        for (std::size_t i = 0; i < 4; ++i) {
            const std::string sp = p + ".stage" + std::to_string(i + 1);
            for (std::size_t b = 0; b < stages[i].blocks.size(); ++b)
                stages[i].blocks[b].collect(sp + ".block" + std::to_string(b), out);
            stages[i].merge.collect(sp + ".merge", out);
        }
    }
};

}  // namespace fuseg3d::nn
