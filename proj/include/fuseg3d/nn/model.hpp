#pragma once

#include <array>
#include <string>
#include <vector>

#include "fuseg3d/core/config.hpp"
#include "fuseg3d/core/errors.hpp"
#include "fuseg3d/nn/decoder.hpp"
#include "fuseg3d/nn/msif.hpp"
#include "fuseg3d/nn/swin.hpp"

namespace fuseg3d::nn {

// Dual-branch segmentation network: independent PET and CT shifted-window
// encoders, one fusion module per pyramid scale, and a U-shaped decoder whose
// skips carry the fused maps plus both stage-0 embeddings, ending in a
// pointwise conv + sigmoid probability head.
struct SegmentationModel {
    core::ModelConfig model_cfg;
    core::MsifConfig msif_cfg;
    Encoder enc_pet, enc_ct;
    std::array<MsifModule, 4> fusion;
    ResidualBlock bottleneck;
    std::array<UpsampleBlock, 5> up;
    std::array<ResidualBlock, 4> dec;
    Conv3d head;

    SegmentationModel() = default;
    SegmentationModel(const core::ModelConfig& mcfg, const core::MsifConfig& fcfg, Rng& rng)
        : model_cfg(mcfg), msif_cfg(fcfg) {
        mcfg.validate();
        fcfg.validate();
        enc_pet = Encoder(mcfg, rng);
        enc_ct = Encoder(mcfg, rng);
        const std::int64_t C = mcfg.embed_dim;
        for (int i = 0; i < 4; ++i)
            fusion[static_cast<std::size_t>(i)] =
                MsifModule(C << (i + 1), mcfg.num_heads, mcfg.window_size, fcfg, rng);
        bottleneck = ResidualBlock(16 * C, 16 * C, rng);
        up[0] = UpsampleBlock(16 * C, 8 * C, rng);
        dec[0] = ResidualBlock(16 * C, 8 * C, rng);
        up[1] = UpsampleBlock(8 * C, 4 * C, rng);
        dec[1] = ResidualBlock(8 * C, 4 * C, rng);
        up[2] = UpsampleBlock(4 * C, 2 * C, rng);
        dec[2] = ResidualBlock(4 * C, 2 * C, rng);
        up[3] = UpsampleBlock(2 * C, C, rng);
        dec[3] = ResidualBlock(3 * C, C, rng);
        const std::int64_t half = std::max<std::int64_t>(1, C / 2);
        up[4] = UpsampleBlock(C, half, rng);
        head = Conv3d(half, 1, 1, 1, 0, rng);
    }

    // Crops the trailing spatial axes of x down to those of the reference
    // shape (upsampling may overshoot odd skip extents).
    static Var crop_to(const Var& x, const std::vector<std::int64_t>& ref) {
        const auto& s = x.shape();
        if (s[2] == ref[2] && s[3] == ref[3] && s[4] == ref[4]) return x;
        return ad::crop3d(x, 0, ref[2], 0, ref[3], 0, ref[4]);
    }

    Var forward(const Var& pet, const Var& ct) const {
        if (!pet.defined() || !ct.defined() || pet.shape() != ct.shape())
            throw core::DataError("model: PET/CT input shapes differ");
        const auto& in = pet.shape();
        if (in.size() != 5 || in[1] != model_cfg.in_channels)
            throw core::DataError("model: expected [B," +
                                  std::to_string(model_cfg.in_channels) + ",H,W,D] input, got " +
                                  pet.value().shape_str());
        const EncoderOutputs ep = enc_pet.forward(pet);
        const EncoderOutputs ec = enc_ct.forward(ct);
        std::array<Var, 4> fused;
        for (std::size_t i = 0; i < 4; ++i)
            fused[i] = fusion[i].forward(ep.pyramid[i], ec.pyramid[i]);

        Var x = bottleneck.forward(fused[3]);
        for (int lvl = 0; lvl < 3; ++lvl) {
            const Var& skip = fused[static_cast<std::size_t>(2 - lvl)];
            x = crop_to(up[static_cast<std::size_t>(lvl)].forward(x), skip.shape());
            x = dec[static_cast<std::size_t>(lvl)].forward(ad::concat_axis1({x, skip}));
        }
        x = crop_to(up[3].forward(x), ep.stage0.shape());
        x = dec[3].forward(ad::concat_axis1({x, ep.stage0, ec.stage0}));
        x = crop_to(up[4].forward(x), in);
        return ad::sigmoid(head.forward(x));
    }

    void collect(ParamMap& out) const {
        enc_pet.collect("enc_pet", out);
        enc_ct.collect("enc_ct", out);
        for (std::size_t i = 0; i < 4; ++i)
            fusion[i].collect("fusion" + std::to_string(i + 1), out);
        bottleneck.collect("dec.bottleneck", out);
        for (std::size_t i = 0; i < 5; ++i) {
            up[i].collect("dec.up" + std::to_string(i + 1), out);
            if (i < 4) dec[i].collect("dec.res" + std::to_string(i + 1), out);
        }
        head.collect("dec.head", out);
    }

    ParamMap parameters() const {
        ParamMap out;
        collect(out);
        return out;
    }

    std::int64_t parameter_count() const {
        std::int64_t n = 0;
        for (const auto& [name, v] : parameters()) n += v.numel();
        return n;
    }
};

}  // namespace fuseg3d::nn
