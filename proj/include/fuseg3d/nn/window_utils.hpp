#pragma once

#include <array>
#include <vector>

#include "fuseg3d/ad/ops_nn.hpp"

namespace fuseg3d::nn {

using core::Tensor;

// Geometry of one shifted-window partition: original dims are padded up to
// multiples of M; an axis whose original extent fits inside one window is
// never shifted (shifting it would only mask true neighbours).
struct WindowGrid {
    std::int64_t H, W, D;     // original dims
    std::int64_t Hp, Wp, Dp;  // padded dims (multiples of M)
    std::int64_t M;
    std::array<std::int64_t, 3> shift;  // effective cyclic shift per axis

    std::int64_t windows() const { return (Hp / M) * (Wp / M) * (Dp / M); }
    std::int64_t tokens() const { return M * M * M; }
    bool padded() const { return Hp != H || Wp != W || Dp != D; }
    bool shifted() const { return shift[0] || shift[1] || shift[2]; }
};

inline WindowGrid make_window_grid(std::int64_t H, std::int64_t W, std::int64_t D,
                                   std::int64_t M, bool shifted) {
    const auto up = [M](std::int64_t v) { return (v + M - 1) / M * M; };
    WindowGrid g{H, W, D, up(H), up(W), up(D), M, {0, 0, 0}};
    if (shifted) {
        const std::int64_t s = M / 2;
        g.shift = {H > M ? s : 0, W > M ? s : 0, D > M ? s : 0};
    }
    return g;
}

namespace windetail {

// Region label along one padded axis: [0, n-M), [n-M, n-s), [n-s, n).
// With s = 0 the label collapses to a single region.
inline int axis_group(std::int64_t c, std::int64_t n, std::int64_t M, std::int64_t s) {
    if (s == 0) return 0;
    if (c < n - M) return 0;
    if (c < n - s) return 1;
    return 2;
}

}  // namespace windetail

// Additive attention mask [nW, T, T] with 0 for allowed pairs and -1e9
// otherwise. Token pairs may attend when they carry the same region label
// (so a window wrapped by the cyclic shift cannot mix non-adjacent content)
// and the key is not a padding token. Labels are assigned on the unshifted
// padded grid; padding validity is evaluated through the shift, since window
// partitioning happens after the cyclic roll.
inline Tensor build_attention_mask(const WindowGrid& g) {
    if (!g.padded() && !g.shifted()) return Tensor();  // nothing to mask

    const std::int64_t M = g.M, T = g.tokens(), nW = g.windows();
    const std::int64_t nwh = g.Hp / M, nww = g.Wp / M, nwd = g.Dp / M;

    Tensor mask({nW, T, T}, 0.0);
    std::vector<int> group(static_cast<std::size_t>(T));
    std::vector<char> valid(static_cast<std::size_t>(T));

    for (std::int64_t wy = 0; wy < nwh; ++wy)
        for (std::int64_t wx = 0; wx < nww; ++wx)
            for (std::int64_t wz = 0; wz < nwd; ++wz) {
                const std::int64_t w = (wy * nww + wx) * nwd + wz;
                for (std::int64_t ly = 0; ly < M; ++ly)
                    for (std::int64_t lx = 0; lx < M; ++lx)
                        for (std::int64_t lz = 0; lz < M; ++lz) {
                            const std::int64_t t = (ly * M + lx) * M + lz;
                            const std::int64_t py = wy * M + ly, px = wx * M + lx,
                                               pz = wz * M + lz;
                            const int gy = windetail::axis_group(py, g.Hp, M, g.shift[0]);
                            const int gx = windetail::axis_group(px, g.Wp, M, g.shift[1]);
                            const int gz = windetail::axis_group(pz, g.Dp, M, g.shift[2]);
                            group[static_cast<std::size_t>(t)] = (gy * 3 + gx) * 3 + gz;
                            const std::int64_t oy = (py + g.shift[0]) % g.Hp;
                            const std::int64_t ox = (px + g.shift[1]) % g.Wp;
                            const std::int64_t oz = (pz + g.shift[2]) % g.Dp;
                            valid[static_cast<std::size_t>(t)] =
                                oy < g.H && ox < g.W && oz < g.D;
                        }
                double* mw = mask.data() + w * T * T;
                for (std::int64_t i = 0; i < T; ++i)
                    for (std::int64_t j = 0; j < T; ++j)
                        if (group[static_cast<std::size_t>(i)] !=
                                group[static_cast<std::size_t>(j)] ||
                            !valid[static_cast<std::size_t>(j)])
                            mw[i * T + j] = -1e9;
            }
    return mask;
}

// Relative-position index into a [(2M-1)^3, heads] bias table, one entry per
// ordered token pair of a window; token order matches window_partition5d.
inline std::vector<std::int64_t> build_relative_index(std::int64_t M) {
    const std::int64_t T = M * M * M, R = 2 * M - 1;
    std::vector<std::int64_t> idx(static_cast<std::size_t>(T * T));
    for (std::int64_t i = 0; i < T; ++i) {
        const std::int64_t yi = i / (M * M), xi = (i / M) % M, zi = i % M;
        for (std::int64_t j = 0; j < T; ++j) {
            const std::int64_t yj = j / (M * M), xj = (j / M) % M, zj = j % M;
            idx[static_cast<std::size_t>(i * T + j)] =
                ((yi - yj + M - 1) * R + (xi - xj + M - 1)) * R + (zi - zj + M - 1);
        }
    }
    return idx;
}

}  // namespace fuseg3d::nn
