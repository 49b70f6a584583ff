#pragma once

#include <array>
#include <cstring>

#include "fuseg3d/ad/autodiff.hpp"

namespace fuseg3d::ad {

using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

namespace detail {

// Columns are processed in chunks so the im2col buffer stays bounded
// regardless of output size.
inline std::int64_t col_chunk_cols(std::int64_t k_rows, std::int64_t total_cols) {
    const std::int64_t budget = 8'000'000;  // doubles (~64 MB)
    return std::max<std::int64_t>(1, std::min(total_cols, budget / std::max<std::int64_t>(1, k_rows)));
}

struct ConvDims {
    std::int64_t B, Cin, H, W, D;
    std::int64_t Cout, kh, kw, kd;
    std::int64_t stride, pad;
    std::int64_t Ho, Wo, Do;
    std::int64_t K() const { return Cin * kh * kw * kd; }
    std::int64_t No() const { return Ho * Wo * Do; }
};

inline ConvDims conv_dims(const Tensor& x, const Tensor& w, std::int64_t stride, std::int64_t pad) {
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    if (xs.size() != 5 || ws.size() != 5 || xs[1] != ws[1])
        throw std::invalid_argument("conv3d: bad shapes " + x.shape_str() + " w " + w.shape_str());
    ConvDims d;
    d.B = xs[0]; d.Cin = xs[1]; d.H = xs[2]; d.W = xs[3]; d.D = xs[4];
    d.Cout = ws[0]; d.kh = ws[2]; d.kw = ws[3]; d.kd = ws[4];
    d.stride = stride; d.pad = pad;
    d.Ho = (d.H + 2 * pad - d.kh) / stride + 1;
    d.Wo = (d.W + 2 * pad - d.kw) / stride + 1;
    d.Do = (d.D + 2 * pad - d.kd) / stride + 1;
    if (d.Ho < 1 || d.Wo < 1 || d.Do < 1)
        throw std::invalid_argument("conv3d: kernel larger than padded input");
    return d;
}

// Fill col[K, n1-n0] for output positions [n0, n1) of batch b.
inline void im2col_chunk(const double* xb, const ConvDims& d, std::int64_t n0, std::int64_t n1,
                         double* col) {
    const std::int64_t cols = n1 - n0;
    const std::int64_t WD = d.W * d.D;
    for (std::int64_t ci = 0; ci < d.Cin; ++ci) {
        const double* xc = xb + ci * d.H * WD;
        for (std::int64_t i = 0; i < d.kh; ++i)
            for (std::int64_t j = 0; j < d.kw; ++j)
                for (std::int64_t l = 0; l < d.kd; ++l) {
                    double* row = col + (((ci * d.kh + i) * d.kw + j) * d.kd + l) * cols;
                    for (std::int64_t n = n0; n < n1; ++n) {
                        const std::int64_t od = n % d.Do;
                        const std::int64_t ow = (n / d.Do) % d.Wo;
                        const std::int64_t oh = n / (d.Do * d.Wo);
                        const std::int64_t ih = oh * d.stride - d.pad + i;
                        const std::int64_t iw = ow * d.stride - d.pad + j;
                        const std::int64_t id = od * d.stride - d.pad + l;
                        row[n - n0] = (ih < 0 || ih >= d.H || iw < 0 || iw >= d.W || id < 0 || id >= d.D)
                                          ? 0.0
                                          : xc[ih * WD + iw * d.D + id];
                    }
                }
    }
}

// Scatter-add dcol[K, n1-n0] back into dxb.
inline void col2im_chunk(const double* dcol, const ConvDims& d, std::int64_t n0, std::int64_t n1,
                         double* dxb) {
    const std::int64_t cols = n1 - n0;
    const std::int64_t WD = d.W * d.D;
    for (std::int64_t ci = 0; ci < d.Cin; ++ci) {
        double* xc = dxb + ci * d.H * WD;
        for (std::int64_t i = 0; i < d.kh; ++i)
            for (std::int64_t j = 0; j < d.kw; ++j)
                for (std::int64_t l = 0; l < d.kd; ++l) {
                    const double* row = dcol + (((ci * d.kh + i) * d.kw + j) * d.kd + l) * cols;
                    for (std::int64_t n = n0; n < n1; ++n) {
                        const std::int64_t od = n % d.Do;
                        const std::int64_t ow = (n / d.Do) % d.Wo;
                        const std::int64_t oh = n / (d.Do * d.Wo);
                        const std::int64_t ih = oh * d.stride - d.pad + i;
                        const std::int64_t iw = ow * d.stride - d.pad + j;
                        const std::int64_t id = od * d.stride - d.pad + l;
                        if (ih >= 0 && ih < d.H && iw >= 0 && iw < d.W && id >= 0 && id < d.D)
                            xc[ih * WD + iw * d.D + id] += row[n - n0];
                    }
                }
    }
}

}  // namespace detail

// 3D convolution over [B, Cin, H, W, D] with weight [Cout, Cin, kh, kw, kd],
// zero padding, isotropic stride. im2col + GEMM; the col buffer is rebuilt in
// the backward pass instead of being kept on the tape.
inline Var conv3d(const Var& x, const Var& w, const Var& b, std::int64_t stride, std::int64_t pad) {
    const auto d = detail::conv_dims(x.value(), w.value(), stride, pad);
    Tensor y({d.B, d.Cout, d.Ho, d.Wo, d.Do});
    const std::int64_t K = d.K(), No = d.No();
    const std::int64_t chunk = detail::col_chunk_cols(K, No);
    {
        std::vector<double> col(static_cast<std::size_t>(K * chunk));
        ConstMatMap wm(w.value().data(), d.Cout, K);
        for (std::int64_t bi = 0; bi < d.B; ++bi) {
            const double* xb = x.value().data() + bi * d.Cin * d.H * d.W * d.D;
            double* yb = y.data() + bi * d.Cout * No;
            for (std::int64_t n0 = 0; n0 < No; n0 += chunk) {
                const std::int64_t n1 = std::min(No, n0 + chunk);
                detail::im2col_chunk(xb, d, n0, n1, col.data());
                ConstMatMap cm(col.data(), K, n1 - n0);
                StridedMap ym(yb + n0, d.Cout, n1 - n0, Eigen::OuterStride<>(No));
                ym.noalias() = wm * cm;
            }
            if (b.defined()) {
                const double* bd = b.value().data();
                for (std::int64_t co = 0; co < d.Cout; ++co) {
                    double* yr = yb + co * No;
                    for (std::int64_t n = 0; n < No; ++n) yr[n] += bd[co];
                }
            }
        }
    }
    std::vector<Var> parents = b.defined() ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
    return make_op(std::move(y), std::move(parents), [x, w, b, d](Node& self) {
        const std::int64_t K = d.K(), No = d.No();
        const std::int64_t chunk = detail::col_chunk_cols(K, No);
        std::vector<double> col(static_cast<std::size_t>(K * chunk));
        std::vector<double> dcol;
        if (x.requires_grad()) dcol.resize(static_cast<std::size_t>(K * chunk));
        ConstMatMap wm(w.value().data(), d.Cout, K);
        for (std::int64_t bi = 0; bi < d.B; ++bi) {
            const double* xb = x.value().data() + bi * d.Cin * d.H * d.W * d.D;
            const double* gyb = self.grad.data() + bi * d.Cout * No;
            for (std::int64_t n0 = 0; n0 < No; n0 += chunk) {
                const std::int64_t n1 = std::min(No, n0 + chunk);
                ConstStridedMap gym(gyb + n0, d.Cout, n1 - n0, Eigen::OuterStride<>(No));
                if (w.requires_grad() || x.requires_grad())
                    detail::im2col_chunk(xb, d, n0, n1, col.data());
                if (w.requires_grad()) {
                    ConstMatMap cm(col.data(), K, n1 - n0);
                    MatMap gw(w.node()->ensure_grad().data(), d.Cout, K);
                    gw.noalias() += gym * cm.transpose();
                }
                if (x.requires_grad()) {
                    MatMap dcm(dcol.data(), K, n1 - n0);
                    dcm.noalias() = wm.transpose() * gym;
                    double* gxb = x.node()->ensure_grad().data() + bi * d.Cin * d.H * d.W * d.D;
                    detail::col2im_chunk(dcol.data(), d, n0, n1, gxb);
                }
            }
            if (b.defined() && b.requires_grad()) {
                Tensor& gb = b.node()->ensure_grad();
                for (std::int64_t co = 0; co < d.Cout; ++co) {
                    double s = 0.0;
                    const double* gr = gyb + co * No;
                    for (std::int64_t n = 0; n < No; ++n) s += gr[n];
                    gb[co] += s;
                }
            }
        }
    });
}

// Transposed 3D convolution: weight [Cin, Cout, kh, kw, kd], output dims
// (H-1)*stride + k. Implemented as GEMM into per-input-position kernel blocks
// followed by scatter-add.
inline Var conv_transpose3d(const Var& x, const Var& w, const Var& b, std::int64_t stride) {
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    if (xs.size() != 5 || ws.size() != 5 || xs[1] != ws[0])
        throw std::invalid_argument("conv_transpose3d: bad shapes");
    const std::int64_t B = xs[0], Cin = xs[1], H = xs[2], W = xs[3], D = xs[4];
    const std::int64_t Cout = ws[1], kh = ws[2], kw = ws[3], kd = ws[4];
    const std::int64_t Ho = (H - 1) * stride + kh;
    const std::int64_t Wo = (W - 1) * stride + kw;
    const std::int64_t Do = (D - 1) * stride + kd;
    const std::int64_t R = Cout * kh * kw * kd;  // block rows
    const std::int64_t Nin = H * W * D;
    Tensor y({B, Cout, Ho, Wo, Do});
    const std::int64_t chunk = detail::col_chunk_cols(R, Nin);

    auto scatter = [=](const double* blocks, std::int64_t n0, std::int64_t n1, double* yb) {
        const std::int64_t cols = n1 - n0;
        for (std::int64_t co = 0; co < Cout; ++co)
            for (std::int64_t i = 0; i < kh; ++i)
                for (std::int64_t j = 0; j < kw; ++j)
                    for (std::int64_t l = 0; l < kd; ++l) {
                        const double* row = blocks + (((co * kh + i) * kw + j) * kd + l) * cols;
                        double* yc = yb + co * Ho * Wo * Do;
                        for (std::int64_t n = n0; n < n1; ++n) {
                            const std::int64_t dpos = n % D;
                            const std::int64_t wpos = (n / D) % W;
                            const std::int64_t hpos = n / (D * W);
                            yc[(hpos * stride + i) * Wo * Do + (wpos * stride + j) * Do +
                               (dpos * stride + l)] += row[n - n0];
                        }
                    }
    };
    auto gather = [=](const double* gyb, std::int64_t n0, std::int64_t n1, double* blocks) {
        const std::int64_t cols = n1 - n0;
        for (std::int64_t co = 0; co < Cout; ++co)
            for (std::int64_t i = 0; i < kh; ++i)
                for (std::int64_t j = 0; j < kw; ++j)
                    for (std::int64_t l = 0; l < kd; ++l) {
                        double* row = blocks + (((co * kh + i) * kw + j) * kd + l) * cols;
                        const double* gc = gyb + co * Ho * Wo * Do;
                        for (std::int64_t n = n0; n < n1; ++n) {
                            const std::int64_t dpos = n % D;
                            const std::int64_t wpos = (n / D) % W;
                            const std::int64_t hpos = n / (D * W);
                            row[n - n0] = gc[(hpos * stride + i) * Wo * Do +
                                             (wpos * stride + j) * Do + (dpos * stride + l)];
                        }
                    }
    };

    {
        std::vector<double> blocks(static_cast<std::size_t>(R * chunk));
        ConstMatMap wm(w.value().data(), Cin, R);
        for (std::int64_t bi = 0; bi < B; ++bi) {
            const double* xb = x.value().data() + bi * Cin * Nin;
            double* yb = y.data() + bi * Cout * Ho * Wo * Do;
            for (std::int64_t n0 = 0; n0 < Nin; n0 += chunk) {
                const std::int64_t n1 = std::min(Nin, n0 + chunk);
                ConstStridedMap xm(xb + n0, Cin, n1 - n0, Eigen::OuterStride<>(Nin));
                MatMap bm(blocks.data(), R, n1 - n0);
                bm.noalias() = wm.transpose() * xm;
                scatter(blocks.data(), n0, n1, yb);
            }
            if (b.defined()) {
                const double* bd = b.value().data();
                for (std::int64_t co = 0; co < Cout; ++co) {
                    double* yc = yb + co * Ho * Wo * Do;
                    for (std::int64_t n = 0; n < Ho * Wo * Do; ++n) yc[n] += bd[co];
                }
            }
        }
    }
    std::vector<Var> parents = b.defined() ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
    return make_op(std::move(y), std::move(parents),
                   [x, w, b, B, Cin, Cout, Ho, Wo, Do, R, Nin, chunk, gather](Node& self) {
        std::vector<double> blocks(static_cast<std::size_t>(R * chunk));
        ConstMatMap wm(w.value().data(), Cin, R);
        for (std::int64_t bi = 0; bi < B; ++bi) {
            const double* gyb = self.grad.data() + bi * Cout * Ho * Wo * Do;
            const double* xb = x.value().data() + bi * Cin * Nin;
            for (std::int64_t n0 = 0; n0 < Nin; n0 += chunk) {
                const std::int64_t n1 = std::min(Nin, n0 + chunk);
                gather(gyb, n0, n1, blocks.data());
                ConstMatMap bm(blocks.data(), R, n1 - n0);
                if (x.requires_grad()) {
                    StridedMap gx(x.node()->ensure_grad().data() + bi * Cin * Nin + n0, Cin,
                                  n1 - n0, Eigen::OuterStride<>(Nin));
                    gx.noalias() += wm * bm;
                }
                if (w.requires_grad()) {
                    ConstStridedMap xm(xb + n0, Cin, n1 - n0, Eigen::OuterStride<>(Nin));
                    MatMap gw(w.node()->ensure_grad().data(), Cin, R);
                    gw.noalias() += xm * bm.transpose();
                }
            }
            if (b.defined() && b.requires_grad()) {
                Tensor& gb = b.node()->ensure_grad();
                for (std::int64_t co = 0; co < Cout; ++co) {
                    double s = 0.0;
                    const double* gr = gyb + co * Ho * Wo * Do;
                    for (std::int64_t n = 0; n < Ho * Wo * Do; ++n) s += gr[n];
                    gb[co] += s;
                }
            }
        }
    });
}

// InstanceNorm over the spatial axes of [B, C, ...] with per-channel affine.
inline Var instance_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
    const auto& s = x.shape();
    if (s.size() < 3) throw std::invalid_argument("instance_norm: rank must be >= 3");
    const std::int64_t B = s[0], C = s[1];
    std::int64_t S = 1;
    for (std::size_t a = 2; a < s.size(); ++a) S *= s[a];
    Tensor y(s);
    Tensor xhat({B * C, S});
    Tensor rstd({B * C});
    const double* xd = x.value().data();
    const double* gm = gamma.value().data();
    const double* bt = beta.value().data();
    for (std::int64_t r = 0; r < B * C; ++r) {
        const std::int64_t c = r % C;
        const double* xr = xd + r * S;
        double mu = 0.0;
        for (std::int64_t i = 0; i < S; ++i) mu += xr[i];
        mu /= static_cast<double>(S);
        double var = 0.0;
        for (std::int64_t i = 0; i < S; ++i) {
            const double dlt = xr[i] - mu;
            var += dlt * dlt;
        }
        var /= static_cast<double>(S);
        const double rs = 1.0 / std::sqrt(var + eps);
        rstd[r] = rs;
        double* hr = xhat.data() + r * S;
        double* yr = y.data() + r * S;
        for (std::int64_t i = 0; i < S; ++i) {
            hr[i] = (xr[i] - mu) * rs;
            yr[i] = hr[i] * gm[c] + bt[c];
        }
    }
    return make_op(std::move(y), {x, gamma, beta},
                   [x, gamma, beta, xhat, rstd, B, C, S](Node& self) {
        const double* gy = self.grad.data();
        const double* hd = xhat.data();
        const double* gm = gamma.value().data();
        for (std::int64_t r = 0; r < B * C; ++r) {
            const std::int64_t c = r % C;
            const double* gr = gy + r * S;
            const double* hr = hd + r * S;
            if (gamma.requires_grad() || beta.requires_grad()) {
                double sg = 0.0, sgh = 0.0;
                for (std::int64_t i = 0; i < S; ++i) {
                    sg += gr[i];
                    sgh += gr[i] * hr[i];
                }
                if (gamma.requires_grad()) gamma.node()->ensure_grad()[c] += sgh;
                if (beta.requires_grad()) beta.node()->ensure_grad()[c] += sg;
            }
            if (x.requires_grad()) {
                double sum_g = 0.0, sum_gh = 0.0;
                for (std::int64_t i = 0; i < S; ++i) {
                    const double gi = gr[i] * gm[c];
                    sum_g += gi;
                    sum_gh += gi * hr[i];
                }
                const double Sn = static_cast<double>(S);
                const double rs = rstd[r];
                double* gxr = x.node()->ensure_grad().data() + r * S;
                for (std::int64_t i = 0; i < S; ++i) {
                    const double gi = gr[i] * gm[c];
                    gxr[i] += rs * (gi - sum_g / Sn - hr[i] * sum_gh / Sn);
                }
            }
        }
    });
}

// ---- spatial layout ops on [B, C, H, W, D] ---------------------------------

enum class PadMode { Zero, Replicate };

// Pads at the high end of each spatial axis.
inline Var pad_end3d(const Var& x, std::int64_t ph, std::int64_t pw, std::int64_t pd,
                     PadMode mode = PadMode::Zero) {
    if (ph == 0 && pw == 0 && pd == 0) return x;
    const auto& s = x.shape();
    const std::int64_t B = s[0], C = s[1], H = s[2], W = s[3], D = s[4];
    const std::int64_t Ho = H + ph, Wo = W + pw, Do = D + pd;
    Tensor y({B, C, Ho, Wo, Do});
    const double* xd = x.value().data();
    for (std::int64_t bc = 0; bc < B * C; ++bc)
        for (std::int64_t h = 0; h < Ho; ++h)
            for (std::int64_t w = 0; w < Wo; ++w)
                for (std::int64_t d = 0; d < Do; ++d) {
                    double v = 0.0;
                    if (mode == PadMode::Replicate) {
                        v = xd[((bc * H + std::min(h, H - 1)) * W + std::min(w, W - 1)) * D +
                               std::min(d, D - 1)];
                    } else if (h < H && w < W && d < D) {
                        v = xd[((bc * H + h) * W + w) * D + d];
                    }
                    y[((bc * Ho + h) * Wo + w) * Do + d] = v;
                }
    return make_op(std::move(y), {x}, [x, B, C, H, W, D, Ho, Wo, Do, mode](Node& self) {
        if (!x.requires_grad()) return;
        Tensor& gx = x.node()->ensure_grad();
        for (std::int64_t bc = 0; bc < B * C; ++bc)
            for (std::int64_t h = 0; h < Ho; ++h)
                for (std::int64_t w = 0; w < Wo; ++w)
                    for (std::int64_t d = 0; d < Do; ++d) {
                        const double g = self.grad[((bc * Ho + h) * Wo + w) * Do + d];
                        if (mode == PadMode::Replicate) {
                            gx[((bc * H + std::min(h, H - 1)) * W + std::min(w, W - 1)) * D +
                               std::min(d, D - 1)] += g;
                        } else if (h < H && w < W && d < D) {
                            gx[((bc * H + h) * W + w) * D + d] += g;
                        }
                    }
    });
}

// Crops spatial axes to [h0, h0+hl) x [w0, w0+wl) x [d0, d0+dl).
inline Var crop3d(const Var& x, std::int64_t h0, std::int64_t hl, std::int64_t w0,
                  std::int64_t wl, std::int64_t d0, std::int64_t dl) {
    const auto& s = x.shape();
    const std::int64_t B = s[0], C = s[1], H = s[2], W = s[3], D = s[4];
    if (h0 == 0 && w0 == 0 && d0 == 0 && hl == H && wl == W && dl == D) return x;
    if (h0 + hl > H || w0 + wl > W || d0 + dl > D)
        throw std::invalid_argument("crop3d: window out of range");
    Tensor y({B, C, hl, wl, dl});
    const double* xd = x.value().data();
    for (std::int64_t bc = 0; bc < B * C; ++bc)
        for (std::int64_t h = 0; h < hl; ++h)
            for (std::int64_t w = 0; w < wl; ++w) {
                const double* src = xd + ((bc * H + h0 + h) * W + w0 + w) * D + d0;
                double* dst = y.data() + ((bc * hl + h) * wl + w) * dl;
                std::copy(src, src + dl, dst);
            }
    return make_op(std::move(y), {x}, [x, B, C, H, W, D, h0, hl, w0, wl, d0, dl](Node& self) {
        if (!x.requires_grad()) return;
        Tensor& gx = x.node()->ensure_grad();
        for (std::int64_t bc = 0; bc < B * C; ++bc)
            for (std::int64_t h = 0; h < hl; ++h)
                for (std::int64_t w = 0; w < wl; ++w) {
                    const double* g = self.grad.data() + ((bc * hl + h) * wl + w) * dl;
                    double* dst = gx.data() + ((bc * H + h0 + h) * W + w0 + w) * D + d0;
                    for (std::int64_t d = 0; d < dl; ++d) dst[d] += g[d];
                }
    });
}

// Cyclic shift: out[..., h, w, d] = x[..., (h+sh) mod H, (w+sw) mod W, (d+sd) mod D].
inline Var roll3d(const Var& x, std::int64_t sh, std::int64_t sw, std::int64_t sd) {
    if (sh == 0 && sw == 0 && sd == 0) return x;
    const auto& s = x.shape();
    const std::int64_t B = s[0], C = s[1], H = s[2], W = s[3], D = s[4];
    auto wrap = [](std::int64_t v, std::int64_t m) { return ((v % m) + m) % m; };
    Tensor y(s);
    const double* xd = x.value().data();
    for (std::int64_t bc = 0; bc < B * C; ++bc)
        for (std::int64_t h = 0; h < H; ++h)
            for (std::int64_t w = 0; w < W; ++w) {
                const std::int64_t shh = wrap(h + sh, H), sww = wrap(w + sw, W);
                const double* src = xd + ((bc * H + shh) * W + sww) * D;
                double* dst = y.data() + ((bc * H + h) * W + w) * D;
                for (std::int64_t d = 0; d < D; ++d) dst[d] = src[wrap(d + sd, D)];
            }
    return make_op(std::move(y), {x}, [x, B, C, H, W, D, sh, sw, sd, wrap](Node& self) {
        if (!x.requires_grad()) return;
        Tensor& gx = x.node()->ensure_grad();
        for (std::int64_t bc = 0; bc < B * C; ++bc)
            for (std::int64_t h = 0; h < H; ++h)
                for (std::int64_t w = 0; w < W; ++w) {
                    const std::int64_t shh = wrap(h + sh, H), sww = wrap(w + sw, W);
                    double* dst = gx.data() + ((bc * H + shh) * W + sww) * D;
                    const double* g = self.grad.data() + ((bc * H + h) * W + w) * D;
                    for (std::int64_t d = 0; d < D; ++d) dst[wrap(d + sd, D)] += g[d];
                }
    });
}

// [B, C, Hp, Wp, Dp] -> [B, nW, M^3, C]; windows and in-window tokens ordered
// row-major over (h, w, d). Spatial dims must be multiples of M.
inline Var window_partition5d(const Var& x, std::int64_t M) {
    const auto& s = x.shape();
    const std::int64_t B = s[0], C = s[1], H = s[2], W = s[3], D = s[4];
    if (H % M || W % M || D % M)
        throw std::invalid_argument("window_partition: dims not multiples of window size");
    const std::int64_t nh = H / M, nw = W / M, nd = D / M;
    const std::int64_t nW = nh * nw * nd, T = M * M * M;
    Tensor y({B, nW, T, C});
    const double* xd = x.value().data();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t h = 0; h < H; ++h)
                for (std::int64_t w = 0; w < W; ++w)
                    for (std::int64_t d = 0; d < D; ++d) {
                        const std::int64_t wi = ((h / M) * nw + w / M) * nd + d / M;
                        const std::int64_t t = ((h % M) * M + w % M) * M + d % M;
                        y[((b * nW + wi) * T + t) * C + c] =
                            xd[(((b * C + c) * H + h) * W + w) * D + d];
                    }
    return make_op(std::move(y), {x}, [x, B, C, H, W, D, M, nw, nd, nW, T](Node& self) {
        if (!x.requires_grad()) return;
        Tensor& gx = x.node()->ensure_grad();
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t c = 0; c < C; ++c)
                for (std::int64_t h = 0; h < H; ++h)
                    for (std::int64_t w = 0; w < W; ++w)
                        for (std::int64_t d = 0; d < D; ++d) {
                            const std::int64_t wi = ((h / M) * nw + w / M) * nd + d / M;
                            const std::int64_t t = ((h % M) * M + w % M) * M + d % M;
                            gx[(((b * C + c) * H + h) * W + w) * D + d] +=
                                self.grad[((b * nW + wi) * T + t) * C + c];
                        }
    });
}

// Inverse of window_partition5d.
inline Var window_reverse5d(const Var& x, std::int64_t M, std::int64_t C, std::int64_t H,
                            std::int64_t W, std::int64_t D) {
    const auto& s = x.shape();
    const std::int64_t B = s[0], nW = s[1], T = s[2];
    const std::int64_t nw = W / M, nd = D / M;
    if (s[3] != C || nW != (H / M) * nw * nd || T != M * M * M)
        throw std::invalid_argument("window_reverse: shape mismatch");
    Tensor y({B, C, H, W, D});
    const double* xd = x.value().data();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t h = 0; h < H; ++h)
                for (std::int64_t w = 0; w < W; ++w)
                    for (std::int64_t d = 0; d < D; ++d) {
                        const std::int64_t wi = ((h / M) * nw + w / M) * nd + d / M;
                        const std::int64_t t = ((h % M) * M + w % M) * M + d % M;
                        y[(((b * C + c) * H + h) * W + w) * D + d] =
                            xd[((b * nW + wi) * T + t) * C + c];
                    }
    return make_op(std::move(y), {x}, [x, B, C, H, W, D, M, nw, nd, nW, T](Node& self) {
        if (!x.requires_grad()) return;
        Tensor& gx = x.node()->ensure_grad();
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t c = 0; c < C; ++c)
                for (std::int64_t h = 0; h < H; ++h)
                    for (std::int64_t w = 0; w < W; ++w)
                        for (std::int64_t d = 0; d < D; ++d) {
                            const std::int64_t wi = ((h / M) * nw + w / M) * nd + d / M;
                            const std::int64_t t = ((h % M) * M + w % M) * M + d % M;
                            gx[((b * nW + wi) * T + t) * C + c] +=
                                self.grad[(((b * C + c) * H + h) * W + w) * D + d];
                        }
    });
}

// Concatenates 2x2x2 neighborhoods into channels:
// [B, C, H, W, D] -> [B, 8C, H/2, W/2, D/2], block order (dh, dw, dd).
inline Var space_to_depth2(const Var& x) {
    const auto& s = x.shape();
    const std::int64_t B = s[0], C = s[1], H = s[2], W = s[3], D = s[4];
    if (H % 2 || W % 2 || D % 2) throw std::invalid_argument("space_to_depth2: odd dims");
    const std::int64_t Ho = H / 2, Wo = W / 2, Do = D / 2;
    Tensor y({B, 8 * C, Ho, Wo, Do});
    const double* xd = x.value().data();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t h = 0; h < H; ++h)
                for (std::int64_t w = 0; w < W; ++w)
                    for (std::int64_t d = 0; d < D; ++d) {
                        const std::int64_t blk = ((h % 2) * 2 + (w % 2)) * 2 + (d % 2);
                        y[(((b * 8 * C + blk * C + c) * Ho + h / 2) * Wo + w / 2) * Do + d / 2] =
                            xd[(((b * C + c) * H + h) * W + w) * D + d];
                    }
    return make_op(std::move(y), {x}, [x, B, C, H, W, D, Ho, Wo, Do](Node& self) {
        if (!x.requires_grad()) return;
        Tensor& gx = x.node()->ensure_grad();
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t c = 0; c < C; ++c)
                for (std::int64_t h = 0; h < H; ++h)
                    for (std::int64_t w = 0; w < W; ++w)
                        for (std::int64_t d = 0; d < D; ++d) {
                            const std::int64_t blk = ((h % 2) * 2 + (w % 2)) * 2 + (d % 2);
                            gx[(((b * C + c) * H + h) * W + w) * D + d] +=
                                self.grad[(((b * 8 * C + blk * C + c) * Ho + h / 2) * Wo + w / 2) *
                                              Do + d / 2];
                        }
    });
}

// ---- pooling / gating ------------------------------------------------------

// Global average pool over spatial axes: [B, C, ...] -> [B, C].
inline Var global_avg_pool(const Var& x) {
    const auto& s = x.shape();
    const std::int64_t B = s[0], C = s[1];
    std::int64_t S = 1;
    for (std::size_t a = 2; a < s.size(); ++a) S *= s[a];
    Tensor y({B, C});
    const double* xd = x.value().data();
    for (std::int64_t r = 0; r < B * C; ++r) {
        double m = 0.0;
        for (std::int64_t i = 0; i < S; ++i) m += xd[r * S + i];
        y[r] = m / static_cast<double>(S);
    }
    return make_op(std::move(y), {x}, [x, B, C, S](Node& self) {
        if (!x.requires_grad()) return;
        Tensor& gx = x.node()->ensure_grad();
        for (std::int64_t r = 0; r < B * C; ++r) {
            const double g = self.grad[r] / static_cast<double>(S);
            for (std::int64_t i = 0; i < S; ++i) gx[r * S + i] += g;
        }
    });
}

// Global max pool over spatial axes: [B, C, ...] -> [B, C].
inline Var global_max_pool(const Var& x) {
    const auto& s = x.shape();
    const std::int64_t B = s[0], C = s[1];
    std::int64_t S = 1;
    for (std::size_t a = 2; a < s.size(); ++a) S *= s[a];
    Tensor y({B, C});
    auto arg = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(B * C));
    const double* xd = x.value().data();
    for (std::int64_t r = 0; r < B * C; ++r) {
        std::int64_t am = 0;
        double m = xd[r * S];
        for (std::int64_t i = 1; i < S; ++i)
            if (xd[r * S + i] > m) {
                m = xd[r * S + i];
                am = i;
            }
        y[r] = m;
        (*arg)[static_cast<std::size_t>(r)] = am;
    }
    return make_op(std::move(y), {x}, [x, arg, B, C, S](Node& self) {
        if (!x.requires_grad()) return;
        Tensor& gx = x.node()->ensure_grad();
        for (std::int64_t r = 0; r < B * C; ++r)
            gx[r * S + (*arg)[static_cast<std::size_t>(r)]] += self.grad[r];
    });
}

// Mean over the channel axis: [B, C, H, W, D] -> [B, 1, H, W, D].
inline Var channel_mean(const Var& x) {
    const auto& s = x.shape();
    const std::int64_t B = s[0], C = s[1];
    std::int64_t S = 1;
    for (std::size_t a = 2; a < s.size(); ++a) S *= s[a];
    std::vector<std::int64_t> ys = s;
    ys[1] = 1;
    Tensor y(ys);
    const double* xd = x.value().data();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t i = 0; i < S; ++i) {
            double m = 0.0;
            for (std::int64_t c = 0; c < C; ++c) m += xd[(b * C + c) * S + i];
            y[b * S + i] = m / static_cast<double>(C);
        }
    return make_op(std::move(y), {x}, [x, B, C, S](Node& self) {
        if (!x.requires_grad()) return;
        Tensor& gx = x.node()->ensure_grad();
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t i = 0; i < S; ++i) {
                const double g = self.grad[b * S + i] / static_cast<double>(C);
                for (std::int64_t c = 0; c < C; ++c) gx[(b * C + c) * S + i] += g;
            }
    });
}

// Max over the channel axis: [B, C, H, W, D] -> [B, 1, H, W, D].
inline Var channel_max(const Var& x) {
    const auto& s = x.shape();
    const std::int64_t B = s[0], C = s[1];
    std::int64_t S = 1;
    for (std::size_t a = 2; a < s.size(); ++a) S *= s[a];
    std::vector<std::int64_t> ys = s;
    ys[1] = 1;
    Tensor y(ys);
    auto arg = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(B * S));
    const double* xd = x.value().data();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t i = 0; i < S; ++i) {
            std::int64_t am = 0;
            double m = xd[b * C * S + i];
            for (std::int64_t c = 1; c < C; ++c)
                if (xd[(b * C + c) * S + i] > m) {
                    m = xd[(b * C + c) * S + i];
                    am = c;
                }
            y[b * S + i] = m;
            (*arg)[static_cast<std::size_t>(b * S + i)] = am;
        }
    return make_op(std::move(y), {x}, [x, arg, B, C, S](Node& self) {
        if (!x.requires_grad()) return;
        Tensor& gx = x.node()->ensure_grad();
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t i = 0; i < S; ++i)
                gx[(b * C + (*arg)[static_cast<std::size_t>(b * S + i)]) * S + i] +=
                    self.grad[b * S + i];
    });
}

// x [B, C, ...] scaled per channel by s [B, C].
inline Var scale_channels(const Var& x, const Var& sc) {
    const auto& s = x.shape();
    const std::int64_t B = s[0], C = s[1];
    std::int64_t S = 1;
    for (std::size_t a = 2; a < s.size(); ++a) S *= s[a];
    if (sc.shape() != std::vector<std::int64_t>{B, C})
        throw std::invalid_argument("scale_channels: scale shape mismatch");
    Tensor y(s);
    const double* xd = x.value().data();
    const double* sd = sc.value().data();
    for (std::int64_t r = 0; r < B * C; ++r)
        for (std::int64_t i = 0; i < S; ++i) y[r * S + i] = xd[r * S + i] * sd[r];
    return make_op(std::move(y), {x, sc}, [x, sc, B, C, S](Node& self) {
        const double* gy = self.grad.data();
        if (x.requires_grad()) {
            Tensor& gx = x.node()->ensure_grad();
            const double* sd = sc.value().data();
            for (std::int64_t r = 0; r < B * C; ++r)
                for (std::int64_t i = 0; i < S; ++i) gx[r * S + i] += gy[r * S + i] * sd[r];
        }
        if (sc.requires_grad()) {
            Tensor& gs = sc.node()->ensure_grad();
            const double* xd = x.value().data();
            for (std::int64_t r = 0; r < B * C; ++r) {
                double acc = 0.0;
                for (std::int64_t i = 0; i < S; ++i) acc += gy[r * S + i] * xd[r * S + i];
                gs[r] += acc;
            }
        }
    });
}

// x [B, C, ...] scaled voxelwise by m [B, 1, ...].
inline Var scale_spatial(const Var& x, const Var& m) {
    const auto& s = x.shape();
    const std::int64_t B = s[0], C = s[1];
    std::int64_t S = 1;
    for (std::size_t a = 2; a < s.size(); ++a) S *= s[a];
    if (m.numel() != B * S) throw std::invalid_argument("scale_spatial: map shape mismatch");
    Tensor y(s);
    const double* xd = x.value().data();
    const double* md = m.value().data();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t i = 0; i < S; ++i)
                y[(b * C + c) * S + i] = xd[(b * C + c) * S + i] * md[b * S + i];
    return make_op(std::move(y), {x, m}, [x, m, B, C, S](Node& self) {
        const double* gy = self.grad.data();
        if (x.requires_grad()) {
            Tensor& gx = x.node()->ensure_grad();
            const double* md = m.value().data();
            for (std::int64_t b = 0; b < B; ++b)
                for (std::int64_t c = 0; c < C; ++c)
                    for (std::int64_t i = 0; i < S; ++i)
                        gx[(b * C + c) * S + i] += gy[(b * C + c) * S + i] * md[b * S + i];
        }
        if (m.requires_grad()) {
            Tensor& gm = m.node()->ensure_grad();
            const double* xd = x.value().data();
            for (std::int64_t b = 0; b < B; ++b)
                for (std::int64_t i = 0; i < S; ++i) {
                    double acc = 0.0;
                    for (std::int64_t c = 0; c < C; ++c)
                        acc += gy[(b * C + c) * S + i] * xd[(b * C + c) * S + i];
                    gm[b * S + i] += acc;
                }
        }
    });
}

// ---- fused windowed attention ----------------------------------------------

// q, k, v: [B, nW, H, T, Dh]; bias (optional, learnable): [H, T, T];
// mask (optional, constant additive): [nW, T, T]. Returns softmax(q k^T *
// scale + bias + mask) v. Scores are recomputed in the backward pass so the
// tape never holds [B, nW, H, T, T].
inline Var window_attention(const Var& q, const Var& k, const Var& v, const Var& bias,
                            const Tensor& mask, double scale) {
    const auto& s = q.shape();
    if (s.size() != 5 || !q.value().same_shape(k.value()) || !q.value().same_shape(v.value()))
        throw std::invalid_argument("window_attention: q/k/v shape mismatch");
    const std::int64_t B = s[0], nW = s[1], H = s[2], T = s[3], Dh = s[4];
    if (bias.defined() && bias.shape() != std::vector<std::int64_t>{H, T, T})
        throw std::invalid_argument("window_attention: bias shape mismatch");
    if (mask.defined() && mask.shape() != std::vector<std::int64_t>{nW, T, T})
        throw std::invalid_argument("window_attention: mask shape mismatch");

    auto scores = [=](const double* qh, const double* kh, std::int64_t w, std::int64_t h,
                      RowMat& S_) {
        ConstMatMap qm(qh, T, Dh), km(kh, T, Dh);
        S_.noalias() = qm * km.transpose() * scale;
        if (bias.defined()) {
            ConstMatMap bm(bias.value().data() + h * T * T, T, T);
            S_ += bm;
        }
        if (mask.defined()) {
            ConstMatMap mm(mask.data() + w * T * T, T, T);
            S_ += mm;
        }
        for (std::int64_t t = 0; t < T; ++t) {
            double mx = S_(t, 0);
            for (std::int64_t u = 1; u < T; ++u) mx = std::max(mx, S_(t, u));
            double z = 0.0;
            for (std::int64_t u = 0; u < T; ++u) {
                S_(t, u) = std::exp(S_(t, u) - mx);
                z += S_(t, u);
            }
            const double inv = 1.0 / z;
            for (std::int64_t u = 0; u < T; ++u) S_(t, u) *= inv;
        }
    };

    Tensor y(s);
    {
        RowMat P(T, T);
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t w = 0; w < nW; ++w)
                for (std::int64_t h = 0; h < H; ++h) {
                    const std::int64_t off = (((b * nW + w) * H + h) * T) * Dh;
                    scores(q.value().data() + off, k.value().data() + off, w, h, P);
                    ConstMatMap vm(v.value().data() + off, T, Dh);
                    MatMap ym(y.data() + off, T, Dh);
                    ym.noalias() = P * vm;
                }
    }
    std::vector<Var> parents{q, k, v};
    if (bias.defined()) parents.push_back(bias);
    return make_op(std::move(y), std::move(parents),
                   [q, k, v, bias, scale, scores, B, nW, H, T, Dh](Node& self) {
        RowMat P(T, T), dP(T, T), dS(T, T);
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t w = 0; w < nW; ++w)
                for (std::int64_t h = 0; h < H; ++h) {
                    const std::int64_t off = (((b * nW + w) * H + h) * T) * Dh;
                    scores(q.value().data() + off, k.value().data() + off, w, h, P);
                    ConstMatMap go(self.grad.data() + off, T, Dh);
                    ConstMatMap vm(v.value().data() + off, T, Dh);
                    if (v.requires_grad()) {
                        MatMap gv(v.node()->ensure_grad().data() + off, T, Dh);
                        gv.noalias() += P.transpose() * go;
                    }
                    dP.noalias() = go * vm.transpose();
                    for (std::int64_t t = 0; t < T; ++t) {
                        double dot = 0.0;
                        for (std::int64_t u = 0; u < T; ++u) dot += dP(t, u) * P(t, u);
                        for (std::int64_t u = 0; u < T; ++u)
                            dS(t, u) = P(t, u) * (dP(t, u) - dot);
                    }
                    ConstMatMap qm(q.value().data() + off, T, Dh);
                    ConstMatMap km(k.value().data() + off, T, Dh);
                    if (q.requires_grad()) {
                        MatMap gq(q.node()->ensure_grad().data() + off, T, Dh);
                        gq.noalias() += dS * km * scale;
                    }
                    if (k.requires_grad()) {
                        MatMap gk(k.node()->ensure_grad().data() + off, T, Dh);
                        gk.noalias() += dS.transpose() * qm * scale;
                    }
                    if (bias.defined() && bias.requires_grad()) {
                        MatMap gb(bias.node()->ensure_grad().data() + h * T * T, T, T);
                        gb += dS;
                    }
                }
    });
}

// Attention probabilities only (no tape) — used by tests to check row sums
// and against dense oracles.
inline Tensor window_attention_probs(const Tensor& q, const Tensor& k, const Tensor& bias,
                                     const Tensor& mask, double scale) {
    const auto& s = q.shape();
    const std::int64_t B = s[0], nW = s[1], H = s[2], T = s[3], Dh = s[4];
    Tensor probs({B, nW, H, T, T});
    RowMat S_(T, T);
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t w = 0; w < nW; ++w)
            for (std::int64_t h = 0; h < H; ++h) {
                const std::int64_t off = (((b * nW + w) * H + h) * T) * Dh;
                ConstMatMap qm(q.data() + off, T, Dh), km(k.data() + off, T, Dh);
                S_.noalias() = qm * km.transpose() * scale;
                if (bias.defined()) S_ += ConstMatMap(bias.data() + h * T * T, T, T);
                if (mask.defined()) S_ += ConstMatMap(mask.data() + w * T * T, T, T);
                double* pr = probs.data() + (((b * nW + w) * H + h) * T) * T;
                for (std::int64_t t = 0; t < T; ++t) {
                    double mx = S_(t, 0);
                    for (std::int64_t u = 1; u < T; ++u) mx = std::max(mx, S_(t, u));
                    double z = 0.0;
                    for (std::int64_t u = 0; u < T; ++u) {
                        pr[t * T + u] = std::exp(S_(t, u) - mx);
                        z += pr[t * T + u];
                    }
                    for (std::int64_t u = 0; u < T; ++u) pr[t * T + u] /= z;
                }
            }
    return probs;
}

// ---- Dice loss --------------------------------------------------------------

// L = 1 - (2 sum(p*g) + eps) / (sum(p) + sum(g) + eps), analytic gradient.
inline Var soft_dice_loss(const Var& pred, const Tensor& gt, double eps) {
    if (!pred.value().same_shape(gt))
        throw std::invalid_argument("dice: shape mismatch " + pred.value().shape_str() + " vs " +
                                    gt.shape_str());
    const std::int64_t n = pred.numel();
    const double* p = pred.value().data();
    const double* g = gt.data();
    double s_pg = 0.0, s_p = 0.0, s_g = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        s_pg += p[i] * g[i];
        s_p += p[i];
        s_g += g[i];
    }
    const double num = 2.0 * s_pg + eps;
    const double den = s_p + s_g + eps;
    Tensor y = Tensor::scalar(1.0 - num / den);
    return make_op(std::move(y), {pred}, [pred, gt, num, den, n](Node& self) {
        if (!pred.requires_grad()) return;
        Tensor& gp = pred.node()->ensure_grad();
        const double* g = gt.data();
        const double gy = self.grad[0];
        const double inv_den2 = 1.0 / (den * den);
        for (std::int64_t i = 0; i < n; ++i)
            gp[i] += gy * (num - 2.0 * g[i] * den) * inv_den2;
    });
}

}  // namespace fuseg3d::ad
