#include <catch2/catch_amalgamated.hpp>

#include "fuseg3d/nn/layers.hpp"
#include "support/checks.hpp"

using namespace fuseg3d;
using ad::Var;
using core::Rng;
using core::Tensor;
using testsupport::fd_max_rel_err;
using testsupport::project;
using testsupport::random_tensor;

TEST_CASE("tensor basics") {
    Tensor t({2, 3, 4});
    REQUIRE(t.numel() == 24);
    t(1, 2, 3) = 7.5;
    REQUIRE(t[23] == 7.5);

    Tensor r = t.reshaped({6, 4});
    r(5, 3) = -1.0;  // aliases the same buffer
    REQUIRE(t(1, 2, 3) == -1.0);

    Tensor c = t.clone();
    c[0] = 42.0;
    REQUIRE(t[0] == 0.0);

    REQUIRE_THROWS(t.reshaped({5, 5}));
}

TEST_CASE("rng determinism") {
    Rng a(123), b(123);
    for (int i = 0; i < 100; ++i) REQUIRE(a.normal() == b.normal());
    Rng c(7);
    for (int i = 0; i < 1000; ++i) {
        const double u = c.uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
        REQUIRE(std::abs(c.trunc_normal(0.02)) <= 0.04);
    }
}

TEST_CASE("elementwise and reduction gradients") {
    Rng rng(1);
    Var a(random_tensor({3, 4}, rng), true);
    Var b(random_tensor({3, 4}, rng), true);

    auto loss = [&] {
        Var s = ad::add(ad::mul(a, b), ad::mul_scalar(ad::sigmoid(a), 0.7));
        s = ad::sub(s, ad::gelu(b));
        s = ad::add(s, ad::relu(ad::add_scalar(a, -0.1)));
        s = ad::add(s, ad::tanh_v(ad::exp_v(ad::mul_scalar(b, 0.3))));
        return ad::mean(s);
    };
    REQUIRE(fd_max_rel_err(loss, {a, b}, rng) < 1e-6);
}

TEST_CASE("permute round trip and gradient") {
    Rng rng(2);
    Tensor x = random_tensor({2, 3, 4, 5}, rng);
    Tensor p = ad::detail::permute_tensor(x, {3, 1, 0, 2});
    REQUIRE(p.shape() == std::vector<std::int64_t>{5, 3, 2, 4});
    REQUIRE(p(4, 2, 1, 3) == x(1, 2, 3, 4));

    Var v(x, true);
    auto loss = [&] { return project(ad::permute(v, {2, 0, 3, 1}), rng); };
    Rng prng(3);
    auto loss2 = [&] {
        Rng r(3);
        return project(ad::permute(v, {2, 0, 3, 1}), r);
    };
    REQUIRE(fd_max_rel_err(loss2, {v}, rng) < 1e-6);
    (void)loss;
    (void)prng;
}

TEST_CASE("concat along channels") {
    Rng rng(4);
    Var a(random_tensor({2, 3, 2, 2, 2}, rng), true);
    Var b(random_tensor({2, 5, 2, 2, 2}, rng), true);
    Var y = ad::concat_axis1({a, b});
    REQUIRE(y.shape() == std::vector<std::int64_t>{2, 8, 2, 2, 2});
    REQUIRE(y.value()(0, 0, 0, 0, 0) == a.value()(0, 0, 0, 0, 0));
    REQUIRE(y.value()(1, 3, 1, 1, 1) == b.value()(1, 0, 1, 1, 1));

    auto loss = [&] {
        Rng r(5);
        return project(ad::concat_axis1({a, b}), r);
    };
    REQUIRE(fd_max_rel_err(loss, {a, b}, rng) < 1e-6);
}

TEST_CASE("linear layer gradient") {
    Rng rng(6);
    Var x(random_tensor({5, 3}, rng), true);
    Var w(random_tensor({3, 4}, rng), true);
    Var b(random_tensor({4}, rng), true);
    auto loss = [&] {
        Rng r(7);
        return project(ad::linear(x, w, b), r);
    };
    REQUIRE(fd_max_rel_err(loss, {x, w, b}, rng) < 1e-6);
}

TEST_CASE("softmax rows sum to one and gradient matches") {
    Rng rng(8);
    Var x(random_tensor({4, 6}, rng, -3.0, 3.0), true);
    Var y = ad::softmax_lastdim(x);
    for (int ridx = 0; ridx < 4; ++ridx) {
        double s = 0.0;
        for (int c = 0; c < 6; ++c) s += y.value()(ridx, c);
        REQUIRE_THAT(s, Catch::Matchers::WithinAbs(1.0, 1e-12));
    }
    auto loss = [&] {
        Rng r(9);
        return project(ad::softmax_lastdim(x), r);
    };
    REQUIRE(fd_max_rel_err(loss, {x}, rng) < 1e-6);
}

TEST_CASE("layer norm gradient") {
    Rng rng(10);
    Var x(random_tensor({7, 5}, rng), true);
    Var g(random_tensor({5}, rng, 0.5, 1.5), true);
    Var b(random_tensor({5}, rng), true);
    auto loss = [&] {
        Rng r(11);
        return project(ad::layer_norm_lastdim(x, g, b), r);
    };
    REQUIRE(fd_max_rel_err(loss, {x, g, b}, rng) < 1e-5);
}

TEST_CASE("instance norm gradient") {
    Rng rng(12);
    Var x(random_tensor({2, 3, 4, 2, 2}, rng), true);
    Var g(random_tensor({3}, rng, 0.5, 1.5), true);
    Var b(random_tensor({3}, rng), true);
    auto loss = [&] {
        Rng r(13);
        return project(ad::instance_norm(x, g, b), r);
    };
    REQUIRE(fd_max_rel_err(loss, {x, g, b}, rng) < 1e-5);
}

TEST_CASE("conv3d matches direct summation and gradient") {
    Rng rng(14);
    Var x(random_tensor({2, 2, 5, 4, 3}, rng), true);
    Var w(random_tensor({3, 2, 3, 3, 3}, rng), true);
    Var b(random_tensor({3}, rng), true);

    Var y = ad::conv3d(x, w, b, 1, 1);
    REQUIRE(y.shape() == std::vector<std::int64_t>{2, 3, 5, 4, 3});

    // brute-force a few output elements
    auto direct = [&](int bi, int co, int oh, int ow, int od) {
        double acc = b.value()[co];
        for (int ci = 0; ci < 2; ++ci)
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j)
                    for (int l = 0; l < 3; ++l) {
                        const int ih = oh - 1 + i, iw = ow - 1 + j, id = od - 1 + l;
                        if (ih < 0 || ih >= 5 || iw < 0 || iw >= 4 || id < 0 || id >= 3) continue;
                        acc += x.value()(bi, ci, ih, iw, id) * w.value()(co, ci, i, j, l);
                    }
        return acc;
    };
    for (auto [bi, co, oh, ow, od] : {std::array{0, 0, 0, 0, 0}, std::array{1, 2, 4, 3, 2},
                                      std::array{1, 1, 2, 1, 1}})
        REQUIRE_THAT(y.value()(bi, co, oh, ow, od),
                     Catch::Matchers::WithinAbs(direct(bi, co, oh, ow, od), 1e-12));

    auto loss = [&] {
        Rng r(15);
        return project(ad::conv3d(x, w, b, 1, 1), r);
    };
    REQUIRE(fd_max_rel_err(loss, {x, w, b}, rng) < 1e-5);

    // strided no-pad variant (patch embedding shape)
    Var w2(random_tensor({4, 2, 2, 2, 2}, rng), true);
    Var y2 = ad::conv3d(x, w2, Var(), 2, 0);
    REQUIRE(y2.shape() == std::vector<std::int64_t>{2, 4, 2, 2, 1});
    auto loss2 = [&] {
        Rng r(16);
        return project(ad::conv3d(x, w2, Var(), 2, 0), r);
    };
    REQUIRE(fd_max_rel_err(loss2, {x, w2}, rng) < 1e-5);
}

TEST_CASE("conv_transpose3d shape and gradient") {
    Rng rng(17);
    Var x(random_tensor({2, 3, 3, 2, 2}, rng), true);
    Var w(random_tensor({3, 2, 2, 2, 2}, rng), true);
    Var b(random_tensor({2}, rng), true);
    Var y = ad::conv_transpose3d(x, w, b, 2);
    REQUIRE(y.shape() == std::vector<std::int64_t>{2, 2, 6, 4, 4});

    // adjoint identity: <conv_t(x), y> == <x, conv(y)> with matching layouts
    auto loss = [&] {
        Rng r(18);
        return project(ad::conv_transpose3d(x, w, b, 2), r);
    };
    REQUIRE(fd_max_rel_err(loss, {x, w, b}, rng) < 1e-5);
}

TEST_CASE("pad crop roll space_to_depth gradients") {
    Rng rng(19);
    Var x(random_tensor({1, 2, 4, 3, 2}, rng), true);

    Var p = ad::pad_end3d(x, 2, 1, 2, ad::PadMode::Zero);
    REQUIRE(p.shape() == std::vector<std::int64_t>{1, 2, 6, 4, 4});
    REQUIRE(p.value()(0, 0, 5, 3, 3) == 0.0);

    Var pr = ad::pad_end3d(x, 1, 1, 1, ad::PadMode::Replicate);
    REQUIRE(pr.value()(0, 1, 4, 3, 2) == x.value()(0, 1, 3, 2, 1));

    auto loss = [&] {
        Rng r(20);
        Var t = ad::pad_end3d(x, 2, 1, 2, ad::PadMode::Zero);
        t = ad::roll3d(t, 2, -1, 1);
        t = ad::crop3d(t, 1, 4, 0, 3, 1, 2);
        return project(t, r);
    };
    REQUIRE(fd_max_rel_err(loss, {x}, rng) < 1e-6);

    auto loss_rep = [&] {
        Rng r(21);
        return project(ad::pad_end3d(x, 1, 1, 1, ad::PadMode::Replicate), r);
    };
    REQUIRE(fd_max_rel_err(loss_rep, {x}, rng) < 1e-6);

    Var xe(random_tensor({1, 2, 4, 2, 2}, rng), true);
    Var s2d = ad::space_to_depth2(xe.detach());
    REQUIRE(s2d.shape() == std::vector<std::int64_t>{1, 16, 2, 1, 1});
    // block (dh=1, dw=0, dd=1), channel 1 -> block index 5
    REQUIRE(s2d.value()(0, 5 * 2 + 1, 1, 0, 0) == xe.value()(0, 1, 3, 0, 1));
    auto loss_s2d = [&] {
        Rng r(22);
        return project(ad::space_to_depth2(xe), r);
    };
    REQUIRE(fd_max_rel_err(loss_s2d, {xe}, rng) < 1e-6);
}

TEST_CASE("window partition inverse and gradient") {
    Rng rng(23);
    Var x(random_tensor({2, 3, 4, 4, 2}, rng), true);
    Var wp = ad::window_partition5d(x, 2);
    REQUIRE(wp.shape() == std::vector<std::int64_t>{2, 2 * 2 * 1, 8, 3});
    Var back = ad::window_reverse5d(wp, 2, 3, 4, 4, 2);
    for (std::int64_t i = 0; i < x.numel(); ++i)
        REQUIRE(back.value()[i] == x.value()[i]);

    auto loss = [&] {
        Rng r(24);
        return project(ad::window_partition5d(x, 2), r);
    };
    REQUIRE(fd_max_rel_err(loss, {x}, rng) < 1e-6);
}

TEST_CASE("pooling and gating gradients") {
    Rng rng(25);
    Var x(random_tensor({2, 3, 3, 2, 2}, rng), true);
    Var s(random_tensor({2, 3}, rng, 0.1, 0.9), true);
    Var m(random_tensor({2, 1, 3, 2, 2}, rng, 0.1, 0.9), true);

    Var avg = ad::global_avg_pool(x);
    REQUIRE(avg.shape() == std::vector<std::int64_t>{2, 3});
    double acc = 0.0;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 2; ++j)
            for (int l = 0; l < 2; ++l) acc += x.value()(1, 2, i, j, l);
    REQUIRE_THAT(avg.value()(1, 2), Catch::Matchers::WithinAbs(acc / 12.0, 1e-12));

    auto loss = [&] {
        Rng r(26);
        Var y = ad::scale_channels(x, s);
        y = ad::scale_spatial(y, m);
        Var gmax = ad::global_max_pool(y);
        Var cm = ad::channel_mean(y);
        Var cx = ad::channel_max(y);
        return ad::add(project(gmax, r), ad::add(project(cm, r), project(cx, r)));
    };
    REQUIRE(fd_max_rel_err(loss, {x, s, m}, rng) < 1e-5);
}

TEST_CASE("gather_bias gradient") {
    Rng rng(27);
    Var table(random_tensor({9, 2}, rng), true);
    std::vector<std::int64_t> idx = {0, 3, 3, 8, 1, 0, 2, 7, 5};
    Var y = ad::gather_bias(table, idx, {2, 3, 3});
    REQUIRE(y.value()(1, 0, 1) == table.value()(3, 1));
    auto loss = [&] {
        Rng r(28);
        return project(ad::gather_bias(table, idx, {2, 3, 3}), r);
    };
    REQUIRE(fd_max_rel_err(loss, {table}, rng) < 1e-6);
}

TEST_CASE("fused window attention equals composed ops and gradient") {
    Rng rng(29);
    const std::int64_t B = 2, nW = 3, H = 2, T = 5, Dh = 4;
    Var q(random_tensor({B, nW, H, T, Dh}, rng), true);
    Var k(random_tensor({B, nW, H, T, Dh}, rng), true);
    Var v(random_tensor({B, nW, H, T, Dh}, rng), true);
    Var bias(random_tensor({H, T, T}, rng), true);
    Tensor mask({nW, T, T});
    Rng mr(30);
    for (std::int64_t i = 0; i < mask.numel(); ++i)
        mask[i] = mr.uniform() < 0.2 ? -1e9 : 0.0;
    const double scale = 1.0 / std::sqrt(static_cast<double>(Dh));

    Var y = ad::window_attention(q, k, v, bias, mask, scale);
    REQUIRE(y.shape() == std::vector<std::int64_t>{B, nW, H, T, Dh});

    // reference via explicit softmax per (b, w, h)
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t w = 0; w < nW; ++w)
            for (std::int64_t h = 0; h < H; ++h)
                for (std::int64_t t = 0; t < T; ++t) {
                    std::vector<double> row(T);
                    double mx = -1e300;
                    for (std::int64_t u = 0; u < T; ++u) {
                        double sv = 0.0;
                        for (std::int64_t d = 0; d < Dh; ++d)
                            sv += q.value()(b, w, h, t, d) * k.value()(b, w, h, u, d);
                        sv = sv * scale + bias.value()(h, t, u) + mask(w, t, u);
                        row[u] = sv;
                        mx = std::max(mx, sv);
                    }
                    double z = 0.0;
                    for (auto& rv : row) {
                        rv = std::exp(rv - mx);
                        z += rv;
                    }
                    for (std::int64_t d = 0; d < Dh; ++d) {
                        double acc = 0.0;
                        for (std::int64_t u = 0; u < T; ++u)
                            acc += row[u] / z * v.value()(b, w, h, u, d);
                        REQUIRE_THAT(y.value()(b, w, h, t, d),
                                     Catch::Matchers::WithinAbs(acc, 1e-10));
                    }
                }

    auto loss = [&] {
        Rng r(31);
        return project(ad::window_attention(q, k, v, bias, mask, scale), r);
    };
    REQUIRE(fd_max_rel_err(loss, {q, k, v, bias}, rng) < 1e-5);

    Tensor probs = ad::window_attention_probs(q.value(), k.value(), bias.value(), mask, scale);
    for (std::int64_t i = 0; i < B * nW * H * T; ++i) {
        double srow = 0.0;
        for (std::int64_t u = 0; u < T; ++u) srow += probs[i * T + u];
        REQUIRE_THAT(srow, Catch::Matchers::WithinAbs(1.0, 1e-9));
    }
}

TEST_CASE("dice loss values and gradient") {
    Rng rng(32);
    const double eps = 1e-5;

    // pred == gt, 1000 positives
    {
        Tensor gt({10, 10, 10});
        for (std::int64_t i = 0; i < gt.numel(); ++i) gt[i] = 1.0;
        Var pred(gt.clone(), true);
        Var l = ad::soft_dice_loss(pred, gt, eps);
        REQUIRE(std::abs(l.value()[0]) <= 1e-6);
    }
    // pred all zero against k positives
    {
        Tensor gt({4, 4, 4});
        for (int i = 0; i < 5; ++i) gt[i] = 1.0;
        Var pred(Tensor({4, 4, 4}), true);
        Var l = ad::soft_dice_loss(pred, gt, eps);
        REQUIRE_THAT(l.value()[0], Catch::Matchers::WithinAbs(1.0 - eps / (5.0 + eps), 1e-12));
    }
    // pred 0.5 everywhere, half the voxels positive
    {
        const std::int64_t N = 512;
        Tensor gt({N});
        for (std::int64_t i = 0; i < N / 2; ++i) gt[i] = 1.0;
        Var pred(Tensor({N}, 0.5), true);
        Var l = ad::soft_dice_loss(pred, gt, eps);
        const double expect =
            1.0 - (0.5 * static_cast<double>(N) + eps) / (static_cast<double>(N) + eps);
        REQUIRE_THAT(l.value()[0], Catch::Matchers::WithinAbs(expect, 1e-12));
    }
    // gradient on random 4^3 inputs, spec tolerance 1e-4
    {
        Tensor gt({4, 4, 4});
        Rng gr(33);
        for (std::int64_t i = 0; i < gt.numel(); ++i) gt[i] = gr.uniform() < 0.4 ? 1.0 : 0.0;
        Var pred(random_tensor({4, 4, 4}, rng, 0.01, 0.99), true);
        auto loss = [&] { return ad::soft_dice_loss(pred, gt, eps); };
        REQUIRE(fd_max_rel_err(loss, {pred}, rng, 1e-6, 64) < 1e-4);
    }
}

TEST_CASE("inference mode builds no tape") {
    Rng rng(34);
    Var x(random_tensor({2, 2}, rng), true);
    {
        ad::NoGrad ng;
        Var y = ad::mul(x, x);
        REQUIRE_FALSE(y.requires_grad());
    }
    Var y = ad::mul(x, x);
    REQUIRE(y.requires_grad());
}
