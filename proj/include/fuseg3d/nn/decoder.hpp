#pragma once

#include <string>

#include "fuseg3d/nn/layers.hpp"

namespace fuseg3d::nn {

// Two conv + instance-norm + ReLU layers inside an additive shortcut. The
// shortcut is the identity when channels match (so zero weights give an exact
// identity) and a pointwise projection otherwise.
struct ResidualBlock {
    std::int64_t cin = 0, cout = 0;
    Conv3d conv1, conv2, proj;
    InstanceNorm3d norm1, norm2;

    ResidualBlock() = default;
    ResidualBlock(std::int64_t cin_, std::int64_t cout_, Rng& rng)
        : cin(cin_),
          cout(cout_),
          conv1(cin_, cout_, 3, 1, 1, rng),
          conv2(cout_, cout_, 3, 1, 1, rng),
          norm1(cout_),
          norm2(cout_) {
        if (cin_ != cout_) proj = Conv3d(cin_, cout_, 1, 1, 0, rng);
    }

    Var forward(const Var& x) const {
        Var t = ad::relu(norm1.forward(conv1.forward(x)));
        t = ad::relu(norm2.forward(conv2.forward(t)));
        const Var skip = cin == cout ? x : proj.forward(x);
        return ad::add(skip, t);
    }

    void collect(const std::string& p, ParamMap& out) const {
        conv1.collect(p + ".conv1", out);
        norm1.collect(p + ".norm1", out);
        conv2.collect(p + ".conv2", out);
        norm2.collect(p + ".norm2", out);
        if (cin != cout) proj.collect(p + ".proj", out);
    }
};

// Deconvolution doubling every spatial dim and halving channels, followed by
// instance norm + ReLU.
struct UpsampleBlock {
    ConvTranspose3d deconv;
    InstanceNorm3d norm;

    UpsampleBlock() = default;
    UpsampleBlock(std::int64_t cin, std::int64_t cout, Rng& rng)
        : deconv(cin, cout, 2, 2, rng), norm(cout) {}

    Var forward(const Var& x) const { return ad::relu(norm.forward(deconv.forward(x))); }

    void collect(const std::string& p, ParamMap& out) const {
        deconv.collect(p + ".deconv", out);
        norm.collect(p + ".norm", out);
    }
};

}  // namespace fuseg3d::nn
