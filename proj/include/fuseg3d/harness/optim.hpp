#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fuseg3d/core/config.hpp"
#include "fuseg3d/core/errors.hpp"
#include "fuseg3d/core/tensor.hpp"
#include "fuseg3d/nn/layers.hpp"

namespace fuseg3d::harness {

using core::Tensor;

// Adam with bias correction over a fixed parameter list. Moment buffers are
// keyed by position, so the ParamMap must not be reordered between steps.
class Adam {
public:
    Adam(nn::ParamMap params, const core::TrainConfig& cfg)
        : params_(std::move(params)),
          lr_(cfg.lr),
          beta1_(cfg.beta1),
          beta2_(cfg.beta2),
          eps_(cfg.adam_eps) {
        m_.reserve(params_.size());
        v_.reserve(params_.size());
        for (const auto& [name, p] : params_) {
            m_.emplace_back(p.value().shape(), 0.0);
            v_.emplace_back(p.value().shape(), 0.0);
        }
    }

    void step() {
        ++step_count_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            ad::Var& p = params_[i].second;
            if (!p.has_grad()) continue;  // parameter untouched by this loss
            const Tensor& g = p.grad_view();
            Tensor& val = p.value();
            Tensor& m = m_[i];
            Tensor& v = v_[i];
            for (std::int64_t j = 0; j < val.numel(); ++j) {
                m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
                v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
                val[j] -= lr_ * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
            }
        }
    }

    void zero_grad() {
        for (auto& [name, p] : params_) p.clear_grad();
    }

    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }
    std::int64_t step_count() const { return step_count_; }

    const nn::ParamMap& params() const { return params_; }
    const std::vector<Tensor>& first_moments() const { return m_; }
    const std::vector<Tensor>& second_moments() const { return v_; }

    void restore_state(std::int64_t step_count, double lr, std::vector<Tensor> m,
                       std::vector<Tensor> v) {
        if (m.size() != params_.size() || v.size() != params_.size())
            throw core::DataError("adam: optimizer state size mismatch");
        for (std::size_t i = 0; i < params_.size(); ++i)
            if (m[i].shape() != params_[i].second.value().shape() ||
                v[i].shape() != params_[i].second.value().shape())
                throw core::DataError("adam: optimizer state shape mismatch at " +
                                      params_[i].first);
        step_count_ = step_count;
        lr_ = lr;
        m_ = std::move(m);
        v_ = std::move(v);
    }

private:
    nn::ParamMap params_;
    double lr_, beta1_, beta2_, eps_;
    std::int64_t step_count_ = 0;
    std::vector<Tensor> m_, v_;
};

// Checkpoint container: magic, then a JSON header (config + named parameter
// inventory + optional optimizer metadata), then raw host-endian doubles —
// parameter values in header order, followed by Adam first and second moments
// when optimizer state is included. Round-trips bitwise.
struct Checkpoint {
    core::FullConfig config;
    std::vector<std::pair<std::string, Tensor>> params;
    bool has_optimizer = false;
    std::int64_t opt_step = 0;
    double opt_lr = 0.0;
    std::vector<Tensor> opt_m, opt_v;
};

namespace ckptdetail {

constexpr char MAGIC[8] = {'F', '3', 'D', 'C', 'K', 'P', '0', '1'};

inline void write_block(std::ofstream& out, const Tensor& t) {
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.numel() * sizeof(double)));
}

inline Tensor read_block(std::ifstream& in, const std::vector<std::int64_t>& shape,
                         const std::string& path) {
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!in) throw core::DataError("truncated checkpoint payload: " + path);
    return t;
}

}  // namespace ckptdetail

inline Checkpoint snapshot(const core::FullConfig& cfg, const nn::ParamMap& params,
                           const Adam* opt = nullptr) {
    Checkpoint ck;
    ck.config = cfg;
    ck.params.reserve(params.size());
    for (const auto& [name, p] : params) ck.params.emplace_back(name, p.value().clone());
    if (opt) {
        ck.has_optimizer = true;
        ck.opt_step = opt->step_count();
        ck.opt_lr = opt->lr();
        for (const Tensor& m : opt->first_moments()) ck.opt_m.push_back(m.clone());
        for (const Tensor& v : opt->second_moments()) ck.opt_v.push_back(v.clone());
    }
    return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    nlohmann::json header;
    header["format_version"] = 1;
    header["config"] = ck.config.to_json();
    nlohmann::json inventory = nlohmann::json::array();
    for (const auto& [name, t] : ck.params)
        inventory.push_back({{"name", name}, {"shape", t.shape()}});
    header["params"] = inventory;
    if (ck.has_optimizer)
        header["optimizer"] = {{"type", "adam"}, {"step", ck.opt_step}, {"lr", ck.opt_lr}};

    std::ofstream out(path, std::ios::binary);
    if (!out) throw core::DataError("cannot open for writing: " + path);
    out.write(ckptdetail::MAGIC, 8);
    const std::string hj = header.dump();
    const std::uint64_t hlen = hj.size();
    out.write(reinterpret_cast<const char*>(&hlen), 8);
    out.write(hj.data(), static_cast<std::streamsize>(hj.size()));
    for (const auto& [name, t] : ck.params) ckptdetail::write_block(out, t);
    if (ck.has_optimizer) {
        for (const Tensor& m : ck.opt_m) ckptdetail::write_block(out, m);
        for (const Tensor& v : ck.opt_v) ckptdetail::write_block(out, v);
    }
    if (!out) throw core::DataError("short write: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw core::DataError("cannot open: " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, ckptdetail::MAGIC, 8) != 0)
        throw core::DataError("not a checkpoint file: " + path);
    std::uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), 8);
    if (!in || hlen == 0 || hlen > (1ull << 30))
        throw core::DataError("corrupted checkpoint header: " + path);
    std::string hj(hlen, '\0');
    in.read(hj.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw core::DataError("corrupted checkpoint header: " + path);
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hj);
    } catch (const nlohmann::json::exception& e) {
        throw core::DataError("malformed checkpoint header: " + std::string(e.what()));
    }

    Checkpoint ck;
    ck.config = core::FullConfig::from_json(header.at("config"));
    for (const auto& entry : header.at("params")) {
        const std::string name = entry.at("name").get<std::string>();
        const auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
        ck.params.emplace_back(name, ckptdetail::read_block(in, shape, path));
    }
    if (header.contains("optimizer")) {
        ck.has_optimizer = true;
        ck.opt_step = header["optimizer"].at("step").get<std::int64_t>();
        ck.opt_lr = header["optimizer"].at("lr").get<double>();
        for (const auto& [name, t] : ck.params)
            ck.opt_m.push_back(ckptdetail::read_block(in, t.shape(), path));
        for (const auto& [name, t] : ck.params)
            ck.opt_v.push_back(ckptdetail::read_block(in, t.shape(), path));
    }
    return ck;
}

// Copies checkpoint weights into live parameters, matching by name; the
// inventory must agree exactly with the model built from the same config.
inline void apply_checkpoint(const Checkpoint& ck, nn::ParamMap& params) {
    if (ck.params.size() != params.size())
        throw core::DataError("checkpoint: parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& [ck_name, ck_val] = ck.params[i];
        auto& [name, p] = params[i];
        if (ck_name != name) throw core::DataError("checkpoint: parameter name mismatch at " +
                                                   name + " vs " + ck_name);
        if (ck_val.shape() != p.value().shape())
            throw core::DataError("checkpoint: shape mismatch at " + name);
        Tensor& dst = p.value();
        for (std::int64_t j = 0; j < dst.numel(); ++j) dst[j] = ck_val[j];
    }
}

inline void apply_optimizer_state(const Checkpoint& ck, Adam& opt) {
    if (!ck.has_optimizer) throw core::DataError("checkpoint carries no optimizer state");
    std::vector<Tensor> m, v;
    for (const Tensor& t : ck.opt_m) m.push_back(t.clone());
    for (const Tensor& t : ck.opt_v) v.push_back(t.clone());
    opt.restore_state(ck.opt_step, ck.opt_lr, std::move(m), std::move(v));
}

}  // namespace fuseg3d::harness
