#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace fuseg3d::core {

// Dense double-precision tensor, always contiguous row-major (last axis
// fastest). Copies are shallow; clone() deep-copies. reshaped() aliases the
// same buffer, so reshapes are free.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::int64_t> shape)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<double>>(count(shape_), 0.0)) {}

    Tensor(std::vector<std::int64_t> shape, double fill)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<double>>(count(shape_), fill)) {}

    Tensor(std::vector<std::int64_t> shape, std::vector<double> values)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<double>>(std::move(values))) {
        if (static_cast<std::int64_t>(data_->size()) != count(shape_))
            throw std::invalid_argument("tensor: value count does not match shape");
    }

    static Tensor zeros(std::vector<std::int64_t> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<std::int64_t> shape, double v) { return Tensor(std::move(shape), v); }

    static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

    bool defined() const { return static_cast<bool>(data_); }
    const std::vector<std::int64_t>& shape() const { return shape_; }
    std::int64_t dim() const { return static_cast<std::int64_t>(shape_.size()); }
    std::int64_t size(std::int64_t axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
    std::int64_t numel() const { return data_ ? static_cast<std::int64_t>(data_->size()) : 0; }

    double* data() { return data_->data(); }
    const double* data() const { return data_->data(); }

    double& operator[](std::int64_t i) { return (*data_)[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return (*data_)[static_cast<std::size_t>(i)]; }

    template <class... Ix>
    double& operator()(Ix... ix) { return (*data_)[flat(ix...)]; }
    template <class... Ix>
    double operator()(Ix... ix) const { return (*data_)[flat(ix...)]; }

    Tensor clone() const {
        Tensor t;
        t.shape_ = shape_;
        t.data_ = std::make_shared<std::vector<double>>(*data_);
        return t;
    }

    // Aliases the underlying buffer; element count must be preserved.
    Tensor reshaped(std::vector<std::int64_t> shape) const {
        if (count(shape) != numel())
            throw std::invalid_argument("reshape: element count mismatch");
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = data_;
        return t;
    }

    void fill(double v) { std::fill(data_->begin(), data_->end(), v); }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    std::string shape_str() const {
        std::ostringstream os;
        os << '(';
        for (std::size_t i = 0; i < shape_.size(); ++i)
            os << shape_[i] << (i + 1 < shape_.size() ? "," : "");
        os << ')';
        return os.str();
    }

    static std::int64_t count(const std::vector<std::int64_t>& shape) {
        std::int64_t n = 1;
        for (auto s : shape) {
            if (s < 0) throw std::invalid_argument("tensor: negative extent");
            n *= s;
        }
        return n;
    }

private:
    template <class... Ix>
    std::size_t flat(Ix... ix) const {
        const std::int64_t idx[] = {static_cast<std::int64_t>(ix)...};
        constexpr std::size_t k = sizeof...(Ix);
        std::int64_t f = 0;
        for (std::size_t a = 0; a < k; ++a) f = f * shape_[a] + idx[a];
        return static_cast<std::size_t>(f);
    }

    std::vector<std::int64_t> shape_;
    std::shared_ptr<std::vector<double>> data_;
};

// Deterministic RNG helpers. The standard distributions are not pinned across
// library implementations, so anything that must reproduce bitwise from a seed
// draws through these.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t raw() { return gen_(); }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Marsaglia polar method; cached second deviate for determinism.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double m = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * m;
        has_spare_ = true;
        return u * m;
    }

    // Truncated normal: resample until |z| <= 2, then scale.
    double trunc_normal(double sigma) {
        double z;
        do {
            z = normal();
        } while (z < -2.0 || z > 2.0);
        return z * sigma;
    }

    std::int64_t index(std::int64_t n) {  // uniform in [0, n)
        return static_cast<std::int64_t>(gen_() % static_cast<std::uint64_t>(n));
    }

    template <class T>
    void shuffle(std::vector<T>& v) {  // Fisher–Yates, seed-stable
        for (std::int64_t i = static_cast<std::int64_t>(v.size()) - 1; i > 0; --i)
            std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(index(i + 1))]);
    }

private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace fuseg3d::core
