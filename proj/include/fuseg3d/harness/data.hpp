#pragma once

#include <algorithm>
#include <condition_variable>
#include <deque>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "fuseg3d/core/tensor.hpp"
#include "fuseg3d/core/volume.hpp"

namespace fuseg3d::harness {

using core::ConfigError;
using core::DataError;
using core::Rng;
using core::Tensor;
using core::Volume3D;

struct FoldSplit {
    int fold_index = 0;
    std::vector<std::string> train_patient_ids;
    std::vector<std::string> test_patient_ids;
};

// Patient-level k-fold split: ids are shuffled once with the seed, then cut
// into k contiguous test chunks whose sizes differ by at most one.
inline std::vector<FoldSplit> make_folds(std::vector<std::string> patient_ids, int k,
                                         std::uint64_t seed) {
    if (k < 2) throw ConfigError("make_folds: need k >= 2");
    const std::int64_t n = static_cast<std::int64_t>(patient_ids.size());
    if (n < k) throw ConfigError("make_folds: fewer patients than folds");
    std::sort(patient_ids.begin(), patient_ids.end());
    if (std::adjacent_find(patient_ids.begin(), patient_ids.end()) != patient_ids.end())
        throw DataError("make_folds: duplicate patient id");
    Rng rng(seed);
    rng.shuffle(patient_ids);

    std::vector<FoldSplit> folds;
    const std::int64_t base = n / k, extra = n % k;
    std::int64_t at = 0;
    for (int f = 0; f < k; ++f) {
        const std::int64_t len = base + (f < extra ? 1 : 0);
        FoldSplit s;
        s.fold_index = f;
        s.test_patient_ids.assign(patient_ids.begin() + at, patient_ids.begin() + at + len);
        s.train_patient_ids.assign(patient_ids.begin(), patient_ids.begin() + at);
        s.train_patient_ids.insert(s.train_patient_ids.end(), patient_ids.begin() + at + len,
                                   patient_ids.end());
        folds.push_back(std::move(s));
        at += len;
    }
    return folds;
}

// Window start offsets covering [0, total): stride steps plus, when the last
// stride-aligned window stops short, one final window aligned to the end.
inline std::vector<std::int64_t> window_offsets(std::int64_t total, std::int64_t depth,
                                                std::int64_t stride) {
    if (depth < 1 || stride < 1) throw ConfigError("window_offsets: depth and stride must be >= 1");
    if (total < depth) throw ConfigError("window_offsets: volume shallower than window");
    std::vector<std::int64_t> offs;
    for (std::int64_t o = 0; o + depth <= total; o += stride) offs.push_back(o);
    if (offs.back() + depth < total) offs.push_back(total - depth);
    return offs;
}

// Copies slices [offset, offset+depth) of a volume.
inline Tensor extract_window(const Tensor& vol, std::int64_t offset, std::int64_t depth) {
    const auto& s = vol.shape();
    const std::int64_t H = s[0], W = s[1], D = s[2];
    if (offset < 0 || offset + depth > D) throw ConfigError("extract_window: window out of range");
    Tensor out({H, W, depth});
    for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t x = 0; x < W; ++x)
            for (std::int64_t z = 0; z < depth; ++z) out(y, x, z) = vol(y, x, z + offset);
    return out;
}

// Zero-pads the depth axis at the end up to min_depth (no-op when deep enough).
inline Tensor pad_depth_to(const Tensor& vol, std::int64_t min_depth) {
    const auto& s = vol.shape();
    if (s[2] >= min_depth) return vol;
    Tensor out({s[0], s[1], min_depth}, 0.0);
    for (std::int64_t y = 0; y < s[0]; ++y)
        for (std::int64_t x = 0; x < s[1]; ++x)
            for (std::int64_t z = 0; z < s[2]; ++z) out(y, x, z) = vol(y, x, z);
    return out;
}

// Uniform-average stitching of per-window probability maps back to the full
// depth. Windows are sorted by offset first, so the result is independent of
// the order they were produced in.
inline Tensor stitch_windows(std::int64_t H, std::int64_t W, std::int64_t total_depth,
                             std::vector<std::pair<std::int64_t, Tensor>> windows) {
    if (windows.empty()) throw ConfigError("stitch_windows: no windows");
    std::sort(windows.begin(), windows.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    Tensor acc({H, W, total_depth}, 0.0);
    Tensor cnt({H, W, total_depth}, 0.0);
    for (const auto& [off, win] : windows) {
        const auto& s = win.shape();
        if (s[0] != H || s[1] != W) throw DataError("stitch_windows: window plane mismatch");
        if (off < 0 || off + s[2] > total_depth)
            throw DataError("stitch_windows: window out of range");
        for (std::int64_t y = 0; y < H; ++y)
            for (std::int64_t x = 0; x < W; ++x)
                for (std::int64_t z = 0; z < s[2]; ++z) {
                    acc(y, x, z + off) += win(y, x, z);
                    cnt(y, x, z + off) += 1.0;
                }
    }
    for (std::int64_t i = 0; i < acc.numel(); ++i) {
        if (cnt[i] == 0.0) throw DataError("stitch_windows: uncovered voxel");
        acc[i] /= cnt[i];
    }
    return acc;
}

// Bounded FIFO channel for producer-consumer prefetching: push blocks when
// the queue holds `capacity` items, pop blocks when empty, close releases
// both sides.
template <typename T>
class BoundedQueue {
public:
    explicit BoundedQueue(std::size_t capacity) : cap_(capacity) {
        if (capacity == 0) throw ConfigError("BoundedQueue: capacity must be >= 1");
    }

    bool push(T item) {
        std::unique_lock lk(mu_);
        not_full_.wait(lk, [&] { return q_.size() < cap_ || closed_; });
        if (closed_) return false;
        q_.push_back(std::move(item));
        not_empty_.notify_one();
        return true;
    }

    std::optional<T> pop() {
        std::unique_lock lk(mu_);
        not_empty_.wait(lk, [&] { return !q_.empty() || closed_; });
        if (q_.empty()) return std::nullopt;
        T item = std::move(q_.front());
        q_.pop_front();
        not_full_.notify_one();
        return item;
    }

    void close() {
        std::lock_guard lk(mu_);
        closed_ = true;
        not_full_.notify_all();
        not_empty_.notify_all();
    }

    std::size_t size() const {
        std::lock_guard lk(mu_);
        return q_.size();
    }

private:
    mutable std::mutex mu_;
    std::condition_variable not_full_, not_empty_;
    std::deque<T> q_;
    std::size_t cap_;
    bool closed_ = false;
};

}  // namespace fuseg3d::harness
