#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "freeseg/rng.hpp"

namespace freeseg {

// Dense row-major double tensor. Everything numeric in this project runs in
// 64-bit so analytic gradients can be checked against central finite
// differences at tight tolerances.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        d_.assign(static_cast<size_t>(count(shape_)), 0.0);
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int> shape, double v) {
        Tensor t(std::move(shape));
        for (auto& x : t.d_) x = v;
        return t;
    }

    static Tensor randn(std::vector<int> shape, Rng& rng, double stddev = 1.0) {
        Tensor t(std::move(shape));
        for (auto& x : t.d_) x = rng.normal() * stddev;
        return t;
    }

    static Tensor from(std::vector<int> shape, std::vector<double> data) {
        Tensor t;
        t.shape_ = std::move(shape);
        assert(static_cast<int64_t>(data.size()) == count(t.shape_));
        t.d_ = std::move(data);
        return t;
    }

    static Tensor row(std::initializer_list<double> v) {
        return from({1, static_cast<int>(v.size())}, std::vector<double>(v));
    }

    static Tensor vec(std::vector<double> v) {
        const int n = static_cast<int>(v.size());
        return from({n}, std::move(v));
    }

    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    const std::vector<int>& shape() const { return shape_; }
    int64_t size() const { return static_cast<int64_t>(d_.size()); }
    bool empty() const { return d_.empty(); }

    double* data() { return d_.data(); }
    const double* data() const { return d_.data(); }

    double& operator[](int64_t i) { return d_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return d_[static_cast<size_t>(i)]; }

    double& operator()(int i, int j) {
        return d_[static_cast<size_t>(i) * shape_[1] + j];
    }
    double operator()(int i, int j) const {
        return d_[static_cast<size_t>(i) * shape_[1] + j];
    }
    double& operator()(int i, int j, int k) {
        return d_[(static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k];
    }
    double operator()(int i, int j, int k) const {
        return d_[(static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k];
    }
    double& operator()(int i, int j, int k, int l) {
        return d_[((static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }
    double operator()(int i, int j, int k, int l) const {
        return d_[((static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (double v : d_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    void fill(double v) {
        for (auto& x : d_) x = v;
    }

    double sum() const { return std::accumulate(d_.begin(), d_.end(), 0.0); }

    double l2_norm() const {
        double s = 0.0;
        for (double v : d_) s += v * v;
        return std::sqrt(s);
    }

    bool operator==(const Tensor& o) const { return shape_ == o.shape_ && d_ == o.d_; }

    std::string shape_str() const {
        std::string s = "(";
        for (size_t i = 0; i < shape_.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape_[i]);
        }
        return s + ")";
    }

    static int64_t count(const std::vector<int>& shape) {
        int64_t n = 1;
        for (int d : shape) n *= d;
        return n;
    }

private:
    std::vector<int> shape_;
    std::vector<double> d_;
};

// Pixel containers used by the dataset layer; kept in their on-disk dtypes so
// round trips are bit-identical.
struct ImageF32 {
    int h = 0, w = 0;
    std::vector<float> px; // row-major H*W*3

    float at(int y, int x, int c) const { return px[(static_cast<size_t>(y) * w + x) * 3 + c]; }
    float& at(int y, int x, int c) { return px[(static_cast<size_t>(y) * w + x) * 3 + c]; }
    bool operator==(const ImageF32&) const = default;
};

struct MaskU8 {
    int h = 0, w = 0;
    std::vector<uint8_t> px; // row-major H*W

    uint8_t at(int y, int x) const { return px[static_cast<size_t>(y) * w + x]; }
    uint8_t& at(int y, int x) { return px[static_cast<size_t>(y) * w + x]; }
    int64_t area() const {
        int64_t a = 0;
        for (uint8_t v : px) a += v ? 1 : 0;
        return a;
    }
    bool empty_mask() const { return area() == 0; }
    bool operator==(const MaskU8&) const = default;
};

// Integer label map (semantic GT / predictions). kBackgroundIndex marks the
// reserved background, excluded from every metric.
inline constexpr int32_t kBackgroundIndex = -1;

struct IntMap {
    int h = 0, w = 0;
    std::vector<int32_t> v; // row-major H*W

    int32_t at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }
    int32_t& at(int y, int x) { return v[static_cast<size_t>(y) * w + x]; }
    static IntMap filled(int h, int w, int32_t value) {
        IntMap m{h, w, std::vector<int32_t>(static_cast<size_t>(h) * w, value)};
        return m;
    }
    bool operator==(const IntMap&) const = default;
};

} // namespace freeseg
