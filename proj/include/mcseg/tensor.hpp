#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mcseg/errors.hpp"
#include "mcseg/volume.hpp"

namespace mcseg {

/// d x h x w activation array, channel-major.
template <typename T>
class Tensor {
public:
    Tensor() = default;
    Tensor(std::size_t d, std::size_t h, std::size_t w, T fill = T(0))
        : d_(d), h_(h), w_(w), v_(d * h * w, fill) {}
    Tensor(std::size_t d, std::size_t h, std::size_t w, std::vector<T> values)
        : d_(d), h_(h), w_(w), v_(std::move(values)) {
        if (v_.size() != d_ * h_ * w_)
            throw ArgumentError("tensor value count does not match " + dims_string());
    }

    std::size_t depth() const noexcept { return d_; }
    std::size_t height() const noexcept { return h_; }
    std::size_t width() const noexcept { return w_; }
    std::size_t plane() const noexcept { return h_ * w_; }
    std::size_t size() const noexcept { return v_.size(); }

    T& at(std::size_t c, std::size_t y, std::size_t x) noexcept { return v_[(c * h_ + y) * w_ + x]; }
    const T& at(std::size_t c, std::size_t y, std::size_t x) const noexcept { return v_[(c * h_ + y) * w_ + x]; }
    T& operator[](std::size_t i) noexcept { return v_[i]; }
    T operator[](std::size_t i) const noexcept { return v_[i]; }

    T* data() noexcept { return v_.data(); }
    const T* data() const noexcept { return v_.data(); }
    std::span<T> values() noexcept { return v_; }
    std::span<const T> values() const noexcept { return v_; }

    bool same_dims(const Tensor& o) const noexcept { return d_ == o.d_ && h_ == o.h_ && w_ == o.w_; }

    bool all_finite() const noexcept {
        return std::all_of(v_.begin(), v_.end(), [](T x) { return std::isfinite(x); });
    }

    std::string dims_string() const {
        return std::to_string(d_) + "x" + std::to_string(h_) + "x" + std::to_string(w_);
    }

    template <typename U>
    Tensor<U> cast() const {
        return Tensor<U>(d_, h_, w_, std::vector<U>(v_.begin(), v_.end()));
    }

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    std::size_t d_ = 0, h_ = 0, w_ = 0;
    std::vector<T> v_;
};

template <typename T>
Tensor<T> to_tensor(const MultiChannelVolume& v) {
    const auto src = v.data();
    return Tensor<T>(v.channels(), v.height(), v.width(), std::vector<T>(src.begin(), src.end()));
}

}  // namespace mcseg
