#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mcseg/errors.hpp"

namespace mcseg {

/// C x H x W intensities, channel-major. Stored in single precision to match
/// the on-disk format; numerical code widens to double where it matters.
class MultiChannelVolume {
public:
    MultiChannelVolume() = default;

    MultiChannelVolume(std::size_t channels, std::size_t height, std::size_t width, float fill = 0.0f)
        : channels_(channels), height_(height), width_(width),
          data_(channels * height * width, fill) {
        check_dims();
    }

    MultiChannelVolume(std::size_t channels, std::size_t height, std::size_t width,
                       std::vector<float> data)
        : channels_(channels), height_(height), width_(width), data_(std::move(data)) {
        check_dims();
        if (data_.size() != channels_ * height_ * width_)
            throw ArgumentError("volume data length " + std::to_string(data_.size()) +
                                " does not match shape " + shape_string());
    }

    std::size_t channels() const noexcept { return channels_; }
    std::size_t height() const noexcept { return height_; }
    std::size_t width() const noexcept { return width_; }
    std::size_t pixels() const noexcept { return height_ * width_; }
    std::size_t size() const noexcept { return data_.size(); }

    float& at(std::size_t c, std::size_t y, std::size_t x) noexcept {
        return data_[(c * height_ + y) * width_ + x];
    }
    float at(std::size_t c, std::size_t y, std::size_t x) const noexcept {
        return data_[(c * height_ + y) * width_ + x];
    }

    std::span<float> channel(std::size_t c) noexcept {
        return {data_.data() + c * pixels(), pixels()};
    }
    std::span<const float> channel(std::size_t c) const noexcept {
        return {data_.data() + c * pixels(), pixels()};
    }

    std::span<float> data() noexcept { return data_; }
    std::span<const float> data() const noexcept { return data_; }

    bool all_finite() const noexcept {
        for (float v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::string shape_string() const {
        return "[" + std::to_string(channels_) + "," + std::to_string(height_) + "," +
               std::to_string(width_) + "]";
    }

    friend bool operator==(const MultiChannelVolume&, const MultiChannelVolume&) = default;

private:
    void check_dims() const {
        if (channels_ == 0 || height_ == 0 || width_ == 0)
            throw ArgumentError("volume dimensions must be positive, got " + shape_string());
    }

    std::size_t channels_ = 0;
    std::size_t height_ = 0;
    std::size_t width_ = 0;
    std::vector<float> data_;
};

inline constexpr std::uint8_t kDefaultClassCount = 6;
inline constexpr std::uint8_t kIgnoreLabel = 6;

/// H x W class indices in [0, n_classes) plus the IGNORE sentinel.
class LabelMap {
public:
    LabelMap() = default;

    LabelMap(std::size_t height, std::size_t width, std::uint8_t fill = 0,
             std::uint8_t n_classes = kDefaultClassCount, std::uint8_t ignore = kIgnoreLabel)
        : height_(height), width_(width), n_classes_(n_classes), ignore_(ignore),
          labels_(height * width, fill) {
        validate();
    }

    LabelMap(std::size_t height, std::size_t width, std::vector<std::uint8_t> labels,
             std::uint8_t n_classes = kDefaultClassCount, std::uint8_t ignore = kIgnoreLabel)
        : height_(height), width_(width), n_classes_(n_classes), ignore_(ignore),
          labels_(std::move(labels)) {
        if (labels_.size() != height_ * width_)
            throw ArgumentError("label count " + std::to_string(labels_.size()) +
                                " does not match " + std::to_string(height_) + "x" +
                                std::to_string(width_));
        validate();
    }

    std::size_t height() const noexcept { return height_; }
    std::size_t width() const noexcept { return width_; }
    std::size_t size() const noexcept { return labels_.size(); }
    std::uint8_t n_classes() const noexcept { return n_classes_; }
    std::uint8_t ignore_label() const noexcept { return ignore_; }

    std::uint8_t at(std::size_t y, std::size_t x) const noexcept { return labels_[y * width_ + x]; }

    /// Writes a label; throws if the value is neither a class nor IGNORE.
    void set(std::size_t y, std::size_t x, std::uint8_t label) {
        check_label(label);
        labels_[y * width_ + x] = label;
    }

    bool is_ignored(std::size_t i) const noexcept { return labels_[i] == ignore_; }
    std::size_t count_ignored() const noexcept {
        std::size_t n = 0;
        for (auto l : labels_) n += (l == ignore_);
        return n;
    }

    std::span<const std::uint8_t> labels() const noexcept { return labels_; }

    friend bool operator==(const LabelMap&, const LabelMap&) = default;

private:
    void check_label(std::uint8_t l) const {
        if (l >= n_classes_ && l != ignore_)
            throw ArgumentError("label " + std::to_string(l) + " is neither a class below " +
                                std::to_string(n_classes_) + " nor the ignore index " +
                                std::to_string(ignore_));
    }

    void validate() const {
        if (height_ == 0 || width_ == 0) throw ArgumentError("label map dimensions must be positive");
        if (ignore_ < n_classes_) throw ArgumentError("ignore index collides with a class index");
        for (auto l : labels_) check_label(l);
    }

    std::size_t height_ = 0;
    std::size_t width_ = 0;
    std::uint8_t n_classes_ = kDefaultClassCount;
    std::uint8_t ignore_ = kIgnoreLabel;
    std::vector<std::uint8_t> labels_;
};

}  // namespace mcseg
