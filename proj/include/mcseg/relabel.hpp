#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "mcseg/volume.hpp"

namespace mcseg {

/// Ignore-Bound relabeling: any pixel within Chebyshev distance `band_width`
/// of a pixel holding a different, non-ignored label becomes IGNORE.
/// Existing IGNORE pixels stay IGNORE.
inline LabelMap ignore_boundary(const LabelMap& labels, std::size_t band_width) {
    if (band_width == 0) return labels;
    const std::size_t h = labels.height();
    const std::size_t w = labels.width();
    const std::uint8_t ignore = labels.ignore_label();
    const auto in = labels.labels();

    std::vector<std::uint8_t> out(in.begin(), in.end());
    for (std::size_t y = 0; y < h; ++y) {
        const std::size_t y0 = y >= band_width ? y - band_width : 0;
        const std::size_t y1 = std::min(h - 1, y + band_width);
        for (std::size_t x = 0; x < w; ++x) {
            const std::uint8_t self = in[y * w + x];
            if (self == ignore) continue;
            const std::size_t x0 = x >= band_width ? x - band_width : 0;
            const std::size_t x1 = std::min(w - 1, x + band_width);
            bool boundary = false;
            for (std::size_t yy = y0; yy <= y1 && !boundary; ++yy)
                for (std::size_t xx = x0; xx <= x1; ++xx) {
                    const std::uint8_t other = in[yy * w + xx];
                    if (other != ignore && other != self) {
                        boundary = true;
                        break;
                    }
                }
            if (boundary) out[y * w + x] = ignore;
        }
    }
    return LabelMap(h, w, std::move(out), labels.n_classes(), ignore);
}

}  // namespace mcseg
