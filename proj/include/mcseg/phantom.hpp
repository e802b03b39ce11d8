#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mcseg/errors.hpp"
#include "mcseg/rng.hpp"
#include "mcseg/volume.hpp"

namespace mcseg {

struct TissueParams {
    double amplitude;  // A_c
    double t2_ms;      // T2_c
};

/// Echo times 8*t ms for t = first..last (inclusive).
inline std::vector<double> echo_times_ms(int first = 2, int last = 32, double spacing_ms = 8.0) {
    std::vector<double> te;
    for (int t = first; t <= last; ++t) te.push_back(spacing_ms * t);
    return te;
}

/// Default per-class decay parameters, in scanner-like intensity units.
inline std::vector<TissueParams> default_tissues() {
    return {
        {40.0, 30.0},     // 0 background
        {1000.0, 280.0},  // 1 cerebrospinal fluid
        {700.0, 70.0},    // 2 vertebral body fluid
        {850.0, 120.0},   // 3 lumbar disc
        {600.0, 95.0},    // 4 spinal fluid
        {450.0, 45.0},    // 5 bone
    };
}

struct PhantomSpec {
    std::uint8_t n_classes = kDefaultClassCount;
    std::size_t height = 256;
    std::size_t width = 154;
    std::vector<double> echo_times = echo_times_ms();
    std::vector<TissueParams> tissues = default_tissues();
    double noise_sigma = 0.0;
    std::uint64_t seed = 0;

    std::size_t channels() const noexcept { return echo_times.size(); }

    void validate() const {
        if (n_classes == 0 || n_classes > 6)
            throw ConfigError("phantom geometry defines 1..6 classes, requested " +
                              std::to_string(n_classes));
        if (tissues.size() != n_classes)
            throw ConfigError("need one tissue parameter set per class");
        if (echo_times.empty()) throw ConfigError("at least one echo time is required");
        for (std::size_t t = 0; t < echo_times.size(); ++t) {
            if (!(echo_times[t] > 0.0)) throw ConfigError("echo times must be positive");
            if (t > 0 && !(echo_times[t] > echo_times[t - 1]))
                throw ConfigError("echo times must be strictly increasing");
        }
        for (const auto& p : tissues)
            if (!(p.t2_ms > 0.0) || !(p.amplitude >= 0.0))
                throw ConfigError("tissue parameters need T2 > 0 and A >= 0");
        if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be non-negative");
        if (height == 0 || width == 0) throw ConfigError("phantom dimensions must be positive");
    }
};

namespace phantom_detail {

struct Ellipse {
    double cx, cy, ax, ay;  // normalized coordinates, semi-axes
    bool contains(double u, double v) const noexcept {
        const double du = (u - cx) / ax;
        const double dv = (v - cy) / ay;
        return du * du + dv * dv <= 1.0;
    }
};

struct Band {
    double u0, u1;
    bool contains(double u) const noexcept { return u >= u0 && u <= u1; }
};

// Sagittal spine sketch: a vertical canal band (class 1) holding a narrower
// band (class 4), and a column of bony ellipses (class 5) with fluid-filled
// cores (class 2) separated by flat disc ellipses (class 3).
struct Layout {
    Band canal, cord;
    std::vector<Ellipse> bones, bodies, discs;
};

inline Layout make_layout(SplitMix64& rng) {
    Layout l;
    const double canal_center = 0.69 + rng.uniform(-0.02, 0.02);
    l.canal = {canal_center - 0.11, canal_center + 0.11};
    l.cord = {canal_center - 0.05, canal_center + 0.05};

    constexpr int kVertebrae = 4;
    const double slot = 1.0 / kVertebrae;
    const double column_x = 0.32 + rng.uniform(-0.02, 0.02);
    for (int i = 0; i < kVertebrae; ++i) {
        const double cy = slot * (i + 0.5) + rng.uniform(-0.01, 0.01);
        const double ax = 0.19 + rng.uniform(-0.015, 0.015);
        const double ay = slot * (0.40 + rng.uniform(-0.02, 0.02));
        l.bones.push_back({column_x, cy, ax, ay});
        l.bodies.push_back({column_x, cy, ax * 0.72, ay * 0.68});
    }
    for (int i = 1; i < kVertebrae; ++i) {
        const double cy = slot * i + rng.uniform(-0.005, 0.005);
        l.discs.push_back({column_x, cy, 0.16 + rng.uniform(-0.01, 0.01), slot * 0.14});
    }
    return l;
}

}  // namespace phantom_detail

/// Label geometry only; deterministic in spec.seed.
inline LabelMap phantom_labels(const PhantomSpec& spec) {
    using namespace phantom_detail;
    SplitMix64 rng(derive_seed(spec.seed, 0));
    const Layout layout = make_layout(rng);
    const auto n = spec.n_classes;
    auto allowed = [n](std::uint8_t c) { return c < n; };

    std::vector<std::uint8_t> labels(spec.height * spec.width, 0);
    for (std::size_t y = 0; y < spec.height; ++y) {
        const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(spec.height);
        for (std::size_t x = 0; x < spec.width; ++x) {
            const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(spec.width);
            std::uint8_t c = 0;
            if (allowed(1) && layout.canal.contains(u)) c = 1;
            if (allowed(4) && layout.cord.contains(u)) c = 4;
            for (std::size_t i = 0; i < layout.bones.size(); ++i) {
                if (allowed(5) && layout.bones[i].contains(u, v)) c = 5;
                if (allowed(2) && layout.bodies[i].contains(u, v)) c = 2;
            }
            for (const auto& d : layout.discs)
                if (allowed(3) && d.contains(u, v)) c = 3;
            labels[y * spec.width + x] = c;
        }
    }

    std::vector<std::size_t> area(n, 0);
    for (auto l : labels) ++area[l];
    for (std::uint8_t c = 0; c < n; ++c)
        if (area[c] == 0)
            throw ConfigError("class " + std::to_string(c) + " has zero area at " +
                              std::to_string(spec.height) + "x" + std::to_string(spec.width));
    return LabelMap(spec.height, spec.width, std::move(labels), n, std::max<std::uint8_t>(n, kIgnoreLabel));
}

/// Multi-echo phantom: channel t of a class-c pixel is
/// A_c * exp(-TE_t / T2_c) + noise, noise ~ N(0, sigma^2) drawn in CHW order.
inline std::pair<MultiChannelVolume, LabelMap> generate_phantom(const PhantomSpec& spec) {
    spec.validate();
    LabelMap labels = phantom_labels(spec);

    const std::size_t channels = spec.channels();
    MultiChannelVolume volume(channels, spec.height, spec.width);
    SplitMix64 noise(derive_seed(spec.seed, 1));
    const auto lab = labels.labels();
    for (std::size_t t = 0; t < channels; ++t) {
        std::vector<double> clean(spec.n_classes);
        for (std::size_t c = 0; c < spec.n_classes; ++c)
            clean[c] = spec.tissues[c].amplitude * std::exp(-spec.echo_times[t] / spec.tissues[c].t2_ms);
        auto out = volume.channel(t);
        for (std::size_t p = 0; p < out.size(); ++p) {
            double value = clean[lab[p]];
            if (spec.noise_sigma > 0.0) value += spec.noise_sigma * noise.normal();
            out[p] = static_cast<float>(value);
        }
    }
    return {std::move(volume), std::move(labels)};
}

}  // namespace mcseg
