#pragma once

// Shared test oracles: random tensors and central finite differences.

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "mcseg/layers.hpp"
#include "mcseg/loss.hpp"
#include "mcseg/network.hpp"
#include "mcseg/phantom.hpp"
#include "mcseg/preprocess.hpp"
#include "mcseg/relabel.hpp"
#include "mcseg/rng.hpp"
#include "mcseg/tensor.hpp"
#include "mcseg/trainer.hpp"
#include "mcseg/volume.hpp"

namespace mcseg::testing {

inline Tensor<double> random_tensor(std::size_t d, std::size_t h, std::size_t w, SplitMix64& rng, double lo = -1.0,
                                    double hi = 1.0) {
    Tensor<double> t(d, h, w);
    for (auto& v : t.values()) v = rng.uniform(lo, hi);
    return t;
}

inline std::vector<double> random_vector(std::size_t n, SplitMix64& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return v;
}

/// Relative error with a small absolute floor so exact zeros compare cleanly.
inline double rel_error(double analytic, double numeric, double floor = 1e-7) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Central difference of f with respect to every entry of `x`.
inline std::vector<double> numeric_gradient(const std::function<double()>& f, std::span<double> x, double h = 1e-5) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double saved = x[i];
        x[i] = saved + h;
        const double up = f();
        x[i] = saved - h;
        const double down = f();
        x[i] = saved;
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

inline double max_rel_error(std::span<const double> analytic, std::span<const double> numeric, double floor = 1e-7) {
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) worst = std::max(worst, rel_error(analytic[i], numeric[i], floor));
    return worst;
}

/// Dot product with a fixed random tensor turns any layer output into a scalar loss.
inline double project(const Tensor<double>& out, const Tensor<double>& r) {
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * r[i];
    return s;
}

/// Random labels in [0, n) with a fraction of IGNORE pixels.
inline LabelMap random_labels(std::size_t h, std::size_t w, std::uint8_t n, SplitMix64& rng, double ignore_rate = 0.0) {
    std::vector<std::uint8_t> l(h * w);
    for (auto& v : l)
        v = rng.uniform() < ignore_rate ? kIgnoreLabel : static_cast<std::uint8_t>(rng.index(n));
    return LabelMap(h, w, std::move(l), n, kIgnoreLabel);
}

/// Replaces every parameter with seeded uniform values so no gradient path is
/// dead (the zero-initialized heads would otherwise block the encoder).
template <typename T>
void randomize(Network<T>& net, std::uint64_t seed, double scale = 0.3) {
    SplitMix64 rng(seed);
    for (std::size_t i = 0; i < net.params().size(); ++i)
        for (auto& v : net.mutable_param(i).values) v = static_cast<T>(rng.uniform(-scale, scale));
}

struct GradientCheck {
    double worst = 0.0;  // over elements whose activation pattern is fixed within +-h
    std::size_t checked = 0;
    std::size_t kinks = 0;  // elements where +-h crosses a ReLU or max-pool switch
};

/// Which ReLUs are active and which max-pool inputs win. Identical patterns at
/// two parameter values mean the loss is smooth on the segment between them.
template <typename T>
std::vector<std::size_t> activation_pattern(const ForwardCache<T>& cache) {
    std::vector<std::size_t> out;
    auto signs = [&](const Tensor<T>& t) {
        for (std::size_t i = 0; i < t.size(); ++i) out.push_back(t[i] > T(0));
    };
    for (const auto& stage : cache.stage_outputs)
        for (const auto& t : stage) signs(t);
    for (const auto& t : cache.head_outputs) signs(t);
    for (const auto& a : cache.pool_argmax) out.insert(out.end(), a.begin(), a.end());
    return out;
}

/// Whole-network check: masked cross entropy on random labels, analytic
/// parameter gradients against central differences with step 1e-5.
///
/// ReLU and max-pool make the loss piecewise smooth. When a perturbation of
/// +-h moves an activation across zero or flips a pooling winner, the central
/// difference averages two slopes and says nothing about the gradient. Those
/// elements are found by comparing activation patterns and are counted
/// rather than compared.
inline GradientCheck network_gradient_check(const NetworkConfig& cfg, std::size_t h, std::size_t w,
                                            std::uint64_t seed) {
    constexpr double step = 1e-5;
    Network<double> net = build_fcn<double>(cfg);
    randomize(net, seed);
    SplitMix64 rng(derive_seed(seed, 1));
    const auto x = random_tensor(cfg.input_channels, h, w, rng, 0.0, 255.0);
    const auto labels = random_labels(h, w, static_cast<std::uint8_t>(cfg.n_classes), rng, 0.2);

    auto [probs, cache] = forward(net, x);
    const auto grads = backward(net, cache, masked_cross_entropy(probs, labels, Strategy::IgnoreBound, LossMode::Sum).grad);

    GradientCheck out;
    for (std::size_t p = 0; p < net.params().size(); ++p) {
        const std::vector<double> values = net.param(p).values;
        for (std::size_t i = 0; i < values.size(); ++i) {
            auto probe = [&](double delta) {
                net.mutable_param(p).values[i] = values[i] + delta;
                auto [pr, c] = forward(net, x);
                net.mutable_param(p).values[i] = values[i];
                return std::pair{masked_cross_entropy(pr, labels, Strategy::IgnoreBound, LossMode::Sum).loss,
                                 activation_pattern(c)};
            };
            const auto [up, up_pattern] = probe(step);
            const auto [down, down_pattern] = probe(-step);
            ++out.checked;
            if (up_pattern != down_pattern) {
                ++out.kinks;
                continue;
            }
            out.worst = std::max(out.worst, rel_error(grads.values[p][i], (up - down) / (2.0 * step), 1e-6));
        }
    }
    return out;
}

/// Piecewise-constant labels: a coarse random grid of `block`-sized cells, so
/// class junctions exist for the ignore band to remove.
inline LabelMap blocky_labels(std::size_t h, std::size_t w, std::size_t block, std::uint8_t n, SplitMix64& rng) {
    const std::size_t gw = w / block + 1;
    std::vector<std::uint8_t> cells((h / block + 1) * gw);
    for (auto& c : cells) c = static_cast<std::uint8_t>(rng.index(n));
    std::vector<std::uint8_t> l(h * w);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) l[y * w + x] = cells[(y / block) * gw + x / block];
    return LabelMap(h, w, std::move(l), n, kIgnoreLabel);
}

/// A noisy 31-echo phantom reduced to three PCA channels, with raw labels and
/// the 1-pixel banded labels used for ignore-bound training.
struct PhantomCase {
    Tensor<float> input;
    LabelMap raw;
    LabelMap banded;
};

inline PhantomCase phantom_case(std::uint64_t seed, std::size_t h = 128, std::size_t w = 77, double noise = 250.0) {
    PhantomSpec spec;
    spec.height = h;
    spec.width = w;
    spec.noise_sigma = noise;
    spec.seed = seed;
    auto [volume, labels] = generate_phantom(spec);
    Preprocessing pre;
    pre.seed = derive_seed(seed, 2);
    auto reduced = preprocess(volume, pre).volume;
    return {to_tensor<float>(reduced), labels, ignore_boundary(labels, 1)};
}

/// Fraction of non-ignored pixels whose argmax prediction matches the label.
template <typename T>
double train_pixel_accuracy(const Network<T>& net, const Tensor<T>& input, const LabelMap& labels) {
    const auto pred = predict(net, input);
    std::size_t hit = 0, total = 0;
    for (std::size_t i = 0; i < labels.labels().size(); ++i) {
        if (labels.is_ignored(i)) continue;
        ++total;
        hit += pred.labels()[i] == labels.labels()[i];
    }
    return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

}  // namespace mcseg::testing
