#pragma once

#include <cstdint>

#include <nlohmann/json.hpp>

#include "mcseg/pca.hpp"
#include "mcseg/volume.hpp"

namespace mcseg {

/// Per-sample PCA to `k` channels followed by joint normalization to [0, 255].
/// `k == 0` skips PCA (raw mode) and only normalizes.
struct Preprocessing {
    std::size_t k = 3;
    bool center = false;
    std::uint64_t seed = 0;
    double tol = 1e-10;
    std::size_t max_iter = 10'000;
};

inline void to_json(nlohmann::json& j, const Preprocessing& p) {
    j = {{"pca_k", p.k}, {"center", p.center}, {"seed", p.seed}, {"tol", p.tol}, {"max_iter", p.max_iter}};
}
inline void from_json(const nlohmann::json& j, Preprocessing& p) {
    j.at("pca_k").get_to(p.k);
    j.at("center").get_to(p.center);
    p.seed = j.value("seed", std::uint64_t{0});
    p.tol = j.value("tol", 1e-10);
    p.max_iter = j.value("max_iter", std::size_t{10'000});
}

struct Preprocessed {
    MultiChannelVolume volume;
    PcaModel model;  // fitted with every component; empty in raw mode
};

inline Preprocessed preprocess(const MultiChannelVolume& v, const Preprocessing& p) {
    if (p.k == 0) return {normalize_0_255(v), {}};
    const PcaModel full = fit_pca(flatten(v), v.channels(), {p.tol, p.max_iter, p.seed, p.center});
    return {normalize_0_255(transform(v, full.truncated(p.k))), full};
}

}  // namespace mcseg
