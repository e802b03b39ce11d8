#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "mcseg/errors.hpp"
#include "mcseg/rng.hpp"
#include "mcseg/volume.hpp"

namespace mcseg {

// ------------------------------------------------------------ KNN-median

/// Per-class, per-dimension medians of training pixel vectors.
struct MedianModel {
    std::vector<std::vector<double>> medians;  // one k-dim vector per class

    std::size_t n_classes() const noexcept { return medians.size(); }
    std::size_t dims() const noexcept { return medians.empty() ? 0 : medians.front().size(); }
};

struct LabeledPixel {
    std::vector<double> x;
    std::uint8_t label;
};

/// Componentwise median per class; even counts take the lower median.
inline MedianModel fit_medians(const std::vector<LabeledPixel>& pixels, std::size_t n_classes) {
    if (pixels.empty()) throw ArgumentError("no pixels to fit medians on");
    const std::size_t dims = pixels.front().x.size();
    std::vector<std::vector<std::vector<double>>> per_class(n_classes, std::vector<std::vector<double>>(dims));
    for (const auto& p : pixels) {
        if (p.x.size() != dims) throw ArgumentError("pixel vectors differ in length");
        if (p.label >= n_classes) continue;  // ignore index and out-of-range labels
        for (std::size_t d = 0; d < dims; ++d) per_class[p.label][d].push_back(p.x[d]);
    }
    MedianModel m;
    for (std::size_t c = 0; c < n_classes; ++c) {
        if (per_class[c].front().empty())
            throw ArgumentError("class " + std::to_string(c) + " has no training pixels");
        std::vector<double> med(dims);
        double norm2 = 0.0;
        for (std::size_t d = 0; d < dims; ++d) {
            auto& vals = per_class[c][d];
            const auto mid = vals.begin() + static_cast<std::ptrdiff_t>((vals.size() - 1) / 2);
            std::nth_element(vals.begin(), mid, vals.end());
            med[d] = *mid;
            norm2 += med[d] * med[d];
        }
        if (!(norm2 > 0.0)) throw ArgumentError("class " + std::to_string(c) + " median is the zero vector");
        m.medians.push_back(std::move(med));
    }
    return m;
}

/// Collects (pixel vector, label) pairs from a volume, skipping ignored pixels.
inline void append_labeled_pixels(const MultiChannelVolume& v, const LabelMap& labels, std::vector<LabeledPixel>& out) {
    if (v.height() != labels.height() || v.width() != labels.width())
        throw ArgumentError("volume and labels differ in spatial size");
    const auto lab = labels.labels();
    for (std::size_t p = 0; p < v.pixels(); ++p) {
        if (labels.is_ignored(p)) continue;
        LabeledPixel px{std::vector<double>(v.channels()), lab[p]};
        for (std::size_t c = 0; c < v.channels(); ++c) px.x[c] = v.channel(c)[p];
        out.push_back(std::move(px));
    }
}

enum class KnnRule {
    MostSimilar,  // argmax of cosine similarity
    Literal,      // argmin of cosine similarity, as the formula is printed
};

/// Class whose median has the largest cosine similarity with x (ties: lowest index).
inline std::size_t knn_classify(std::span<const double> x, const MedianModel& m, KnnRule rule = KnnRule::MostSimilar) {
    if (x.size() != m.dims()) throw ArgumentError("pixel vector length does not match the median model");
    double xn = 0.0;
    for (double v : x) xn += v * v;
    xn = std::sqrt(xn);
    if (!(xn > 0.0)) throw ArgumentError("cannot classify the zero vector");
    std::size_t best = 0;
    double best_sim = rule == KnnRule::MostSimilar ? -std::numeric_limits<double>::infinity()
                                                   : std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m.n_classes(); ++j) {
        double dot = 0.0, yn = 0.0;
        for (std::size_t d = 0; d < x.size(); ++d) {
            dot += x[d] * m.medians[j][d];
            yn += m.medians[j][d] * m.medians[j][d];
        }
        const double sim = dot / (xn * std::sqrt(yn));
        if (rule == KnnRule::MostSimilar ? sim > best_sim : sim < best_sim) {
            best_sim = sim;
            best = j;
        }
    }
    return best;
}

struct KnnScan {
    LabelMap labels;
    std::size_t zero_vector_pixels = 0;  // assigned class 0
};

/// Per-pixel knn_classify over a k-channel volume, split over `threads`
/// disjoint row ranges (results do not depend on the thread count).
inline KnnScan knn_segment(const MultiChannelVolume& v, const MedianModel& m, KnnRule rule = KnnRule::MostSimilar,
                           unsigned threads = 1) {
    if (v.channels() != m.dims())
        throw ArgumentError("volume has " + std::to_string(v.channels()) + " channels, medians have " +
                            std::to_string(m.dims()));
    const std::size_t n = v.pixels();
    std::vector<std::uint8_t> out(n, 0);
    std::vector<std::size_t> zeros(std::max(1u, threads), 0);

    auto work = [&](std::size_t t, std::size_t begin, std::size_t end) {
        std::vector<double> x(v.channels());
        for (std::size_t p = begin; p < end; ++p) {
            double norm2 = 0.0;
            for (std::size_t c = 0; c < v.channels(); ++c) {
                x[c] = v.channel(c)[p];
                norm2 += x[c] * x[c];
            }
            if (!(norm2 > 0.0)) {
                ++zeros[t];
                continue;
            }
            out[p] = static_cast<std::uint8_t>(knn_classify(x, m, rule));
        }
    };
    const std::size_t t_count = zeros.size();
    if (t_count == 1) {
        work(0, 0, n);
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < t_count; ++t)
            pool.emplace_back(work, t, n * t / t_count, n * (t + 1) / t_count);
    }
    KnnScan r{LabelMap(v.height(), v.width(), std::move(out), static_cast<std::uint8_t>(m.n_classes()),
                       std::max<std::uint8_t>(kIgnoreLabel, static_cast<std::uint8_t>(m.n_classes()))),
              0};
    for (auto z : zeros) r.zero_vector_pixels += z;
    return r;
}

// ------------------------------------------------------------ fuzzy c-means

struct FcmOptions {
    std::size_t clusters = 6;
    double fuzzifier = 2.0;  // h > 1
    double tol = 1e-6;
    std::size_t max_iter = 300;
    std::uint64_t seed = 0;
};

struct FuzzyState {
    std::vector<std::vector<double>> centers;      // m x d
    std::vector<std::vector<double>> memberships;  // n x m, rows sum to 1
    double fuzzifier = 2.0;
    std::vector<double> objective;  // J after each membership update, starting from the seeded centers
    std::size_t iterations = 0;
    bool converged = false;

    /// Hard assignment: cluster with the largest membership (ties: lowest index).
    std::vector<std::size_t> assignments() const {
        std::vector<std::size_t> a(memberships.size(), 0);
        for (std::size_t i = 0; i < memberships.size(); ++i)
            a[i] = static_cast<std::size_t>(
                std::max_element(memberships[i].begin(), memberships[i].end()) - memberships[i].begin());
        return a;
    }
};

namespace fcm_detail {

inline double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t d = 0; d < a.size(); ++d) s += (a[d] - b[d]) * (a[d] - b[d]);
    return s;
}

// w_ij = 1 / sum_k (|x_i - c_j| / |x_i - c_k|)^(2/(h-1)); a point sitting on
// centers gets its membership split evenly among those coincident centers.
inline void update_memberships(const std::vector<std::vector<double>>& x, FuzzyState& s) {
    const std::size_t m = s.centers.size();
    const double expo = 1.0 / (s.fuzzifier - 1.0);  // applied to squared distances
    std::vector<double> d2(m);
    for (std::size_t i = 0; i < x.size(); ++i) {
        auto& w = s.memberships[i];
        std::size_t zero_hits = 0;
        for (std::size_t j = 0; j < m; ++j) {
            d2[j] = sq_dist(x[i], s.centers[j]);
            zero_hits += d2[j] == 0.0;
        }
        if (zero_hits > 0) {
            for (std::size_t j = 0; j < m; ++j) w[j] = d2[j] == 0.0 ? 1.0 / static_cast<double>(zero_hits) : 0.0;
            continue;
        }
        for (std::size_t j = 0; j < m; ++j) {
            double denom = 0.0;
            for (std::size_t k = 0; k < m; ++k) denom += std::pow(d2[j] / d2[k], expo);
            w[j] = 1.0 / denom;
        }
    }
}

// c_j = sum_i w_ij^h x_i / sum_i w_ij^h
inline void update_centers(const std::vector<std::vector<double>>& x, FuzzyState& s) {
    const std::size_t dims = x.front().size();
    for (std::size_t j = 0; j < s.centers.size(); ++j) {
        std::vector<double> num(dims, 0.0);
        double den = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double wh = std::pow(s.memberships[i][j], s.fuzzifier);
            den += wh;
            for (std::size_t d = 0; d < dims; ++d) num[d] += wh * x[i][d];
        }
        if (den > 0.0)
            for (std::size_t d = 0; d < dims; ++d) s.centers[j][d] = num[d] / den;
    }
}

inline double objective(const std::vector<std::vector<double>>& x, const FuzzyState& s) {
    double j = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i)
        for (std::size_t c = 0; c < s.centers.size(); ++c)
            j += std::pow(s.memberships[i][c], s.fuzzifier) * sq_dist(x[i], s.centers[c]);
    return j;
}

}  // namespace fcm_detail

/// Standard fuzzy c-means: alternate membership and center updates until the
/// largest center move falls below tol. Initial centers are distinct data
/// points drawn with the seeded generator.
inline FuzzyState fuzzy_cmeans(const std::vector<std::vector<double>>& x, const FcmOptions& opt) {
    if (x.empty()) throw ArgumentError("fuzzy c-means needs at least one element");
    if (opt.clusters == 0) throw ArgumentError("cluster count must be >= 1");
    if (!(opt.fuzzifier > 1.0)) throw ArgumentError("fuzzifier must exceed 1");
    const std::size_t dims = x.front().size();
    for (const auto& v : x)
        if (v.size() != dims) throw ArgumentError("elements differ in dimension");

    FuzzyState s;
    s.fuzzifier = opt.fuzzifier;
    SplitMix64 rng(opt.seed);
    std::vector<std::size_t> idx(x.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    // Partial Fisher-Yates: first `clusters` entries become the seeds.
    for (std::size_t j = 0; j < opt.clusters; ++j) {
        const std::size_t pick = j < idx.size() ? j + static_cast<std::size_t>(rng.index(idx.size() - j)) : 0;
        if (j < idx.size()) std::swap(idx[j], idx[pick]);
        s.centers.push_back(x[idx[std::min(j, idx.size() - 1)]]);
    }
    s.memberships.assign(x.size(), std::vector<double>(opt.clusters, 0.0));

    fcm_detail::update_memberships(x, s);
    s.objective.push_back(fcm_detail::objective(x, s));
    for (std::size_t it = 0; it < opt.max_iter; ++it) {
        const auto previous = s.centers;
        fcm_detail::update_centers(x, s);
        fcm_detail::update_memberships(x, s);
        s.objective.push_back(fcm_detail::objective(x, s));
        s.iterations = it + 1;
        double move = 0.0;
        for (std::size_t j = 0; j < s.centers.size(); ++j)
            move = std::max(move, std::sqrt(fcm_detail::sq_dist(previous[j], s.centers[j])));
        if (move < opt.tol) {
            s.converged = true;
            break;
        }
    }
    return s;
}

}  // namespace mcseg
