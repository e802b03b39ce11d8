#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mcseg/errors.hpp"
#include "mcseg/rng.hpp"
#include "mcseg/volume.hpp"

namespace mcseg {

/// C x N data matrix: one row per channel, one column per pixel.
using DataMatrix = Eigen::MatrixXd;

inline DataMatrix flatten(const MultiChannelVolume& v) {
    DataMatrix x(v.channels(), v.pixels());
    for (std::size_t c = 0; c < v.channels(); ++c) {
        const auto ch = v.channel(c);
        for (std::size_t p = 0; p < ch.size(); ++p) x(c, p) = ch[p];
    }
    return x;
}

struct PcaOptions {
    double tol = 1e-10;
    std::size_t max_iter = 10'000;
    std::uint64_t seed = 0;
    bool center = false;
};

/// Principal directions of a C x N matrix, strongest first.
struct PcaModel {
    std::vector<Eigen::VectorXd> components;  // unit vectors of length C
    std::vector<double> singular_values;      // non-increasing
    std::size_t channel_count = 0;
    bool centered = false;
    Eigen::VectorXd mean;           // per-channel mean removed before projection (zero unless centered)
    double residual_norm = 0.0;     // Frobenius norm of the matrix left after the last deflation
    std::vector<std::size_t> iterations;

    std::size_t k() const noexcept { return components.size(); }

    /// First `k` components; singular values keep every fitted entry so the
    /// spectrum stays reportable.
    PcaModel truncated(std::size_t k) const {
        if (k > components.size())
            throw ArgumentError("cannot keep " + std::to_string(k) + " of " +
                                std::to_string(components.size()) + " components");
        PcaModel m = *this;
        m.components.resize(k);
        return m;
    }

    /// Throws DegenerateError when orthonormality or ordering is violated.
    void check_invariants() const {
        for (std::size_t s = 0; s < components.size(); ++s) {
            if (std::abs(components[s].norm() - 1.0) > 1e-9)
                throw DegenerateError("component " + std::to_string(s) + " is not unit length");
            for (std::size_t t = 0; t < s; ++t)
                if (std::abs(components[s].dot(components[t])) > 1e-8)
                    throw DegenerateError("components " + std::to_string(t) + " and " +
                                          std::to_string(s) + " are not orthogonal");
        }
        for (std::size_t s = 1; s < singular_values.size(); ++s)
            if (singular_values[s] > singular_values[s - 1])
                throw DegenerateError("singular values are not non-increasing");
    }
};

namespace pca_detail {

inline constexpr std::size_t kSquareEvery = 64;
inline constexpr int kMaxSquarings = 48;

inline void orthogonalize(Eigen::VectorXd& v, const std::vector<Eigen::VectorXd>& basis) {
    // Two passes of classical Gram-Schmidt keep the drift at rounding level.
    for (int pass = 0; pass < 2; ++pass)
        for (const auto& b : basis) v -= b.dot(v) * b;
}

inline void fix_sign(Eigen::VectorXd& w) {
    Eigen::Index arg = 0;
    w.cwiseAbs().maxCoeff(&arg);
    if (w[arg] < 0) w = -w;
}

}  // namespace pca_detail

/// Power iteration with deflation. Component s maximizes the Rayleigh
/// quotient of the Gram matrix of the current deflated data, then the data is
/// deflated by its projection: X <- X - w (w^T X).
inline PcaModel fit_pca(const DataMatrix& x, std::size_t k, const PcaOptions& opt = {}) {
    const auto channels = static_cast<std::size_t>(x.rows());
    if (k > channels)
        throw ArgumentError("requested " + std::to_string(k) + " components from " +
                            std::to_string(channels) + " channels");
    if (!x.allFinite()) throw ArgumentError("data matrix contains non-finite values");

    PcaModel model;
    model.channel_count = channels;
    model.centered = opt.center;
    model.mean = Eigen::VectorXd::Zero(x.rows());

    DataMatrix residual = x;
    if (opt.center && x.cols() > 0) {
        model.mean = x.rowwise().mean();
        residual.colwise() -= model.mean;
    }
    const double total_energy = residual.squaredNorm();
    // Gram eigenvalues below this are rounding noise left by deflation.
    const double zero_eigen = 1e-26 * total_energy;

    SplitMix64 rng(opt.seed);
    for (std::size_t s = 0; s < k; ++s) {
        const Eigen::MatrixXd gram = residual * residual.transpose();
        // Near-degenerate eigenvalues make plain power iteration crawl, so the
        // operator is squared every kSquareEvery steps without convergence.
        // Powers of the Gram matrix share its eigenvectors and widen the gaps.
        Eigen::MatrixXd op = gram;

        Eigen::VectorXd w(x.rows());
        for (Eigen::Index i = 0; i < w.size(); ++i) w[i] = rng.normal();
        pca_detail::orthogonalize(w, model.components);
        w.normalize();

        std::size_t iter = 0;
        int squarings = 0;
        double step = std::numeric_limits<double>::infinity();
        bool null_space = gram.norm() <= zero_eigen;
        while (!null_space && step >= opt.tol) {
            if (iter == opt.max_iter)
                throw ConvergenceError("component " + std::to_string(s) + " did not converge in " +
                                           std::to_string(opt.max_iter) + " iterations",
                                       step);
            if (iter > 0 && iter % pca_detail::kSquareEvery == 0 && squarings < pca_detail::kMaxSquarings) {
                op = op * op;
                op = (0.5 * (op + op.transpose())).eval();
                op /= op.norm();
                ++squarings;
            }
            Eigen::VectorXd next = op * w;
            pca_detail::orthogonalize(next, model.components);
            const double norm = next.norm();
            ++iter;
            if (norm == 0.0 || (gram * w).norm() <= zero_eigen) {
                null_space = true;
                break;
            }
            next /= norm;
            step = (next - w).norm();
            w = std::move(next);
        }
        if (null_space) {
            // Any unit vector orthogonal to the fitted ones spans the remaining null space.
            pca_detail::orthogonalize(w, model.components);
            w.normalize();
        }
        pca_detail::fix_sign(w);

        const Eigen::RowVectorXd projection = w.transpose() * residual;
        double sigma = projection.norm();
        if (!model.singular_values.empty()) sigma = std::min(sigma, model.singular_values.back());
        residual -= w * projection;

        model.components.push_back(std::move(w));
        model.singular_values.push_back(sigma);
        model.iterations.push_back(iter);
    }
    model.residual_norm = residual.norm();
    model.check_invariants();
    return model;
}

/// Share of singular-value mass carried by the first `top_n` components.
/// Needs a model fitted with every component so the denominator is exact.
inline double explained_ratio(const PcaModel& m, std::size_t top_n) {
    if (m.singular_values.size() != m.channel_count)
        throw ArgumentError("explained_ratio needs a model fitted with all " +
                            std::to_string(m.channel_count) + " components");
    if (top_n > m.singular_values.size())
        throw ArgumentError("top_n exceeds the number of fitted components");
    double head = 0.0, total = 0.0;
    for (std::size_t s = 0; s < m.singular_values.size(); ++s) {
        total += m.singular_values[s];
        if (s < top_n) head += m.singular_values[s];
    }
    if (total <= 0.0) throw DegenerateError("all singular values are zero");
    return head / total;
}

/// Projects every pixel column onto the retained components.
inline MultiChannelVolume transform(const MultiChannelVolume& v, const PcaModel& m) {
    if (v.channels() != m.channel_count)
        throw ArgumentError("volume has " + std::to_string(v.channels()) + " channels, model expects " +
                            std::to_string(m.channel_count));
    DataMatrix x = flatten(v);
    if (m.centered) x.colwise() -= m.mean;
    Eigen::MatrixXd basis(m.k(), m.channel_count);
    for (std::size_t s = 0; s < m.k(); ++s) basis.row(static_cast<Eigen::Index>(s)) = m.components[s].transpose();
    const Eigen::MatrixXd y = basis * x;

    MultiChannelVolume out(m.k(), v.height(), v.width());
    for (std::size_t s = 0; s < m.k(); ++s) {
        auto ch = out.channel(s);
        for (std::size_t p = 0; p < ch.size(); ++p)
            ch[p] = static_cast<float>(y(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(p)));
    }
    return out;
}

/// Inverse of transform() in double precision: sum_s w_s * y_s (+ mean).
inline DataMatrix reconstruct(const DataMatrix& reduced, const PcaModel& m) {
    DataMatrix x = DataMatrix::Zero(static_cast<Eigen::Index>(m.channel_count), reduced.cols());
    for (std::size_t s = 0; s < m.k(); ++s)
        x += m.components[s] * reduced.row(static_cast<Eigen::Index>(s));
    if (m.centered) x.colwise() += m.mean;
    return x;
}

/// Joint affine rescale of all channels onto [0, 255] using one global
/// min/max pair.
inline MultiChannelVolume normalize_0_255(const MultiChannelVolume& v) {
    if (!v.all_finite()) throw ArgumentError("cannot normalize a non-finite volume");
    const auto [lo_it, hi_it] = std::minmax_element(v.data().begin(), v.data().end());
    const double lo = *lo_it;
    const double hi = *hi_it;
    if (!(hi > lo)) throw DegenerateRangeError("volume is constant, max == min == " + std::to_string(lo));
    MultiChannelVolume out(v.channels(), v.height(), v.width());
    auto dst = out.data();
    const auto src = v.data();
    const double range = hi - lo;
    for (std::size_t i = 0; i < src.size(); ++i)
        dst[i] = static_cast<float>(255.0 * (static_cast<double>(src[i]) - lo) / range);
    return out;
}

}  // namespace mcseg
