#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>

#include "mcseg/errors.hpp"
#include "mcseg/tensor.hpp"
#include "mcseg/volume.hpp"

namespace mcseg {

enum class Strategy { FullyBP, IgnoreBound };
enum class LossMode { Sum, Mean };

inline std::string to_string(Strategy s) { return s == Strategy::FullyBP ? "fully-bp" : "ignore-bound"; }
inline std::string to_string(LossMode m) { return m == LossMode::Sum ? "sum" : "mean"; }

inline Strategy parse_strategy(const std::string& s) {
    if (s == "fully-bp") return Strategy::FullyBP;
    if (s == "ignore-bound") return Strategy::IgnoreBound;
    throw ArgumentError("unknown strategy '" + s + "' (expected fully-bp or ignore-bound)");
}

inline LossMode parse_loss_mode(const std::string& s) {
    if (s == "sum") return LossMode::Sum;
    if (s == "mean") return LossMode::Mean;
    throw ArgumentError("unknown loss mode '" + s + "' (expected sum or mean)");
}

template <typename T>
struct LossResult {
    double loss = 0.0;
    Tensor<T> grad;              // w.r.t. probabilities or logits, depending on the call
    std::size_t contributing = 0;  // pixels that entered the sum
};

namespace loss_detail {

template <typename T>
void check_inputs(const Tensor<T>& probs, const LabelMap& labels, Strategy strategy) {
    if (probs.height() != labels.height() || probs.width() != labels.width())
        throw ArgumentError("scores are " + probs.dims_string() + " but labels are " +
                            std::to_string(labels.height()) + "x" + std::to_string(labels.width()));
    const auto lab = labels.labels();
    for (std::size_t i = 0; i < lab.size(); ++i) {
        if (labels.is_ignored(i)) {
            if (strategy == Strategy::FullyBP)
                throw StrategyError("Fully-BP training labels contain ignored pixels");
            continue;
        }
        if (lab[i] >= probs.depth())
            throw ArgumentError("label " + std::to_string(lab[i]) + " exceeds the " +
                                std::to_string(probs.depth()) + " scored classes");
    }
}

template <typename T>
T clamp_prob(T p) {
    return std::max(p, std::numeric_limits<T>::min());
}

}  // namespace loss_detail

/// Multinomial logistic loss over non-ignored pixels, -sum log p[label],
/// with its gradient w.r.t. the probabilities. Ignored pixels get exactly
/// zero gradient. Mean mode divides by the contributing-pixel count.
template <typename T>
LossResult<T> masked_cross_entropy(const Tensor<T>& probs, const LabelMap& labels, Strategy strategy,
                                   LossMode mode = LossMode::Sum) {
    loss_detail::check_inputs(probs, labels, strategy);
    LossResult<T> r;
    r.grad = Tensor<T>(probs.depth(), probs.height(), probs.width());
    const auto lab = labels.labels();
    const std::size_t plane = probs.plane();
    for (std::size_t i = 0; i < plane; ++i)
        r.contributing += !labels.is_ignored(i);
    const T scale = (mode == LossMode::Mean && r.contributing > 0) ? T(1) / static_cast<T>(r.contributing) : T(1);
    for (std::size_t i = 0; i < plane; ++i) {
        if (labels.is_ignored(i)) continue;
        const T p = loss_detail::clamp_prob(probs[lab[i] * plane + i]);
        r.loss -= std::log(static_cast<double>(p));
        r.grad[lab[i] * plane + i] = -scale / p;
    }
    if (mode == LossMode::Mean && r.contributing > 0) r.loss /= static_cast<double>(r.contributing);
    return r;
}

/// Same loss, with the gradient taken w.r.t. the pre-softmax logits
/// (p - onehot). Numerically safe even when p[label] underflows.
template <typename T>
LossResult<T> masked_cross_entropy_logits(const Tensor<T>& probs, const LabelMap& labels, Strategy strategy,
                                          LossMode mode = LossMode::Sum) {
    loss_detail::check_inputs(probs, labels, strategy);
    LossResult<T> r;
    r.grad = Tensor<T>(probs.depth(), probs.height(), probs.width());
    const auto lab = labels.labels();
    const std::size_t plane = probs.plane();
    for (std::size_t i = 0; i < plane; ++i)
        r.contributing += !labels.is_ignored(i);
    const T scale = (mode == LossMode::Mean && r.contributing > 0) ? T(1) / static_cast<T>(r.contributing) : T(1);
    for (std::size_t i = 0; i < plane; ++i) {
        if (labels.is_ignored(i)) continue;
        r.loss -= std::log(static_cast<double>(loss_detail::clamp_prob(probs[lab[i] * plane + i])));
        for (std::size_t c = 0; c < probs.depth(); ++c) {
            const T onehot = c == lab[i] ? T(1) : T(0);
            r.grad[c * plane + i] = scale * (probs[c * plane + i] - onehot);
        }
    }
    if (mode == LossMode::Mean && r.contributing > 0) r.loss /= static_cast<double>(r.contributing);
    return r;
}

}  // namespace mcseg
