#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mcseg/errors.hpp"
#include "mcseg/loss.hpp"
#include "mcseg/network.hpp"
#include "mcseg/rng.hpp"
#include "mcseg/tensor.hpp"
#include "mcseg/volume.hpp"

namespace mcseg {

struct TrainConfig {
    Strategy strategy = Strategy::IgnoreBound;
    double learning_rate = 1e-2;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    std::size_t iterations = 1000;
    LossMode loss_mode = LossMode::Mean;
    std::size_t eval_every = 50;
    std::uint64_t seed = 0;
    /// Iterations at which the checkpoint hook fires (the last iteration always does).
    std::vector<std::size_t> checkpoints;

    /// Batch 1, lr 1e-14, momentum 0.99, weight decay 5e-4, summed loss.
    static TrainConfig paper_mode(Strategy s, std::size_t iterations) {
        TrainConfig c;
        c.strategy = s;
        c.learning_rate = 1e-14;
        c.momentum = 0.99;
        c.weight_decay = 0.0005;
        c.loss_mode = LossMode::Sum;
        c.iterations = iterations;
        return c;
    }

    void validate() const {
        if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
            throw ConfigError("learning_rate must be finite and non-negative");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
        if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
        if (eval_every == 0) throw ConfigError("eval_every must be positive");
    }
};

struct LossReport {
    std::size_t iteration = 0;
    double train_loss = 0.0;  // mean of per-step losses since the previous report
    double test_loss = 0.0;
    std::size_t train_pixels = 0;  // contributing pixels summed over those steps
    std::size_t test_pixels = 0;
};

/// One preprocessed training example: network input and its label map.
template <typename T>
struct Sample {
    Tensor<T> input;
    LabelMap labels;
};

/// velocity <- momentum * velocity - lr * (grad + wd * param); param += velocity.
/// Weight decay is skipped when `decay` is false (biases).
template <typename T>
void sgd_momentum_step(std::span<T> params, std::span<const T> grads, std::span<T> velocity, double lr,
                       double momentum, double weight_decay, bool decay = true, std::size_t iteration = 0) {
    if (params.size() != grads.size() || params.size() != velocity.size())
        throw ArgumentError("sgd step: parameter, gradient and velocity sizes differ");
    const double wd = decay ? weight_decay : 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!std::isfinite(grads[i])) throw NumericsError("non-finite gradient", iteration);
        const double g = static_cast<double>(grads[i]) + wd * static_cast<double>(params[i]);
        const double v = momentum * static_cast<double>(velocity[i]) - lr * g;
        velocity[i] = static_cast<T>(v);
        params[i] = static_cast<T>(static_cast<double>(params[i]) + static_cast<double>(velocity[i]));
    }
}

template <typename T>
struct TrainResult {
    Network<T> net;
    std::vector<LossReport> history;
    std::vector<double> step_losses;  // index i is the loss of iteration i+1
    std::optional<std::string> failure;  // set when training aborted on non-finite numerics
    std::size_t completed_iterations = 0;
};

template <typename T>
using CheckpointHook = std::function<void(std::size_t iteration, const Network<T>&)>;

/// Per-pixel argmax over class scores; ties go to the lowest class index.
template <typename T>
LabelMap argmax_labels(const Tensor<T>& probs, std::uint8_t ignore = kIgnoreLabel) {
    const std::size_t plane = probs.plane();
    std::vector<std::uint8_t> out(plane, 0);
    for (std::size_t i = 0; i < plane; ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < probs.depth(); ++c)
            if (probs[c * plane + i] > probs[best * plane + i]) best = c;
        out[i] = static_cast<std::uint8_t>(best);
    }
    return LabelMap(probs.height(), probs.width(), std::move(out), static_cast<std::uint8_t>(probs.depth()),
                    std::max<std::uint8_t>(ignore, static_cast<std::uint8_t>(probs.depth())));
}

template <typename T>
LabelMap predict(const Network<T>& net, const Tensor<T>& input) {
    return argmax_labels(infer(net, input));
}

template <typename T>
double evaluate_loss(const Network<T>& net, const Sample<T>& s, const TrainConfig& cfg, std::size_t* pixels = nullptr) {
    const auto probs = infer(net, s.input);
    const auto r = masked_cross_entropy(probs, s.labels, cfg.strategy, cfg.loss_mode);
    if (pixels) *pixels = r.contributing;
    return r.loss;
}

/// Single-sample SGD with a seeded shuffle per epoch. Reports every
/// eval_every iterations (and at iteration 0) with the test loss. A
/// non-finite gradient stops training and keeps the partial history.
template <typename T>
TrainResult<T> train(std::span<const Sample<T>> dataset, const Sample<T>& test, Network<T> net,
                     const TrainConfig& cfg, const CheckpointHook<T>& on_checkpoint = {}) {
    cfg.validate();
    if (dataset.empty()) throw ArgumentError("training set is empty");
    for (const auto& s : dataset)
        if (s.input.depth() != net.config().input_channels || s.input.height() != dataset[0].input.height() ||
            s.input.width() != dataset[0].input.width())
            throw ArgumentError("training samples must share dims and match the network input channels");

    TrainResult<T> result{std::move(net), {}, {}, std::nullopt, 0};
    auto& model = result.net;

    std::vector<std::vector<T>> velocity;
    for (const auto& p : model.params()) velocity.emplace_back(p.values.size(), T(0));

    {
        LossReport r0;
        double sum = 0.0;
        for (const auto& s : dataset) {
            std::size_t px = 0;
            sum += evaluate_loss(model, s, cfg, &px);
            r0.train_pixels += px;
        }
        r0.train_loss = sum / static_cast<double>(dataset.size());
        r0.test_loss = evaluate_loss(model, test, cfg, &r0.test_pixels);
        result.history.push_back(r0);
    }

    SplitMix64 rng(cfg.seed);
    std::vector<std::size_t> order(dataset.size());
    std::size_t cursor = order.size();
    double window_loss = 0.0;
    std::size_t window_steps = 0, window_pixels = 0;

    for (std::size_t it = 1; it <= cfg.iterations; ++it) {
        if (cursor == order.size()) {
            std::iota(order.begin(), order.end(), std::size_t{0});
            rng.shuffle(std::span<std::size_t>(order));
            cursor = 0;
        }
        const auto& sample = dataset[order[cursor++]];

        auto [probs, cache] = forward(model, sample.input);
        const auto loss = masked_cross_entropy_logits(probs, sample.labels, cfg.strategy, cfg.loss_mode);
        if (!std::isfinite(loss.loss)) {
            result.failure = NumericsError("non-finite loss", it).what();
            break;
        }
        const auto grads = backward_logits(model, cache, loss.grad);
        try {
            for (std::size_t p = 0; p < model.params().size(); ++p) {
                const bool decay = model.param(p).decay;
                auto& param = model.mutable_param(p);
                sgd_momentum_step<T>(param.values, grads.values[p], velocity[p], cfg.learning_rate, cfg.momentum,
                                     cfg.weight_decay, decay, it);
            }
        } catch (const NumericsError& e) {
            result.failure = e.what();
            break;
        }
        result.step_losses.push_back(loss.loss);
        result.completed_iterations = it;
        window_loss += loss.loss;
        ++window_steps;
        window_pixels += loss.contributing;

        if (it % cfg.eval_every == 0 || it == cfg.iterations) {
            LossReport r;
            r.iteration = it;
            r.train_loss = window_loss / static_cast<double>(window_steps);
            r.train_pixels = window_pixels;
            r.test_loss = evaluate_loss(model, test, cfg, &r.test_pixels);
            result.history.push_back(r);
            window_loss = 0.0;
            window_steps = 0;
            window_pixels = 0;
        }
        if (on_checkpoint &&
            (it == cfg.iterations || std::find(cfg.checkpoints.begin(), cfg.checkpoints.end(), it) != cfg.checkpoints.end()))
            on_checkpoint(it, model);
    }
    return result;
}

}  // namespace mcseg
