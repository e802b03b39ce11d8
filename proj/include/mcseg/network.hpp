#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mcseg/errors.hpp"
#include "mcseg/layers.hpp"
#include "mcseg/rng.hpp"
#include "mcseg/tensor.hpp"

namespace mcseg {

/// Fully-convolutional layer placed after the last pool (the converted
/// classifier layers of a VGG-style encoder).
struct HeadConv {
    std::size_t kernel = 1;
    std::size_t width = 1;
    friend bool operator==(const HeadConv&, const HeadConv&) = default;
};

struct NetworkConfig {
    std::string preset = "custom";
    std::size_t input_channels = 3;
    std::size_t n_classes = 6;
    std::vector<std::size_t> stage_widths;
    std::vector<std::size_t> convs_per_stage;
    std::vector<HeadConv> head_convs;
    /// 1-based pool numbers that feed a prediction head, ascending; the last
    /// one must be the deepest pool.
    std::vector<std::size_t> fusion_stages;
    /// Deconv strides in application order (deepest first, final last).
    /// Derived from fusion_stages when empty.
    std::vector<std::size_t> upsample_strides;
    std::uint64_t seed = 0;
    /// Multiplies the input before the first conv; presets map the 0..255
    /// normalized range to 0..1.
    double input_scale = 1.0;
    /// Optional expected input size, checked at build time when non-zero.
    std::size_t input_height = 0;
    std::size_t input_width = 0;

    std::size_t stages() const noexcept { return stage_widths.size(); }

    std::size_t conv_count() const noexcept {
        return std::accumulate(convs_per_stage.begin(), convs_per_stage.end(), std::size_t{0}) + head_convs.size();
    }

    std::vector<std::size_t> derived_strides() const {
        std::vector<std::size_t> s;
        for (std::size_t i = fusion_stages.size(); i-- > 1;)
            s.push_back(std::size_t{1} << (fusion_stages[i] - fusion_stages[i - 1]));
        if (!fusion_stages.empty()) s.push_back(std::size_t{1} << fusion_stages.front());
        return s;
    }

    void validate() const {
        if (input_channels == 0 || n_classes == 0) throw ConfigError("input_channels and n_classes must be >= 1");
        if (!(input_scale > 0.0) || !std::isfinite(input_scale)) throw ConfigError("input_scale must be positive and finite");
        if (stage_widths.empty()) throw ConfigError("at least one encoder stage is required");
        if (stage_widths.size() != convs_per_stage.size())
            throw ConfigError("stage_widths and convs_per_stage differ in length");
        for (std::size_t s = 0; s < stages(); ++s)
            if (stage_widths[s] == 0 || convs_per_stage[s] == 0)
                throw ConfigError("stage " + std::to_string(s + 1) + " needs width >= 1 and at least one conv");
        for (const auto& h : head_convs)
            if (h.width == 0 || h.kernel % 2 == 0)
                throw ConfigError("head convs need width >= 1 and an odd kernel");
        if (fusion_stages.empty()) throw ConfigError("at least one fusion stage is required");
        for (std::size_t i = 0; i < fusion_stages.size(); ++i) {
            if (fusion_stages[i] == 0 || fusion_stages[i] > stages())
                throw ConfigError("fusion stage pool" + std::to_string(fusion_stages[i]) + " does not exist");
            if (i > 0 && fusion_stages[i] <= fusion_stages[i - 1])
                throw ConfigError("fusion stages must be strictly ascending");
        }
        if (fusion_stages.back() != stages())
            throw ConfigError("the deepest fusion stage must be the last pool");
        if (!upsample_strides.empty() && upsample_strides != derived_strides())
            throw ConfigError("upsample_strides disagree with the fusion stage spacing");
        if (input_height != 0 || input_width != 0) check_input(input_height, input_width);
    }

    /// Every stage must see at least a 2x2 map of real (unpadded) input.
    void check_input(std::size_t h, std::size_t w) const {
        for (std::size_t s = 0; s < stages(); ++s) {
            const std::size_t div = std::size_t{1} << s;
            const std::size_t eh = (h + div - 1) / div;
            const std::size_t ew = (w + div - 1) / div;
            if (eh < 2 || ew < 2)
                throw ConfigError("input " + std::to_string(h) + "x" + std::to_string(w) +
                                  " is too small for stage " + std::to_string(s + 1) + " (sees " +
                                  std::to_string(eh) + "x" + std::to_string(ew) + ")");
        }
    }

    /// VGG-16 encoder, fc6/fc7 as convolutions, prediction heads on pool3..5.
    static NetworkConfig paper(std::size_t input_channels = 3, std::uint64_t seed = 0) {
        NetworkConfig c;
        c.preset = "paper";
        c.input_channels = input_channels;
        c.stage_widths = {64, 128, 256, 512, 512};
        c.convs_per_stage = {2, 2, 3, 3, 3};
        c.head_convs = {{7, 4096}, {1, 4096}};
        c.fusion_stages = {3, 4, 5};
        c.seed = seed;
        c.input_scale = 1.0 / 255.0;
        c.upsample_strides = c.derived_strides();
        return c;
    }

    static NetworkConfig small(std::size_t input_channels = 3, std::uint64_t seed = 0) {
        NetworkConfig c;
        c.preset = "small";
        c.input_channels = input_channels;
        c.stage_widths = {8, 16, 32, 32};
        c.convs_per_stage = {2, 2, 2, 2};
        c.fusion_stages = {2, 3, 4};
        c.seed = seed;
        c.input_scale = 1.0 / 255.0;
        c.upsample_strides = c.derived_strides();
        return c;
    }

    static NetworkConfig tiny(std::size_t input_channels = 3, std::uint64_t seed = 0) {
        NetworkConfig c;
        c.preset = "tiny";
        c.input_channels = input_channels;
        c.stage_widths = {8, 16, 32};
        c.convs_per_stage = {2, 2, 2};
        c.fusion_stages = {1, 2, 3};
        c.seed = seed;
        c.input_scale = 1.0 / 255.0;
        c.upsample_strides = c.derived_strides();
        return c;
    }

    static NetworkConfig from_preset(const std::string& name, std::size_t input_channels, std::uint64_t seed) {
        if (name == "paper") return paper(input_channels, seed);
        if (name == "small") return small(input_channels, seed);
        if (name == "tiny") return tiny(input_channels, seed);
        throw ConfigError("unknown preset '" + name + "' (expected paper, small or tiny)");
    }

    friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

inline void to_json(nlohmann::json& j, const HeadConv& h) { j = {{"kernel", h.kernel}, {"width", h.width}}; }
inline void from_json(const nlohmann::json& j, HeadConv& h) {
    j.at("kernel").get_to(h.kernel);
    j.at("width").get_to(h.width);
}

inline void to_json(nlohmann::json& j, const NetworkConfig& c) {
    j = {{"preset", c.preset},
         {"input_channels", c.input_channels},
         {"n_classes", c.n_classes},
         {"stage_widths", c.stage_widths},
         {"convs_per_stage", c.convs_per_stage},
         {"head_convs", c.head_convs},
         {"fusion_stages", c.fusion_stages},
         {"upsample_strides", c.upsample_strides.empty() ? c.derived_strides() : c.upsample_strides},
         {"seed", c.seed},
         {"input_scale", c.input_scale},
         {"input_height", c.input_height},
         {"input_width", c.input_width}};
}

inline void from_json(const nlohmann::json& j, NetworkConfig& c) {
    j.at("preset").get_to(c.preset);
    j.at("input_channels").get_to(c.input_channels);
    j.at("n_classes").get_to(c.n_classes);
    j.at("stage_widths").get_to(c.stage_widths);
    j.at("convs_per_stage").get_to(c.convs_per_stage);
    j.at("head_convs").get_to(c.head_convs);
    j.at("fusion_stages").get_to(c.fusion_stages);
    j.at("upsample_strides").get_to(c.upsample_strides);
    j.at("seed").get_to(c.seed);
    c.input_scale = j.value("input_scale", 1.0);
    c.input_height = j.value("input_height", std::size_t{0});
    c.input_width = j.value("input_width", std::size_t{0});
}

template <typename T>
struct Param {
    std::string name;
    std::vector<std::size_t> dims;
    std::vector<T> values;
    bool decay = true;  // weight decay applies (weights yes, biases no)
};

/// One node of the layer graph, for inspection and checkpoint manifests.
struct LayerSpec {
    std::string kind;  // input, pad, conv, relu, maxpool, predict, deconv, crop, add, softmax
    std::string name;
    std::vector<std::string> inputs;
    std::vector<std::string> params;
    std::size_t kernel = 0;
    std::size_t stride = 0;
    std::size_t pad = 0;
    std::size_t channels = 0;  // output channels
};

inline void to_json(nlohmann::json& j, const LayerSpec& l) {
    j = {{"kind", l.kind}, {"name", l.name}, {"inputs", l.inputs}, {"params", l.params},
         {"kernel", l.kernel}, {"stride", l.stride}, {"pad", l.pad}, {"channels", l.channels}};
}

template <typename T>
struct ForwardCache;

template <typename T>
struct Gradients {
    std::vector<std::vector<T>> values;  // parallel to Network::params()
};

namespace net_detail {

struct ConvUnit {
    std::size_t weight = 0, bias = 0;  // param indices
    std::size_t in = 0, out = 0, k = 1, pad = 0;
};

struct DeconvUnit {
    std::size_t weight = 0;
    std::size_t channels = 0, stride = 2, k = 4;
};

inline std::uint64_t next_network_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1);
}

// Fresh id on every copy so caches never validate against a different object.
struct Identity {
    std::uint64_t id = next_network_id();
    Identity() = default;
    Identity(const Identity&) : id(next_network_id()) {}
    Identity& operator=(const Identity&) {
        id = next_network_id();
        return *this;
    }
};

}  // namespace net_detail

/// Encoder (conv+ReLU stages ending in 2x2 max pools) -> optional head convs
/// -> 1x1 prediction convs on the fusion pools -> deconv, crop and add from
/// deepest to shallowest -> final deconv to input size -> softmax.
template <typename T>
class Network {
public:
    const NetworkConfig& config() const noexcept { return cfg_; }
    const std::vector<Param<T>>& params() const noexcept { return params_; }
    const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
    std::size_t param_count() const noexcept {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.values.size();
        return n;
    }
    std::size_t conv_layer_count() const noexcept {
        std::size_t n = 0;
        for (const auto& l : layers_) n += (l.kind == "conv");
        return n;
    }
    std::vector<std::size_t> upsample_strides() const {
        std::vector<std::size_t> s;
        for (const auto& d : deconvs_) s.push_back(d.stride);
        return s;
    }

    const Param<T>& param(std::size_t i) const { return params_.at(i); }
    /// Mutable access invalidates outstanding forward caches.
    Param<T>& mutable_param(std::size_t i) {
        ++generation_;
        return params_.at(i);
    }
    std::optional<std::size_t> find_param(const std::string& name) const {
        for (std::size_t i = 0; i < params_.size(); ++i)
            if (params_[i].name == name) return i;
        return std::nullopt;
    }

    std::uint64_t id() const noexcept { return identity_.id; }
    std::uint64_t generation() const noexcept { return generation_; }
    void touch() noexcept { ++generation_; }

    template <typename U>
    Network<U> cast() const {
        Network<U> n;
        n.cfg_ = cfg_;
        n.layers_ = layers_;
        n.stage_convs_ = stage_convs_;
        n.head_convs_ = head_convs_;
        n.predict_ = predict_;
        n.deconvs_ = deconvs_;
        for (const auto& p : params_)
            n.params_.push_back({p.name, p.dims, std::vector<U>(p.values.begin(), p.values.end()), p.decay});
        return n;
    }

private:
    template <typename>
    friend class Network;
    template <typename U>
    friend Network<U> build_fcn(const NetworkConfig& cfg);
    template <typename U>
    friend std::pair<Tensor<U>, ForwardCache<U>> forward(const Network<U>&, const Tensor<U>&);
    template <typename U>
    friend Tensor<U> infer(const Network<U>&, const Tensor<U>&);
    template <typename U>
    friend Gradients<U> backward_logits(const Network<U>&, const ForwardCache<U>&, const Tensor<U>&);

    std::size_t add_param(std::string name, std::vector<std::size_t> dims, bool decay) {
        std::size_t n = 1;
        for (auto d : dims) n *= d;
        params_.push_back({std::move(name), std::move(dims), std::vector<T>(n, T(0)), decay});
        return params_.size() - 1;
    }

    ConvView<T> view(const net_detail::ConvUnit& u) const {
        return {u.out, u.in, u.k, params_[u.weight].values};
    }
    std::span<const T> bias(const net_detail::ConvUnit& u) const { return params_[u.bias].values; }
    DeconvView<T> view(const net_detail::DeconvUnit& u) const {
        return {u.channels, u.channels, u.k, params_[u.weight].values};
    }

    NetworkConfig cfg_;
    std::vector<Param<T>> params_;
    std::vector<LayerSpec> layers_;
    std::vector<std::vector<net_detail::ConvUnit>> stage_convs_;
    std::vector<net_detail::ConvUnit> head_convs_;
    std::vector<net_detail::ConvUnit> predict_;   // parallel to cfg_.fusion_stages
    std::vector<net_detail::DeconvUnit> deconvs_;  // application order
    net_detail::Identity identity_;
    std::uint64_t generation_ = 0;
};

/// Activations retained by forward() for backward().
template <typename T>
struct ForwardCache {
    std::uint64_t network_id = 0;
    std::uint64_t generation = 0;
    std::size_t height = 0, width = 0;
    std::size_t padded_height = 0, padded_width = 0;
    std::size_t pad_top = 0, pad_left = 0;
    std::vector<std::vector<Tensor<T>>> stage_inputs;   // per stage, input of each conv
    std::vector<std::vector<Tensor<T>>> stage_outputs;  // per stage, post-ReLU output of each conv
    std::vector<std::vector<std::size_t>> pool_argmax;
    std::vector<Tensor<T>> pool_outputs;
    std::vector<Tensor<T>> head_inputs, head_outputs;
    std::vector<Tensor<T>> deconv_inputs;  // application order
    std::vector<std::size_t> deconv_raw_h, deconv_raw_w;
    Tensor<T> probs;
};

template <typename T>
Network<T> build_fcn(const NetworkConfig& cfg) {
    cfg.validate();
    Network<T> net;
    net.cfg_ = cfg;
    SplitMix64 rng(cfg.seed);

    auto he_init = [&](std::size_t idx, std::size_t fan_in) {
        const double scale = std::sqrt(2.0 / static_cast<double>(fan_in));
        for (auto& v : net.params_[idx].values) v = static_cast<T>(scale * rng.normal());
    };
    auto make_conv = [&](const std::string& name, std::size_t in, std::size_t out, std::size_t k, bool he) {
        net_detail::ConvUnit u;
        u.in = in;
        u.out = out;
        u.k = k;
        u.pad = k / 2;
        u.weight = net.add_param(name + ".weight", {out, in, k, k}, true);
        u.bias = net.add_param(name + ".bias", {out}, false);
        if (he) he_init(u.weight, in * k * k);
        return u;
    };

    auto& layers = net.layers_;
    layers.push_back({"input", "data", {}, {}, 0, 0, 0, cfg.input_channels});
    layers.push_back({"pad", "pad", {"data"}, {}, 0, 0, 0, cfg.input_channels});
    std::string prev = "pad";
    std::size_t channels = cfg.input_channels;
    std::vector<std::string> pool_names;

    for (std::size_t s = 0; s < cfg.stages(); ++s) {
        net.stage_convs_.emplace_back();
        for (std::size_t i = 0; i < cfg.convs_per_stage[s]; ++i) {
            const std::string name = "conv" + std::to_string(s + 1) + "_" + std::to_string(i + 1);
            auto u = make_conv(name, channels, cfg.stage_widths[s], 3, true);
            layers.push_back({"conv", name, {prev}, {name + ".weight", name + ".bias"}, 3, 1, 1, u.out});
            layers.push_back({"relu", "relu" + name.substr(4), {name}, {}, 0, 0, 0, u.out});
            prev = layers.back().name;
            channels = u.out;
            net.stage_convs_.back().push_back(u);
        }
        const std::string pool = "pool" + std::to_string(s + 1);
        layers.push_back({"maxpool", pool, {prev}, {}, 2, 2, 0, channels});
        pool_names.push_back(pool);
        prev = pool;
    }
    for (std::size_t i = 0; i < cfg.head_convs.size(); ++i) {
        const std::string name = "fc" + std::to_string(i + 6);
        const auto& h = cfg.head_convs[i];
        auto u = make_conv(name, channels, h.width, h.kernel, true);
        layers.push_back({"conv", name, {prev}, {name + ".weight", name + ".bias"}, h.kernel, 1, u.pad, u.out});
        layers.push_back({"relu", "relu_" + name, {name}, {}, 0, 0, 0, u.out});
        prev = layers.back().name;
        channels = u.out;
        net.head_convs_.push_back(u);
    }
    const std::string deepest_feature = prev;

    // Prediction heads start at zero so the initial softmax is uniform.
    std::vector<std::string> predict_names;
    for (std::size_t f = 0; f < cfg.fusion_stages.size(); ++f) {
        const std::size_t pool = cfg.fusion_stages[f];
        const bool deepest = f + 1 == cfg.fusion_stages.size();
        const std::string source = deepest ? deepest_feature : pool_names[pool - 1];
        const std::size_t in = deepest ? channels : cfg.stage_widths[pool - 1];
        const std::string name = "predict_pool" + std::to_string(pool);
        auto u = make_conv(name, in, cfg.n_classes, 1, false);
        net.predict_.push_back(u);
        predict_names.push_back(name);
        layers.push_back({"predict", name, {source}, {name + ".weight", name + ".bias"}, 1, 1, 0, cfg.n_classes});
    }

    const auto strides = cfg.derived_strides();
    std::string score = predict_names.back();
    for (std::size_t i = 0; i < strides.size(); ++i) {
        const bool final_step = i + 1 == strides.size();
        const std::size_t target = cfg.fusion_stages.size() - 2 - i;  // valid only when !final_step
        const std::string name = final_step ? "upscore_final" : "upscore_pool" + std::to_string(cfg.fusion_stages[target]);
        net_detail::DeconvUnit d;
        d.channels = cfg.n_classes;
        d.stride = strides[i];
        d.k = 2 * strides[i];
        d.weight = net.add_param(name + ".weight", {d.channels, d.channels, d.k, d.k}, true);
        net.params_[d.weight].values = bilinear_kernel<T>(d.channels, d.stride).values;
        net.deconvs_.push_back(d);
        layers.push_back({"deconv", name, {score}, {name + ".weight"}, d.k, d.stride, 0, d.channels});
        layers.push_back({"crop", "crop_" + name, {name}, {}, 0, 0, d.stride / 2, d.channels});
        if (!final_step) {
            const std::string sum = "fuse_pool" + std::to_string(cfg.fusion_stages[target]);
            layers.push_back({"add", sum, {"crop_" + name, predict_names[target]}, {}, 0, 0, 0, d.channels});
            score = sum;
        } else {
            score = "crop_" + name;
        }
    }
    layers.push_back({"crop", "crop_unpad", {score}, {}, 0, 0, 0, cfg.n_classes});
    layers.push_back({"softmax", "prob", {"crop_unpad"}, {}, 0, 0, 0, cfg.n_classes});
    return net;
}

namespace net_detail {

template <typename T>
Tensor<T> run_forward(const Network<T>& net, const Tensor<T>& x, ForwardCache<T>* cache,
                      const std::vector<std::vector<ConvUnit>>& stage_convs, const std::vector<ConvUnit>& head,
                      const std::vector<ConvUnit>& predict, const std::vector<DeconvUnit>& deconvs,
                      const auto& conv_view, const auto& bias_of, const auto& deconv_view) {
    const auto& cfg = net.config();
    if (x.depth() != cfg.input_channels)
        throw ArgumentError("input has " + std::to_string(x.depth()) + " channels, network expects " +
                            std::to_string(cfg.input_channels));
    cfg.check_input(x.height(), x.width());

    const std::size_t mult = std::size_t{1} << cfg.stages();
    const std::size_t hp = (x.height() + mult - 1) / mult * mult;
    const std::size_t wp = (x.width() + mult - 1) / mult * mult;
    const std::size_t top = (hp - x.height()) / 2;
    const std::size_t left = (wp - x.width()) / 2;
    if (cache) {
        cache->height = x.height();
        cache->width = x.width();
        cache->padded_height = hp;
        cache->padded_width = wp;
        cache->pad_top = top;
        cache->pad_left = left;
    }

    Tensor<T> a = embed(x, top, left, hp, wp);
    if (cfg.input_scale != 1.0)
        for (auto& v : a.values()) v *= static_cast<T>(cfg.input_scale);
    std::vector<Tensor<T>> pool_outputs;
    for (std::size_t s = 0; s < stage_convs.size(); ++s) {
        if (cache) {
            cache->stage_inputs.emplace_back();
            cache->stage_outputs.emplace_back();
        }
        for (const auto& u : stage_convs[s]) {
            Tensor<T> out = conv2d_forward(a, conv_view(u), bias_of(u), 1, u.pad);
            relu_inplace(out);
            if (cache) {
                cache->stage_inputs.back().push_back(std::move(a));
                cache->stage_outputs.back().push_back(out);
            }
            a = std::move(out);
        }
        auto pooled = maxpool_forward(a);
        if (cache) cache->pool_argmax.push_back(std::move(pooled.argmax));
        pool_outputs.push_back(pooled.out);
        a = std::move(pooled.out);
    }
    for (const auto& u : head) {
        Tensor<T> out = conv2d_forward(a, conv_view(u), bias_of(u), 1, u.pad);
        relu_inplace(out);
        if (cache) {
            cache->head_inputs.push_back(std::move(a));
            cache->head_outputs.push_back(out);
        }
        a = std::move(out);
    }

    const auto& fusion = cfg.fusion_stages;
    auto feature = [&](std::size_t f) -> const Tensor<T>& {
        return f + 1 == fusion.size() ? a : pool_outputs[fusion[f] - 1];
    };
    Tensor<T> score = conv2d_forward(feature(fusion.size() - 1), conv_view(predict.back()), bias_of(predict.back()));
    for (std::size_t i = 0; i < deconvs.size(); ++i) {
        const auto& d = deconvs[i];
        Tensor<T> up = deconv_forward(score, deconv_view(d), d.stride);
        if (cache) {
            cache->deconv_raw_h.push_back(up.height());
            cache->deconv_raw_w.push_back(up.width());
            cache->deconv_inputs.push_back(std::move(score));
        }
        const bool final_step = i + 1 == deconvs.size();
        if (final_step) {
            score = crop(up, d.stride / 2, d.stride / 2, hp, wp);
        } else {
            const std::size_t target = fusion.size() - 2 - i;
            const auto& feat = feature(target);
            score = crop(up, d.stride / 2, d.stride / 2, feat.height(), feat.width());
            add_inplace(score, conv2d_forward(feat, conv_view(predict[target]), bias_of(predict[target])));
        }
    }
    if (cache) cache->pool_outputs = std::move(pool_outputs);
    Tensor<T> logits = crop(score, top, left, x.height(), x.width());
    return softmax_forward(logits);
}

}  // namespace net_detail

/// Per-pixel class probabilities plus the activations needed by backward().
template <typename T>
std::pair<Tensor<T>, ForwardCache<T>> forward(const Network<T>& net, const Tensor<T>& x) {
    ForwardCache<T> cache;
    cache.network_id = net.id();
    cache.generation = net.generation();
    auto probs = net_detail::run_forward(
        net, x, &cache, net.stage_convs_, net.head_convs_, net.predict_, net.deconvs_,
        [&](const net_detail::ConvUnit& u) { return net.view(u); },
        [&](const net_detail::ConvUnit& u) { return net.bias(u); },
        [&](const net_detail::DeconvUnit& d) { return net.view(d); });
    cache.probs = probs;
    return {std::move(probs), std::move(cache)};
}

/// forward() without retaining activations.
template <typename T>
Tensor<T> infer(const Network<T>& net, const Tensor<T>& x) {
    return net_detail::run_forward(
        net, x, static_cast<ForwardCache<T>*>(nullptr), net.stage_convs_, net.head_convs_, net.predict_,
        net.deconvs_, [&](const net_detail::ConvUnit& u) { return net.view(u); },
        [&](const net_detail::ConvUnit& u) { return net.bias(u); },
        [&](const net_detail::DeconvUnit& d) { return net.view(d); });
}

/// Parameter gradients given dL/dlogits (pre-softmax scores).
template <typename T>
Gradients<T> backward_logits(const Network<T>& net, const ForwardCache<T>& cache, const Tensor<T>& grad_logits) {
    if (cache.network_id != net.id() || cache.generation != net.generation())
        throw StateError("forward cache is stale: parameters changed since it was recorded");
    const auto& cfg = net.config();
    if (grad_logits.depth() != cfg.n_classes || grad_logits.height() != cache.height ||
        grad_logits.width() != cache.width)
        throw ArgumentError("gradient shape " + grad_logits.dims_string() + " does not match the forward output");

    Gradients<T> grads;
    for (const auto& p : net.params_) grads.values.emplace_back(p.values.size(), T(0));
    auto accumulate = [&](std::size_t idx, const std::vector<T>& g) {
        auto& dst = grads.values[idx];
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    };
    auto conv_back = [&](const net_detail::ConvUnit& u, const Tensor<T>& in, const Tensor<T>& g) {
        auto r = conv2d_backward(in, net.view(u), g, 1, u.pad);
        accumulate(u.weight, r.grad_w);
        accumulate(u.bias, r.grad_b);
        return std::move(r.grad_x);
    };

    const auto& fusion = cfg.fusion_stages;
    const std::size_t n_fusion = fusion.size();
    const std::size_t stages = cfg.stages();
    const Tensor<T>& deepest_feature = net.head_convs_.empty() ? cache.pool_outputs.back() : cache.head_outputs.back();

    // Gradient arriving at each pool output from the prediction heads.
    std::vector<std::optional<Tensor<T>>> pool_grad(stages);
    std::optional<Tensor<T>> deepest_grad;

    Tensor<T> g = embed(grad_logits, cache.pad_top, cache.pad_left, cache.padded_height, cache.padded_width);
    for (std::size_t i = net.deconvs_.size(); i-- > 0;) {
        const auto& d = net.deconvs_[i];
        const bool final_step = i + 1 == net.deconvs_.size();
        if (!final_step) {
            // g is the gradient of the fused sum at level `target`; it also flows into that head.
            const std::size_t target = n_fusion - 2 - i;
            const Tensor<T>& feat = cache.pool_outputs[fusion[target] - 1];
            Tensor<T> gf = conv_back(net.predict_[target], feat, g);
            auto& slot = pool_grad[fusion[target] - 1];
            if (slot) add_inplace(*slot, gf);
            else slot = std::move(gf);
        }
        Tensor<T> graw = embed(g, d.stride / 2, d.stride / 2, cache.deconv_raw_h[i], cache.deconv_raw_w[i]);
        auto r = deconv_backward(cache.deconv_inputs[i], net.view(d), graw, d.stride);
        accumulate(d.weight, r.grad_w);
        g = std::move(r.grad_x);
    }
    deepest_grad = conv_back(net.predict_.back(), deepest_feature, g);

    // Head convs, deepest first; afterwards ga is the gradient at the last pool output.
    Tensor<T> ga = std::move(*deepest_grad);
    for (std::size_t i = net.head_convs_.size(); i-- > 0;) {
        ga = relu_backward(cache.head_outputs[i], std::move(ga));
        ga = conv_back(net.head_convs_[i], cache.head_inputs[i], ga);
    }
    std::optional<Tensor<T>> carry = std::move(ga);
    for (std::size_t s = stages; s-- > 0;) {
        Tensor<T> gp = carry ? std::move(*carry) : Tensor<T>(cache.pool_outputs[s].depth(),
                                                              cache.pool_outputs[s].height(),
                                                              cache.pool_outputs[s].width());
        if (pool_grad[s]) add_inplace(gp, *pool_grad[s]);
        const Tensor<T>& last_out = cache.stage_outputs[s].back();
        Tensor<T> gs = maxpool_backward(gp, cache.pool_argmax[s], last_out.depth(), last_out.height(), last_out.width());
        for (std::size_t i = net.stage_convs_[s].size(); i-- > 0;) {
            gs = relu_backward(cache.stage_outputs[s][i], std::move(gs));
            gs = conv_back(net.stage_convs_[s][i], cache.stage_inputs[s][i], gs);
        }
        carry = std::move(gs);
    }
    return grads;
}

/// Parameter gradients given dL/dprobs (post-softmax scores).
template <typename T>
Gradients<T> backward(const Network<T>& net, const ForwardCache<T>& cache, const Tensor<T>& grad_scores) {
    if (!grad_scores.same_dims(cache.probs))
        throw ArgumentError("gradient shape " + grad_scores.dims_string() + " does not match the forward output");
    return backward_logits(net, cache, softmax_backward(cache.probs, grad_scores));
}

}  // namespace mcseg
