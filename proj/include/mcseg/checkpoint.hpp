#pragma once

// Checkpoint directory layout:
//   manifest.json         {"format":"mcseg-checkpoint","version":1,"preset",...}
//   <param name>.mcv      one f32 MCV tensor per parameter (layouts OIHW, IOHW, C)

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "mcseg/errors.hpp"
#include "mcseg/mcv_io.hpp"
#include "mcseg/network.hpp"

namespace mcseg {

inline constexpr int kCheckpointVersion = 1;

struct CheckpointInfo {
    std::size_t iteration = 0;
    nlohmann::json metadata = nlohmann::json::object();  // caller-defined, e.g. preprocessing
};

namespace ckpt_detail {

inline std::string layout_for(const std::string& name, std::size_t rank) {
    if (rank == 1) return "C";
    if (name.rfind("upscore", 0) == 0) return "IOHW";
    return "OIHW";
}

}  // namespace ckpt_detail

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const Network<T>& net, const CheckpointInfo& info = {}) {
    std::filesystem::create_directories(dir);
    nlohmann::json params = nlohmann::json::array();
    for (const auto& p : net.params()) {
        const std::string file = p.name + ".mcv";
        std::vector<float> values(p.values.begin(), p.values.end());
        save_tensor(dir / file, ckpt_detail::layout_for(p.name, p.dims.size()), p.dims, values);
        params.push_back({{"name", p.name}, {"dims", p.dims}, {"file", file}, {"decay", p.decay}});
    }
    nlohmann::json manifest = {{"format", "mcseg-checkpoint"},
                               {"version", kCheckpointVersion},
                               {"preset", net.config().preset},
                               {"seed", net.config().seed},
                               {"iteration", info.iteration},
                               {"config", net.config()},
                               {"param_count", net.param_count()},
                               {"layers", net.layers()},
                               {"params", params},
                               {"metadata", info.metadata}};
    std::ofstream f(dir / "manifest.json", std::ios::trunc);
    if (!f) throw IoError("cannot write '" + (dir / "manifest.json").string() + "'");
    f << manifest.dump(2) << "\n";
}

template <typename T>
Network<T> load_checkpoint(const std::filesystem::path& dir, CheckpointInfo* info = nullptr) {
    const auto manifest_path = dir / "manifest.json";
    if (!std::filesystem::exists(manifest_path))
        throw IoError("no checkpoint manifest at '" + manifest_path.string() + "'");
    nlohmann::json manifest;
    try {
        std::ifstream f(manifest_path);
        manifest = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("'" + manifest_path.string() + "' is not valid JSON: " + e.what());
    }
    if (manifest.value("format", "") != "mcseg-checkpoint")
        throw FormatError("'" + manifest_path.string() + "' is not a checkpoint manifest");
    if (manifest.value("version", 0) != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + manifest.value("version", nlohmann::json()).dump());

    NetworkConfig cfg;
    try {
        cfg = manifest.at("config").get<NetworkConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("checkpoint config is malformed: " + std::string(e.what()));
    }
    Network<T> net = build_fcn<T>(cfg);
    const auto& entries = manifest.at("params");
    if (entries.size() != net.params().size())
        throw FormatError("checkpoint lists " + std::to_string(entries.size()) + " params, network has " +
                          std::to_string(net.params().size()));
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto name = entries[i].at("name").get<std::string>();
        if (name != net.param(i).name) throw FormatError("checkpoint param " + name + " out of order");
        const auto stored = load_tensor(dir / entries[i].at("file").get<std::string>());
        if (stored.shape != net.param(i).dims) throw FormatError("checkpoint param " + name + " has wrong shape");
        auto& p = net.mutable_param(i);
        p.values.assign(stored.values.begin(), stored.values.end());
    }
    if (info) {
        info->iteration = manifest.value("iteration", std::size_t{0});
        info->metadata = manifest.value("metadata", nlohmann::json::object());
    }
    return net;
}

}  // namespace mcseg
