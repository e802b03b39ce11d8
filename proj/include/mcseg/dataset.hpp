#pragma once

// Dataset directory written by `mcseg synth`:
//   manifest.json            {"format":"mcseg-dataset","version":1,"phantom":{...},"samples":[...]}
//   sample_000.mcv           31-channel volume
//   sample_000.labels.mcv    raw (unbanded) label map
// Each sample entry records name, volume, labels, seed and split ("train"/"test").

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mcseg/errors.hpp"
#include "mcseg/mcv_io.hpp"
#include "mcseg/phantom.hpp"

namespace mcseg {

inline constexpr int kDatasetVersion = 1;

struct SampleEntry {
    std::string name;
    std::string volume_file;
    std::string labels_file;
    std::uint64_t seed = 0;
    std::string split = "train";
};

struct Sample31 {
    SampleEntry entry;
    MultiChannelVolume volume;
    LabelMap labels;
};

inline void to_json(nlohmann::json& j, const TissueParams& t) { j = {{"amplitude", t.amplitude}, {"t2_ms", t.t2_ms}}; }
inline void from_json(const nlohmann::json& j, TissueParams& t) {
    j.at("amplitude").get_to(t.amplitude);
    j.at("t2_ms").get_to(t.t2_ms);
}

inline void to_json(nlohmann::json& j, const PhantomSpec& s) {
    j = {{"n_classes", s.n_classes}, {"height", s.height},      {"width", s.width},
         {"echo_times_ms", s.echo_times}, {"tissues", s.tissues}, {"noise_sigma", s.noise_sigma},
         {"seed", s.seed}};
}
inline void from_json(const nlohmann::json& j, PhantomSpec& s) {
    j.at("n_classes").get_to(s.n_classes);
    j.at("height").get_to(s.height);
    j.at("width").get_to(s.width);
    j.at("echo_times_ms").get_to(s.echo_times);
    j.at("tissues").get_to(s.tissues);
    j.at("noise_sigma").get_to(s.noise_sigma);
    j.at("seed").get_to(s.seed);
}

inline void to_json(nlohmann::json& j, const SampleEntry& e) {
    j = {{"name", e.name}, {"volume", e.volume_file}, {"labels", e.labels_file}, {"seed", e.seed}, {"split", e.split}};
}
inline void from_json(const nlohmann::json& j, SampleEntry& e) {
    j.at("name").get_to(e.name);
    j.at("volume").get_to(e.volume_file);
    j.at("labels").get_to(e.labels_file);
    e.seed = j.value("seed", std::uint64_t{0});
    e.split = j.value("split", std::string("train"));
}

/// Generates `n` phantoms whose seeds derive from `base.seed`; the last one is the test split.
inline std::vector<SampleEntry> write_phantom_dataset(const std::filesystem::path& dir, const PhantomSpec& base,
                                                      std::size_t n) {
    if (n < 2) throw ArgumentError("a dataset needs at least one training and one test sample");
    std::filesystem::create_directories(dir);
    std::vector<SampleEntry> entries;
    for (std::size_t i = 0; i < n; ++i) {
        PhantomSpec spec = base;
        spec.seed = derive_seed(base.seed, 100 + i);
        char name[32];
        std::snprintf(name, sizeof name, "sample_%03zu", i);
        SampleEntry e{name, std::string(name) + ".mcv", std::string(name) + ".labels.mcv", spec.seed,
                      i + 1 == n ? "test" : "train"};
        const auto [volume, labels] = generate_phantom(spec);
        save_volume(dir / e.volume_file, volume);
        save_labels(dir / e.labels_file, labels);
        entries.push_back(std::move(e));
    }
    const nlohmann::json manifest = {{"format", "mcseg-dataset"},
                                     {"version", kDatasetVersion},
                                     {"phantom", base},
                                     {"samples", entries}};
    std::ofstream f(dir / "manifest.json", std::ios::trunc);
    if (!f) throw IoError("cannot write '" + (dir / "manifest.json").string() + "'");
    f << manifest.dump(2) << "\n";
    return entries;
}

inline std::vector<SampleEntry> read_dataset_manifest(const std::filesystem::path& dir) {
    const auto path = dir / "manifest.json";
    if (!std::filesystem::exists(path)) throw IoError("no dataset manifest at '" + path.string() + "'");
    try {
        std::ifstream f(path);
        const auto j = nlohmann::json::parse(f);
        if (j.value("format", "") != "mcseg-dataset") throw FormatError("'" + path.string() + "' is not a dataset manifest");
        return j.at("samples").get<std::vector<SampleEntry>>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("'" + path.string() + "' is malformed: " + e.what());
    }
}

inline std::vector<Sample31> load_dataset(const std::filesystem::path& dir) {
    std::vector<Sample31> out;
    for (auto& e : read_dataset_manifest(dir)) {
        auto volume = load_volume(dir / e.volume_file);
        auto labels = load_labels(dir / e.labels_file);
        if (volume.height() != labels.height() || volume.width() != labels.width())
            throw FormatError("sample '" + e.name + "' volume and labels differ in size");
        out.push_back({std::move(e), std::move(volume), std::move(labels)});
    }
    std::size_t tests = 0;
    for (const auto& s : out) tests += s.entry.split == "test";
    if (tests != 1) throw FormatError("dataset must hold exactly one test sample, found " + std::to_string(tests));
    if (out.size() < 2) throw FormatError("dataset has no training samples");
    return out;
}

}  // namespace mcseg
