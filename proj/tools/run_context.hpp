#pragma once

// Bookkeeping shared by every mcseg subcommand: output-directory policy,
// stage timings, and the run manifest written next to the outputs.
//
// Run manifest schema (format "mcseg-run", version 1):
//   subcommand   string
//   argv         arguments after the program name, as given
//   cwd          working directory of the original invocation
//   config       every option of the subcommand with its resolved value
//   seed         master seed (null when the subcommand has none)
//   tool_version string
//   outputs      {"--flag": {"path": ..., "kind": "dir"|"file"}}
//   timings_ms   {"stage": milliseconds}   (excluded from reproducibility)
//   status       "ok" | "error"; on error also {"error": {"category", "message", "stage"}}

#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mcseg/errors.hpp"

namespace mcseg::cli {

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr const char* kRunManifestName = "run_manifest.json";

inline std::string category_name(Error::Category c) {
    switch (c) {
        case Error::Category::Usage: return "usage";
        case Error::Category::Data: return "data";
        case Error::Category::Numerics: return "numerics";
    }
    return "unknown";
}

inline int exit_code(Error::Category c) {
    switch (c) {
        case Error::Category::Usage: return 2;
        case Error::Category::Data: return 3;
        case Error::Category::Numerics: return 4;
    }
    return 3;
}

/// Thread budget: MCSEG_THREADS when set to a positive integer, else all cores.
inline unsigned thread_budget() {
    if (const char* env = std::getenv("MCSEG_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && v > 0) return static_cast<unsigned>(v);
        throw UsageError("MCSEG_THREADS must be a positive integer, got '" + std::string(env) + "'");
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force` is set.
inline void prepare_output_dir(const std::filesystem::path& dir, bool force) {
    namespace fs = std::filesystem;
    if (fs::exists(dir)) {
        if (!fs::is_directory(dir)) throw UsageError("'" + dir.string() + "' exists and is not a directory");
        if (!fs::is_empty(dir) && !force)
            throw UsageError("output directory '" + dir.string() + "' is not empty (pass --force to reuse it)");
    }
    fs::create_directories(dir);
}

/// Refuses to overwrite an existing file unless `force` is set.
inline void prepare_output_file(const std::filesystem::path& file, bool force) {
    namespace fs = std::filesystem;
    if (fs::exists(file) && !force)
        throw UsageError("'" + file.string() + "' already exists (pass --force to overwrite)");
    if (file.has_parent_path()) fs::create_directories(file.parent_path());
}

class RunContext {
public:
    RunContext(std::string subcommand, std::vector<std::string> argv)
        : subcommand_(std::move(subcommand)), argv_(std::move(argv)) {}

    /// Records every option of `app` with the value it resolved to.
    void capture_config(const CLI::App& app) {
        for (const CLI::Option* opt : app.get_options()) {
            const std::string name = opt->get_name(false, true);
            if (name.empty() || name == "--help" || name == "-h") continue;
            std::string key = opt->get_lnames().empty() ? name : opt->get_lnames().front();
            if (opt->get_expected_max() == 0) {  // flag
                config_[key] = opt->count() > 0;
                continue;
            }
            const auto& results = opt->results();
            if (!results.empty()) {
                if (opt->get_expected_max() > 1 || opt->get_items_expected_max() > 1) config_[key] = results;
                else config_[key] = results.back();
            } else {
                const std::string def = opt->get_default_str();
                config_[key] = def.empty() ? nlohmann::json(nullptr) : nlohmann::json(def);
            }
        }
    }

    void set_seed(std::uint64_t seed) { seed_ = seed; }
    void add_output(const std::string& flag, const std::filesystem::path& path, bool is_dir) {
        outputs_[flag] = {{"path", path.string()}, {"kind", is_dir ? "dir" : "file"}};
    }
    void set_manifest_path(std::filesystem::path p) { manifest_path_ = std::move(p); }
    nlohmann::json& extra() { return extra_; }

    /// Times `fn` under `stage`; the stage name is kept for error attribution.
    template <typename F>
    decltype(auto) stage(const std::string& name, F&& fn) {
        current_stage_ = name;
        const auto t0 = std::chrono::steady_clock::now();
        struct Record {
            RunContext& ctx;
            std::string name;
            std::chrono::steady_clock::time_point t0;
            ~Record() {
                ctx.timings_[name] =
                    ctx.timings_.value(name, 0.0) +
                    std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
            }
        } record{*this, name, t0};
        return fn();
    }

    void write(const std::optional<std::pair<Error::Category, std::string>>& failure = std::nullopt) const {
        if (manifest_path_.empty()) return;
        nlohmann::json m = {{"format", "mcseg-run"},
                            {"version", 1},
                            {"subcommand", subcommand_},
                            {"argv", argv_},
                            {"cwd", std::filesystem::current_path().string()},
                            {"config", config_},
                            {"seed", seed_ ? nlohmann::json(*seed_) : nlohmann::json(nullptr)},
                            {"tool_version", kToolVersion},
                            {"outputs", outputs_},
                            {"timings_ms", timings_},
                            {"status", failure ? "error" : "ok"}};
        if (!extra_.empty()) m["details"] = extra_;
        if (failure)
            m["error"] = {{"category", category_name(failure->first)},
                          {"message", failure->second},
                          {"stage", current_stage_}};
        std::error_code ec;
        if (manifest_path_.has_parent_path()) std::filesystem::create_directories(manifest_path_.parent_path(), ec);
        std::ofstream f(manifest_path_, std::ios::trunc);
        if (f) f << m.dump(2) << "\n";
    }

private:
    std::string subcommand_;
    std::vector<std::string> argv_;
    nlohmann::json config_ = nlohmann::json::object();
    nlohmann::json outputs_ = nlohmann::json::object();
    nlohmann::json timings_ = nlohmann::json::object();
    nlohmann::json extra_ = nlohmann::json::object();
    std::optional<std::uint64_t> seed_;
    std::filesystem::path manifest_path_;
    std::string current_stage_ = "setup";
};

}  // namespace mcseg::cli
