#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path& root() {
    static const fs::path dir = [] {
        const auto d = fs::temp_directory_path() / ("mcseg_test_cli_" + std::to_string(::getpid()));
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

struct RemoveScratch : ::testing::Environment {
    void TearDown() override { fs::remove_all(root()); }
};
[[maybe_unused]] auto* const remove_scratch = ::testing::AddGlobalTestEnvironment(new RemoveScratch);

int mcseg(const std::string& args) {
    const std::string cmd = std::string(MCSEG_CLI) + " " + args + " > " + (root() / "last.log").string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::ostringstream s;
    s << f.rdbuf();
    return s.str();
}

json read_json(const fs::path& p) {
    std::ifstream f(p);
    return json::parse(f);
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

// Small shared dataset, generated once.
const fs::path& dataset() {
    static const fs::path d = [] {
        const auto out = root() / "data";
        EXPECT_EQ(mcseg("synth --n 3 --height 32 --width 24 --noise 40 --seed 3 --out " + q(out)), 0);
        return out;
    }();
    return d;
}

}  // namespace

TEST(Cli, UsageErrorsExitWithTwo) {
    EXPECT_EQ(mcseg(""), 2);
    EXPECT_EQ(mcseg("frobnicate"), 2);
    EXPECT_EQ(mcseg("synth"), 2);
    EXPECT_EQ(mcseg("synth --out " + q(root() / "x") + " --bogus 1"), 2);
    EXPECT_EQ(mcseg("baseline"), 2);
    EXPECT_EQ(mcseg("--version"), 0);
}

TEST(Cli, SynthIsDeterministicAndWritesManifests) {
    const auto a = root() / "synth_a", b = root() / "synth_b";
    ASSERT_EQ(mcseg("synth --n 2 --height 32 --width 24 --seed 5 --out " + q(a)), 0);
    ASSERT_EQ(mcseg("synth --n 2 --height 32 --width 24 --seed 5 --out " + q(b)), 0);
    for (const auto* f : {"manifest.json", "sample_000.mcv", "sample_000.labels.mcv", "sample_001.mcv"})
        EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
    const auto ds = read_json(a / "manifest.json");
    EXPECT_EQ(ds.at("format"), "mcseg-dataset");
    EXPECT_EQ(ds.at("samples").back().at("split"), "test");
    const auto run = read_json(a / "run_manifest.json");
    EXPECT_EQ(run.at("format"), "mcseg-run");
    EXPECT_EQ(run.at("subcommand"), "synth");
    EXPECT_EQ(run.at("status"), "ok");
    EXPECT_EQ(run.at("seed"), 5);
    for (const auto* key : {"argv", "cwd", "config", "tool_version", "outputs", "timings_ms"})
        EXPECT_TRUE(run.contains(key)) << key;
}

TEST(Cli, RefusesToOverwriteWithoutForce) {
    const auto out = root() / "synth_force";
    ASSERT_EQ(mcseg("synth --n 2 --height 32 --width 24 --out " + q(out)), 0);
    EXPECT_EQ(mcseg("synth --n 2 --height 32 --width 24 --out " + q(out)), 2);
    EXPECT_EQ(mcseg("synth --n 2 --height 32 --width 24 --out " + q(out) + " --force"), 0);
}

TEST(Cli, DataErrorsExitWithThree) {
    const auto bad = root() / "bad.mcv";
    std::ofstream(bad) << "not a volume";
    EXPECT_EQ(mcseg("pca --in " + q(bad) + " --out " + q(root() / "bad_out.mcv")), 3);
    const auto run = read_json(root() / "bad_out.mcv.run.json");
    EXPECT_EQ(run.at("status"), "error");
    EXPECT_EQ(run.at("error").at("category"), "data");
    EXPECT_EQ(mcseg("synth --n 2 --height 4 --width 4 --out " + q(root() / "tiny_phantom")), 3);
}

TEST(Cli, PcaEvalAndBaselines) {
    const auto& d = dataset();
    const auto reduced = root() / "reduced.mcv";
    ASSERT_EQ(mcseg("pca --in " + q(d / "sample_002.mcv") + " --out " + q(reduced) + " --k 3 --report " +
                    q(root() / "spectrum.json")),
              0);
    const auto spectrum = read_json(root() / "spectrum.json");
    EXPECT_EQ(spectrum.at("singular_values").size(), 31u);
    const auto cumulative = spectrum.at("cumulative_ratio").get<std::vector<double>>();
    EXPECT_TRUE(std::is_sorted(cumulative.begin(), cumulative.end()));
    EXPECT_NEAR(cumulative.back(), 1.0, 1e-12);

    ASSERT_EQ(mcseg("eval --gt " + q(d / "sample_002.labels.mcv") + " --pred " + q(d / "sample_002.labels.mcv") +
                    " --out " + q(root() / "self.json") + " --csv " + q(root() / "self.csv")),
              0);
    const auto self = read_json(root() / "self.json");
    EXPECT_EQ(self.at("all_classes").at("mean_iu"), 1.0);
    EXPECT_EQ(self.at("main_tissues").at("pixel_acc"), 1.0);

    ASSERT_EQ(mcseg("baseline knn --train " + q(d) + " --out " + q(root() / "knn.mcv") + " --report " +
                    q(root() / "knn.json")),
              0);
    const auto knn = read_json(root() / "knn.json");
    EXPECT_EQ(knn.at("medians").size(), 6u);
    EXPECT_TRUE(knn.contains("scan_ms"));
    ASSERT_EQ(mcseg("eval --gt " + q(d / "sample_002.labels.mcv") + " --pred " + q(root() / "knn.mcv") + " --out " +
                    q(root() / "knn_metrics.json")),
              0);

    ASSERT_EQ(mcseg("baseline fcm --in " + q(reduced) + " --out " + q(root() / "fcm.mcv") + " --clusters 4 --report " +
                    q(root() / "fcm.json")),
              0);
    EXPECT_EQ(read_json(root() / "fcm.json").at("centers").size(), 4u);
    EXPECT_EQ(mcseg("baseline fcm --in " + q(reduced) + " --out " + q(root() / "fcm2.mcv") + " --fuzzifier 1.0"), 3);
}

TEST(Cli, TrainPredictBenchRoundTrip) {
    const auto& d = dataset();
    const auto out = root() / "train";
    ASSERT_EQ(mcseg("train --data " + q(d) + " --out " + q(out) + " --iters 4 --checkpoints 2 --eval-every 2"), 0);
    EXPECT_TRUE(fs::exists(out / "ckpt_000002" / "manifest.json"));
    EXPECT_TRUE(fs::exists(out / "ckpt_000004" / "manifest.json"));
    const auto loss = slurp(out / "loss.csv");
    EXPECT_EQ(loss.substr(0, loss.find('\n')), "iteration,train_loss,test_loss");

    ASSERT_EQ(mcseg("predict --ckpt " + q(out / "ckpt_000004") + " --in " + q(d / "sample_002.mcv") + " --out " +
                    q(root() / "pred.mcv") + " --ppm " + q(root() / "pred.ppm")),
              0);
    EXPECT_EQ(slurp(root() / "pred.ppm").substr(0, 3), "P6\n");

    ASSERT_EQ(mcseg("bench --ckpt " + q(out / "ckpt_000004") + " --data " + q(d) + " --runs 2 --out " +
                    q(root() / "bench")),
              0);
    const auto bench = read_json(root() / "bench" / "bench.json");
    for (const auto* key : {"fcn_forward_ms", "knn_scan_ms", "knn_over_fcn_ratio", "param_count", "warnings"})
        EXPECT_TRUE(bench.contains(key)) << key;
    EXPECT_EQ(bench.at("fcn_forward_runs_ms").size(), 2u);
    EXPECT_EQ(mcseg("bench --data " + q(d) + " --out " + q(root() / "bench_none")), 2);
}

TEST(Cli, DivergentTrainingExitsWithFour) {
    const auto out = root() / "diverge";
    EXPECT_EQ(mcseg("train --data " + q(dataset()) + " --out " + q(out) +
                    " --strategy fully-bp --iters 20 --lr 1e30 --loss-mode sum"),
              4);
    EXPECT_EQ(read_json(out / "run_manifest.json").at("error").at("category"), "numerics");
}

TEST(Cli, ReplayReproducesOutputs) {
    const auto original = root() / "replay_src";
    ASSERT_EQ(mcseg("synth --n 2 --height 32 --width 24 --seed 8 --out " + q(original)), 0);
    const auto again = root() / "replay_dst";
    ASSERT_EQ(mcseg("replay --manifest " + q(original / "run_manifest.json") + " --out " + q(again)), 0);
    for (const auto* f : {"manifest.json", "sample_000.mcv", "sample_001.labels.mcv"})
        EXPECT_EQ(slurp(original / f), slurp(again / f)) << f;

    const auto pca_out = root() / "replay_pca.mcv";
    ASSERT_EQ(mcseg("pca --in " + q(original / "sample_000.mcv") + " --out " + q(pca_out)), 0);
    const auto pca_dir = root() / "replay_pca_dst";
    ASSERT_EQ(mcseg("replay --manifest " + q(root() / "replay_pca.mcv.run.json") + " --out " + q(pca_dir)), 0);
    EXPECT_EQ(slurp(pca_out), slurp(pca_dir / "replay_pca.mcv"));
}
