// mcseg: command-line front end for the multi-channel segmentation pipeline.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mcseg/baselines.hpp"
#include "mcseg/checkpoint.hpp"
#include "mcseg/dataset.hpp"
#include "mcseg/mcv_io.hpp"
#include "mcseg/metrics.hpp"
#include "mcseg/network.hpp"
#include "mcseg/phantom.hpp"
#include "mcseg/preprocess.hpp"
#include "mcseg/relabel.hpp"
#include "mcseg/trainer.hpp"
#include "run_context.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mcseg;
using cli::RunContext;

namespace {

// ---------------------------------------------------------------- helpers

void write_json(const fs::path& path, const json& j) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write '" + path.string() + "'");
    f << j.dump(2) << "\n";
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write '" + path.string() + "'");
    f << text;
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

std::string iter_tag(std::size_t it) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%06zu", it);
    return buf;
}

double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double elapsed_ms(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

json metrics_json(const ConfusionMatrix& cm) {
    return {{"all_classes", to_json(compute_metrics(cm), cm)},
            {"main_tissues", to_json(main_tissue_metrics(cm), cm)}};
}

std::string loss_csv(const std::vector<LossReport>& history) {
    std::string out = "iteration,train_loss,test_loss\n";
    for (const auto& r : history)
        out += std::to_string(r.iteration) + "," + fmt(r.train_loss) + "," + fmt(r.test_loss) + "\n";
    return out;
}

Preprocessing preprocessing_from(std::size_t k, bool center, std::uint64_t seed) {
    Preprocessing p;
    p.k = k;
    p.center = center;
    p.seed = derive_seed(seed, 2);
    return p;
}

struct PreparedSample {
    std::string name;
    MultiChannelVolume reduced;
    LabelMap raw_labels;
    PcaModel pca;
};

std::vector<PreparedSample> prepare(const std::vector<Sample31>& samples, const Preprocessing& pre) {
    std::vector<PreparedSample> out;
    for (const auto& s : samples) {
        auto pp = preprocess(s.volume, pre);
        out.push_back({s.entry.name, std::move(pp.volume), s.labels, std::move(pp.model)});
    }
    return out;
}

json spectrum_json(const PcaModel& m) {
    json j = {{"singular_values", m.singular_values}, {"k", m.k()}, {"iterations", m.iterations}};
    if (m.singular_values.size() == m.channel_count && m.channel_count > 0) {
        std::vector<double> cumulative;
        for (std::size_t n = 1; n <= m.channel_count; ++n) cumulative.push_back(explained_ratio(m, n));
        j["cumulative_ratio"] = cumulative;
    }
    return j;
}

MedianModel medians_from(const std::vector<PreparedSample>& train, std::size_t n_classes) {
    std::vector<LabeledPixel> px;
    for (const auto& s : train) append_labeled_pixels(s.reduced, s.raw_labels, px);
    return fit_medians(px, n_classes);
}

json medians_json(const MedianModel& m) { return m.medians; }

/// Maps each fuzzy cluster to the class whose median it is most similar to.
LabelMap fcm_to_classes(const FuzzyState& state, const MultiChannelVolume& v, const MedianModel& medians) {
    std::vector<std::uint8_t> cluster_class(state.centers.size(), 0);
    for (std::size_t j = 0; j < state.centers.size(); ++j) {
        try {
            cluster_class[j] = static_cast<std::uint8_t>(knn_classify(state.centers[j], medians));
        } catch (const ArgumentError&) {
            cluster_class[j] = 0;  // a zero center has no direction
        }
    }
    const auto assign = state.assignments();
    std::vector<std::uint8_t> labels(assign.size());
    for (std::size_t i = 0; i < assign.size(); ++i) labels[i] = cluster_class[assign[i]];
    return LabelMap(v.height(), v.width(), std::move(labels), static_cast<std::uint8_t>(medians.n_classes()),
                    std::max<std::uint8_t>(kIgnoreLabel, static_cast<std::uint8_t>(medians.n_classes())));
}

std::vector<std::vector<double>> pixel_vectors(const MultiChannelVolume& v) {
    std::vector<std::vector<double>> x(v.pixels(), std::vector<double>(v.channels()));
    for (std::size_t c = 0; c < v.channels(); ++c) {
        const auto ch = v.channel(c);
        for (std::size_t p = 0; p < ch.size(); ++p) x[p][c] = ch[p];
    }
    return x;
}

std::vector<std::size_t> default_checkpoints(std::size_t iterations) {
    // Table-style checkpoints at 1/5, 1/2 and the full run.
    std::vector<std::size_t> c = {iterations / 5, iterations / 2, iterations};
    c.erase(std::remove(c.begin(), c.end(), std::size_t{0}), c.end());
    c.erase(std::unique(c.begin(), c.end()), c.end());
    return c;
}

// ---------------------------------------------------------------- options

struct TrainFlags {
    std::string preset = "tiny";
    std::size_t iterations = 1000;
    double lr = 1e-2;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    std::string loss_mode = "mean";
    std::size_t eval_every = 50;
    std::vector<std::size_t> checkpoints;
    std::size_t band = 1;
    std::size_t pca_k = 3;
    bool center = false;
    bool paper_mode = false;
    std::uint64_t seed = 0;

    void add_to(CLI::App* app) {
        app->add_option("--preset", preset, "Network preset: tiny, small or paper")
            ->check(CLI::IsMember({"tiny", "small", "paper"}))
            ->capture_default_str();
        app->add_option("--iters", iterations, "Training iterations")->capture_default_str();
        app->add_option("--lr", lr, "Learning rate")->capture_default_str();
        app->add_option("--momentum", momentum, "SGD momentum")->capture_default_str();
        app->add_option("--wd", weight_decay, "Weight decay on conv and deconv weights")->capture_default_str();
        app->add_option("--loss-mode", loss_mode, "Loss normalization: mean or sum")
            ->check(CLI::IsMember({"mean", "sum"}))
            ->capture_default_str();
        app->add_option("--eval-every", eval_every, "Iterations between loss reports")->capture_default_str();
        app->add_option("--checkpoints", checkpoints,
                        "Iterations to checkpoint and evaluate (default: 1/5, 1/2 and all of --iters)")
            ->delimiter(',');
        app->add_option("--band", band, "Ignore band width in pixels for ignore-bound labels")->capture_default_str();
        app->add_option("--pca-k", pca_k, "PCA components kept per sample (0 = raw channels)")->capture_default_str();
        app->add_flag("--center", center, "Subtract the channel mean before PCA");
        app->add_flag("--paper-mode", paper_mode,
                      "Use the published optimizer settings: sum loss, lr 1e-14, momentum 0.99, wd 5e-4");
        app->add_option("--seed", seed, "Master seed")->capture_default_str();
    }

    TrainConfig config(Strategy s) const {
        TrainConfig c = paper_mode ? TrainConfig::paper_mode(s, iterations) : TrainConfig{};
        if (!paper_mode) {
            c.strategy = s;
            c.learning_rate = lr;
            c.momentum = momentum;
            c.weight_decay = weight_decay;
            c.loss_mode = parse_loss_mode(loss_mode);
            c.iterations = iterations;
        }
        c.eval_every = eval_every;
        c.seed = derive_seed(seed, 3);
        c.checkpoints = checkpoints.empty() ? default_checkpoints(iterations) : checkpoints;
        for (auto it : c.checkpoints)
            if (it == 0 || it > iterations)
                throw UsageError("checkpoint " + std::to_string(it) + " lies outside 1.." + std::to_string(iterations));
        c.validate();
        return c;
    }
};

std::vector<Sample<float>> to_train_samples(const std::vector<PreparedSample>& prepared, Strategy s,
                                            std::size_t band) {
    std::vector<Sample<float>> out;
    for (const auto& p : prepared)
        out.push_back({to_tensor<float>(p.reduced),
                       s == Strategy::IgnoreBound ? ignore_boundary(p.raw_labels, band) : p.raw_labels});
    return out;
}

json checkpoint_metadata(const Preprocessing& pre, const TrainConfig& tc, std::size_t band) {
    return {{"preprocessing", pre},
            {"strategy", to_string(tc.strategy)},
            {"band", band},
            {"learning_rate", tc.learning_rate},
            {"momentum", tc.momentum},
            {"weight_decay", tc.weight_decay},
            {"loss_mode", to_string(tc.loss_mode)}};
}

struct StrategyRun {
    Strategy strategy;
    TrainResult<float> result;
    std::vector<std::pair<std::size_t, Network<float>>> snapshots;
};

/// Trains one strategy arm, writing checkpoints and the loss curve under `dir`.
StrategyRun train_arm(RunContext& ctx, const fs::path& dir, const std::vector<PreparedSample>& train_set,
                      const PreparedSample& test, const TrainFlags& flags, Strategy s, const Preprocessing& pre,
                      bool keep_snapshots) {
    fs::create_directories(dir);
    const TrainConfig tc = flags.config(s);
    NetworkConfig nc = NetworkConfig::from_preset(flags.preset, test.reduced.channels(), derive_seed(flags.seed, 4));
    nc.n_classes = test.raw_labels.n_classes();
    auto net = build_fcn<float>(nc);

    const auto samples = to_train_samples(train_set, s, flags.band);
    const Sample<float> test_sample{to_tensor<float>(test.reduced),
                                    s == Strategy::IgnoreBound ? ignore_boundary(test.raw_labels, flags.band)
                                                               : test.raw_labels};
    StrategyRun run{s, {}, {}};
    const json meta = checkpoint_metadata(pre, tc, flags.band);
    auto hook = [&](std::size_t it, const Network<float>& n) {
        save_checkpoint(dir / ("ckpt_" + iter_tag(it)), n, {it, meta});
        if (keep_snapshots) run.snapshots.emplace_back(it, n);
    };
    run.result = ctx.stage("train_" + to_string(s), [&] {
        return train<float>(samples, test_sample, std::move(net), tc, hook);
    });
    write_text(dir / "loss.csv", loss_csv(run.result.history));
    if (run.result.failure) {
        ctx.extra()["training_failure"][to_string(s)] = *run.result.failure;
        throw NumericsError(*run.result.failure + " (" + to_string(s) + ")", run.result.completed_iterations + 1);
    }
    return run;
}

// ---------------------------------------------------------------- subcommands

struct SynthCmd {
    std::size_t n = 6;
    std::uint64_t seed = 0;
    std::size_t height = 128;
    std::size_t width = 77;
    double noise = 250.0;
    int classes = 6;
    std::string out;
    bool force = false;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("synth", "Generate a seeded phantom dataset (last sample is the test split)");
        c->add_option("--n", n, "Number of phantoms")->capture_default_str();
        c->add_option("--seed", seed, "Master seed")->capture_default_str();
        c->add_option("--height", height, "Phantom height")->capture_default_str();
        c->add_option("--width", width, "Phantom width")->capture_default_str();
        c->add_option("--noise", noise, "Additive Gaussian noise sigma")->capture_default_str();
        c->add_option("--classes", classes, "Number of tissue classes (1..6)")->capture_default_str();
        c->add_option("--out", out, "Output dataset directory")->required();
        c->add_flag("--force", force, "Reuse a non-empty output directory");
    }

    void run(RunContext& ctx) {
        ctx.set_seed(seed);
        cli::prepare_output_dir(out, force);
        ctx.set_manifest_path(fs::path(out) / cli::kRunManifestName);
        ctx.add_output("--out", out, true);
        PhantomSpec spec;
        spec.n_classes = static_cast<std::uint8_t>(std::clamp(classes, 0, 255));
        spec.tissues.resize(std::min<std::size_t>(spec.n_classes, spec.tissues.size()));
        spec.height = height;
        spec.width = width;
        spec.noise_sigma = noise;
        spec.seed = seed;
        ctx.stage("generate", [&] { write_phantom_dataset(out, spec, n); });
    }
};

struct PcaCmd {
    std::string in, out, report;
    std::size_t k = 3;
    bool center = false;
    bool force = false;
    std::uint64_t seed = 0;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("pca", "Reduce a volume to k principal channels normalized to [0, 255]");
        c->add_option("--in", in, "Input volume (.mcv)")->required()->check(CLI::ExistingFile);
        c->add_option("--out", out, "Reduced output volume (.mcv)")->required();
        c->add_option("--k", k, "Components to keep")->capture_default_str();
        c->add_option("--report", report, "Write the singular-value spectrum as JSON");
        c->add_flag("--center", center, "Subtract the channel mean first");
        c->add_option("--seed", seed, "Power-iteration start-vector seed")->capture_default_str();
        c->add_flag("--force", force, "Overwrite existing outputs");
    }

    void run(RunContext& ctx) {
        ctx.set_seed(seed);
        cli::prepare_output_file(out, force);
        if (!report.empty()) cli::prepare_output_file(report, force);
        ctx.set_manifest_path(out + ".run.json");
        ctx.add_output("--out", out, false);
        if (!report.empty()) ctx.add_output("--report", report, false);
        const auto v = load_volume(in);
        if (k == 0 || k > v.channels()) throw UsageError("--k must lie in 1.." + std::to_string(v.channels()));
        Preprocessing pre;
        pre.k = k;
        pre.center = center;
        pre.seed = seed;
        auto pp = ctx.stage("pca", [&] { return preprocess(v, pre); });
        save_volume(out, pp.volume);
        if (!report.empty()) write_json(report, spectrum_json(pp.model));
    }
};

struct TrainCmd {
    std::string data, out, test, test_labels;
    std::string strategy = "ignore-bound";
    bool force = false;
    TrainFlags flags;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("train", "Train an FCN on a dataset directory");
        c->add_option("--data", data, "Dataset directory written by synth")->required()->check(CLI::ExistingDirectory);
        c->add_option("--test", test, "Test volume overriding the dataset's test split");
        c->add_option("--test-labels", test_labels, "Labels for --test");
        c->add_option("--strategy", strategy, "fully-bp or ignore-bound")
            ->check(CLI::IsMember({"fully-bp", "ignore-bound"}))
            ->capture_default_str();
        c->add_option("--out", out, "Output directory (checkpoints and loss.csv)")->required();
        c->add_flag("--force", force, "Reuse a non-empty output directory");
        flags.add_to(c);
    }

    void run(RunContext& ctx) {
        ctx.set_seed(flags.seed);
        if (test.empty() != test_labels.empty()) throw UsageError("--test and --test-labels go together");
        cli::prepare_output_dir(out, force);
        ctx.set_manifest_path(fs::path(out) / cli::kRunManifestName);
        ctx.add_output("--out", out, true);

        auto samples = ctx.stage("load", [&] { return load_dataset(data); });
        if (!test.empty()) {
            for (auto& s : samples)
                if (s.entry.split == "test") {
                    s.volume = load_volume(test);
                    s.labels = load_labels(test_labels);
                }
        }
        const auto pre = preprocessing_from(flags.pca_k, flags.center, flags.seed);
        auto prepared = ctx.stage("pca", [&] { return prepare(samples, pre); });
        std::vector<PreparedSample> train_set;
        std::optional<PreparedSample> test_set;
        for (std::size_t i = 0; i < prepared.size(); ++i)
            (samples[i].entry.split == "test" ? (void)(test_set = prepared[i]) : train_set.push_back(prepared[i]));
        train_arm(ctx, out, train_set, *test_set, flags, parse_strategy(strategy), pre, false);
    }
};

struct PredictCmd {
    std::string ckpt, in, out, ppm, pgm;
    bool force = false;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("predict", "Segment a volume with a trained checkpoint");
        c->add_option("--ckpt", ckpt, "Checkpoint directory")->required();
        c->add_option("--in", in, "Input volume (.mcv); raw channels are reduced as during training")
            ->required()
            ->check(CLI::ExistingFile);
        c->add_option("--out", out, "Predicted label map (.mcv)")->required();
        c->add_option("--ppm", ppm, "Also write a color PPM");
        c->add_option("--pgm", pgm, "Also write a grayscale PGM");
        c->add_flag("--force", force, "Overwrite existing outputs");
    }

    void run(RunContext& ctx) {
        cli::prepare_output_file(out, force);
        ctx.set_manifest_path(out + ".run.json");
        ctx.add_output("--out", out, false);
        if (!ppm.empty()) ctx.add_output("--ppm", ppm, false);
        if (!pgm.empty()) ctx.add_output("--pgm", pgm, false);
        CheckpointInfo info;
        const auto net = ctx.stage("load", [&] { return load_checkpoint<float>(ckpt, &info); });
        ctx.set_seed(net.config().seed);
        auto v = load_volume(in);
        if (info.metadata.contains("preprocessing") && v.channels() != net.config().input_channels) {
            const auto pre = info.metadata.at("preprocessing").get<Preprocessing>();
            v = ctx.stage("pca", [&] { return preprocess(v, pre).volume; });
        }
        const auto labels = ctx.stage("forward", [&] { return predict(net, to_tensor<float>(v)); });
        save_labels(out, labels);
        if (!ppm.empty()) export_ppm(ppm, labels);
        if (!pgm.empty()) export_pgm(pgm, labels);
    }
};

struct EvalCmd {
    std::string gt, pred, out, csv;
    int classes = 6;
    bool force = false;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("eval", "Score a prediction against ground truth");
        c->add_option("--gt", gt, "Ground-truth label map (.mcv)")->required()->check(CLI::ExistingFile);
        c->add_option("--pred", pred, "Predicted label map (.mcv)")->required()->check(CLI::ExistingFile);
        c->add_option("--out", out, "Metrics JSON")->required();
        c->add_option("--csv", csv, "Confusion matrix CSV (gt rows, prediction columns)");
        c->add_option("--classes", classes, "Class count")->capture_default_str();
        c->add_flag("--force", force, "Overwrite existing outputs");
    }

    void run(RunContext& ctx) {
        cli::prepare_output_file(out, force);
        ctx.set_manifest_path(out + ".run.json");
        ctx.add_output("--out", out, false);
        if (!csv.empty()) ctx.add_output("--csv", csv, false);
        const auto n = static_cast<std::uint8_t>(std::clamp(classes, 1, 255));
        const auto g = load_labels(gt, n);
        const auto p = load_labels(pred, n);
        const auto cm = confusion(g, p, n);
        write_json(out, metrics_json(cm));
        if (!csv.empty()) write_text(csv, cm.to_csv());
    }
};

struct KnnCmd {
    std::string train_dir, test, out, report;
    std::size_t pca_k = 3;
    bool literal = false;
    bool force = false;
    std::uint64_t seed = 0;

    void add(CLI::App* parent) {
        auto* c = parent->add_subcommand("knn", "Median-vector cosine classifier");
        c->add_option("--train", train_dir, "Dataset directory")->required()->check(CLI::ExistingDirectory);
        c->add_option("--test", test, "Volume to segment (default: the dataset's test sample)");
        c->add_option("--out", out, "Predicted label map (.mcv)")->required();
        c->add_option("--report", report, "Report JSON (medians, zero-vector count, scan time)");
        c->add_option("--pca-k", pca_k, "PCA components per sample")->capture_default_str();
        c->add_flag("--paper-literal", literal, "Pick the least similar median, as the printed formula reads");
        c->add_option("--seed", seed, "Seed for the PCA start vectors")->capture_default_str();
        c->add_flag("--force", force, "Overwrite existing outputs");
    }

    void run(RunContext& ctx) {
        ctx.set_seed(seed);
        cli::prepare_output_file(out, force);
        ctx.set_manifest_path(out + ".run.json");
        ctx.add_output("--out", out, false);
        if (!report.empty()) ctx.add_output("--report", report, false);
        auto samples = load_dataset(train_dir);
        const auto pre = preprocessing_from(pca_k, false, seed);
        std::vector<Sample31> train_raw;
        std::optional<MultiChannelVolume> target;
        for (auto& s : samples) {
            if (s.entry.split == "test") target = s.volume;
            else train_raw.push_back(std::move(s));
        }
        if (!test.empty()) target = load_volume(test);
        const auto prepared = ctx.stage("pca", [&] { return prepare(train_raw, pre); });
        const auto medians = medians_from(prepared, train_raw.front().labels.n_classes());
        const auto reduced = preprocess(*target, pre).volume;
        const auto t0 = std::chrono::steady_clock::now();
        const auto scan = ctx.stage("scan", [&] {
            return knn_segment(reduced, medians, literal ? KnnRule::Literal : KnnRule::MostSimilar, cli::thread_budget());
        });
        const double scan_ms = elapsed_ms(t0);
        save_labels(out, scan.labels);
        if (!report.empty())
            write_json(report, {{"rule", literal ? "literal-argmin" : "argmax"},
                                {"medians", medians_json(medians)},
                                {"zero_vector_pixels", scan.zero_vector_pixels},
                                {"scan_ms", scan_ms}});
    }
};

struct FcmCmd {
    std::string in, out, report;
    std::size_t clusters = 6;
    double fuzzifier = 2.0;
    double tol = 1e-6;
    std::size_t max_iter = 300;
    std::size_t pca_k = 3;
    std::uint64_t seed = 0;
    bool force = false;

    void add(CLI::App* parent) {
        auto* c = parent->add_subcommand("fcm", "Fuzzy c-means clustering of pixel vectors");
        c->add_option("--in", in, "Input volume (.mcv)")->required()->check(CLI::ExistingFile);
        c->add_option("--out", out, "Cluster map (.mcv, label = cluster index)")->required();
        c->add_option("--report", report, "Report JSON (centers, objective trace)");
        c->add_option("--clusters", clusters, "Cluster count")->capture_default_str();
        c->add_option("--fuzzifier", fuzzifier, "Fuzzifier h > 1")->capture_default_str();
        c->add_option("--tol", tol, "Stop when no center moves farther than this")->capture_default_str();
        c->add_option("--max-iter", max_iter, "Iteration cap")->capture_default_str();
        c->add_option("--pca-k", pca_k, "Reduce to k channels first (0 = use the volume as is)")->capture_default_str();
        c->add_option("--seed", seed, "Seed for the initial centers")->capture_default_str();
        c->add_flag("--force", force, "Overwrite existing outputs");
    }

    void run(RunContext& ctx) {
        ctx.set_seed(seed);
        cli::prepare_output_file(out, force);
        ctx.set_manifest_path(out + ".run.json");
        ctx.add_output("--out", out, false);
        if (!report.empty()) ctx.add_output("--report", report, false);
        if (clusters == 0 || clusters > 255) throw UsageError("--clusters must lie in 1..255");
        auto v = load_volume(in);
        if (pca_k > 0) v = ctx.stage("pca", [&] { return preprocess(v, preprocessing_from(pca_k, false, seed)).volume; });
        const auto state = ctx.stage("fcm", [&] {
            return fuzzy_cmeans(pixel_vectors(v), {clusters, fuzzifier, tol, max_iter, derive_seed(seed, 5)});
        });
        const auto assign = state.assignments();
        std::vector<std::uint8_t> labels(assign.begin(), assign.end());
        const auto n = static_cast<std::uint8_t>(clusters);
        save_labels(out, LabelMap(v.height(), v.width(), std::move(labels), n, std::max(n, kIgnoreLabel)));
        if (!report.empty())
            write_json(report, {{"centers", state.centers},
                                {"iterations", state.iterations},
                                {"converged", state.converged},
                                {"objective", state.objective}});
    }
};

struct PipelineCmd {
    std::string data, out;
    std::string strategy = "both";
    bool force = false;
    TrainFlags flags;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("pipeline", "PCA, training, prediction, baselines and evaluation in one run");
        c->add_option("--data", data, "Dataset directory written by synth")->required()->check(CLI::ExistingDirectory);
        c->add_option("--out", out, "Output directory")->required();
        c->add_option("--strategy", strategy, "both, fully-bp or ignore-bound")
            ->check(CLI::IsMember({"both", "fully-bp", "ignore-bound"}))
            ->capture_default_str();
        c->add_flag("--force", force, "Reuse a non-empty output directory");
        flags.add_to(c);
    }

    void run(RunContext& ctx) {
        ctx.set_seed(flags.seed);
        cli::prepare_output_dir(out, force);
        const fs::path root(out);
        ctx.set_manifest_path(root / cli::kRunManifestName);
        ctx.add_output("--out", out, true);

        const auto samples = ctx.stage("load", [&] { return load_dataset(data); });
        const auto pre = preprocessing_from(flags.pca_k, flags.center, flags.seed);
        const auto prepared = ctx.stage("pca", [&] { return prepare(samples, pre); });
        std::vector<PreparedSample> train_set;
        const PreparedSample* test = nullptr;
        json spectra = json::object();
        for (std::size_t i = 0; i < prepared.size(); ++i) {
            spectra[prepared[i].name] = spectrum_json(prepared[i].pca);
            if (samples[i].entry.split == "test") test = &prepared[i];
            else train_set.push_back(prepared[i]);
        }
        write_json(root / "pca_spectra.json", spectra);
        const LabelMap& gt = test->raw_labels;
        const std::size_t n_classes = gt.n_classes();
        export_ppm(root / "ground_truth.ppm", gt);

        json table = json::array();
        std::string csv =
            "method,iteration,all_mean_iu,all_fw_iu,all_pixel_acc,all_mean_acc,"
            "main_mean_iu,main_fw_iu,main_pixel_acc,main_mean_acc\n";
        auto add_row = [&](const std::string& method, std::optional<std::size_t> it, const ConfusionMatrix& cm,
                           const fs::path& metrics_path) {
            const json m = metrics_json(cm);
            write_json(metrics_path, m);
            json row = {{"method", method}, {"iteration", it ? json(*it) : json(nullptr)}};
            csv += method + "," + (it ? std::to_string(*it) : std::string()) ;
            for (const char* variant : {"all_classes", "main_tissues"}) {
                for (const char* key : {"mean_iu", "fw_iu", "pixel_acc", "mean_acc"}) {
                    const auto& v = m.at(variant).at(key);
                    row[std::string(variant == std::string("all_classes") ? "all_" : "main_") + key] = v;
                    csv += "," + (v.is_null() ? std::string() : fmt(v.get<double>()));
                }
            }
            csv += "\n";
            table.push_back(row);
        };

        std::vector<Strategy> arms;
        if (strategy == "both" || strategy == "fully-bp") arms.push_back(Strategy::FullyBP);
        if (strategy == "both" || strategy == "ignore-bound") arms.push_back(Strategy::IgnoreBound);
        for (Strategy s : arms) {
            const fs::path dir = root / to_string(s);
            auto run = train_arm(ctx, dir, train_set, *test, flags, s, pre, true);
            for (const auto& [it, net] : run.snapshots) {
                const auto pred = ctx.stage("predict", [&] { return predict(net, to_tensor<float>(test->reduced)); });
                save_labels(dir / ("pred_" + iter_tag(it) + ".mcv"), pred);
                export_ppm(dir / ("pred_" + iter_tag(it) + ".ppm"), pred);
                add_row(to_string(s), it, confusion(gt, pred, n_classes), dir / ("metrics_" + iter_tag(it) + ".json"));
            }
        }

        const fs::path bdir = root / "baselines";
        fs::create_directories(bdir);
        const auto medians = medians_from(train_set, n_classes);
        const auto t0 = std::chrono::steady_clock::now();
        const auto knn = ctx.stage("knn_scan", [&] { return knn_segment(test->reduced, medians, KnnRule::MostSimilar, cli::thread_budget()); });
        ctx.extra()["knn_scan_ms"] = elapsed_ms(t0);
        save_labels(bdir / "knn.mcv", knn.labels);
        export_ppm(bdir / "knn.ppm", knn.labels);
        write_json(bdir / "knn_report.json",
                   {{"rule", "argmax"}, {"medians", medians_json(medians)}, {"zero_vector_pixels", knn.zero_vector_pixels}});
        add_row("knn-median", std::nullopt, confusion(gt, knn.labels, n_classes), bdir / "knn_metrics.json");

        const auto state = ctx.stage("fcm", [&] {
            return fuzzy_cmeans(pixel_vectors(test->reduced), {n_classes, 2.0, 1e-6, 300, derive_seed(flags.seed, 5)});
        });
        const auto fcm_labels = fcm_to_classes(state, test->reduced, medians);
        save_labels(bdir / "fcm.mcv", fcm_labels);
        export_ppm(bdir / "fcm.ppm", fcm_labels);
        write_json(bdir / "fcm_report.json", {{"centers", state.centers},
                                             {"iterations", state.iterations},
                                             {"converged", state.converged},
                                             {"objective", state.objective}});
        add_row("fcm", std::nullopt, confusion(gt, fcm_labels, n_classes), bdir / "fcm_metrics.json");

        const LabelMap zeros(gt.height(), gt.width(), std::uint8_t{0}, gt.n_classes(), gt.ignore_label());
        add_row("class0", std::nullopt, confusion(gt, zeros, n_classes), bdir / "class0_metrics.json");

        write_json(root / "comparison.json", table);
        write_text(root / "comparison.csv", csv);
    }
};

struct BenchCmd {
    std::string ckpt, data, out, preset;
    std::size_t runs = 10;
    std::uint64_t seed = 0;
    bool force = false;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("bench", "Time FCN forward passes against a KNN scan");
        c->add_option("--ckpt", ckpt, "Checkpoint directory to time");
        c->add_option("--preset", preset, "Time a freshly initialized preset instead of a checkpoint")
            ->check(CLI::IsMember({"tiny", "small", "paper"}));
        c->add_option("--data", data, "Dataset directory (test sample is the input, train split fits medians)")
            ->required()
            ->check(CLI::ExistingDirectory);
        c->add_option("--runs", runs, "Timed repetitions per method")->capture_default_str();
        c->add_option("--seed", seed, "Seed for PCA and fresh networks")->capture_default_str();
        c->add_option("--out", out, "Output directory for bench.json")->required();
        c->add_flag("--force", force, "Reuse a non-empty output directory");
    }

    void run(RunContext& ctx) {
        ctx.set_seed(seed);
        if (ckpt.empty() == preset.empty()) throw UsageError("pass exactly one of --ckpt or --preset");
        if (runs == 0) throw UsageError("--runs must be positive");
        cli::prepare_output_dir(out, force);
        ctx.set_manifest_path(fs::path(out) / cli::kRunManifestName);
        ctx.add_output("--out", out, true);

        std::optional<Network<float>> net;
        Preprocessing pre = preprocessing_from(3, false, seed);
        if (!ckpt.empty()) {
            if (!fs::exists(fs::path(ckpt) / "manifest.json"))
                throw IoError("checkpoint '" + ckpt + "' is missing (no manifest.json)");
            CheckpointInfo info;
            net = load_checkpoint<float>(ckpt, &info);
            if (info.metadata.contains("preprocessing")) pre = info.metadata.at("preprocessing").get<Preprocessing>();
        }
        const auto samples = load_dataset(data);
        std::vector<Sample31> train_raw;
        std::optional<MultiChannelVolume> target;
        for (const auto& s : samples)
            (s.entry.split == "test" ? (void)(target = s.volume) : train_raw.push_back(s));
        const auto prepared = prepare(train_raw, pre);
        const auto medians = medians_from(prepared, train_raw.front().labels.n_classes());
        const auto input = preprocess(*target, pre).volume;
        if (!net) {
            auto nc = NetworkConfig::from_preset(preset, input.channels(), derive_seed(seed, 4));
            nc.n_classes = medians.n_classes();
            net = build_fcn<float>(nc);
        }
        const auto tensor = to_tensor<float>(input);

        std::vector<double> fcn_ms, knn_ms;
        const unsigned threads = cli::thread_budget();
        ctx.stage("bench", [&] {
            (void)infer(*net, tensor);  // warm-up
            for (std::size_t r = 0; r < runs; ++r) {
                auto t0 = std::chrono::steady_clock::now();
                (void)infer(*net, tensor);
                fcn_ms.push_back(elapsed_ms(t0));
                t0 = std::chrono::steady_clock::now();
                (void)knn_segment(input, medians, KnnRule::MostSimilar, threads);
                knn_ms.push_back(elapsed_ms(t0));
            }
        });
        const double f = median(fcn_ms), k = median(knn_ms);
        json warnings = json::array();
        if (net->config().preset == "paper" && !(f < k))
            warnings.push_back("FCN forward (" + fmt(f) + " ms) is not faster than the KNN scan (" + fmt(k) +
                               " ms) at the paper preset; informational only");
        const json report = {{"fcn_forward_ms", f},
                             {"knn_scan_ms", k},
                             {"fcn_forward_runs_ms", fcn_ms},
                             {"knn_scan_runs_ms", knn_ms},
                             {"knn_over_fcn_ratio", f > 0.0 ? k / f : 0.0},
                             {"runs", runs},
                             {"preset", net->config().preset},
                             {"param_count", net->param_count()},
                             {"input_shape", {input.channels(), input.height(), input.width()}},
                             {"threads", threads},
                             {"warnings", warnings}};
        write_json(fs::path(out) / "bench.json", report);
        for (const auto& w : warnings) std::cerr << "warning: " << w.get<std::string>() << "\n";
        std::cout << "fcn_forward_ms " << fmt(f) << "  knn_scan_ms " << fmt(k) << "\n";
    }
};

int run_cli(const std::vector<std::string>& args);

struct ReplayCmd {
    std::string manifest, out;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("replay", "Re-run a recorded invocation from its run manifest");
        c->add_option("--manifest", manifest, "Run manifest JSON")->required()->check(CLI::ExistingFile);
        c->add_option("--out", out, "Write outputs under this directory instead of the recorded paths");
    }

    int run() const {
        json m;
        try {
            std::ifstream f(manifest);
            m = json::parse(f);
        } catch (const json::exception& e) {
            throw FormatError("'" + manifest + "' is not valid JSON: " + e.what());
        }
        if (m.value("format", "") != "mcseg-run") throw FormatError("'" + manifest + "' is not a run manifest");
        auto args = m.at("argv").get<std::vector<std::string>>();
        const fs::path cwd = m.at("cwd").get<std::string>();
        if (!out.empty()) {
            const fs::path target = fs::absolute(out);
            fs::create_directories(target);
            for (auto& [flag, desc] : m.at("outputs").items()) {
                const fs::path original = desc.at("path").get<std::string>();
                const fs::path remapped = desc.at("kind") == "dir" ? target : target / original.filename();
                for (std::size_t i = 0; i < args.size(); ++i) {
                    if (args[i] == flag && i + 1 < args.size())
                        args[i + 1] = remapped.string();
                    else if (args[i].rfind(flag + "=", 0) == 0)
                        args[i] = flag + "=" + remapped.string();
                }
            }
        }
        if (std::find(args.begin(), args.end(), "--force") == args.end()) args.push_back("--force");
        const fs::path here = fs::current_path();
        fs::current_path(cwd);
        const int code = run_cli(args);
        fs::current_path(here);
        return code;
    }
};

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"mcseg: multi-channel image segmentation with PCA, an FCN and classical baselines"};
    app.require_subcommand(1);
    app.set_version_flag("--version", cli::kToolVersion);

    SynthCmd synth;
    PcaCmd pca;
    TrainCmd train_cmd;
    PredictCmd predict_cmd;
    EvalCmd eval;
    KnnCmd knn;
    FcmCmd fcm;
    PipelineCmd pipeline;
    BenchCmd bench;
    ReplayCmd replay;
    synth.add(app);
    pca.add(app);
    train_cmd.add(app);
    predict_cmd.add(app);
    eval.add(app);
    auto* baseline = app.add_subcommand("baseline", "Classical comparison methods");
    baseline->require_subcommand(1);
    knn.add(baseline);
    fcm.add(baseline);
    pipeline.add(app);
    bench.add(app);
    replay.add(app);

    std::vector<const char*> argv{"mcseg"};
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    CLI::App* sub = app.get_subcommands().front();
    if (sub->get_name() == "replay") {
        try {
            return replay.run();
        } catch (const Error& e) {
            std::cerr << "mcseg replay: " << e.what() << "\n";
            return cli::exit_code(e.category());
        }
    }
    CLI::App* leaf = sub->get_name() == "baseline" ? sub->get_subcommands().front() : sub;
    const std::string name = sub == leaf ? sub->get_name() : "baseline " + leaf->get_name();

    RunContext ctx(name, args);
    ctx.capture_config(*leaf);
    try {
        if (leaf->get_name() == "synth") synth.run(ctx);
        else if (leaf->get_name() == "pca") pca.run(ctx);
        else if (leaf->get_name() == "train") train_cmd.run(ctx);
        else if (leaf->get_name() == "predict") predict_cmd.run(ctx);
        else if (leaf->get_name() == "eval") eval.run(ctx);
        else if (leaf->get_name() == "knn") knn.run(ctx);
        else if (leaf->get_name() == "fcm") fcm.run(ctx);
        else if (leaf->get_name() == "pipeline") pipeline.run(ctx);
        else if (leaf->get_name() == "bench") bench.run(ctx);
        ctx.write();
        return 0;
    } catch (const Error& e) {
        ctx.write(std::make_pair(e.category(), std::string(e.what())));
        std::cerr << "mcseg " << name << ": " << e.what() << "\n";
        return cli::exit_code(e.category());
    } catch (const fs::filesystem_error& e) {
        ctx.write(std::make_pair(Error::Category::Data, std::string(e.what())));
        std::cerr << "mcseg " << name << ": " << e.what() << "\n";
        return 3;
    } catch (const nlohmann::json::exception& e) {
        ctx.write(std::make_pair(Error::Category::Data, std::string(e.what())));
        std::cerr << "mcseg " << name << ": malformed JSON input: " << e.what() << "\n";
        return 3;
    }
}

}  // namespace

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return run_cli(args);
}
