#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>

#include "mcseg/mcv_io.hpp"
#include "mcseg/phantom.hpp"
#include "mcseg/relabel.hpp"
#include "mcseg/rng.hpp"

namespace fs = std::filesystem;
using namespace mcseg;

namespace {

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / "mcseg_tests";
    fs::create_directories(dir);
    return dir / name;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::string& bytes) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::string mcv_bytes(const std::string& header, const std::string& payload) {
    std::string out("MCVOL\0\0\1", 8);
    const auto n = static_cast<std::uint32_t>(header.size());
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((n >> (8 * i)) & 0xFF));
    return out + header + payload;
}

// Brute force: a pixel becomes IGNORE when any pixel within Chebyshev
// distance `band` holds a different non-IGNORE label.
LabelMap band_oracle(const LabelMap& m, std::size_t band) {
    std::vector<std::uint8_t> out(m.labels().begin(), m.labels().end());
    const auto b = static_cast<long>(band);
    for (long y = 0; y < static_cast<long>(m.height()); ++y)
        for (long x = 0; x < static_cast<long>(m.width()); ++x) {
            const auto self = m.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
            if (self == m.ignore_label()) continue;
            bool boundary = false;
            for (long yy = 0; yy < static_cast<long>(m.height()); ++yy)
                for (long xx = 0; xx < static_cast<long>(m.width()); ++xx) {
                    if (std::max(std::abs(yy - y), std::abs(xx - x)) > b) continue;
                    const auto other = m.at(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
                    if (other != m.ignore_label() && other != self) boundary = true;
                }
            if (boundary) out[static_cast<std::size_t>(y) * m.width() + static_cast<std::size_t>(x)] = m.ignore_label();
        }
    return LabelMap(m.height(), m.width(), std::move(out), m.n_classes(), m.ignore_label());
}

}  // namespace

TEST(Volume, RejectsBadLabels) {
    EXPECT_THROW(LabelMap(1, 2, std::vector<std::uint8_t>{0, 7}), ArgumentError);
    EXPECT_NO_THROW(LabelMap(1, 2, std::vector<std::uint8_t>{5, kIgnoreLabel}));
    EXPECT_THROW(MultiChannelVolume(2, 2, 2, std::vector<float>(7)), ArgumentError);
}

TEST(McvFormat, SingleVoxelRoundTrip) {
    const auto p = scratch("one.mcv");
    MultiChannelVolume v(1, 1, 1, std::vector<float>{42.0f});
    save_volume(p, v);
    EXPECT_EQ(load_volume(p), v);
}

TEST(McvFormat, HeaderAndPayloadAreBitExact) {
    const auto p = scratch("layout.mcv");
    MultiChannelVolume v(2, 1, 1, std::vector<float>{1.0f, -2.5f});
    save_volume(p, v);
    const std::string header = R"({"dtype":"f32","layout":"CHW","shape":[2,1,1]})";
    std::string payload;
    for (float f : {1.0f, -2.5f}) {
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        for (int i = 0; i < 4; ++i) payload.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
    }
    EXPECT_EQ(slurp(p), mcv_bytes(header, payload));
}

TEST(McvFormat, PaperSizedPayload) {
    const auto p = scratch("big.mcv");
    MultiChannelVolume v(31, 256, 154);
    save_volume(p, v);
    const std::string bytes = slurp(p);
    std::uint32_t len = 0;
    for (int i = 0; i < 4; ++i) len |= std::uint32_t(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
    EXPECT_EQ(bytes.size() - 12 - len, std::size_t{31} * 256 * 154 * 4);
}

TEST(McvFormat, RandomRoundTripProperty) {
    SplitMix64 rng(11);
    for (int trial = 0; trial < 25; ++trial) {
        const std::size_t c = 1 + rng.index(5), h = 1 + rng.index(9), w = 1 + rng.index(9);
        MultiChannelVolume v(c, h, w);
        for (auto& x : v.data()) {
            // Random bit patterns, re-drawn until finite, cover subnormals and signs.
            float f;
            do {
                const auto bits = static_cast<std::uint32_t>(rng.next());
                std::memcpy(&f, &bits, 4);
            } while (!std::isfinite(f));
            x = f;
        }
        const auto p = scratch("prop.mcv");
        save_volume(p, v);
        const auto back = load_volume(p);
        ASSERT_EQ(std::memcmp(back.data().data(), v.data().data(), v.size() * 4), 0);
        ASSERT_EQ(back.channels(), c);
    }
}

TEST(McvFormat, RejectsNaNBeforeWriting) {
    const auto p = scratch("nan.mcv");
    fs::remove(p);
    MultiChannelVolume v(1, 1, 2, std::vector<float>{1.0f, 2.0f});
    v.data()[1] = std::numeric_limits<float>::quiet_NaN();
    EXPECT_THROW(save_volume(p, v), ArgumentError);
    EXPECT_FALSE(fs::exists(p));
}

TEST(McvFormat, TruncatedPayloadIsDistinctFromFormatError) {
    const auto p = scratch("short.mcv");
    spit(p, mcv_bytes(R"({"dtype":"f32","layout":"CHW","shape":[2,2,2]})", std::string(7 * 4, '\0')));
    EXPECT_THROW(load_volume(p), TruncationError);
}

TEST(McvFormat, UnknownDtypeAndBadMagic) {
    const auto p = scratch("dtype.mcv");
    spit(p, mcv_bytes(R"({"dtype":"f64","layout":"CHW","shape":[1,1,1]})", std::string(8, '\0')));
    EXPECT_THROW(load_volume(p), FormatError);
    spit(p, "NOTMCV..........");
    EXPECT_THROW(load_volume(p), FormatError);
    spit(p, mcv_bytes("{not json", ""));
    EXPECT_THROW(load_volume(p), FormatError);
    EXPECT_THROW(load_volume(scratch("does_not_exist.mcv")), IoError);
}

TEST(McvFormat, LabelRoundTripAndHeader) {
    const auto p = scratch("labels.mcv");
    LabelMap m(2, 3, std::vector<std::uint8_t>{0, 1, 2, 3, 4, kIgnoreLabel});
    save_labels(p, m);
    EXPECT_EQ(load_labels(p), m);
    EXPECT_NE(slurp(p).find(R"({"dtype":"u8","layout":"HW","shape":[2,3]})"), std::string::npos);
}

TEST(McvFormat, TensorRoundTrip) {
    const auto p = scratch("tensor.mcv");
    std::vector<float> vals(2 * 3 * 2 * 2);
    for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = static_cast<float>(i) * 0.5f;
    save_tensor(p, "OIHW", {2, 3, 2, 2}, vals);
    const auto t = load_tensor(p);
    EXPECT_EQ(t.layout, "OIHW");
    EXPECT_EQ(t.shape, (std::vector<std::size_t>{2, 3, 2, 2}));
    EXPECT_EQ(t.values, vals);
}

TEST(ImageExport, PgmAndPpmEncoding) {
    LabelMap m(1, 3, std::vector<std::uint8_t>{0, 2, kIgnoreLabel});
    const auto pgm = scratch("m.pgm"), ppm = scratch("m.ppm");
    export_pgm(pgm, m);
    export_ppm(ppm, m);
    const std::string pixels{'\0', char(80), char(240)};
    EXPECT_EQ(slurp(pgm), std::string("P5\n3 1\n255\n") + pixels);
    const std::string body = slurp(ppm).substr(std::string("P6\n3 1\n255\n").size());
    ASSERT_EQ(body.size(), 9u);
    EXPECT_EQ(static_cast<unsigned char>(body[3]), 217);  // class 2 red channel
    EXPECT_EQ(static_cast<unsigned char>(body[6]), 255);  // ignore is white
}

// ---------------------------------------------------------------- phantom

TEST(Phantom, DeterministicForFixedSpec) {
    PhantomSpec s;
    s.height = 64;
    s.width = 40;
    s.noise_sigma = 5.0;
    s.seed = 99;
    const auto a = generate_phantom(s), b = generate_phantom(s);
    EXPECT_EQ(a.first, b.first);
    EXPECT_EQ(a.second, b.second);
    s.seed = 100;
    EXPECT_FALSE(generate_phantom(s).first == a.first);
}

TEST(Phantom, ShapeContract) {
    PhantomSpec s;
    s.height = 64;
    s.width = 40;
    const auto [v, l] = generate_phantom(s);
    EXPECT_EQ(v.channels(), 31u);
    EXPECT_EQ(v.height(), 64u);
    EXPECT_EQ(v.width(), 40u);
    EXPECT_EQ(l.height(), 64u);
    EXPECT_EQ(l.width(), 40u);
}

TEST(Phantom, NoiselessClosedForm) {
    PhantomSpec s;
    s.height = 48;
    s.width = 32;
    const auto [v, l] = generate_phantom(s);
    for (std::size_t y = 0; y < s.height; y += 5)
        for (std::size_t x = 0; x < s.width; x += 3)
            for (std::size_t t = 0; t < v.channels(); ++t) {
                const auto& tp = s.tissues[l.at(y, x)];
                const float expected = static_cast<float>(tp.amplitude * std::exp(-s.echo_times[t] / tp.t2_ms));
                ASSERT_EQ(v.at(t, y, x), expected);
            }
}

TEST(Phantom, EchoTimesExcludeFirstEcho) {
    const auto te = echo_times_ms();
    ASSERT_EQ(te.size(), 31u);
    EXPECT_DOUBLE_EQ(te.front(), 16.0);
    EXPECT_DOUBLE_EQ(te.back(), 256.0);
}

TEST(Phantom, ProfilesStrictlyDecreaseAndEveryClassPresent) {
    PhantomSpec s;
    s.height = 64;
    s.width = 40;
    const auto [v, l] = generate_phantom(s);
    std::vector<bool> seen(6, false);
    for (std::size_t p = 0; p < l.labels().size(); ++p) {
        seen[l.labels()[p]] = true;
        for (std::size_t t = 1; t < v.channels(); ++t)
            ASSERT_LT(v.channel(t)[p], v.channel(t - 1)[p]);
    }
    for (bool b : seen) EXPECT_TRUE(b);
}

TEST(Phantom, ZeroAreaClassIsConfigError) {
    PhantomSpec s;
    s.height = 4;
    s.width = 4;
    EXPECT_THROW(generate_phantom(s), ConfigError);
    s = PhantomSpec{};
    s.tissues[2].t2_ms = 0.0;
    EXPECT_THROW(generate_phantom(s), ConfigError);
}

// ---------------------------------------------------------------- ignore band

TEST(IgnoreBoundary, WidthZeroAndUniformMapAreUnchanged) {
    SplitMix64 rng(3);
    std::vector<std::uint8_t> l(36);
    for (auto& v : l) v = static_cast<std::uint8_t>(rng.index(6));
    LabelMap m(6, 6, l);
    EXPECT_EQ(ignore_boundary(m, 0), m);
    LabelMap u(5, 5, std::uint8_t{3});
    EXPECT_EQ(ignore_boundary(u, 2), u);
}

TEST(IgnoreBoundary, HalvesBecomeCenterBand) {
    std::vector<std::uint8_t> l(16);
    for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 4; ++x) l[y * 4 + x] = x < 2 ? 0 : 1;
    const auto out = ignore_boundary(LabelMap(4, 4, l), 1);
    for (std::size_t y = 0; y < 4; ++y) {
        EXPECT_EQ(out.at(y, 0), 0);
        EXPECT_TRUE(out.is_ignored(y * 4 + 1));
        EXPECT_TRUE(out.is_ignored(y * 4 + 2));
        EXPECT_EQ(out.at(y, 3), 1);
    }
}

TEST(IgnoreBoundary, MatchesBruteForceIdempotentAndMonotone) {
    SplitMix64 rng(21);
    for (int trial = 0; trial < 40; ++trial) {
        const std::size_t h = 2 + rng.index(10), w = 2 + rng.index(10), band = rng.index(3);
        std::vector<std::uint8_t> l(h * w);
        // Blocky maps so that interiors exist.
        const std::size_t block = 1 + rng.index(4);
        std::vector<std::uint8_t> cells((h / block + 1) * (w / block + 1));
        for (auto& c : cells) c = rng.uniform() < 0.1 ? kIgnoreLabel : static_cast<std::uint8_t>(rng.index(4));
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) l[y * w + x] = cells[(y / block) * (w / block + 1) + x / block];
        const LabelMap m(h, w, l);
        const auto once = ignore_boundary(m, band);
        ASSERT_EQ(once, band_oracle(m, band));
        ASSERT_EQ(ignore_boundary(once, band), once);
        for (std::size_t p = 0; p < l.size(); ++p) {
            if (m.is_ignored(p)) {
                ASSERT_TRUE(once.is_ignored(p));
            }
            if (!once.is_ignored(p)) {
                ASSERT_EQ(once.labels()[p], m.labels()[p]);
            }
        }
    }
}
