#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <utility>

namespace mcseg {

/// SplitMix64 (Steele, Lea, Flood 2014). Every random quantity in the library
/// is derived from this generator so outputs are reproducible across
/// platforms and implementations:
///
///   state += 0x9E3779B97F4A7C15
///   z = state
///   z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
///   z = (z ^ (z >> 27)) * 0x94D049BB133111EB
///   return z ^ (z >> 31)
///
/// uniform()  = ((next() >> 11) + 0.5) * 2^-53, strictly inside (0, 1)
/// normal()   = sqrt(-2 ln u1) * cos(2 pi u2), two fresh uniforms per call
/// index(n)   = high 64 bits of next() * n
class SplitMix64 {
public:
    explicit constexpr SplitMix64(std::uint64_t seed) noexcept : state_(seed) {}

    constexpr std::uint64_t next() noexcept {
        state_ += 0x9E3779B97F4A7C15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    double uniform() noexcept {
        return (static_cast<double>(next() >> 11) + 0.5) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    double normal() noexcept {
        const double u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    std::uint64_t index(std::uint64_t n) noexcept {
        return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next()) * n) >> 64);
    }

    /// Fisher-Yates, from the back.
    template <typename T>
    void shuffle(std::span<T> items) noexcept {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(index(i));
            std::swap(items[i - 1], items[j]);
        }
    }

    std::uint64_t state() const noexcept { return state_; }

private:
    std::uint64_t state_;
};

/// Derive an independent child seed for stream `stream` of a master seed.
constexpr std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) noexcept {
    SplitMix64 g(master ^ (0xD1B54A32D192ED03ULL * (stream + 1)));
    return g.next();
}

}  // namespace mcseg
