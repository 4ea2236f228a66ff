#pragma once

// Counter-based random streams. Every stochastic site draws from a stream
// derived from (seed, name), so two runs that share a seed see identical
// randomness at every site regardless of call order elsewhere.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string_view>
#include <utility>

namespace uplm {

namespace detail {

constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace detail

class Rng {
public:
    using result_type = std::uint64_t;

    Rng() = default;
    explicit Rng(std::uint64_t key) : key_{key} {}

    static Rng stream(std::uint64_t seed, std::string_view name) {
        return Rng{detail::mix64(detail::mix64(seed) ^ detail::fnv1a(name))};
    }

    [[nodiscard]] Rng split(std::string_view name) const {
        return Rng{detail::mix64(key_ ^ detail::fnv1a(name))};
    }
    [[nodiscard]] Rng split(std::uint64_t index) const {
        return Rng{detail::mix64(key_ + detail::mix64(index + 0x632be59bd9b4e019ULL))};
    }

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return ~result_type{0}; }

    result_type operator()() noexcept {
        return detail::mix64(key_ + (counter_++) * 0x9e3779b97f4a7c15ULL);
    }

    // [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    // Box-Muller; consumes two draws per call so that the stream position
    // depends only on the number of calls.
    double normal() noexcept {
        double u1 = uniform();
        const double u2 = uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    double normal(double mean, double stddev) noexcept { return mean + stddev * normal(); }

    // Uniform integer in [0, n), unbiased.
    std::uint64_t below(std::uint64_t n) noexcept {
        if (n <= 1) return 0;
        const std::uint64_t limit = max() - (max() % n);
        std::uint64_t x;
        do {
            x = (*this)();
        } while (x >= limit);
        return x % n;
    }

    bool bernoulli(double p) noexcept { return uniform() < p; }

    template <class T>
    void shuffle(std::span<T> values) noexcept {
        for (std::size_t i = values.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(below(i));
            std::swap(values[i - 1], values[j]);
        }
    }

    [[nodiscard]] std::uint64_t key() const noexcept { return key_; }
    [[nodiscard]] std::uint64_t position() const noexcept { return counter_; }

private:
    std::uint64_t key_{0};
    std::uint64_t counter_{0};
};

}  // namespace uplm
