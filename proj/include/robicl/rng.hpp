#pragma once

// Seeded random streams. A master seed spawns named substreams so that every
// consumer (tasks, contexts, test points, adversary, trainer) owns an
// independent sequence and results do not depend on evaluation order.

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace robicl {

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) noexcept {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ULL;
    }
    return h;
}

} // namespace detail

/// A single deterministic random stream (64-bit Mersenne Twister).
class RandomStream {
public:
    explicit RandomStream(std::uint64_t seed) : engine_(seed) {}

    double normal() { return normal_(engine_); }

    double uniform() { return uniform_(engine_); }

    std::size_t index(std::size_t n) {
        return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
    }

    std::mt19937_64& engine() noexcept { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

/// Derives substream seeds from a master seed, a stream name and an
/// optional list of integer cell coordinates.
class SeedTree {
public:
    explicit SeedTree(std::uint64_t master) : master_(master) {}

    std::uint64_t master() const noexcept { return master_; }

    std::uint64_t seed_for(std::string_view name,
                           std::initializer_list<std::uint64_t> path = {}) const {
        std::uint64_t h = detail::splitmix64(master_ ^ detail::fnv1a(name));
        for (auto p : path) {
            h = detail::splitmix64(h ^ detail::splitmix64(p + 0x632BE59BD9B4E019ULL));
        }
        return h;
    }

    RandomStream stream(std::string_view name,
                        std::initializer_list<std::uint64_t> path = {}) const {
        return RandomStream(seed_for(name, path));
    }

    /// Child tree rooted at a named cell, e.g. one grid cell of an experiment.
    SeedTree child(std::string_view name, std::initializer_list<std::uint64_t> path = {}) const {
        return SeedTree(seed_for(name, path));
    }

private:
    std::uint64_t master_;
};

} // namespace robicl
