#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace synthid {

/// splitmix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) noexcept {
    return mix64(mix64(seed ^ mix64(a + 0x51ed27a3ULL)) ^ mix64(b + 0x2545f491ULL));
}

/// Seeded generator with the draws this project needs. The full state
/// (engine plus the cached normal deviate) round-trips through str().
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    double normal() { return normal_(engine_); }
    double uniform() { return uniform_(engine_); }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform_(engine_); }
    /// Uniform integer in [0, n).
    int index(int n) { return std::uniform_int_distribution<int>(0, n - 1)(engine_); }
    std::uint64_t next_u64() { return engine_(); }

    std::mt19937_64& engine() noexcept { return engine_; }

    std::string str() const {
        std::ostringstream os;
        os << engine_ << ' ' << normal_;
        return os.str();
    }
    void restore(const std::string& s) {
        std::istringstream is(s);
        is >> engine_ >> normal_;
    }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

} // namespace synthid
