#ifndef VQAUDIT_RNG_HPP
#define VQAUDIT_RNG_HPP

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>

namespace vqa {

inline constexpr const char* kRngName = "xoshiro256**/splitmix64";

/// SplitMix64 step; used for seeding and for deriving independent sub-seeds.
constexpr std::uint64_t splitmix64(std::uint64_t& state) noexcept
{
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Sub-seed for stream `stream` of a run seeded with `seed`.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) noexcept
{
    std::uint64_t s = seed ^ (0xd1b54a32d192ed03ULL * (stream + 1));
    splitmix64(s);
    return splitmix64(s);
}

/// xoshiro256** with portable helpers for uniform and normal draws. The std
/// distributions are implementation-defined, so they are not used anywhere
/// reproducibility matters.
class Rng {
public:
    using result_type = std::uint64_t;

    explicit Rng(std::uint64_t seed) noexcept
    {
        for (auto& s : state_) {
            s = splitmix64(seed);
        }
    }

    static constexpr result_type min() noexcept { return 0; }
    static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

    result_type operator()() noexcept
    {
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    /// Uniform in [0, 1) with 53 bits of resolution.
    double uniform() noexcept { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n); n must be positive.
    std::uint64_t below(std::uint64_t n) noexcept
    {
        const std::uint64_t limit = max() - max() % n;
        std::uint64_t x = 0;
        do {
            x = (*this)();
        } while (x >= limit);
        return x % n;
    }

    /// Standard normal via Box-Muller (one value per call).
    double normal() noexcept
    {
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    double normal(double mean, double stddev) noexcept { return mean + stddev * normal(); }

private:
    static constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept { return (x << k) | (x >> (64 - k)); }

    std::array<std::uint64_t, 4> state_{};
};

/// Fisher-Yates shuffle driven by Rng::below.
template <typename Container>
void shuffle(Container& c, Rng& rng)
{
    for (std::size_t i = c.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng.below(i));
        using std::swap;
        swap(c[i - 1], c[j]);
    }
}

} // namespace vqa

#endif
