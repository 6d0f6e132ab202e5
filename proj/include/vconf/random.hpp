#pragma once

#include <cstdint>
#include <vector>

namespace vconf {

// splitmix64: fully specified, so seeded draws are identical on every platform
// (std:: distributions are implementation-defined).
class seeded_rng {
public:
    explicit seeded_rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, n), rejection-sampled.
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do {
            x = next();
        } while (x >= limit);
        return x % n;
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    // Box-Muller; one draw per call.
    double normal();

    template <typename T>
    void shuffle(std::vector<T> & v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Independent stream derived from this seed and a label.
    static std::uint64_t derive(std::uint64_t seed, std::uint64_t label) {
        seeded_rng r(seed ^ (label * 0xd1b54a32d192ed03ull));
        return r.next();
    }

private:
    std::uint64_t state_;
};

} // namespace vconf
