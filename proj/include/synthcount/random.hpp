#pragma once

#include <cstdint>
#include <iterator>
#include <random>
#include <utility>

namespace synthcount {

// splitmix64 finaliser; used to derive independent child seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) noexcept;

// Seeded generator with distribution code that does not depend on the
// standard library's (implementation-defined) distribution classes, so the
// same seed produces the same stream on every toolchain.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }

    // [0, 1)
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // inclusive bounds
    int uniform_int(int lo, int hi) {
        const auto span = static_cast<std::uint64_t>(static_cast<std::int64_t>(hi) - lo + 1);
        return lo + static_cast<int>(engine_() % span);
    }

    double normal();

    template <class RandomIt>
    void shuffle(RandomIt first, RandomIt last) {
        const auto n = static_cast<int>(std::distance(first, last));
        for (int i = n - 1; i > 0; --i) {
            const int j = uniform_int(0, i);
            using std::swap;
            swap(first[i], first[j]);
        }
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace synthcount
