#pragma once

#include <cmath>
#include <cstdint>

namespace parse {

// splitmix64 stream. Hand-rolled so checkpoints and corpora are
// bit-reproducible regardless of standard-library distribution internals.
struct Rng {
    std::uint64_t state;

    explicit Rng(std::uint64_t seed = 0) : state(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0,1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // uniform in [0,n)
    std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

    // Box-Muller, no cached spare (keeps the stream position predictable)
    double gaussian() {
        double u1 = uniform(), u2 = uniform();
        while (u1 <= 0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    // derive an independent stream for a named sub-task
    Rng fork(std::uint64_t salt) const {
        Rng r(state ^ (salt * 0xd1342543de82ef95ULL + 0x2545f4914f6cdd1dULL));
        r.next_u64();
        return r;
    }
};

}  // namespace parse
