#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace mednvc {

// splitmix64 step, used to derive independent stream seeds from
// (run seed, epoch, sample index, purpose) tuples.
inline std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0,
                                 std::uint64_t c = 0) {
    return mix_seed(mix_seed(mix_seed(base ^ 0x6d656432u) + a) + mix_seed(b + 0x7275756eULL) + c);
}

// mt19937 wrapper with hand-rolled draws. The standard distribution objects
// are implementation-defined, so every transform here is spelled out to keep
// streams identical run to run.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(static_cast<std::uint32_t>(mix_seed(seed))) {}

    std::uint32_t next_u32() { return gen_(); }

    // uniform in [0, 1) with 32-bit resolution
    double uniform() { return static_cast<double>(next_u32()) * (1.0 / 4294967296.0); }

    double uniform_range(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    bool bernoulli(double p) { return uniform() < p; }

    // unbiased integer in [0, n) via rejection
    std::uint32_t below(std::uint32_t n) {
        if (n <= 1) return 0;
        const std::uint32_t limit = UINT32_MAX - UINT32_MAX % n;
        std::uint32_t v;
        do {
            v = next_u32();
        } while (v >= limit);
        return v % n;
    }

    // Box-Muller, one value per call (the spare is cached)
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1;
        do {
            u1 = uniform();
        } while (u1 <= 1e-12);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // normal clipped to +-2 sigma by resampling
    double trunc_normal(double stddev) {
        double v;
        do {
            v = normal();
        } while (v < -2.0 || v > 2.0);
        return v * stddev;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = below(static_cast<std::uint32_t>(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937 gen_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace mednvc
