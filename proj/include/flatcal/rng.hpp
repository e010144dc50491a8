#pragma once

#include <cstdint>
#include <stdexcept>

#include "flatcal/linalg.hpp"

namespace flatcal {

// Counter-based deterministic RNG. Each draw hashes (seed, counter), so the
// stream depends only on the seed and the number of draws made, never on
// global state. substream(k) derives an independent stream for shard k;
// parallel shards replay identically regardless of scheduling.
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed) {}

    uint64_t next_u64() {
        uint64_t z = seed_ + 0x9e3779b97f4a7c15ULL * (++counter_);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // standard normal via Marsaglia's polar method (sqrt/log only, keeps
    // streams reproducible across libm versions in practice)
    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double m = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * m;
        have_spare_ = true;
        return u * m;
    }

    Vec gaussian_vec(int n) {
        Vec out(static_cast<size_t>(n));
        for (double& x : out) x = gaussian();
        return out;
    }

    Mat gaussian_mat(int rows, int cols, double scale = 1.0) {
        Mat out(rows, cols);
        for (double& x : out.a) x = scale * gaussian();
        return out;
    }

    // integer in [0, n)
    int below(int n) {
        if (n <= 0) throw std::invalid_argument("Rng::below: n must be positive");
        return static_cast<int>(next_u64() % static_cast<uint64_t>(n));
    }

    Rng substream(uint64_t index) const {
        uint64_t z = seed_ ^ (0xd1342543de82ef95ULL * (index + 1));
        z = (z ^ (z >> 32)) * 0xff51afd7ed558ccdULL;
        z = (z ^ (z >> 29)) * 0xc4ceb9fe1a85ec53ULL;
        return Rng(z ^ (z >> 32));
    }

    uint64_t seed() const { return seed_; }

private:
    uint64_t seed_;
    uint64_t counter_ = 0;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Uniform sample from the unit sphere S^{d-1}: Gaussian then normalize.
inline Vec sphere_uniform(Rng& rng, int d) {
    if (d < 2) throw std::invalid_argument("sphere_uniform: d must be >= 2");
    Vec v = rng.gaussian_vec(d);
    double n = norm2(v);
    while (n == 0.0) {  // astronomically unlikely; redraw
        v = rng.gaussian_vec(d);
        n = norm2(v);
    }
    for (double& x : v) x /= n;
    return v;
}

}  // namespace flatcal
