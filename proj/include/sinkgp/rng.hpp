#ifndef SINKGP_RNG_HPP
#define SINKGP_RNG_HPP

#include <cmath>
#include <cstdint>
#include <random>

namespace sinkgp {

/// Seedable 64-bit generator with a fully specified draw sequence.
///
/// std::mt19937_64 is standardized bit-for-bit, but the standard
/// distributions are not, so the uniform/normal conversions are spelled
/// out here. Consumers that promise reproducibility (toy dataset,
/// subsampling, test generators) must draw through this class only.
///
/// Draw conventions:
///   - uniform():  (engine() >> 11) * 2^-53, in [0, 1)
///   - normal():   Box-Muller cosine branch; consumes exactly two
///                 uniforms per call, no caching of the sine branch
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    double normal() {
        const double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    double normal(double mean, double stddev) {
        return mean + stddev * normal();
    }

    /// Index in [0, n) drawn uniformly.
    std::size_t index(std::size_t n) {
        return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
    }

    std::uint64_t raw() { return engine_(); }

private:
    std::mt19937_64 engine_;
};

}  // namespace sinkgp

#endif  // SINKGP_RNG_HPP
