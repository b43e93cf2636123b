#pragma once

// Seeded RNG wrapper with explicitly-coded distributions.
// std::uniform_int_distribution and friends are implementation-defined,
// so every draw here is spelled out to keep seeds portable across
// standard libraries.

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace p2tag {

class Rng {
public:
    Rng() : engine_(0x9e3779b97f4a7c15ull) {}
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // uniform in [0, 1) with 53 bits of mantissa
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    // uniform integer in [0, n); n must be positive
    std::int64_t uniform_int(std::int64_t n) {
        if (n <= 0) throw std::invalid_argument("Rng::uniform_int: n must be positive");
        // modulo bias is < 2^-63 * n, negligible for the small n used here
        return static_cast<std::int64_t>(engine_() % static_cast<std::uint64_t>(n));
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller; draws two uniforms per call, no caching so the
    // stream position is a pure function of the call count
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    std::string serialize() const {
        std::ostringstream os;
        os << engine_;
        return os.str();
    }

    void deserialize(const std::string& s) {
        std::istringstream is(s);
        is >> engine_;
        if (is.fail()) throw std::runtime_error("Rng::deserialize: bad state string");
    }

    // independent child stream, e.g. one per evaluation task
    Rng split(std::uint64_t stream_id) {
        std::uint64_t s = engine_() ^ (0x9e3779b97f4a7c15ull * (stream_id + 1));
        return Rng(s);
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace p2tag
