#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>

namespace diode {

// Error taxonomy. Configuration errors are caller bugs in wiring
// (shape mismatches, missing heads); usage errors are contract
// violations at call time; explosion signals carry the diagnostics
// needed by the lambda search.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ProtocolError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class GenerationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Raised when training destabilizes: non-finite loss, non-finite
// gradient, or global gradient norm above the configured bound.
class ExplosionSignal : public std::runtime_error {
public:
    ExplosionSignal(std::string where, const std::string& detail)
        : std::runtime_error("gradient explosion at '" + where + "': " + detail),
          where_(std::move(where)) {}

    const std::string& where() const { return where_; }

private:
    std::string where_;
};

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

inline uint64_t mixSeed(uint64_t a, uint64_t b) {
    uint64_t s = a ^ (0x9E3779B97F4A7C15ull + (b << 6) + (b >> 2));
    splitmix64(s);
    splitmix64(s);
    return s;
}

inline uint64_t mixSeed(uint64_t a, uint64_t b, uint64_t c) {
    return mixSeed(mixSeed(a, b), c);
}

// Deterministic PRNG. The standard distributions are
// implementation-defined, so sampling is done by hand: splitmix64
// core, 53-bit uniforms, Box-Muller normals.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed ? seed : 0x9E3779B97F4A7C15ull) {}

    uint64_t next() { return splitmix64(state_); }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [lo, hi], inclusive.
    int uniformInt(int lo, int hi) {
        if (hi <= lo) return lo;
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(next() % span);
    }

    double normal() {
        if (haveSpare_) {
            haveSpare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double radius = std::sqrt(-2.0 * std::log(u1));
        double angle = 2.0 * 3.14159265358979323846 * u2;
        spare_ = radius * std::sin(angle);
        haveSpare_ = true;
        return radius * std::cos(angle);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

private:
    uint64_t state_;
    bool haveSpare_ = false;
    double spare_ = 0.0;
};

// FNV-1a over raw little-endian bytes; used for frozen-group and
// expansion bit-identity checks.
class Fnv1a {
public:
    void bytes(const void* data, size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (size_t i = 0; i < n; ++i) {
            hash_ ^= p[i];
            hash_ *= 1099511628211ull;
        }
    }

    void f64(double v) {
        uint64_t bits;
        std::memcpy(&bits, &v, sizeof(bits));
        unsigned char le[8];
        for (int i = 0; i < 8; ++i) le[i] = static_cast<unsigned char>(bits >> (8 * i));
        bytes(le, 8);
    }

    void str(const std::string& s) { bytes(s.data(), s.size()); }

    uint64_t value() const { return hash_; }

private:
    uint64_t hash_ = 1469598103934665603ull;
};

}  // namespace diode
