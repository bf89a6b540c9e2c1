#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace utka {

// Error taxonomy. The CLI maps these onto process exit codes, everything
// else surfaces as a generic failure.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

struct TemplateError : Error {
    explicit TemplateError(const std::string& msg) : Error(msg) {}
};

struct TrainingFault : Error {
    explicit TrainingFault(const std::string& msg) : Error(msg) {}
};

struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

// Bad data handed to a pure function: wrong length, mismatched dims,
// degenerate content.
struct InputError : Error {
    explicit InputError(const std::string& msg) : Error(msg) {}
};

struct LengthError : InputError {
    explicit LengthError(const std::string& msg) : InputError(msg) {}
};

struct DimensionError : InputError {
    explicit DimensionError(const std::string& msg) : InputError(msg) {}
};

struct DegenerateError : InputError {
    explicit DegenerateError(const std::string& msg) : InputError(msg) {}
};

// Deterministic RNG. mt19937_64 with hand-rolled draw functions so the
// stream of values is identical across standard libraries; std::uniform_*
// distributions are not portable.
class Rng {
  public:
    explicit Rng(uint64_t seed = 0) : eng_(seed) {}

    uint64_t raw() { return eng_(); }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    }

    double range(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    int64_t index(int64_t n) {
        if (n <= 0) throw InputError("rng index bound must be positive");
        // rejection sampling keeps the draw unbiased
        uint64_t un = static_cast<uint64_t>(n);
        uint64_t lim = UINT64_MAX - UINT64_MAX % un;
        uint64_t v;
        do {
            v = eng_();
        } while (v >= lim);
        return static_cast<int64_t>(v % un);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller, one value per call (spare cached)
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform(), u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    std::string save_state() const {
        std::ostringstream os;
        os << eng_;
        os << " " << (has_spare_ ? 1 : 0);
        if (has_spare_) {
            os.precision(17);
            os << " " << std::scientific << spare_;
        }
        return os.str();
    }

    void load_state(const std::string& s) {
        std::istringstream is(s);
        is >> eng_;
        int hs = 0;
        is >> hs;
        has_spare_ = hs != 0;
        if (has_spare_) is >> spare_;
        if (is.fail()) throw IoError("malformed rng state");
    }

  private:
    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// FNV-1a 64-bit, used for content checksums and string hashing.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

// SplitMix64 finalizer over (seed, tag). Derives independent per-step seeds
// statelessly, so training resumed at step k replays the exact stream the
// uninterrupted run would have seen.
inline uint64_t mix_seed(uint64_t seed, uint64_t tag) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ull * (tag + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

}  // namespace utka
