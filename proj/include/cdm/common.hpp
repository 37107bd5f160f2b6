#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace cdm {

// Error taxonomy. Every throwing path in the library uses one of these so
// callers (CLI, tests) can map failures to exit codes and JSON diagnostics.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
    using Error::Error;
};
struct FormatError : Error {
    using Error::Error;
};
struct ArgumentError : Error {
    using Error::Error;
};
struct DataError : Error {
    using Error::Error;
};
struct StateError : Error {
    using Error::Error;
};
struct EmptyInputError : Error {
    using Error::Error;
};
struct DegenerateGraphError : Error {
    using Error::Error;
};
struct UnsupportedError : Error {
    using Error::Error;
};

// Deterministic RNG used everywhere. splitmix64 seeding + xoshiro256**
// keeps results independent of the standard library's distribution
// implementations, so runs are bit-reproducible across toolchains.
class Rng {
  public:
    explicit Rng(uint64_t seed) {
        uint64_t x = seed;
        for (auto& word : state_) {
            x += 0x9e3779b97f4a7c15ULL;
            uint64_t z = x;
            z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
            z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
            word = z ^ (z >> 31);
        }
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Integer in [0, n).
    uint64_t below(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

    // Standard normal via Box-Muller.
    double normal() {
        double u1 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[below(i)]);
        }
    }

  private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    uint64_t state_[4] = {};
};

// Stable seed derivation: every stage/mixture/step stream hashes the root
// seed with a tag so independent units of work never share a stream.
inline uint64_t derive_seed(uint64_t root, const std::string& tag) {
    uint64_t h = root ^ 0x9e3779b97f4a7c15ULL;
    for (unsigned char c : tag) {
        h ^= c;
        h *= 0x100000001b3ULL;
        h ^= h >> 29;
    }
    return h;
}

inline uint64_t derive_seed(uint64_t root, const std::string& tag, uint64_t index) {
    return derive_seed(root ^ (0x51a7bea3u + index * 0x9e3779b97f4a7c15ULL), tag);
}

// Dense row-major matrix. Carrier for frames and embeddings; the autodiff
// engine has its own Tensor and converts at the boundary.
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> v;

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), v(static_cast<size_t>(r) * c, 0.0) {}

    double& at(int r, int c) { return v[static_cast<size_t>(r) * cols + c]; }
    double at(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }
    const double* row(int r) const { return v.data() + static_cast<size_t>(r) * cols; }
    double* row(int r) { return v.data() + static_cast<size_t>(r) * cols; }
};

inline bool all_finite(const std::vector<double>& xs) {
    for (double x : xs) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

}  // namespace cdm
