#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace pd {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad call-site arguments (g > n, empty set, ...).
struct InvalidArgument : Error {
    using Error::Error;
};

// Tensor shape disagreement.
struct ShapeError : Error {
    using Error::Error;
};

// Non-finite value produced by a forward op; aborts the step.
struct NumericError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

// Malformed file contents; carries the byte offset of the failure.
struct ParseError : Error {
    ParseError(const std::string& msg, std::uint64_t byte_offset)
        : Error(msg + " (byte offset " + std::to_string(byte_offset) + ")"),
          offset(byte_offset) {}
    std::uint64_t offset;
};

struct IncompatibleError : Error {
    using Error::Error;
};

struct MissingInputError : Error {
    using Error::Error;
};

inline void set_threads(int n) {
#ifdef _OPENMP
    if (n > 0) omp_set_num_threads(n);
#else
    (void)n;
#endif
}

inline int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

// splitmix64; stable across platforms, unlike std::mt19937 + distributions.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
    std::uint64_t s = a;
    return splitmix64(s) ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
}

inline std::uint64_t fnv1a64(const void* data, std::size_t len,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s) {
    return fnv1a64(s.data(), s.size());
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() { return splitmix64(state_); }

    // uniform in [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // index in [0, n)
    std::size_t index(std::size_t n) { return std::size_t(next_u64() % n); }

    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) *
               std::cos(6.283185307179586476925286766559 * u2);
    }

    // normal(0, sigma) resampled until |z| < 2*sigma
    double truncated_normal(double sigma) {
        double z = normal();
        while (std::fabs(z) >= 2.0) z = normal();
        return z * sigma;
    }

    // first m entries of a seeded permutation of [0, n)
    std::vector<int> sample_without_replacement(int n, int m) {
        std::vector<int> idx(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) idx[std::size_t(i)] = i;
        for (int i = 0; i < m; ++i) {
            int j = i + int(index(std::size_t(n - i)));
            std::swap(idx[std::size_t(i)], idx[std::size_t(j)]);
        }
        idx.resize(std::size_t(m));
        return idx;
    }

    void shuffle(std::vector<std::size_t>& v) {
        for (std::size_t i = v.size(); i > 1; --i)
            std::swap(v[i - 1], v[index(i)]);
    }

private:
    std::uint64_t state_;
};

template <typename T>
using Vec3 = std::array<T, 3>;

template <typename T>
using Cloud = std::vector<Vec3<T>>;

template <typename T>
inline T sqdist(const Vec3<T>& a, const Vec3<T>& b) {
    T dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
    return dx * dx + dy * dy + dz * dz;
}

}  // namespace pd
