#ifndef SINKGP_COMMON_HPP
#define SINKGP_COMMON_HPP

#include <Eigen/Core>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace sinkgp {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

inline constexpr int kFormatVersion = 1;

// Input that violates a documented precondition or file contract.
struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed external data; carries a 1-based row number when known.
struct ParseError : ValidationError {
    ParseError(const std::string& msg, long row)
        : ValidationError(msg + " (row " + std::to_string(row) + ")"), row_number(row) {}
    long row_number;
};

// Loss of numerical validity (NaN, failed factorization, diverging Newton).
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// An iterative routine ran out of its budget; only fatal under strict policies.
struct NonConvergenceError : std::runtime_error {
    explicit NonConvergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

// FNV-1a over raw bytes; used for content tokens, not security.
inline std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t seed = 1469598103934665603ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::uint64_t hash_matrix(const Matrix& m, std::uint64_t seed = 1469598103934665603ULL) {
    const Index r = m.rows(), c = m.cols();
    std::uint64_t h = fnv1a(&r, sizeof(r), seed);
    h = fnv1a(&c, sizeof(c), h);
    for (Index j = 0; j < c; ++j)
        for (Index i = 0; i < r; ++i) {
            const double v = m(i, j);
            h = fnv1a(&v, sizeof(v), h);
        }
    return h;
}

inline std::uint64_t hash_vector(const Vector& v, std::uint64_t seed = 1469598103934665603ULL) {
    const Index n = v.size();
    std::uint64_t h = fnv1a(&n, sizeof(n), seed);
    for (Index i = 0; i < n; ++i) {
        const double x = v(i);
        h = fnv1a(&x, sizeof(x), h);
    }
    return h;
}

inline std::string hash_token(std::uint64_t h) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[h & 0xF];
        h >>= 4;
    }
    return s;
}

}  // namespace sinkgp

#endif  // SINKGP_COMMON_HPP
