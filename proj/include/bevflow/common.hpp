#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace bevflow {

// Error hierarchy. Exit-code mapping in the CLI: UserError -> 1, anything else -> 2.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};
struct UserError : Error {
    explicit UserError(const std::string& msg) : Error(msg) {}
};
struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};
struct ConfigError : UserError {
    explicit ConfigError(const std::string& msg) : UserError(msg) {}
};
struct IndexError : Error {
    explicit IndexError(const std::string& msg) : Error(msg) {}
};
struct FormatError : UserError {
    explicit FormatError(const std::string& msg) : UserError(msg) {}
};
struct CalibrationError : UserError {
    explicit CalibrationError(const std::string& msg) : UserError(msg) {}
};

using Shape = std::vector<int64_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << ")";
    return os.str();
}

inline int64_t numel_of(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

// Single RNG type used everywhere so seeded runs are reproducible across modules.
using Rng = std::mt19937;

inline float uniform(Rng& rng, float lo, float hi) {
    std::uniform_real_distribution<float> d(lo, hi);
    return d(rng);
}

inline int uniform_int(Rng& rng, int lo, int hi) {
    std::uniform_int_distribution<int> d(lo, hi);
    return d(rng);
}

// Rounds halves toward negative infinity: 0.5 -> 0, 1.5 -> 1, -0.5 -> -1.
inline int64_t round_half_down(float x) {
    return static_cast<int64_t>(std::ceil(static_cast<double>(x) - 0.5));
}

}  // namespace bevflow
