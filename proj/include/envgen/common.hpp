#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace envgen {

// Error categories, aligned with the CLI exit codes:
//   ConfigError -> 2, MissingArtifactError -> 3, NumericError -> 4.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class MissingArtifactError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Shape/layout mismatches detected at graph build or eval time.
class ShapeError : public NumericError {
public:
    using NumericError::NumericError;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline bool is_finite(float v) { return std::isfinite(v); }

}  // namespace envgen
