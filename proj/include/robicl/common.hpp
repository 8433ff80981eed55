#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>

namespace robicl {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Raised when inputs violate a documented precondition.
class InvalidArgument : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when a computation produces non-finite values, diverges, or hits a
/// singular system.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Monte Carlo or semi-analytic risk value with its standard error.
struct RiskEstimate {
    double value = 0.0;
    double std_error = 0.0;
    std::size_t samples = 0;
};

inline void require(bool condition, const std::string& message) {
    if (!condition) {
        throw InvalidArgument(message);
    }
}

inline bool all_finite(const Eigen::Ref<const Matrix>& m) { return m.allFinite(); }

/// Mean and standard error of the mean of a sample.
inline RiskEstimate mean_and_stderr(const Eigen::Ref<const Vector>& values) {
    RiskEstimate r;
    r.samples = static_cast<std::size_t>(values.size());
    if (values.size() == 0) {
        return r;
    }
    r.value = values.mean();
    if (values.size() > 1) {
        const double var = (values.array() - r.value).square().sum() / static_cast<double>(values.size() - 1);
        r.std_error = std::sqrt(var / static_cast<double>(values.size()));
    }
    return r;
}

} // namespace robicl
