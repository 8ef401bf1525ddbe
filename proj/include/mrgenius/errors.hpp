#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace mrgenius {

// Input that breaks a documented precondition (bad column, wrong exposure
// kind, malformed scenario, ...).
class ValidationError : public std::runtime_error {
public:
    explicit ValidationError(const std::string& what)
        : std::runtime_error(what) {}
    ValidationError(const std::string& what, std::vector<std::string> details)
        : std::runtime_error(what), details_(std::move(details)) {}

    const std::vector<std::string>& details() const noexcept { return details_; }

private:
    std::vector<std::string> details_;
};

// The data do not identify the target: zero heteroscedasticity contrast,
// singular GMM curvature, no root bracket, singular at-risk matrix.
class IdentificationError : public std::runtime_error {
public:
    explicit IdentificationError(const std::string& what)
        : std::runtime_error(what) {}
};

// An iterative fit did not reach its tolerance.
class ConvergenceError : public std::runtime_error {
public:
    ConvergenceError(const std::string& what, double residual_norm)
        : std::runtime_error(what), residual_norm_(residual_norm) {}

    double residual_norm() const noexcept { return residual_norm_; }

private:
    double residual_norm_;
};

} // namespace mrgenius
