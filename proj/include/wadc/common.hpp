#pragma once

#include <complex>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace wadc {

using Mat  = Eigen::MatrixXd;
using Vec  = Eigen::VectorXd;
using CMat = Eigen::MatrixXcd;
using CVec = Eigen::VectorXcd;
using Complex = std::complex<double>;

inline constexpr double kPi = 3.14159265358979323846;

/// Malformed input: case files, scenario files, bad labels, bad flags.
struct InputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Power-flow divergence or singular network.
struct PowerFlowError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Numerical failure inside a solver (defective eigenbasis, Newton stagnation, ...).
struct NumericsError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Time-domain integration abort (step-size instability, unverified design).
struct IntegrationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace wadc
