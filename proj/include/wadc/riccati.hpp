#pragma once

#include "wadc/common.hpp"

namespace wadc {

/// Solves the continuous Lyapunov equation A X + X A^T + Q = 0 by
/// Bartels-Stewart on the real Schur form of A. Q must be symmetric;
/// the equation is solvable whenever no two eigenvalues of A sum to zero.
Mat solve_lyapunov(const Mat& A, const Mat& Q);

/// Holds the real Schur form of one matrix so that repeated Lyapunov
/// solves against it (both orientations) cost one quasi-triangular sweep
/// each.
class LyapunovSolver {
public:
    explicit LyapunovSolver(const Mat& A);  // throws NumericsError on Schur failure

    double abscissa() const { return abscissa_; }
    /// A X + X A^T + Q = 0
    Mat solve_direct(const Mat& Q) const;
    /// A^T X + X A + Q = 0
    Mat solve_transposed(const Mat& Q) const;

private:
    struct Block {
        Eigen::Index start;
        Eigen::Index size;
    };
    Mat u_;
    Mat t_;
    std::vector<Block> blocks_;
    double abscissa_ = 0.0;
};

/// Stabilizing state feedback via Bass' method: F such that A - B F is
/// Hurwitz. Requires (A, B) controllable enough for the shifted Gramian
/// to be invertible; throws NumericsError otherwise.
Mat stabilizing_gain(const Mat& A, const Mat& B);

struct CareResult {
    Mat P;            // stabilizing solution, symmetric PSD
    Mat F;            // F = R^{-1} B^T P
    double residual;  // Frobenius norm of the Riccati residual
    int iterations;
};

struct CareOptions {
    double tol = 1e-12;    // relative change in P between Newton steps
    int max_iterations = 60;
};

/// Solves A^T P + P A - P B R^{-1} B^T P + Q = 0 by Newton-Kleinman
/// iteration (a Lyapunov solve per step) from a stabilizing initial gain.
/// Q must be PSD, R PD, (A, B) stabilizable.
CareResult solve_care(const Mat& A, const Mat& B, const Mat& Q, const Mat& R,
                      const CareOptions& opts = {});

/// Frobenius norm of A^T P + P A - P B R^{-1} B^T P + Q.
double care_residual(const Mat& A, const Mat& B, const Mat& Q, const Mat& R, const Mat& P);

/// Largest real part over eig(A).
double spectral_abscissa(const Mat& A);

}  // namespace wadc
