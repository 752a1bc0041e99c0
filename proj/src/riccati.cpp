#include "wadc/riccati.hpp"

#include <limits>

#include <Eigen/Eigenvalues>

namespace wadc {

namespace {

// Stack-allocated small matrices: Schur diagonal blocks are at most 2x2, so
// the vectorized block equation is at most 4x4.
using Mat2 = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, 2, 2>;
using Mat4 = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, 4, 4>;
using Vec4 = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, 4, 1>;

/// Solves the small Sylvester equation P Z + Z S = C with P, S of order
/// at most two (Schur diagonal blocks) via the vectorized system.
Mat2 solve_block(const Mat2& P, const Mat2& S, const Mat2& C) {
    const Eigen::Index p = P.rows(), q = S.rows();
    Mat4 m = Mat4::Zero(p * q, p * q);
    Vec4 rhs(p * q);
    for (Eigen::Index j = 0; j < q; ++j) {
        m.block(j * p, j * p, p, p) += P;
        for (Eigen::Index l = 0; l < q; ++l) {
            // vec(Z S) = (S^T kron I_p) vec(Z)
            for (Eigen::Index i = 0; i < p; ++i) m(j * p + i, l * p + i) += S(l, j);
        }
        rhs.segment(j * p, p) = C.col(j);
    }
    Eigen::PartialPivLU<Mat4> lu(m);
    Vec4 z = lu.solve(rhs);
    if (!z.allFinite())
        throw NumericsError("LyapunovSolver: singular shifted system (eigenvalue pair sums to zero)");
    Mat2 Z(p, q);
    for (Eigen::Index j = 0; j < q; ++j) Z.col(j) = z.segment(j * p, p);
    return Z;
}

}  // namespace

LyapunovSolver::LyapunovSolver(const Mat& A) {
    if (A.rows() != A.cols()) throw NumericsError("LyapunovSolver: matrix not square");
    Eigen::RealSchur<Mat> schur(A);
    if (schur.info() != Eigen::Success)
        throw NumericsError("LyapunovSolver: Schur decomposition failed");
    u_ = schur.matrixU();
    t_ = schur.matrixT();

    // Quasi-triangular block structure: a nonzero subdiagonal entry marks a
    // 2x2 block carrying a complex conjugate eigenvalue pair.
    const Eigen::Index n = t_.rows();
    abscissa_ = n ? -std::numeric_limits<double>::infinity() : 0.0;
    for (Eigen::Index k = 0; k < n;) {
        const Eigen::Index size = (k + 1 < n && t_(k + 1, k) != 0.0) ? 2 : 1;
        blocks_.push_back({k, size});
        const double re = size == 1 ? t_(k, k) : 0.5 * (t_(k, k) + t_(k + 1, k + 1));
        abscissa_ = std::max(abscissa_, re);
        k += size;
    }
}

Mat LyapunovSolver::solve_direct(const Mat& Q) const {
    const Eigen::Index n = t_.rows();
    if (Q.rows() != n || Q.cols() != n)
        throw NumericsError("LyapunovSolver: dimension mismatch");

    // T Y + Y T^T = C on the Schur basis, back-substituted over the
    // quasi-triangular blocks from the last block column.
    Mat C = -(u_.transpose() * Q * u_);
    Mat Y = Mat::Zero(n, n);
    const int nb = static_cast<int>(blocks_.size());
    for (int j = nb - 1; j >= 0; --j) {
        const auto [cj, sj] = blocks_[j];
        for (int l = j + 1; l < nb; ++l) {
            const auto [cl, sl] = blocks_[l];
            C.block(0, cj, n, sj).noalias() -=
                Y.block(0, cl, n, sl) * t_.block(cj, cl, sj, sl).transpose();
        }
        for (int i = nb - 1; i >= 0; --i) {
            const auto [ci, si] = blocks_[i];
            Mat rhs = C.block(ci, cj, si, sj);
            for (int k = i + 1; k < nb; ++k) {
                const auto [ck, sk] = blocks_[k];
                rhs.noalias() -= t_.block(ci, ck, si, sk) * Y.block(ck, cj, sk, sj);
            }
            Y.block(ci, cj, si, sj) =
                solve_block(t_.block(ci, ci, si, si), t_.block(cj, cj, sj, sj).transpose(), rhs);
        }
    }

    Mat X = u_ * Y * u_.transpose();
    return 0.5 * (X + X.transpose());
}

Mat LyapunovSolver::solve_transposed(const Mat& Q) const {
    const Eigen::Index n = t_.rows();
    if (Q.rows() != n || Q.cols() != n)
        throw NumericsError("LyapunovSolver: dimension mismatch");

    // T^T Y + Y T = C, forward-substituted since T^T is lower
    // quasi-triangular.
    Mat C = -(u_.transpose() * Q * u_);
    Mat Y = Mat::Zero(n, n);
    const int nb = static_cast<int>(blocks_.size());
    for (int j = 0; j < nb; ++j) {
        const auto [cj, sj] = blocks_[j];
        for (int l = 0; l < j; ++l) {
            const auto [cl, sl] = blocks_[l];
            C.block(0, cj, n, sj).noalias() -= Y.block(0, cl, n, sl) * t_.block(cl, cj, sl, sj);
        }
        for (int i = 0; i < nb; ++i) {
            const auto [ci, si] = blocks_[i];
            Mat rhs = C.block(ci, cj, si, sj);
            for (int k = 0; k < i; ++k) {
                const auto [ck, sk] = blocks_[k];
                rhs.noalias() -= t_.block(ck, ci, sk, si).transpose() * Y.block(ck, cj, sk, sj);
            }
            Y.block(ci, cj, si, sj) = solve_block(t_.block(ci, ci, si, si).transpose(),
                                                  t_.block(cj, cj, sj, sj), rhs);
        }
    }

    Mat X = u_ * Y * u_.transpose();
    return 0.5 * (X + X.transpose());
}

Mat solve_lyapunov(const Mat& A, const Mat& Q) {
    if (A.cols() != A.rows() || Q.rows() != A.rows() || Q.cols() != A.rows())
        throw NumericsError("solve_lyapunov: dimension mismatch");
    return LyapunovSolver(A).solve_direct(Q);
}

double spectral_abscissa(const Mat& A) {
    Eigen::EigenSolver<Mat> es(A, /*computeEigenvectors=*/false);
    return es.eigenvalues().real().maxCoeff();
}

Mat stabilizing_gain(const Mat& A, const Mat& B) {
    const double alpha = spectral_abscissa(A);
    if (alpha < 0.0) return Mat::Zero(B.cols(), A.rows());

    // Bass: with beta exceeding the spectral abscissa, -(A + beta I) is
    // Hurwitz, so the shifted Gramian X solving
    //   (A + beta I) X + X (A + beta I)^T = 2 B B^T
    // is PD when (A, B) is controllable, and F = B^T X^{-1} stabilizes.
    const double beta = 2.0 * alpha + 1.0 + A.norm();
    Mat As = -(A + beta * Mat::Identity(A.rows(), A.cols()));
    Mat X = solve_lyapunov(As, 2.0 * B * B.transpose());

    Eigen::FullPivLU<Mat> lu(X);
    if (!lu.isInvertible())
        throw NumericsError("stabilizing_gain: shifted Gramian singular; (A,B) not controllable");
    Mat F = B.transpose() * lu.inverse();
    if (spectral_abscissa(A - B * F) >= 0.0)
        throw NumericsError("stabilizing_gain: Bass gain failed to stabilize");
    return F;
}

double care_residual(const Mat& A, const Mat& B, const Mat& Q, const Mat& R, const Mat& P) {
    Mat Rinv_BtP = R.llt().solve(B.transpose() * P);
    Mat res = A.transpose() * P + P * A - P * B * Rinv_BtP + Q;
    return res.norm();
}

CareResult solve_care(const Mat& A, const Mat& B, const Mat& Q, const Mat& R,
                      const CareOptions& opts) {
    const Eigen::Index n = A.rows();
    const Eigen::Index m = B.cols();
    if (B.rows() != n || Q.rows() != n || Q.cols() != n || R.rows() != m || R.cols() != m)
        throw NumericsError("solve_care: dimension mismatch");

    Eigen::LLT<Mat> Rllt(R);
    if (Rllt.info() != Eigen::Success)
        throw NumericsError("solve_care: R not positive definite");

    Mat F = (spectral_abscissa(A) < 0.0) ? Mat::Zero(m, n) : stabilizing_gain(A, B);

    Mat P = Mat::Zero(n, n);
    int iter = 0;
    for (; iter < opts.max_iterations; ++iter) {
        Mat Acl = A - B * F;
        Mat W = Q + F.transpose() * R * F;
        Mat Pn = solve_lyapunov(Acl.transpose(), W);
        Mat Fn = Rllt.solve(B.transpose() * Pn);

        double dP = (Pn - P).norm() / std::max(1.0, Pn.norm());
        P = Pn;
        F = Fn;
        if (dP < opts.tol) break;
    }

    CareResult out;
    out.P = 0.5 * (P + P.transpose());
    out.F = F;
    out.iterations = iter + 1;
    out.residual = care_residual(A, B, Q, R, out.P);
    if (!out.P.allFinite())
        throw NumericsError("solve_care: Newton-Kleinman produced non-finite iterate");
    return out;
}

}  // namespace wadc
