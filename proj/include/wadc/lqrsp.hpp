#pragma once

#include <string>
#include <utility>
#include <vector>

#include "wadc/linearize.hpp"
#include "wadc/riccati.hpp"

namespace wadc {

/// Ascending logarithmically spaced grid from lo to hi (both > 0).
Vec log_grid(double lo, double hi, int count);

/// Modal-selective quadratic state cost. relative_speed penalizes the
/// squared difference of two machine-group speeds (inertia-weighted group
/// means); coi penalizes the squared center-of-inertia speed.
struct CostSpec {
    enum class Kind { relative_speed, coi };
    Kind kind = Kind::coi;
    std::vector<std::string> group_a;  // machine ids, relative_speed only
    std::vector<std::string> group_b;
    double zeta = 1.0;
};

/// Rank-one Q = zeta * c c^T over the model's states. Throws InputError on
/// an empty group, an unknown machine id, or zeta <= 0.
Mat build_state_cost(const LinearModel& model, const SystemCase& sc, const CostSpec& spec);

/// Sparsity-promoting LQR problem: minimize J(F) + gamma sum w_ij |F_ij|
/// over stabilizing F for u = -F x, where J is the H2 norm of the loop
/// driven through b_s2 and penalized by q and r.
struct LqrspProblem {
    Mat a;
    Mat b_s1;  // control inputs, one column per actuator
    Mat b_s2;  // disturbance inputs; defaults to b_s1 when empty
    Mat q;     // n x n PSD
    Mat r;     // p x p PD
    Vec gamma_grid;  // ascending; a leading 0 entry reproduces the dense LQR
    Mat weights;     // initial w_ij, p x n; empty means all-ones
    int reweight_rounds = 3;
    double eps_weight = 1e-4;
    double rho = 10.0;   // initial ADMM penalty, adapted during iteration
    int admm_cap = 500;
    std::vector<std::string> state_names;  // one per state, for signal export

    int n() const { return static_cast<int>(a.rows()); }
    int p() const { return static_cast<int>(b_s1.cols()); }

    /// Q PSD, R PD, (a, b_s1) stabilizable (unstable modes controllable).
    /// Throws InputError with the violated condition.
    void validate() const;
};

/// Design problem for one device over the model's states. When the model
/// has the angle-translation symmetry (every absolute rotor angle shifted
/// together leaves the dynamics unchanged), states are rebased to angles
/// relative to the first machine and that machine's angle is dropped;
/// otherwise states pass through unchanged. q_full is given over the full
/// model states and is rebased along. The disturbance input b_s2 spans every
/// modulation point (all device columns), so the cost integrates the response
/// to load fluctuations at the controlled buses rather than only to commands
/// at the designed device.
LqrspProblem make_design_problem(const LinearModel& model, const Mat& q_full, const Mat& r,
                                 const std::string& device_id, const Vec& gamma_grid);

struct LqrResult {
    Mat f_c;     // dense optimal gain
    Mat p;       // stabilizing Riccati solution
    double j_c;  // optimal H2 cost
};

/// Dense H2-optimal gain by Newton-Kleinman; J_c = trace(b_s2^T P b_s2).
LqrResult solve_lqr(const LqrspProblem& prob);

struct H2Eval {
    double j = 0.0;  // +infinity when the loop is unstable
    Mat grad;        // dJ/dF, p x n; empty when not requested or unstable
    bool stable = false;
};

/// Closed-loop H2 cost and gradient at the gain f:
/// J from the transposed closed-loop Lyapunov equation with Q + F^T R F,
/// grad = 2 (R F - B_s1^T P) L with L from the direct equation with
/// B_s2 B_s2^T. One Schur factorization serves both solves.
H2Eval h2_cost_and_grad(const LqrspProblem& prob, const Mat& f, bool want_grad = true);

/// Entrywise shrinkage: sign(v) * max(|v| - kappa, 0).
Mat soft_threshold(const Mat& v, const Mat& kappa);

struct SparseSolution {
    double gamma = 0.0;
    Mat f;  // polished gain over the sparsity pattern
    int cardinality = 0;
    double j = 0.0;
    double degradation = 0.0;       // (j - j_c) / j_c
    double stability_margin = 0.0;  // spectral abscissa of a - b_s1 f
    bool admm_converged = true;
    double primal_residual = 0.0;
    double dual_residual = 0.0;
    std::string note;  // diagnosis when flagged
};

/// ADMM sweep over the gamma grid with warm starts, per-gamma reweighting,
/// and a polish pass on each final pattern. Non-converged points are
/// flagged and the sweep continues.
std::vector<SparseSolution> lqrsp_sweep(const LqrspProblem& prob);

struct SignalCombination {
    // Feedback-row weights in the u = +w.x convention (w = -F row),
    // named by the problem's state labels; zeros omitted.
    std::vector<std::pair<std::string, double>> weights;
    double gamma = 0.0;
    double degradation = 0.0;
    int cardinality = 0;
};

/// Drops entries with |F_ij| < tau * max|F|, re-polishes the survivors,
/// and re-verifies stability. Throws NumericsError naming tau when the
/// truncated pattern cannot stabilize the loop. Single-input problems only.
SignalCombination extract_signal(const LqrspProblem& prob, const SparseSolution& sol, double tau);

/// Sparsest converged stable solution with degradation at most
/// max_degradation; ties broken toward lower cost. Throws InputError when
/// no solution qualifies.
const SparseSolution& select_solution(const std::vector<SparseSolution>& sweep,
                                      double max_degradation = 0.10);

/// CSV: gamma, cardinality, J, degradation, stability margin.
std::string sweep_csv(const std::vector<SparseSolution>& sweep);

}  // namespace wadc
