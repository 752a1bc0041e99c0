#include "wadc/lqrsp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <sstream>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

namespace wadc {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

Mat effective_b2(const LqrspProblem& prob) {
    return prob.b_s2.size() ? prob.b_s2 : prob.b_s1;
}

Mat initial_weights(const LqrspProblem& prob) {
    return prob.weights.size() ? prob.weights : Mat::Ones(prob.p(), prob.n());
}

double rel_degradation(double j, double j_c) {
    if (j_c > 0.0) return (j - j_c) / j_c;
    return (j <= 1e-300) ? 0.0 : kInf;
}

/// Factorization and intermediates of one objective evaluation, kept so the
/// gradient at an accepted trial point reuses the Schur form computed while
/// backtracking instead of refactoring the closed loop.
struct EvalState {
    std::optional<LyapunovSolver> solver;
    Mat p;
    double j = kInf;
};

/// Smooth objective h(F) = J(F) + (rho/2)||F - V||^2, optionally restricted
/// to a 0/1 sparsity mask (the gradient is projected, so iterates never
/// leave the pattern).
struct SmoothProblem {
    const LqrspProblem& prob;
    const Mat& b2b2t;
    const Mat* v = nullptr;
    double rho = 0.0;
    const Mat* mask = nullptr;

    double value(const Mat& f, EvalState& st) const {
        st.solver.emplace(prob.a - prob.b_s1 * f);
        if (st.solver->abscissa() >= 0.0) {
            st.j = kInf;
            return kInf;
        }
        st.p = st.solver->solve_transposed(prob.q + f.transpose() * prob.r * f);
        st.j = (st.p * b2b2t).trace();
        double h = st.j;
        if (v) h += 0.5 * rho * (f - *v).squaredNorm();
        return h;
    }
    Mat gradient(const Mat& f, const EvalState& st) const {
        const Mat l = st.solver->solve_direct(b2b2t);
        Mat g = 2.0 * (prob.r * f - prob.b_s1.transpose() * st.p) * l;
        if (v) g += rho * (f - *v);
        if (mask) g = g.cwiseProduct(*mask);
        return g;
    }
};

struct SmoothResult {
    Mat f;
    double value = kInf;
    bool converged = false;
};

/// Barzilai-Borwein gradient descent with Armijo backtracking. The start
/// must be stabilizing; every accepted step keeps the loop stable because
/// unstable trials evaluate to +infinity and are rejected. t_carry, when
/// given, seeds the step size and receives the last accepted one, so that
/// a sequence of similar subproblems skips repeated step rediscovery.
SmoothResult minimize_smooth(const SmoothProblem& sp, Mat f, int max_iter, double grad_tol,
                             double* t_carry = nullptr) {
    SmoothResult out;
    EvalState st;
    double h = sp.value(f, st);
    if (h == kInf)
        throw NumericsError("gain optimization started from a destabilizing point");
    Mat g = sp.gradient(f, st);

    Mat f_prev, g_prev;
    double t_accepted = (t_carry && *t_carry > 0.0) ? *t_carry : 0.0;
    for (int it = 0; it < max_iter; ++it) {
        const double gnorm = g.norm();
        if (gnorm <= grad_tol) {
            out.converged = true;
            break;
        }

        double t = t_accepted > 0.0 ? t_accepted : 1.0 / (1.0 + sp.rho + gnorm);
        if (it > 0) {
            const Mat s = f - f_prev;
            const Mat y = g - g_prev;
            const double sy = (s.array() * y.array()).sum();
            if (sy > 1e-300) t = std::clamp(s.squaredNorm() / sy, 1e-14, 1e10);
        }
        // A spectral step can overshoot the stabilizing region by orders of
        // magnitude, and every rejected trial costs a factorization, so
        // growth beyond the last accepted step is rationed.
        if (t_accepted > 0.0) t = std::min(t, 8.0 * t_accepted);

        double h_new = kInf;
        Mat f_new;
        bool accepted = false;
        for (int back = 0; back < 60; ++back) {
            f_new = f - t * g;
            h_new = sp.value(f_new, st);
            if (h_new <= h - 1e-4 * t * gnorm * gnorm) {
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if (!accepted) break;  // step underflow: at the attainable accuracy

        t_accepted = t;
        f_prev = std::move(f);
        g_prev = std::move(g);
        f = std::move(f_new);
        h = h_new;
        g = sp.gradient(f, st);
    }
    if (t_carry && t_accepted > 0.0) *t_carry = t_accepted;
    out.f = f;
    out.value = h;
    return out;
}

struct AdmmOutcome {
    bool converged = false;
    double primal = 0.0;
    double dual = 0.0;
};

AdmmOutcome run_admm(const LqrspProblem& prob, const Mat& b2b2t, double gamma, const Mat& w,
                     Mat& f, Mat& g, Mat& lam, double& rho) {
    AdmmOutcome out;
    const Mat kappa_base = gamma * w;
    double t_carry = 0.0;
    for (int iter = 0; iter < prob.admm_cap; ++iter) {
        const Mat v = g - lam / rho;
        SmoothProblem sp{prob, b2b2t, &v, rho, nullptr};
        const double ftol = 1e-6 * (1.0 + rho);
        f = minimize_smooth(sp, f, 40, ftol, &t_carry).f;

        const Mat g_prev = g;
        g = soft_threshold(f + lam / rho, kappa_base / rho);
        lam += rho * (f - g);

        out.primal = (f - g).norm();
        out.dual = rho * (g - g_prev).norm();
        if (out.primal < 1e-4 && out.dual < 1e-4) {
            out.converged = true;
            break;
        }
        if (out.primal > 10.0 * out.dual) {
            rho = std::min(rho * 2.0, 1e6);
            t_carry = 0.0;  // penalty curvature changed; re-derive the step
        } else if (out.dual > 10.0 * out.primal) {
            rho = std::max(rho * 0.5, 1e-3);
            t_carry = 0.0;
        }
    }
    return out;
}

/// Best stabilizing start restricted to the pattern, or empty when none of
/// the candidates stabilize the loop.
Mat stable_masked_start(const LqrspProblem& prob, const Mat& mask,
                        const std::vector<const Mat*>& candidates) {
    for (const Mat* c : candidates) {
        const Mat masked = c->cwiseProduct(mask);
        if (h2_cost_and_grad(prob, masked, false).stable) return masked;
    }
    return Mat();
}

}  // namespace

Vec log_grid(double lo, double hi, int count) {
    if (!(lo > 0.0) || !(hi >= lo)) throw InputError("log grid requires 0 < lo <= hi");
    if (count < 1) throw InputError("log grid requires at least one point");
    Vec out(count);
    if (count == 1) {
        out(0) = lo;
        return out;
    }
    const double step = (std::log(hi) - std::log(lo)) / (count - 1);
    for (int k = 0; k < count; ++k) out(k) = std::exp(std::log(lo) + step * k);
    return out;
}

Mat build_state_cost(const LinearModel& model, const SystemCase& sc, const CostSpec& spec) {
    if (!(spec.zeta > 0.0)) throw InputError("state cost requires zeta > 0");

    Vec c = Vec::Zero(model.n());
    auto add_group = [&](const std::vector<std::string>& ids, double sign) {
        if (ids.empty()) throw InputError("state cost group is empty");
        double total = 0.0;
        for (const auto& id : ids) total += sc.machine_h_sys(sc.machine_index(id));
        for (const auto& id : ids) {
            const int m = sc.machine_index(id);
            const int k = model.state_index(sc.machines[m].id + ".rotor_speed");
            c(k) += sign * sc.machine_h_sys(m) / total;
        }
    };

    if (spec.kind == CostSpec::Kind::coi) {
        std::vector<std::string> all;
        for (const auto& m : sc.machines) all.push_back(m.id);
        add_group(all, 1.0);
    } else {
        add_group(spec.group_a, 1.0);
        add_group(spec.group_b, -1.0);
    }
    return spec.zeta * c * c.transpose();
}

void LqrspProblem::validate() const {
    const int nn = n(), pp = p();
    if (a.rows() != a.cols() || b_s1.rows() != nn)
        throw InputError("design problem: A/B dimension mismatch");
    if (b_s2.size() && (b_s2.rows() != nn)) throw InputError("design problem: B_s2 row mismatch");
    if (q.rows() != nn || q.cols() != nn) throw InputError("design problem: Q must be n x n");
    if (r.rows() != pp || r.cols() != pp) throw InputError("design problem: R must be p x p");
    if (weights.size() && (weights.rows() != pp || weights.cols() != nn))
        throw InputError("design problem: weight matrix must be p x n");
    if (weights.size() && (weights.array() < 0.0).any())
        throw InputError("design problem: weights must be non-negative");
    if (!state_names.empty() && static_cast<int>(state_names.size()) != nn)
        throw InputError("design problem: one state name per state required");
    if (reweight_rounds < 1 || !(eps_weight > 0.0) || !(rho > 0.0) || admm_cap < 1)
        throw InputError("design problem: invalid solver parameters");

    const double q_scale = std::max(1.0, q.cwiseAbs().maxCoeff());
    if ((q - q.transpose()).cwiseAbs().maxCoeff() > 1e-9 * q_scale)
        throw InputError("design problem: Q not symmetric");
    const Eigen::SelfAdjointEigenSolver<Mat> qe(q, Eigen::EigenvaluesOnly);
    if (qe.eigenvalues().minCoeff() < -1e-10 * q_scale)
        throw InputError("design problem: Q not positive semidefinite");
    if (Eigen::LLT<Mat>(r).info() != Eigen::Success)
        throw InputError("design problem: R not positive definite");

    for (int k = 1; k < gamma_grid.size(); ++k)
        if (gamma_grid(k) < gamma_grid(k - 1))
            throw InputError("design problem: gamma grid must be ascending");
    if (gamma_grid.size() && gamma_grid(0) < 0.0)
        throw InputError("design problem: gamma must be non-negative");

    // PBH test on every non-stable mode.
    const Eigen::EigenSolver<Mat> es(a, false);
    const double scale = 1.0 + a.cwiseAbs().maxCoeff();
    for (int k = 0; k < nn; ++k) {
        const Complex lam = es.eigenvalues()(k);
        if (lam.real() < -1e-9) continue;
        CMat pencil(nn, nn + pp);
        pencil.leftCols(nn) = a.cast<Complex>() - lam * CMat::Identity(nn, nn);
        pencil.rightCols(pp) = b_s1.cast<Complex>();
        const Eigen::JacobiSVD<CMat> svd(pencil);
        if (svd.singularValues().minCoeff() < 1e-8 * scale) {
            std::ostringstream msg;
            msg << "design problem: mode at " << lam.real() << (lam.imag() < 0 ? "-" : "+")
                << std::abs(lam.imag()) << "i is not stabilizable from the given inputs";
            throw InputError(msg.str());
        }
    }
}

LqrspProblem make_design_problem(const LinearModel& model, const Mat& q_full, const Mat& r,
                                 const std::string& device_id, const Vec& gamma_grid) {
    const int n = model.n();
    const int col = model.input_index(device_id);

    // Disturbances enter through every modulation point: load fluctuation at
    // a device bus is the same physical channel as the device's own command.
    const Mat& noise = model.b;

    // Uniform-angle-shift direction; when the model is invariant along it,
    // the absolute-angle coordinate is unobservable and uncontrollable and
    // must be removed before posing an H2 problem.
    Vec shift = Vec::Zero(n);
    int ref = -1;
    for (int k = 0; k < n; ++k) {
        if (model.labels[k].kind != StateKind::rotor_angle) continue;
        shift(k) = 1.0;
        if (ref < 0) ref = k;
    }
    const bool symmetric =
        ref >= 0 && (model.a * shift).cwiseAbs().maxCoeff() <
                        1e-7 * std::max(1.0, model.a.cwiseAbs().maxCoeff());

    LqrspProblem prob;
    prob.r = r;
    prob.gamma_grid = gamma_grid;

    if (!symmetric) {
        prob.a = model.a;
        prob.b_s1 = model.b.col(col);
        prob.b_s2 = noise;
        prob.q = q_full;
        for (const auto& lab : model.labels) prob.state_names.push_back(lab.name());
    } else {
        // x = reconstruct * xr picks the representative with the reference
        // angle at zero; xr = drop * x measures angles relative to it.
        Mat drop = Mat::Zero(n - 1, n);
        Mat reconstruct = Mat::Zero(n, n - 1);
        int row = 0;
        for (int k = 0; k < n; ++k) {
            if (k == ref) continue;
            drop(row, k) = 1.0;
            if (model.labels[k].kind == StateKind::rotor_angle) drop(row, ref) = -1.0;
            reconstruct(k, row) = 1.0;
            const std::string name = model.labels[k].name();
            prob.state_names.push_back(model.labels[k].kind == StateKind::rotor_angle
                                           ? name + "-" + model.labels[ref].name()
                                           : name);
            ++row;
        }
        prob.a = drop * model.a * reconstruct;
        prob.b_s1 = drop * model.b.col(col);
        prob.b_s2 = drop * noise;
        prob.q = reconstruct.transpose() * q_full * reconstruct;
    }
    prob.validate();
    return prob;
}

LqrResult solve_lqr(const LqrspProblem& prob) {
    prob.validate();
    const CareResult care = solve_care(prob.a, prob.b_s1, prob.q, prob.r);
    const double tol = 1e-9 * std::max(1.0, prob.q.norm());
    if (care.residual > tol)
        throw NumericsError("Riccati iteration stagnated (residual " +
                            std::to_string(care.residual) + ")");
    const Mat b2 = effective_b2(prob);
    LqrResult out;
    out.f_c = care.F;
    out.p = care.P;
    out.j_c = (b2.transpose() * care.P * b2).trace();
    return out;
}

H2Eval h2_cost_and_grad(const LqrspProblem& prob, const Mat& f, bool want_grad) {
    H2Eval out;
    const Mat acl = prob.a - prob.b_s1 * f;
    const LyapunovSolver solver(acl);
    if (solver.abscissa() >= 0.0) {
        out.j = kInf;
        return out;
    }
    const Mat qf = prob.q + f.transpose() * prob.r * f;
    const Mat p = solver.solve_transposed(qf);
    const Mat b2 = effective_b2(prob);
    out.j = (b2.transpose() * p * b2).trace();
    out.stable = true;
    if (want_grad) {
        const Mat l = solver.solve_direct(b2 * b2.transpose());
        out.grad = 2.0 * (prob.r * f - prob.b_s1.transpose() * p) * l;
    }
    return out;
}

Mat soft_threshold(const Mat& v, const Mat& kappa) {
    if (v.rows() != kappa.rows() || v.cols() != kappa.cols())
        throw NumericsError("soft_threshold: dimension mismatch");
    return (v.array().sign() * (v.array().abs() - kappa.array()).max(0.0)).matrix();
}

std::vector<SparseSolution> lqrsp_sweep(const LqrspProblem& prob) {
    prob.validate();
    const LqrResult lqr = solve_lqr(prob);
    const Mat w0 = initial_weights(prob);
    const Mat b2 = effective_b2(prob);
    const Mat b2b2t = b2 * b2.transpose();

    Mat f = lqr.f_c;
    Mat g = lqr.f_c;
    Mat lam = Mat::Zero(prob.p(), prob.n());

    std::vector<SparseSolution> sweep;
    sweep.reserve(static_cast<size_t>(prob.gamma_grid.size()));
    // Consecutive grid points usually settle on the same support, so each
    // polished gain seeds the next polish over that pattern.
    std::map<std::string, Mat> polished;

    for (int gi = 0; gi < prob.gamma_grid.size(); ++gi) {
        const double gamma = prob.gamma_grid(gi);

        Mat w = w0;
        double rho = prob.rho;
        AdmmOutcome admm;
        for (int round = 0; round < prob.reweight_rounds; ++round) {
            admm = run_admm(prob, b2b2t, gamma, w, f, g, lam, rho);
            if (round + 1 < prob.reweight_rounds)
                w = (g.array().abs() + prob.eps_weight).inverse().matrix();
        }

        SparseSolution sol;
        sol.gamma = gamma;
        sol.admm_converged = admm.converged;
        sol.primal_residual = admm.primal;
        sol.dual_residual = admm.dual;
        const Mat pattern = (g.array() != 0.0).cast<double>().matrix();
        sol.cardinality = static_cast<int>(pattern.sum());

        if (sol.cardinality == prob.p() * prob.n()) {
            // Full pattern: the polished optimum is the dense LQR gain.
            sol.f = lqr.f_c;
            sol.j = lqr.j_c;
        } else if (sol.cardinality == 0) {
            sol.f = Mat::Zero(prob.p(), prob.n());
            const H2Eval open = h2_cost_and_grad(prob, sol.f, false);
            sol.j = open.j;
            if (!open.stable) sol.note = "all entries removed and the plant is unstable";
        } else {
            std::string key(static_cast<size_t>(pattern.size()), '0');
            for (int k = 0; k < pattern.size(); ++k)
                if (pattern(k) != 0.0) key[static_cast<size_t>(k)] = '1';
            std::vector<const Mat*> candidates;
            const auto seed = polished.find(key);
            if (seed != polished.end()) candidates.push_back(&seed->second);
            candidates.insert(candidates.end(), {&g, &f, &lqr.f_c});

            const Mat start = stable_masked_start(prob, pattern, candidates);
            if (!start.size()) {
                sol.f = g;
                sol.j = kInf;
                sol.note = "sparsity pattern admits no stabilizing gain";
            } else {
                SmoothProblem sp{prob, b2b2t, nullptr, 0.0, &pattern};
                const SmoothResult pol = minimize_smooth(
                    sp, start, 400, 1e-8 * std::max(1.0, std::abs(lqr.j_c)));
                sol.f = pol.f;
                sol.j = pol.value;
                if (!pol.converged) sol.note = "polish stopped before gradient tolerance";
                polished[key] = pol.f;
            }
        }

        sol.degradation = rel_degradation(sol.j, lqr.j_c);
        sol.stability_margin = LyapunovSolver(prob.a - prob.b_s1 * sol.f).abscissa();
        sweep.push_back(std::move(sol));
    }
    return sweep;
}

SignalCombination extract_signal(const LqrspProblem& prob, const SparseSolution& sol, double tau) {
    if (prob.p() != 1)
        throw InputError("signal extraction is defined for single-input problems");
    if (!std::isfinite(sol.j))
        throw NumericsError("cannot extract a signal from an unstabilized sweep point");

    const double max_abs = sol.f.cwiseAbs().maxCoeff();
    Mat pattern(1, prob.n());
    for (int k = 0; k < prob.n(); ++k) {
        const double mag = std::abs(sol.f(0, k));
        pattern(0, k) = (mag != 0.0 && mag >= tau * max_abs) ? 1.0 : 0.0;
    }

    Mat f = sol.f.cwiseProduct(pattern);
    const int kept = static_cast<int>(pattern.sum());
    if (kept > 0) {
        const Mat start = stable_masked_start(prob, pattern, {&f, &sol.f});
        if (!start.size())
            throw NumericsError("truncation at tau=" + std::to_string(tau) +
                                " destabilizes the closed loop");
        const Mat b2 = effective_b2(prob);
        const Mat b2b2t = b2 * b2.transpose();
        SmoothProblem sp{prob, b2b2t, nullptr, 0.0, &pattern};
        f = minimize_smooth(sp, start, 400, 1e-8 * std::max(1.0, std::abs(sol.j))).f;
    }
    const H2Eval check = h2_cost_and_grad(prob, f, false);
    if (kept > 0 && !check.stable)
        throw NumericsError("truncation at tau=" + std::to_string(tau) +
                            " destabilizes the closed loop");

    SignalCombination sig;
    sig.gamma = sol.gamma;
    const double j_c = sol.j / (1.0 + sol.degradation);
    sig.degradation = check.stable ? rel_degradation(check.j, j_c) : kInf;
    for (int k = 0; k < prob.n(); ++k) {
        if (f(0, k) == 0.0) continue;
        const std::string name = prob.state_names.empty() ? "x" + std::to_string(k)
                                                          : prob.state_names[k];
        sig.weights.emplace_back(name, -f(0, k));
    }
    sig.cardinality = static_cast<int>(sig.weights.size());
    return sig;
}

const SparseSolution& select_solution(const std::vector<SparseSolution>& sweep,
                                      double max_degradation) {
    const SparseSolution* best = nullptr;
    for (const auto& sol : sweep) {
        if (!sol.admm_converged || !(sol.stability_margin < 0.0)) continue;
        if (!std::isfinite(sol.j) || sol.degradation > max_degradation) continue;
        if (!best || sol.cardinality < best->cardinality ||
            (sol.cardinality == best->cardinality && sol.j < best->j))
            best = &sol;
    }
    if (!best) {
        std::ostringstream msg;
        msg << "no sweep point keeps degradation within " << max_degradation * 100.0 << "%";
        throw InputError(msg.str());
    }
    return *best;
}

std::string sweep_csv(const std::vector<SparseSolution>& sweep) {
    std::ostringstream out;
    out << "gamma,cardinality,j,degradation,stability_margin\n";
    out.precision(12);
    for (const auto& sol : sweep)
        out << sol.gamma << ',' << sol.cardinality << ',' << sol.j << ',' << sol.degradation
            << ',' << sol.stability_margin << '\n';
    return out.str();
}

}  // namespace wadc
