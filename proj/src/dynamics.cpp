#include "wadc/dynamics.hpp"

#include <Eigen/Dense>

namespace wadc {

std::string to_string(StateKind kind) {
    switch (kind) {
        case StateKind::rotor_angle: return "rotor_angle";
        case StateKind::rotor_speed: return "rotor_speed";
        case StateKind::exciter: return "exciter";
        case StateKind::governor: return "governor";
        case StateKind::actuator: return "actuator";
    }
    return "?";
}

std::string StateLabel::name() const {
    std::string s = owner + "." + to_string(kind);
    if (kind == StateKind::governor) s += std::to_string(stage);
    return s;
}

namespace {

/// Gradients of the injected power at retained node r with respect to the
/// rectangular voltage coordinates w = (a_0, b_0, a_1, b_1, ...), given the
/// coordinates and the node currents c + jd of the whole retained set.
void power_rows(const Mat& g, const Mat& b, const Vec& va, const Vec& vb, const Vec& ic,
                const Vec& id, int r, Vec& dp, Vec& dq) {
    const int nr = static_cast<int>(va.size());
    dp.setZero(2 * nr);
    dq.setZero(2 * nr);
    for (int l = 0; l < nr; ++l) {
        const double gg = g(r, l), bb = b(r, l);
        dp(2 * l) = va(r) * gg + vb(r) * bb;
        dp(2 * l + 1) = -va(r) * bb + vb(r) * gg;
        dq(2 * l) = vb(r) * gg - va(r) * bb;
        dq(2 * l + 1) = -vb(r) * bb - va(r) * gg;
    }
    dp(2 * r) += ic(r);
    dp(2 * r + 1) += id(r);
    dq(2 * r) -= id(r);
    dq(2 * r + 1) += ic(r);
}

}  // namespace

DynamicModel::DynamicModel(const SystemCase& sc, const OperatingPoint& op,
                           const ReducedNetwork& red, const ModelConfig& cfg)
    : sys_(sc), red_(red) {
    build_layout(cfg);

    const int n_m = n_machines();
    const int n_d = n_devices();

    h2_.resize(n_m);
    damp_.resize(n_m);
    xd_.resize(n_m);
    kdroop_.resize(n_m);
    e0_.resize(n_m);
    pm0_.resize(n_m);
    vref_ = Vec::Zero(n_m);
    for (int m = 0; m < n_m; ++m) {
        h2_(m) = 2.0 * sys_.machine_h_sys(m);
        damp_(m) = sys_.machine_damping_sys(m);
        xd_(m) = sys_.machine_xd_sys(m);
        kdroop_(m) = sys_.machine_droop_gain_sys(m);
        e0_(m) = op.mach_emf_pu(m);
        pm0_(m) = op.mach_p_gen_pu(m);
    }
    pref_.resize(n_d);
    pmax_.resize(n_d);
    ta_.resize(n_d);
    for (int d = 0; d < n_d; ++d) {
        pref_(d) = sys_.device_p_ref_pu(d);
        pmax_(d) = sys_.device_p_max_pu(d);
        ta_(d) = sys_.devices[d].lag_tc_s;
    }
    v_fixed_.resize(static_cast<int>(red_.fixed_bus.size()));
    for (size_t i = 0; i < red_.fixed_bus.size(); ++i)
        v_fixed_(static_cast<int>(i)) = op.v_bus(red_.fixed_bus[i]);

    x0_ = Vec::Zero(n_);
    for (int m = 0; m < n_m; ++m) {
        x0_(angle_index(m)) = op.mach_angle_rad(m);
        if (exc_idx_[m] >= 0) x0_(exc_idx_[m]) = e0_(m);
    }

    AlgebraCache cache;
    const Outputs out0 = outputs(x0_, cache);
    for (int m = 0; m < n_m; ++m)
        if (exc_idx_[m] >= 0) vref_(m) = out0.v_t_mag_pu(m);

    refine_equilibrium();
}

void DynamicModel::build_layout(const ModelConfig& cfg) {
    const int n_m = static_cast<int>(sys_.machines.size());
    mach_off_.assign(n_m, 0);
    exc_idx_.assign(n_m, -1);
    gov_off_.assign(n_m, -1);
    gov_stages_.assign(n_m, 0);
    dev_off_.assign(sys_.devices.size(), 0);
    labels_.clear();

    int idx = 0;
    for (int m = 0; m < n_m; ++m) {
        const Machine& mach = sys_.machines[m];
        mach_off_[m] = idx;
        labels_.push_back({StateKind::rotor_angle, mach.id, 0});
        labels_.push_back({StateKind::rotor_speed, mach.id, 0});
        idx += 2;
        if (cfg.with_exciter && mach.exciter_tc_s > 0.0) {
            exc_idx_[m] = idx++;
            labels_.push_back({StateKind::exciter, mach.id, 0});
        }
        if (cfg.with_governor && !mach.governor_tc_s.empty()) {
            gov_off_[m] = idx;
            gov_stages_[m] = static_cast<int>(mach.governor_tc_s.size());
            for (int s = 1; s <= gov_stages_[m]; ++s)
                labels_.push_back({StateKind::governor, mach.id, s});
            idx += gov_stages_[m];
        }
    }
    for (size_t d = 0; d < sys_.devices.size(); ++d) {
        dev_off_[d] = idx++;
        labels_.push_back({StateKind::actuator, sys_.devices[d].id, 0});
    }
    n_ = idx;
}

int DynamicModel::state_index(const std::string& name) const {
    for (int i = 0; i < n_; ++i)
        if (labels_[i].name() == name) return i;
    throw InputError("unknown state label '" + name + "'");
}

int DynamicModel::exciter_index(int m) const { return exc_idx_[m]; }

int DynamicModel::governor_index(int m, int stage) const {
    if (gov_off_[m] < 0 || stage < 1 || stage > gov_stages_[m]) return -1;
    return gov_off_[m] + stage - 1;
}

CVec DynamicModel::solve_algebra(const CVec& v_mach, const Vec& p_dev, AlgebraCache& cache) const {
    const int n_m = n_machines();
    const int n_d = n_devices();
    const int n_f = static_cast<int>(v_fixed_.size());
    const int n_r = n_m + n_d + n_f;
    if (n_d == 0) return CVec();

    CVec v_dev = cache.valid ? cache.v_dev : CVec();
    if (v_dev.size() != n_d) {
        v_dev.resize(n_d);
        for (int d = 0; d < n_d; ++d) v_dev(d) = Complex(1.0, 0.0);
        cache.valid = false;
    }

    CVec v_ret(n_r);
    v_ret.head(n_m) = v_mach;
    v_ret.tail(n_f) = v_fixed_;

    const CMat& y = red_.y_red;
    for (int it = 0; it < 30; ++it) {
        v_ret.segment(n_m, n_d) = v_dev;
        const CVec i_ret = y * v_ret;

        Vec res(2 * n_d);
        double worst = 0.0;
        for (int d = 0; d < n_d; ++d) {
            const Complex s = v_dev(d) * std::conj(i_ret(n_m + d));
            res(2 * d) = s.real() - p_dev(d);
            res(2 * d + 1) = s.imag();
            worst = std::max({worst, std::abs(res(2 * d)), std::abs(res(2 * d + 1))});
        }
        if (worst < 1e-12) {
            cache.v_dev = v_dev;
            cache.valid = true;
            return v_dev;
        }

        Mat jac(2 * n_d, 2 * n_d);
        for (int d = 0; d < n_d; ++d) {
            const int rd = n_m + d;
            const double ar = v_dev(d).real(), br = v_dev(d).imag();
            const double cr = i_ret(rd).real(), dr = i_ret(rd).imag();
            for (int l = 0; l < n_d; ++l) {
                const int rl = n_m + l;
                const double g = y(rd, rl).real(), b = y(rd, rl).imag();
                jac(2 * d, 2 * l) = ar * g + br * b;
                jac(2 * d, 2 * l + 1) = -ar * b + br * g;
                jac(2 * d + 1, 2 * l) = br * g - ar * b;
                jac(2 * d + 1, 2 * l + 1) = -br * b - ar * g;
            }
            jac(2 * d, 2 * d) += cr;
            jac(2 * d, 2 * d + 1) += dr;
            jac(2 * d + 1, 2 * d) -= dr;
            jac(2 * d + 1, 2 * d + 1) += cr;
        }

        const Vec step = Eigen::PartialPivLU<Mat>(jac).solve(res);
        if (!step.allFinite())
            throw NumericsError("device bus algebraic solve: singular Jacobian");
        for (int d = 0; d < n_d; ++d)
            v_dev(d) -= Complex(step(2 * d), step(2 * d + 1));
    }
    throw NumericsError("device bus algebraic solve did not converge");
}

Vec DynamicModel::f(const Vec& x, const Vec& u, const Vec& vref_offset, AlgebraCache& cache) const {
    const int n_m = n_machines();
    const int n_d = n_devices();
    const int n_f = static_cast<int>(v_fixed_.size());

    CVec v_mach(n_m);
    for (int m = 0; m < n_m; ++m) {
        const double e = (exc_idx_[m] >= 0) ? x(exc_idx_[m]) : e0_(m);
        v_mach(m) = std::polar(e, x(angle_index(m)));
    }
    Vec p_dev(n_d);
    for (int d = 0; d < n_d; ++d)
        p_dev(d) = std::clamp(pref_(d) + x(actuator_index(d)), -pmax_(d), pmax_(d));

    const CVec v_dev = solve_algebra(v_mach, p_dev, cache);
    CVec v_ret(n_m + n_d + n_f);
    v_ret.head(n_m) = v_mach;
    v_ret.segment(n_m, n_d) = v_dev;
    v_ret.tail(n_f) = v_fixed_;
    const CVec i_ret = red_.y_red * v_ret;

    const double w_s = sys_.omega_syn();
    Vec xdot = Vec::Zero(n_);
    for (int m = 0; m < n_m; ++m) {
        const double speed = x(speed_index(m));
        const double p_e = (v_mach(m) * std::conj(i_ret(m))).real();
        double p_mech = pm0_(m);
        if (gov_off_[m] >= 0) p_mech += x(gov_off_[m] + gov_stages_[m] - 1);

        xdot(angle_index(m)) = w_s * speed;
        xdot(speed_index(m)) = (p_mech - p_e - damp_(m) * speed) / h2_(m);

        if (exc_idx_[m] >= 0) {
            const Complex v_t = v_mach(m) - Complex(0.0, xd_(m)) * i_ret(m);
            const double off = (vref_offset.size() > m) ? vref_offset(m) : 0.0;
            const Machine& mc = sys_.machines[m];
            xdot(exc_idx_[m]) = (mc.exciter_gain * (vref_(m) + off - std::abs(v_t)) -
                                 (x(exc_idx_[m]) - e0_(m))) /
                                mc.exciter_tc_s;
        }
        if (gov_off_[m] >= 0) {
            const auto& tc = sys_.machines[m].governor_tc_s;
            xdot(gov_off_[m]) = (-kdroop_(m) * speed - x(gov_off_[m])) / tc[0];
            for (int s = 1; s < gov_stages_[m]; ++s)
                xdot(gov_off_[m] + s) = (x(gov_off_[m] + s - 1) - x(gov_off_[m] + s)) / tc[s];
        }
    }
    for (int d = 0; d < n_d; ++d) {
        const int ip = actuator_index(d);
        xdot(ip) = (u(d) - x(ip)) / ta_(d);
    }
    return xdot;
}

Vec DynamicModel::f(const Vec& x, const Vec& u) const {
    AlgebraCache cache;
    return f(x, u, Vec::Zero(n_machines()), cache);
}

DynamicModel::Outputs DynamicModel::outputs(const Vec& x, AlgebraCache& cache) const {
    const int n_m = n_machines();
    const int n_d = n_devices();
    const int n_f = static_cast<int>(v_fixed_.size());

    CVec v_mach(n_m);
    for (int m = 0; m < n_m; ++m) {
        const double e = (exc_idx_[m] >= 0) ? x(exc_idx_[m]) : e0_(m);
        v_mach(m) = std::polar(e, x(angle_index(m)));
    }
    Vec p_dev(n_d);
    for (int d = 0; d < n_d; ++d)
        p_dev(d) = std::clamp(pref_(d) + x(actuator_index(d)), -pmax_(d), pmax_(d));

    Outputs out;
    const CVec v_dev = solve_algebra(v_mach, p_dev, cache);
    out.v_retained.resize(n_m + n_d + n_f);
    out.v_retained.head(n_m) = v_mach;
    out.v_retained.segment(n_m, n_d) = v_dev;
    out.v_retained.tail(n_f) = v_fixed_;
    const CVec i_ret = red_.y_red * out.v_retained;

    out.p_delivered_pu = p_dev - pref_;
    out.p_e_pu.resize(n_m);
    out.v_t_mag_pu.resize(n_m);
    for (int m = 0; m < n_m; ++m) {
        out.p_e_pu(m) = (v_mach(m) * std::conj(i_ret(m))).real();
        out.v_t_mag_pu(m) = std::abs(v_mach(m) - Complex(0.0, xd_(m)) * i_ret(m));
    }
    return out;
}

void DynamicModel::jacobian_at(const Vec& x, Mat& a_mat, Mat& b_mat) const {
    const int n_m = n_machines();
    const int n_d = n_devices();
    const int n_f = static_cast<int>(v_fixed_.size());
    const int n_r = n_m + n_d + n_f;

    AlgebraCache cache;
    const Outputs out = outputs(x, cache);
    const CVec& v_ret = out.v_retained;
    const CVec i_ret = red_.y_red * v_ret;

    const Mat yg = red_.y_red.real();
    const Mat yb = red_.y_red.imag();
    Vec va(n_r), vb(n_r), ic(n_r), id(n_r);
    for (int r = 0; r < n_r; ++r) {
        va(r) = v_ret(r).real();
        vb(r) = v_ret(r).imag();
        ic(r) = i_ret(r).real();
        id(r) = i_ret(r).imag();
    }

    // Parameters the network algebra depends on: machine angles, machine
    // EMFs, device injected powers.
    const int n_th = 2 * n_m + n_d;

    // Voltage-coordinate sensitivities. Machine rows are direct; device rows
    // come from implicit differentiation of the device power constraints;
    // fixed-source rows are zero.
    Mat jw = Mat::Zero(2 * n_r, n_th);
    for (int m = 0; m < n_m; ++m) {
        jw(2 * m, m) = -vb(m);
        jw(2 * m + 1, m) = va(m);
        const double e = std::abs(v_ret(m));
        jw(2 * m, n_m + m) = va(m) / e;
        jw(2 * m + 1, n_m + m) = vb(m) / e;
    }
    if (n_d > 0) {
        Mat g_dev(2 * n_d, 2 * n_d);   // constraint Jacobian wrt device coords
        Mat rhs(2 * n_d, n_th);        // constraint sensitivity to parameters
        rhs.setZero();
        Vec dp, dq;
        for (int d = 0; d < n_d; ++d) {
            const int rd = n_m + d;
            power_rows(yg, yb, va, vb, ic, id, rd, dp, dq);
            for (int l = 0; l < n_d; ++l) {
                g_dev(2 * d, 2 * l) = dp(2 * (n_m + l));
                g_dev(2 * d, 2 * l + 1) = dp(2 * (n_m + l) + 1);
                g_dev(2 * d + 1, 2 * l) = dq(2 * (n_m + l));
                g_dev(2 * d + 1, 2 * l + 1) = dq(2 * (n_m + l) + 1);
            }
            for (int m = 0; m < n_m; ++m) {
                for (int t : {m, n_m + m}) {
                    rhs(2 * d, t) = dp(2 * m) * jw(2 * m, t) + dp(2 * m + 1) * jw(2 * m + 1, t);
                    rhs(2 * d + 1, t) = dq(2 * m) * jw(2 * m, t) + dq(2 * m + 1) * jw(2 * m + 1, t);
                }
            }
            rhs(2 * d, 2 * n_m + d) -= 1.0;  // d(P(w) - P_dev)/dP_dev
        }
        const Mat sens = -Eigen::PartialPivLU<Mat>(g_dev).solve(rhs);
        jw.block(2 * n_m, 0, 2 * n_d, n_th) = sens;
    }

    // Map parameters to state columns; clamp derivative gates the actuator.
    std::vector<int> th_state(n_th, -1);
    Vec th_chain = Vec::Ones(n_th);
    for (int m = 0; m < n_m; ++m) {
        th_state[m] = angle_index(m);
        th_state[n_m + m] = exc_idx_[m];
    }
    for (int d = 0; d < n_d; ++d) {
        th_state[2 * n_m + d] = actuator_index(d);
        const double total = pref_(d) + x(actuator_index(d));
        th_chain(2 * n_m + d) = (total > pmax_(d) || total < -pmax_(d)) ? 0.0 : 1.0;
    }

    a_mat = Mat::Zero(n_, n_);
    b_mat = Mat::Zero(n_, n_d);
    const double w_s = sys_.omega_syn();
    Vec dp, dq;
    for (int m = 0; m < n_m; ++m) {
        a_mat(angle_index(m), speed_index(m)) = w_s;

        power_rows(yg, yb, va, vb, ic, id, m, dp, dq);
        const Vec dpe = jw.transpose() * dp;  // dP_e/dtheta
        const int iw = speed_index(m);
        for (int t = 0; t < n_th; ++t)
            if (th_state[t] >= 0) a_mat(iw, th_state[t]) -= dpe(t) * th_chain(t) / h2_(m);
        a_mat(iw, iw) -= damp_(m) / h2_(m);
        if (gov_off_[m] >= 0) a_mat(iw, gov_off_[m] + gov_stages_[m] - 1) += 1.0 / h2_(m);

        if (exc_idx_[m] >= 0) {
            const Complex v_t = v_ret(m) - Complex(0.0, xd_(m)) * i_ret(m);
            const double vt_mag = std::abs(v_t);
            Vec dvt = Vec::Zero(2 * n_r);
            for (int l = 0; l < n_r; ++l) {
                const double g = yg(m, l), b = yb(m, l);
                // V_t = (a_m + X d_m) + j(b_m - X c_m) with dc/da = G, dc/db = -B,
                // dd/da = B, dd/db = G.
                double d_re_a = xd_(m) * b, d_re_b = xd_(m) * g;
                double d_im_a = -xd_(m) * g, d_im_b = xd_(m) * b;
                if (l == m) {
                    d_re_a += 1.0;
                    d_im_b += 1.0;
                }
                dvt(2 * l) = (v_t.real() * d_re_a + v_t.imag() * d_im_a) / vt_mag;
                dvt(2 * l + 1) = (v_t.real() * d_re_b + v_t.imag() * d_im_b) / vt_mag;
            }
            const Vec dvtm = jw.transpose() * dvt;
            const Machine& mc = sys_.machines[m];
            const int ie = exc_idx_[m];
            for (int t = 0; t < n_th; ++t)
                if (th_state[t] >= 0)
                    a_mat(ie, th_state[t]) -= mc.exciter_gain * dvtm(t) * th_chain(t) / mc.exciter_tc_s;
            a_mat(ie, ie) -= 1.0 / mc.exciter_tc_s;
        }
        if (gov_off_[m] >= 0) {
            const auto& tc = sys_.machines[m].governor_tc_s;
            a_mat(gov_off_[m], speed_index(m)) = -kdroop_(m) / tc[0];
            a_mat(gov_off_[m], gov_off_[m]) = -1.0 / tc[0];
            for (int s = 1; s < gov_stages_[m]; ++s) {
                a_mat(gov_off_[m] + s, gov_off_[m] + s - 1) = 1.0 / tc[s];
                a_mat(gov_off_[m] + s, gov_off_[m] + s) = -1.0 / tc[s];
            }
        }
    }
    for (int d = 0; d < n_d; ++d) {
        const int ip = actuator_index(d);
        a_mat(ip, ip) = -1.0 / ta_(d);
        b_mat(ip, d) = 1.0 / ta_(d);
    }
}

void DynamicModel::jacobians(Mat& a, Mat& b) const { jacobian_at(x0_, a, b); }

void DynamicModel::refine_equilibrium() {
    const int n_m = n_machines();
    std::vector<int> exc_machines;
    for (int m = 0; m < n_m; ++m)
        if (exc_idx_[m] >= 0) exc_machines.push_back(m);
    const int n_e = static_cast<int>(exc_machines.size());
    const Vec u = Vec::Zero(n_devices());
    const Vec no_offset = Vec::Zero(n_m);

    for (int it = 0; it < 8; ++it) {
        AlgebraCache cache;
        const Vec res = f(x0_, u, no_offset, cache);
        eq_residual_ = res.lpNorm<Eigen::Infinity>();
        if (eq_residual_ < 1e-13) break;

        Mat a, b;
        jacobian_at(x0_, a, b);
        Mat jac(n_, n_ + n_m + n_e);
        jac.leftCols(n_) = a;
        jac.middleCols(n_, n_m).setZero();
        for (int m = 0; m < n_m; ++m) jac(speed_index(m), n_ + m) = 1.0 / h2_(m);
        jac.rightCols(n_e).setZero();
        for (int k = 0; k < n_e; ++k) {
            const Machine& mc = sys_.machines[exc_machines[k]];
            jac(exc_idx_[exc_machines[k]], n_ + n_m + k) = mc.exciter_gain / mc.exciter_tc_s;
        }

        // Minimum-norm Newton step; the underdetermined system absorbs the
        // power-flow residual into mechanical powers and voltage references.
        const Vec step = Eigen::CompleteOrthogonalDecomposition<Mat>(jac).solve(-res);
        if (!step.allFinite()) break;
        x0_ += step.head(n_);
        pm0_ += step.segment(n_, n_m);
        for (int k = 0; k < n_e; ++k) vref_(exc_machines[k]) += step(n_ + n_m + k);
    }
    AlgebraCache cache;
    eq_residual_ = f(x0_, u, no_offset, cache).lpNorm<Eigen::Infinity>();
}

DynamicModel DynamicModel::with_network(const ReducedNetwork& red) const {
    DynamicModel copy = *this;
    copy.red_ = red;
    return copy;
}

double DynamicModel::coi_inertia() const { return h2_.sum() / 2.0; }

Vec DynamicModel::coi_weights() const {
    Vec h = h2_ / 2.0;
    return h / h.sum();
}

}  // namespace wadc
