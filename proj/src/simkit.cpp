#include "wadc/simkit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>

#include <json.hpp>

namespace wadc {

namespace {

using json = nlohmann::ordered_json;

[[noreturn]] void schema_fail(const std::string& where, const std::string& what) {
    throw InputError("scenario schema: " + where + ": " + what);
}

void check_keys(const json& obj, const std::string& where, const std::set<std::string>& allowed) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        if (!allowed.count(it.key())) schema_fail(where, "unknown key '" + it.key() + "'");
    }
}

double get_num(const json& obj, const std::string& where, const std::string& key,
               bool required, double fallback = 0.0) {
    if (!obj.contains(key)) {
        if (required) schema_fail(where, "missing key '" + key + "'");
        return fallback;
    }
    if (!obj[key].is_number()) schema_fail(where, "key '" + key + "' must be a number");
    return obj[key].get<double>();
}

std::string get_id(const json& obj, const std::string& where, const std::string& key) {
    if (!obj.contains(key)) schema_fail(where, "missing key '" + key + "'");
    const auto& v = obj[key];
    if (v.is_string()) return v.get<std::string>();
    if (v.is_number_integer()) return std::to_string(v.get<long long>());
    schema_fail(where, "key '" + key + "' must be a string or integer id");
}

}  // namespace

Scenario load_scenario(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw InputError(std::string("scenario is not valid JSON: ") + e.what());
    }
    check_keys(doc, "top level", {"name", "duration_s", "dt_s", "disturbance", "record"});

    Scenario scn;
    if (doc.contains("name")) {
        if (!doc["name"].is_string()) schema_fail("top level", "key 'name' must be a string");
        scn.name = doc["name"].get<std::string>();
    }
    scn.duration_s = get_num(doc, "top level", "duration_s", true);
    if (!(scn.duration_s > 0.0)) schema_fail("top level", "duration_s must be positive");
    scn.dt_s = get_num(doc, "top level", "dt_s", false, 1e-3);
    if (!(scn.dt_s > 0.0 && scn.dt_s <= 0.01 + 1e-12))
        schema_fail("top level", "dt_s must lie in (0, 0.01] s");

    if (doc.contains("disturbance")) {
        const json& jd = doc["disturbance"];
        if (!jd.is_object()) schema_fail("disturbance", "must be an object");
        const std::string kind = get_id(jd, "disturbance", "kind");
        Disturbance& d = scn.disturbance;
        if (kind == "exciter_step") {
            check_keys(jd, "disturbance",
                       {"kind", "machine", "delta_vref_pu", "t_on_s", "t_off_s"});
            d.kind = DisturbanceKind::exciter_step;
            d.target = get_id(jd, "disturbance", "machine");
            d.delta_vref_pu = get_num(jd, "disturbance", "delta_vref_pu", true);
        } else if (kind == "load_step") {
            check_keys(jd, "disturbance",
                       {"kind", "bus", "delta_mw", "delta_mvar", "t_on_s", "t_off_s"});
            d.kind = DisturbanceKind::load_step;
            d.target = get_id(jd, "disturbance", "bus");
            d.delta_mw = get_num(jd, "disturbance", "delta_mw", true);
            d.delta_mvar = get_num(jd, "disturbance", "delta_mvar", false);
        } else {
            schema_fail("disturbance", "unknown kind '" + kind + "'");
        }
        d.t_on_s = get_num(jd, "disturbance", "t_on_s", false, 1.0);
        if (d.t_on_s < 0.0) schema_fail("disturbance", "t_on_s must be non-negative");
        d.t_off_s = get_num(jd, "disturbance", "t_off_s", false,
                            std::numeric_limits<double>::infinity());
        if (!(d.t_off_s > d.t_on_s)) schema_fail("disturbance", "t_off_s must exceed t_on_s");
    }

    if (doc.contains("record")) {
        const json& jr = doc["record"];
        if (!jr.is_object()) schema_fail("record", "must be an object");
        check_keys(jr, "record", {"branches"});
        if (jr.contains("branches")) {
            if (!jr["branches"].is_array()) schema_fail("record", "'branches' must be an array");
            for (const auto& jb : jr["branches"]) {
                if (!jb.is_array() || jb.size() != 2 || !jb[0].is_string() || !jb[1].is_string())
                    schema_fail("record", "each branch must be a [from, to] pair of bus ids");
                scn.record_branches.emplace_back(jb[0].get<std::string>(),
                                                 jb[1].get<std::string>());
            }
        }
    }
    return scn;
}

Scenario load_scenario_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open scenario file '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return load_scenario(buf.str());
}

int TraceSet::col(const std::string& name) const {
    for (size_t i = 0; i < names.size(); ++i)
        if (names[i] == name) return static_cast<int>(i);
    throw InputError("unknown trace channel '" + name + "'");
}

std::string trace_csv(const TraceSet& trace) {
    std::ostringstream out;
    out.precision(10);
    for (size_t i = 0; i < trace.names.size(); ++i) {
        if (i) out << ',';
        out << trace.names[i];
    }
    out << '\n';
    for (int k = 0; k < trace.data.rows(); ++k) {
        for (int c = 0; c < trace.data.cols(); ++c) {
            if (c) out << ',';
            out << trace.data(k, c);
        }
        out << '\n';
    }
    return out.str();
}

namespace {

struct LoopController {
    int device = 0;
    double gain = 0.0;
    Vec row;
};

struct BranchChannel {
    int from_bus = 0;
    int to_bus = 0;
    Complex ys, ysh;
};

TraceSet run_simulation(const SystemCase& sc, const Scenario& scn, const ControlDesign* design) {
    if (!(scn.dt_s > 0.0 && scn.dt_s <= 0.01 + 1e-12))
        throw InputError("simulation: the step must lie in (0, 0.01] s");
    if (scn.duration_s < scn.dt_s)
        throw InputError("simulation: duration shorter than one step");

    const OperatingPoint op = solve_power_flow(sc);
    const ReducedNetwork red = kron_reduce(sc, op);
    const DynamicModel base(sc, op, red);
    const int n_m = base.n_machines();
    const int n_d = base.n_devices();

    const Disturbance& dist = scn.disturbance;
    std::optional<DynamicModel> stepped;
    Vec vref_step = Vec::Zero(n_m);
    if (dist.kind == DisturbanceKind::exciter_step) {
        const int m = sc.machine_index(dist.target);
        if (sc.machines[m].exciter_tc_s <= 0.0)
            throw InputError("machine '" + dist.target + "' has no exciter to step");
        vref_step(m) = dist.delta_vref_pu;
    } else if (dist.kind == DisturbanceKind::load_step) {
        const int bi = sc.bus_index(dist.target);
        SystemCase mod = sc;
        mod.buses[static_cast<size_t>(bi)].load_mw += dist.delta_mw;
        mod.buses[static_cast<size_t>(bi)].load_mvar += dist.delta_mvar;
        // The changed load enters as a shunt converted at the undisturbed
        // solution; machine states and the equilibrium stay those of the
        // base model, so the network swap is the whole disturbance.
        stepped.emplace(base.with_network(kron_reduce(mod, op)));
    }

    std::vector<LoopController> loop;
    if (design) {
        if (!design->verified)
            throw InputError("simulation requires a verified design; run verify_decoupling");
        for (const auto& ctl : design->controllers) {
            if (ctl.composite_row.size() != base.n_states())
                throw InputError("controller for device '" + ctl.device_id +
                                 "' indexes a different state space than the simulation model");
            loop.push_back({sc.device_index(ctl.device_id), ctl.gain, ctl.composite_row});
        }
    }

    std::vector<BranchChannel> branches;
    for (const auto& [from, to] : scn.record_branches) {
        const Branch* found = nullptr;
        for (const auto& br : sc.branches)
            if ((br.from == from && br.to == to) || (br.from == to && br.to == from)) {
                found = &br;
                break;
            }
        if (!found)
            throw InputError("no branch between '" + from + "' and '" + to + "' to record");
        BranchChannel bc;
        bc.from_bus = sc.bus_index(from);
        bc.to_bus = sc.bus_index(to);
        bc.ys = 1.0 / Complex(found->r_pu, found->x_pu);
        bc.ysh = Complex(0.0, found->b_pu / 2.0);
        branches.push_back(bc);
    }

    TraceSet trace;
    trace.names.push_back("t_s");
    for (int m = 0; m < n_m; ++m) trace.names.push_back(sc.machines[m].id + ".speed_pu");
    trace.names.push_back("coi.speed_pu");
    for (int d = 0; d < n_d; ++d) {
        trace.names.push_back(sc.devices[d].id + ".dp_mw");
        trace.names.push_back(sc.devices[d].id + ".dp_cmd_mw");
        trace.names.push_back(sc.devices[d].id + ".energy_mj");
    }
    for (const auto& [from, to] : scn.record_branches)
        trace.names.push_back(from + "-" + to + ".p_mw");

    const double dt = scn.dt_s;
    const int n_steps = static_cast<int>(std::ceil(scn.duration_s / dt - 1e-9));
    trace.data = Mat::Zero(n_steps + 1, static_cast<int>(trace.names.size()));

    const Vec w_coi = base.coi_weights();
    const Vec x0 = base.x0();
    Vec x = x0;
    Vec energy = Vec::Zero(n_d);
    Vec dp_prev = Vec::Zero(n_d);
    DynamicModel::AlgebraCache cache;

    const auto command = [&](const Vec& xs) {
        Vec u = Vec::Zero(n_d);
        for (const auto& lc : loop) u(lc.device) += lc.gain * lc.row.dot(xs - x0);
        return u;
    };

    const Vec vref_zero = Vec::Zero(n_m);
    for (int k = 0; k <= n_steps; ++k) {
        const double t = k * dt;
        const bool active = dist.kind != DisturbanceKind::none && t >= dist.t_on_s - 1e-12 &&
                            t < dist.t_off_s - 1e-12;
        const DynamicModel& mdl = (active && stepped) ? *stepped : base;
        const Vec& vref = (active && dist.kind == DisturbanceKind::exciter_step) ? vref_step
                                                                                 : vref_zero;

        const Vec u = command(x);
        const DynamicModel::Outputs out = mdl.outputs(x, cache);

        int c = 0;
        trace.data(k, c++) = t;
        double coi = 0.0;
        for (int m = 0; m < n_m; ++m) {
            const double speed = x(base.speed_index(m));
            trace.data(k, c++) = speed;
            coi += w_coi(m) * speed;
        }
        trace.data(k, c++) = coi;
        for (int d = 0; d < n_d; ++d) {
            const double dp = out.p_delivered_pu(d) * sc.base_mva;
            if (k > 0) energy(d) += 0.5 * (std::abs(dp) + std::abs(dp_prev(d))) * dt;
            dp_prev(d) = dp;
            trace.data(k, c++) = dp;
            trace.data(k, c++) = u(d) * sc.base_mva;
            trace.data(k, c++) = energy(d);
        }
        if (!branches.empty()) {
            const CVec v_all = mdl.network().recovery * out.v_retained;
            for (const auto& bc : branches) {
                const Complex vf = v_all(bc.from_bus);
                const Complex vt = v_all(bc.to_bus);
                const Complex sf = vf * std::conj(bc.ys * (vf - vt) + bc.ysh * vf);
                trace.data(k, c++) = sf.real() * sc.base_mva;
            }
        }
        if (k == n_steps) break;

        // Classic RK4; the disturbance state is frozen over the step.
        const Vec k1 = mdl.f(x, u, vref, cache);
        const Vec x2 = x + 0.5 * dt * k1;
        const Vec k2 = mdl.f(x2, command(x2), vref, cache);
        const Vec x3 = x + 0.5 * dt * k2;
        const Vec k3 = mdl.f(x3, command(x3), vref, cache);
        const Vec x4 = x + dt * k3;
        const Vec k4 = mdl.f(x4, command(x4), vref, cache);
        x += (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);

        if (!x.allFinite()) {
            std::ostringstream msg;
            msg.precision(4);
            msg << "simulation diverged: non-finite state at t=" << t + dt << " s";
            throw NumericsError(msg.str());
        }
        for (int m = 0; m < n_m; ++m)
            if (std::abs(x(base.speed_index(m))) > 0.2) {
                std::ostringstream msg;
                msg.precision(4);
                msg << "simulation diverged: rotor speed of '" << sc.machines[m].id
                    << "' beyond 0.2 p.u. at t=" << t + dt << " s";
                throw NumericsError(msg.str());
            }
    }
    return trace;
}

}  // namespace

TraceSet simulate(const SystemCase& sc, const Scenario& scn) {
    return run_simulation(sc, scn, nullptr);
}

TraceSet simulate(const SystemCase& sc, const Scenario& scn, const ControlDesign& design) {
    return run_simulation(sc, scn, &design);
}

namespace {

/// Zero-phase band-pass around f0: one biquad applied forward and
/// backward over odd-reflection padding.
Vec bandpass_zero_phase(const Vec& y, double f0_hz, double dt) {
    const double w0 = 2.0 * kPi * f0_hz * dt;
    if (w0 >= kPi) throw InputError("damping estimate: guess frequency above the Nyquist rate");
    const double q = 1.25;  // -3 dB bandwidth 0.8 f0: +-40% about the guess
    const double alpha = std::sin(w0) / (2.0 * q);
    const double a0 = 1.0 + alpha;
    const double b0 = alpha / a0;
    const double b2 = -alpha / a0;
    const double a1 = -2.0 * std::cos(w0) / a0;
    const double a2 = (1.0 - alpha) / a0;

    const int n = static_cast<int>(y.size());
    const int pad = std::min(n - 1, static_cast<int>(std::lround(2.0 / (f0_hz * dt))));
    Vec z(n + 2 * pad);
    for (int i = 0; i < pad; ++i) z(i) = 2.0 * y(0) - y(pad - i);
    z.segment(pad, n) = y;
    for (int i = 0; i < pad; ++i) z(pad + n + i) = 2.0 * y(n - 1) - y(n - 2 - i);

    const auto pass = [&](Vec& v) {
        double x1 = 0.0, x2 = 0.0, y1 = 0.0, y2 = 0.0;
        for (int i = 0; i < v.size(); ++i) {
            const double xi = v(i);
            const double yi = b0 * xi + b2 * x2 - a1 * y1 - a2 * y2;
            x2 = x1;
            x1 = xi;
            y2 = y1;
            y1 = yi;
            v(i) = yi;
        }
    };
    pass(z);
    z.reverseInPlace();
    pass(z);
    z.reverseInPlace();
    return z.segment(pad, n);
}

}  // namespace

DampingEstimate estimate_damping(const Vec& t_s, const Vec& y, double f_guess_hz) {
    const int n = static_cast<int>(t_s.size());
    if (n != y.size()) throw InputError("damping estimate: time and signal lengths differ");
    if (n < 32) throw InputError("damping estimate: too few samples");
    if (!(f_guess_hz > 0.0)) throw InputError("damping estimate: the guess must be positive");
    const double dt = (t_s(n - 1) - t_s(0)) / (n - 1);
    if (!(dt > 0.0)) throw InputError("damping estimate: time must increase");
    for (int i = 1; i < n; ++i)
        if (std::abs(t_s(i) - t_s(i - 1) - dt) > 1e-6 * dt)
            throw InputError("damping estimate: the signal must be uniformly sampled");
    if ((t_s(n - 1) - t_s(0)) * f_guess_hz < 3.0)
        throw InputError("damping estimate: window holds fewer than three guess periods");

    Vec z = y.array() - y.mean();
    z = bandpass_zero_phase(z, f_guess_hz, dt);

    // One period trimmed per side against filter edge effects.
    const int skip = std::min(n / 4, static_cast<int>(std::lround(1.0 / (f_guess_hz * dt))));
    const int m = n - 2 * skip;
    Vec tau(m), w(m);
    for (int i = 0; i < m; ++i) {
        tau(i) = t_s(skip + i) - t_s(skip);
        w(i) = z(skip + i);
    }
    const double w_norm = w.norm();
    if (!(w_norm > 0.0))
        throw NumericsError("damping estimate: no oscillation near the guess frequency");

    // Starting point: zero crossings for the frequency, a log-envelope
    // line through the peaks for the decay.
    const double omega_g = 2.0 * kPi * f_guess_hz;
    double omega = omega_g;
    int crossings = 0;
    for (int i = 1; i < m; ++i)
        if ((w(i - 1) < 0.0 && w(i) >= 0.0) || (w(i - 1) > 0.0 && w(i) <= 0.0)) ++crossings;
    if (crossings >= 4) {
        const double omega_c = kPi * crossings / (tau(m - 1) - tau(0));
        if (omega_c > 0.5 * omega_g && omega_c < 2.0 * omega_g) omega = omega_c;
    }
    double sigma = 0.0;
    {
        const double w_max = w.cwiseAbs().maxCoeff();
        double s_t = 0.0, s_l = 0.0, s_tt = 0.0, s_tl = 0.0;
        int np = 0;
        for (int i = 1; i + 1 < m; ++i) {
            const double a = std::abs(w(i));
            if (a >= std::abs(w(i - 1)) && a >= std::abs(w(i + 1)) && a > 1e-3 * w_max) {
                const double l = std::log(a);
                s_t += tau(i);
                s_l += l;
                s_tt += tau(i) * tau(i);
                s_tl += tau(i) * l;
                ++np;
            }
        }
        const double det = np * s_tt - s_t * s_t;
        if (np >= 4 && std::abs(det) > 0.0) sigma = (np * s_tl - s_t * s_l) / det;
    }
    const double tau_max = tau(m - 1);
    const double sigma_cap = std::min(10.0 * omega_g, 40.0 / tau_max);
    sigma = std::clamp(sigma, -sigma_cap, sigma_cap);

    // Variable projection: the amplitude pair is solved linearly at every
    // (sigma, omega) iterate, Levenberg-Marquardt moves the two nonlinear
    // parameters.
    Vec c(2), resid(m);
    const auto misfit = [&](double sg, double om, Vec& coef, Vec& r) {
        Mat phi(m, 2);
        for (int i = 0; i < m; ++i) {
            const double e = std::exp(sg * tau(i));
            phi(i, 0) = e * std::cos(om * tau(i));
            phi(i, 1) = e * std::sin(om * tau(i));
        }
        coef = phi.colPivHouseholderQr().solve(w);
        r = w - phi * coef;
        return r.norm();
    };
    double best = misfit(sigma, omega, c, resid);
    double lm = 1e-3;
    for (int it = 0; it < 100; ++it) {
        Mat jac(m, 2);
        for (int i = 0; i < m; ++i) {
            const double e = std::exp(sigma * tau(i));
            const double cs = e * std::cos(omega * tau(i));
            const double sn = e * std::sin(omega * tau(i));
            jac(i, 0) = -tau(i) * (c(0) * cs + c(1) * sn);
            jac(i, 1) = -tau(i) * (c(1) * cs - c(0) * sn);
        }
        const Mat jtj = jac.transpose() * jac;
        const Vec jtr = jac.transpose() * resid;
        bool moved = false;
        for (int tries = 0; tries < 12; ++tries) {
            Mat lhs = jtj;
            lhs(0, 0) += lm * jtj(0, 0);
            lhs(1, 1) += lm * jtj(1, 1);
            const Vec step = lhs.ldlt().solve(-jtr);
            const double sg = std::clamp(sigma + step(0), -sigma_cap, sigma_cap);
            const double om = std::clamp(omega + step(1), 0.3 * omega_g, 3.0 * omega_g);
            Vec c_try(2), r_try(m);
            const double f_try = misfit(sg, om, c_try, r_try);
            if (f_try < best) {
                const bool done = std::abs(sg - sigma) + std::abs(om - omega) <
                                  1e-12 * (1.0 + std::abs(sigma) + std::abs(omega));
                sigma = sg;
                omega = om;
                c = c_try;
                resid = r_try;
                best = f_try;
                lm = std::max(lm * 0.3, 1e-12);
                moved = true;
                if (done) it = 100;
                break;
            }
            lm *= 10.0;
        }
        if (!moved) break;
    }

    DampingEstimate est;
    est.residual = best / w_norm;
    if (est.residual > 0.20) {
        std::ostringstream msg;
        msg.precision(3);
        msg << "damping estimate: single-mode fit residual " << est.residual << " exceeds 0.20 near "
            << f_guess_hz << " Hz";
        throw NumericsError(msg.str());
    }
    est.sigma = sigma;
    est.frequency_hz = omega / (2.0 * kPi);
    est.zeta = -sigma / std::hypot(sigma, omega);
    est.amplitude = std::hypot(c(0), c(1));
    est.phase_rad = std::atan2(-c(1), c(0));
    return est;
}

ResponseMetrics response_metrics(const TraceSet& trace) {
    const int n = trace.n_samples();
    if (n < 2) throw InputError("response metrics: need at least two samples");
    const Vec t = trace.time();
    const double dt = (t(n - 1) - t(0)) / (n - 1);

    ResponseMetrics mt;
    const Vec coi = trace.channel("coi.speed_pu");
    mt.coi_peak_pu = coi.cwiseAbs().maxCoeff();
    double acc = 0.0;
    for (int i = 1; i < n; ++i) acc += 0.5 * (coi(i) * coi(i) + coi(i - 1) * coi(i - 1)) * dt;
    mt.coi_l2 = std::sqrt(acc);

    const std::string suffix = ".dp_mw";
    for (const auto& name : trace.names) {
        if (name.size() <= suffix.size() ||
            name.compare(name.size() - suffix.size(), suffix.size(), suffix) != 0)
            continue;
        DeviceResponse dev;
        dev.device = name.substr(0, name.size() - suffix.size());
        const Vec dp = trace.channel(name);
        int at = 0;
        dev.peak_mw = dp.cwiseAbs().maxCoeff(&at);
        dev.t_peak_s = t(at);
        const int tail = std::max(1, n / 10);
        dev.bias_mw = dp.tail(tail).mean();
        dev.energy_mj = trace.channel(dev.device + ".energy_mj")(n - 1);
        mt.devices.push_back(std::move(dev));
    }

    const int nd = static_cast<int>(mt.devices.size());
    mt.peak_ratio = Mat::Zero(nd, nd);
    for (int i = 0; i < nd; ++i)
        for (int j = 0; j < nd; ++j)
            mt.peak_ratio(i, j) = mt.devices[static_cast<size_t>(i)].peak_mw /
                                  mt.devices[static_cast<size_t>(j)].peak_mw;
    return mt;
}

std::string metrics_json(const ResponseMetrics& metrics) {
    json doc;
    doc["devices"] = json::array();
    for (const auto& dev : metrics.devices) {
        json jd;
        jd["device"] = dev.device;
        jd["peak_mw"] = dev.peak_mw;
        jd["t_peak_s"] = dev.t_peak_s;
        jd["bias_mw"] = dev.bias_mw;
        jd["energy_mj"] = dev.energy_mj;
        doc["devices"].push_back(std::move(jd));
    }
    doc["coi"] = {{"peak_pu", metrics.coi_peak_pu}, {"l2", metrics.coi_l2}};
    doc["peak_ratio"] = json::array();
    for (int i = 0; i < metrics.peak_ratio.rows(); ++i) {
        json row = json::array();
        for (int j = 0; j < metrics.peak_ratio.cols(); ++j) row.push_back(metrics.peak_ratio(i, j));
        doc["peak_ratio"].push_back(std::move(row));
    }
    return doc.dump(2) + "\n";
}

}  // namespace wadc
