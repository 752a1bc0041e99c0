#include "wadc/sysmodel.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace wadc {

namespace {

using json = nlohmann::ordered_json;

[[noreturn]] void schema_fail(const std::string& where, const std::string& what) {
    throw InputError("case schema: " + where + ": " + what);
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

const json& get_array(const json& obj, const std::string& key) {
    if (!obj.contains(key)) schema_fail("top level", "missing key '" + key + "'");
    if (!obj[key].is_array()) schema_fail("top level", "key '" + key + "' must be an array");
    return obj[key];
}

}  // namespace

int SystemCase::bus_index(const std::string& id) const {
    for (size_t i = 0; i < buses.size(); ++i)
        if (buses[i].id == id) return static_cast<int>(i);
    throw InputError("unknown bus id '" + id + "'");
}

int SystemCase::machine_index(const std::string& id) const {
    for (size_t i = 0; i < machines.size(); ++i)
        if (machines[i].id == id) return static_cast<int>(i);
    throw InputError("unknown machine id '" + id + "'");
}

int SystemCase::device_index(const std::string& id) const {
    for (size_t i = 0; i < devices.size(); ++i)
        if (devices[i].id == id) return static_cast<int>(i);
    throw InputError("unknown device id '" + id + "'");
}

double SystemCase::machine_h_sys(int m) const {
    return machines[m].inertia_h_s * machines[m].rated_mva / base_mva;
}
double SystemCase::machine_damping_sys(int m) const {
    return machines[m].damping_pu * machines[m].rated_mva / base_mva;
}
double SystemCase::machine_xd_sys(int m) const {
    return machines[m].xd_transient_pu * base_mva / machines[m].rated_mva;
}
double SystemCase::machine_droop_gain_sys(int m) const {
    if (machines[m].droop_pu <= 0.0) return 0.0;
    return (machines[m].rated_mva / base_mva) / machines[m].droop_pu;
}
double SystemCase::device_p_ref_pu(int d) const { return devices[d].p_ref_mw / base_mva; }
double SystemCase::device_p_max_pu(int d) const { return devices[d].p_max_mw / base_mva; }

SystemCase load_case(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw InputError(std::string("case schema: not valid JSON: ") + e.what());
    }
    if (!doc.is_object()) schema_fail("top level", "document must be an object");
    check_keys(doc, "top level", {"base_mva", "freq_hz", "buses", "branches", "machines", "devices"});

    SystemCase sc;
    sc.base_mva = get_num(doc, "top level", "base_mva", true);
    sc.freq_hz = get_num(doc, "top level", "freq_hz", true);
    if (sc.base_mva <= 0.0) schema_fail("top level", "'base_mva' must be positive");
    if (sc.freq_hz <= 0.0) schema_fail("top level", "'freq_hz' must be positive");

    for (const auto& jb : get_array(doc, "buses")) {
        const std::string where = "bus[" + std::to_string(sc.buses.size()) + "]";
        check_keys(jb, where, {"id", "type", "v_setpoint_pu", "load_mw", "load_mvar", "gen_mw"});
        Bus b;
        b.id = get_id(jb, where, "id");
        if (!jb.contains("type") || !jb["type"].is_string()) schema_fail(where, "missing or non-string key 'type'");
        const std::string t = jb["type"].get<std::string>();
        if (t == "slack") b.type = BusType::Slack;
        else if (t == "PV") b.type = BusType::PV;
        else if (t == "PQ") b.type = BusType::PQ;
        else schema_fail(where, "key 'type' must be one of slack/PV/PQ, got '" + t + "'");
        b.v_setpoint_pu = get_num(jb, where, "v_setpoint_pu", false, 1.0);
        b.load_mw = get_num(jb, where, "load_mw", false);
        b.load_mvar = get_num(jb, where, "load_mvar", false);
        b.gen_mw = get_num(jb, where, "gen_mw", false);
        if (b.v_setpoint_pu <= 0.0) schema_fail(where, "'v_setpoint_pu' must be positive");
        sc.buses.push_back(std::move(b));
    }

    std::set<std::string> seen;
    for (const auto& b : sc.buses)
        if (!seen.insert(b.id).second) throw InputError("duplicate bus id '" + b.id + "'");
    int n_slack = 0;
    for (const auto& b : sc.buses) n_slack += (b.type == BusType::Slack) ? 1 : 0;
    if (n_slack != 1)
        throw InputError("case must contain exactly one slack bus, found " + std::to_string(n_slack));

    auto require_bus = [&sc](const std::string& id, const std::string& where) {
        for (const auto& b : sc.buses)
            if (b.id == id) return;
        throw InputError(where + ": reference to unknown bus '" + id + "'");
    };

    for (const auto& jr : get_array(doc, "branches")) {
        const std::string where = "branch[" + std::to_string(sc.branches.size()) + "]";
        check_keys(jr, where, {"from", "to", "r_pu", "x_pu", "b_pu"});
        Branch br;
        br.from = get_id(jr, where, "from");
        br.to = get_id(jr, where, "to");
        br.r_pu = get_num(jr, where, "r_pu", false);
        br.x_pu = get_num(jr, where, "x_pu", true);
        br.b_pu = get_num(jr, where, "b_pu", false);
        require_bus(br.from, where);
        require_bus(br.to, where);
        if (br.from == br.to) schema_fail(where, "'from' and 'to' must differ");
        if (br.r_pu == 0.0 && br.x_pu == 0.0) schema_fail(where, "zero series impedance");
        sc.branches.push_back(std::move(br));
    }

    std::set<std::string> mach_ids, mach_buses;
    for (const auto& jm : get_array(doc, "machines")) {
        const std::string where = "machine[" + std::to_string(sc.machines.size()) + "]";
        check_keys(jm, where, {"id", "bus", "rated_mva", "inertia_h_s", "damping_pu",
                               "xd_transient_pu", "exciter_gain", "exciter_tc_s",
                               "droop_pu", "governor_tc_s"});
        Machine m;
        m.id = get_id(jm, where, "id");
        m.bus = get_id(jm, where, "bus");
        require_bus(m.bus, where);
        m.rated_mva = get_num(jm, where, "rated_mva", true);
        m.inertia_h_s = get_num(jm, where, "inertia_h_s", true);
        m.damping_pu = get_num(jm, where, "damping_pu", false);
        m.xd_transient_pu = get_num(jm, where, "xd_transient_pu", true);
        m.exciter_gain = get_num(jm, where, "exciter_gain", false);
        m.exciter_tc_s = get_num(jm, where, "exciter_tc_s", false);
        m.droop_pu = get_num(jm, where, "droop_pu", false);
        if (jm.contains("governor_tc_s")) {
            if (!jm["governor_tc_s"].is_array()) schema_fail(where, "'governor_tc_s' must be an array");
            for (const auto& t : jm["governor_tc_s"]) {
                if (!t.is_number()) schema_fail(where, "'governor_tc_s' entries must be numbers");
                m.governor_tc_s.push_back(t.get<double>());
            }
        }
        if (m.rated_mva <= 0.0) schema_fail(where, "'rated_mva' must be positive");
        if (m.inertia_h_s <= 0.0) schema_fail(where, "'inertia_h_s' must be positive");
        if (m.xd_transient_pu <= 0.0) schema_fail(where, "'xd_transient_pu' must be positive");
        if (m.exciter_tc_s < 0.0) schema_fail(where, "'exciter_tc_s' must be non-negative");
        if (m.exciter_tc_s > 0.0 && m.exciter_gain <= 0.0)
            schema_fail(where, "'exciter_gain' must be positive when the exciter is enabled");
        if (m.governor_tc_s.size() > 3) schema_fail(where, "'governor_tc_s' supports at most 3 stages");
        for (double t : m.governor_tc_s)
            if (t <= 0.0) schema_fail(where, "'governor_tc_s' entries must be positive");
        if (!m.governor_tc_s.empty() && m.droop_pu <= 0.0)
            schema_fail(where, "'droop_pu' must be positive when the governor is enabled");
        if (!mach_ids.insert(m.id).second) throw InputError("duplicate machine id '" + m.id + "'");
        if (!mach_buses.insert(m.bus).second)
            throw InputError("machines '" + m.id + "' and another share bus '" + m.bus + "'");
        sc.machines.push_back(std::move(m));
    }

    std::set<std::string> dev_ids, dev_buses;
    for (const auto& jd : get_array(doc, "devices")) {
        const std::string where = "device[" + std::to_string(sc.devices.size()) + "]";
        check_keys(jd, where, {"id", "bus", "p_ref_mw", "p_max_mw", "lag_tc_s"});
        Device d;
        d.id = get_id(jd, where, "id");
        d.bus = get_id(jd, where, "bus");
        require_bus(d.bus, where);
        d.p_ref_mw = get_num(jd, where, "p_ref_mw", true);
        d.p_max_mw = get_num(jd, where, "p_max_mw", true);
        d.lag_tc_s = get_num(jd, where, "lag_tc_s", true);
        if (d.lag_tc_s <= 0.0) schema_fail(where, "'lag_tc_s' must be positive");
        if (d.p_max_mw < d.p_ref_mw) schema_fail(where, "'p_max_mw' must be >= 'p_ref_mw'");
        if (!dev_ids.insert(d.id).second) throw InputError("duplicate device id '" + d.id + "'");
        if (!dev_buses.insert(d.bus).second)
            throw InputError("devices share bus '" + d.bus + "'");
        sc.devices.push_back(std::move(d));
    }

    // Generation model: power sources are machines, except that a slack bus
    // without a machine acts as a fixed voltage source (infinite bus).
    for (const auto& b : sc.buses) {
        if (mach_buses.count(b.id)) continue;
        if (b.type == BusType::PV)
            throw InputError("PV bus '" + b.id + "' has no machine");
        if (b.type == BusType::PQ && b.gen_mw != 0.0)
            throw InputError("bus '" + b.id + "' has gen_mw but no machine");
        if (b.type == BusType::Slack && dev_buses.count(b.id))
            throw InputError("device at machineless slack bus '" + b.id + "'");
    }
    return sc;
}

SystemCase load_case_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open case file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return load_case(ss.str());
}

std::string serialize_case(const SystemCase& sc) {
    json doc;
    doc["base_mva"] = sc.base_mva;
    doc["freq_hz"] = sc.freq_hz;
    doc["buses"] = json::array();
    for (const auto& b : sc.buses) {
        json jb;
        jb["id"] = b.id;
        jb["type"] = (b.type == BusType::Slack) ? "slack" : (b.type == BusType::PV) ? "PV" : "PQ";
        jb["v_setpoint_pu"] = b.v_setpoint_pu;
        jb["load_mw"] = b.load_mw;
        jb["load_mvar"] = b.load_mvar;
        jb["gen_mw"] = b.gen_mw;
        doc["buses"].push_back(std::move(jb));
    }
    doc["branches"] = json::array();
    for (const auto& br : sc.branches) {
        json jr;
        jr["from"] = br.from;
        jr["to"] = br.to;
        jr["r_pu"] = br.r_pu;
        jr["x_pu"] = br.x_pu;
        jr["b_pu"] = br.b_pu;
        doc["branches"].push_back(std::move(jr));
    }
    doc["machines"] = json::array();
    for (const auto& m : sc.machines) {
        json jm;
        jm["id"] = m.id;
        jm["bus"] = m.bus;
        jm["rated_mva"] = m.rated_mva;
        jm["inertia_h_s"] = m.inertia_h_s;
        jm["damping_pu"] = m.damping_pu;
        jm["xd_transient_pu"] = m.xd_transient_pu;
        jm["exciter_gain"] = m.exciter_gain;
        jm["exciter_tc_s"] = m.exciter_tc_s;
        jm["droop_pu"] = m.droop_pu;
        jm["governor_tc_s"] = m.governor_tc_s;
        doc["machines"].push_back(std::move(jm));
    }
    doc["devices"] = json::array();
    for (const auto& d : sc.devices) {
        json jd;
        jd["id"] = d.id;
        jd["bus"] = d.bus;
        jd["p_ref_mw"] = d.p_ref_mw;
        jd["p_max_mw"] = d.p_max_mw;
        jd["lag_tc_s"] = d.lag_tc_s;
        doc["devices"].push_back(std::move(jd));
    }
    return doc.dump(2) + "\n";
}

CMat build_ybus(const SystemCase& sc) {
    const int n = static_cast<int>(sc.buses.size());
    CMat y = CMat::Zero(n, n);
    for (const auto& br : sc.branches) {
        const int f = sc.bus_index(br.from);
        const int t = sc.bus_index(br.to);
        const Complex ys = 1.0 / Complex(br.r_pu, br.x_pu);
        const Complex ysh(0.0, br.b_pu / 2.0);
        y(f, f) += ys + ysh;
        y(t, t) += ys + ysh;
        y(f, t) -= ys;
        y(t, f) -= ys;
    }
    return y;
}

OperatingPoint solve_power_flow(const SystemCase& sc, const PowerFlowOptions& opts) {
    const int n = static_cast<int>(sc.buses.size());
    const CMat Y = build_ybus(sc);
    const Mat G = Y.real(), B = Y.imag();

    // Scheduled net injections on the system base; device operating points
    // inject at their buses at unity power factor.
    Vec p_spec = Vec::Zero(n), q_spec = Vec::Zero(n);
    for (int i = 0; i < n; ++i) {
        p_spec(i) = (sc.buses[i].gen_mw - sc.buses[i].load_mw) / sc.base_mva;
        q_spec(i) = -sc.buses[i].load_mvar / sc.base_mva;
    }
    for (size_t d = 0; d < sc.devices.size(); ++d)
        p_spec(sc.bus_index(sc.devices[d].bus)) += sc.device_p_ref_pu(static_cast<int>(d));

    int slack = -1;
    std::vector<int> p_rows, q_rows;  // buses with P equations / Q equations
    for (int i = 0; i < n; ++i) {
        if (sc.buses[i].type == BusType::Slack) slack = i;
        else p_rows.push_back(i);
        if (sc.buses[i].type == BusType::PQ) q_rows.push_back(i);
    }

    Vec vm(n), va = Vec::Zero(n);
    for (int i = 0; i < n; ++i)
        vm(i) = (sc.buses[i].type == BusType::PQ) ? 1.0 : sc.buses[i].v_setpoint_pu;

    auto injections = [&](const Vec& vmag, const Vec& vang, Vec& p, Vec& q) {
        p.setZero(n);
        q.setZero(n);
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) {
                if (G(i, j) == 0.0 && B(i, j) == 0.0) continue;
                const double th = vang(i) - vang(j);
                const double c = std::cos(th), s = std::sin(th);
                p(i) += vmag(i) * vmag(j) * (G(i, j) * c + B(i, j) * s);
                q(i) += vmag(i) * vmag(j) * (G(i, j) * s - B(i, j) * c);
            }
        }
    };

    auto mismatch_norm = [&](const Vec& vmag, const Vec& vang) {
        Vec p, q;
        injections(vmag, vang, p, q);
        double norm = 0.0;
        for (int i : p_rows) norm = std::max(norm, std::abs(p_spec(i) - p(i)));
        for (int i : q_rows) norm = std::max(norm, std::abs(q_spec(i) - q(i)));
        return norm;
    };

    OperatingPoint op;
    const int n_p = static_cast<int>(p_rows.size());
    const int n_q = static_cast<int>(q_rows.size());
    const int n_eq = n_p + n_q;

    double norm = mismatch_norm(vm, va);
    op.mismatch_history.push_back(norm);

    int it = 0;
    for (; it < opts.max_iterations && norm >= opts.tol_pu; ++it) {
        Vec p, q;
        injections(vm, va, p, q);

        Vec f(n_eq);
        for (int a = 0; a < n_p; ++a) f(a) = p_spec(p_rows[a]) - p(p_rows[a]);
        for (int a = 0; a < n_q; ++a) f(n_p + a) = q_spec(q_rows[a]) - q(q_rows[a]);

        Mat J(n_eq, n_eq);
        for (int a = 0; a < n_p; ++a) {
            const int i = p_rows[a];
            for (int b = 0; b < n_p; ++b) {
                const int j = p_rows[b];
                if (i == j) J(a, b) = -q(i) - B(i, i) * vm(i) * vm(i);
                else {
                    const double th = va(i) - va(j);
                    J(a, b) = vm(i) * vm(j) * (G(i, j) * std::sin(th) - B(i, j) * std::cos(th));
                }
            }
            for (int b = 0; b < n_q; ++b) {
                const int j = q_rows[b];
                if (i == j) J(a, n_p + b) = p(i) / vm(i) + G(i, i) * vm(i);
                else {
                    const double th = va(i) - va(j);
                    J(a, n_p + b) = vm(i) * (G(i, j) * std::cos(th) + B(i, j) * std::sin(th));
                }
            }
        }
        for (int a = 0; a < n_q; ++a) {
            const int i = q_rows[a];
            for (int b = 0; b < n_p; ++b) {
                const int j = p_rows[b];
                if (i == j) J(n_p + a, b) = p(i) - G(i, i) * vm(i) * vm(i);
                else {
                    const double th = va(i) - va(j);
                    J(n_p + a, b) = -vm(i) * vm(j) * (G(i, j) * std::cos(th) + B(i, j) * std::sin(th));
                }
            }
            for (int b = 0; b < n_q; ++b) {
                const int j = q_rows[b];
                if (i == j) J(n_p + a, n_p + b) = q(i) / vm(i) - B(i, i) * vm(i);
                else {
                    const double th = va(i) - va(j);
                    J(n_p + a, n_p + b) = vm(i) * (G(i, j) * std::sin(th) - B(i, j) * std::cos(th));
                }
            }
        }

        Eigen::PartialPivLU<Mat> lu(J);
        Vec dx = lu.solve(f);
        if (!dx.allFinite())
            throw PowerFlowError("power flow: singular Jacobian (isolated bus or degenerate case)");

        // Backtrack until the mismatch decreases; stagnation counts as divergence.
        double alpha = 1.0;
        bool accepted = false;
        for (int ls = 0; ls < 6; ++ls, alpha *= 0.5) {
            Vec va_try = va, vm_try = vm;
            for (int a = 0; a < n_p; ++a) va_try(p_rows[a]) += alpha * dx(a);
            for (int a = 0; a < n_q; ++a) vm_try(q_rows[a]) += alpha * dx(n_p + a);
            if (vm_try.minCoeff() <= 0.0) continue;
            const double norm_try = mismatch_norm(vm_try, va_try);
            if (norm_try < norm) {
                va = va_try;
                vm = vm_try;
                norm = norm_try;
                accepted = true;
                break;
            }
        }
        if (!accepted)
            throw PowerFlowError("power flow: Newton stagnated at mismatch " + std::to_string(norm));
        op.mismatch_history.push_back(norm);
    }
    if (norm >= opts.tol_pu)
        throw PowerFlowError("power flow: no convergence after " + std::to_string(it) +
                             " iterations, mismatch " + std::to_string(norm));

    op.iterations = it;
    op.max_mismatch_pu = norm;

    // Angles referenced to the slack bus.
    const double a0 = va(slack);
    for (int i = 0; i < n; ++i) va(i) -= a0;

    op.v_bus.resize(n);
    for (int i = 0; i < n; ++i) op.v_bus(i) = std::polar(vm(i), va(i));

    CVec i_inj = Y * op.v_bus;
    op.p_inj_pu.resize(n);
    op.q_inj_pu.resize(n);
    for (int i = 0; i < n; ++i) {
        const Complex s = op.v_bus(i) * std::conj(i_inj(i));
        op.p_inj_pu(i) = s.real();
        op.q_inj_pu(i) = s.imag();
    }

    op.flows.resize(sc.branches.size());
    for (size_t k = 0; k < sc.branches.size(); ++k) {
        const auto& br = sc.branches[k];
        const int f = sc.bus_index(br.from), t = sc.bus_index(br.to);
        const Complex ys = 1.0 / Complex(br.r_pu, br.x_pu);
        const Complex ysh(0.0, br.b_pu / 2.0);
        const Complex sf = op.v_bus(f) * std::conj(ys * (op.v_bus(f) - op.v_bus(t)) + ysh * op.v_bus(f));
        const Complex st = op.v_bus(t) * std::conj(ys * (op.v_bus(t) - op.v_bus(f)) + ysh * op.v_bus(t));
        op.flows[k] = {sf.real() * sc.base_mva, sf.imag() * sc.base_mva,
                       st.real() * sc.base_mva, st.imag() * sc.base_mva};
    }

    // Machine initial conditions: everything injected at the machine's bus
    // that is not load and not a device belongs to the machine.
    const int n_m = static_cast<int>(sc.machines.size());
    op.mach_emf_pu.resize(n_m);
    op.mach_angle_rad.resize(n_m);
    op.mach_p_gen_pu.resize(n_m);
    op.mach_q_gen_pu.resize(n_m);
    for (int m = 0; m < n_m; ++m) {
        const int k = sc.bus_index(sc.machines[m].bus);
        Complex s_mach(op.p_inj_pu(k) + sc.buses[k].load_mw / sc.base_mva,
                       op.q_inj_pu(k) + sc.buses[k].load_mvar / sc.base_mva);
        for (size_t d = 0; d < sc.devices.size(); ++d)
            if (sc.bus_index(sc.devices[d].bus) == k)
                s_mach -= Complex(sc.device_p_ref_pu(static_cast<int>(d)), 0.0);
        const Complex v = op.v_bus(k);
        const Complex i_gen = std::conj(s_mach / v);
        const Complex e = v + Complex(0.0, sc.machine_xd_sys(m)) * i_gen;
        op.mach_emf_pu(m) = std::abs(e);
        op.mach_angle_rad(m) = std::arg(e);
        op.mach_p_gen_pu(m) = s_mach.real();
        op.mach_q_gen_pu(m) = s_mach.imag();
    }
    return op;
}

ReducedNetwork kron_reduce(const SystemCase& sc, const OperatingPoint& op) {
    const int n_b = static_cast<int>(sc.buses.size());
    const int n_m = static_cast<int>(sc.machines.size());
    const int n_d = static_cast<int>(sc.devices.size());
    const int n_aug = n_b + n_m;

    CMat y = CMat::Zero(n_aug, n_aug);
    y.topLeftCorner(n_b, n_b) = build_ybus(sc);

    // Loads as constant impedances converted at the solved voltage.
    for (int i = 0; i < n_b; ++i) {
        const Complex s_load(sc.buses[i].load_mw / sc.base_mva, sc.buses[i].load_mvar / sc.base_mva);
        if (s_load == Complex(0.0, 0.0)) continue;
        const double v2 = std::norm(op.v_bus(i));
        y(i, i) += std::conj(s_load) / v2;
    }

    // Machine internal nodes behind the transient reactance.
    for (int m = 0; m < n_m; ++m) {
        const int k = sc.bus_index(sc.machines[m].bus);
        const int g = n_b + m;
        const Complex ym = 1.0 / Complex(0.0, sc.machine_xd_sys(m));
        y(k, k) += ym;
        y(g, g) += ym;
        y(k, g) -= ym;
        y(g, k) -= ym;
    }

    ReducedNetwork red;
    red.y_aug = y;
    red.n_machine = n_m;
    red.n_device = n_d;
    for (int m = 0; m < n_m; ++m) {
        red.retained.push_back(n_b + m);
        red.node_names.push_back(sc.machines[m].id);
    }
    for (int d = 0; d < n_d; ++d) {
        const int k = sc.bus_index(sc.devices[d].bus);
        red.device_bus.push_back(k);
        red.retained.push_back(k);
        red.node_names.push_back(sc.devices[d].bus);
    }
    for (int i = 0; i < n_b; ++i) {
        if (sc.buses[i].type != BusType::Slack) continue;
        bool has_machine = false;
        for (const auto& m : sc.machines) has_machine |= (sc.bus_index(m.bus) == i);
        if (has_machine) continue;
        red.fixed_bus.push_back(i);
        red.retained.push_back(i);
        red.node_names.push_back(sc.buses[i].id);
    }

    std::vector<bool> keep(n_aug, false);
    for (int r : red.retained) keep[r] = true;
    std::vector<int> elim;
    for (int i = 0; i < n_aug; ++i)
        if (!keep[i]) elim.push_back(i);

    const int n_r = static_cast<int>(red.retained.size());
    const int n_e = static_cast<int>(elim.size());

    CMat y_rr(n_r, n_r), y_re(n_r, n_e), y_er(n_e, n_r), y_ee(n_e, n_e);
    for (int a = 0; a < n_r; ++a)
        for (int b = 0; b < n_r; ++b) y_rr(a, b) = y(red.retained[a], red.retained[b]);
    for (int a = 0; a < n_r; ++a)
        for (int b = 0; b < n_e; ++b) y_re(a, b) = y(red.retained[a], elim[b]);
    for (int a = 0; a < n_e; ++a)
        for (int b = 0; b < n_r; ++b) y_er(a, b) = y(elim[a], red.retained[b]);
    for (int a = 0; a < n_e; ++a)
        for (int b = 0; b < n_e; ++b) y_ee(a, b) = y(elim[a], elim[b]);

    red.recovery = CMat::Zero(n_aug, n_r);
    for (int a = 0; a < n_r; ++a) red.recovery(red.retained[a], a) = 1.0;

    if (n_e == 0) {
        red.y_red = y_rr;
        return red;
    }

    Eigen::PartialPivLU<CMat> lu(y_ee);
    CMat x = lu.solve(y_er);  // y_ee^{-1} y_er
    if (!x.allFinite())
        throw PowerFlowError("kron_reduce: singular eliminated block (islanded subnetwork)");
    red.y_red = y_rr - y_re * x;
    for (int a = 0; a < n_e; ++a)
        for (int b = 0; b < n_r; ++b) red.recovery(elim[a], b) = -x(a, b);
    return red;
}

}  // namespace wadc
