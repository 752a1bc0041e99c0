#pragma once

#include <string>
#include <vector>

#include "wadc/common.hpp"

namespace wadc {

enum class BusType { Slack, PV, PQ };

struct Bus {
    std::string id;
    BusType type = BusType::PQ;
    double v_setpoint_pu = 1.0;
    double load_mw = 0.0;
    double load_mvar = 0.0;
    double gen_mw = 0.0;
};

struct Branch {
    std::string from;
    std::string to;
    double r_pu = 0.0;
    double x_pu = 0.0;
    double b_pu = 0.0;  // total line charging susceptance
};

/// Machine parameters are given on the machine's own MVA base and rebased
/// internally; time constants are in seconds regardless of base.
struct Machine {
    std::string id;
    std::string bus;
    double rated_mva = 0.0;
    double inertia_h_s = 0.0;
    double damping_pu = 0.0;
    double xd_transient_pu = 0.0;
    double exciter_gain = 0.0;    // exciter block enabled when exciter_tc_s > 0
    double exciter_tc_s = 0.0;
    double droop_pu = 0.0;        // governor enabled when governor_tc_s nonempty
    std::vector<double> governor_tc_s;
};

struct Device {
    std::string id;
    std::string bus;
    double p_ref_mw = 0.0;
    double p_max_mw = 0.0;
    double lag_tc_s = 0.0;
};

/// A physical scenario as ingested: quantities are kept exactly as given in
/// the case document (MW / MVAr, machine-base p.u.); conversions to the
/// system base happen in the consumers, which keeps re-serialization exact.
struct SystemCase {
    double base_mva = 100.0;
    double freq_hz = 60.0;
    std::vector<Bus> buses;
    std::vector<Branch> branches;
    std::vector<Machine> machines;
    std::vector<Device> devices;

    int bus_index(const std::string& id) const;       // throws InputError on unknown id
    int machine_index(const std::string& id) const;
    int device_index(const std::string& id) const;
    double omega_syn() const { return 2.0 * kPi * freq_hz; }

    // machine quantities rebased to the system base
    double machine_h_sys(int m) const;        // seconds of stored energy per system MVA
    double machine_damping_sys(int m) const;
    double machine_xd_sys(int m) const;
    double machine_droop_gain_sys(int m) const;  // per-unit power per per-unit speed
    double device_p_ref_pu(int d) const;
    double device_p_max_pu(int d) const;
};

SystemCase load_case(const std::string& text);
SystemCase load_case_file(const std::string& path);
std::string serialize_case(const SystemCase& sc);

struct BranchFlow {
    double p_from_mw = 0.0;
    double q_from_mvar = 0.0;
    double p_to_mw = 0.0;
    double q_to_mvar = 0.0;
};

struct OperatingPoint {
    CVec v_bus;                    // complex bus voltages, case bus order
    Vec p_inj_pu;                  // net injections at the solution
    Vec q_inj_pu;
    std::vector<BranchFlow> flows;
    double max_mismatch_pu = 0.0;
    int iterations = 0;
    std::vector<double> mismatch_history;  // infinity norm per accepted Newton step

    // machine initial conditions on the system base
    Vec mach_emf_pu;
    Vec mach_angle_rad;
    Vec mach_p_gen_pu;
    Vec mach_q_gen_pu;
};

struct PowerFlowOptions {
    double tol_pu = 1e-8;
    int max_iterations = 50;
};

/// Newton-Raphson power flow from a flat start. Throws PowerFlowError on
/// divergence or a singular Jacobian.
OperatingPoint solve_power_flow(const SystemCase& sc, const PowerFlowOptions& opts = {});

/// Bus admittance matrix of the transmission network alone (no loads,
/// no machine branches), case bus order.
CMat build_ybus(const SystemCase& sc);

/// Network reduced to the dynamic nodes: machine internal nodes first,
/// then device buses, then any machineless slack bus (kept as a fixed
/// voltage source). Loads enter as constant shunt admittances converted
/// at the solved voltages; every other node is eliminated.
struct ReducedNetwork {
    std::vector<std::string> node_names;  // machine ids, device bus ids, source bus ids
    int n_machine = 0;
    int n_device = 0;
    CMat y_red;

    // Augmented-network bookkeeping (case buses 0..n_bus-1, then machine
    // internal nodes). recovery maps retained-node voltages to all
    // augmented-node voltages; used for branch flows and tests.
    CMat y_aug;
    CMat recovery;
    std::vector<int> retained;    // augmented indices of retained nodes
    std::vector<int> device_bus;  // case bus index per device
    std::vector<int> fixed_bus;   // case bus indices of machineless source buses
};

ReducedNetwork kron_reduce(const SystemCase& sc, const OperatingPoint& op);

}  // namespace wadc
