#pragma once

#include <string>
#include <vector>

#include "wadc/common.hpp"
#include "wadc/sysmodel.hpp"

namespace wadc {

enum class StateKind { rotor_angle, rotor_speed, exciter, governor, actuator };

std::string to_string(StateKind kind);

struct StateLabel {
    StateKind kind = StateKind::rotor_angle;
    std::string owner;  // machine or device id
    int stage = 0;      // governor stage, 1-based; 0 otherwise

    std::string name() const;  // e.g. "G1.rotor_speed", "G2.governor2", "D1.actuator"
    bool operator==(const StateLabel&) const = default;
};

/// Selects which machine blocks contribute states. A block is only active
/// for machines whose case data defines it (exciter_tc_s > 0, nonempty
/// governor_tc_s); disabling drops the states and freezes the block at its
/// operating-point value.
struct ModelConfig {
    bool with_exciter = true;
    bool with_governor = true;
};

/// Nonlinear swing-equation model over the reduced network. Machine
/// internal voltages are set by states, device bus voltages are solved
/// algebraically from the devices' injected power each evaluation, and
/// machineless slack buses hold their power-flow voltage.
///
/// State order: per machine (case order) rotor_angle, rotor_speed,
/// exciter (if active), governor stages (if active); then one actuator
/// state per device. Inputs: one commanded power deviation (p.u.) per
/// device. The construction refines the power-flow point with a few
/// Newton steps so that f(x0, 0) vanishes to near machine precision.
class DynamicModel {
public:
    DynamicModel(const SystemCase& sc, const OperatingPoint& op, const ReducedNetwork& red,
                 const ModelConfig& cfg = {});

    int n_states() const { return n_; }
    int n_machines() const { return static_cast<int>(sys_.machines.size()); }
    int n_devices() const { return static_cast<int>(sys_.devices.size()); }
    const std::vector<StateLabel>& labels() const { return labels_; }
    int state_index(const std::string& name) const;  // throws InputError on unknown name

    int angle_index(int m) const { return mach_off_[m]; }
    int speed_index(int m) const { return mach_off_[m] + 1; }
    int exciter_index(int m) const;            // -1 when inactive
    int governor_index(int m, int stage) const;  // stage 1-based; -1 when inactive
    int governor_stages(int m) const { return gov_stages_[m]; }
    int actuator_index(int d) const { return dev_off_[d]; }

    const Vec& x0() const { return x0_; }
    double equilibrium_residual() const { return eq_residual_; }
    const SystemCase& sys() const { return sys_; }
    const ReducedNetwork& network() const { return red_; }

    /// Warm-start storage for the device-bus algebraic solve; owned by the
    /// caller so concurrent evaluations never share state.
    struct AlgebraCache {
        CVec v_dev;
        bool valid = false;
    };

    /// Time derivative. vref_offset adds to each machine's exciter voltage
    /// reference (ignored for machines without an active exciter).
    Vec f(const Vec& x, const Vec& u, const Vec& vref_offset, AlgebraCache& cache) const;
    Vec f(const Vec& x, const Vec& u) const;

    /// Analytic Jacobians at the refined operating point, u = 0.
    void jacobians(Mat& a, Mat& b) const;

    /// Observables derived from a state vector.
    struct Outputs {
        Vec p_delivered_pu;  // device injected power deviation from reference, after the limit
        Vec p_e_pu;          // machine electrical power
        Vec v_t_mag_pu;      // machine terminal voltage magnitude
        CVec v_retained;     // all retained-node voltages
    };
    Outputs outputs(const Vec& x, AlgebraCache& cache) const;

    /// Same parameters and equilibrium, different network (constant-impedance
    /// load change); used to apply load-step disturbances.
    DynamicModel with_network(const ReducedNetwork& red) const;

    double coi_inertia() const;            // sum of system-base inertia constants
    Vec coi_weights() const;               // h_m / sum h over machines

private:
    void build_layout(const ModelConfig& cfg);
    void refine_equilibrium();
    void jacobian_at(const Vec& x, Mat& a, Mat& b) const;
    CVec solve_algebra(const CVec& v_mach, const Vec& p_dev, AlgebraCache& cache) const;

    SystemCase sys_;
    ReducedNetwork red_;
    int n_ = 0;
    std::vector<StateLabel> labels_;
    std::vector<int> mach_off_;
    std::vector<int> exc_idx_;    // -1 when inactive
    std::vector<int> gov_off_;    // first governor state, -1 when inactive
    std::vector<int> gov_stages_;
    std::vector<int> dev_off_;

    // machine parameters on the system base
    Vec h2_;        // 2H
    Vec damp_;      // D
    Vec xd_;        // X'd
    Vec kdroop_;    // governor speed-to-power gain
    Vec e0_;        // internal EMF magnitude at the operating point
    Vec pm0_;       // mechanical power at the operating point
    Vec vref_;      // exciter voltage reference
    // device parameters on the system base
    Vec pref_, pmax_, ta_;

    CVec v_fixed_;  // voltages of machineless source buses
    Vec x0_;
    double eq_residual_ = 0.0;
};

}  // namespace wadc
