#pragma once

#include <string>
#include <utility>
#include <vector>

#include "wadc/lqrsp.hpp"
#include "wadc/modal.hpp"

namespace wadc {

/// Devices assigned to one target mode. cross_ratio holds, per device,
/// max_r |n_r^T b_d| / |n_j^T b_d| over the other targets r: how strongly
/// the device couples into modes it is not meant to control.
struct GroupEntry {
    std::string mode_name;
    int mode_index = 0;
    std::vector<std::string> devices;
    std::vector<double> cross_ratio;  // parallel to devices
};

/// Greedy assignment: each device joins the target with its largest
/// normalized controllability (per-mode normalization by the strongest
/// device for that mode), then devices are moved out of multi-member
/// groups until every target holds at least one. devices empty means all
/// of the model's inputs. Throws InputError when a target is
/// uncontrollable from every device or there are fewer devices than
/// targets.
std::vector<GroupEntry> group_devices(const LinearModel& model, const ModalData& modal,
                                      const std::vector<ModeDescriptor>& modes,
                                      const std::vector<std::string>& target_names,
                                      std::vector<std::string> devices = {});

/// Realizes a synthesized signal as a controller over the model's named
/// speed outputs. A weight on anything but a rotor-speed state is not
/// wide-area measurable and throws InputError.
ControllerSpec make_controller(const LinearModel& model, const std::string& device_id,
                               const ModeDescriptor& mode, const SignalCombination& signal);

/// Per-device response weights from the actuator headroom
/// p_max - p_ref (MW). Throws InputError when a device has none.
std::vector<double> response_weights(const SystemCase& sc,
                                     const std::vector<std::string>& devices);

/// Rescales every non-reference gain in the group so that all pairs
/// satisfy |shift_a| / |shift_b| = eps_a |n_a| / (eps_b |n_b|), where
/// shift_d = gain_d (n_j^T b_d)(c_d^T m_j) is the device's predicted move
/// of the shared target mode and n_d its modal controllability. That is:
/// each device's modal power response scales with its weight eps_d. The
/// reference device's gain is kept as given. Throws InputError on zero
/// controllability or a signal with no projection on the target mode.
void tune_gains(std::vector<ControllerSpec>& group, const LinearModel& model,
                const ModalData& modal, const std::vector<double>& eps,
                const std::string& reference_device);

struct DampingTarget {
    std::string mode_name;
    double zeta = 0.10;  // absolute damping-ratio target for the mode
};

struct GroupResult {
    GroupEntry group;
    std::string reference_device;
    double target_zeta = 0.0;
    double open_loop_zeta = 0.0;
    double achieved_zeta = 0.0;
    double scale = 0.0;    // common gain factor applied to the group
    bool feasible = true;  // target met without degrading other modes
    std::string note;      // diagnosis when not
};

struct ControlDesign {
    std::vector<ControllerSpec> controllers;  // final, scaled gains
    std::vector<GroupResult> groups;
    std::vector<double> eps;  // response weights, parallel to controllers
    DecouplingReport report;  // attached by verify_decoupling
    bool verified = false;
};

/// One common gain factor per group, bisected on the exact closed-loop
/// damping ratio of the group's target mode until within 0.005 of the
/// target. No other oscillatory mode outside the targeted set may lose
/// more than 0.005 damping; when that constraint binds first the group is
/// scaled back to the boundary and the shortfall diagnosed in the note,
/// as is a damping curve that stops rising with gain. Groups are scaled
/// sequentially against the full closed loop, with extra passes when an
/// earlier group's target drifts. Controller gains on entry set the
/// relative weighting within each group (see tune_gains).
ControlDesign scale_to_target(const LinearModel& model, const ModalData& modal,
                              std::vector<ControllerSpec> controllers,
                              const std::vector<GroupEntry>& grouping,
                              const std::vector<DampingTarget>& targets);

/// Exact closed-loop spectrum next to the decoupled prediction. Flags the
/// design when a cross coupling exceeds 30% of the smallest intended
/// shift, or when a non-target electromechanical mode moves by more than
/// 5% of its magnitude.
DecouplingReport verify_decoupling(const ControlDesign& design, const LinearModel& model,
                                   const ModalData& modal);

struct DesignOptions {
    double r = 30.0;  // control-effort weight in the signal synthesis
    double gamma_min = 1e-6;
    double gamma_max = 1e-1;
    int gamma_steps = 40;
    double max_degradation = 0.10;
    double truncate_tau = 0.05;
    std::vector<std::string> devices;  // empty: every device in the case
    bool collect_sweeps = false;
};

struct DesignOutput {
    ControlDesign design;
    // Per-device sweep tables (device id, CSV), when collected.
    std::vector<std::pair<std::string, std::string>> sweeps;
};

/// Full synthesis for a set of damping targets: classify modes, group
/// devices, synthesize each device's sparse speed signal against its
/// group's mode on the classical design model, assemble controllers,
/// tune the gain ratios, scale each group to its target, and attach the
/// decoupling verification.
DesignOutput design_controllers(const SystemCase& sc, const std::vector<DampingTarget>& targets,
                                const DesignOptions& opts = {});

/// JSON export of a verified design: per-controller signal weights and
/// gains, per-group tuning results, and the verification report. Throws
/// InputError when no verification report is attached.
std::string design_json(const ControlDesign& design);

}  // namespace wadc
