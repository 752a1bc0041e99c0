#pragma once

#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "wadc/dynamics.hpp"
#include "wadc/tuner.hpp"

namespace wadc {

enum class DisturbanceKind { none, exciter_step, load_step };

struct Disturbance {
    DisturbanceKind kind = DisturbanceKind::none;
    std::string target;          // machine id (exciter_step) or bus id (load_step)
    double delta_vref_pu = 0.0;  // exciter_step
    double delta_mw = 0.0;       // load_step
    double delta_mvar = 0.0;     // load_step
    double t_on_s = 1.0;
    double t_off_s = std::numeric_limits<double>::infinity();
};

struct Scenario {
    std::string name;
    double duration_s = 30.0;
    double dt_s = 1e-3;  // fixed integration step, at most 10 ms
    Disturbance disturbance;
    // Branch active-power channels to record, as (from, to) bus pairs.
    std::vector<std::pair<std::string, std::string>> record_branches;
};

Scenario load_scenario(const std::string& text);
Scenario load_scenario_file(const std::string& path);

/// Uniformly sampled named channels; column 0 is always "t_s".
struct TraceSet {
    std::vector<std::string> names;
    Mat data;  // one row per sample, one column per channel

    int n_samples() const { return static_cast<int>(data.rows()); }
    int n_channels() const { return static_cast<int>(data.cols()); }
    int col(const std::string& name) const;  // throws InputError on unknown channel
    Vec channel(const std::string& name) const { return data.col(col(name)); }
    Vec time() const { return data.col(0); }
};

std::string trace_csv(const TraceSet& trace);

/// Nonlinear time-domain run with fixed-step RK4 over the reduced network
/// (device-bus algebra resolved at every stage). The disturbance state is
/// sampled at the start of each step, so step times should lie on the dt
/// grid. Channels: t_s, <machine>.speed_pu, coi.speed_pu, and per device
/// <id>.dp_mw (delivered, after the power limit), <id>.dp_cmd_mw
/// (commanded) and <id>.energy_mj (integral of |dp|), plus
/// <from>-<to>.p_mw per recorded branch. Throws NumericsError when a rotor
/// speed leaves +-0.2 p.u.
TraceSet simulate(const SystemCase& sc, const Scenario& scn);

/// Same run with the design's controllers in the loop: each device is
/// commanded u = gain * row . (x - x0). Only verified designs are
/// accepted.
TraceSet simulate(const SystemCase& sc, const Scenario& scn, const ControlDesign& design);

struct DampingEstimate {
    double frequency_hz = 0.0;
    double sigma = 0.0;  // exponential rate of the fitted mode (negative decays)
    double zeta = 0.0;   // -sigma / |sigma + j omega|
    double amplitude = 0.0;
    double phase_rad = 0.0;
    double residual = 0.0;  // relative misfit of the single-mode model
};

/// Measures one oscillatory mode in a uniformly sampled signal: zero-phase
/// band-pass (+-40% around the guess), then a damped-cosine least-squares
/// fit with the decay and frequency free. Throws NumericsError when the
/// residual exceeds 20% (the signal is not a single decaying mode there)
/// and InputError when the window holds fewer than three guess periods.
DampingEstimate estimate_damping(const Vec& t_s, const Vec& y, double f_guess_hz);

struct DeviceResponse {
    std::string device;
    double peak_mw = 0.0;  // largest |delivered power deviation|
    double t_peak_s = 0.0;
    double bias_mw = 0.0;    // mean deviation over the final tenth of the run
    double energy_mj = 0.0;  // integral of |dp| over the run
};

struct ResponseMetrics {
    std::vector<DeviceResponse> devices;
    double coi_peak_pu = 0.0;  // largest |COI speed|
    double coi_l2 = 0.0;       // sqrt(integral coi^2 dt)
    Mat peak_ratio;            // peak_ratio(i, j) = peak_i / peak_j
};

ResponseMetrics response_metrics(const TraceSet& trace);
std::string metrics_json(const ResponseMetrics& metrics);

}  // namespace wadc
