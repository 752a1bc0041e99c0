#pragma once

#include <string>
#include <utility>
#include <vector>

#include "wadc/dynamics.hpp"

namespace wadc {

/// LTI model of the system around an operating point: x and u are
/// deviations from the equilibrium, inputs are device power commands, and
/// outputs are named rows over the labeled states.
struct LinearModel {
    Mat a;
    Mat b;  // one column per device, device order
    std::vector<StateLabel> labels;
    std::vector<std::string> input_names;   // device ids
    std::vector<std::string> output_names;  // "<machine>.speed" per machine, then "coi.speed"
    Mat c;                                  // one row per named output
    Vec x0;

    int n() const { return static_cast<int>(a.rows()); }
    int n_inputs() const { return static_cast<int>(b.cols()); }
    int state_index(const std::string& label_name) const;  // throws InputError
    int input_index(const std::string& device_id) const;
    int output_index(const std::string& output_name) const;
};

LinearModel build_linear_model(const SystemCase& sc, const OperatingPoint& op,
                               const ReducedNetwork& red, const ModelConfig& cfg = {});

/// Sparse output row from (state label, weight) pairs. Weights on the same
/// label accumulate. Throws InputError on an unknown label.
Vec make_output(const LinearModel& model, const std::vector<std::pair<std::string, double>>& weights);

/// Inertia-weighted machine-speed row (center-of-inertia speed).
Vec coi_output(const LinearModel& model, const SystemCase& sc);

/// JSON dump: dense A (array of rows), labeled states, named inputs and
/// outputs, and the linearization point.
std::string dump_model(const LinearModel& model);

}  // namespace wadc
