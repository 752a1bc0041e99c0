#include "wadc/linearize.hpp"

#include <json.hpp>

namespace wadc {

int LinearModel::state_index(const std::string& label_name) const {
    for (size_t i = 0; i < labels.size(); ++i)
        if (labels[i].name() == label_name) return static_cast<int>(i);
    throw InputError("unknown state label '" + label_name + "'");
}

int LinearModel::input_index(const std::string& device_id) const {
    for (size_t i = 0; i < input_names.size(); ++i)
        if (input_names[i] == device_id) return static_cast<int>(i);
    throw InputError("unknown input '" + device_id + "'");
}

int LinearModel::output_index(const std::string& output_name) const {
    for (size_t i = 0; i < output_names.size(); ++i)
        if (output_names[i] == output_name) return static_cast<int>(i);
    throw InputError("unknown output '" + output_name + "'");
}

LinearModel build_linear_model(const SystemCase& sc, const OperatingPoint& op,
                               const ReducedNetwork& red, const ModelConfig& cfg) {
    const DynamicModel dyn(sc, op, red, cfg);

    LinearModel model;
    dyn.jacobians(model.a, model.b);
    if (!model.a.allFinite() || !model.b.allFinite())
        throw NumericsError("linearization produced non-finite entries (degenerate operating point)");
    model.labels = dyn.labels();
    model.x0 = dyn.x0();
    for (const auto& dev : sc.devices) model.input_names.push_back(dev.id);

    const int n_m = dyn.n_machines();
    model.c = Mat::Zero(n_m + 1, dyn.n_states());
    for (int m = 0; m < n_m; ++m) {
        model.output_names.push_back(sc.machines[m].id + ".speed");
        model.c(m, dyn.speed_index(m)) = 1.0;
    }
    model.output_names.push_back("coi.speed");
    const Vec w = dyn.coi_weights();
    for (int m = 0; m < n_m; ++m) model.c(n_m, dyn.speed_index(m)) = w(m);
    return model;
}

Vec make_output(const LinearModel& model, const std::vector<std::pair<std::string, double>>& weights) {
    Vec row = Vec::Zero(model.n());
    for (const auto& [label, w] : weights) row(model.state_index(label)) += w;
    return row;
}

Vec coi_output(const LinearModel& model, const SystemCase& sc) {
    double h_sum = 0.0;
    for (size_t m = 0; m < sc.machines.size(); ++m) h_sum += sc.machine_h_sys(static_cast<int>(m));
    Vec row = Vec::Zero(model.n());
    for (size_t m = 0; m < sc.machines.size(); ++m) {
        const int idx = model.state_index(sc.machines[m].id + ".rotor_speed");
        row(idx) = sc.machine_h_sys(static_cast<int>(m)) / h_sum;
    }
    return row;
}

std::string dump_model(const LinearModel& model) {
    nlohmann::ordered_json doc;
    doc["n"] = model.n();
    doc["states"] = nlohmann::ordered_json::array();
    for (const auto& lab : model.labels) {
        nlohmann::ordered_json js;
        js["name"] = lab.name();
        js["kind"] = to_string(lab.kind);
        js["owner"] = lab.owner;
        if (lab.kind == StateKind::governor) js["stage"] = lab.stage;
        doc["states"].push_back(std::move(js));
    }
    auto matrix_rows = [](const Mat& m) {
        nlohmann::ordered_json rows = nlohmann::ordered_json::array();
        for (int i = 0; i < m.rows(); ++i) {
            nlohmann::ordered_json row = nlohmann::ordered_json::array();
            for (int j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
            rows.push_back(std::move(row));
        }
        return rows;
    };
    doc["a"] = matrix_rows(model.a);
    doc["inputs"] = model.input_names;
    doc["b"] = matrix_rows(model.b);
    doc["outputs"] = model.output_names;
    doc["c"] = matrix_rows(model.c);
    doc["x0"] = std::vector<double>(model.x0.data(), model.x0.data() + model.x0.size());
    return doc.dump(2) + "\n";
}

}  // namespace wadc
