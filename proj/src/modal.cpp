#include "wadc/modal.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include <Eigen/Dense>
#include <json.hpp>

namespace wadc {

namespace {

double ang_diff(double a, double b) { return std::remainder(a - b, 2.0 * kPi); }

std::vector<int> canonical_order(const CVec& ev) {
    std::vector<int> idx(ev.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
        if (ev(a).real() != ev(b).real()) return ev(a).real() < ev(b).real();
        if (std::abs(ev(a).imag()) != std::abs(ev(b).imag()))
            return std::abs(ev(a).imag()) < std::abs(ev(b).imag());
        return ev(a).imag() > ev(b).imag();
    });
    return idx;
}

CVec sorted_eigenvalues(const Mat& a) {
    Eigen::EigenSolver<Mat> es(a, false);
    CVec ev = es.eigenvalues();
    const auto order = canonical_order(ev);
    CVec out(ev.size());
    for (size_t i = 0; i < order.size(); ++i) out(static_cast<int>(i)) = ev(order[i]);
    return out;
}

}  // namespace

std::string to_string(ModeClass cls) {
    switch (cls) {
        case ModeClass::local: return "local";
        case ModeClass::inter_area: return "inter-area";
        case ModeClass::common: return "common";
        case ModeClass::non_electromechanical: return "non-electromechanical";
    }
    return "?";
}

ModalData eig_decompose_matrix(const Mat& a, const std::vector<StateLabel>& labels) {
    Eigen::EigenSolver<Mat> es(a, true);
    if (es.info() != Eigen::Success) throw NumericsError("eigendecomposition failed to converge");

    const CVec ev_raw = es.eigenvalues();
    const CMat m_raw = es.eigenvectors();
    const auto order = canonical_order(ev_raw);

    ModalData modal;
    const int n = static_cast<int>(ev_raw.size());
    modal.eigenvalues.resize(n);
    modal.m.resize(n, n);
    for (int j = 0; j < n; ++j) {
        modal.eigenvalues(j) = ev_raw(order[j]);
        modal.m.col(j) = m_raw.col(order[j]);
    }
    modal.labels = labels;

    const Eigen::JacobiSVD<CMat> svd(modal.m);
    const double smin = svd.singularValues().minCoeff();
    const double smax = svd.singularValues().maxCoeff();
    modal.cond_m = (smin > 0.0) ? smax / smin : std::numeric_limits<double>::infinity();
    if (!(modal.cond_m < 1e12))
        throw NumericsError("state matrix is near-defective (modal matrix condition " +
                            std::to_string(modal.cond_m) + ")");

    modal.n_left = modal.m.inverse().transpose();
    return modal;
}

ModalData eig_decompose(const LinearModel& model) {
    return eig_decompose_matrix(model.a, model.labels);
}

std::vector<ModeDescriptor> classify_modes(const ModalData& modal) {
    // Machine-speed rows, in machine order.
    std::vector<int> speed_rows;
    std::vector<std::string> owners;
    std::vector<bool> rotor_row(modal.labels.size(), false);
    for (size_t k = 0; k < modal.labels.size(); ++k) {
        const auto& lab = modal.labels[k];
        rotor_row[k] = (lab.kind == StateKind::rotor_angle || lab.kind == StateKind::rotor_speed);
        if (lab.kind == StateKind::rotor_speed) {
            speed_rows.push_back(static_cast<int>(k));
            owners.push_back(lab.owner);
        }
    }
    const int n_m = static_cast<int>(speed_rows.size());

    std::vector<ModeDescriptor> modes;
    for (int j = 0; j < modal.n(); ++j) {
        const Complex lam = modal.eigenvalues(j);
        if (lam.imag() < -1e-9) continue;  // lower member of a pair

        ModeDescriptor md;
        md.index = j;
        md.eigenvalue = lam;
        const double mag = std::abs(lam);
        md.damping_ratio = (mag > 0.0) ? -lam.real() / mag : 0.0;
        md.cls = ModeClass::non_electromechanical;

        if (lam.imag() > 1e-9 && n_m > 0) {
            md.frequency_hz = lam.imag() / (2.0 * kPi);

            // Electromechanical content: participation of rotor states.
            double rotor_part = 0.0, total_part = 0.0;
            for (int k = 0; k < static_cast<int>(modal.labels.size()); ++k) {
                const double p = std::abs(modal.m(k, j) * modal.n_left(k, j));
                total_part += p;
                if (rotor_row[k]) rotor_part += p;
            }
            const bool electromech = total_part > 0.0 && rotor_part / total_part >= 0.15;

            CVec shape(n_m);
            for (int m = 0; m < n_m; ++m) shape(m) = modal.m(speed_rows[m], j);
            const double shape_max = shape.cwiseAbs().maxCoeff();

            if (electromech && shape_max > 0.0 && md.frequency_hz <= 3.0) {
                // Coherent case: every speed entry inside a 60-degree cone.
                const double center = std::arg(shape.sum());
                bool coherent = true;
                for (int m = 0; m < n_m; ++m) {
                    if (std::abs(shape(m)) < 1e-6 * shape_max) continue;
                    if (std::abs(ang_diff(std::arg(shape(m)), center)) > kPi / 6.0) coherent = false;
                }
                if (coherent) {
                    md.cls = ModeClass::common;
                    for (int m = 0; m < n_m; ++m)
                        if (std::abs(shape(m)) >= 0.25 * shape_max) md.group_a.push_back(owners[m]);
                } else if (md.frequency_hz >= 0.1) {
                    // Two anti-phased participating groups.
                    std::vector<int> part;
                    for (int m = 0; m < n_m; ++m)
                        if (std::abs(shape(m)) >= 0.25 * shape_max) part.push_back(m);
                    int ref_m = part.front();
                    for (int m : part)
                        if (std::abs(shape(m)) > std::abs(shape(ref_m))) ref_m = m;
                    const double ref = std::arg(shape(ref_m));
                    std::vector<int> ga, gb;
                    bool assigned = true;
                    for (int m : part) {
                        const double d = std::abs(ang_diff(std::arg(shape(m)), ref));
                        if (d <= kPi / 3.0) ga.push_back(m);
                        else if (d >= 2.0 * kPi / 3.0) gb.push_back(m);
                        else assigned = false;
                    }
                    bool anti = assigned && !ga.empty() && !gb.empty();
                    for (int a : ga)
                        for (int b : gb)
                            anti = anti && std::abs(ang_diff(std::arg(shape(a)), std::arg(shape(b)))) >
                                               2.0 * kPi / 3.0;
                    if (anti) {
                        md.cls = (md.frequency_hz <= 1.0) ? ModeClass::inter_area : ModeClass::local;
                        for (int m : ga) md.group_a.push_back(owners[m]);
                        for (int m : gb) md.group_b.push_back(owners[m]);
                    }
                }
            }
        } else if (lam.imag() > 1e-9) {
            md.frequency_hz = lam.imag() / (2.0 * kPi);
        }
        modes.push_back(std::move(md));
    }

    std::stable_sort(modes.begin(), modes.end(), [](const ModeDescriptor& a, const ModeDescriptor& b) {
        if (a.frequency_hz != b.frequency_hz) return a.frequency_hz < b.frequency_hz;
        return a.eigenvalue.real() < b.eigenvalue.real();
    });

    // Stable names per class, ascending frequency.
    int n_local = 0, n_common = 0, n_other = 0;
    std::vector<ModeDescriptor*> inter;
    for (auto& md : modes) {
        switch (md.cls) {
            case ModeClass::local: md.name = "local-" + std::to_string(++n_local); break;
            case ModeClass::common:
                md.name = (n_common == 0) ? "common" : "common-" + std::to_string(n_common + 1);
                ++n_common;
                break;
            case ModeClass::inter_area: inter.push_back(&md); break;
            case ModeClass::non_electromechanical:
                md.name = "other-" + std::to_string(++n_other);
                break;
        }
    }
    if (inter.size() == 1) {
        inter.front()->name = "inter-area";
    } else {
        std::vector<std::string> taken;
        for (auto* md : inter) {
            char buf[32];
            std::snprintf(buf, sizeof buf, "inter-%.1fhz", md->frequency_hz);
            std::string name = buf;
            std::string suffix;
            int k = 1;
            while (std::find(taken.begin(), taken.end(), name + suffix) != taken.end())
                suffix = "-" + std::string(1, static_cast<char>('a' + k++));
            md->name = name + suffix;
            taken.push_back(md->name);
        }
    }
    return modes;
}

const ModeDescriptor* find_mode(const std::vector<ModeDescriptor>& modes, const std::string& name) {
    for (const auto& md : modes)
        if (md.name == name) return &md;
    return nullptr;
}

const ModeDescriptor& require_mode(const std::vector<ModeDescriptor>& modes, const std::string& name) {
    if (const ModeDescriptor* md = find_mode(modes, name)) return *md;
    std::string known;
    for (const auto& md : modes)
        if (md.cls != ModeClass::non_electromechanical) known += (known.empty() ? "" : ", ") + md.name;
    throw InputError("unknown mode '" + name + "' (classified modes: " + known + ")");
}

CVec mode_controllability(const ModalData& modal, const Vec& b_col) {
    return modal.n_left.transpose() * b_col.cast<Complex>();
}

CVec mode_observability(const ModalData& modal, const Vec& c_row) {
    return modal.m.transpose() * c_row.cast<Complex>();
}

Mat closed_loop_matrix(const LinearModel& model, const std::vector<ControllerSpec>& controllers) {
    Mat acl = model.a;
    for (const auto& ctl : controllers) {
        const int col = model.input_index(ctl.device_id);
        acl += model.b.col(col) * (ctl.gain * ctl.composite_row.transpose());
    }
    return acl;
}

DecouplingReport predict_closed_loop(const ModalData& modal,
                                     const std::vector<ControllerSpec>& controllers,
                                     const LinearModel& model) {
    DecouplingReport rep;
    const int n = modal.n();

    for (const auto& ctl : controllers) {
        if (ctl.mode_index < 0 || ctl.mode_index >= n)
            throw InputError("controller for device '" + ctl.device_id +
                             "' references a mode index outside the modal data");
        if (std::find(rep.target_modes.begin(), rep.target_modes.end(), ctl.mode_index) ==
            rep.target_modes.end())
            rep.target_modes.push_back(ctl.mode_index);
    }
    std::sort(rep.target_modes.begin(), rep.target_modes.end());
    const int ns = static_cast<int>(rep.target_modes.size());

    // Per-controller shift of its own target and the full cross-mode block.
    rep.controller_shift.resize(static_cast<int>(controllers.size()));
    rep.a_star = CMat::Zero(ns, ns);
    for (size_t ci = 0; ci < controllers.size(); ++ci) {
        const auto& ctl = controllers[ci];
        const Vec b_col = model.b.col(model.input_index(ctl.device_id));
        const CVec contr = mode_controllability(modal, b_col);
        const CVec obs = mode_observability(modal, ctl.composite_row);
        const int l = static_cast<int>(std::find(rep.target_modes.begin(), rep.target_modes.end(),
                                                 ctl.mode_index) -
                                       rep.target_modes.begin());
        rep.controller_shift(static_cast<int>(ci)) =
            contr(ctl.mode_index) * ctl.gain * obs(ctl.mode_index);
        for (int k = 0; k < ns; ++k)
            rep.a_star(k, l) += contr(rep.target_modes[k]) * ctl.gain * obs(rep.target_modes[l]);
    }

    rep.predicted = modal.eigenvalues;
    for (int k = 0; k < ns; ++k) {
        const int j = rep.target_modes[k];
        rep.predicted(j) += rep.a_star(k, k);
        if (modal.eigenvalues(j).imag() > 1e-9) {
            // Move the conjugate partner symmetrically.
            int partner = -1;
            double best = std::numeric_limits<double>::max();
            for (int i = 0; i < n; ++i) {
                const double d = std::abs(modal.eigenvalues(i) - std::conj(modal.eigenvalues(j)));
                if (i != j && d < best) {
                    best = d;
                    partner = i;
                }
            }
            if (partner >= 0) rep.predicted(partner) += std::conj(rep.a_star(k, k));
        }
    }

    rep.actual = sorted_eigenvalues(closed_loop_matrix(model, controllers));

    // Pair open-loop and closed-loop eigenvalues globally by distance.
    struct Cand {
        double d;
        int i, k;
    };
    std::vector<Cand> cands;
    cands.reserve(static_cast<size_t>(n) * n);
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < n; ++k)
            cands.push_back({std::abs(rep.actual(k) - modal.eigenvalues(i)), i, k});
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) { return a.d < b.d; });
    rep.displacement = Vec::Constant(n, -1.0);
    std::vector<bool> used(n, false);
    for (const auto& c : cands) {
        if (used[c.k] || rep.displacement(c.i) >= 0.0) continue;
        used[c.k] = true;
        rep.displacement(c.i) = c.d;
    }

    if (ns >= 2) {
        double max_off = 0.0, min_diag = std::numeric_limits<double>::max();
        for (int k = 0; k < ns; ++k) {
            min_diag = std::min(min_diag, std::abs(rep.a_star(k, k)));
            for (int l = 0; l < ns; ++l)
                if (k != l) max_off = std::max(max_off, std::abs(rep.a_star(k, l)));
        }
        rep.offdiag_ratio = (min_diag > 1e-300) ? max_off / min_diag : 1e12;
    }
    return rep;
}

std::string dump_modes(const std::vector<ModeDescriptor>& modes, const ModalData& modal,
                       const LinearModel& model) {
    nlohmann::ordered_json doc;
    doc["modes"] = nlohmann::ordered_json::array();
    for (const auto& md : modes) {
        nlohmann::ordered_json jm;
        jm["name"] = md.name;
        jm["eigenvalue"] = {{"re", md.eigenvalue.real()}, {"im", md.eigenvalue.imag()}};
        jm["frequency_hz"] = md.frequency_hz;
        jm["damping_ratio"] = md.damping_ratio;
        jm["class"] = to_string(md.cls);
        jm["group_a"] = md.group_a;
        jm["group_b"] = md.group_b;
        doc["modes"].push_back(std::move(jm));
    }
    doc["controllability"] = nlohmann::ordered_json::array();
    for (int d = 0; d < model.n_inputs(); ++d) {
        const CVec contr = mode_controllability(modal, model.b.col(d));
        nlohmann::ordered_json jd;
        jd["device"] = model.input_names[d];
        jd["modes"] = nlohmann::ordered_json::array();
        for (const auto& md : modes) {
            if (md.cls == ModeClass::non_electromechanical) continue;
            const Complex c = contr(md.index);
            jd["modes"].push_back({{"mode", md.name},
                                   {"magnitude", std::abs(c)},
                                   {"phase_deg", std::arg(c) * 180.0 / kPi}});
        }
        doc["controllability"].push_back(std::move(jd));
    }
    return doc.dump(2) + "\n";
}

}  // namespace wadc
