#include "wadc/tuner.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

#include <Eigen/Eigenvalues>
#include <json.hpp>

#include "wadc/dynamics.hpp"

namespace wadc {

namespace {

double damping_ratio(Complex lam) {
    const double mag = std::abs(lam);
    return mag > 0.0 ? -lam.real() / mag : 0.0;
}

/// Index of the upper-half eigenvalue closest to the expected location.
int nearest_upper(const CVec& eigs, Complex expected) {
    int best = -1;
    double best_d = std::numeric_limits<double>::max();
    for (int k = 0; k < eigs.size(); ++k) {
        if (eigs(k).imag() <= 0.0) continue;
        const double d = std::abs(eigs(k) - expected);
        if (d < best_d) {
            best_d = d;
            best = k;
        }
    }
    if (best < 0) throw NumericsError("closed-loop spectrum lost all oscillatory modes");
    return best;
}

/// Greedy global pairing of two spectra by distance; returns, for each
/// open-loop index, the matched closed-loop index.
std::vector<int> pair_spectra(const CVec& open, const CVec& closed) {
    struct Cand {
        double d;
        int i, k;
    };
    const int n = static_cast<int>(open.size());
    std::vector<Cand> cands;
    cands.reserve(static_cast<size_t>(n) * n);
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < n; ++k) cands.push_back({std::abs(closed(k) - open(i)), i, k});
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) { return a.d < b.d; });
    std::vector<int> match(n, -1);
    std::vector<bool> used(n, false);
    for (const auto& c : cands) {
        if (used[c.k] || match[c.i] >= 0) continue;
        used[c.k] = true;
        match[c.i] = c.k;
    }
    return match;
}

int conjugate_partner(const CVec& eigs, int j) {
    int best = -1;
    double best_d = std::numeric_limits<double>::max();
    for (int i = 0; i < eigs.size(); ++i) {
        if (i == j) continue;
        const double d = std::abs(eigs(i) - std::conj(eigs(j)));
        if (d < best_d) {
            best_d = d;
            best = i;
        }
    }
    return best;
}

}  // namespace

std::vector<GroupEntry> group_devices(const LinearModel& model, const ModalData& modal,
                                      const std::vector<ModeDescriptor>& modes,
                                      const std::vector<std::string>& target_names,
                                      std::vector<std::string> devices) {
    if (target_names.empty()) throw InputError("device grouping: no target modes given");
    if (devices.empty()) devices = model.input_names;
    if (devices.size() < target_names.size())
        throw InputError("device grouping: fewer devices than target modes");
    for (size_t i = 0; i < target_names.size(); ++i)
        for (size_t k = i + 1; k < target_names.size(); ++k)
            if (target_names[i] == target_names[k])
                throw InputError("device grouping: duplicate target mode '" + target_names[i] +
                                 "'");

    const int nt = static_cast<int>(target_names.size());
    const int nd = static_cast<int>(devices.size());
    std::vector<int> mode_idx(nt);
    for (int j = 0; j < nt; ++j) mode_idx[j] = require_mode(modes, target_names[j]).index;

    // |n_j^T b_d| per target j and device d.
    Mat cont(nt, nd);
    for (int d = 0; d < nd; ++d) {
        const CVec all = mode_controllability(modal, model.b.col(model.input_index(devices[d])));
        for (int j = 0; j < nt; ++j) cont(j, d) = std::abs(all(mode_idx[j]));
    }
    for (int j = 0; j < nt; ++j)
        if (cont.row(j).maxCoeff() <= 1e-12 * (1.0 + cont.maxCoeff()))
            throw InputError("device grouping: mode '" + target_names[j] +
                             "' has no controllability from any device");

    // Per-mode normalization puts modes of different scale on equal
    // footing before each device picks its strongest target.
    Mat norm_cont = cont;
    for (int j = 0; j < nt; ++j) norm_cont.row(j) /= cont.row(j).maxCoeff();
    std::vector<int> assign(nd);
    for (int d = 0; d < nd; ++d) {
        int arg = 0;
        norm_cont.col(d).maxCoeff(&arg);
        assign[d] = arg;
    }

    // Refill empty targets from groups that can spare a device.
    for (;;) {
        std::vector<int> count(nt, 0);
        for (int d = 0; d < nd; ++d) ++count[assign[d]];
        int empty = -1;
        for (int j = 0; j < nt; ++j)
            if (count[j] == 0) empty = j;
        if (empty < 0) break;
        int best_d = -1;
        double best_nc = -1.0;
        for (int d = 0; d < nd; ++d)
            if (count[assign[d]] > 1 && norm_cont(empty, d) > best_nc) {
                best_nc = norm_cont(empty, d);
                best_d = d;
            }
        if (best_d < 0)
            throw InputError("device grouping: cannot cover every target mode");
        assign[best_d] = empty;
    }

    std::vector<GroupEntry> groups(nt);
    for (int j = 0; j < nt; ++j) {
        groups[j].mode_name = target_names[j];
        groups[j].mode_index = mode_idx[j];
        for (int d = 0; d < nd; ++d) {
            if (assign[d] != j) continue;
            groups[j].devices.push_back(devices[d]);
            double cross = 0.0;
            for (int r = 0; r < nt; ++r)
                if (r != j) cross = std::max(cross, cont(r, d) / cont(j, d));
            groups[j].cross_ratio.push_back(cross);
        }
    }
    return groups;
}

ControllerSpec make_controller(const LinearModel& model, const std::string& device_id,
                               const ModeDescriptor& mode, const SignalCombination& signal) {
    if (signal.weights.empty())
        throw InputError("controller for device '" + device_id + "': the signal is empty");
    model.input_index(device_id);  // existence check

    ControllerSpec spec;
    spec.device_id = device_id;
    spec.mode_name = mode.name;
    spec.mode_index = mode.index;
    spec.gain = 1.0;
    spec.composite_row = Vec::Zero(model.n());
    for (const auto& [state_name, w] : signal.weights) {
        const int k = model.state_index(state_name);
        if (model.labels[k].kind != StateKind::rotor_speed)
            throw InputError("controller for device '" + device_id + "': signal weight on '" +
                             state_name + "', which is not a machine-speed measurement");
        const std::string output = model.labels[k].owner + ".speed";
        spec.weights.emplace_back(output, w);
        spec.composite_row += w * model.c.row(model.output_index(output)).transpose();
    }
    return spec;
}

std::vector<double> response_weights(const SystemCase& sc,
                                     const std::vector<std::string>& devices) {
    std::vector<double> eps;
    eps.reserve(devices.size());
    for (const auto& id : devices) {
        const Device& dev = sc.devices[static_cast<size_t>(sc.device_index(id))];
        const double headroom = dev.p_max_mw - dev.p_ref_mw;
        if (!(headroom > 0.0))
            throw InputError("device '" + id + "' has no response headroom (p_max <= p_ref)");
        eps.push_back(headroom);
    }
    return eps;
}

void tune_gains(std::vector<ControllerSpec>& group, const LinearModel& model,
                const ModalData& modal, const std::vector<double>& eps,
                const std::string& reference_device) {
    if (group.empty()) throw InputError("gain tuning: empty controller group");
    if (eps.size() != group.size())
        throw InputError("gain tuning: one response weight per controller required");
    const int j = group.front().mode_index;
    int ref = -1;
    for (size_t d = 0; d < group.size(); ++d) {
        if (group[d].mode_index != j)
            throw InputError("gain tuning: controllers in one group must share the target mode");
        if (!(eps[d] > 0.0)) throw InputError("gain tuning: response weights must be positive");
        if (group[d].device_id == reference_device) ref = static_cast<int>(d);
    }
    if (ref < 0)
        throw InputError("gain tuning: reference device '" + reference_device +
                         "' is not in the group");

    // Modal controllability and signal projection per device.
    std::vector<double> n_mag(group.size()), o_mag(group.size());
    for (size_t d = 0; d < group.size(); ++d) {
        const Vec b_col = model.b.col(model.input_index(group[d].device_id));
        const Complex n_d = mode_controllability(modal, b_col)(j);
        const Complex o_d = mode_observability(modal, group[d].composite_row)(j);
        if (std::abs(n_d) <= 1e-12 * (1.0 + b_col.norm() * modal.n_left.col(j).norm()))
            throw InputError("gain tuning: device '" + group[d].device_id +
                             "' has zero controllability of the target mode");
        if (std::abs(o_d) <=
            1e-12 * (1.0 + group[d].composite_row.norm() * modal.m.col(j).norm()))
            throw InputError("gain tuning: the signal for device '" + group[d].device_id +
                             "' has no projection on the target mode");
        n_mag[d] = std::abs(n_d);
        o_mag[d] = std::abs(o_d);
    }

    // |gain_d o_d| proportional to eps_d makes the pairwise shift ratios
    // |shift_a| / |shift_b| = eps_a |n_a| / (eps_b |n_b|).
    const double g_ref = group[static_cast<size_t>(ref)].gain;
    for (size_t d = 0; d < group.size(); ++d) {
        if (static_cast<int>(d) == ref) continue;
        const double sign = group[d].gain < 0.0 ? -1.0 : 1.0;
        group[d].gain = sign * std::abs(g_ref) * (eps[d] / eps[static_cast<size_t>(ref)]) *
                        (o_mag[static_cast<size_t>(ref)] / o_mag[d]);
    }
}

namespace {

struct GroupState {
    GroupEntry entry;
    double target = 0.0;
    std::vector<int> members;  // controller indices
    Complex lambda_open;
    Complex shift_sum;  // d lambda / d scale at base gains
    double scale = 0.0;
    double achieved = 0.0;
    bool feasible = true;
    std::string note;
};

class GroupScaler {
  public:
    GroupScaler(const LinearModel& model, const ModalData& modal,
                const std::vector<ControllerSpec>& base, std::vector<GroupState>& groups)
        : model_(model), modal_(modal), base_(base), groups_(groups) {
        // Oscillatory open-loop modes outside every targeted pair keep
        // their damping within 0.005 of open loop.
        std::vector<bool> targeted(static_cast<size_t>(modal.n()), false);
        for (const auto& g : groups_) {
            int j = g.entry.mode_index;
            targeted[static_cast<size_t>(j)] = true;
            const int partner = conjugate_partner(modal.eigenvalues, j);
            if (partner >= 0) targeted[static_cast<size_t>(partner)] = true;
        }
        for (int k = 0; k < modal.n(); ++k)
            if (modal.eigenvalues(k).imag() > 1e-6 && !targeted[static_cast<size_t>(k)])
                protected_.push_back(k);
    }

    struct Eval {
        CVec eigs;
        double worst_loss = 0.0;
        int worst_mode = -1;
    };

    Eval evaluate() const {
        std::vector<ControllerSpec> scaled = base_;
        for (const auto& g : groups_)
            for (int ci : g.members) scaled[static_cast<size_t>(ci)].gain *= g.scale;
        Eval ev;
        const Eigen::EigenSolver<Mat> es(closed_loop_matrix(model_, scaled), false);
        ev.eigs = es.eigenvalues();
        const std::vector<int> match = pair_spectra(modal_.eigenvalues, ev.eigs);
        for (int k : protected_) {
            const double loss = damping_ratio(modal_.eigenvalues(k)) -
                                damping_ratio(ev.eigs(match[static_cast<size_t>(k)]));
            if (loss > ev.worst_loss) {
                ev.worst_loss = loss;
                ev.worst_mode = k;
            }
        }
        return ev;
    }

    /// Target-mode damping for group g at scale s, tracked by continuation
    /// from the nearest already-evaluated scale.
    double zeta_at(GroupState& g, std::map<double, Complex>& seen, double s) {
        const double saved = g.scale;
        g.scale = s;
        const Eval ev = evaluate();
        g.scale = saved;

        Complex expected = g.lambda_open + s * g.shift_sum;
        if (!seen.empty()) {
            auto it = seen.lower_bound(s);
            if (it == seen.end() || (it != seen.begin() &&
                                     s - std::prev(it)->first < it->first - s))
                --it;
            expected = it->second + (s - it->first) * g.shift_sum;
        }
        const Complex lam = ev.eigs(nearest_upper(ev.eigs, expected));
        seen[s] = lam;
        last_eval_ = ev;
        return damping_ratio(lam);
    }

    double constraint_loss(GroupState& g, double s) {
        const double saved = g.scale;
        g.scale = s;
        const Eval ev = evaluate();
        g.scale = saved;
        last_eval_ = ev;
        return ev.worst_loss;
    }

    const Eval& last_eval() const { return last_eval_; }
    std::string mode_text(int k) const {
        std::ostringstream out;
        out.precision(3);
        out << "the " << modal_.eigenvalues(k).imag() / (2.0 * kPi) << " Hz mode";
        return out.str();
    }

  private:
    const LinearModel& model_;
    const ModalData& modal_;
    const std::vector<ControllerSpec>& base_;
    std::vector<GroupState>& groups_;
    std::vector<int> protected_;
    Eval last_eval_;
};

void solve_group(GroupScaler& scaler, GroupState& g) {
    constexpr double kTol = 0.005;       // acceptance band around the target
    constexpr double kLossTol = 0.005;   // damping another mode may lose
    const double zeta0 = damping_ratio(g.lambda_open);
    g.note.clear();
    if (zeta0 >= g.target - kTol) {
        g.scale = 0.0;
        g.achieved = zeta0;
        g.feasible = true;
        return;
    }
    if (std::abs(g.shift_sum) < 1e-300) {
        g.scale = 0.0;
        g.achieved = zeta0;
        g.feasible = false;
        g.note = "controllers produce no first-order shift of the target mode";
        return;
    }

    // Linear prediction seeds the bracket; bisection runs on the exact
    // closed-loop damping because the prediction degrades at large gain.
    const double dl = 1e-6 * std::abs(g.lambda_open) / std::abs(g.shift_sum);
    const double slope =
        (damping_ratio(g.lambda_open + dl * g.shift_sum) - zeta0) / dl;
    if (slope <= 0.0) {
        g.scale = 0.0;
        g.achieved = zeta0;
        g.feasible = false;
        g.note = "the group's feedback lowers the target mode's damping; check signal signs";
        return;
    }
    const double s_seed = (g.target - zeta0) / slope;

    std::map<double, Complex> seen;
    double s_lo = 0.0, z_lo = zeta0;
    double s_hi = s_seed, z_hi = scaler.zeta_at(g, seen, s_hi);
    bool monotone = true;
    double s_best = s_hi, z_best = z_hi;
    while (z_hi < g.target && s_hi < 64.0 * s_seed) {
        const double s_next = 2.0 * s_hi;
        const double z_next = scaler.zeta_at(g, seen, s_next);
        if (z_next < z_hi - 1e-9) {
            monotone = false;  // damping peaked below the target
            break;
        }
        s_lo = s_hi;
        z_lo = z_hi;
        s_hi = s_next;
        z_hi = z_next;
        if (z_hi > z_best) {
            z_best = z_hi;
            s_best = s_hi;
        }
    }

    double s_star;
    bool reached = z_hi >= g.target;
    if (reached) {
        if (z_lo >= g.target) {  // the seed already overshot; bracket from zero
            s_lo = 0.0;
            z_lo = zeta0;
        }
        double z_mid = z_hi;
        s_star = s_hi;
        for (int it = 0; it < 80 && std::abs(z_mid - g.target) > 1e-3; ++it) {
            const double mid = 0.5 * (s_lo + s_hi);
            z_mid = scaler.zeta_at(g, seen, mid);
            (z_mid < g.target ? s_lo : s_hi) = mid;
            s_star = mid;
            if (s_hi - s_lo < 1e-12 * s_hi) break;
        }
        g.achieved = z_mid;
    } else {
        s_star = s_best;
        g.achieved = z_best;
        g.feasible = false;
        std::ostringstream out;
        out.precision(4);
        out << "target zeta=" << g.target << " unreachable: damping "
            << (monotone ? "saturates" : "peaks") << " near zeta=" << z_best
            << " at scale " << s_best;
        g.note = out.str();
    }

    // Pull back to the constraint boundary when another mode pays for the
    // target; largest admissible scale by bisection from zero.
    if (scaler.constraint_loss(g, s_star) > kLossTol) {
        const int offender = scaler.last_eval().worst_mode;
        double lo = 0.0, hi = s_star;
        for (int it = 0; it < 60 && hi - lo > 1e-9 * s_star; ++it) {
            const double mid = 0.5 * (lo + hi);
            (scaler.constraint_loss(g, mid) <= kLossTol ? lo : hi) = mid;
        }
        s_star = lo;
        g.achieved = scaler.zeta_at(g, seen, s_star);
        g.feasible = false;
        std::ostringstream out;
        out.precision(4);
        if (!g.note.empty()) g.note += "; ";
        out << scaler.mode_text(offender) << " would lose more than " << kLossTol
            << " damping; achieved zeta=" << g.achieved << " at the constraint boundary";
        g.note += out.str();
    } else if (!monotone && g.feasible) {
        g.note = "damping is not monotone in the gain over the searched range";
    }
    g.scale = s_star;
}

}  // namespace

ControlDesign scale_to_target(const LinearModel& model, const ModalData& modal,
                              std::vector<ControllerSpec> controllers,
                              const std::vector<GroupEntry>& grouping,
                              const std::vector<DampingTarget>& targets) {
    if (grouping.size() != targets.size())
        throw InputError("gain scaling: one damping target per device group required");

    std::vector<GroupState> groups(grouping.size());
    std::vector<bool> claimed(controllers.size(), false);
    for (size_t gi = 0; gi < grouping.size(); ++gi) {
        GroupState& g = groups[gi];
        g.entry = grouping[gi];
        if (g.entry.devices.empty())
            throw InputError("gain scaling: group '" + g.entry.mode_name + "' has no devices");
        const DampingTarget* t = nullptr;
        for (const auto& cand : targets)
            if (cand.mode_name == g.entry.mode_name) t = &cand;
        if (!t)
            throw InputError("gain scaling: no damping target for mode '" + g.entry.mode_name +
                             "'");
        if (!(t->zeta >= 0.0 && t->zeta < 1.0))
            throw InputError("gain scaling: damping target must lie in [0, 1)");
        g.target = t->zeta;
        g.lambda_open = modal.eigenvalues(g.entry.mode_index);
        for (const auto& dev : g.entry.devices) {
            int found = -1;
            for (size_t ci = 0; ci < controllers.size(); ++ci)
                if (controllers[ci].device_id == dev) {
                    if (claimed[ci])
                        throw InputError("gain scaling: device '" + dev +
                                         "' appears in more than one group");
                    found = static_cast<int>(ci);
                }
            if (found < 0)
                throw InputError("gain scaling: no controller for device '" + dev + "'");
            if (controllers[static_cast<size_t>(found)].mode_index != g.entry.mode_index)
                throw InputError("gain scaling: controller for device '" + dev +
                                 "' targets a different mode than its group");
            claimed[static_cast<size_t>(found)] = true;
            g.members.push_back(found);
        }
        Complex shift = 0.0;
        for (int ci : g.members) {
            const auto& ctl = controllers[static_cast<size_t>(ci)];
            const Vec b_col = model.b.col(model.input_index(ctl.device_id));
            shift += ctl.gain * mode_controllability(modal, b_col)(g.entry.mode_index) *
                     mode_observability(modal, ctl.composite_row)(g.entry.mode_index);
        }
        g.shift_sum = shift;
    }
    for (size_t ci = 0; ci < controllers.size(); ++ci)
        if (!claimed[ci])
            throw InputError("gain scaling: controller for device '" + controllers[ci].device_id +
                             "' belongs to no group");

    GroupScaler scaler(model, modal, controllers, groups);
    // Later groups shift the loop the earlier ones were scaled against;
    // extra passes re-bisect any target that drifted.
    for (int pass = 0; pass < 3; ++pass) {
        bool dirty = false;
        for (auto& g : groups) {
            if (pass > 0) {
                if (!g.feasible) continue;
                std::map<double, Complex> seen;
                if (std::abs(scaler.zeta_at(g, seen, g.scale) - g.target) <= 0.005 ||
                    damping_ratio(g.lambda_open) >= g.target - 0.005)
                    continue;
            }
            solve_group(scaler, g);
            dirty = true;
        }
        if (pass > 0 && !dirty) break;
    }

    ControlDesign design;
    design.groups.reserve(groups.size());
    for (auto& g : groups) {
        for (int ci : g.members) controllers[static_cast<size_t>(ci)].gain *= g.scale;
        GroupResult res;
        res.group = std::move(g.entry);
        res.target_zeta = g.target;
        res.open_loop_zeta = damping_ratio(g.lambda_open);
        res.achieved_zeta = g.achieved > 0.0 || g.scale > 0.0 ? g.achieved
                                                              : damping_ratio(g.lambda_open);
        res.scale = g.scale;
        res.feasible = g.feasible;
        res.note = std::move(g.note);
        design.groups.push_back(std::move(res));
    }
    design.controllers = std::move(controllers);
    return design;
}

DecouplingReport verify_decoupling(const ControlDesign& design, const LinearModel& model,
                                   const ModalData& modal) {
    DecouplingReport rep = predict_closed_loop(modal, design.controllers, model);
    rep.flag_offdiag = rep.offdiag_ratio > 0.30;

    std::vector<bool> targeted(static_cast<size_t>(modal.n()), false);
    for (int j : rep.target_modes) {
        targeted[static_cast<size_t>(j)] = true;
        const int partner = conjugate_partner(modal.eigenvalues, j);
        if (partner >= 0) targeted[static_cast<size_t>(partner)] = true;
    }
    rep.max_nontarget_rel_move = 0.0;
    for (const auto& md : classify_modes(modal)) {
        if (md.cls == ModeClass::non_electromechanical) continue;
        if (targeted[static_cast<size_t>(md.index)]) continue;
        const double mag = std::abs(modal.eigenvalues(md.index));
        if (mag <= 0.0) continue;
        rep.max_nontarget_rel_move =
            std::max(rep.max_nontarget_rel_move, rep.displacement(md.index) / mag);
    }
    rep.flag_nontarget_move = rep.max_nontarget_rel_move > 0.05;
    return rep;
}

DesignOutput design_controllers(const SystemCase& sc, const std::vector<DampingTarget>& targets,
                                const DesignOptions& opts) {
    if (targets.empty()) throw InputError("controller design: no damping targets given");
    const OperatingPoint op = solve_power_flow(sc);
    const ReducedNetwork red = kron_reduce(sc, op);
    const LinearModel model = build_linear_model(sc, op, red);
    const ModalData modal = eig_decompose(model);
    const std::vector<ModeDescriptor> modes = classify_modes(modal);

    // Signal synthesis runs on the classical swing model: the synthesized
    // combination only reads machine speeds, which both models share.
    ModelConfig classical;
    classical.with_exciter = false;
    classical.with_governor = false;
    const LinearModel design_model = build_linear_model(sc, op, red, classical);

    std::vector<std::string> names;
    names.reserve(targets.size());
    for (const auto& t : targets) names.push_back(t.mode_name);
    const std::vector<GroupEntry> grouping =
        group_devices(model, modal, modes, names, opts.devices);

    const Vec grid = log_grid(opts.gamma_min, opts.gamma_max, opts.gamma_steps);
    const Mat r_mat = Mat::Constant(1, 1, opts.r);
    const double zeta_cost = sc.omega_syn() * sc.omega_syn();

    DesignOutput out;
    std::vector<ControllerSpec> controllers;
    std::vector<double> eps_all;
    for (const auto& group : grouping) {
        const ModeDescriptor& mode = require_mode(modes, group.mode_name);
        CostSpec cost;
        if (mode.cls == ModeClass::common) {
            cost.kind = CostSpec::Kind::coi;
        } else {
            cost.kind = CostSpec::Kind::relative_speed;
            cost.group_a = mode.group_a;
            cost.group_b = mode.group_b;
        }
        cost.zeta = zeta_cost;
        const Mat q = build_state_cost(design_model, sc, cost);

        std::vector<ControllerSpec> members;
        for (const auto& device : group.devices) {
            const LqrspProblem prob = make_design_problem(design_model, q, r_mat, device, grid);
            const std::vector<SparseSolution> sweep = lqrsp_sweep(prob);
            const SparseSolution& best = select_solution(sweep, opts.max_degradation);
            const SignalCombination signal = extract_signal(prob, best, opts.truncate_tau);
            members.push_back(make_controller(model, device, mode, signal));
            if (opts.collect_sweeps) out.sweeps.emplace_back(device, sweep_csv(sweep));
        }
        const std::vector<double> eps = response_weights(sc, group.devices);
        tune_gains(members, model, modal, eps, group.devices.front());
        controllers.insert(controllers.end(), std::make_move_iterator(members.begin()),
                           std::make_move_iterator(members.end()));
        eps_all.insert(eps_all.end(), eps.begin(), eps.end());
    }

    std::vector<DampingTarget> ordered;
    ordered.reserve(grouping.size());
    for (const auto& group : grouping)
        for (const auto& t : targets)
            if (t.mode_name == group.mode_name) ordered.push_back(t);
    out.design = scale_to_target(model, modal, std::move(controllers), grouping, ordered);
    out.design.eps = std::move(eps_all);
    for (size_t gi = 0; gi < out.design.groups.size(); ++gi)
        out.design.groups[gi].reference_device = grouping[gi].devices.front();
    out.design.report = verify_decoupling(out.design, model, modal);
    out.design.verified = true;
    return out;
}

std::string design_json(const ControlDesign& design) {
    if (!design.verified)
        throw InputError("design export requires a verification report; run verify_decoupling");
    nlohmann::ordered_json doc;
    doc["controllers"] = nlohmann::ordered_json::array();
    for (size_t ci = 0; ci < design.controllers.size(); ++ci) {
        const auto& ctl = design.controllers[ci];
        nlohmann::ordered_json jc;
        jc["device"] = ctl.device_id;
        jc["mode"] = ctl.mode_name;
        jc["gain"] = ctl.gain;
        nlohmann::ordered_json jw = nlohmann::ordered_json::object();
        for (const auto& [name, w] : ctl.weights) jw[name] = w;
        jc["signal_weights"] = std::move(jw);
        if (ci < design.eps.size()) jc["response_weight_mw"] = design.eps[ci];
        doc["controllers"].push_back(std::move(jc));
    }
    doc["groups"] = nlohmann::ordered_json::array();
    for (const auto& g : design.groups) {
        nlohmann::ordered_json jg;
        jg["mode"] = g.group.mode_name;
        jg["devices"] = g.group.devices;
        jg["cross_controllability_ratio"] = g.group.cross_ratio;
        jg["reference_device"] = g.reference_device;
        jg["target_zeta"] = g.target_zeta;
        jg["open_loop_zeta"] = g.open_loop_zeta;
        jg["achieved_zeta"] = g.achieved_zeta;
        jg["scale"] = g.scale;
        jg["feasible"] = g.feasible;
        if (!g.note.empty()) jg["note"] = g.note;
        doc["groups"].push_back(std::move(jg));
    }
    nlohmann::ordered_json jr;
    jr["offdiag_ratio"] = design.report.offdiag_ratio;
    jr["flag_offdiag"] = design.report.flag_offdiag;
    jr["max_nontarget_rel_move"] = design.report.max_nontarget_rel_move;
    jr["flag_nontarget_move"] = design.report.flag_nontarget_move;
    jr["target_mode_indices"] = design.report.target_modes;
    auto cvec = [](const CVec& v) {
        nlohmann::ordered_json arr = nlohmann::ordered_json::array();
        for (int k = 0; k < v.size(); ++k)
            arr.push_back(nlohmann::ordered_json::array({v(k).real(), v(k).imag()}));
        return arr;
    };
    jr["controller_shift"] = cvec(design.report.controller_shift);
    jr["predicted_spectrum"] = cvec(design.report.predicted);
    jr["closed_loop_spectrum"] = cvec(design.report.actual);
    doc["verification"] = std::move(jr);
    return doc.dump(2) + "\n";
}

}  // namespace wadc
