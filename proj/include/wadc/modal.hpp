#pragma once

#include <string>
#include <utility>
#include <vector>

#include "wadc/linearize.hpp"

namespace wadc {

/// Eigenstructure of a state matrix: A M = M diag(lambda) and N^T M = I,
/// so single-mode feedback predictions n_j^T B ... m_j are exact.
struct ModalData {
    CVec eigenvalues;
    CMat m;       // right modal matrix, columns m_j
    CMat n_left;  // left modal matrix, columns n_j
    std::vector<StateLabel> labels;
    double cond_m = 0.0;

    int n() const { return static_cast<int>(eigenvalues.size()); }
};

/// Dense eigendecomposition; left vectors from the inverse of M. Throws
/// NumericsError when M is near-defective (condition number above 1e12).
ModalData eig_decompose(const LinearModel& model);
ModalData eig_decompose_matrix(const Mat& a, const std::vector<StateLabel>& labels);

enum class ModeClass { local, inter_area, common, non_electromechanical };
std::string to_string(ModeClass cls);

struct ModeDescriptor {
    std::string name;
    int index = 0;  // into ModalData eigenvalues; upper-half member for pairs
    Complex eigenvalue;
    double frequency_hz = 0.0;
    double damping_ratio = 0.0;
    ModeClass cls = ModeClass::non_electromechanical;
    std::vector<std::string> group_a;  // coherent machine set (all participants for common)
    std::vector<std::string> group_b;  // opposing set; empty for common
};

/// One descriptor per conjugate pair (upper-half member) and per real
/// eigenvalue. Oscillatory pairs are classified by the phase geometry of
/// their machine-speed mode-shape entries; everything else is
/// non-electromechanical.
std::vector<ModeDescriptor> classify_modes(const ModalData& modal);

const ModeDescriptor* find_mode(const std::vector<ModeDescriptor>& modes, const std::string& name);
/// find_mode that throws InputError listing the available names.
const ModeDescriptor& require_mode(const std::vector<ModeDescriptor>& modes, const std::string& name);

/// n_j^T b for every mode j.
CVec mode_controllability(const ModalData& modal, const Vec& b_col);
/// c^T m_j for every mode j.
CVec mode_observability(const ModalData& modal, const Vec& c_row);

/// One decoupled damping controller: u_d = gain * (composite_row . (x - x0)),
/// where composite_row is a weighted sum of the model's named output rows.
struct ControllerSpec {
    std::string device_id;
    std::string mode_name;
    int mode_index = 0;  // target mode, upper-half member
    std::vector<std::pair<std::string, double>> weights;  // over named outputs
    double gain = 0.0;
    Vec composite_row;
};

Mat closed_loop_matrix(const LinearModel& model, const std::vector<ControllerSpec>& controllers);

struct DecouplingReport {
    std::vector<int> target_modes;   // distinct targeted mode indices, ascending
    CVec controller_shift;           // predicted shift per controller (target mode)
    CMat a_star;                     // cross-mode submatrix over target_modes
    CVec predicted;                  // full predicted closed-loop spectrum
    CVec actual;                     // eigenvalues of the closed-loop matrix
    Vec displacement;                // |actual - open| per open-loop eigenvalue
    double offdiag_ratio = 0.0;      // max off-diagonal |a_kl| / min diagonal shift

    // set by verify_decoupling
    bool flag_offdiag = false;
    bool flag_nontarget_move = false;
    double max_nontarget_rel_move = 0.0;
};

/// First-order decoupled prediction (per-mode shifts and the cross-mode
/// submatrix) next to the exact closed-loop spectrum.
DecouplingReport predict_closed_loop(const ModalData& modal,
                                     const std::vector<ControllerSpec>& controllers,
                                     const LinearModel& model);

/// JSON report: mode descriptors plus a device-by-mode controllability table.
std::string dump_modes(const std::vector<ModeDescriptor>& modes, const ModalData& modal,
                       const LinearModel& model);

}  // namespace wadc
