#include <doctest.h>

#include <random>

#include <unsupported/Eigen/MatrixFunctions>

#include "test_util.hpp"
#include "wadc/modal.hpp"
#include "wadc/sysmodel.hpp"

using namespace wadc;

namespace {

LinearModel mixed_model(const std::string& text, const ModelConfig& cfg = {}) {
    const SystemCase sc = load_case(text);
    const OperatingPoint op = solve_power_flow(sc);
    return build_linear_model(sc, op, kron_reduce(sc, op), cfg);
}

std::vector<StateLabel> rotor_labels(int n_machines) {
    std::vector<StateLabel> labels;
    for (int m = 0; m < n_machines; ++m) {
        labels.push_back({StateKind::rotor_angle, "G" + std::to_string(m + 1), 0});
        labels.push_back({StateKind::rotor_speed, "G" + std::to_string(m + 1), 0});
    }
    return labels;
}

/// Real matrix with a prescribed eigenstructure: conjugate pairs
/// (lambda_k, speed-shape column s_k) with angle rows tied by
/// d(angle)/dt = omega_s * speed.
Mat matrix_from_modes(const std::vector<Complex>& lambdas, const std::vector<CVec>& shapes) {
    const int n_m = static_cast<int>(shapes[0].size());
    const int n = 2 * n_m;
    REQUIRE(2 * static_cast<int>(lambdas.size()) == n);
    const double omega_s = 2.0 * kPi * 60.0;
    CMat m(n, n);
    CVec lam(n);
    for (size_t k = 0; k < lambdas.size(); ++k) {
        CVec col(n);
        for (int i = 0; i < n_m; ++i) {
            col(2 * i + 1) = shapes[k](i);
            col(2 * i) = omega_s * shapes[k](i) / lambdas[k];
        }
        col /= col.norm();  // scaling a column leaves M Lambda M^-1 unchanged
        m.col(2 * static_cast<int>(k)) = col;
        m.col(2 * static_cast<int>(k) + 1) = col.conjugate();
        lam(2 * static_cast<int>(k)) = lambdas[k];
        lam(2 * static_cast<int>(k) + 1) = std::conj(lambdas[k]);
    }
    const CMat a = m * lam.asDiagonal() * m.inverse();
    REQUIRE(a.imag().cwiseAbs().maxCoeff() < 1e-8 * a.real().cwiseAbs().maxCoeff());
    return a.real();
}

/// Greedy multiset comparison of two spectra.
void check_spectra_match(CVec expected, const CVec& actual, double tol) {
    REQUIRE(expected.size() == actual.size());
    std::vector<bool> used(actual.size(), false);
    for (int i = 0; i < expected.size(); ++i) {
        int best = -1;
        double best_d = std::numeric_limits<double>::max();
        for (int k = 0; k < actual.size(); ++k) {
            if (used[k]) continue;
            const double d = std::abs(actual(k) - expected(i));
            if (d < best_d) {
                best_d = d;
                best = k;
            }
        }
        REQUIRE(best >= 0);
        used[best] = true;
        CHECK(best_d < tol);
    }
}

}  // namespace

TEST_CASE("diagonal matrix decomposes to the canonical order") {
    Mat a = Mat::Zero(2, 2);
    a(0, 0) = -1.0;
    a(1, 1) = -2.0;
    const ModalData modal = eig_decompose_matrix(a, {});
    CHECK(modal.eigenvalues(0).real() == doctest::Approx(-2.0));
    CHECK(modal.eigenvalues(1).real() == doctest::Approx(-1.0));
    CHECK(std::abs(modal.m(1, 0)) == doctest::Approx(1.0));
    CHECK(std::abs(modal.m(0, 0)) == doctest::Approx(0.0).scale(1.0));
    CHECK((modal.n_left.transpose() * modal.m - CMat::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("oscillator pair keeps exact left-right biorthogonality") {
    Mat a(2, 2);
    a << 0.0, 1.0, -4.0, -0.2;
    const ModalData modal = eig_decompose_matrix(a, {});
    const Complex expected(-0.1, std::sqrt(4.0 - 0.01));
    // Upper-half member sorts before its conjugate.
    CHECK(std::abs(modal.eigenvalues(0) - expected) < 1e-12);
    CHECK(std::abs(modal.eigenvalues(1) - std::conj(expected)) < 1e-12);
    CHECK((modal.n_left.transpose() * modal.m - CMat::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("random systems satisfy the modal identities") {
    std::mt19937 rng(31);
    for (int trial = 0; trial < 6; ++trial) {
        const Mat a = testutil::random_stable(8, rng);
        const ModalData modal = eig_decompose_matrix(a, {});
        const double scale = a.cwiseAbs().maxCoeff();
        CHECK((a.cast<Complex>() * modal.m - modal.m * modal.eigenvalues.asDiagonal())
                  .cwiseAbs()
                  .maxCoeff() < 1e-10 * scale);
        CHECK((modal.n_left.transpose() * modal.m - CMat::Identity(8, 8)).cwiseAbs().maxCoeff() <
              1e-10 * modal.cond_m);
        CHECK(modal.cond_m >= 1.0);
    }
}

TEST_CASE("a near-defective matrix is rejected") {
    Mat a(2, 2);
    a << 0.0, 1.0, 0.0, 1e-13;
    CHECK_THROWS_AS((void)eig_decompose_matrix(a, {}), NumericsError);
}

TEST_CASE("conjugate modes carry conjugate controllability") {
    std::mt19937 rng(7);
    const Mat a = testutil::random_stable(6, rng);
    const Vec b = testutil::random_matrix(6, 1, rng).col(0);
    const ModalData modal = eig_decompose_matrix(a, {});
    const CVec contr = mode_controllability(modal, b);
    for (int j = 0; j + 1 < 6; ++j) {
        if (modal.eigenvalues(j).imag() <= 1e-9) continue;
        if (std::abs(modal.eigenvalues(j + 1) - std::conj(modal.eigenvalues(j))) > 1e-12) continue;
        CHECK(std::abs(contr(j + 1) - std::conj(contr(j))) < 1e-10);
    }
}

TEST_CASE("single-mode feedback through the left eigenvector moves only that mode") {
    std::mt19937 rng(47);
    for (int trial = 0; trial < 5; ++trial) {
        const int n = 6 + 2 * (trial % 4);
        const Mat a = testutil::random_stable(n, rng);
        const Vec b = testutil::random_matrix(n, 1, rng).col(0);
        const ModalData modal = eig_decompose_matrix(a, {});

        int j = -1;
        for (int i = 0; i < n; ++i)
            if (modal.eigenvalues(i).imag() > 1e-9) j = i;
        if (j < 0) continue;

        const Complex gain(0.3, -0.45);
        const CMat a_cl = a.cast<Complex>() +
                          b.cast<Complex>() * (gain * modal.n_left.col(j).transpose());
        const Eigen::ComplexEigenSolver<CMat> ces(a_cl);
        REQUIRE(ces.info() == Eigen::Success);

        CVec expected = modal.eigenvalues;
        expected(j) += gain * mode_controllability(modal, b)(j);
        check_spectra_match(expected, ces.eigenvalues(), 1e-8 * a.cwiseAbs().maxCoeff());
    }
}

TEST_CASE("simultaneous single-mode loops factor through the cross-mode block") {
    std::mt19937 rng(59);
    const int n = 10;
    const Mat a = testutil::random_stable(n, rng);
    const Vec b1 = testutil::random_matrix(n, 1, rng).col(0);
    const Vec b2 = testutil::random_matrix(n, 1, rng).col(0);
    const ModalData modal = eig_decompose_matrix(a, {});

    std::vector<int> osc;
    for (int i = 0; i < n; ++i)
        if (modal.eigenvalues(i).imag() > 1e-9) osc.push_back(i);
    REQUIRE(osc.size() >= 2);
    const int j1 = osc[0], j2 = osc[1];

    const Complex k1(0.2, 0.1), k2(-0.15, 0.3);
    const CMat a_cl = a.cast<Complex>() +
                      b1.cast<Complex>() * (k1 * modal.n_left.col(j1).transpose()) +
                      b2.cast<Complex>() * (k2 * modal.n_left.col(j2).transpose());

    const CVec c1 = mode_controllability(modal, b1);
    const CVec c2 = mode_controllability(modal, b2);
    CMat block(2, 2);
    block << modal.eigenvalues(j1) + k1 * c1(j1), k2 * c2(j1),
             k1 * c1(j2), modal.eigenvalues(j2) + k2 * c2(j2);
    const Eigen::ComplexEigenSolver<CMat> block_es(block);

    CVec expected(n);
    int w = 0;
    for (int i = 0; i < n; ++i)
        if (i != j1 && i != j2) expected(w++) = modal.eigenvalues(i);
    expected(w++) = block_es.eigenvalues()(0);
    expected(w++) = block_es.eigenvalues()(1);
    REQUIRE(w == n);

    const Eigen::ComplexEigenSolver<CMat> ces(a_cl);
    check_spectra_match(expected, ces.eigenvalues(), 1e-8 * a.cwiseAbs().maxCoeff());
}

TEST_CASE("synthetic shapes classify by phase geometry") {
    // Pair 1: all speeds in phase at 0.062 Hz -> common, despite sitting far
    // below the oscillatory band of the named swing classes.
    // Pair 2: two groups in anti-phase at 0.7 Hz -> inter-area.
    const Complex lam_common(-0.4720, 0.3909);
    const Complex lam_inter(-0.2, 2.0 * kPi * 0.7);
    CVec s_common(3), s_inter(3);
    s_common << Complex(1.0, 0.0), std::polar(0.8, 0.15), std::polar(0.9, -0.2);
    s_inter << Complex(1.0, 0.0), std::polar(0.85, kPi - 0.1), std::polar(0.1, kPi + 0.2);

    // Third pair fills the state space: local swing at 1.6 Hz between G1 and G2.
    const Complex lam_local(-0.5, 2.0 * kPi * 1.6);
    CVec s_local(3);
    s_local << Complex(1.0, 0.0), std::polar(0.95, kPi + 0.05), std::polar(0.02, 0.3);

    const Mat a = matrix_from_modes({lam_common, lam_inter, lam_local},
                                    {s_common, s_inter, s_local});
    const ModalData modal = eig_decompose_matrix(a, rotor_labels(3));
    const auto modes = classify_modes(modal);

    const ModeDescriptor& common = require_mode(modes, "common");
    CHECK(std::abs(common.eigenvalue - lam_common) < 1e-8);
    CHECK(common.frequency_hz == doctest::Approx(0.0622).epsilon(0.01));
    CHECK(common.group_a == std::vector<std::string>{"G1", "G2", "G3"});
    CHECK(common.group_b.empty());

    const ModeDescriptor& inter = require_mode(modes, "inter-area");
    CHECK(std::abs(inter.eigenvalue - lam_inter) < 1e-8);
    // G3 participates below the 25% cutoff and stays unassigned.
    CHECK(inter.group_a == std::vector<std::string>{"G1"});
    CHECK(inter.group_b == std::vector<std::string>{"G2"});

    const ModeDescriptor& local = require_mode(modes, "local-1");
    CHECK(std::abs(local.eigenvalue - lam_local) < 1e-8);
    CHECK(local.group_a == std::vector<std::string>{"G1"});
    CHECK(local.group_b == std::vector<std::string>{"G2"});

    CHECK(find_mode(modes, "nonexistent") == nullptr);
    CHECK_THROWS_AS((void)require_mode(modes, "nonexistent"), InputError);
}

TEST_CASE("classification is invariant to eigenvector scaling") {
    const LinearModel lm = mixed_model(testutil::mixed_case());
    ModalData modal = eig_decompose(lm);
    const auto before = classify_modes(modal);

    std::mt19937 rng(3);
    std::uniform_real_distribution<double> mag(0.3, 3.0), ph(-kPi, kPi);
    for (int j = 0; j < modal.n(); ++j) {
        const Complex s = std::polar(mag(rng), ph(rng));
        modal.m.col(j) *= s;
        modal.n_left.col(j) /= s;
    }
    const auto after = classify_modes(modal);

    REQUIRE(before.size() == after.size());
    for (size_t k = 0; k < before.size(); ++k) {
        CHECK(before[k].name == after[k].name);
        CHECK(before[k].cls == after[k].cls);
        CHECK(before[k].group_a == after[k].group_a);
        CHECK(before[k].group_b == after[k].group_b);
    }
}

TEST_CASE("two-machine model exposes an anti-phase swing mode") {
    const LinearModel lm = mixed_model(testutil::mixed_case());
    const ModalData modal = eig_decompose(lm);
    const auto modes = classify_modes(modal);

    const ModeDescriptor* swing = nullptr;
    for (const auto& md : modes)
        if (md.cls == ModeClass::local || md.cls == ModeClass::inter_area) swing = &md;
    REQUIRE(swing != nullptr);
    CHECK(swing->group_a.size() == 1);
    CHECK(swing->group_b.size() == 1);
    CHECK(swing->group_a[0] != swing->group_b[0]);
    CHECK(swing->damping_ratio > 0.0);
    CHECK(swing->frequency_hz > 0.1);
    CHECK(swing->frequency_hz < 3.0);
}

TEST_CASE("modal expansion reproduces the impulse response") {
    const LinearModel lm = mixed_model(testutil::mixed_case());
    const ModalData modal = eig_decompose(lm);
    const Vec b = lm.b.col(0);
    const Vec c = lm.c.row(lm.output_index("coi.speed")).transpose();

    const CVec contr = mode_controllability(modal, b);
    const CVec obs = mode_observability(modal, c);

    double y_scale = 0.0;
    std::vector<double> ts, ys;
    for (double t = 0.0; t <= 5.0; t += 0.25) {
        Complex y_modal = 0.0;
        for (int j = 0; j < modal.n(); ++j)
            y_modal += obs(j) * contr(j) * std::exp(modal.eigenvalues(j) * t);
        CHECK(std::abs(y_modal.imag()) < 1e-10);
        const Mat ph = (lm.a * t).exp();
        const double y_exact = c.dot(ph * b);
        ts.push_back(y_exact);
        ys.push_back(y_modal.real());
        y_scale = std::max(y_scale, std::abs(y_exact));
    }
    REQUIRE(y_scale > 0.0);
    for (size_t k = 0; k < ts.size(); ++k) CHECK(std::abs(ts[k] - ys[k]) < 1e-6 * y_scale);
}

TEST_CASE("zero-gain controllers predict no displacement") {
    const LinearModel lm = mixed_model(testutil::mixed_case());
    const ModalData modal = eig_decompose(lm);

    ControllerSpec ctl;
    ctl.device_id = "D1";
    ctl.mode_index = 0;
    ctl.gain = 0.0;
    ctl.composite_row = lm.c.row(0).transpose();

    const DecouplingReport rep = predict_closed_loop(modal, {ctl}, lm);
    CHECK(std::abs(rep.controller_shift(0)) == 0.0);
    CHECK(rep.displacement.maxCoeff() < 1e-9);
    for (int i = 0; i < modal.n(); ++i)
        CHECK(std::abs(rep.predicted(i) - modal.eigenvalues(i)) == 0.0);

    ControllerSpec bad = ctl;
    bad.mode_index = modal.n() + 3;
    CHECK_THROWS_AS((void)predict_closed_loop(modal, {bad}, lm), InputError);
}

TEST_CASE("mode report lists devices against classified modes") {
    const LinearModel lm = mixed_model(testutil::mixed_case());
    const ModalData modal = eig_decompose(lm);
    const auto modes = classify_modes(modal);
    const std::string text = dump_modes(modes, modal, lm);
    CHECK(text.find("\"device\": \"D1\"") != std::string::npos);
    CHECK(text.find("\"magnitude\"") != std::string::npos);
    CHECK(text.find("non-electromechanical") != std::string::npos);
}
