#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "test_main.hpp"

#include "sysid/error.hpp"
#include "sysid/subspace.hpp"

#include <complex>
#include <numbers>

using namespace sysid;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

/// Longhand simulation of x_{t+1} = A x_t + B u_t, y_t = C x_t.
MatrixXd simulate_ref(const MatrixXd& A, const MatrixXd& B, const MatrixXd& C, VectorXd x, const MatrixXd& u) {
    MatrixXd y(u.rows(), C.rows());
    for (Eigen::Index k = 0; k < u.rows(); ++k) {
        y.row(k) = (C * x).transpose();
        x = A * x + B * u.row(k).transpose();
    }
    return y;
}

struct TrueSystem {
    MatrixXd A, B, C;
};

TrueSystem random_stable(Eigen::Index nx, Eigen::Index nu, Eigen::Index ny, std::mt19937_64& rng) {
    TrueSystem s;
    s.A = testutil::random_matrix(nx, nx, rng);
    std::uniform_real_distribution<double> rad(0.3, 0.95);
    const double rho = s.A.eigenvalues().cwiseAbs().maxCoeff();
    s.A *= rad(rng) / rho;
    s.B = testutil::random_matrix(nx, nu, rng);
    s.C = testutil::random_matrix(ny, nx, rng);
    return s;
}

double markov_gap(const std::vector<MatrixXd>& a, const std::vector<MatrixXd>& b) {
    double worst = 0;
    for (std::size_t k = 0; k < a.size(); ++k) worst = std::max(worst, (a[k] - b[k]).cwiseAbs().maxCoeff());
    return worst;
}

std::vector<MatrixXd> true_markov(const TrueSystem& s, int count) {
    std::vector<MatrixXd> out;
    MatrixXd akb = s.B;
    for (int k = 0; k < count; ++k) {
        out.push_back(s.C * akb);
        akb = s.A * akb;
    }
    return out;
}

Trajectory noiseless_data(const TrueSystem& s, Eigen::Index n, std::mt19937_64& rng) {
    const MatrixXd u = testutil::random_matrix(n, s.B.cols(), rng);
    const VectorXd x0 = testutil::random_matrix(s.A.rows(), 1, rng);
    return make_trajectory(1.0, u, simulate_ref(s.A, s.B, s.C, x0, u));
}

const SubspaceMethod kMethods[] = {SubspaceMethod::n4sid, SubspaceMethod::moesp, SubspaceMethod::cva};

}  // namespace

TEST_CASE("block_hankel") {
    MatrixXd s(4, 1);
    s << 1, 2, 3, 4;
    MatrixXd expect(2, 3);
    expect << 1, 2, 3, 2, 3, 4;
    CHECK(block_hankel(s, 2) == expect);
    CHECK(block_hankel(s, 1) == s.transpose());
    CHECK_THROWS_AS(block_hankel(s, 5), TooShortError);

    std::mt19937_64 rng(1);
    const MatrixXd r = testutil::random_matrix(30, 3, rng);
    const MatrixXd h = block_hankel(r, 7);
    REQUIRE(h.rows() == 21);
    REQUIRE(h.cols() == 24);
    for (Eigen::Index j = 0; j < h.cols(); ++j)
        for (Eigen::Index b = 0; b < 7; ++b)
            for (Eigen::Index c = 0; c < 3; ++c) CHECK(h(b * 3 + c, j) == r(j + b, c));
}

TEST_CASE("scalar system eigenvalue is recovered by every method") {
    TrueSystem s{MatrixXd::Constant(1, 1, 0.9), MatrixXd::Ones(1, 1), MatrixXd::Ones(1, 1)};
    std::mt19937_64 rng(2);
    const Trajectory tr = noiseless_data(s, 500, rng);
    for (auto m : kMethods) {
        const Lssm id = identify(tr, {m, 1, 5});
        REQUIRE(id.n_x() == 1);
        CHECK_MESSAGE(std::abs(id.A(0, 0) - 0.9) < 1e-6, to_string(m));
        CHECK(id.K.cwiseAbs().maxCoeff() < 1e-6);
    }
}

TEST_CASE("damped oscillator eigenvalues are recovered") {
    const double w = 1.3, zeta = 0.05, dt = 0.1;
    // exact discretization of the continuous oscillator: eigenvalues exp(lambda*dt)
    const std::complex<double> lambda(-zeta * w, w * std::sqrt(1 - zeta * zeta));
    const std::complex<double> z = std::exp(lambda * dt);
    MatrixXd a(2, 2);
    const double rr = std::abs(z), th = std::arg(z);
    a << rr * std::cos(th), -rr * std::sin(th), rr * std::sin(th), rr * std::cos(th);
    TrueSystem s{a, MatrixXd(2, 1), MatrixXd(1, 2)};
    s.B << 0, 1;
    s.C << 1, 0.5;
    std::mt19937_64 rng(3);
    const Trajectory tr = noiseless_data(s, 800, rng);
    for (auto m : kMethods) {
        const Lssm id = identify(tr, {m, 2, 6});
        const Eigen::VectorXcd ev = id.A.eigenvalues();
        const double e1 = std::min(std::abs(ev(0) - z), std::abs(ev(0) - std::conj(z)));
        const double e2 = std::min(std::abs(ev(1) - z), std::abs(ev(1) - std::conj(z)));
        CHECK_MESSAGE(std::max(e1, e2) < 1e-5, to_string(m));
        CHECK(std::abs(ev(0).imag()) > 0.1);
    }
    // autonomous: a free response alone identifies the same poles
    const MatrixXd y = simulate_ref(a, MatrixXd::Zero(2, 0), s.C, VectorXd::Ones(2), MatrixXd::Zero(400, 0));
    const Trajectory free = make_trajectory(dt, MatrixXd::Zero(400, 0), y);
    const Lssm idf = identify(free, {SubspaceMethod::n4sid, 2, 5});
    CHECK(idf.n_u() == 0);
    const Eigen::VectorXcd ef = idf.A.eigenvalues();
    CHECK(std::min(std::abs(ef(0) - z), std::abs(ef(0) - std::conj(z))) < 1e-5);
}

TEST_CASE("white-noise output raises the ill-conditioned warning") {
    std::mt19937_64 rng(4);
    const MatrixXd u = testutil::random_matrix(3000, 1, rng);
    const MatrixXd y = testutil::random_matrix(3000, 1, rng);
    const Lssm id = identify(make_trajectory(1.0, u, y), {SubspaceMethod::n4sid, 2, 5});
    bool warned = false;
    for (const auto& w : id.warnings) warned |= w.find("ill-conditioned") != std::string::npos;
    CHECK(warned);
    CHECK(id.singular_values(2) / id.singular_values(0) > 0.5);
}

TEST_CASE("order larger than the data supports is reduced with a warning") {
    TrueSystem s{MatrixXd::Constant(1, 1, 0.7), MatrixXd::Ones(1, 1), MatrixXd::Ones(1, 1)};
    std::mt19937_64 rng(5);
    const Lssm id = identify(noiseless_data(s, 400, rng), {SubspaceMethod::moesp, 6, 8});
    CHECK(id.n_x() == 1);
    CHECK(!id.warnings.empty());
}

TEST_CASE("exact recovery of Markov parameters on random stable systems") {
    std::mt19937_64 rng(6);
    double worst = 0, worst_pair = 0;
    for (int trial = 0; trial < 12; ++trial) {
        const Eigen::Index nx = 1 + trial % 4;
        const Eigen::Index nu = 1 + (trial / 4) % 2;
        const Eigen::Index ny = 1 + (trial / 2) % 2;
        const TrueSystem s = random_stable(nx, nu, ny, rng);
        const Trajectory tr = noiseless_data(s, 1500, rng);
        const auto ref = true_markov(s, 20);
        std::vector<std::vector<MatrixXd>> got;
        for (auto m : kMethods) {
            const Lssm id = identify(tr, {m, nx, 8});
            got.push_back(markov_parameters(id, 20));
            worst = std::max(worst, markov_gap(got.back(), ref));
        }
        worst_pair = std::max({worst_pair, markov_gap(got[0], got[1]), markov_gap(got[0], got[2]), markov_gap(got[1], got[2])});
    }
    MESSAGE("worst Markov error " << worst << ", worst pairwise " << worst_pair);
    CHECK(worst < 1e-6);
    CHECK(worst_pair < 1e-6);
}

TEST_CASE("identify is deterministic and checks its inputs") {
    std::mt19937_64 rng(7);
    const TrueSystem s = random_stable(3, 2, 2, rng);
    const Trajectory tr = noiseless_data(s, 300, rng);
    const Lssm a = identify(tr, {SubspaceMethod::cva, 3, 5});
    const Lssm b = identify(tr, {SubspaceMethod::cva, 3, 5});
    CHECK(a.A == b.A);
    CHECK(a.B == b.B);
    CHECK(a.C == b.C);
    CHECK(a.K == b.K);
    CHECK_THROWS_AS(identify(tr.segment(0, 19), {SubspaceMethod::n4sid, 3, 5}), TooShortError);
    CHECK_THROWS_AS(identify(tr, {SubspaceMethod::n4sid, 3, 0}), ParameterError);
    CHECK_THROWS_AS(subspace_method_from_string("arx"), ParameterError);
}

TEST_CASE("lssm_simulate") {
    Lssm id;
    id.A = MatrixXd::Identity(2, 2);
    id.B = MatrixXd::Zero(2, 1);
    id.C = MatrixXd::Identity(2, 2);
    id.K = MatrixXd::Zero(2, 2);
    VectorXd x0(2);
    x0 << 3, -1;
    const MatrixXd y = lssm_simulate(id, x0, MatrixXd::Zero(5, 1));
    for (Eigen::Index k = 0; k < 5; ++k) CHECK(y.row(k).transpose() == x0);

    Lssm half;
    half.A = MatrixXd::Constant(1, 1, 0.5);
    half.B = MatrixXd::Zero(1, 0);
    half.C = MatrixXd::Constant(1, 1, 2.0);
    half.K = MatrixXd::Zero(1, 1);
    const MatrixXd g = lssm_simulate(half, VectorXd::Ones(1), MatrixXd::Zero(8, 0));
    for (Eigen::Index k = 0; k < 8; ++k) CHECK(g(k, 0) == 2.0 * std::pow(0.5, k));

    CHECK_THROWS_AS(lssm_simulate(half, VectorXd::Ones(1), MatrixXd::Zero(3, 0), SimulationMode::innovation), ParameterError);
    CHECK_THROWS_AS(lssm_simulate(half, VectorXd::Ones(2), MatrixXd::Zero(3, 0)), ShapeError);

    Lssm grow = half;
    grow.A(0, 0) = 10.0;
    try {
        lssm_simulate(grow, VectorXd::Ones(1), MatrixXd::Zero(40, 0));
        FAIL("expected divergence");
    } catch (const DivergenceError& e) {
        CHECK(e.index() == 13);
    }
}

TEST_CASE("innovation mode with the exact Kalman gain beats open loop on noisy data") {
    // scalar system with process and measurement noise; steady-state predictor gain by Riccati recursion
    const double a = 0.95, c = 1.0, q = 0.2, r = 0.1;
    double p = q;
    for (int k = 0; k < 10000; ++k) p = a * a * p + q - (a * p * c) * (a * p * c) / (c * c * p + r);
    const double kg = a * p * c / (c * c * p + r);
    Lssm m;
    m.A = MatrixXd::Constant(1, 1, a);
    m.B = MatrixXd::Zero(1, 1);
    m.C = MatrixXd::Constant(1, 1, c);
    m.K = MatrixXd::Constant(1, 1, kg);
    std::mt19937_64 rng(8);
    std::normal_distribution<double> nd;
    double mse_open = 0, mse_innov = 0;
    for (int rep = 0; rep < 20; ++rep) {
        const int n = 500;
        MatrixXd y(n, 1);
        double x = 0;
        for (int k = 0; k < n; ++k) {
            y(k, 0) = c * x + std::sqrt(r) * nd(rng);
            x = a * x + std::sqrt(q) * nd(rng);
        }
        const MatrixXd u = MatrixXd::Zero(n, 1);
        const MatrixXd yo = lssm_simulate(m, VectorXd::Zero(1), u);
        const MatrixXd yi = lssm_simulate(m, VectorXd::Zero(1), u, SimulationMode::innovation, &y);
        mse_open += (y - yo).squaredNorm() / n;
        mse_innov += (y - yi).squaredNorm() / n;
    }
    MESSAGE("open " << mse_open / 20 << " innovation " << mse_innov / 20);
    CHECK(mse_innov < mse_open);
}

TEST_CASE("identified K is near zero on noiseless data and positive with noise") {
    std::mt19937_64 rng(9);
    TrueSystem s{MatrixXd::Constant(1, 1, 0.8), MatrixXd::Ones(1, 1), MatrixXd::Ones(1, 1)};
    const Trajectory clean = noiseless_data(s, 2000, rng);
    CHECK(identify(clean, {SubspaceMethod::n4sid, 1, 5}).K.cwiseAbs().maxCoeff() < 1e-6);

    // innovation-form data: x_{t+1} = a x_t + u_t + k e_t, y_t = x_t + e_t
    const int n = 4000;
    const double kg = 0.5;
    MatrixXd u = testutil::random_matrix(n, 1, rng), y(n, 1);
    std::normal_distribution<double> nd(0.0, 0.3);
    double x = 0;
    for (int t = 0; t < n; ++t) {
        const double e = nd(rng);
        y(t, 0) = x + e;
        x = 0.8 * x + u(t, 0) + kg * e;
    }
    const Lssm id = identify(make_trajectory(1.0, u, y), {SubspaceMethod::n4sid, 1, 10});
    // K scales with the state basis; C*K is basis invariant
    CHECK((id.C * id.K)(0, 0) == doctest::Approx(kg).epsilon(0.15));
}

TEST_CASE("estimate_x0") {
    std::mt19937_64 rng(10);
    const TrueSystem s = random_stable(3, 2, 2, rng);
    Lssm m{s.A, s.B, s.C, MatrixXd::Zero(3, 2), {}, {}};
    const VectorXd x0 = testutil::random_matrix(3, 1, rng);
    const MatrixXd u = testutil::random_matrix(6, 2, rng);
    const MatrixXd y = simulate_ref(s.A, s.B, s.C, x0, u);
    CHECK((estimate_x0(m, y, u) - x0).cwiseAbs().maxCoeff() < 1e-8);
    CHECK(estimate_x0(m, MatrixXd::Zero(4, 2), MatrixXd::Zero(4, 2)).cwiseAbs().maxCoeff() == 0.0);
    CHECK_THROWS_AS(estimate_x0(m, y.topRows(2), u.topRows(2)), TooShortError);
    // propagation through the window gives the state after it
    VectorXd xe = x0;
    for (int k = 0; k < 6; ++k) xe = s.A * xe + s.B * u.row(k).transpose();
    CHECK((propagate(m, x0, u) - xe).norm() < 1e-12);

    // unobservable direction: minimum-norm solution and a warning
    Lssm blind = m;
    blind.C.col(2).setZero();
    blind.A = MatrixXd::Identity(3, 3);
    std::vector<std::string> warnings;
    estimate_x0(blind, y, u, &warnings);
    CHECK(!warnings.empty());
}

TEST_CASE("json round trip") {
    std::mt19937_64 rng(11);
    const TrueSystem s = random_stable(2, 1, 1, rng);
    const Lssm id = identify(noiseless_data(s, 300, rng), {SubspaceMethod::moesp, 2, 4});
    const Lssm back = lssm_from_json(nlohmann::json::parse(to_json(id).dump()));
    CHECK(back.A == id.A);
    CHECK(back.B == id.B);
    CHECK(back.C == id.C);
    CHECK(back.K == id.K);
    CHECK(back.singular_values == id.singular_values);
    CHECK_THROWS_AS(lssm_from_json(nlohmann::json{{"A", 1}}), SchemaError);
}
