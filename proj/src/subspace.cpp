#include "sysid/subspace.hpp"

#include "sysid/error.hpp"
#include "sysid/neural.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <cstdio>

namespace sysid {

namespace {

constexpr double kRankTol = 1e-10;       // relative singular value treated as zero
constexpr double kIllConditioned = 1e-12;
constexpr double kFlatSpectrum = 0.5;    // first discarded / largest singular value above this: no dominant subspace
constexpr double kRiccatiTol = 1e-10;
constexpr int kRiccatiMaxIter = 10000;

std::string fmt(const char* f, double a, double b = 0.0) {
    char buf[160];
    std::snprintf(buf, sizeof buf, f, a, b);
    return buf;
}

/// Least-squares solution of X * M = T for X, i.e. X = T M^+ (minimum norm).
Matrix solve_right(const Matrix& m, const Matrix& t) {
    Eigen::CompleteOrthogonalDecomposition<Matrix> cod(m.transpose());
    return cod.solve(t.transpose()).transpose();
}

/// Removes from the rows of `m` their projection onto the row space of `u`.
Matrix project_out(const Matrix& m, const Matrix& u) {
    if (u.rows() == 0) return m;
    return m - solve_right(u, m) * u;
}

/// Symmetric pseudo square root and inverse square root; eigenvalues below
/// kRankTol * lambda_max are treated as zero.
void sym_sqrt(const Matrix& s, Matrix& root, Matrix& inv_root) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(s);
    const Vector ev = es.eigenvalues();
    const double top = std::max(ev.maxCoeff(), 0.0);
    Vector r(ev.size()), ir(ev.size());
    for (Index k = 0; k < ev.size(); ++k) {
        const bool keep = ev(k) > kRankTol * top && ev(k) > 0;
        r(k) = keep ? std::sqrt(ev(k)) : 0.0;
        ir(k) = keep ? 1.0 / std::sqrt(ev(k)) : 0.0;
    }
    root = es.eigenvectors() * r.asDiagonal() * es.eigenvectors().transpose();
    inv_root = es.eigenvectors() * ir.asDiagonal() * es.eigenvectors().transpose();
}

/// Left singular vectors and singular values of a wide matrix via QR of its transpose.
void wide_svd(const Matrix& m, Matrix& u, Vector& s) {
    Eigen::HouseholderQR<Matrix> qr(m.transpose());
    const Index k = std::min(m.rows(), m.cols());
    const Matrix r = qr.matrixQR().topRows(k).triangularView<Eigen::Upper>();
    Eigen::JacobiSVD<Matrix> svd(r.transpose(), Eigen::ComputeThinU);
    u = svd.matrixU();
    s = svd.singularValues();
}

/// Steady-state predictor gain from the covariances of the process (w) and output (v) residuals.
Matrix kalman_gain(const Matrix& A, const Matrix& C, const Matrix& Q, const Matrix& S, Matrix R,
                   double scale, std::vector<std::string>& warnings) {
    const Index n = A.rows(), p = C.rows();
    R += kRiccatiTol * (1.0 + scale) * Matrix::Identity(p, p);
    Matrix P = Matrix::Zero(n, n);
    for (int it = 0; it < kRiccatiMaxIter; ++it) {
        const Matrix G = A * P * C.transpose() + S;
        const Matrix E = C * P * C.transpose() + R;
        Matrix next = A * P * A.transpose() + Q - G * E.ldlt().solve(G.transpose());
        next = 0.5 * (next + next.transpose());
        if (!next.allFinite()) break;
        const double change = (next - P).norm();
        P = std::move(next);
        if (change <= kRiccatiTol * (1.0 + P.norm())) {
            const Matrix Gs = A * P * C.transpose() + S;
            const Matrix Es = C * P * C.transpose() + R;
            return Es.ldlt().solve(Gs.transpose()).transpose();
        }
    }
    warnings.emplace_back("Kalman gain: Riccati iteration did not converge, K set to zero");
    return Matrix::Zero(n, p);
}

}  // namespace

const char* to_string(SubspaceMethod m) {
    switch (m) {
        case SubspaceMethod::n4sid: return "n4sid";
        case SubspaceMethod::moesp: return "moesp";
        case SubspaceMethod::cva: return "cva";
    }
    return "?";
}

SubspaceMethod subspace_method_from_string(const std::string& s) {
    if (s == "n4sid") return SubspaceMethod::n4sid;
    if (s == "moesp") return SubspaceMethod::moesp;
    if (s == "cva") return SubspaceMethod::cva;
    throw ParameterError("unknown subspace method '" + s + "'");
}

double Lssm::spectral_radius() const {
    if (A.size() == 0) return 0.0;
    return A.eigenvalues().cwiseAbs().maxCoeff();
}

Matrix block_hankel(const Matrix& series, Index rows) {
    const Index n = series.rows(), d = series.cols();
    if (rows < 1) throw ParameterError("block_hankel: rows must be >= 1");
    if (rows > n) throw TooShortError("block_hankel: more block rows than samples");
    const Index cols = n - rows + 1;
    Matrix h(rows * d, cols);
    for (Index r = 0; r < rows; ++r) h.middleRows(r * d, d) = series.middleRows(r, cols).transpose();
    return h;
}

Lssm identify(const Trajectory& data, const SubspaceConfig& cfg) {
    const Index i = cfg.horizon;
    const Index n = data.size(), nu = data.n_u(), ny = data.n_y();
    if (i < 1) throw ParameterError("identify: horizon must be >= 1");
    if (cfg.n_x < 1) throw ParameterError("identify: n_x must be >= 1");
    if (n < 4 * i) throw TooShortError("identify: need at least 4*horizon samples");
    if (ny == 0) throw ShapeError("identify: no outputs");

    Lssm model;
    const Matrix hu = block_hankel(data.inputs, 2 * i);
    const Matrix hy = block_hankel(data.outputs, 2 * i);
    const Index j = hy.cols();
    const Matrix up = hu.topRows(i * nu), uf = hu.bottomRows(i * nu);
    const Matrix yp = hy.topRows(i * ny), yf = hy.bottomRows(i * ny);
    Matrix wp(i * (nu + ny), j);
    wp << up, yp;

    // oblique projection of Y_f onto W_p along U_f
    Matrix z(wp.rows() + uf.rows(), j);
    z << wp, uf;
    const Matrix l = solve_right(z, yf);
    const Matrix oi = l.leftCols(wp.rows()) * wp;

    // weighting
    Matrix weighted, w1_root;
    bool have_w1 = false;
    switch (cfg.method) {
        case SubspaceMethod::n4sid: weighted = oi; break;
        case SubspaceMethod::moesp: weighted = project_out(oi, uf); break;
        case SubspaceMethod::cva: {
            const Matrix yfp = project_out(yf, uf);
            const Matrix cov = yfp * yfp.transpose() / static_cast<double>(j);
            Matrix inv_root;
            sym_sqrt(cov, w1_root, inv_root);
            have_w1 = true;
            weighted = inv_root * project_out(oi, uf);
            break;
        }
    }

    Matrix u1;
    Vector sv;
    wide_svd(weighted, u1, sv);
    model.singular_values = sv;

    Index rank = 0;
    for (Index k = 0; k < sv.size(); ++k)
        if (sv(k) > kRankTol * sv(0)) ++rank;
    Index nx = cfg.n_x;
    if (nx <= sv.size() && sv(0) > 0 && sv(nx - 1) / sv(0) < kIllConditioned)
        model.warnings.push_back(fmt("ill-conditioned: singular value ratio %.3g below %.0e", sv(nx - 1) / sv(0),
                                     kIllConditioned));
    if (nx < sv.size() && sv(0) > 0 && sv(nx) / sv(0) > kFlatSpectrum)
        model.warnings.push_back(
            fmt("ill-conditioned: flat leading singular values (s[n_x+1]/s[1] = %.3g), no dominant dynamics", sv(nx) / sv(0)));
    const Index max_states = std::min<Index>(j - 2 - nu, rank);
    if (nx > max_states) {
        model.warnings.push_back(fmt("n_x reduced from %.0f to available rank %.0f", static_cast<double>(nx),
                                     static_cast<double>(std::max<Index>(max_states, 1))));
        nx = std::max<Index>(max_states, 1);
    }

    const Vector s_half = sv.head(nx).cwiseSqrt();
    Matrix gamma = u1.leftCols(nx) * s_half.asDiagonal();
    if (have_w1) gamma = w1_root * gamma;
    model.C = gamma.topRows(ny);

    // state sequence at times i .. i+j-1
    const Matrix x = Eigen::CompleteOrthogonalDecomposition<Matrix>(gamma).solve(oi);
    const Matrix x_now = x.leftCols(j - 1), x_next = x.rightCols(j - 1);
    const Matrix u_now = nu > 0 ? Matrix(uf.topRows(nu).leftCols(j - 1)) : Matrix(0, j - 1);

    if ((i - 1) * ny >= nx) {
        const Matrix g_up = gamma.topRows((i - 1) * ny);
        const Matrix g_low = gamma.bottomRows((i - 1) * ny);
        model.A = Eigen::CompleteOrthogonalDecomposition<Matrix>(g_up).solve(g_low);
        model.B = nu > 0 ? solve_right(u_now, x_next - model.A * x_now) : Matrix(nx, 0);
    } else {
        Matrix reg(nx + nu, j - 1);
        reg << x_now, u_now;
        const Matrix ab = solve_right(reg, x_next);
        model.A = ab.leftCols(nx);
        model.B = ab.rightCols(nu);
    }

    // innovation covariances from the state and output residuals
    const Matrix rw = x_next - model.A * x_now - model.B * u_now;
    const Matrix rv = yf.topRows(ny).leftCols(j - 1) - model.C * x_now;
    const double m = static_cast<double>(j - 1);
    const Matrix Q = rw * rw.transpose() / m, S = rw * rv.transpose() / m, R = rv * rv.transpose() / m;
    const double scale = (yf.topRows(ny).rowwise().squaredNorm().sum()) / (static_cast<double>(j) * static_cast<double>(ny));
    model.K = kalman_gain(model.A, model.C, Q, S, R, scale, model.warnings);
    return model;
}

Matrix lssm_simulate(const Lssm& model, const Vector& x0, const Matrix& u, SimulationMode mode, const Matrix* y_meas) {
    const Index n = u.rows();
    if (x0.size() != model.n_x()) throw ShapeError("lssm_simulate: x0 dimension mismatch");
    if (u.cols() != model.n_u()) throw ShapeError("lssm_simulate: input dimension mismatch");
    if (mode == SimulationMode::innovation) {
        if (y_meas == nullptr) throw ParameterError("lssm_simulate: innovation mode needs measurements");
        if (y_meas->rows() != n || y_meas->cols() != model.n_y())
            throw ShapeError("lssm_simulate: measurement dimension mismatch");
    }
    Matrix y(n, model.n_y());
    Vector x = x0;
    for (Index k = 0; k < n; ++k) {
        const Vector yk = model.C * x;
        y.row(k) = yk.transpose();
        Vector next = model.A * x + model.B * u.row(k).transpose();
        if (mode == SimulationMode::innovation) next += model.K * (y_meas->row(k).transpose() - yk);
        x = std::move(next);
        if (!x.allFinite() || x.norm() > 1e12)
            throw DivergenceError("lssm_simulate: state norm exceeded 1e12 at step " + std::to_string(k + 1),
                                  static_cast<long>(k + 1));
    }
    return y;
}

Vector propagate(const Lssm& model, Vector x, const Matrix& u) {
    if (u.cols() != model.n_u()) throw ShapeError("propagate: input dimension mismatch");
    for (Index k = 0; k < u.rows(); ++k) x = model.A * x + model.B * u.row(k).transpose();
    return x;
}

Vector estimate_x0(const Lssm& model, const Matrix& y, const Matrix& u, std::vector<std::string>* warnings) {
    const Index w = y.rows(), nx = model.n_x(), ny = model.n_y();
    if (w < nx) throw TooShortError("estimate_x0: window shorter than n_x");
    if (y.cols() != ny || u.rows() != w || u.cols() != model.n_u())
        throw ShapeError("estimate_x0: window dimension mismatch");
    Matrix gamma(w * ny, nx);
    Vector rhs(w * ny);
    Matrix ak = model.C;  // C A^k
    Vector forced = Vector::Zero(nx);
    for (Index k = 0; k < w; ++k) {
        gamma.middleRows(k * ny, ny) = ak;
        rhs.segment(k * ny, ny) = y.row(k).transpose() - model.C * forced;
        ak = ak * model.A;
        forced = model.A * forced + model.B * u.row(k).transpose();
    }
    Eigen::CompleteOrthogonalDecomposition<Matrix> cod(gamma);
    if (cod.rank() < nx && warnings)
        warnings->push_back("estimate_x0: observability matrix rank deficient, minimum-norm solution");
    return cod.solve(rhs);
}

std::vector<Matrix> markov_parameters(const Lssm& model, Index count) {
    std::vector<Matrix> out;
    Matrix ak_b = model.B;
    for (Index k = 0; k < count; ++k) {
        out.push_back(model.C * ak_b);
        ak_b = model.A * ak_b;
    }
    return out;
}

nlohmann::json to_json(const Lssm& m) {
    nlohmann::json j;
    j["A"] = matrix_to_json(m.A);
    j["B"] = matrix_to_json(m.B);
    j["C"] = matrix_to_json(m.C);
    j["K"] = matrix_to_json(m.K);
    j["singular_values"] = std::vector<double>(m.singular_values.data(), m.singular_values.data() + m.singular_values.size());
    j["warnings"] = m.warnings;
    return j;
}

Lssm lssm_from_json(const nlohmann::json& j) {
    Lssm m;
    try {
        m.A = matrix_from_json(j.at("A"));
        m.B = matrix_from_json(j.at("B"));
        m.C = matrix_from_json(j.at("C"));
        m.K = matrix_from_json(j.at("K"));
        const auto sv = j.value("singular_values", std::vector<double>{});
        m.singular_values = Eigen::Map<const Vector>(sv.data(), static_cast<Index>(sv.size()));
        m.warnings = j.value("warnings", std::vector<std::string>{});
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("lssm checkpoint: ") + e.what());
    }
    const Index n = m.A.rows();
    if (m.A.cols() != n || m.B.rows() != n || m.C.cols() != n || m.K.rows() != n || m.K.cols() != m.C.rows())
        throw SchemaError("lssm checkpoint: inconsistent matrix shapes");
    return m;
}

}  // namespace sysid
