#pragma once
// Shared helpers for the unit tests and the acceptance binary.

#include <Eigen/Dense>

#include <cmath>
#include <random>

namespace testutil {

inline Eigen::MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> d(0.0, scale);
    Eigen::MatrixXd m(r, c);
    for (Eigen::Index j = 0; j < c; ++j)
        for (Eigen::Index i = 0; i < r; ++i) m(i, j) = d(rng);
    return m;
}

/// Largest |a_i - b_i| / max(|b_i|, floor * max|b|).
inline double max_rel_error(const Eigen::VectorXd& a, const Eigen::VectorXd& b, double floor = 1e-3) {
    const double scale = std::max(b.cwiseAbs().maxCoeff(), 1e-300);
    double worst = 0.0;
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        const double den = std::max(std::abs(b(i)), floor * scale);
        worst = std::max(worst, std::abs(a(i) - b(i)) / den);
    }
    return worst;
}

}  // namespace testutil
