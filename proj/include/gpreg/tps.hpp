#pragma once

// Thin-plate spline baseline interpolant in 3D: U(r) = r with a degree-1 polynomial part.
//
//   [ U   P ] [w]   [v]
//   [ P^T 0 ] [c] = [0]
//
// Solved once for all three displacement components. No variance is available for this method.

#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "gpreg/affine.hpp"
#include "gpreg/core_types.hpp"
#include "gpreg/error.hpp"

namespace gpreg {

struct TPSModel {
    std::vector<Point3> centers;
    Eigen::MatrixXd weights;    // N x 3 radial coefficients
    Eigen::Matrix<double, 4, 3> polynomial; // rows: x, y, z, 1
};

inline TPSModel fit_tps(std::span<const DisplacementObservation> observations) {
    const auto n = observations.size();
    if (n < 4)
        throw Error(ErrorCode::insufficient_data, "thin-plate spline needs at least 4 centers",
                    "have " + std::to_string(n));

    TPSModel model;
    model.centers.reserve(n);
    for (const auto& o : observations) model.centers.push_back(o.location);
    const int rank = homogeneous_rank(model.centers);
    if (rank < 4)
        throw Error(ErrorCode::rank_deficient, "thin-plate spline centers are coplanar",
                    "polynomial block rank " + std::to_string(rank) + " of 4");

    const auto N = static_cast<Eigen::Index>(n);
    Eigen::MatrixXd system = Eigen::MatrixXd::Zero(N + 4, N + 4);
    Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(N + 4, 3);
    for (Eigen::Index i = 0; i < N; ++i) {
        const auto& ci = model.centers[static_cast<std::size_t>(i)];
        for (Eigen::Index j = 0; j < i; ++j) {
            const double r = distance(ci, model.centers[static_cast<std::size_t>(j)]);
            system(i, j) = r;
            system(j, i) = r;
        }
        system(i, N + 0) = system(N + 0, i) = ci.x;
        system(i, N + 1) = system(N + 1, i) = ci.y;
        system(i, N + 2) = system(N + 2, i) = ci.z;
        system(i, N + 3) = system(N + 3, i) = 1.0;
        const auto& d = observations[static_cast<std::size_t>(i)].d;
        rhs.row(i) << d.x, d.y, d.z;
    }

    const Eigen::MatrixXd sol = system.fullPivLu().solve(rhs);
    model.weights = sol.topRows(N);
    model.polynomial = sol.bottomRows<4>();
    return model;
}

inline std::vector<Vec3> tps_predict(const TPSModel& model, std::span<const Point3> queries) {
    std::vector<Vec3> out;
    out.reserve(queries.size());
    for (const auto& q : queries) {
        Eigen::RowVector3d v = q.x * model.polynomial.row(0) + q.y * model.polynomial.row(1) +
                               q.z * model.polynomial.row(2) + model.polynomial.row(3);
        for (std::size_t i = 0; i < model.centers.size(); ++i)
            v += distance(q, model.centers[i]) * model.weights.row(static_cast<Eigen::Index>(i));
        out.push_back({v(0), v(1), v(2)});
    }
    return out;
}

} // namespace gpreg
