#pragma once

// Landmark-based affine pre-alignment and residual displacement construction.

#include <array>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "gpreg/core_types.hpp"
#include "gpreg/error.hpp"

namespace gpreg {

inline constexpr double singular_determinant_threshold = 1e-12;
inline constexpr double rank_relative_threshold = 1e-10;

struct AffineTransform {
    Eigen::Matrix3d linear = Eigen::Matrix3d::Identity();
    Eigen::Vector3d translation = Eigen::Vector3d::Zero();

    static AffineTransform identity() { return {}; }

    [[nodiscard]] double determinant() const { return linear.determinant(); }
    [[nodiscard]] bool is_invertible() const { return std::abs(determinant()) >= singular_determinant_threshold; }

    // Row-major 3x4 [linear | translation].
    [[nodiscard]] std::array<double, 12> row_major() const {
        std::array<double, 12> out{};
        for (int r = 0; r < 3; ++r) {
            for (int c = 0; c < 3; ++c) out[static_cast<std::size_t>(r * 4 + c)] = linear(r, c);
            out[static_cast<std::size_t>(r * 4 + 3)] = translation(r);
        }
        return out;
    }

    static AffineTransform from_row_major(const std::array<double, 12>& v) {
        AffineTransform t;
        for (int r = 0; r < 3; ++r) {
            for (int c = 0; c < 3; ++c) t.linear(r, c) = v[static_cast<std::size_t>(r * 4 + c)];
            t.translation(r) = v[static_cast<std::size_t>(r * 4 + 3)];
        }
        return t;
    }

    friend bool operator==(const AffineTransform& a, const AffineTransform& b) {
        return a.linear == b.linear && a.translation == b.translation;
    }
};

inline Eigen::Vector3d to_eigen(const Point3& p) { return {p.x, p.y, p.z}; }
inline Point3 to_point(const Eigen::Vector3d& v) { return {v(0), v(1), v(2)}; }

inline Point3 apply_affine(const AffineTransform& affine, const Point3& p) {
    return to_point(affine.linear * to_eigen(p) + affine.translation);
}

inline AffineTransform invert_affine(const AffineTransform& affine) {
    const double det = affine.determinant();
    if (!(std::abs(det) >= singular_determinant_threshold))
        throw Error(ErrorCode::singular, "affine transform is not invertible", "determinant " + std::to_string(det));
    AffineTransform inv;
    inv.linear = affine.linear.inverse();
    inv.translation = -inv.linear * affine.translation;
    return inv;
}

// Numerical rank of an n x 4 homogeneous design matrix [x y z 1].
inline int homogeneous_rank(std::span<const Point3> points) {
    Eigen::MatrixXd design(static_cast<Eigen::Index>(points.size()), 4);
    for (std::size_t i = 0; i < points.size(); ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        design.row(r) << points[i].x, points[i].y, points[i].z, 1.0;
    }
    if (points.empty()) return 0;
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(design);
    const auto& s = svd.singularValues();
    int rank = 0;
    for (Eigen::Index i = 0; i < s.size(); ++i)
        if (s(i) > rank_relative_threshold * s(0)) ++rank;
    return rank;
}

// Ordinary least squares over all 12 parameters: minimizes sum |A pre_i + t - post_i|^2.
inline AffineTransform fit_affine(const LandmarkSet& landmarks) {
    const auto n = landmarks.size();
    if (n < 4)
        throw Error(ErrorCode::insufficient_data, "affine fit needs at least 4 landmark pairs",
                    "have " + std::to_string(n));

    Eigen::MatrixXd design(static_cast<Eigen::Index>(n), 4);
    Eigen::MatrixXd target(static_cast<Eigen::Index>(n), 3);
    for (std::size_t i = 0; i < n; ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        const auto& p = landmarks.pairs[i];
        design.row(r) << p.pre.x, p.pre.y, p.pre.z, 1.0;
        target.row(r) << p.post.x, p.post.y, p.post.z;
    }

    Eigen::JacobiSVD<Eigen::MatrixXd> svd(design, Eigen::ComputeThinU | Eigen::ComputeThinV);
    svd.setThreshold(rank_relative_threshold);
    const auto rank = svd.rank();
    if (rank < 4)
        throw Error(ErrorCode::rank_deficient, "landmark configuration is degenerate (coplanar or collinear)",
                    "design matrix rank " + std::to_string(rank) + " of 4");

    const Eigen::MatrixXd params = svd.solve(target); // 4 x 3
    AffineTransform out;
    out.linear = params.topRows<3>().transpose();
    out.translation = params.row(3).transpose();
    return out;
}

inline double residual_sum_of_squares(const LandmarkSet& landmarks, const AffineTransform& affine) {
    double sum = 0.0;
    for (const auto& p : landmarks.pairs) sum += squared_distance(apply_affine(affine, p.pre), p.post);
    return sum;
}

// d = affine^-1(post) - pre, located at pre. The full map is T(x) = affine(x + d(x)).
inline std::vector<DisplacementObservation> compute_displacements(const LandmarkSet& landmarks,
                                                                  const AffineTransform& affine) {
    const auto inverse = invert_affine(affine);
    std::vector<DisplacementObservation> out;
    out.reserve(landmarks.size());
    for (const auto& p : landmarks.pairs) out.push_back({p.pre, apply_affine(inverse, p.post) - p.pre});
    return out;
}

} // namespace gpreg
