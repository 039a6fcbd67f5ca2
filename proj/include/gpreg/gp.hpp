#pragma once

// Scalar Gaussian-process regression for one displacement axis.
//
// Prior d(x) ~ GP(mean_const, k). With K_reg = K + (nugget + jitter) I:
//   mean     mu*(x)   = mean_const + k_*(x)^T K_reg^-1 (d - mean_const)
//   variance s2*(x)   = k(0) - k_*(x)^T K_reg^-1 k_*(x)
//   covariance S*     = K_** - K_*^T K_reg^-1 K_*
// The variance is that of the latent displacement; observation noise is not added back.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "gpreg/core_types.hpp"
#include "gpreg/error.hpp"
#include "gpreg/kernel.hpp"

namespace gpreg {

inline constexpr double initial_relative_jitter = 1e-10;
inline constexpr double max_relative_jitter = 1e-4;
inline constexpr std::size_t max_covariance_queries = 4096;
inline constexpr double negative_variance_tolerance = 1e-10;

struct GPPrediction {
    double mean = 0.0;     // mm
    double variance = 0.0; // mm^2
};

inline Eigen::MatrixXd build_gram(const KernelSpec& kernel, std::span<const Point3> points) {
    const auto n = static_cast<Eigen::Index>(points.size());
    Eigen::MatrixXd gram(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        gram(i, i) = kernel.sill;
        for (Eigen::Index j = 0; j < i; ++j) {
            const double v = kernel.covariance_sq(squared_distance(points[static_cast<std::size_t>(i)],
                                                                   points[static_cast<std::size_t>(j)]));
            gram(i, j) = v;
            gram(j, i) = v;
        }
    }
    return gram;
}

// N x M matrix of k(x_i, q_j).
inline Eigen::MatrixXd cross_covariance(const KernelSpec& kernel, std::span<const Point3> train,
                                        std::span<const Point3> queries) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(train.size()), static_cast<Eigen::Index>(queries.size()));
    for (std::size_t j = 0; j < queries.size(); ++j)
        for (std::size_t i = 0; i < train.size(); ++i)
            out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                kernel.covariance_sq(squared_distance(train[i], queries[j]));
    return out;
}

class GPAxisModel {
public:
    GPAxisModel() = default;

    // Prior-only model: no observations.
    explicit GPAxisModel(const KernelSpec& kernel, double mean_const = 0.0) : kernel_(kernel), mean_(mean_const) {
        kernel_.validate();
    }

    [[nodiscard]] const KernelSpec& kernel() const { return kernel_; }
    [[nodiscard]] const std::vector<Point3>& locations() const { return locations_; }
    [[nodiscard]] const std::vector<double>& values() const { return values_; }
    [[nodiscard]] double mean_const() const { return mean_; }
    [[nodiscard]] double jitter() const { return jitter_; }
    [[nodiscard]] std::size_t size() const { return locations_.size(); }
    [[nodiscard]] const Eigen::MatrixXd& cholesky_factor() const { return chol_; }
    [[nodiscard]] const Eigen::VectorXd& alpha() const { return alpha_; }

    // K + (nugget + jitter) I, as factorized.
    [[nodiscard]] Eigen::MatrixXd regularized_gram() const {
        Eigen::MatrixXd k = build_gram(kernel_, locations_);
        k.diagonal().array() += kernel_.nugget + jitter_;
        return k;
    }

    [[nodiscard]] std::vector<double> predict_mean(std::span<const Point3> queries) const {
        std::vector<double> out(queries.size(), mean_);
        if (locations_.empty() || queries.empty()) return out;
        const Eigen::VectorXd m = cross_covariance(kernel_, locations_, queries).transpose() * alpha_;
        for (std::size_t j = 0; j < queries.size(); ++j) out[j] += m(static_cast<Eigen::Index>(j));
        return out;
    }

    [[nodiscard]] std::vector<double> predict_variance(std::span<const Point3> queries) const {
        std::vector<double> out(queries.size(), kernel_.sill);
        if (locations_.empty() || queries.empty()) return out;
        Eigen::MatrixXd v = cross_covariance(kernel_, locations_, queries);
        chol_.triangularView<Eigen::Lower>().solveInPlace(v);
        for (std::size_t j = 0; j < queries.size(); ++j)
            out[j] = checked_variance(kernel_.sill - v.col(static_cast<Eigen::Index>(j)).squaredNorm());
        return out;
    }

    [[nodiscard]] std::vector<GPPrediction> predict(std::span<const Point3> queries) const {
        std::vector<GPPrediction> out(queries.size(), GPPrediction{mean_, kernel_.sill});
        if (locations_.empty() || queries.empty()) return out;
        Eigen::MatrixXd cross = cross_covariance(kernel_, locations_, queries);
        const Eigen::VectorXd m = cross.transpose() * alpha_;
        chol_.triangularView<Eigen::Lower>().solveInPlace(cross);
        for (std::size_t j = 0; j < queries.size(); ++j) {
            const auto c = static_cast<Eigen::Index>(j);
            out[j] = {mean_ + m(c), checked_variance(kernel_.sill - cross.col(c).squaredNorm())};
        }
        return out;
    }

    // Full posterior covariance; only for small query sets.
    [[nodiscard]] Eigen::MatrixXd predict_covariance(std::span<const Point3> queries) const {
        if (queries.size() > max_covariance_queries)
            throw Error(ErrorCode::out_of_range, "too many query points for a full posterior covariance",
                        std::to_string(queries.size()) + " > " + std::to_string(max_covariance_queries) +
                            "; use predict_variance for dense grids");
        Eigen::MatrixXd prior = build_gram(kernel_, queries);
        if (locations_.empty()) return prior;
        Eigen::MatrixXd v = cross_covariance(kernel_, locations_, queries);
        chol_.triangularView<Eigen::Lower>().solveInPlace(v);
        Eigen::MatrixXd post = prior - v.transpose() * v;
        post = 0.5 * (post + post.transpose()).eval();
        return post;
    }

    // Clamps round-off negatives to zero; a clearly negative variance means the factorization is unusable.
    [[nodiscard]] double checked_variance(double v) const {
        if (v < -negative_variance_tolerance * std::max(1.0, kernel_.sill))
            throw Error(ErrorCode::ill_conditioned, "posterior variance is significantly negative",
                        "variance " + std::to_string(v) + " with jitter " + std::to_string(jitter_));
        return std::max(v, 0.0);
    }

    // Chunk kernels for dense evaluation: given a precomputed N x M squared-distance block,
    // write means and/or variances for those M queries.
    void predict_from_sqdist(const Eigen::MatrixXd& sqdist, double* mean_out, double* var_out) const {
        const auto m = sqdist.cols();
        if (locations_.empty()) {
            for (Eigen::Index j = 0; j < m; ++j) {
                if (mean_out) mean_out[j] = mean_;
                if (var_out) var_out[j] = kernel_.sill;
            }
            return;
        }
        Eigen::MatrixXd cross = sqdist.unaryExpr([this](double h2) { return kernel_.covariance_sq(h2); });
        if (mean_out) {
            const Eigen::VectorXd mu = cross.transpose() * alpha_;
            for (Eigen::Index j = 0; j < m; ++j) mean_out[j] = mean_ + mu(j);
        }
        if (var_out) {
            chol_.triangularView<Eigen::Lower>().solveInPlace(cross);
            for (Eigen::Index j = 0; j < m; ++j) var_out[j] = checked_variance(kernel_.sill - cross.col(j).squaredNorm());
        }
    }

private:
    friend GPAxisModel fit_gp_axis(const KernelSpec&, std::span<const Point3>, std::span<const double>, double);

    KernelSpec kernel_;
    std::vector<Point3> locations_;
    std::vector<double> values_;
    double mean_ = 0.0;
    double jitter_ = 0.0;
    Eigen::MatrixXd chol_;
    Eigen::VectorXd alpha_;
};

// Jitter starts at 1e-10 * sill and grows x10 per failed factorization, up to 1e-4 * sill.
inline GPAxisModel fit_gp_axis(const KernelSpec& kernel, std::span<const Point3> locations,
                               std::span<const double> values, double mean_const = 0.0) {
    kernel.validate();
    if (locations.size() != values.size())
        throw Error(ErrorCode::invalid_argument, "GP fit: location and value counts differ");
    for (std::size_t i = 0; i < locations.size(); ++i)
        if (!locations[i].is_finite() || !std::isfinite(values[i]))
            throw Error(ErrorCode::invalid_argument, "GP fit: non-finite observation at index " + std::to_string(i));

    GPAxisModel model(kernel, mean_const);
    model.locations_.assign(locations.begin(), locations.end());
    model.values_.assign(values.begin(), values.end());
    if (locations.empty()) return model;

    const Eigen::MatrixXd gram = build_gram(kernel, locations);
    const auto n = gram.rows();
    double jitter = initial_relative_jitter * kernel.sill;
    const double max_jitter = max_relative_jitter * kernel.sill * (1.0 + 1e-12);
    for (;;) {
        Eigen::MatrixXd reg = gram;
        reg.diagonal().array() += kernel.nugget + jitter;
        Eigen::LLT<Eigen::MatrixXd> llt(reg);
        if (llt.info() == Eigen::Success) {
            model.chol_ = llt.matrixL();
            model.jitter_ = jitter;
            Eigen::VectorXd centred(n);
            for (Eigen::Index i = 0; i < n; ++i) centred(i) = values[static_cast<std::size_t>(i)] - mean_const;
            model.alpha_ = llt.solve(centred);
            return model;
        }
        jitter *= 10.0;
        if (jitter > max_jitter)
            throw Error(ErrorCode::ill_conditioned, "Gram matrix factorization failed after jitter escalation",
                        "final jitter " + std::to_string(jitter / 10.0));
    }
}

inline GPAxisModel fit_gp_axis(const KernelSpec& kernel, std::span<const DisplacementObservation> observations,
                               Axis axis, double mean_const = 0.0) {
    std::vector<Point3> locations;
    std::vector<double> values;
    locations.reserve(observations.size());
    values.reserve(observations.size());
    for (const auto& o : observations) {
        locations.push_back(o.location);
        values.push_back(o.d[static_cast<std::size_t>(axis)]);
    }
    return fit_gp_axis(kernel, locations, values, mean_const);
}

using AxisModels = std::array<GPAxisModel, 3>;

inline AxisModels fit_axis_models(const AxisKernels& kernels, std::span<const DisplacementObservation> observations,
                                  double mean_const = 0.0) {
    return {fit_gp_axis(kernels[0], observations, Axis::x, mean_const),
            fit_gp_axis(kernels[1], observations, Axis::y, mean_const),
            fit_gp_axis(kernels[2], observations, Axis::z, mean_const)};
}

inline std::vector<Vec3> predict_displacements(const AxisModels& models, std::span<const Point3> queries) {
    std::vector<Vec3> out(queries.size());
    for (std::size_t a = 0; a < 3; ++a) {
        const auto m = models[a].predict_mean(queries);
        for (std::size_t j = 0; j < queries.size(); ++j) out[j][a] = m[j];
    }
    return out;
}

} // namespace gpreg
