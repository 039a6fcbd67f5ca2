#pragma once

// Dense displacement fields, uncertainty maps and volume warping on a voxel grid.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "gpreg/affine.hpp"
#include "gpreg/core_types.hpp"
#include "gpreg/error.hpp"
#include "gpreg/gp.hpp"
#include "gpreg/parallel.hpp"

namespace gpreg {

inline constexpr std::size_t field_block_size = 4096;

struct DenseField {
    GridSpec grid;
    std::vector<Vec3> vectors; // x-fastest
};

struct UncertaintyMap {
    GridSpec grid;
    std::vector<std::array<double, 3>> variance; // per axis, mm^2
    std::vector<double> trace;                   // sum of the three
};

struct Volume {
    GridSpec grid;
    std::vector<float> scalars;

    void validate() const {
        grid.validate();
        if (scalars.size() != grid.voxel_count())
            throw Error(ErrorCode::size_mismatch, "volume scalar count does not match its grid",
                        "expected " + std::to_string(grid.voxel_count()) + ", got " + std::to_string(scalars.size()));
    }
};

struct DenseOutputs {
    std::optional<DenseField> field;
    std::optional<UncertaintyMap> uncertainty;
};

// Evaluates the three axis posteriors at every voxel centre, in blocks of 4096 queries. The
// squared distances of a block are shared by all axes; K_** is never formed.
inline DenseOutputs generate_dense(const AxisModels& models, const GridSpec& grid, bool want_field,
                                   bool want_uncertainty, unsigned threads = 0) {
    grid.validate();
    const auto n = grid.voxel_count();
    DenseOutputs out;
    if (want_field) out.field = DenseField{grid, std::vector<Vec3>(n)};
    if (want_uncertainty)
        out.uncertainty = UncertaintyMap{grid, std::vector<std::array<double, 3>>(n), std::vector<double>(n)};

    // Models fitted on one landmark set share their training locations.
    const auto& train = models[0].locations();
    for (const auto& m : models)
        if (m.locations() != train)
            throw Error(ErrorCode::precondition, "axis models were fitted on different landmark sets");

    // Axes sharing a family and length scale differ only in sill s and regularization n, so one
    // eigendecomposition K0 = Q diag(l) Q^T of the unit-sill Gram matrix serves all three:
    // var(q) = s - s^2 sum_i (Q^T k0(q))_i^2 / (s l_i + n). One GEMM per block instead of three solves.
    const auto& k0 = models[0].kernel();
    const bool shared = want_uncertainty && !train.empty() &&
                        std::all_of(models.begin(), models.end(), [&](const GPAxisModel& m) {
                            return m.kernel().family == k0.family && m.kernel().param == k0.param;
                        });
    const KernelSpec unit{k0.family, 1.0, k0.param, 0.0};
    Eigen::MatrixXd basis_t;
    std::array<Eigen::VectorXd, 3> inv_eig;
    if (shared) {
        const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(build_gram(unit, train));
        if (eig.info() != Eigen::Success)
            throw Error(ErrorCode::ill_conditioned, "eigendecomposition of the Gram matrix failed");
        basis_t = eig.eigenvectors().transpose();
        for (std::size_t a = 0; a < 3; ++a) {
            const auto& k = models[a].kernel();
            inv_eig[a] = (k.sill * eig.eigenvalues().array() + (k.nugget + models[a].jitter())).inverse().matrix();
        }
    }

    parallel_chunks(n, field_block_size, threads, [&](std::size_t begin, std::size_t end) {
        const auto m = static_cast<Eigen::Index>(end - begin);
        Eigen::MatrixXd sqdist(static_cast<Eigen::Index>(train.size()), m);
        for (Eigen::Index j = 0; j < m; ++j) {
            const Point3 q = grid.world(begin + static_cast<std::size_t>(j));
            for (std::size_t i = 0; i < train.size(); ++i)
                sqdist(static_cast<Eigen::Index>(i), j) = squared_distance(train[i], q);
        }
        std::vector<double> mean(static_cast<std::size_t>(m)), var(static_cast<std::size_t>(m));
        Eigen::MatrixXd corr, proj_sq;
        if (shared) {
            corr = sqdist.unaryExpr([&unit](double h2) { return unit.covariance_sq(h2); });
            proj_sq = (basis_t * corr).array().square().matrix();
        }
        for (std::size_t a = 0; a < 3; ++a) {
            if (shared) {
                const double s = models[a].kernel().sill;
                if (want_field) {
                    const Eigen::VectorXd mu = corr.transpose() * models[a].alpha();
                    for (Eigen::Index j = 0; j < m; ++j) mean[static_cast<std::size_t>(j)] = models[a].mean_const() + s * mu(j);
                }
                const Eigen::RowVectorXd quad = inv_eig[a].transpose() * proj_sq;
                for (Eigen::Index j = 0; j < m; ++j)
                    var[static_cast<std::size_t>(j)] = models[a].checked_variance(s - s * s * quad(j));
            } else {
                models[a].predict_from_sqdist(sqdist, want_field ? mean.data() : nullptr,
                                              want_uncertainty ? var.data() : nullptr);
            }
            for (std::size_t j = 0; j < static_cast<std::size_t>(m); ++j) {
                if (want_field) out.field->vectors[begin + j][a] = mean[j];
                if (want_uncertainty) out.uncertainty->variance[begin + j][a] = var[j];
            }
        }
        if (want_uncertainty)
            for (std::size_t v = begin; v < end; ++v) {
                const auto& s = out.uncertainty->variance[v];
                out.uncertainty->trace[v] = s[0] + s[1] + s[2];
            }
    });
    return out;
}

inline DenseField generate_dense_field(const AxisModels& models, const GridSpec& grid, unsigned threads = 0) {
    return std::move(*generate_dense(models, grid, true, false, threads).field);
}

inline UncertaintyMap generate_uncertainty_map(const AxisModels& models, const GridSpec& grid, unsigned threads = 0) {
    return std::move(*generate_dense(models, grid, false, true, threads).uncertainty);
}

namespace detail {

// Continuous index snapped to an integer when it is within rounding noise of one, so that
// sampling exactly at voxel centres reproduces voxel values bit-for-bit.
inline double snap_index(double f) {
    const double r = std::round(f);
    return std::abs(f - r) < 1e-9 ? r : f;
}

struct TrilinearStencil {
    std::array<std::size_t, 3> lo{};
    std::array<std::size_t, 3> hi{};
    std::array<double, 3> t{};
};

inline std::optional<TrilinearStencil> stencil(const GridSpec& grid, const Point3& p) {
    const Point3 ci = grid.continuous_index(p);
    TrilinearStencil s;
    for (std::size_t a = 0; a < 3; ++a) {
        const double f = snap_index(ci[a]);
        const double upper = static_cast<double>(grid.dims[a] - 1);
        if (!(f >= 0.0) || !(f <= upper)) return std::nullopt;
        const double fl = std::floor(f);
        s.lo[a] = static_cast<std::size_t>(fl);
        s.hi[a] = std::min(s.lo[a] + 1, grid.dims[a] - 1);
        s.t[a] = f - fl;
    }
    return s;
}

template <typename Sample, typename T>
T interpolate(const GridSpec& grid, const TrilinearStencil& s, Sample&& at, T zero) {
    T acc = zero;
    for (int corner = 0; corner < 8; ++corner) {
        double w = 1.0;
        std::array<std::size_t, 3> idx{};
        for (std::size_t a = 0; a < 3; ++a) {
            const bool upper = (corner >> a) & 1;
            w *= upper ? s.t[a] : 1.0 - s.t[a];
            idx[a] = upper ? s.hi[a] : s.lo[a];
        }
        if (w == 0.0) continue;
        acc += w * at(grid.index(idx[0], idx[1], idx[2]));
    }
    return acc;
}

} // namespace detail

// Trilinear sample of a volume at a world point; empty outside the grid.
inline std::optional<double> sample_volume(const Volume& vol, const Point3& p) {
    const auto s = detail::stencil(vol.grid, p);
    if (!s) return std::nullopt;
    return detail::interpolate(vol.grid, *s, [&](std::size_t i) { return static_cast<double>(vol.scalars[i]); }, 0.0);
}

inline std::optional<Vec3> sample_field(const DenseField& field, const Point3& p) {
    const auto s = detail::stencil(field.grid, p);
    if (!s) return std::nullopt;
    return detail::interpolate(field.grid, *s, [&](std::size_t i) { return field.vectors[i]; }, Vec3{});
}

struct WarpedVolume {
    Volume volume;
    std::vector<std::uint8_t> valid; // 1 where the pull location fell inside the input
};

// Backward warp onto the field grid: output(x) = input(T(x)), T(x) = affine(x + d(x)).
// The input may live on any grid. Out-of-bounds samples are 0 with valid = 0.
inline WarpedVolume resample_through(const Volume& input, const DenseField& field, const AffineTransform& affine) {
    input.validate();
    const auto n = field.grid.voxel_count();
    if (field.vectors.size() != n) throw Error(ErrorCode::size_mismatch, "field vector count does not match its grid");
    WarpedVolume out{Volume{field.grid, std::vector<float>(n, 0.0f)}, std::vector<std::uint8_t>(n, 0)};
    for (std::size_t v = 0; v < n; ++v) {
        const Point3 target = apply_affine(affine, field.grid.world(v) + field.vectors[v]);
        if (const auto s = sample_volume(input, target)) {
            out.volume.scalars[v] = static_cast<float>(*s);
            out.valid[v] = 1;
        }
    }
    return out;
}

inline WarpedVolume warp_volume(const Volume& vol, const DenseField& field, const AffineTransform& affine) {
    if (!(vol.grid == field.grid))
        throw Error(ErrorCode::size_mismatch, "volume and field grids differ; resample the field first");
    return resample_through(vol, field, affine);
}

struct TransformedPoint {
    Point3 position;
    bool field_applied = true; // false when p was outside the field grid (displacement taken as 0)
};

// Forward map of a pre-space point: affine(p + d(p)) with d trilinearly interpolated.
inline TransformedPoint transform_point(const Point3& p, const DenseField& field, const AffineTransform& affine) {
    const auto d = sample_field(field, p);
    return {apply_affine(affine, p + d.value_or(Vec3{})), d.has_value()};
}

inline std::vector<double> field_magnitude(const DenseField& field) {
    std::vector<double> out(field.vectors.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = field.vectors[i].norm();
    return out;
}

} // namespace gpreg
