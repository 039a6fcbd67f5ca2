#pragma once

// Empirical variograms of displacement components and continuous model fitting.
//
// Cloud point for a pair (i, j) on one axis: h = |x_i - x_j|, gamma = (d_i - d_j)^2 / 2.
// Binning with half-width delta puts h into ((b) 2 delta, (b+1) 2 delta]; a bin's estimate is
// the mean of its cloud values, plotted at the mean distance of its members.
//
// Models (h > 0; gamma(0) = 0 by definition):
//   gaussian    gamma(h) = c0 + c (1 - exp(-h^2 / a))      effective range sqrt(3 a)
//   exponential gamma(h) = c0 + c (1 - exp(-h / l))        effective range 3 l

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gpreg/core_types.hpp"
#include "gpreg/error.hpp"
#include "gpreg/kernel.hpp"
#include "gpreg/optimize.hpp"

namespace gpreg {

struct VariogramCloudPoint {
    double h = 0.0;     // mm
    double gamma = 0.0; // mm^2
};

struct VariogramBin {
    double h_mean = 0.0;
    double gamma_hat = 0.0;
    std::size_t count = 0;
};

struct EmpiricalVariogram {
    std::optional<Axis> axis; // empty for a pooled (all-axes) variogram
    double delta = 0.0;
    std::vector<VariogramBin> bins;
};

struct VariogramModel {
    KernelFamily family = KernelFamily::gaussian;
    double nugget = 0.0;       // c0
    double partial_sill = 0.0; // c
    double param = 1.0;        // a (gaussian, mm^2) or l (exponential, mm)
    double fit_error = 0.0;    // count-weighted squared error
    bool no_spatial_correlation = false;

    [[nodiscard]] double evaluate(double h) const {
        if (h <= 0.0) return 0.0;
        const double shape = family == KernelFamily::gaussian ? std::exp(-(h * h) / param) : std::exp(-h / param);
        return nugget + partial_sill * (1.0 - shape);
    }

    [[nodiscard]] double total_sill() const { return nugget + partial_sill; }
};

struct VariogramFit {
    VariogramModel best;
    std::vector<VariogramModel> candidates; // one per family tried, in request order
};

namespace detail {

template <typename Values>
std::vector<VariogramCloudPoint> make_cloud(std::span<const DisplacementObservation> obs, Values&& value_of) {
    if (obs.size() < 2)
        throw Error(ErrorCode::insufficient_data, "variogram cloud needs at least 2 observations",
                    "have " + std::to_string(obs.size()));
    std::vector<VariogramCloudPoint> cloud;
    cloud.reserve(obs.size() * (obs.size() - 1) / 2);
    for (std::size_t i = 0; i < obs.size(); ++i) {
        for (std::size_t j = i + 1; j < obs.size(); ++j) {
            const double h = distance(obs[i].location, obs[j].location);
            value_of(obs[i].d, obs[j].d, [&](double diff) { cloud.push_back({h, 0.5 * diff * diff}); });
        }
    }
    return cloud;
}

} // namespace detail

inline std::vector<VariogramCloudPoint> variogram_cloud(std::span<const DisplacementObservation> observations,
                                                        Axis axis) {
    const auto a = static_cast<std::size_t>(axis);
    return detail::make_cloud(observations, [a](const Vec3& di, const Vec3& dj, auto&& emit) { emit(di[a] - dj[a]); });
}

// All three components pooled into one cloud (three points per pair).
inline std::vector<VariogramCloudPoint> variogram_cloud_pooled(std::span<const DisplacementObservation> observations) {
    return detail::make_cloud(observations, [](const Vec3& di, const Vec3& dj, auto&& emit) {
        for (std::size_t a = 0; a < 3; ++a) emit(di[a] - dj[a]);
    });
}

inline EmpiricalVariogram bin_variogram(std::span<const VariogramCloudPoint> cloud, double delta,
                                        double max_lag = std::numeric_limits<double>::infinity()) {
    if (!(delta > 0.0) || !std::isfinite(delta))
        throw Error(ErrorCode::invalid_argument, "variogram bin half-width must be positive");
    struct Acc {
        double h = 0.0;
        double g = 0.0;
        std::size_t n = 0;
    };
    std::vector<Acc> acc;
    const double width = 2.0 * delta;
    for (const auto& p : cloud) {
        if (!(p.h > 0.0) || p.h > max_lag) continue;
        const auto b = static_cast<std::size_t>(std::max(0.0, std::ceil(p.h / width) - 1.0));
        if (b >= acc.size()) acc.resize(b + 1);
        acc[b].h += p.h;
        acc[b].g += p.gamma;
        ++acc[b].n;
    }
    EmpiricalVariogram out;
    out.delta = delta;
    for (const auto& a : acc) {
        if (a.n == 0) continue;
        const double n = static_cast<double>(a.n);
        out.bins.push_back({a.h / n, a.g / n, a.n});
    }
    return out;
}

struct LagSettings {
    double delta = 0.0;
    double max_lag = 0.0;
};

inline constexpr std::size_t min_default_bins = 6;

// delta = half the mean nearest-neighbour spacing, shrunk until at least 6 bins are populated
// within max_lag = half the largest pairwise distance.
inline LagSettings default_lag_settings(std::span<const DisplacementObservation> observations) {
    const auto n = observations.size();
    if (n < 2) throw Error(ErrorCode::insufficient_data, "need at least 2 observations to choose a lag");
    std::vector<double> dists;
    dists.reserve(n * (n - 1) / 2);
    double nn_sum = 0.0;
    double max_dist = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double nn = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            const double h = distance(observations[i].location, observations[j].location);
            nn = std::min(nn, h);
            if (j > i) {
                dists.push_back(h);
                max_dist = std::max(max_dist, h);
            }
        }
        nn_sum += nn;
    }
    LagSettings out;
    out.max_lag = 0.5 * max_dist;
    out.delta = 0.5 * nn_sum / static_cast<double>(n);
    if (!(out.delta > 0.0)) out.delta = std::max(out.max_lag, 1e-6) / 12.0;

    auto populated = [&](double delta) {
        std::vector<bool> seen;
        std::size_t count = 0;
        for (double h : dists) {
            if (!(h > 0.0) || h > out.max_lag) continue;
            const auto b = static_cast<std::size_t>(std::max(0.0, std::ceil(h / (2.0 * delta)) - 1.0));
            if (b >= seen.size()) seen.resize(b + 1, false);
            if (!seen[b]) {
                seen[b] = true;
                ++count;
            }
        }
        return count;
    };
    for (int i = 0; i < 200 && populated(out.delta) < min_default_bins; ++i) out.delta *= 0.8;
    return out;
}

inline double effective_range(const VariogramModel& model) {
    return model.family == KernelFamily::gaussian ? std::sqrt(3.0 * model.param) : 3.0 * model.param;
}

// k(h) = c exp(...), nugget c0 becomes observation noise. For h > 0: k(h) + gamma(h) = c0 + c.
inline KernelSpec model_to_kernel(const VariogramModel& model) {
    KernelSpec k{model.family, model.partial_sill, model.param, model.nugget};
    k.validate();
    return k;
}

inline constexpr std::size_t min_fit_bins = 4;

inline VariogramFit fit_variogram_model(const EmpiricalVariogram& emp,
                                        std::span<const KernelFamily> families = std::span<const KernelFamily>{}) {
    static constexpr std::array<KernelFamily, 2> default_families{KernelFamily::gaussian, KernelFamily::exponential};
    if (families.empty()) families = default_families;
    const auto& bins = emp.bins;
    if (bins.size() < min_fit_bins)
        throw Error(ErrorCode::insufficient_data, "variogram model fit needs at least 4 nonempty bins",
                    "have " + std::to_string(bins.size()));

    double weight_sum = 0.0;
    double weighted_gamma = 0.0;
    double gamma_max = 0.0;
    double h_lo = std::numeric_limits<double>::infinity();
    double h_hi = 0.0;
    for (const auto& b : bins) {
        const double w = static_cast<double>(b.count);
        weight_sum += w;
        weighted_gamma += w * b.gamma_hat;
        gamma_max = std::max(gamma_max, b.gamma_hat);
        h_lo = std::min(h_lo, b.h_mean);
        h_hi = std::max(h_hi, b.h_mean);
    }
    const double scale = gamma_max > 0.0 ? gamma_max : 1.0;
    const double norm = weight_sum * scale * scale;
    const double nugget_eps = 1e-9 * scale;

    auto weighted_error = [&](const VariogramModel& m) {
        double e = 0.0;
        for (const auto& b : bins) {
            const double r = m.evaluate(b.h_mean) - b.gamma_hat;
            e += static_cast<double>(b.count) * r * r;
        }
        return e;
    };

    // Pure-nugget model: the count-weighted mean, with the partial sill at its floor.
    VariogramModel flat;
    flat.nugget = weighted_gamma / weight_sum;
    flat.partial_sill = std::max(flat.nugget, scale) * 1e-9;
    flat.no_spatial_correlation = true;

    VariogramFit out;
    for (const auto family : families) {
        const bool gaussian = family == KernelFamily::gaussian;
        const double r_lo = 0.1 * h_lo;
        // Ranges past the largest observed lag are not identifiable from the bins.
        const double r_hi = h_hi;
        auto range_to_param = [gaussian](double r) { return gaussian ? r * r / 3.0 : r / 3.0; };
        const double log_p_lo = std::log(range_to_param(r_lo));
        const double log_p_hi = std::log(range_to_param(r_hi));

        auto decode = [&](const std::array<double, 3>& x) {
            VariogramModel m;
            m.family = family;
            m.nugget = std::max(0.0, std::exp(x[0]) - nugget_eps);
            m.partial_sill = std::exp(x[1]);
            m.param = std::exp(x[2]);
            return m;
        };
        auto objective = [&](const std::array<double, 3>& x) {
            if (x[2] < log_p_lo || x[2] > log_p_hi || x[1] > std::log(1e3 * scale) || x[0] > std::log(1e3 * scale))
                return std::numeric_limits<double>::infinity();
            return weighted_error(decode(x)) / norm;
        };

        const double c0_start = 0.5 * std::max(bins.front().gamma_hat, 0.0);
        const double c_start = std::max(gamma_max - c0_start, 1e-3 * scale);
        static constexpr std::array<double, 5> range_fractions{0.15, 0.3, 0.5, 0.75, 1.0};

        SimplexOptions options;
        options.absolute_tolerance = 1e-30;
        SimplexResult<3> best;
        bool any_converged = false;
        for (double frac : range_fractions) {
            const std::array<double, 3> start{std::log(c0_start + nugget_eps), std::log(c_start),
                                              std::log(range_to_param(frac * h_hi))};
            auto res = minimize_simplex<3>(objective, start, {0.5, 0.5, 0.5}, options);
            any_converged = any_converged || res.converged;
            if (res.value < best.value) best = res;
        }
        if (!std::isfinite(best.value) || !any_converged)
            throw Error(ErrorCode::not_converged, "variogram model fit did not converge",
                        std::string(to_string(family)) + " best weighted error " +
                            std::to_string(best.value * norm));

        VariogramModel model = decode(best.x);
        model.fit_error = weighted_error(model);

        VariogramModel degenerate = flat;
        degenerate.family = family;
        degenerate.param = std::exp(0.5 * (log_p_lo + log_p_hi));
        degenerate.fit_error = weighted_error(degenerate);
        if (degenerate.fit_error <= model.fit_error * (1.0 + 1e-9) + 1e-14 * norm) model = degenerate;

        out.candidates.push_back(model);
    }

    out.best = out.candidates.front();
    for (const auto& c : out.candidates)
        if (c.fit_error < out.best.fit_error) out.best = c;
    return out;
}

// Variogram-driven kernel estimation for all three axes (or one pooled kernel).
struct VariogramSettings {
    std::optional<double> delta; // bin half-width override, mm
    std::size_t min_landmarks = 50;
    bool pooled = false;
    std::vector<KernelFamily> families{KernelFamily::gaussian, KernelFamily::exponential};
};

struct VariogramExport {
    EmpiricalVariogram empirical;
    VariogramFit fit;
    std::size_t cloud_size = 0;
};

struct VariogramEstimate {
    AxisKernels kernels;
    bool pooled = false;
    LagSettings lags;
    std::vector<VariogramExport> exports; // 3 per-axis entries, or 1 pooled
};

inline void require_variogram_eligible(std::size_t n_landmarks, const VariogramSettings& settings) {
    if (n_landmarks < settings.min_landmarks)
        throw Error(ErrorCode::unavailable, "below landmark threshold for the variogram method",
                    "need >= " + std::to_string(settings.min_landmarks) + " landmarks, have " +
                        std::to_string(n_landmarks));
}

inline VariogramExport analyze_variogram(std::span<const VariogramCloudPoint> cloud, const LagSettings& lags,
                                         std::optional<Axis> axis, std::span<const KernelFamily> families) {
    VariogramExport ex;
    ex.cloud_size = cloud.size();
    ex.empirical = bin_variogram(cloud, lags.delta, lags.max_lag);
    ex.empirical.axis = axis;
    ex.fit = fit_variogram_model(ex.empirical, families);
    return ex;
}

inline VariogramEstimate estimate_variogram_kernels(std::span<const DisplacementObservation> observations,
                                                    const VariogramSettings& settings) {
    require_variogram_eligible(observations.size(), settings);
    VariogramEstimate est;
    est.pooled = settings.pooled;
    est.lags = default_lag_settings(observations);
    if (settings.delta) est.lags.delta = *settings.delta;

    if (settings.pooled) {
        const auto cloud = variogram_cloud_pooled(observations);
        est.exports.push_back(analyze_variogram(cloud, est.lags, std::nullopt, settings.families));
        est.kernels = same_kernel(model_to_kernel(est.exports.front().fit.best));
        return est;
    }
    for (const auto axis : all_axes) {
        const auto cloud = variogram_cloud(observations, axis);
        est.exports.push_back(analyze_variogram(cloud, est.lags, axis, settings.families));
        est.kernels[static_cast<std::size_t>(axis)] = model_to_kernel(est.exports.back().fit.best);
    }
    return est;
}

} // namespace gpreg
