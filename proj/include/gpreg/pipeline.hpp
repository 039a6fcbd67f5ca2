#pragma once

// End-to-end fit: affine pre-alignment, kernel estimation, per-axis GPs.

#include <array>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gpreg/affine.hpp"
#include "gpreg/core_types.hpp"
#include "gpreg/error.hpp"
#include "gpreg/gp.hpp"
#include "gpreg/kernel.hpp"
#include "gpreg/kernel_search.hpp"
#include "gpreg/variogram.hpp"

namespace gpreg {

// automatic: variogram when the landmark threshold is met, grid search otherwise.
enum class KernelMode : std::uint8_t { automatic, variogram, grid, manual };

inline std::string_view to_string(KernelMode m) {
    switch (m) {
        case KernelMode::automatic: return "auto";
        case KernelMode::variogram: return "variogram";
        case KernelMode::grid: return "grid";
        case KernelMode::manual: return "manual";
    }
    return "?";
}

inline KernelMode parse_kernel_mode(std::string_view s) {
    if (s == "auto") return KernelMode::automatic;
    if (s == "variogram") return KernelMode::variogram;
    if (s == "grid") return KernelMode::grid;
    if (s == "manual") return KernelMode::manual;
    throw Error(ErrorCode::invalid_argument, "unknown kernel mode '" + std::string(s) + "'");
}

// Where the current kernels came from.
enum class KernelProvenance : std::uint8_t { variogram, grid, manual, fallback };

inline std::string_view to_string(KernelProvenance p) {
    switch (p) {
        case KernelProvenance::variogram: return "variogram";
        case KernelProvenance::grid: return "grid";
        case KernelProvenance::manual: return "manual";
        case KernelProvenance::fallback: return "fallback";
    }
    return "?";
}

inline KernelProvenance parse_kernel_provenance(std::string_view s) {
    if (s == "variogram") return KernelProvenance::variogram;
    if (s == "grid") return KernelProvenance::grid;
    if (s == "manual") return KernelProvenance::manual;
    if (s == "fallback") return KernelProvenance::fallback;
    throw Error(ErrorCode::schema, "unknown kernel provenance '" + std::string(s) + "'");
}

// Methods compared by the evaluation protocol.
enum class MethodKind : std::uint8_t { before, affine, thin_plate, variogram_gp, grid_search_gp };

inline constexpr std::array<MethodKind, 5> all_methods{MethodKind::before, MethodKind::affine, MethodKind::thin_plate,
                                                       MethodKind::variogram_gp, MethodKind::grid_search_gp};

inline std::string_view to_string(MethodKind m) {
    switch (m) {
        case MethodKind::before: return "before";
        case MethodKind::affine: return "affine";
        case MethodKind::thin_plate: return "thin_plate";
        case MethodKind::variogram_gp: return "variogram_gp";
        case MethodKind::grid_search_gp: return "grid_search_gp";
    }
    return "?";
}

inline MethodKind parse_method(std::string_view s) {
    for (const auto m : all_methods)
        if (to_string(m) == s) return m;
    throw Error(ErrorCode::invalid_argument, "unknown method '" + std::string(s) + "'");
}

// Used when there is too little data to estimate anything.
inline KernelSpec fallback_kernel() { return KernelSpec::from_effective_range(KernelFamily::gaussian, 1.0, 20.0, 0.0); }

struct KernelEstimationSettings {
    KernelMode mode = KernelMode::automatic;
    std::optional<AxisKernels> manual;
    KernelGridSpec grid;
    VariogramSettings variogram;
    std::uint64_t cv_seed = default_cv_seed;
    unsigned threads = 0;
};

struct KernelEstimate {
    AxisKernels kernels;
    KernelProvenance provenance = KernelProvenance::fallback;
    std::optional<VariogramEstimate> variogram;
    std::optional<CVResult> cv;
};

inline KernelEstimate estimate_kernels(std::span<const DisplacementObservation> observations,
                                       const KernelEstimationSettings& settings) {
    KernelEstimate est;
    auto mode = settings.mode;
    if (mode == KernelMode::automatic)
        mode = observations.size() >= settings.variogram.min_landmarks ? KernelMode::variogram : KernelMode::grid;

    switch (mode) {
        case KernelMode::manual:
            if (!settings.manual) throw Error(ErrorCode::invalid_argument, "manual kernel mode needs kernels");
            for (const auto& k : *settings.manual) k.validate();
            est.kernels = *settings.manual;
            est.provenance = KernelProvenance::manual;
            return est;
        case KernelMode::variogram:
            est.variogram = estimate_variogram_kernels(observations, settings.variogram);
            est.kernels = est.variogram->kernels;
            est.provenance = KernelProvenance::variogram;
            return est;
        case KernelMode::grid:
        case KernelMode::automatic:
            break;
    }
    if (observations.size() < 2) {
        if (settings.mode == KernelMode::grid)
            throw Error(ErrorCode::insufficient_data, "grid search needs at least 2 landmarks");
        est.kernels = same_kernel(fallback_kernel());
        est.provenance = KernelProvenance::fallback;
        return est;
    }
    const auto grid = build_search_grid(settings.grid, observations);
    est.cv = grid_search(grid, observations, settings.cv_seed, settings.threads);
    est.kernels = est.cv->selected;
    est.provenance = KernelProvenance::grid;
    return est;
}

// Affine stage result; with fewer than 4 usable landmarks the identity stands in and is flagged.
struct AffineStage {
    AffineTransform affine;
    bool available = false;
    std::string reason;
};

inline AffineStage fit_affine_stage(const LandmarkSet& landmarks) {
    AffineStage s;
    try {
        s.affine = fit_affine(landmarks);
        if (!s.affine.is_invertible())
            throw Error(ErrorCode::singular, "fitted affine is not invertible");
        s.available = true;
    } catch (const Error& e) {
        s.affine = AffineTransform::identity();
        s.available = false;
        s.reason = e.what();
    }
    return s;
}

struct Registration {
    LandmarkSet landmarks;
    AffineTransform affine;
    bool affine_available = false;
    std::string affine_reason;
    std::vector<DisplacementObservation> observations;
    AxisKernels kernels;
    KernelProvenance provenance = KernelProvenance::fallback;
    AxisModels models;

    // T(x) = affine(x + mu(x)), evaluated directly from the GP posterior.
    [[nodiscard]] std::vector<Point3> transform(std::span<const Point3> points) const {
        const auto d = predict_displacements(models, points);
        std::vector<Point3> out;
        out.reserve(points.size());
        for (std::size_t i = 0; i < points.size(); ++i) out.push_back(apply_affine(affine, points[i] + d[i]));
        return out;
    }
};

// Fits GPs for given kernels; the affine is refitted unless one is supplied.
inline Registration fit_registration(const LandmarkSet& landmarks, const AxisKernels& kernels,
                                     KernelProvenance provenance,
                                     const std::optional<AffineTransform>& frozen_affine = std::nullopt) {
    Registration r;
    r.landmarks = landmarks;
    if (frozen_affine) {
        r.affine = *frozen_affine;
        r.affine_available = true;
    } else {
        auto stage = fit_affine_stage(landmarks);
        r.affine = stage.affine;
        r.affine_available = stage.available;
        r.affine_reason = std::move(stage.reason);
    }
    r.observations = compute_displacements(landmarks, r.affine);
    r.kernels = kernels;
    r.provenance = provenance;
    r.models = fit_axis_models(kernels, r.observations);
    return r;
}

} // namespace gpreg
