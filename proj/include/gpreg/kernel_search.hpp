#pragma once

// Discrete kernel search scored by cross-validated landmark displacement error.

#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gpreg/core_types.hpp"
#include "gpreg/error.hpp"
#include "gpreg/gp.hpp"
#include "gpreg/kernel.hpp"
#include "gpreg/parallel.hpp"
#include "gpreg/random.hpp"

namespace gpreg {

inline constexpr std::size_t loo_landmark_limit = 50; // fewer landmarks than this: leave-one-out
inline constexpr std::size_t kfold_folds = 5;
inline constexpr std::uint64_t default_cv_seed = 42;

enum class CVKind : std::uint8_t { loo, kfold };

struct CVProtocol {
    CVKind kind = CVKind::loo;
    std::size_t folds = 0; // LOO: one per landmark
    std::uint64_t seed = default_cv_seed;

    [[nodiscard]] std::string name() const { return kind == CVKind::loo ? "loo" : std::to_string(folds) + "-fold"; }
    friend bool operator==(const CVProtocol&, const CVProtocol&) = default;
};

inline CVProtocol choose_protocol(std::size_t n_landmarks, std::uint64_t seed = default_cv_seed) {
    if (n_landmarks < 2)
        throw Error(ErrorCode::insufficient_data, "cross-validation needs at least 2 landmarks",
                    "have " + std::to_string(n_landmarks));
    if (n_landmarks < loo_landmark_limit) return {CVKind::loo, n_landmarks, seed};
    return {CVKind::kfold, kfold_folds, seed};
}

// Fold index for every observation. k-fold: seeded shuffle, then position modulo k.
inline std::vector<std::size_t> fold_assignment(std::size_t n, const CVProtocol& protocol) {
    std::vector<std::size_t> fold(n);
    if (protocol.kind == CVKind::loo) {
        std::iota(fold.begin(), fold.end(), std::size_t{0});
        return fold;
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(protocol.seed);
    rng.shuffle(order);
    for (std::size_t pos = 0; pos < n; ++pos) fold[order[pos]] = pos % protocol.folds;
    return fold;
}

struct CVErrorResult {
    double mean_error = 0.0;              // mm, over all held-out landmarks
    std::vector<double> fold_errors;      // mean per fold
    std::vector<double> landmark_errors;  // per observation, input order
};

inline CVErrorResult cv_error(const AxisKernels& kernels, std::span<const DisplacementObservation> observations,
                              const CVProtocol& protocol) {
    const auto n = observations.size();
    const std::size_t folds = protocol.kind == CVKind::loo ? n : protocol.folds;
    if (folds == 0 || n < 2) throw Error(ErrorCode::insufficient_data, "cross-validation needs at least 2 landmarks");
    const auto assignment = fold_assignment(n, protocol);

    CVErrorResult out;
    out.landmark_errors.assign(n, 0.0);
    out.fold_errors.assign(folds, 0.0);
    for (std::size_t f = 0; f < folds; ++f) {
        std::vector<DisplacementObservation> train;
        std::vector<Point3> held_locations;
        std::vector<std::size_t> held;
        for (std::size_t i = 0; i < n; ++i) {
            if (assignment[i] == f) {
                held.push_back(i);
                held_locations.push_back(observations[i].location);
            } else {
                train.push_back(observations[i]);
            }
        }
        if (held.empty()) continue;
        if (train.empty())
            throw Error(ErrorCode::precondition, "cross-validation fold has no training points",
                        "fold " + std::to_string(f));
        const auto models = fit_axis_models(kernels, train);
        const auto predicted = predict_displacements(models, held_locations);
        double fold_sum = 0.0;
        for (std::size_t h = 0; h < held.size(); ++h) {
            const double e = distance(predicted[h], observations[held[h]].d);
            out.landmark_errors[held[h]] = e;
            fold_sum += e;
        }
        out.fold_errors[f] = fold_sum / static_cast<double>(held.size());
    }
    out.mean_error = std::accumulate(out.landmark_errors.begin(), out.landmark_errors.end(), 0.0) /
                     static_cast<double>(n);
    return out;
}

inline CVErrorResult cv_error(const KernelSpec& kernel, std::span<const DisplacementObservation> observations,
                              const CVProtocol& protocol) {
    return cv_error(same_kernel(kernel), observations, protocol);
}

// Candidate list, either explicit or a cartesian product. Empty `sills` means "per-axis
// empirical variance of the displacements".
struct KernelGridSpec {
    std::vector<KernelSpec> candidates;
    std::vector<KernelFamily> families{KernelFamily::gaussian, KernelFamily::exponential};
    std::vector<double> effective_ranges{5.0, 10.0, 20.0, 40.0, 80.0};
    std::vector<double> nuggets{0.0, 0.05, 0.25};
    std::vector<double> sills;
};

struct SearchGrid {
    std::vector<AxisKernels> candidates;
};

inline constexpr double min_auto_sill = 1e-6;

inline std::array<double, 3> empirical_axis_variance(std::span<const DisplacementObservation> observations) {
    std::array<double, 3> mean{}, var{};
    if (observations.empty()) return {min_auto_sill, min_auto_sill, min_auto_sill};
    const double n = static_cast<double>(observations.size());
    for (const auto& o : observations)
        for (std::size_t a = 0; a < 3; ++a) mean[a] += o.d[a] / n;
    for (const auto& o : observations)
        for (std::size_t a = 0; a < 3; ++a) var[a] += (o.d[a] - mean[a]) * (o.d[a] - mean[a]) / n;
    for (auto& v : var) v = std::max(v, min_auto_sill);
    return var;
}

inline SearchGrid build_search_grid(const KernelGridSpec& spec, std::span<const DisplacementObservation> observations) {
    SearchGrid grid;
    if (!spec.candidates.empty()) {
        for (const auto& k : spec.candidates) {
            k.validate();
            grid.candidates.push_back(same_kernel(k));
        }
        return grid;
    }
    const auto auto_sill = empirical_axis_variance(observations);
    for (const auto family : spec.families) {
        for (const double range : spec.effective_ranges) {
            for (const double nugget : spec.nuggets) {
                if (spec.sills.empty()) {
                    AxisKernels k;
                    for (std::size_t a = 0; a < 3; ++a)
                        k[a] = KernelSpec::from_effective_range(family, auto_sill[a], range, nugget);
                    for (const auto& ka : k) ka.validate();
                    grid.candidates.push_back(k);
                } else {
                    for (const double sill : spec.sills) {
                        const auto k = KernelSpec::from_effective_range(family, sill, range, nugget);
                        k.validate();
                        grid.candidates.push_back(same_kernel(k));
                    }
                }
            }
        }
    }
    return grid;
}

struct CandidateResult {
    AxisKernels kernels;
    double mean_error = std::numeric_limits<double>::infinity();
    std::vector<double> fold_errors;
    bool failed = false;
    std::string failure;
};

struct CVResult {
    CVProtocol protocol;
    std::vector<CandidateResult> candidates;
    std::size_t selected_index = 0;
    AxisKernels selected;

    [[nodiscard]] double selected_error() const { return candidates.at(selected_index).mean_error; }
};

// Every candidate is scored under choose_protocol's rule; the first minimal candidate wins.
inline CVResult grid_search(const SearchGrid& grid, std::span<const DisplacementObservation> observations,
                            std::uint64_t seed = default_cv_seed, unsigned threads = 0) {
    if (grid.candidates.empty()) throw Error(ErrorCode::invalid_argument, "kernel search grid is empty");
    CVResult result;
    result.protocol = choose_protocol(observations.size(), seed);
    result.candidates.resize(grid.candidates.size());
    parallel_for(grid.candidates.size(), threads, [&](std::size_t c) {
        auto& slot = result.candidates[c];
        slot.kernels = grid.candidates[c];
        try {
            auto cv = cv_error(slot.kernels, observations, result.protocol);
            slot.mean_error = cv.mean_error;
            slot.fold_errors = std::move(cv.fold_errors);
        } catch (const Error& e) {
            slot.failed = true;
            slot.failure = e.what();
        }
    });

    bool found = false;
    for (std::size_t c = 0; c < result.candidates.size(); ++c) {
        const auto& cand = result.candidates[c];
        if (cand.failed || !std::isfinite(cand.mean_error)) continue;
        if (!found || cand.mean_error < result.candidates[result.selected_index].mean_error) {
            result.selected_index = c;
            found = true;
        }
    }
    if (!found)
        throw Error(ErrorCode::ill_conditioned, "every kernel candidate failed cross-validation",
                    result.candidates.front().failure);
    result.selected = result.candidates[result.selected_index].kernels;
    return result;
}

} // namespace gpreg
