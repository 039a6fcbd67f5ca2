#pragma once

// Evaluation protocol: held-out landmark error per method, a table report, and the seeded
// synthetic case generator used in place of clinical data.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "gpreg/affine.hpp"
#include "gpreg/core_types.hpp"
#include "gpreg/error.hpp"
#include "gpreg/field.hpp"
#include "gpreg/gp.hpp"
#include "gpreg/io.hpp"
#include "gpreg/kernel.hpp"
#include "gpreg/kernel_search.hpp"
#include "gpreg/parallel.hpp"
#include "gpreg/pipeline.hpp"
#include "gpreg/random.hpp"
#include "gpreg/tps.hpp"
#include "gpreg/variogram.hpp"

namespace gpreg {

struct ErrorSummary {
    double mean = 0.0;
    double std = 0.0; // population
    std::vector<double> errors;
};

inline ErrorSummary summarize_errors(std::vector<double> errors) {
    ErrorSummary s;
    s.errors = std::move(errors);
    if (s.errors.empty()) return s;
    const double n = static_cast<double>(s.errors.size());
    s.mean = std::accumulate(s.errors.begin(), s.errors.end(), 0.0) / n;
    double ss = 0.0;
    for (double e : s.errors) ss += (e - s.mean) * (e - s.mean);
    s.std = std::sqrt(ss / n);
    return s;
}

inline ErrorSummary mean_euclidean_error(std::span<const Point3> predicted, std::span<const Point3> truth) {
    if (predicted.size() != truth.size())
        throw Error(ErrorCode::size_mismatch, "predicted and ground-truth point counts differ",
                    std::to_string(predicted.size()) + " vs " + std::to_string(truth.size()));
    if (predicted.empty()) throw Error(ErrorCode::insufficient_data, "no points to evaluate");
    std::vector<double> errors(predicted.size());
    for (std::size_t i = 0; i < predicted.size(); ++i) errors[i] = distance(predicted[i], truth[i]);
    return summarize_errors(std::move(errors));
}

// ---------------------------------------------------------------------------------------------
// Synthetic cases

inline constexpr std::size_t max_exact_sample_size = 500;

struct SyntheticSpec {
    std::uint64_t seed = 1;
    std::size_t landmarks = 80;    // training + evaluation
    double eval_fraction = 0.3;
    double extent = 100.0;          // landmarks uniform in [0, extent]^3, mm
    // Smooth part of the displacement; the nugget becomes i.i.d. observation noise.
    // Empty means no non-affine deformation.
    std::optional<KernelSpec> field_kernel =
        KernelSpec::from_effective_range(KernelFamily::gaussian, 4.0, 50.0, 0.01);
    double affine_linear = 0.05;    // max |A - I| entry
    double affine_translation = 5.0; // max |t| entry, mm
    std::optional<GridSpec> volume_grid;
};

struct SyntheticCase {
    std::string name;
    std::uint64_t seed = 0;
    AffineTransform affine;
    std::optional<KernelSpec> field_kernel;
    double sampling_jitter = 0.0;
    std::vector<Point3> locations;   // all sampled pre points, id order
    std::vector<Vec3> latent;        // smooth displacement at each location
    std::vector<Vec3> displacements; // latent + noise
    LandmarkSet training;
    LandmarkSet evaluation;
    std::optional<Volume> pre_volume;
    std::optional<Volume> post_volume;
};

inline EvaluationCase to_evaluation_case(const SyntheticCase& c) { return {c.name, c.seed, c.training, c.evaluation}; }

// Splits a landmark set by seeded shuffle: round(eval_fraction * n) pairs are held out.
inline EvaluationCase split_landmarks(const LandmarkSet& set, std::uint64_t seed, double eval_fraction = 0.3,
                                      std::string name = {}) {
    if (!(eval_fraction >= 0.0 && eval_fraction < 1.0))
        throw Error(ErrorCode::invalid_argument, "evaluation fraction must be in [0, 1)");
    std::vector<std::size_t> order(set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(seed);
    rng.shuffle(order);
    const auto n_eval = static_cast<std::size_t>(std::llround(eval_fraction * static_cast<double>(set.size())));
    std::vector<bool> held(set.size(), false);
    for (std::size_t i = 0; i < n_eval; ++i) held[order[i]] = true;
    EvaluationCase c;
    c.name = std::move(name);
    c.seed = seed;
    for (std::size_t i = 0; i < set.size(); ++i) (held[i] ? c.evaluation : c.training).pairs.push_back(set.pairs[i]);
    return c;
}

namespace detail {

// Lower Cholesky factor of K + jitter*I, escalating jitter like the GP fit does.
inline Eigen::MatrixXd sampling_factor(const KernelSpec& kernel, std::span<const Point3> points, double& jitter) {
    Eigen::MatrixXd gram = build_gram(kernel, points);
    jitter = initial_relative_jitter * kernel.sill;
    for (;;) {
        Eigen::MatrixXd reg = gram;
        reg.diagonal().array() += jitter;
        Eigen::LLT<Eigen::MatrixXd> llt(reg);
        if (llt.info() == Eigen::Success) return llt.matrixL();
        jitter *= 10.0;
        if (jitter > max_relative_jitter * kernel.sill * (1.0 + 1e-12))
            throw Error(ErrorCode::ill_conditioned, "cannot factor the sampling covariance");
    }
}

struct Blob {
    Point3 centre;
    double amplitude;
    double width;
};

inline double blob_intensity(std::span<const Blob> blobs, const Point3& p) {
    double v = 0.0;
    for (const auto& b : blobs) v += b.amplitude * std::exp(-squared_distance(p, b.centre) / (2.0 * b.width * b.width));
    return v;
}

} // namespace detail

inline SyntheticCase generate_synthetic_case(const SyntheticSpec& spec) {
    if (!(spec.extent > 0.0) || !std::isfinite(spec.extent))
        throw Error(ErrorCode::invalid_argument, "synthetic extent must be positive");
    if (spec.landmarks == 0) throw Error(ErrorCode::invalid_argument, "synthetic case needs at least one landmark");
    if (spec.landmarks > max_exact_sample_size)
        throw Error(ErrorCode::out_of_range, "too many landmarks for exact GP sampling",
                    "max " + std::to_string(max_exact_sample_size) + ", requested " + std::to_string(spec.landmarks));
    if (spec.field_kernel) spec.field_kernel->validate();
    if (!(spec.affine_linear >= 0.0) || !(spec.affine_translation >= 0.0))
        throw Error(ErrorCode::invalid_argument, "affine perturbation bounds must be non-negative");

    SyntheticCase c;
    c.seed = spec.seed;
    c.name = "synthetic-" + std::to_string(spec.seed);
    c.field_kernel = spec.field_kernel;
    Rng rng(spec.seed);

    for (int r = 0; r < 3; ++r) {
        for (int k = 0; k < 3; ++k) c.affine.linear(r, k) += rng.uniform(-spec.affine_linear, spec.affine_linear);
        c.affine.translation(r) = rng.uniform(-spec.affine_translation, spec.affine_translation);
    }

    const std::size_t n = spec.landmarks;
    c.locations.resize(n);
    for (auto& p : c.locations) p = {rng.uniform(0.0, spec.extent), rng.uniform(0.0, spec.extent),
                                     rng.uniform(0.0, spec.extent)};

    c.latent.assign(n, Vec3{});
    c.displacements.assign(n, Vec3{});
    if (spec.field_kernel) {
        const auto L = detail::sampling_factor(*spec.field_kernel, c.locations, c.sampling_jitter);
        const double noise_sd = std::sqrt(spec.field_kernel->nugget);
        for (std::size_t a = 0; a < 3; ++a) {
            Eigen::VectorXd z(static_cast<Eigen::Index>(n));
            for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = rng.normal();
            const Eigen::VectorXd f = L * z;
            for (std::size_t i = 0; i < n; ++i) {
                c.latent[i][a] = f(static_cast<Eigen::Index>(i));
                c.displacements[i][a] = c.latent[i][a] + noise_sd * rng.normal();
            }
        }
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    const auto n_eval = static_cast<std::size_t>(std::llround(spec.eval_fraction * static_cast<double>(n)));
    std::vector<bool> held(n, false);
    for (std::size_t i = 0; i < std::min(n_eval, n); ++i) held[order[i]] = true;
    for (std::size_t i = 0; i < n; ++i) {
        LandmarkPair p{static_cast<std::int64_t>(i + 1), c.locations[i],
                       apply_affine(c.affine, c.locations[i] + c.displacements[i]), LandmarkSource::file};
        (held[i] ? c.evaluation : c.training).pairs.push_back(p);
    }

    if (spec.volume_grid) {
        const GridSpec& grid = *spec.volume_grid;
        grid.validate();
        std::vector<detail::Blob> blobs(12);
        for (auto& b : blobs) {
            b.centre = {rng.uniform(0.0, spec.extent), rng.uniform(0.0, spec.extent), rng.uniform(0.0, spec.extent)};
            b.amplitude = rng.uniform(0.5, 1.5);
            b.width = rng.uniform(0.05, 0.15) * spec.extent;
        }
        const auto nv = grid.voxel_count();
        Volume pre{grid, std::vector<float>(nv)}, post{grid, std::vector<float>(nv)};
        for (std::size_t v = 0; v < nv; ++v)
            pre.scalars[v] = static_cast<float>(detail::blob_intensity(blobs, grid.world(v)));

        // post(y) = pre(x) with y = A(x + g(x)); g interpolates the latent samples.
        std::optional<AxisModels> g;
        if (spec.field_kernel) {
            KernelSpec exact = *spec.field_kernel;
            exact.nugget = 0.0;
            std::vector<DisplacementObservation> obs(n);
            for (std::size_t i = 0; i < n; ++i) obs[i] = {c.locations[i], c.latent[i]};
            g = fit_axis_models(same_kernel(exact), obs);
        }
        const auto inverse = invert_affine(c.affine);
        std::vector<Point3> z(nv), x(nv);
        for (std::size_t v = 0; v < nv; ++v) z[v] = x[v] = apply_affine(inverse, grid.world(v));
        if (g) {
            for (int it = 0; it < 30; ++it) {
                const auto d = predict_displacements(*g, x);
                double change = 0.0;
                for (std::size_t v = 0; v < nv; ++v) {
                    const Point3 next = z[v] - d[v];
                    change = std::max(change, distance(next, x[v]));
                    x[v] = next;
                }
                if (change < 1e-6) break;
            }
        }
        for (std::size_t v = 0; v < nv; ++v) post.scalars[v] = static_cast<float>(detail::blob_intensity(blobs, x[v]));
        c.pre_volume = std::move(pre);
        c.post_volume = std::move(post);
    }
    return c;
}

// ---------------------------------------------------------------------------------------------
// Protocol

enum class MethodStatus : std::uint8_t { ok, not_available };

struct MethodResult {
    MethodKind method = MethodKind::before;
    MethodStatus status = MethodStatus::ok;
    std::string reason; // set when not available
    double mean_error = 0.0;
    double std_error = 0.0;
    std::vector<double> errors;
    std::optional<CVProtocol> protocol;     // kernel-selection CV, grid-search GP only
    std::optional<double> selection_cv_error;
    std::optional<AxisKernels> kernels;
    double runtime_seconds = 0.0;

    [[nodiscard]] bool ok() const { return status == MethodStatus::ok; }
};

struct CaseResult {
    std::string name;
    std::size_t training_landmarks = 0;
    std::size_t evaluation_landmarks = 0;
    std::string protocol; // CV rule for the training landmark count
    std::vector<MethodResult> methods;
    double runtime_seconds = 0.0;
    bool over_budget = false;

    [[nodiscard]] const MethodResult* find(MethodKind m) const {
        for (const auto& r : methods)
            if (r.method == m) return &r;
        return nullptr;
    }
};

inline constexpr double case_time_budget_seconds = 600.0;

struct ProtocolSettings {
    KernelEstimationSettings kernels;
    std::vector<MethodKind> methods{all_methods.begin(), all_methods.end()};
    double budget_seconds = case_time_budget_seconds;
};

namespace detail {

inline std::vector<Point3> transform_with(const AffineTransform& affine, std::span<const Point3> points,
                                          const std::vector<Vec3>& d) {
    std::vector<Point3> out(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) out[i] = apply_affine(affine, points[i] + d[i]);
    return out;
}

} // namespace detail

inline CaseResult run_protocol(const EvaluationCase& c, const ProtocolSettings& settings = {}) {
    using clock = std::chrono::steady_clock;
    const auto case_start = clock::now();
    if (c.evaluation.empty()) throw Error(ErrorCode::insufficient_data, "case has no evaluation landmarks", c.name);
    require_valid(c.training);
    require_valid(c.evaluation);

    CaseResult out;
    out.name = c.name;
    out.training_landmarks = c.training.size();
    out.evaluation_landmarks = c.evaluation.size();
    out.protocol = c.training.size() >= 2 ? choose_protocol(c.training.size(), settings.kernels.cv_seed).name() : "n/a";

    const auto queries = c.evaluation.pre_points();
    const auto truth = c.evaluation.post_points();

    // Shared by the affine-based methods; computed on first use.
    std::optional<AffineTransform> affine;
    std::string affine_failure;
    auto get_affine = [&]() -> const AffineTransform& {
        if (!affine) {
            affine = fit_affine(c.training);
            if (!affine->is_invertible()) throw Error(ErrorCode::singular, "fitted affine is not invertible");
        }
        return *affine;
    };

    for (const auto method : settings.methods) {
        MethodResult r;
        r.method = method;
        const auto start = clock::now();
        const double elapsed = std::chrono::duration<double>(start - case_start).count();
        if (elapsed > settings.budget_seconds) {
            r.status = MethodStatus::not_available;
            r.reason = "case time budget exceeded";
            out.over_budget = true;
            out.methods.push_back(std::move(r));
            continue;
        }
        try {
            std::vector<Point3> predicted;
            switch (method) {
                case MethodKind::before:
                    predicted = queries;
                    break;
                case MethodKind::affine:
                    predicted = detail::transform_with(get_affine(), queries, std::vector<Vec3>(queries.size()));
                    break;
                case MethodKind::thin_plate: {
                    const auto& A = get_affine();
                    const auto model = fit_tps(compute_displacements(c.training, A));
                    predicted = detail::transform_with(A, queries, tps_predict(model, queries));
                    break;
                }
                case MethodKind::variogram_gp:
                case MethodKind::grid_search_gp: {
                    const auto& A = get_affine();
                    const auto obs = compute_displacements(c.training, A);
                    auto ks = settings.kernels;
                    ks.mode = method == MethodKind::variogram_gp ? KernelMode::variogram : KernelMode::grid;
                    const auto est = estimate_kernels(obs, ks);
                    const auto models = fit_axis_models(est.kernels, obs);
                    predicted = detail::transform_with(A, queries, predict_displacements(models, queries));
                    r.kernels = est.kernels;
                    if (est.cv) {
                        r.protocol = est.cv->protocol;
                        r.selection_cv_error = est.cv->selected_error();
                    }
                    break;
                }
            }
            const auto s = mean_euclidean_error(predicted, truth);
            r.mean_error = s.mean;
            r.std_error = s.std;
            r.errors = s.errors;
        } catch (const Error& e) {
            r.status = MethodStatus::not_available;
            r.reason = e.what();
            if (!e.detail().empty()) r.reason += " (" + e.detail() + ")";
        }
        r.runtime_seconds = std::chrono::duration<double>(clock::now() - start).count();
        out.methods.push_back(std::move(r));
    }
    out.runtime_seconds = std::chrono::duration<double>(clock::now() - case_start).count();
    if (out.runtime_seconds > settings.budget_seconds) out.over_budget = true;
    return out;
}

// Cases run concurrently; each case is single-threaded inside so results do not depend on
// scheduling.
inline std::vector<CaseResult> run_cases(std::span<const EvaluationCase> cases, const ProtocolSettings& settings,
                                         unsigned threads = 0) {
    std::vector<CaseResult> results(cases.size());
    auto inner = settings;
    if (cases.size() > 1) inner.kernels.threads = 1;
    parallel_for(cases.size(), cases.size() > 1 ? threads : 1,
                 [&](std::size_t i) { results[i] = run_protocol(cases[i], inner); });
    return results;
}

// ---------------------------------------------------------------------------------------------
// Report

inline std::string format_mean_std(double mean, double std) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f±%.2f", mean, std);
    return buf;
}

inline std::string format_cell(const MethodResult* r) {
    if (r == nullptr || !r->ok()) return "n/a";
    return format_mean_std(r->mean_error, r->std_error);
}

// Display width in code points (the table only uses characters of width 1).
inline std::size_t display_width(std::string_view s) {
    std::size_t w = 0;
    for (unsigned char ch : s)
        if ((ch & 0xC0u) != 0x80u) ++w;
    return w;
}

inline const std::array<std::string, 7> report_columns{"Case",      "Landmarks",  "Before Reg.", "Affine",
                                                       "Thin-plate", "Variograms", "GaussianK"};

inline std::vector<std::string> report_row(const CaseResult& c) {
    return {c.name,
            std::to_string(c.training_landmarks),
            format_cell(c.find(MethodKind::before)),
            format_cell(c.find(MethodKind::affine)),
            format_cell(c.find(MethodKind::thin_plate)),
            format_cell(c.find(MethodKind::variogram_gp)),
            format_cell(c.find(MethodKind::grid_search_gp))};
}

inline std::string render_report(std::span<const CaseResult> results) {
    std::vector<std::vector<std::string>> rows;
    rows.emplace_back(report_columns.begin(), report_columns.end());
    for (const auto& c : results) rows.push_back(report_row(c));
    std::array<std::size_t, 7> width{};
    for (const auto& row : rows)
        for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], display_width(row[i]));

    std::string out;
    auto emit = [&](const std::vector<std::string>& row) {
        std::string line;
        for (std::size_t i = 0; i < row.size(); ++i) {
            if (i > 0) line += " | ";
            line += row[i];
            line.append(width[i] - display_width(row[i]), ' ');
        }
        while (!line.empty() && line.back() == ' ') line.pop_back();
        out += line + "\n";
    };
    emit(rows.front());
    std::string rule;
    for (std::size_t i = 0; i < width.size(); ++i) {
        if (i > 0) rule += "-+-";
        rule.append(width[i], '-');
    }
    out += rule + "\n";
    for (std::size_t r = 1; r < rows.size(); ++r) emit(rows[r]);
    return out;
}

inline nlohmann::json to_json(const MethodResult& r) {
    nlohmann::json j = {{"method", std::string(to_string(r.method))},
                        {"status", r.ok() ? "ok" : "n/a"},
                        {"runtime_seconds", r.runtime_seconds}};
    if (r.ok()) {
        j["mean_error_mm"] = r.mean_error;
        j["std_error_mm"] = r.std_error;
        j["errors_mm"] = r.errors;
    } else {
        j["reason"] = r.reason;
    }
    if (r.protocol) j["protocol"] = to_json(*r.protocol);
    if (r.selection_cv_error) j["selection_cv_error_mm"] = *r.selection_cv_error;
    if (r.kernels) j["kernels"] = to_json(*r.kernels);
    return j;
}

inline nlohmann::json to_json(const CaseResult& c) {
    nlohmann::json methods = nlohmann::json::array();
    for (const auto& m : c.methods) methods.push_back(to_json(m));
    return {{"name", c.name},
            {"training_landmarks", c.training_landmarks},
            {"evaluation_landmarks", c.evaluation_landmarks},
            {"protocol", c.protocol},
            {"runtime_seconds", c.runtime_seconds},
            {"over_budget", c.over_budget},
            {"methods", methods}};
}

inline nlohmann::json report_to_json(std::span<const CaseResult> results) {
    nlohmann::json cases = nlohmann::json::array();
    for (const auto& c : results) cases.push_back(to_json(c));
    return {{"version", format_version},
            {"columns", report_columns},
            {"cases", cases}};
}

} // namespace gpreg
