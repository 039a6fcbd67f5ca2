#pragma once

// Derivative-free Nelder-Mead simplex minimization with restarts.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>

namespace gpreg {

template <std::size_t Dim>
struct SimplexResult {
    std::array<double, Dim> x{};
    double value = std::numeric_limits<double>::infinity();
    std::size_t evaluations = 0;
    std::size_t restarts = 0;
    bool converged = false;
};

struct SimplexOptions {
    std::size_t max_evaluations = 4000; // per run
    std::size_t max_restarts = 40;
    double relative_tolerance = 1e-12;  // stop restarting when a restart improves less than this
    double absolute_tolerance = 0.0;    // values at or below this count as converged
};

namespace detail {

template <std::size_t Dim, typename F>
SimplexResult<Dim> nelder_mead_run(F& f, const std::array<double, Dim>& start, const std::array<double, Dim>& step,
                                   std::size_t max_evaluations, double tol) {
    constexpr std::size_t n_vertices = Dim + 1;
    std::array<std::array<double, Dim>, n_vertices> v{};
    std::array<double, n_vertices> fv{};
    std::size_t evals = 0;
    auto eval = [&](const std::array<double, Dim>& x) {
        ++evals;
        const double y = f(x);
        return std::isfinite(y) ? y : std::numeric_limits<double>::infinity();
    };

    v[0] = start;
    for (std::size_t i = 0; i < Dim; ++i) {
        v[i + 1] = start;
        v[i + 1][i] += step[i];
    }
    for (std::size_t i = 0; i < n_vertices; ++i) fv[i] = eval(v[i]);

    std::array<std::size_t, n_vertices> order{};
    bool converged = false;
    while (evals < max_evaluations) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return fv[a] < fv[b]; });
        const std::size_t best = order.front();
        const std::size_t worst = order.back();
        const std::size_t second_worst = order[n_vertices - 2];

        const double spread = std::abs(fv[worst] - fv[best]);
        double size = 0.0;
        for (std::size_t i = 0; i < n_vertices; ++i)
            for (std::size_t d = 0; d < Dim; ++d) size = std::max(size, std::abs(v[i][d] - v[best][d]));
        if (spread <= tol * (std::abs(fv[best]) + 1e-300) && size < 1e-10) {
            converged = true;
            break;
        }
        if (size < 1e-14) {
            converged = true;
            break;
        }

        std::array<double, Dim> centroid{};
        for (std::size_t i = 0; i < n_vertices; ++i) {
            if (i == worst) continue;
            for (std::size_t d = 0; d < Dim; ++d) centroid[d] += v[i][d] / static_cast<double>(Dim);
        }
        auto along = [&](double t) {
            std::array<double, Dim> x{};
            for (std::size_t d = 0; d < Dim; ++d) x[d] = centroid[d] + t * (v[worst][d] - centroid[d]);
            return x;
        };

        const auto reflected = along(-1.0);
        const double fr = eval(reflected);
        if (fr < fv[best]) {
            const auto expanded = along(-2.0);
            const double fe = eval(expanded);
            if (fe < fr) {
                v[worst] = expanded;
                fv[worst] = fe;
            } else {
                v[worst] = reflected;
                fv[worst] = fr;
            }
            continue;
        }
        if (fr < fv[second_worst]) {
            v[worst] = reflected;
            fv[worst] = fr;
            continue;
        }
        const bool outside = fr < fv[worst];
        const auto contracted = along(outside ? -0.5 : 0.5);
        const double fc = eval(contracted);
        if (fc < (outside ? fr : fv[worst])) {
            v[worst] = contracted;
            fv[worst] = fc;
            continue;
        }
        for (std::size_t i = 0; i < n_vertices; ++i) {
            if (i == best) continue;
            for (std::size_t d = 0; d < Dim; ++d) v[i][d] = v[best][d] + 0.5 * (v[i][d] - v[best][d]);
            fv[i] = eval(v[i]);
        }
    }

    const auto best_it = std::min_element(fv.begin(), fv.end());
    SimplexResult<Dim> out;
    out.x = v[static_cast<std::size_t>(best_it - fv.begin())];
    out.value = *best_it;
    out.evaluations = evals;
    out.converged = converged;
    return out;
}

} // namespace detail

// Restarts from the incumbent with a fresh simplex until a restart stops improving.
template <std::size_t Dim, typename F>
SimplexResult<Dim> minimize_simplex(F&& f, std::array<double, Dim> start, std::array<double, Dim> step,
                                    const SimplexOptions& options = {}) {
    SimplexResult<Dim> best = detail::nelder_mead_run<Dim>(f, start, step, options.max_evaluations,
                                                           options.relative_tolerance);
    std::size_t total = best.evaluations;
    if (options.max_restarts > 0) best.converged = false;
    for (std::size_t r = 0; r < options.max_restarts; ++r) {
        if (best.value <= options.absolute_tolerance) {
            best.converged = true;
            break;
        }
        std::array<double, Dim> small{};
        for (std::size_t d = 0; d < Dim; ++d) small[d] = step[d] * std::pow(0.5, static_cast<double>(r % 8));
        auto next = detail::nelder_mead_run<Dim>(f, best.x, small, options.max_evaluations, options.relative_tolerance);
        total += next.evaluations;
        const double improvement = best.value - next.value;
        best.restarts = r + 1;
        if (next.value < best.value) {
            best.x = next.x;
            best.value = next.value;
        }
        if (improvement <= options.relative_tolerance * std::abs(best.value)) {
            best.converged = true;
            break;
        }
    }
    best.evaluations = total;
    return best;
}

} // namespace gpreg
