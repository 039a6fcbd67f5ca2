#pragma once

// Test-side reference implementations. These deliberately avoid Eigen and the library's own
// solvers: plain Gaussian elimination, Gauss-Jordan inversion and brute-force loops.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "gpreg/core_types.hpp"
#include "gpreg/kernel.hpp"
#include "gpreg/random.hpp"

namespace oracle {

using Matrix = std::vector<std::vector<double>>;
using Vector = std::vector<double>;

inline Matrix zeros(std::size_t r, std::size_t c) { return Matrix(r, Vector(c, 0.0)); }

// Solves A x = b by Gaussian elimination with partial pivoting.
inline Vector gauss_solve(Matrix a, Vector b) {
    const auto n = a.size();
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
        if (a[piv][col] == 0.0) throw std::runtime_error("oracle: singular system");
        std::swap(a[piv], a[col]);
        std::swap(b[piv], b[col]);
        for (std::size_t r = col + 1; r < n; ++r) {
            const double f = a[r][col] / a[col][col];
            if (f == 0.0) continue;
            for (std::size_t c = col; c < n; ++c) a[r][c] -= f * a[col][c];
            b[r] -= f * b[col];
        }
    }
    Vector x(n);
    for (std::size_t i = n; i-- > 0;) {
        double s = b[i];
        for (std::size_t c = i + 1; c < n; ++c) s -= a[i][c] * x[c];
        x[i] = s / a[i][i];
    }
    return x;
}

// Explicit inverse by Gauss-Jordan elimination with partial pivoting.
inline Matrix inverse(Matrix a) {
    const auto n = a.size();
    Matrix inv = zeros(n, n);
    for (std::size_t i = 0; i < n; ++i) inv[i][i] = 1.0;
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
        if (a[piv][col] == 0.0) throw std::runtime_error("oracle: singular matrix");
        std::swap(a[piv], a[col]);
        std::swap(inv[piv], inv[col]);
        const double d = a[col][col];
        for (std::size_t c = 0; c < n; ++c) {
            a[col][c] /= d;
            inv[col][c] /= d;
        }
        for (std::size_t r = 0; r < n; ++r) {
            if (r == col) continue;
            const double f = a[r][col];
            if (f == 0.0) continue;
            for (std::size_t c = 0; c < n; ++c) {
                a[r][c] -= f * a[col][c];
                inv[r][c] -= f * inv[col][c];
            }
        }
    }
    return inv;
}

inline double kernel_value(const gpreg::KernelSpec& k, const gpreg::Point3& a, const gpreg::Point3& b) {
    const double dx = a.x - b.x, dy = a.y - b.y, dz = a.z - b.z;
    const double h = std::sqrt(dx * dx + dy * dy + dz * dz);
    if (k.family == gpreg::KernelFamily::gaussian) return k.sill * std::exp(-h * h / k.param);
    return k.sill * std::exp(-h / k.param);
}

struct Posterior {
    double mean = 0.0;
    double variance = 0.0;
};

// mu(x) = k*^T (K + nugget I)^-1 y,  var(x) = k(x,x) - k*^T (K + nugget I)^-1 k*
// with the inverse formed explicitly.
inline Posterior dense_posterior(const gpreg::KernelSpec& k, const std::vector<gpreg::Point3>& x,
                                 const std::vector<double>& y, const gpreg::Point3& q, double extra_diag = 0.0) {
    const auto n = x.size();
    Matrix K = zeros(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) K[i][j] = kernel_value(k, x[i], x[j]) + (i == j ? k.nugget + extra_diag : 0.0);
    const auto Kinv = inverse(K);
    Vector ks(n);
    for (std::size_t i = 0; i < n; ++i) ks[i] = kernel_value(k, x[i], q);
    Posterior p;
    p.variance = k.sill;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            p.mean += ks[i] * Kinv[i][j] * y[j];
            p.variance -= ks[i] * Kinv[i][j] * ks[j];
        }
    return p;
}

// Affine least squares via the 4x4 normal equations, solved per output coordinate.
struct Affine {
    double m[3][4]{};
    gpreg::Point3 apply(const gpreg::Point3& p) const {
        return {m[0][0] * p.x + m[0][1] * p.y + m[0][2] * p.z + m[0][3],
                m[1][0] * p.x + m[1][1] * p.y + m[1][2] * p.z + m[1][3],
                m[2][0] * p.x + m[2][1] * p.y + m[2][2] * p.z + m[2][3]};
    }
};

inline Affine fit_affine(const std::vector<gpreg::Point3>& src, const std::vector<gpreg::Point3>& dst) {
    Matrix ata = zeros(4, 4);
    Matrix atb = zeros(4, 3);
    for (std::size_t i = 0; i < src.size(); ++i) {
        const double row[4] = {src[i].x, src[i].y, src[i].z, 1.0};
        for (int r = 0; r < 4; ++r) {
            for (int c = 0; c < 4; ++c) ata[r][c] += row[r] * row[c];
            for (int c = 0; c < 3; ++c) atb[r][c] += row[r] * dst[i][static_cast<std::size_t>(c)];
        }
    }
    Affine out;
    for (int c = 0; c < 3; ++c) {
        Vector rhs{atb[0][c], atb[1][c], atb[2][c], atb[3][c]};
        const auto sol = gauss_solve(ata, rhs);
        for (int k = 0; k < 4; ++k) out.m[c][k] = sol[static_cast<std::size_t>(k)];
    }
    return out;
}

// Brute-force semivariogram cloud for one component.
struct CloudPoint {
    double h;
    double gamma;
};

inline std::vector<CloudPoint> cloud(const std::vector<gpreg::Point3>& x, const std::vector<double>& v) {
    std::vector<CloudPoint> out;
    for (std::size_t i = 0; i < x.size(); ++i)
        for (std::size_t j = i + 1; j < x.size(); ++j) {
            const double dx = x[i].x - x[j].x, dy = x[i].y - x[j].y, dz = x[i].z - x[j].z;
            out.push_back({std::sqrt(dx * dx + dy * dy + dz * dz), 0.5 * (v[i] - v[j]) * (v[i] - v[j])});
        }
    return out;
}

inline std::vector<gpreg::Point3> random_points(gpreg::Rng& rng, std::size_t n, double extent) {
    std::vector<gpreg::Point3> pts(n);
    for (auto& p : pts) p = {rng.uniform(0.0, extent), rng.uniform(0.0, extent), rng.uniform(0.0, extent)};
    return pts;
}

inline double relative_difference(double a, double b) {
    return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

} // namespace oracle
