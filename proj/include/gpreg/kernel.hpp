#pragma once

#include <array>
#include <cmath>
#include <string>
#include <string_view>

#include "gpreg/error.hpp"

namespace gpreg {

enum class KernelFamily : std::uint8_t { gaussian, exponential };

inline std::string_view to_string(KernelFamily f) { return f == KernelFamily::gaussian ? "gaussian" : "exponential"; }

inline KernelFamily parse_kernel_family(std::string_view s) {
    if (s == "gaussian") return KernelFamily::gaussian;
    if (s == "exponential") return KernelFamily::exponential;
    throw Error(ErrorCode::invalid_argument, "unknown kernel family '" + std::string(s) + "'");
}

/// Stationary isotropic covariance for one displacement axis.
///
/// gaussian:    k(h) = sill * exp(-h^2 / param), param in mm^2
/// exponential: k(h) = sill * exp(-h / param),   param in mm
///
/// The nugget is not part of k; it is observation noise added to the Gram diagonal only.
struct KernelSpec {
    KernelFamily family = KernelFamily::gaussian;
    double sill = 1.0;   // mm^2
    double param = 1.0;  // a (gaussian, mm^2) or length scale (exponential, mm)
    double nugget = 0.0; // mm^2

    [[nodiscard]] double covariance(double h) const {
        return family == KernelFamily::gaussian ? sill * std::exp(-(h * h) / param) : sill * std::exp(-h / param);
    }

    // Covariance from a squared distance; avoids the sqrt for the gaussian family.
    [[nodiscard]] double covariance_sq(double h2) const {
        return family == KernelFamily::gaussian ? sill * std::exp(-h2 / param)
                                                : sill * std::exp(-std::sqrt(h2) / param);
    }

    // Distance at which the correlation has dropped to about 5%.
    [[nodiscard]] double effective_range() const {
        return family == KernelFamily::gaussian ? std::sqrt(3.0 * param) : 3.0 * param;
    }

    static KernelSpec from_effective_range(KernelFamily family, double sill, double range, double nugget) {
        const double param = family == KernelFamily::gaussian ? range * range / 3.0 : range / 3.0;
        return {family, sill, param, nugget};
    }

    [[nodiscard]] bool is_valid() const {
        return std::isfinite(sill) && sill > 0.0 && std::isfinite(param) && param > 0.0 && std::isfinite(nugget) &&
               nugget >= 0.0;
    }

    void validate() const {
        if (!is_valid())
            throw Error(ErrorCode::invalid_argument, "invalid kernel: need sill > 0, param > 0, nugget >= 0",
                        "sill=" + std::to_string(sill) + " param=" + std::to_string(param) +
                            " nugget=" + std::to_string(nugget));
    }

    friend bool operator==(const KernelSpec&, const KernelSpec&) = default;
};

// One kernel per displacement axis.
using AxisKernels = std::array<KernelSpec, 3>;

inline AxisKernels same_kernel(const KernelSpec& k) { return {k, k, k}; }

} // namespace gpreg
