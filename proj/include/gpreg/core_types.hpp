#pragma once

// Shared domain types: points, landmark pairs, displacement observations, voxel grids.
// All coordinates are world millimetres.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "gpreg/error.hpp"

namespace gpreg {

struct Point3 {
    double x = 0.0;
    double y = 0.0;
    double z = 0.0;

    constexpr double operator[](std::size_t i) const { return i == 0 ? x : (i == 1 ? y : z); }
    constexpr double& operator[](std::size_t i) { return i == 0 ? x : (i == 1 ? y : z); }

    constexpr Point3& operator+=(const Point3& o) { x += o.x; y += o.y; z += o.z; return *this; }
    constexpr Point3& operator-=(const Point3& o) { x -= o.x; y -= o.y; z -= o.z; return *this; }

    friend constexpr Point3 operator+(Point3 a, const Point3& b) { return a += b; }
    friend constexpr Point3 operator-(Point3 a, const Point3& b) { return a -= b; }
    friend constexpr Point3 operator*(double s, const Point3& p) { return {s * p.x, s * p.y, s * p.z}; }
    friend constexpr Point3 operator*(const Point3& p, double s) { return s * p; }
    friend constexpr bool operator==(const Point3&, const Point3&) = default;

    [[nodiscard]] double squared_norm() const { return x * x + y * y + z * z; }
    [[nodiscard]] double norm() const { return std::sqrt(squared_norm()); }
    [[nodiscard]] bool is_finite() const { return std::isfinite(x) && std::isfinite(y) && std::isfinite(z); }
};

// Displacements share the point representation.
using Vec3 = Point3;

inline double distance(const Point3& a, const Point3& b) { return (a - b).norm(); }
inline double squared_distance(const Point3& a, const Point3& b) { return (a - b).squared_norm(); }

enum class Axis : std::uint8_t { x = 0, y = 1, z = 2 };
inline constexpr std::array<Axis, 3> all_axes{Axis::x, Axis::y, Axis::z};

inline std::string_view to_string(Axis a) {
    switch (a) {
        case Axis::x: return "x";
        case Axis::y: return "y";
        case Axis::z: return "z";
    }
    return "?";
}

inline Axis parse_axis(std::string_view s) {
    if (s == "x" || s == "0") return Axis::x;
    if (s == "y" || s == "1") return Axis::y;
    if (s == "z" || s == "2") return Axis::z;
    throw Error(ErrorCode::invalid_argument, "unknown axis '" + std::string(s) + "' (expected x, y or z)");
}

enum class LandmarkSource : std::uint8_t { file, manual };

inline std::string_view to_string(LandmarkSource s) { return s == LandmarkSource::manual ? "manual" : "file"; }

struct LandmarkPair {
    std::int64_t id = 0;
    Point3 pre;  // pre-volume coordinate
    Point3 post; // post-volume coordinate
    LandmarkSource source = LandmarkSource::file;

    friend bool operator==(const LandmarkPair&, const LandmarkPair&) = default;
};

// Two pre-locations closer than this are the same location; the Gram matrix would be singular.
inline constexpr double duplicate_location_tolerance_mm = 1e-9;

struct LandmarkSet {
    std::vector<LandmarkPair> pairs;

    [[nodiscard]] std::size_t size() const { return pairs.size(); }
    [[nodiscard]] bool empty() const { return pairs.empty(); }

    [[nodiscard]] const LandmarkPair* find(std::int64_t id) const {
        auto it = std::find_if(pairs.begin(), pairs.end(), [id](const LandmarkPair& p) { return p.id == id; });
        return it == pairs.end() ? nullptr : &*it;
    }

    [[nodiscard]] std::int64_t next_id() const {
        std::int64_t next = 1;
        for (const auto& p : pairs) next = std::max(next, p.id + 1);
        return next;
    }

    [[nodiscard]] const LandmarkPair* find_pre_location(const Point3& pre) const {
        for (const auto& p : pairs)
            if (distance(p.pre, pre) < duplicate_location_tolerance_mm) return &p;
        return nullptr;
    }

    [[nodiscard]] std::vector<Point3> pre_points() const {
        std::vector<Point3> out;
        out.reserve(pairs.size());
        for (const auto& p : pairs) out.push_back(p.pre);
        return out;
    }

    [[nodiscard]] std::vector<Point3> post_points() const {
        std::vector<Point3> out;
        out.reserve(pairs.size());
        for (const auto& p : pairs) out.push_back(p.post);
        return out;
    }

    friend bool operator==(const LandmarkSet&, const LandmarkSet&) = default;
};

struct DisplacementObservation {
    Point3 location; // pre space
    Vec3 d;
};

enum class ViolationKind : std::uint8_t { duplicate_id, duplicate_location, non_finite };

struct Violation {
    ViolationKind kind;
    std::int64_t id = 0;       // offending pair
    std::int64_t other_id = 0; // for duplicates, the earlier pair
    std::string message;
};

struct ValidationReport {
    std::vector<Violation> violations;
    // Advisory notes that do not make the set invalid.
    std::vector<std::string> notes;

    [[nodiscard]] bool valid() const { return violations.empty(); }
};

inline ValidationReport validate_landmark_set(const LandmarkSet& set) {
    ValidationReport report;
    const auto& pairs = set.pairs;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto& a = pairs[i];
        if (!a.pre.is_finite() || !a.post.is_finite()) {
            report.violations.push_back({ViolationKind::non_finite, a.id, 0,
                                         "landmark " + std::to_string(a.id) + " has a non-finite coordinate"});
        }
        for (std::size_t j = 0; j < i; ++j) {
            const auto& b = pairs[j];
            if (a.id == b.id) {
                report.violations.push_back({ViolationKind::duplicate_id, a.id, b.id,
                                             "duplicate landmark id " + std::to_string(a.id)});
            }
            if (a.pre.is_finite() && b.pre.is_finite() && distance(a.pre, b.pre) < duplicate_location_tolerance_mm) {
                report.violations.push_back({ViolationKind::duplicate_location, a.id, b.id,
                                             "landmarks " + std::to_string(b.id) + " and " + std::to_string(a.id) +
                                                 " share a pre-location"});
            }
        }
    }
    if (pairs.size() < 4) report.notes.emplace_back("insufficient for affine: need >= 4 non-coplanar pairs");
    return report;
}

inline void require_valid(const LandmarkSet& set) {
    const auto report = validate_landmark_set(set);
    if (!report.valid()) {
        const auto& v = report.violations.front();
        const auto code = v.kind == ViolationKind::non_finite ? ErrorCode::invalid_argument : ErrorCode::duplicate;
        throw Error(code, v.message, std::to_string(report.violations.size()) + " violation(s)");
    }
}

// Regular voxel grid; voxel (i,j,k) centre sits at origin + (i,j,k) * spacing.
struct GridSpec {
    Point3 origin;
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    std::array<std::size_t, 3> dims{1, 1, 1};

    [[nodiscard]] std::size_t voxel_count() const { return dims[0] * dims[1] * dims[2]; }

    [[nodiscard]] std::size_t index(std::size_t i, std::size_t j, std::size_t k) const {
        return i + dims[0] * (j + dims[1] * k);
    }

    [[nodiscard]] std::array<std::size_t, 3> ijk(std::size_t linear) const {
        const std::size_t i = linear % dims[0];
        const std::size_t rest = linear / dims[0];
        return {i, rest % dims[1], rest / dims[1]};
    }

    [[nodiscard]] Point3 world(std::size_t i, std::size_t j, std::size_t k) const {
        return {origin.x + static_cast<double>(i) * spacing[0], origin.y + static_cast<double>(j) * spacing[1],
                origin.z + static_cast<double>(k) * spacing[2]};
    }

    [[nodiscard]] Point3 world(std::size_t linear) const {
        const auto c = ijk(linear);
        return world(c[0], c[1], c[2]);
    }

    // Continuous voxel coordinate of a world point.
    [[nodiscard]] Point3 continuous_index(const Point3& p) const {
        return {(p.x - origin.x) / spacing[0], (p.y - origin.y) / spacing[1], (p.z - origin.z) / spacing[2]};
    }

    void validate() const {
        if (!origin.is_finite()) throw Error(ErrorCode::invalid_argument, "grid origin must be finite");
        for (std::size_t a = 0; a < 3; ++a) {
            if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a]))
                throw Error(ErrorCode::invalid_argument, "grid spacing must be strictly positive");
            if (dims[a] < 1) throw Error(ErrorCode::invalid_argument, "grid dims must be >= 1 on every axis");
        }
    }

    friend bool operator==(const GridSpec&, const GridSpec&) = default;
};

} // namespace gpreg
